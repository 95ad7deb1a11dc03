"""Synthetic registration data: labeled shapes, ground-truth deformations,
modality transfer, and the MVOL on-disk container.

A dataset is anchored to one base (atlas) image. Subjects are random smooth
diffeomorphic warps of the atlas, so every subject carries a label map in
correspondence with the atlas and the deformation that produced it. A
second modality is simulated by a piecewise-linear intensity transfer curve
plus a multiplicative low-frequency bias field and noise; geometry is never
touched by the modality step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.ndimage import gaussian_filter

from . import autodiff as ad
from . import transform as tf
from .errors import ConfigurationError, FormatError

MIN_LABEL_VOXELS = 100


@dataclass
class Volume:
    """Scalar image with intensities in [0, 1], isotropic spacing."""

    data: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if not np.all(np.isfinite(self.data)):
            raise ConfigurationError("Volume: non-finite intensities")
        if self.data.min() < -1e-6 or self.data.max() > 1.0 + 1e-6:
            raise ConfigurationError("Volume: intensities must lie in [0, 1]")

    @property
    def dims(self):
        return self.data.shape


@dataclass
class LabelMap:
    """Integer segmentation; 0 is background."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if not np.issubdtype(lab.dtype, np.integer):
            raise ConfigurationError("LabelMap: labels must be integers")
        if lab.min() < 0:
            raise ConfigurationError("LabelMap: negative label")
        self.labels = lab.astype(np.uint16)

    @property
    def dims(self):
        return self.labels.shape


@dataclass
class TransferCurve:
    """Piecewise-linear intensity remap plus acquisition artifacts."""

    breakpoints: list = field(default_factory=lambda: [(0.0, 0.0), (1.0, 1.0)])
    noise_sd: float = 0.0
    bias_amplitude: float = 0.0

    def __post_init__(self):
        pts = [(float(a), float(b)) for a, b in self.breakpoints]
        if len(pts) < 2:
            raise ConfigurationError("TransferCurve: need at least 2 breakpoints")
        xs = [p[0] for p in pts]
        if xs != sorted(xs):
            raise ConfigurationError("TransferCurve: breakpoints must be sorted by input")
        for a, b in pts:
            if not (0.0 <= a <= 1.0 and 0.0 <= b <= 1.0):
                raise ConfigurationError("TransferCurve: breakpoints must lie in [0,1]^2")
        self.breakpoints = pts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        xs = np.array([p[0] for p in self.breakpoints])
        ys = np.array([p[1] for p in self.breakpoints])
        return np.interp(x, xs, ys)


def identity_curve() -> TransferCurve:
    return TransferCurve([(0.0, 0.0), (1.0, 1.0)])


def inversion_curve() -> TransferCurve:
    return TransferCurve([(0.0, 1.0), (1.0, 0.0)])


def vee_curve(noise_sd: float = 0.0, bias_amplitude: float = 0.0) -> TransferCurve:
    """Non-monotone V-shaped remap: kills linear correlation, keeps MI."""
    return TransferCurve([(0.0, 0.92), (0.5, 0.05), (1.0, 0.92)],
                         noise_sd=noise_sd, bias_amplitude=bias_amplitude)


class GroundTruthPair(NamedTuple):
    volume: Volume
    labels: LabelMap
    disp: np.ndarray       # displacement that produced the moving image
    velocity: np.ndarray   # its stationary velocity (integrate(-velocity) inverts)


def smooth_noise(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    """Gaussian-smoothed white noise, normalized to unit max magnitude."""
    x = gaussian_filter(rng.standard_normal(dims), sigma)
    peak = np.abs(x).max()
    return x / peak if peak > 0 else x


def gen_labeled_shape(rng: np.random.Generator, dims=(192, 192), n_labels: int = 8,
                      texture: float = 0.15):
    """Random smooth blob with quantile-banded internal structures.

    Returns (Volume, LabelMap). Labels 1..n_labels-1 partition the
    foreground into nested/adjacent bands of a smooth scalar field; every
    label is guaranteed at least MIN_LABEL_VOXELS voxels. `texture`
    scales a smooth intensity pattern layered over the bands; it is what
    gives the similarity losses dense matching evidence away from band
    edges, so keep it well above zero for anything that trains.
    """
    if n_labels < 2:
        raise ConfigurationError("gen_labeled_shape: need n_labels >= 2")
    if not 0.0 <= texture <= 0.2:
        raise ConfigurationError("gen_labeled_shape: texture outside [0, 0.2]")
    dims = tuple(int(n) for n in dims)
    total = int(np.prod(dims))
    n_fg = n_labels - 1
    if n_fg * MIN_LABEL_VOXELS > 0.5 * total:
        raise ConfigurationError(
            f"gen_labeled_shape: {n_labels} labels infeasible for dims {dims}"
        )
    side = min(dims)

    # foreground blob: smoothed noise on a radial bowl, top 45% by score
    center = np.array(dims) / 2.0 + rng.uniform(-side / 16, side / 16, size=len(dims))
    grid = tf.identity_grid(dims, np.float64)
    r2 = sum((grid[k] - center[k]) ** 2 for k in range(len(dims))) / (side / 2.2) ** 2
    score = smooth_noise(rng, dims, sigma=side / 6) + 1.3 * (1.0 - r2)
    fg = score > np.quantile(score, 0.55)
    fg_count = int(fg.sum())
    if fg_count < n_fg * MIN_LABEL_VOXELS:
        raise ConfigurationError("gen_labeled_shape: foreground too small for label budget")

    # band the foreground by quantiles of an independent smooth field
    structure = smooth_noise(rng, dims, sigma=side / 10)
    inside = structure[fg]
    edges = np.quantile(inside, np.linspace(0, 1, n_fg + 1))
    edges[0], edges[-1] = -np.inf, np.inf
    labels = np.zeros(dims, dtype=np.uint16)
    labels[fg] = np.clip(np.searchsorted(edges, inside, side="right"), 1, n_fg)
    counts = np.bincount(labels.ravel(), minlength=n_labels)
    if counts[1:].min() < MIN_LABEL_VOXELS:
        raise ConfigurationError(
            f"gen_labeled_shape: smallest structure has {counts[1:].min()} voxels"
        )

    # Per-band intensity levels: mid-gray background with bands placed
    # symmetrically around 0.5 (any unpaired offset is the smallest one).
    # A symmetric palette keeps Pearson correlation across a symmetric
    # non-monotone transfer curve near zero, which the multi-modal task
    # relies on. Assignment to bands is shuffled for contrast.
    mags = np.linspace(0.40, 0.14, num=(n_fg + 1) // 2)
    offsets = np.array([s * m for m in mags for s in (1.0, -1.0)][:n_fg])
    levels = rng.permutation(0.5 + offsets)
    lut = np.concatenate([[0.5], levels]).astype(np.float32)
    img = lut[labels]
    img = img + texture * smooth_noise(rng, dims, sigma=3.0)
    return Volume(np.clip(img, 0.0, 1.0)), LabelMap(labels)


def gen_pair(rng: np.random.Generator, base, deform_magnitude: float = 4.0,
             smoothness: float = 8.0, steps: int = 7) -> GroundTruthPair:
    """Warp a (Volume, LabelMap) base by a random smooth diffeomorphism.

    The velocity is Gaussian-smoothed white noise scaled so the mean
    per-voxel displacement magnitude is ~deform_magnitude voxels. Fields
    whose Jacobian is not positive everywhere are redrawn (up to 5 times).
    """
    vol, lab = base
    dims = vol.dims
    d = len(dims)
    if deform_magnitude < 0:
        raise ConfigurationError("gen_pair: deform_magnitude must be >= 0")
    for _ in range(5):
        v = np.stack([gaussian_filter(rng.standard_normal(dims), smoothness)
                      for _ in range(d)])
        norm = np.sqrt((v ** 2).sum(axis=0)).mean()
        if deform_magnitude > 0 and norm > 0:
            v *= deform_magnitude / norm
        else:
            v[:] = 0.0
        v = v.astype(np.float32)
        with ad.no_grad():
            u = tf.integrate_velocity(ad.Tensor(v), steps=steps).data
        det = tf.jacobian_determinant(u)
        if det[tuple(slice(1, -1) for _ in dims)].min() > 0:
            break
    else:
        raise ConfigurationError(
            "gen_pair: could not draw a fold-free deformation; "
            "lower deform_magnitude or raise smoothness"
        )
    with ad.no_grad():
        warped = tf.grid_sample(ad.Tensor(vol.data), ad.Tensor(u)).data
    moving_lab = tf.warp_labels(lab.labels, u)
    return GroundTruthPair(Volume(np.clip(warped, 0.0, 1.0)),
                           LabelMap(moving_lab), u, v)


def apply_modality(vol: Volume, curve: TransferCurve,
                   rng: np.random.Generator | None = None) -> Volume:
    """Remap intensities through the curve, then bias field and noise.

    Geometry is untouched: the output shares the input's label map.
    """
    out = curve(vol.data.astype(np.float64))
    if curve.bias_amplitude > 0:
        if rng is None:
            raise ConfigurationError("apply_modality: bias field needs an rng")
        bias = 1.0 + curve.bias_amplitude * smooth_noise(rng, vol.dims,
                                                         sigma=min(vol.dims) / 4)
        out = out * bias
    if curve.noise_sd > 0:
        if rng is None:
            raise ConfigurationError("apply_modality: noise needs an rng")
        out = out + rng.normal(0.0, curve.noise_sd, size=vol.dims)
    return Volume(np.clip(out, 0.0, 1.0).astype(np.float32))


# -- MVOL container -----------------------------------------------------------
#
# Little-endian layout:
#   magic "MVOL" | version u8=1 | kind u8 (0 float, 1 labels) | ndims u8 |
#   reserved u8=0 | dims u32 x ndims | payload (f4 or u2, row-major)

_MAGIC = b"MVOL"
_HEADER = 8
_MAX_PAYLOAD = 1 << 40


def _write_mvol(path, kind: int, arr: np.ndarray) -> None:
    dtype = "<f4" if kind == 0 else "<u2"
    header = _MAGIC + bytes([1, kind, arr.ndim, 0])
    dims = np.asarray(arr.shape, dtype="<u4").tobytes()
    Path(path).write_bytes(header + dims + np.ascontiguousarray(arr, dtype).tobytes())


def _read_mvol(path):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER:
        raise FormatError(f"{path}: truncated header at byte {len(raw)}")
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic at byte 0")
    version, kind, ndims, reserved = raw[4], raw[5], raw[6], raw[7]
    if version != 1:
        raise FormatError(f"{path}: unsupported version {version} at byte 4")
    if kind not in (0, 1):
        raise FormatError(f"{path}: unknown kind {kind} at byte 5")
    if ndims == 0:
        raise FormatError(f"{path}: zero ndims at byte 6")
    if reserved != 0:
        raise FormatError(f"{path}: nonzero reserved byte at byte 7")
    dims_end = _HEADER + 4 * ndims
    if len(raw) < dims_end:
        raise FormatError(f"{path}: truncated dims at byte {len(raw)}")
    dims = tuple(int(x) for x in np.frombuffer(raw, "<u4", count=ndims, offset=_HEADER))
    if min(dims) == 0:
        raise FormatError(f"{path}: zero-length dim at byte {_HEADER}")
    itemsize = 4 if kind == 0 else 2
    count = 1
    for n in dims:
        count *= n
    if count * itemsize > _MAX_PAYLOAD:
        raise FormatError(f"{path}: dims product overflows at byte {_HEADER}")
    if len(raw) != dims_end + count * itemsize:
        raise FormatError(
            f"{path}: payload length {len(raw) - dims_end} does not match "
            f"header dims at byte {dims_end}"
        )
    dtype = "<f4" if kind == 0 else "<u2"
    return kind, np.frombuffer(raw, dtype, offset=dims_end).reshape(dims).copy()


def write_volume(path, v) -> None:
    """Serialize a Volume, LabelMap, or raw array (float -> kind 0, int -> 1)."""
    if isinstance(v, Volume):
        _write_mvol(path, 0, v.data)
    elif isinstance(v, LabelMap):
        _write_mvol(path, 1, v.labels)
    elif isinstance(v, np.ndarray):
        kind = 1 if np.issubdtype(v.dtype, np.integer) else 0
        if kind == 1 and (v.min() < 0 or v.max() > np.iinfo(np.uint16).max):
            raise ConfigurationError("write_volume: labels out of u16 range")
        _write_mvol(path, kind, v)
    else:
        raise ConfigurationError(f"write_volume: cannot serialize {type(v).__name__}")


def read_volume(path):
    """Read an MVOL file into a Volume (kind 0) or LabelMap (kind 1)."""
    kind, arr = _read_mvol(path)
    return Volume(arr) if kind == 0 else LabelMap(arr)


def read_field(path) -> np.ndarray:
    """Read a kind-0 MVOL as a raw float array (e.g., a displacement field)."""
    kind, arr = _read_mvol(path)
    if kind != 0:
        raise FormatError(f"{path}: expected float payload, found labels")
    return arr
