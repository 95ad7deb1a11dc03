"""Probabilistic registration network.

An encoder-decoder over the concatenated image pair predicts a per-voxel
Gaussian posterior (mean, log-variance) over a stationary velocity field.
A velocity sample is drawn by reparameterization so gradients reach the
posterior parameters, and the KL-style regularizer penalizes rough means
and keeps the posterior variance near the prior.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError, FormatError


@dataclass
class RegNetConfig:
    dims: tuple
    levels: int = 3
    channels: tuple = (16, 32, 32)
    head_stride: int = 2    # posterior resolution: dims / head_stride
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.dims) != 2:
            raise ConfigurationError("RegNetConfig: desk-scale net is 2D")
        if self.levels < 1 or len(self.channels) != self.levels:
            raise ConfigurationError(
                "RegNetConfig: need one channel width per level"
            )
        if min(self.channels) < 1:
            raise ConfigurationError("RegNetConfig: channels must be >= 1")
        down = 2 ** (self.levels - 1)
        if any(n % down for n in self.dims):
            raise ConfigurationError(
                f"RegNetConfig: dims {self.dims} not divisible by {down}"
            )
        hs = self.head_stride
        if hs < 1 or hs & (hs - 1) or hs > down:
            raise ConfigurationError(
                f"RegNetConfig: head_stride must be a power of two <= {down}"
            )


@dataclass
class PosteriorParams:
    """Per-voxel velocity posterior: mean and log-variance, shape (d, *dims)."""

    mu: Tensor
    log_var: Tensor

    def __post_init__(self):
        if self.mu.data.shape != self.log_var.data.shape:
            raise ConfigurationError("PosteriorParams: mu/log_var shapes differ")


LOG_VAR_BIAS_INIT = -10.0
LOG_VAR_MAX = 2.0
INPUT_SHIFT = 0.5   # images live in [0, 1]; features train better zero-centered


class RegNet:
    """UNet-style posterior predictor, fully convolutional, batch-free.

    The posterior heads sit at resolution dims / head_stride and their
    outputs are nearest-upsampled back to full resolution. Predicting the
    velocity on a coarser lattice pools the per-voxel matching gradients,
    which stabilizes training, and matches how the smooth fields this
    model targets are actually parameterized.

    Two training stabilizers live in the forward pass. The log-variance
    head reads a gradient-detached copy of the decoder features: its loss
    terms carry gradients an order of magnitude larger than the mean
    head's, and letting them into the shared trunk drowns out the
    similarity signal that the mean path needs. The log-variance output is
    also soft-capped at LOG_VAR_MAX through a softplus so a transient
    cannot push exp(log_var) to overflow; the cap has slope ~1 in the
    normal operating range.
    """

    def __init__(self, config: RegNetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        ndims = len(config.dims)
        ch = config.channels
        self.params: list[Parameter] = []

        def conv_param(name, cout, cin, k):
            w = Parameter(ad.kaiming_normal(rng, (cout, cin, k, k), cin * k * k),
                          name=f"{name}.w")
            b = Parameter(np.zeros(cout, dtype=np.float32), name=f"{name}.b")
            self.params += [w, b]
            return w, b

        self.enc = [conv_param("enc0", ch[0], 2, 3)]
        for lvl in range(1, config.levels):
            self.enc.append(conv_param(f"enc{lvl}", ch[lvl], ch[lvl - 1], 3))
        # decode down to the head level only; lower skip levels are unused
        self._head_level = config.head_stride.bit_length() - 1
        self.dec = []
        for lvl in range(config.levels - 2, self._head_level - 1, -1):
            cin = ch[lvl + 1] + ch[lvl]
            self.dec.append(conv_param(f"dec{lvl}", ch[lvl], cin, 3))
        head_ch = ch[self._head_level]

        def head_param(name, bias_value):
            w = Parameter(ad.kaiming_normal(rng, (ndims, head_ch), head_ch),
                          name=f"{name}.w")
            b = Parameter(np.full(ndims, bias_value, dtype=np.float32),
                          name=f"{name}.b")
            self.params += [w, b]
            return w, b

        self.mu_head = head_param("mu", 0.0)
        self.log_var_head = head_param("log_var", LOG_VAR_BIAS_INIT)

    def parameters(self) -> list:
        return list(self.params)

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.params}

    def load_state_dict(self, state: dict) -> None:
        for p in self.params:
            if p.name not in state:
                raise FormatError(f"checkpoint missing parameter {p.name}")
            arr = np.asarray(state[p.name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise FormatError(
                    f"checkpoint parameter {p.name} has shape {arr.shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = arr.copy()

    def predict_posterior(self, f, m) -> PosteriorParams:
        """Posterior (mu, log sigma^2) for registering m onto f."""
        ft = f if isinstance(f, Tensor) else Tensor(f)
        mt = m if isinstance(m, Tensor) else Tensor(m)
        dims = self.config.dims
        if ft.data.shape != dims or mt.data.shape != dims:
            raise ConfigurationError(
                f"predict_posterior: expected images of dims {dims}, "
                f"got {ft.data.shape} and {mt.data.shape}"
            )
        x = ad.concat_channels([
            ad.reshape(ad.sub(ft, INPUT_SHIFT), (1,) + dims),
            ad.reshape(ad.sub(mt, INPUT_SHIFT), (1,) + dims)])
        skips = []
        h = x
        for lvl, (w, b) in enumerate(self.enc):
            h = ad.leaky_relu(ad.conv2d(h, w, b, stride=1 if lvl == 0 else 2))
            skips.append(h)
        for i, (w, b) in enumerate(self.dec):
            lvl = self.config.levels - 2 - i
            h = ad.upsample2x(h)
            h = ad.concat_channels([h, skips[lvl]])
            h = ad.leaky_relu(ad.conv2d(h, w, b))
        mu = ad.conv1x1(h, *self.mu_head)
        log_var = ad.conv1x1(Tensor(h.data), *self.log_var_head)
        log_var = ad.sub(LOG_VAR_MAX, ad.softplus(ad.sub(LOG_VAR_MAX, log_var)))
        for _ in range(self._head_level):
            # linear, not nearest: blocky fields would pay ~2x the intended
            # smoothness penalty and warp less cleanly
            mu = ad.upsample2x_linear(mu)
            log_var = ad.upsample2x_linear(log_var)
        return PosteriorParams(mu=mu, log_var=log_var)


def sample_velocity(posterior: PosteriorParams,
                    rng: np.random.Generator) -> Tensor:
    """Reparameterized draw v = mu + exp(log_var / 2) * eps, eps ~ N(0, I)."""
    eps = rng.standard_normal(posterior.mu.data.shape).astype(np.float32)
    std = ad.exp(ad.mul(posterior.log_var, 0.5))
    return ad.add(posterior.mu, ad.mul(std, Tensor(eps)))


def kl_regularizer(posterior: PosteriorParams, lam: float) -> Tensor:
    """Smoothness/KL penalty on the velocity posterior.

    R = (1/2V) sum_w [ lam * sum_d |grad_d mu|^2
                       + lam * K * sum_c var_c  -  sum_c log var_c ]
    with V the voxel count, K = 2 * ndims (lattice degree), and forward
    differences for the spatial gradient. At mu = 0, log_var = 0 in 2D this
    evaluates to exactly 4 * lam.
    """
    if lam <= 0:
        raise ConfigurationError("kl_regularizer: lambda must be > 0")
    mu, log_var = posterior.mu, posterior.log_var
    ndims = mu.data.ndim - 1
    volume = int(np.prod(mu.data.shape[1:]))
    k_degree = 2.0 * ndims

    grad_sq = None
    for axis in range(1, ndims + 1):
        term = ad.tsum(ad.square(ad.spatial_diff(mu, axis=axis)))
        grad_sq = term if grad_sq is None else ad.add(grad_sq, term)
    var_sum = ad.tsum(ad.exp(log_var))
    log_var_sum = ad.tsum(log_var)
    total = ad.add(ad.mul(grad_sq, float(lam)),
                   ad.sub(ad.mul(var_sum, float(lam * k_degree)), log_var_sum))
    return ad.mul(total, 1.0 / (2.0 * volume))


# -- checkpoint container ------------------------------------------------------

_CKPT_CONFIG = "config.json"


def _zip_entry(name: str) -> zipfile.ZipInfo:
    # fixed timestamp: identical runs must produce byte-identical checkpoints
    return zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))


def save_checkpoint(path, config: dict, reg_state: dict,
                    stat_state: dict | None = None) -> None:
    """Write config + named parameter arrays into one zip container."""
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_zip_entry(_CKPT_CONFIG),
                    json.dumps(config, indent=2, sort_keys=True))
        for prefix, state in (("reg", reg_state), ("stat", stat_state or {})):
            for name, arr in sorted(state.items()):
                buf = io.BytesIO()
                np.save(buf, np.asarray(arr), allow_pickle=False)
                zf.writestr(_zip_entry(f"{prefix}/{name}.npy"), buf.getvalue())


def load_checkpoint(path):
    """Read a checkpoint back as (config, reg_state, stat_state or None)."""
    try:
        with zipfile.ZipFile(path) as zf:
            names = zf.namelist()
            if _CKPT_CONFIG not in names:
                raise FormatError(f"{path}: checkpoint missing {_CKPT_CONFIG}")
            config = json.loads(zf.read(_CKPT_CONFIG))
            states = {"reg": {}, "stat": {}}
            for entry in names:
                for prefix in states:
                    head = f"{prefix}/"
                    if entry.startswith(head) and entry.endswith(".npy"):
                        arr = np.load(io.BytesIO(zf.read(entry)),
                                      allow_pickle=False)
                        states[prefix][entry[len(head):-4]] = arr
    except (zipfile.BadZipFile, json.JSONDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint ({exc})") from exc
    return config, states["reg"], states["stat"] or None
