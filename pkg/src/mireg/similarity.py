"""Image-matching losses.

The neural MI estimator scores each (fixed, warped-moving) intensity pair
with a tiny per-voxel critic and plugs the scores into the Donsker-Varadhan
lower bound: E_P[F] - log E_Q[e^F]. Samples from the product of marginals
come from shuffling the warped image, either by a full lattice permutation
(global) or by independent per-voxel displacements within a +-N box
(local). MSE and local NCC baselines share the same objective slot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError, FormatError, NumericError
from .regnet import PosteriorParams, kl_regularizer
from .transform import grid_sample, identity_grid

LOSS_KINDS = ("mine-local", "mine-global", "mse", "ncc")


class StatNet:
    """Per-voxel critic F_theta: two 1x1 conv layers, 2 -> L -> 1.

    Spatially 1x1 filters keep voxels independent, which the DV bound's
    i.i.d. sampling interpretation relies on.
    """

    def __init__(self, width: int = 30, seed: int = 0):
        if width < 1:
            raise ConfigurationError("StatNet: width must be >= 1")
        self.width = width
        rng = np.random.default_rng(seed)
        self.w1 = Parameter(ad.kaiming_normal(rng, (width, 2), 2), name="stat1.w")
        self.b1 = Parameter(np.zeros(width, dtype=np.float32), name="stat1.b")
        self.w2 = Parameter(ad.kaiming_normal(rng, (1, width), width), name="stat2.w")
        self.b2 = Parameter(np.zeros(1, dtype=np.float32), name="stat2.b")

    def parameters(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]

    def state_dict(self) -> dict:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise FormatError(f"checkpoint missing parameter {p.name}")
            arr = np.asarray(state[p.name], dtype=np.float32)
            if arr.shape != p.data.shape:
                raise FormatError(f"checkpoint parameter {p.name} shape mismatch")
            p.data = arr.copy()

    def __call__(self, f, m_hat) -> Tensor:
        ft = f if isinstance(f, Tensor) else Tensor(f)
        mt = m_hat if isinstance(m_hat, Tensor) else Tensor(m_hat)
        if ft.data.shape != mt.data.shape:
            raise ConfigurationError("StatNet: paired inputs must share a shape")
        shape = ft.data.shape
        x = ad.concat_channels([ad.reshape(ft, (1,) + shape),
                                ad.reshape(mt, (1,) + shape)])
        h = ad.leaky_relu(ad.conv1x1(x, self.w1, self.b1))
        out = ad.conv1x1(h, self.w2, self.b2)
        return ad.reshape(out, shape)


@dataclass
class ShuffleSpec:
    """How to sample the product of marginals from one image."""

    mode: str = "local"     # "global" or "local"
    n_radius: int = 8

    def __post_init__(self):
        if self.mode not in ("global", "local"):
            raise ConfigurationError(f"ShuffleSpec: unknown mode {self.mode!r}")
        if self.n_radius < 0:
            raise ConfigurationError("ShuffleSpec: n_radius must be >= 0")


def shuffle(m_hat, spec: ShuffleSpec, rng: np.random.Generator) -> Tensor:
    """Rearranged copy of the image whose voxel pairing is broken.

    global: one fresh uniform permutation of all lattice sites.
    local: per-voxel index offset drawn uniformly from the integer box
    [-N, N]^d, clamped to the lattice. Gradients flow to the gathered
    source values (the indices are not differentiable).
    """
    src = m_hat if isinstance(m_hat, Tensor) else Tensor(m_hat)
    dims = src.data.shape
    volume = src.data.size
    if spec.mode == "global":
        idx = rng.permutation(volume)
    else:
        grid = identity_grid(dims, np.int64).reshape(len(dims), volume)
        delta = rng.integers(-spec.n_radius, spec.n_radius + 1,
                             size=(len(dims), volume))
        idx = np.zeros(volume, dtype=np.int64)
        stride = 1
        for k in range(len(dims) - 1, -1, -1):
            target = np.clip(grid[k] + delta[k], 0, dims[k] - 1)
            idx += target * stride
            stride *= dims[k]
    return ad.reshape(ad.gather(ad.reshape(src, (volume,)), idx), dims)


def dv_bound(statnet: StatNet, f, m_joint, m_shuffled) -> Tensor:
    """Donsker-Varadhan lower bound on MI from one joint + one marginal batch.

    mean of F over truly paired voxels minus log-mean-exp of F over
    shuffled pairings. Differentiable w.r.t. the critic and both images.
    """
    try:
        scores_joint = statnet(f, m_joint)
    except NumericError as exc:
        raise NumericError(f"dv_bound joint term: {exc}") from exc
    try:
        scores_marg = statnet(f, m_shuffled)
    except NumericError as exc:
        raise NumericError(f"dv_bound marginal term: {exc}") from exc
    return ad.sub(ad.mean(scores_joint), ad.log_mean_exp(scores_marg))


def mse_loss(f, m_hat) -> Tensor:
    """Mean squared intensity difference."""
    ft = f if isinstance(f, Tensor) else Tensor(f)
    mt = m_hat if isinstance(m_hat, Tensor) else Tensor(m_hat)
    return ad.mean(ad.square(ad.sub(ft, mt)))


VAR_FLOOR = 1e-5


def ncc_loss(f, m_hat, window: int = 9) -> Tensor:
    """Negative mean of local windowed normalized cross-correlation.

    Window sums come from a box filter (same zero padding, constant w^2
    normalizer); window variances are floored at VAR_FLOOR so constant
    regions contribute zero correlation instead of blowups.
    """
    ft = f if isinstance(f, Tensor) else Tensor(f)
    mt = m_hat if isinstance(m_hat, Tensor) else Tensor(m_hat)
    if ft.data.shape != mt.data.shape or ft.data.ndim != 2:
        raise ConfigurationError("ncc_loss: expects two equal 2D images")
    if window < 1 or window % 2 == 0:
        raise ConfigurationError("ncc_loss: window must be odd and positive")
    dtype = np.result_type(ft.data.dtype, mt.data.dtype)
    ones = Tensor(np.ones((1, 1, window, window), dtype=dtype))
    shape = (1,) + ft.data.shape
    a = ad.reshape(ft, shape)
    b = ad.reshape(mt, shape)

    def box(t):
        return ad.conv2d(t, ones)

    win = float(window * window)
    sum_a, sum_b = box(a), box(b)
    cross = ad.sub(box(ad.mul(a, b)), ad.div(ad.mul(sum_a, sum_b), win))
    var_a = ad.sub(box(ad.square(a)), ad.div(ad.square(sum_a), win))
    var_b = ad.sub(box(ad.square(b)), ad.div(ad.square(sum_b), win))
    denom = ad.sqrt(ad.mul(ad.clip_min(var_a, VAR_FLOOR),
                           ad.clip_min(var_b, VAR_FLOOR)))
    return ad.neg(ad.mean(ad.div(cross, denom)))


@dataclass
class LossConfig:
    """Objective selection: similarity kind, weights, and sampler knobs."""

    kind: str = "mine-local"
    alpha: float = 1.0
    lam: float = 10.0
    n_radius: int = 8
    ncc_window: int = 9
    ema_rate: float | None = None
    shuffle_before_warp: bool = False

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(
                f"LossConfig: kind must be one of {LOSS_KINDS}, got {self.kind!r}"
            )
        if self.alpha < 0:
            raise ConfigurationError("LossConfig: alpha must be >= 0")
        if self.ncc_window % 2 == 0:
            raise ConfigurationError("LossConfig: ncc window must be odd")
        if self.ema_rate is not None and not (0.0 < self.ema_rate < 1.0):
            raise ConfigurationError("LossConfig: ema_rate must be in (0, 1)")
        self._ema_value = None

    def spec(self) -> ShuffleSpec:
        mode = "global" if self.kind == "mine-global" else "local"
        return ShuffleSpec(mode=mode, n_radius=self.n_radius)


class LossParts(NamedTuple):
    loss: Tensor
    similarity: float   # DV bound (mine) or raw baseline loss value
    regularizer: float


def total_loss(f, m, posterior: PosteriorParams, phi_z, statnet,
               cfg: LossConfig, rng: np.random.Generator) -> LossParts:
    """Full training objective: -alpha * similarity + R(posterior, lambda).

    Warps m by phi_z, scores the warped image against f with the configured
    similarity, and adds the posterior regularizer. For mse/ncc the
    similarity term enters as +alpha * loss in the same slot.
    """
    reg = kl_regularizer(posterior, cfg.lam)
    if cfg.kind in ("mse", "ncc"):
        m_hat = grid_sample(m, phi_z)
        sim = mse_loss(f, m_hat) if cfg.kind == "mse" \
            else ncc_loss(f, m_hat, cfg.ncc_window)
        loss = ad.add(ad.mul(sim, float(cfg.alpha)), reg)
        return LossParts(loss, float(sim.data), float(reg.data))

    if statnet is None:
        raise ConfigurationError(f"total_loss: {cfg.kind} requires a StatNet")
    if cfg.shuffle_before_warp:
        m_hat = grid_sample(m, phi_z)
        m_shuf = grid_sample(shuffle(m, cfg.spec(), rng), phi_z)
    else:
        m_hat = grid_sample(m, phi_z)
        m_shuf = shuffle(m_hat, cfg.spec(), rng)

    if cfg.ema_rate is None:
        bound = dv_bound(statnet, f, m_hat, m_shuf)
        loss = ad.add(ad.mul(bound, -float(cfg.alpha)), reg)
        return LossParts(loss, float(bound.data), float(reg.data))

    # EMA-smoothed denominator: trains on a surrogate whose gradient matches
    # the bias-corrected MINE gradient; the reported bound stays the true one.
    scores_joint = statnet(f, m_hat)
    scores_marg = statnet(f, m_shuf)
    mean_joint = ad.mean(scores_joint)
    mean_exp = ad.mean(ad.exp(scores_marg))
    if cfg._ema_value is None:
        cfg._ema_value = float(mean_exp.data)
    cfg._ema_value = (cfg.ema_rate * cfg._ema_value
                      + (1.0 - cfg.ema_rate) * float(mean_exp.data))
    surrogate = ad.sub(mean_joint, ad.div(mean_exp, float(cfg._ema_value)))
    bound_value = float(mean_joint.data) - np.log(float(mean_exp.data))
    loss = ad.add(ad.mul(surrogate, -float(cfg.alpha)), reg)
    return LossParts(loss, bound_value, float(reg.data))


def joint_response_map(statnet: StatNet, grid_res: int = 64):
    """exp(F) over the [0,1]^2 intensity-pair grid, normalized to sum 1.

    Returns (map, grid): map[i, j] responds to fixed intensity grid[i]
    paired with moving intensity grid[j].
    """
    if grid_res < 2:
        raise ConfigurationError("joint_response_map: grid_res must be >= 2")
    grid = np.linspace(0.0, 1.0, grid_res, dtype=np.float32)
    a = np.repeat(grid, grid_res).reshape(grid_res, grid_res)
    b = np.tile(grid, grid_res).reshape(grid_res, grid_res)
    with ad.no_grad():
        scores = statnet(Tensor(a), Tensor(b)).data.astype(np.float64)
    scores -= scores.max()
    out = np.exp(scores)
    return out / out.sum(), grid


def map_entropy(response: np.ndarray) -> float:
    """Shannon entropy (nats) of a normalized response map."""
    p = response[response > 0]
    return float(-(p * np.log(p)).sum())


class MiEstimate(NamedTuple):
    value: float
    critic: StatNet
    history: list       # (step, bound-on-full-set) checkpoints


def fit_critic_to_samples(x: np.ndarray, y: np.ndarray, width: int = 30,
                          steps: int = 1500, lr: float = 1e-3, seed: int = 0,
                          batch: int = 16384, eval_shuffles: int = 10,
                          log_every: int = 0) -> MiEstimate:
    """Train a critic on paired samples and estimate their MI (nats).

    Maximizes the DV bound on minibatches with a fresh in-batch permutation
    each step, then reports the bound on the full sample set averaged over
    several fresh permutations (averaging cuts the variance of the
    log-mean-exp term).
    """
    x = np.asarray(x, dtype=np.float32).ravel()
    y = np.asarray(y, dtype=np.float32).ravel()
    if x.shape != y.shape:
        raise ConfigurationError("fit_critic_to_samples: length mismatch")
    net = StatNet(width=width, seed=seed)
    rng = np.random.default_rng(seed + 1)
    opt = ad.Adam(net.parameters(), lr=lr, beta1=0.9, beta2=0.999)
    spec = ShuffleSpec(mode="global")
    batch = min(batch, x.size)
    xt, yt = Tensor(x), Tensor(y)

    def full_set_bound(shuffles):
        with ad.no_grad():
            return float(np.mean(
                [float(dv_bound(net, xt, yt, shuffle(yt, spec, rng)).data)
                 for _ in range(shuffles)]))

    history = []
    for step in range(steps):
        take = rng.integers(0, x.size, size=batch)
        xb, yb = Tensor(x[take]), Tensor(y[take])
        opt.zero_grad()
        bound = dv_bound(net, xb, yb, shuffle(yb, spec, rng))
        ad.neg(bound).backward()
        opt.step()
        if log_every and (step + 1) % log_every == 0:
            history.append((step + 1, full_set_bound(3)))
    return MiEstimate(full_set_bound(eval_shuffles), net, history)
