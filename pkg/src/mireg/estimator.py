"""Scikit-learn style front end for training and applying registration.

MineRegistration couples the registration network and (for the MI losses)
the per-voxel critic under one Adam optimizer, which is the whole point of
the objective: the similarity measure is learned while it is being used.
fit() consumes image pairs, predict() emits displacement fields, and
transform() returns warped moving images.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from . import transform as tf
from .autodiff import Tensor
from .errors import ConfigurationError, NumericError
from .regnet import (RegNet, RegNetConfig, load_checkpoint, sample_velocity,
                     save_checkpoint)
from .similarity import LOSS_KINDS, LossConfig, StatNet, total_loss


def validate_pairs(X, dims=None, name="X"):
    """Coerce to a float32 (n, 2, *dims) stack of (fixed, moving) pairs."""
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim != 4 or arr.shape[1] != 2:
        raise ConfigurationError(
            f"{name}: expected (n_pairs, 2, height, width), got {arr.shape}"
        )
    if arr.shape[0] < 1:
        raise ConfigurationError(f"{name}: need at least one pair")
    if not np.isfinite(arr).all():
        raise ConfigurationError(f"{name}: contains non-finite values")
    if dims is not None and arr.shape[2:] != tuple(dims):
        raise ConfigurationError(
            f"{name}: spatial dims {arr.shape[2:]} do not match model {tuple(dims)}"
        )
    return arr


def validate_label_pairs(y, n_pairs, dims, name="y"):
    """Coerce to an integer (n, 2, *dims) stack of (fixed, moving) labels."""
    arr = np.asarray(y)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ConfigurationError(f"{name}: label maps must be integer-typed")
    want = (n_pairs, 2) + tuple(dims)
    if arr.shape != want:
        raise ConfigurationError(f"{name}: expected shape {want}, got {arr.shape}")
    if arr.min() < 0:
        raise ConfigurationError(f"{name}: labels must be non-negative")
    return arr


class MineRegistration(BaseEstimator):
    """Deformable registration trained end to end with a learned similarity.

    Parameters mirror the training recipe: `loss` picks the similarity
    ("mine-local", "mine-global", "mse", "ncc"), `alpha` weights it against
    the smoothness/variance regularizer `lam`, and `width`/`n_radius`
    control the critic and its marginal sampler. One Adam instance with
    (`lr`, `beta1`, `beta2`) updates registration and critic parameters in
    the same step. Velocity fields are integrated by `steps` rounds of
    scaling and squaring.
    """

    def __init__(self, loss="mine-local", alpha=1.0, lam=10.0, width=30,
                 n_radius=8, steps=7, epochs=300, lr=1e-4, beta1=0.99,
                 beta2=0.999, levels=3, channels=(16, 32, 32), head_stride=2,
                 ncc_window=9, ema_rate=None, shuffle_before_warp=False,
                 seed=0, verbose=0):
        self.loss = loss
        self.alpha = alpha
        self.lam = lam
        self.width = width
        self.n_radius = n_radius
        self.steps = steps
        self.epochs = epochs
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.levels = levels
        self.channels = channels
        self.head_stride = head_stride
        self.ncc_window = ncc_window
        self.ema_rate = ema_rate
        self.shuffle_before_warp = shuffle_before_warp
        self.seed = seed
        self.verbose = verbose

    def _loss_config(self):
        return LossConfig(kind=self.loss, alpha=self.alpha, lam=self.lam,
                          n_radius=self.n_radius, ncc_window=self.ncc_window,
                          ema_rate=self.ema_rate,
                          shuffle_before_warp=self.shuffle_before_warp)

    def _uses_critic(self):
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(
                f"loss must be one of {LOSS_KINDS}, got {self.loss!r}"
            )
        return self.loss.startswith("mine")

    def fit(self, X, y=None, validation=None):
        """Train on (fixed, moving) pairs.

        X: array-like (n_pairs, 2, h, w) of intensities in [0, 1].
        y: ignored; present for estimator-API compatibility.
        validation: optional (pairs, label_pairs) used only for the
        per-epoch Dice entry in history_ and the best-epoch snapshot.
        """
        pairs = validate_pairs(X)
        dims = pairs.shape[2:]
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        cfg = self._loss_config()
        self.config_ = RegNetConfig(dims=dims, levels=self.levels,
                                    channels=tuple(self.channels),
                                    head_stride=self.head_stride,
                                    seed=self.seed)
        self.regnet_ = RegNet(self.config_)
        self.critic_ = StatNet(width=self.width, seed=self.seed + 1) \
            if self._uses_critic() else None

        params = self.regnet_.parameters()
        if self.critic_ is not None:
            params = params + self.critic_.parameters()
        opt = ad.Adam(params, lr=self.lr, beta1=self.beta1, beta2=self.beta2)
        rng = np.random.default_rng(self.seed)

        val = None
        if validation is not None:
            vp = validate_pairs(validation[0], dims, name="validation pairs")
            vl = validate_label_pairs(validation[1], vp.shape[0], dims,
                                      name="validation labels")
            val = (vp, vl)

        self.history_ = []
        self.best_val_dice_ = None
        self.best_state_ = None
        for epoch in range(self.epochs):
            order = rng.permutation(pairs.shape[0])
            totals, sims, regs = [], [], []
            for step, i in enumerate(order):
                f = Tensor(pairs[i, 0])
                m = Tensor(pairs[i, 1])
                try:
                    posterior = self.regnet_.predict_posterior(f, m)
                    v = sample_velocity(posterior, rng)
                    phi = tf.integrate_velocity(v, steps=self.steps)
                    parts = total_loss(f, m, posterior, phi, self.critic_,
                                       cfg, rng)
                    opt.zero_grad()
                    parts.loss.backward()
                    opt.step()
                except NumericError as exc:
                    raise NumericError(
                        f"epoch {epoch + 1} step {step + 1} (pair {i}): {exc}"
                    ) from exc
                totals.append(parts.loss.item())
                sims.append(parts.similarity)
                regs.append(parts.regularizer)
            row = {
                "epoch": epoch + 1,
                "total_loss": float(np.mean(totals)),
                "similarity": float(np.mean(sims)),
                "regularizer": float(np.mean(regs)),
                "val_dice": None,
            }
            if val is not None:
                row["val_dice"] = self.score(val[0], val[1])
                if (self.best_val_dice_ is None
                        or row["val_dice"] > self.best_val_dice_):
                    self.best_val_dice_ = row["val_dice"]
                    self.best_state_ = self._snapshot()
            self.history_.append(row)
            if self.verbose:
                vd = "-" if row["val_dice"] is None else f"{row['val_dice']:.4f}"
                print(f"epoch {row['epoch']:4d}  loss {row['total_loss']:+.4f}"
                      f"  sim {row['similarity']:+.4f}"
                      f"  reg {row['regularizer']:.4f}  val_dice {vd}",
                      flush=True)
        self.n_iter_ = self.epochs
        return self

    def _snapshot(self):
        state = {"reg": self.regnet_.state_dict()}
        if self.critic_ is not None:
            state["stat"] = self.critic_.state_dict()
        return state

    def predict(self, X):
        """Displacement fields (n_pairs, ndims, h, w) from posterior means."""
        check_is_fitted(self, "regnet_")
        pairs = validate_pairs(X, self.config_.dims)
        out = []
        with ad.no_grad():
            for i in range(pairs.shape[0]):
                posterior = self.regnet_.predict_posterior(
                    Tensor(pairs[i, 0]), Tensor(pairs[i, 1]))
                out.append(tf.integrate_velocity(posterior.mu,
                                                 steps=self.steps).data)
        return np.stack(out)

    def transform(self, X):
        """Warped moving images (n_pairs, h, w)."""
        check_is_fitted(self, "regnet_")
        pairs = validate_pairs(X, self.config_.dims)
        fields = self.predict(pairs)
        with ad.no_grad():
            warped = [tf.grid_sample(Tensor(pairs[i, 1]),
                                     Tensor(fields[i])).data
                      for i in range(pairs.shape[0])]
        return np.stack(warped)

    def register(self, fixed, moving):
        """One pair in, (warped moving, displacement field) out."""
        X = np.stack([np.asarray(fixed, np.float32),
                      np.asarray(moving, np.float32)])[None]
        field = self.predict(X)[0]
        with ad.no_grad():
            warped = tf.grid_sample(Tensor(X[0, 1]), Tensor(field)).data
        return warped, field

    def score(self, X, y):
        """Mean Dice between fixed labels and registered moving labels."""
        from .evalkit import dice
        check_is_fitted(self, "regnet_")
        pairs = validate_pairs(X, self.config_.dims)
        labels = validate_label_pairs(y, pairs.shape[0], self.config_.dims)
        fields = self.predict(pairs)
        scores = []
        for i in range(pairs.shape[0]):
            moved = tf.warp_labels(labels[i, 1], fields[i])
            scores.append(dice(labels[i, 0], moved)[1])
        return float(np.mean(scores))

    # checkpoint plumbing ---------------------------------------------------

    _SAVED_PARAMS = ("loss", "alpha", "lam", "width", "n_radius", "steps",
                     "epochs", "lr", "beta1", "beta2", "levels", "channels",
                     "head_stride", "ncc_window", "ema_rate",
                     "shuffle_before_warp", "seed")

    def save(self, path, extra=None, state=None):
        """Persist params + fitted weights. `extra` lands in the config echo;
        `state` overrides the saved weights (e.g. a best-epoch snapshot)."""
        check_is_fitted(self, "regnet_")
        params = {k: getattr(self, k) for k in self._SAVED_PARAMS}
        params["channels"] = list(self.config_.channels)
        config = {"params": params, "dims": list(self.config_.dims)}
        if extra:
            config["run"] = extra
        state = state or self._snapshot()
        save_checkpoint(path, config, state["reg"], state.get("stat"))

    @classmethod
    def load(cls, path):
        """Rebuild a fitted estimator from save()'s checkpoint."""
        config, reg_state, stat_state = load_checkpoint(path)
        try:
            params = dict(config["params"])
            dims = tuple(config["dims"])
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(
                f"{path}: checkpoint config missing {exc}"
            ) from exc
        params["channels"] = tuple(params.get("channels", ()))
        if params.get("ema_rate") is not None:
            params["ema_rate"] = float(params["ema_rate"])
        est = cls(**params)
        est.config_ = RegNetConfig(dims=dims, levels=est.levels,
                                   channels=est.channels,
                                   head_stride=est.head_stride, seed=est.seed)
        est.regnet_ = RegNet(est.config_)
        est.regnet_.load_state_dict(reg_state)
        est.critic_ = None
        if stat_state is not None:
            est.critic_ = StatNet(width=est.width, seed=est.seed + 1)
            est.critic_.load_state_dict(stat_state)
        est.history_ = []
        est.best_val_dice_ = None
        est.best_state_ = None
        est.n_iter_ = 0
        return est
