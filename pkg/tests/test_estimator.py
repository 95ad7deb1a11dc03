"""Estimator front end: validation, fit/predict/transform/score, persistence."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mireg import synthdata as sd
from mireg.errors import ConfigurationError
from mireg.estimator import (MineRegistration, validate_label_pairs,
                             validate_pairs)

DIMS = (32, 32)


def make_dataset(n_pairs, seed=0):
    """Small atlas-to-subject set: pairs (n, 2, h, w) plus label pairs."""
    rng = np.random.default_rng(seed)
    atlas, atlas_lab = sd.gen_labeled_shape(rng, dims=DIMS, n_labels=3)
    pairs, labels = [], []
    for _ in range(n_pairs):
        p = sd.gen_pair(rng, (atlas, atlas_lab), deform_magnitude=2.0,
                        smoothness=4.0)
        pairs.append(np.stack([atlas.data, p.volume.data]))
        labels.append(np.stack([atlas_lab.labels, p.labels.labels]))
    return np.asarray(pairs, np.float32), np.asarray(labels)


@pytest.fixture(scope="module")
def tiny_ds():
    return make_dataset(2, seed=3)


@pytest.fixture(scope="module")
def fitted_mse(tiny_ds):
    est = MineRegistration(loss="mse", epochs=2, lr=1e-3, seed=0)
    return est.fit(tiny_ds[0])


class TestValidation:
    def test_pairs_wrong_rank_rejected(self):
        with pytest.raises(ConfigurationError, match="expected"):
            validate_pairs(np.zeros((2, 32, 32)))

    def test_pairs_wrong_pair_axis_rejected(self):
        with pytest.raises(ConfigurationError):
            validate_pairs(np.zeros((1, 3, 32, 32)))

    def test_pairs_nan_rejected(self):
        bad = np.zeros((1, 2, 8, 8))
        bad[0, 0, 0, 0] = np.nan
        with pytest.raises(ConfigurationError, match="non-finite"):
            validate_pairs(bad)

    def test_pairs_dims_mismatch_rejected(self):
        with pytest.raises(ConfigurationError, match="spatial dims"):
            validate_pairs(np.zeros((1, 2, 8, 8)), dims=(16, 16))

    def test_label_pairs_float_dtype_rejected(self):
        with pytest.raises(ConfigurationError, match="integer"):
            validate_label_pairs(np.zeros((1, 2, 8, 8)), 1, (8, 8))

    def test_label_pairs_shape_and_sign_checked(self):
        with pytest.raises(ConfigurationError):
            validate_label_pairs(np.zeros((2, 2, 8, 8), np.int32), 1, (8, 8))
        with pytest.raises(ConfigurationError, match="non-negative"):
            validate_label_pairs(-np.ones((1, 2, 8, 8), np.int32), 1, (8, 8))

    def test_unknown_loss_rejected_at_fit(self, tiny_ds):
        est = MineRegistration(loss="ssim", epochs=1)
        with pytest.raises(ConfigurationError, match="ssim"):
            est.fit(tiny_ds[0])

    def test_nonpositive_epochs_rejected(self, tiny_ds):
        with pytest.raises(ConfigurationError, match="epochs"):
            MineRegistration(epochs=0).fit(tiny_ds[0])


class TestFit:
    def test_fit_returns_self_and_records_history(self, fitted_mse):
        assert fitted_mse.n_iter_ == 2
        assert len(fitted_mse.history_) == 2
        row = fitted_mse.history_[0]
        assert set(row) == {"epoch", "total_loss", "similarity",
                            "regularizer", "val_dice"}
        assert row["val_dice"] is None

    def test_mse_fit_has_no_critic(self, fitted_mse):
        assert fitted_mse.critic_ is None

    def test_mine_fit_builds_critic(self, tiny_ds):
        est = MineRegistration(loss="mine-local", epochs=1, seed=0)
        est.fit(tiny_ds[0])
        assert est.critic_ is not None
        assert est.best_state_ is None  # no validation set supplied

    def test_validation_tracks_best_epoch(self, tiny_ds):
        pairs, labels = tiny_ds
        est = MineRegistration(loss="mse", epochs=3, lr=1e-3, seed=0)
        est.fit(pairs, validation=(pairs, labels))
        dices = [r["val_dice"] for r in est.history_]
        assert all(d is not None for d in dices)
        assert est.best_val_dice_ == max(dices)
        assert "reg" in est.best_state_

    def test_validation_dims_must_match(self, tiny_ds):
        other_pairs = np.zeros((1, 2, 16, 16), np.float32)
        other_labels = np.zeros((1, 2, 16, 16), np.int32)
        est = MineRegistration(loss="mse", epochs=1)
        with pytest.raises(ConfigurationError, match="spatial dims"):
            est.fit(tiny_ds[0], validation=(other_pairs, other_labels))

    def test_same_seed_reproduces_weights_bitwise(self, tiny_ds):
        outs = []
        for _ in range(2):
            est = MineRegistration(loss="mine-local", epochs=2, seed=11)
            est.fit(tiny_ds[0])
            outs.append(est.predict(tiny_ds[0]))
        assert np.array_equal(outs[0], outs[1])


class TestPredictTransformScore:
    def test_predict_shape_and_finiteness(self, fitted_mse, tiny_ds):
        fields = fitted_mse.predict(tiny_ds[0])
        assert fields.shape == (2, 2) + DIMS
        assert np.isfinite(fields).all()

    def test_transform_stays_in_intensity_range(self, fitted_mse, tiny_ds):
        warped = fitted_mse.transform(tiny_ds[0])
        assert warped.shape == (2,) + DIMS
        assert warped.min() >= 0.0 and warped.max() <= 1.0

    def test_register_single_pair(self, fitted_mse, tiny_ds):
        warped, field = fitted_mse.register(tiny_ds[0][0, 0], tiny_ds[0][0, 1])
        assert warped.shape == DIMS
        assert field.shape == (2,) + DIMS

    def test_score_is_mean_dice_in_unit_interval(self, fitted_mse, tiny_ds):
        s = fitted_mse.score(*tiny_ds)
        assert 0.0 <= s <= 1.0

    def test_predict_before_fit_raises(self, tiny_ds):
        with pytest.raises(NotFittedError):
            MineRegistration().predict(tiny_ds[0])

    def test_predict_rejects_other_resolution(self, fitted_mse):
        with pytest.raises(ConfigurationError, match="spatial dims"):
            fitted_mse.predict(np.zeros((1, 2, 16, 16), np.float32))


class TestSklearnProtocol:
    def test_get_params_round_trips_through_clone(self):
        est = MineRegistration(loss="mine-global", alpha=2.0, lam=5.0,
                               epochs=7, seed=4)
        dup = clone(est)
        assert dup.get_params() == est.get_params()

    def test_set_params_chains(self):
        est = MineRegistration().set_params(lr=1e-2, n_radius=4)
        assert est.lr == 1e-2 and est.n_radius == 4

    def test_defaults_match_training_recipe(self):
        p = MineRegistration().get_params()
        assert p["loss"] == "mine-local"
        assert p["lam"] == 10.0 and p["width"] == 30 and p["n_radius"] == 8
        assert p["beta1"] == 0.99 and p["beta2"] == 0.999


class TestPersistence:
    def test_save_load_round_trip(self, tmp_path, tiny_ds):
        est = MineRegistration(loss="mine-local", epochs=2, seed=5)
        est.fit(tiny_ds[0])
        path = tmp_path / "model.mreg"
        est.save(path)
        back = MineRegistration.load(path)
        assert back.get_params() == est.get_params()
        assert np.array_equal(back.predict(tiny_ds[0]), est.predict(tiny_ds[0]))
        assert back.critic_ is not None

    def test_save_best_snapshot_state(self, tmp_path, tiny_ds):
        pairs, labels = tiny_ds
        est = MineRegistration(loss="mse", epochs=3, lr=1e-3, seed=0)
        est.fit(pairs, validation=(pairs, labels))
        path = tmp_path / "best.mreg"
        est.save(path, state=est.best_state_)
        back = MineRegistration.load(path)
        assert back.score(pairs, labels) == pytest.approx(est.best_val_dice_)

    def test_mse_checkpoint_has_no_critic(self, tmp_path, fitted_mse, tiny_ds):
        path = tmp_path / "mse.mreg"
        fitted_mse.save(path, extra={"note": "unit test"})
        back = MineRegistration.load(path)
        assert back.critic_ is None
        assert np.array_equal(back.predict(tiny_ds[0]),
                              fitted_mse.predict(tiny_ds[0]))
