"""Posterior network, reparameterized sampling, regularizer, checkpoints."""

import numpy as np
import pytest

from mireg import autodiff as ad
from mireg import transform as tf
from mireg.autodiff import Tensor
from mireg.errors import ConfigurationError, FormatError
from mireg.regnet import (PosteriorParams, RegNet, RegNetConfig, kl_regularizer,
                          load_checkpoint, sample_velocity, save_checkpoint)
from mireg.similarity import mse_loss


@pytest.fixture(scope="module")
def small_net():
    return RegNet(RegNetConfig(dims=(32, 32), levels=2, channels=(6, 8), seed=3))


def _images(rng, dims):
    return (rng.random(dims).astype(np.float32),
            rng.random(dims).astype(np.float32))


class TestPredictPosterior:
    def test_output_shape_contract(self, small_net):
        f, m = _images(np.random.default_rng(0), (32, 32))
        post = small_net.predict_posterior(f, m)
        assert post.mu.data.shape == (2, 32, 32)
        assert post.log_var.data.shape == (2, 32, 32)

    def test_fresh_net_outputs_finite(self, small_net):
        f, m = _images(np.random.default_rng(1), (32, 32))
        post = small_net.predict_posterior(f, m)
        assert np.all(np.isfinite(post.mu.data))
        assert np.all(np.isfinite(post.log_var.data))

    def test_two_calls_bit_identical(self, small_net):
        f, m = _images(np.random.default_rng(2), (32, 32))
        p1 = small_net.predict_posterior(f, m)
        p2 = small_net.predict_posterior(f, m)
        assert np.array_equal(p1.mu.data, p2.mu.data)
        assert np.array_equal(p1.log_var.data, p2.log_var.data)

    def test_dim_mismatch_rejected(self, small_net):
        with pytest.raises(ConfigurationError):
            small_net.predict_posterior(np.zeros((16, 16)), np.zeros((16, 16)))

    def test_translation_covariance_on_interior(self):
        # fully convolutional: shifting inputs by a stride multiple shifts
        # outputs identically away from the padded borders
        net = RegNet(RegNetConfig(dims=(96, 96), levels=3, channels=(4, 6, 6), seed=1))
        f, m = _images(np.random.default_rng(3), (96, 96))
        k = 4  # 2^(levels-1)
        base = net.predict_posterior(f, m).mu.data
        rolled = net.predict_posterior(np.roll(f, k, axis=0),
                                       np.roll(m, k, axis=0)).mu.data
        expect = np.roll(base, k, axis=1)
        margin = 40
        sl = (slice(None), slice(margin, -margin), slice(margin, -margin))
        assert np.allclose(rolled[sl], expect[sl], atol=3e-5)

    def test_indivisible_dims_rejected(self):
        with pytest.raises(ConfigurationError):
            RegNetConfig(dims=(30, 30), levels=3, channels=(4, 4, 4))


class TestSampleVelocity:
    def test_collapses_to_mean_at_tiny_variance(self):
        rng = np.random.default_rng(4)
        mu = Tensor(rng.standard_normal((2, 8, 8)).astype(np.float32))
        post = PosteriorParams(mu=mu, log_var=Tensor(np.full((2, 8, 8), -40.0,
                                                             dtype=np.float32)))
        v = sample_velocity(post, np.random.default_rng(0))
        assert np.allclose(v.data, mu.data, atol=1e-6)

    def test_standard_normal_moments(self):
        # mu=0, log_var=0: over ~1e5 draws the sample behaves like N(0,1)
        dims = (2, 224, 224)
        post = PosteriorParams(mu=Tensor(np.zeros(dims, np.float32)),
                               log_var=Tensor(np.zeros(dims, np.float32)))
        v = sample_velocity(post, np.random.default_rng(5)).data
        assert abs(v.mean()) <= 0.02
        assert 0.95 <= v.var() <= 1.05

    def test_fixed_seed_reproducible(self):
        dims = (2, 8, 8)
        post = PosteriorParams(mu=Tensor(np.zeros(dims, np.float32)),
                               log_var=Tensor(np.zeros(dims, np.float32)))
        a = sample_velocity(post, np.random.default_rng(7)).data
        b = sample_velocity(post, np.random.default_rng(7)).data
        assert np.array_equal(a, b)

    def test_gradient_reaches_posterior_params(self):
        dims = (2, 4, 4)
        mu = Tensor(np.zeros(dims, np.float32), requires_grad=True)
        lv = Tensor(np.zeros(dims, np.float32), requires_grad=True)
        v = sample_velocity(PosteriorParams(mu=mu, log_var=lv),
                            np.random.default_rng(8))
        ad.mean(ad.square(v)).backward()
        assert mu.grad is not None and lv.grad is not None


class TestKlRegularizer:
    def _post(self, mu, log_var):
        return PosteriorParams(mu=Tensor(mu), log_var=Tensor(log_var))

    def test_reference_value_at_standard_posterior(self):
        # mu = 0, log_var = 0, 2D: R = lambda * K * ndims / 2 = 4 * lambda
        post = self._post(np.zeros((2, 12, 10), np.float32),
                          np.zeros((2, 12, 10), np.float32))
        assert kl_regularizer(post, 10.0).item() == pytest.approx(40.0, rel=1e-6)

    def test_constant_mean_adds_nothing(self):
        post = self._post(np.full((2, 9, 9), 3.7, np.float32),
                          np.zeros((2, 9, 9), np.float32))
        assert kl_regularizer(post, 5.0).item() == pytest.approx(20.0, rel=1e-6)

    def test_matches_float64_brute_force(self):
        rng = np.random.default_rng(9)
        mu = 0.1 * rng.standard_normal((2, 7, 6))
        lv = 0.2 * rng.standard_normal((2, 7, 6))
        lam = 10.0
        got = kl_regularizer(self._post(mu, lv), lam).item()

        grad_sq = sum(np.sum(np.diff(mu, axis=ax) ** 2) for ax in (1, 2))
        var = np.exp(lv)
        volume = 7 * 6
        want = (lam * grad_sq + lam * 4.0 * var.sum() - lv.sum()) / (2 * volume)
        assert got == pytest.approx(want, abs=1e-6)

    def test_nonpositive_lambda_rejected(self):
        post = self._post(np.zeros((2, 4, 4), np.float32),
                          np.zeros((2, 4, 4), np.float32))
        with pytest.raises(ConfigurationError):
            kl_regularizer(post, 0.0)

    def test_mu_gradient_vanishes_at_zero_mean(self):
        mu = Tensor(np.zeros((2, 6, 6), np.float32), requires_grad=True)
        lv = Tensor(np.zeros((2, 6, 6), np.float32), requires_grad=True)
        kl_regularizer(PosteriorParams(mu=mu, log_var=lv), 10.0).backward()
        assert np.allclose(mu.grad, 0.0)


class TestEndToEndGradients:
    # The log-variance branch reads detached trunk features, so trunk
    # weight gradients deliberately exclude that path. The two checks
    # below cover every exact path: head weights on the full objective,
    # trunk weights on an objective that never touches log_var.

    @staticmethod
    def _fd_check(net, objective, params, rng, n_picks=6):
        loss = objective()
        loss.backward()
        h = 1e-5
        picks = [(params[i % len(params)],
                  rng.integers(params[i % len(params)].size))
                 for i in range(n_picks)]
        for param, flat_idx in picks:
            ana = param.grad.ravel()[flat_idx]
            orig = param.data.ravel()[flat_idx]
            param.data.ravel()[flat_idx] = orig + h
            with ad.no_grad():
                fp = objective().item()
            param.data.ravel()[flat_idx] = orig - h
            with ad.no_grad():
                fm = objective().item()
            param.data.ravel()[flat_idx] = orig
            num = (fp - fm) / (2 * h)
            denom = max(abs(ana), abs(num), 1e-6)
            assert abs(ana - num) / denom <= 1e-3, \
                f"{param.name}[{flat_idx}]: analytic {ana:.6e} vs fd {num:.6e}"

    def _make(self):
        cfg = RegNetConfig(dims=(8, 8), levels=2, channels=(4, 6), seed=0)
        net = RegNet(cfg)
        for p in net.params:
            p.data = p.data.astype(np.float64)
        rng = np.random.default_rng(10)
        f = rng.random((8, 8))
        m = rng.random((8, 8))
        eps = rng.standard_normal((2, 8, 8))
        return net, f, m, eps, rng

    def test_head_weights_against_finite_differences(self):
        net, f, m, eps, rng = self._make()

        def objective():
            post = net.predict_posterior(Tensor(f), Tensor(m))
            v = ad.add(post.mu, ad.mul(ad.exp(ad.mul(post.log_var, 0.5)),
                                       Tensor(eps)))
            u = tf.integrate_velocity(v, steps=3)
            m_hat = tf.grid_sample(Tensor(m), u)
            return ad.add(kl_regularizer(post, 10.0), mse_loss(Tensor(f), m_hat))

        heads = list(net.mu_head) + list(net.log_var_head)
        self._fd_check(net, objective, heads, rng)

    def test_trunk_weights_against_finite_differences(self):
        net, f, m, _, rng = self._make()

        def objective():
            post = net.predict_posterior(Tensor(f), Tensor(m))
            u = tf.integrate_velocity(post.mu, steps=3)
            m_hat = tf.grid_sample(Tensor(m), u)
            return mse_loss(Tensor(f), m_hat)

        trunk = [p for pair in net.enc + net.dec for p in pair]
        self._fd_check(net, objective, trunk, rng)


class TestCheckpoint:
    def test_round_trip_restores_identical_posterior(self, tmp_path, small_net):
        f, m = _images(np.random.default_rng(11), (32, 32))
        want = small_net.predict_posterior(f, m).mu.data
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, {"dims": [32, 32], "note": 1},
                        small_net.state_dict())
        config, reg_state, stat_state = load_checkpoint(path)
        assert config["dims"] == [32, 32]
        assert stat_state is None
        other = RegNet(RegNetConfig(dims=(32, 32), levels=2, channels=(6, 8),
                                    seed=99))
        other.load_state_dict(reg_state)
        assert np.array_equal(other.predict_posterior(f, m).mu.data, want)

    def test_stat_params_round_trip(self, tmp_path, small_net):
        path = tmp_path / "model.ckpt"
        stat = {"stat1.w": np.ones((3, 2), np.float32)}
        save_checkpoint(path, {}, small_net.state_dict(), stat)
        _, _, stat_back = load_checkpoint(path)
        assert np.array_equal(stat_back["stat1.w"], stat["stat1.w"])

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"this is not a checkpoint")
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_missing_parameter_rejected(self, small_net):
        with pytest.raises(FormatError):
            small_net.load_state_dict({})
