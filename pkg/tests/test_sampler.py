import numpy as np
import pytest
import torch

from eaq.diffusion import NoiseSchedule, TrainConfig, make_schedule, train
from eaq.episode_data import ChannelLayout, layout_for, tensorize
from eaq.sampler import augment, decode_and_filter, reverse_step, sample_trajectories

from conftest import random_episode


@pytest.fixture(scope="module")
def tiny_model():
    rng = np.random.default_rng(7)
    eps = [random_episode(rng, N=2, d_obs=2, num_actions=3, T_max=6) for _ in range(4)]
    ds = tensorize(eps, layout_for(eps, 3, T_max=6))
    return train(ds, TrainConfig(epochs=2, K=10, dim=8)), eps


class Const:
    """Stand-in denoiser returning a fixed x0 prediction."""

    def __init__(self, x0):
        self.x0 = x0

    def __call__(self, x, k):
        return self.x0.expand_as(x)


class TestReverseStep:
    sched = make_schedule(10)

    def test_last_step_is_mean(self):
        x0 = torch.full((1, 3, 4), 0.3)
        xk = torch.randn(1, 3, 4)
        out = reverse_step(xk, 1, Const(x0), self.sched, torch.randn(1, 3, 4) * 100)
        c0, ck = self.sched.posterior_mean_coefs
        torch.testing.assert_close(out, float(c0[0]) * x0 + float(ck[0]) * xk)

    def test_degenerate_posterior(self):
        # at k=1, alpha_bar_{k-1} = 1, so the mean is exactly the predicted x0
        x0 = torch.rand(2, 3, 4) * 2 - 1
        out = reverse_step(torch.randn(2, 3, 4), 1, Const(x0), self.sched, None)
        torch.testing.assert_close(out, x0, atol=1e-6, rtol=0)

    def test_clips_prediction(self):
        out = reverse_step(torch.zeros(1, 2, 2), 1, Const(torch.full((1, 2, 2), 7.0)), self.sched, None)
        torch.testing.assert_close(out, torch.ones(1, 2, 2))

    def test_noise_scale(self):
        x0 = torch.zeros(1, 1, 1)
        out = reverse_step(torch.zeros(1, 1, 1), 5, Const(x0), self.sched, torch.ones(1, 1, 1))
        assert float(out) == pytest.approx(np.sqrt(self.sched.posterior_variance[4]), rel=1e-6)

    def test_sweep_finite(self):
        g = torch.Generator().manual_seed(0)
        net = lambda x, k: torch.tanh(x * 3)  # noqa: E731
        for k in range(1, 11):
            x = torch.randn(4, 5, 6, generator=g) * 5
            out = reverse_step(x, k, net, self.sched, torch.randn(4, 5, 6, generator=g))
            assert out.shape == x.shape and torch.isfinite(out).all()

    @pytest.mark.parametrize("k", [0, 11])
    def test_range(self, k):
        with pytest.raises(ValueError):
            reverse_step(torch.zeros(1, 1, 1), k, Const(torch.zeros(1, 1, 1)), self.sched, None)


class TestSampleTrajectories:
    def test_count_zero(self, tiny_model):
        with pytest.raises(ValueError):
            sample_trajectories(tiny_model[0], 0, seed=0)

    def test_deterministic_and_batch_invariant(self, tiny_model):
        m = tiny_model[0]
        a = sample_trajectories(m, 5, seed=3)
        b = sample_trajectories(m, 5, seed=3, batch_size=2)
        assert a.shape == (5, m.layout.num_features, 6)
        np.testing.assert_allclose(a, b, atol=1e-2)  # same noise; float32 batching only
        assert np.array_equal(a, sample_trajectories(m, 5, seed=3))
        assert not np.allclose(a, sample_trajectories(m, 5, seed=4))

    def test_range(self, tiny_model):
        m = tiny_model[0]
        s = sample_trajectories(m, 100, seed=0)
        sigma_last = np.sqrt(m.schedule.posterior_variance[1])
        assert s.min() >= -1 - 5 * sigma_last and s.max() <= 1 + 5 * sigma_last


class TestDecode:
    layout = ChannelLayout(1, 1, 3, 6)

    def _stats(self, rng):
        eps = [random_episode(rng, N=1, d_obs=1, num_actions=3, T_max=6) for _ in range(3)]
        return tensorize(eps, self.layout).stats

    def test_done_spike(self, rng):
        x = np.full((1, self.layout.num_features, 6), -1.0)
        x[0, self.layout.done_row, 3] = 1.0
        (e,), dropped = decode_and_filter(x, self.layout, self._stats(rng))
        assert e.length == 4 and dropped == 0

    def test_no_spike(self, rng):
        x = np.full((1, self.layout.num_features, 6), -1.0)
        (e,), _ = decode_and_filter(x, self.layout, self._stats(rng))
        assert e.length == 6

    def test_actions_and_rtg(self, rng):
        x = rng.uniform(-1.5, 1.5, size=(20, self.layout.num_features, 6))
        out, _ = decode_and_filter(x, self.layout, self._stats(rng), gamma=0.9)
        for e in out:
            assert e.actions.min() >= 0 and e.actions.max() < 3
            brute = [sum(0.9 ** (j - i) * e.rewards[j] for j in range(i, e.length)) for i in range(e.length)]
            np.testing.assert_allclose(e.rtg, brute, atol=1e-10)
            assert e.q_generated is not None and len(e.q_generated) == e.length

    def test_keep_generated_q(self, rng):
        x = rng.uniform(-1, 1, size=(3, self.layout.num_features, 6))
        out, _ = decode_and_filter(x, self.layout, self._stats(rng), recompute_rtg=False)
        for e in out:
            np.testing.assert_array_equal(e.rtg, e.q_generated)


class TestAugment:
    def test_counts_and_tags(self, tiny_model):
        m, eps = tiny_model
        out = augment(eps[:2], m, scale=3, seed=0)
        assert len(out) == 2 + 6
        assert [e.source for e in out] == ["real"] * 2 + ["synthetic"] * 6
        for e in out[2:]:
            assert e.num_agents == 2 and e.obs_dim == 2
            e.check_actions(3)

    def test_minimal(self, tiny_model):
        m, eps = tiny_model
        assert len(augment(eps[:1], m, scale=1, seed=1)) == 2

    def test_scale_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            augment(tiny_model[1], tiny_model[0], scale=0, seed=0)

    def test_inputs_untouched(self, tiny_model):
        m, eps = tiny_model
        before = [e.source for e in eps]
        augment(eps, m, scale=1, seed=0)
        assert [e.source for e in eps] == before
