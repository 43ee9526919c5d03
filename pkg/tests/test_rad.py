import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eaq.rad import RadConfig, rad_augment, rad_dataset

from conftest import random_episode


def test_identity(episodes):
    out = rad_augment(episodes, RadConfig(1.0, 1.0, "multi"))
    for a, b in zip(episodes, out):
        assert np.array_equal(a.obs, b.obs)


@pytest.mark.parametrize("mode", ["single", "multi"])
def test_bounds_nonnegative(rng, mode):
    eps = [random_episode(rng) for _ in range(5)]
    for e in eps:
        e.obs[:] = np.abs(e.obs)
    for a, b in zip(eps, rad_augment(eps, RadConfig(mode=mode, seed=3))):
        assert np.all(b.obs >= 0.8 * a.obs - 1e-15) and np.all(b.obs <= 1.2 * a.obs + 1e-15)


@pytest.mark.parametrize("mode", ["single", "multi"])
def test_other_channels_bit_identical(episodes, mode):
    for a, b in zip(episodes, rad_augment(episodes, RadConfig(mode=mode))):
        assert a.actions.tobytes() == b.actions.tobytes()
        assert a.rewards.tobytes() == b.rewards.tobytes()
        assert a.rtg.tobytes() == b.rtg.tobytes()
        assert b.source == ("rad_s" if mode == "single" else "rad_m")


def test_deterministic(episodes):
    a = rad_augment(episodes, RadConfig(seed=5))
    b = rad_augment(episodes, RadConfig(seed=5))
    c = rad_augment(episodes, RadConfig(seed=6))
    assert all(np.array_equal(x.obs, y.obs) for x, y in zip(a, b))
    assert not all(np.array_equal(x.obs, y.obs) for x, y in zip(a, c))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_single_is_scalar_multiple_multi_is_not(seed):
    rng = np.random.default_rng(seed)
    e = random_episode(rng, d_obs=4)
    e.obs[:] = rng.uniform(0.5, 2.0, size=e.obs.shape)  # distinct nonzero entries
    s = rad_augment([e], RadConfig(mode="single", seed=seed))[0].obs
    ratio = s / e.obs
    np.testing.assert_allclose(ratio, ratio[..., :1].repeat(4, axis=-1), rtol=1e-12)
    m = rad_augment([e], RadConfig(mode="multi", seed=seed))[0].obs / e.obs
    assert np.any(np.abs(m - m[..., :1]) > 1e-9)


def test_dataset_size_and_tags(episodes):
    out = rad_dataset(episodes, RadConfig(mode="multi"), scale=5)
    assert len(out) == 6 * len(episodes)
    assert [e.source for e in out[:len(episodes)]] == ["real"] * len(episodes)
    assert {e.source for e in out[len(episodes):]} == {"rad_m"}
    # copies differ from one another
    n = len(episodes)
    assert not np.array_equal(out[n].obs, out[2 * n].obs)


@pytest.mark.parametrize("kw", [dict(alpha=0.0), dict(alpha=1.3, beta=1.2), dict(mode="both")])
def test_bad_config(kw):
    with pytest.raises(ValueError):
        RadConfig(**kw)
