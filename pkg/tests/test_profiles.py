import numpy as np
import pytest

from eodbench.profiles import (
    CurrentProfile, ProfileSamplerConfig, crop_extend, current_at, sample_profile, to_samples,
)


def test_profile_validation():
    with pytest.raises(ValueError):
        CurrentProfile(np.array([1.0, 2.0]), np.array([10.0]))
    with pytest.raises(ValueError):
        CurrentProfile(np.array([1.0, 2.0]), np.array([10.0, 10.0]))
    with pytest.raises(ValueError):
        CurrentProfile(np.array([1.0]), np.array([0.0]))
    with pytest.raises(ValueError):
        CurrentProfile(np.array([]), np.array([]))


def test_sample_profile_counts():
    rng = np.random.default_rng(0)
    p0 = sample_profile(rng, ProfileSamplerConfig(n_transitions_min=0, n_transitions_max=0))
    assert p0.n_transitions == 0 and len(p0.segment_values) == 1
    p5 = sample_profile(rng, ProfileSamplerConfig(n_transitions_min=5, n_transitions_max=5))
    assert len(p5.segment_values) == 6
    assert np.all((p5.segment_values >= 0.5) & (p5.segment_values <= 3.0))
    assert p5.horizon == 20000.0


def test_sample_profile_deterministic():
    a = sample_profile(np.random.default_rng(7), ProfileSamplerConfig())
    b = sample_profile(np.random.default_rng(7), ProfileSamplerConfig())
    assert a == b


def test_sample_profile_coverage_10000_draws():
    cfg = ProfileSamplerConfig()
    rng = np.random.default_rng(1)
    draws = [sample_profile(rng, cfg) for _ in range(10_000)]
    values = np.concatenate([p.segment_values for p in draws])
    assert values.min() >= cfg.i_min and values.max() <= cfg.i_max
    assert {p.n_transitions for p in draws} == set(range(cfg.n_transitions_min, cfg.n_transitions_max + 1))


def test_current_at_half_open():
    p = CurrentProfile(np.array([1.0, 2.0]), np.array([100.0, 200.0]))
    assert current_at(p, 0.0) == 1.0
    assert current_at(p, 99.999) == 1.0
    assert current_at(p, 100.0) == 2.0
    assert current_at(p, 200.0) == 2.0
    with pytest.raises(ValueError):
        current_at(p, 200.5)
    with pytest.raises(ValueError):
        current_at(p, -1.0)


def test_current_at_constant():
    p = CurrentProfile.constant(1.7, 50.0)
    assert {current_at(p, t) for t in np.linspace(0, 50, 11)} == {1.7}


def test_crop_extend_examples():
    p = CurrentProfile(np.array([1.0, 2.0, 0.7]), np.array([300.0, 600.0, 1000.0]))
    assert crop_extend(p, 1.0) == p
    ext = crop_extend(p, 1.55)
    assert ext.horizon == pytest.approx(1550.0)
    assert np.array_equal(ext.segment_values, p.segment_values)
    crop = crop_extend(p, 0.55)
    assert crop.horizon == pytest.approx(550.0)
    assert np.array_equal(crop.segment_values, [1.0, 2.0])
    with pytest.raises(ValueError):
        crop_extend(p, 0.0)


def test_to_samples_examples():
    assert len(to_samples(CurrentProfile.constant(1.0, 100.0), 2.0)) == 51
    assert np.all(to_samples(CurrentProfile.constant(1.0, 100.0), 2.0) == 1.0)
    with pytest.raises(ValueError):
        to_samples(CurrentProfile.constant(1.0, 100.0), 0.0)


def test_to_samples_round_trip_transitions():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = sample_profile(rng, ProfileSamplerConfig(horizon_max=2000.0))
        s = to_samples(p, 2.0)
        change = np.flatnonzero(np.diff(s) != 0) + 1
        recovered = change * 2.0
        truth = p.segment_end_times[:-1]
        # adjacent draws can share a value only with probability zero
        assert len(recovered) == len(truth)
        assert np.all(np.abs(recovered - truth) < 2.0 + 1e-9)


def test_from_samples_round_trip():
    s = np.array([1.0, 1.0, 2.0, 2.0, 2.0, 0.5, 0.5])
    p = CurrentProfile.from_samples(s, 2.0)
    assert np.array_equal(to_samples(p, 2.0), s)
    one = CurrentProfile.from_samples(np.array([1.5]), 2.0)
    assert to_samples(one, 2.0)[0] == 1.5
