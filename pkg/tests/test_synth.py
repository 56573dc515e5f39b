import numpy as np
import pytest

from blockfallback.synth import OutlierSpec, analyze, generate, top_fraction


def test_single_channel_example():
    m = generate(OutlierSpec(64, 32, body_std=0.0, channel_outliers=((3, 100.0),), seed=1))
    assert not np.delete(m, 3, axis=1).any()
    np.testing.assert_array_equal(np.abs(m[:, 3]), 100.0)
    assert (m[:, 3] > 0).any() and (m[:, 3] < 0).any()
    s = analyze(m)
    assert s.channel_max == 100.0
    assert s.others_max == 0.0


def test_occasional_count():
    spec = OutlierSpec(1024, 1024, body_std=0.0, occasional=(0.001, 150.0), seed=3)
    assert spec.occasional_count == 1049
    m = generate(spec)
    assert (np.abs(m) == 150.0).sum() == 1049
    assert np.count_nonzero(m) == 1049


def test_glu_kurtosis_exceeds_gaussian():
    m = generate(OutlierSpec.glu_default(1024, 1024, seed=0)).astype(np.float64).ravel()
    z = (m - m.mean()) / m.std()
    assert np.mean(z**4) > 3.0


def test_glu_sparsity_below_one_percent():
    for seed in range(3):
        m = generate(OutlierSpec.glu_default(1024, 1024, seed=seed))
        assert np.mean(np.abs(m) > 10.0) < 0.01


def test_determinism():
    spec = OutlierSpec(128, 64, channel_outliers=((5, 50.0),), token_outliers=((2, 80.0),), occasional=(0.01, 30.0), seed=9)
    assert generate(spec).tobytes() == generate(spec).tobytes()
    other = OutlierSpec(**{**spec.__dict__, "seed": 10})
    assert generate(spec).tobytes() != generate(other).tobytes()
    g = OutlierSpec.glu_default(128, 128, seed=4)
    assert generate(g).tobytes() == generate(g).tobytes()


def test_injection_fidelity():
    spec = OutlierSpec(
        200,
        100,
        channel_outliers=((7, 40.0), (90, 70.0)),
        token_outliers=((11, 55.0),),
        occasional=(0.005, 25.0),
        seed=2,
    )
    m = generate(spec)
    np.testing.assert_array_equal(np.abs(np.delete(m[:, 7], 11)), 40.0)
    np.testing.assert_array_equal(np.abs(m[11, :]), np.where(np.arange(100) == 90, 70.0, 55.0))
    np.testing.assert_array_equal(np.abs(m[:, 90]), 70.0)
    free = np.ones(m.shape, bool)
    free[:, [7, 90]] = False
    free[11, :] = False
    assert (np.abs(m[free]) == 25.0).sum() == spec.occasional_count


def test_ones_matrix():
    s = analyze(np.ones((40, 40)))
    assert s.token_max == s.channel_max == s.others_max == 1.0
    assert s.sparsity[1.0] == 1.0


def test_recovers_injected_maxima():
    spec = OutlierSpec(
        1024,
        1024,
        channel_outliers=((3, 120.0),),
        token_outliers=((7, 600.0),),
        occasional=(0.001, 150.0),
        seed=1,
    )
    s = analyze(generate(spec))
    assert s.token_max == 600.0
    assert s.channel_max == 120.0
    assert s.others_max == 150.0
    assert 7 in s.top_tokens and 3 in s.top_channels
    assert s.top_tokens.size == s.top_channels.size == 52


def test_top_fraction_ceil_and_ties():
    np.testing.assert_array_equal(top_fraction(np.array([1.0, 5.0, 3.0]), 0.05), [1])
    np.testing.assert_array_equal(top_fraction(np.ones(4), 0.5), [0, 1])


def test_sparsity_quantiles_sorted():
    s = analyze(generate(OutlierSpec.glu_default(256, 256)))
    vals = [s.sparsity[q] for q in sorted(s.sparsity)]
    assert vals == sorted(vals)


def test_spec_validation():
    with pytest.raises(ValueError):
        OutlierSpec(4, 4, channel_outliers=((4, 1.0),))
    with pytest.raises(ValueError):
        OutlierSpec(4, 4, token_outliers=((0, -1.0),))
    with pytest.raises(ValueError):
        OutlierSpec(4, 4, occasional=(1.5, 1.0))
    with pytest.raises(ValueError):
        OutlierSpec(0, 4)
