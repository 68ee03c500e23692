import numpy as np
import pytest

from mcdistill.rng import Rng
from mcdistill.tensor import ShapeError, Tensor
from mcdistill.uncertainty import (
    RatioSchedule,
    UncertaintyEstimate,
    combine_residual,
    dropout_pass,
    estimate_uncertainty,
    schedule_ratios,
)


def test_strategy_a_fixed():
    for epoch in (0, 3, 50):
        assert schedule_ratios(RatioSchedule("A", 5), epoch) == [0.15, 0.15, 0.15, 0.15, 0.15]


def test_strategy_b_arithmetic():
    for epoch in (0, 10):
        assert schedule_ratios(RatioSchedule("B", 5), epoch) == [0.05, 0.10, 0.15, 0.20, 0.25]


def test_strategy_c_grows_with_epoch():
    assert schedule_ratios(RatioSchedule("C", 5), 10) == [0.30, 0.35, 0.40, 0.45, 0.50]
    assert schedule_ratios(RatioSchedule("C", 5), 0) == schedule_ratios(RatioSchedule("B", 5), 0)


def test_clamp_absorbs_overflow():
    r = schedule_ratios(RatioSchedule("C", 15), 40)
    assert max(r) == 0.95 and all(0 <= p <= 0.95 for p in r)
    r = schedule_ratios(RatioSchedule("B", 15), 0)
    assert all(b > a for a, b in zip(r, r[1:]))


def test_schedule_validation():
    with pytest.raises(ValueError):
        RatioSchedule("D", 5)
    with pytest.raises(ValueError):
        RatioSchedule("B", 0)
    with pytest.raises(ValueError):
        RatioSchedule("B", 5, clamp_max=1.0)
    with pytest.raises(ValueError):
        schedule_ratios(RatioSchedule(), -1)


def test_dropout_p0_is_identity():
    F = [Tensor(Rng(0).normal((2, 3, 4, 4)))]
    assert np.array_equal(dropout_pass(F, 0.0, Rng(1))[0].data, F[0].data)


def test_dropout_half_on_ones_is_zero_or_two():
    out = dropout_pass([Tensor(np.ones((50, 50)))], 0.5, Rng(2))[0].data
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_rejects_p_one():
    with pytest.raises(ValueError):
        dropout_pass([Tensor(np.ones(3))], 1.0, Rng(0))


def test_dropout_mean_unbiased_1e5():
    out = dropout_pass([Tensor(np.ones(100_000))], 0.5, Rng(3))[0].data
    assert abs(out.mean() - 1.0) < 0.01


def test_dropout_per_element_unbiased_1e5_trials():
    f = np.array([0.1, -0.3, 1.7, 5.0])
    trials = np.broadcast_to(f, (100_000, 4)).copy()
    for p in (0.15, 0.5):
        out = dropout_pass([Tensor(trials)], p, Rng(4))[0].data
        assert np.all(np.abs(out.mean(axis=0) - f) < 0.01 * np.abs(f))


def test_estimate_zero_ratios_is_identity():
    F = [Tensor(Rng(s).normal((2, 3, 8 >> s, 8 >> s))) for s in range(3)]
    est = estimate_uncertainty(F, [0.0] * 5, Rng(0))
    assert est.N_used == 5 and est.ratios_used == [0.0] * 5
    assert all(np.array_equal(u.data, f.data) for u, f in zip(est.U_K, F))


def test_estimate_single_pass_values():
    f = Rng(5).normal((20, 20))
    est = estimate_uncertainty([Tensor(f)], [0.5], Rng(6))
    u = est.U_K[0].data
    assert np.all((u == 0.0) | (u == 2 * f))


def test_estimate_rejects_empty_ratios():
    with pytest.raises(ValueError):
        estimate_uncertainty([Tensor(np.ones(2))], [], Rng(0))


def test_estimate_is_deterministic_and_untracked():
    F = [Tensor(Rng(7).normal((2, 4, 4)))]
    a = estimate_uncertainty(F, [0.1, 0.2], Rng(8))
    b = estimate_uncertainty(F, [0.1, 0.2], Rng(8))
    assert np.array_equal(a.U_K[0].data, b.U_K[0].data)
    assert not a.U_K[0].requires_grad and a.U_K[0].node is None


def test_masked_copies_average_matches_folded_masks():
    # folding N masks into one multiplier equals averaging N dropout copies
    F = [Tensor(Rng(9).normal((3, 5, 5))), Tensor(Rng(10).normal((3, 2, 2)))]
    ratios = [0.05, 0.1, 0.15]
    rng = Rng(11)
    est = estimate_uncertainty(F, ratios, rng)
    copies = [dropout_pass(F, p, rng.fork(i)) for i, p in enumerate(ratios)]
    for s in range(2):
        mean = sum(c[s].data for c in copies) / len(ratios)
        assert np.allclose(est.U_K[s].data, mean, rtol=0, atol=1e-14)


def _trial_variance(N, p, trials, f=1.3):
    F = [Tensor(np.full((4,), f))]
    vals = np.stack([estimate_uncertainty(F, [p] * N, Rng(12).fork(N, t)).U_K[0].data for t in range(trials)])
    return vals.var(axis=0, ddof=1).mean()


def test_variance_law_one_over_n():
    p, f = 0.25, 1.3
    v1 = _trial_variance(1, p, 10_000, f)
    v10 = _trial_variance(10, p, 10_000, f)
    assert 8.5 <= v1 / v10 <= 11.5
    expected = f * f * (p / (1 - p))
    assert abs(v1 - expected) < 0.1 * expected
    assert abs(v10 - expected / 10) < 0.1 * expected / 10


def test_masks_uncorrelated_across_scales():
    F = [Tensor(np.ones(10_000)), Tensor(np.ones(10_000))]
    out = dropout_pass(F, 0.3, Rng(13))
    corr = np.corrcoef(out[0].data, out[1].data)[0, 1]
    assert abs(corr) < 0.02


def test_combine_residual_cases():
    F = [Tensor(Rng(14).normal((2, 3, 4, 4)))]
    zero = estimate_uncertainty(F, [0.0, 0.0], Rng(0))
    assert np.array_equal(combine_residual(zero, F, True)[0].data, 2 * F[0].data)
    assert np.array_equal(combine_residual(zero, F, False)[0].data, F[0].data)
    assert np.array_equal(combine_residual(zero, F, True, normalize=True)[0].data, F[0].data)
    est = estimate_uncertainty(F, [0.3, 0.4], Rng(1))
    out = combine_residual(est, F, True)[0].data
    assert np.allclose(out - F[0].data, est.U_K[0].data, rtol=0, atol=1e-15)


def test_combine_residual_shape_mismatch():
    F = [Tensor(np.ones((2, 2)))]
    with pytest.raises(ShapeError):
        combine_residual(UncertaintyEstimate([Tensor(np.ones((2, 3)))], 1), F, True)
    with pytest.raises(ShapeError):
        combine_residual([Tensor(np.ones((2, 2)))] * 2, F, True)
