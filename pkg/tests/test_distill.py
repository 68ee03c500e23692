import numpy as np
import pytest

from mcdistill import tensor as T
from mcdistill.distill import (
    ConfigError,
    DegenerateMapWarning,
    DistillConfig,
    describe,
    distance,
    extract,
    kd_loss_et,
    kd_loss_logits,
    kd_loss_uet,
    logits_kd_from_pyramids,
)
from mcdistill.model import STUDENT, TEACHER, PyramidSpec, adapter_for, build_adapter, build_detnet, forward_pyramid
from mcdistill.rng import Rng
from mcdistill.tensor import ShapeError, Tensor
from mcdistill.uncertainty import RatioSchedule

ZERO = RatioSchedule("B", 5, base=0.0, step=0.0)


def pyramid(seed, channels=3, batch=2, sizes=(8, 4, 2)):
    return [Tensor(Rng(seed).fork(s).normal((batch, channels, n, n))) for s, n in enumerate(sizes)]


def np_pearson(a, b):
    a = a.reshape(*a.shape[:2], -1)
    b = b.reshape(*b.shape[:2], -1)
    rho = np.empty(a.shape[:2])
    for i in range(a.shape[0]):
        for c in range(a.shape[1]):
            rho[i, c] = np.corrcoef(a[i, c], b[i, c])[0, 1]
    return float(np.mean(1 - rho))


def np_ssim(a, b):
    L = max(a.max(), b.max()) - min(a.min(), b.min())
    c1, c2 = (0.01 * L) ** 2 + 1e-12, (0.03 * L) ** 2 + 1e-12
    a = a.reshape(*a.shape[:2], -1)
    b = b.reshape(*b.shape[:2], -1)
    ma, mb = a.mean(-1), b.mean(-1)
    va, vb = a.var(-1), b.var(-1)
    cov = ((a - ma[..., None]) * (b - mb[..., None])).mean(-1)
    s = (2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2))
    return float(np.mean(1 - s))


# -- config -------------------------------------------------------------------------


def test_config_routing_rules():
    assert DistillConfig().schedule == RatioSchedule("B", 5)
    assert DistillConfig(N=10).schedule.N == 10
    with pytest.raises(ConfigError):
        DistillConfig(N=0)  # source defaults to teacher
    with pytest.raises(ConfigError):
        DistillConfig(N=0, source="none", schedule=RatioSchedule())
    with pytest.raises(ConfigError):
        DistillConfig(N=3, schedule=RatioSchedule("B", 5))
    for bad in (dict(lambda_kd=0.0), dict(lambda_kd=float("inf")), dict(extraction="fgd"), dict(distance="l1"),
                dict(source="teachers"), dict(temperature=0.0)):
        with pytest.raises(ConfigError):
            DistillConfig(**bad)


def test_config_dict_round_trip_and_rejection():
    cfg = DistillConfig(N=10, schedule=RatioSchedule("C", 10), source="both", residual=False)
    assert DistillConfig.from_dict(cfg.to_dict()) == cfg
    assert DistillConfig.from_dict({"N": 10, "schedule": {"strategy": "A"}}).schedule == RatioSchedule("A", 10)
    with pytest.raises(ConfigError):
        DistillConfig.from_dict({"N": 5, "dropout": 0.1})
    with pytest.raises(ConfigError):
        DistillConfig.from_dict({"schedule": {"strategy": "B", "ratio": 0.1}})


def test_run_labels():
    assert describe(DistillConfig(N=0, source="none")) == "ET baseline"
    assert describe(DistillConfig(N=5, source="teacher", residual=True)) == "UET default"
    assert describe(None) == "scratch"
    assert describe(DistillConfig(N=0, source="none", logits_mode=True)) == "ET baseline [LD]"
    assert describe(DistillConfig(source="both")) == "UET N=5 B both+res"
    # source none with N > 0 still routes to the plain ET loss
    assert describe(DistillConfig(N=5, source="none")) == "ET baseline"


# -- extraction ------------------------------------------------------------------


def test_identity_extraction():
    F = pyramid(0)
    assert all(a is b for a, b in zip(extract("identity", F), F))


def test_pearson_norm_standardises_channels():
    F = [Tensor(3.0 + 5.0 * Rng(1).normal((2, 4, 8, 8)))]
    out = extract("pearson-norm", F)[0].data.reshape(2, 4, -1)
    assert np.all(np.abs(out.mean(-1)) < 1e-9)
    assert np.all(np.abs(out.std(-1) - 1) < 1e-3)


def test_attention_on_constant_map_is_identity():
    F = [Tensor(np.full((2, 3, 4, 4), 0.7))]
    assert np.allclose(extract("attention", F)[0].data, F[0].data, rtol=0, atol=1e-15)


def test_attention_weights_sum_to_counts():
    f = Rng(2).normal((1, 3, 4, 4))
    out = extract("attention", [Tensor(f)])[0].data
    tau = 0.5
    a_s = np.abs(f).mean(1).reshape(-1)
    w_s = np.exp(tau * a_s) / np.exp(tau * a_s).sum() * 16
    a_c = np.abs(f).mean((2, 3)).reshape(-1)
    w_c = np.exp(tau * a_c) / np.exp(tau * a_c).sum() * 3
    expected = f * w_s.reshape(1, 1, 4, 4) * w_c.reshape(1, 3, 1, 1)
    assert np.allclose(out, expected, rtol=1e-12, atol=0)


def test_unknown_kinds_rejected():
    with pytest.raises(ValueError):
        extract("gc-block", pyramid(0))
    with pytest.raises(ValueError):
        distance("l1", pyramid(0), pyramid(1))


# -- distances ---------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["l2", "pearson", "ssim"])
def test_distance_zero_on_equal_and_symmetric(kind):
    A, B = pyramid(3), pyramid(4)
    assert abs(distance(kind, A, A).item()) < 1e-12
    d_ab, d_ba = distance(kind, A, B).item(), distance(kind, B, A).item()
    assert d_ab > 0
    assert abs(d_ab - d_ba) < 1e-12


def test_distances_match_numpy_oracles():
    A, B = pyramid(5), pyramid(6)
    l2 = np.mean([np.mean((a.data - b.data) ** 2) for a, b in zip(A, B)])
    pe = np.mean([np_pearson(a.data, b.data) for a, b in zip(A, B)])
    ss = np.mean([np_ssim(a.data, b.data) for a, b in zip(A, B)])
    assert abs(distance("l2", A, B).item() - l2) < 1e-12
    assert abs(distance("pearson", A, B).item() - pe) < 1e-12
    assert abs(distance("ssim", A, B).item() - ss) < 1e-12


def test_pearson_affine_invariance_and_sign():
    A = pyramid(7)
    B = [Tensor(3.0 * a.data + 7.0) for a in A]
    assert abs(distance("pearson", A, B).item()) < 1e-9
    neg = [Tensor(-a.data) for a in A]
    assert abs(distance("pearson", A, neg).item() - 2.0) < 1e-9
    # l2 is not scale invariant
    assert distance("l2", A, [Tensor(2.0 * a.data) for a in A]).item() > 0.1


def test_pearson_degenerate_map_warns_and_counts_as_uncorrelated():
    A = [Tensor(np.full((1, 1, 4, 4), 2.0))]
    B = [Tensor(Rng(8).normal((1, 1, 4, 4)))]
    with pytest.warns(DegenerateMapWarning):
        d = distance("pearson", A, B)
    assert d.item() == 1.0
    assert np.isfinite(d.data).all()


def test_distance_shape_mismatch_rejected():
    with pytest.raises(ShapeError):
        distance("l2", pyramid(0), pyramid(1)[:2])
    with pytest.raises(ShapeError):
        distance("l2", pyramid(0, channels=3), pyramid(1, channels=4))


# -- ET / UET assemblies ------------------------------------------------------------


def test_et_hand_case():
    F_T = [Tensor(np.array([[[[1.0, 3.0]]]]))]
    F_S = [Tensor(np.zeros((1, 1, 1, 2)), requires_grad=True)]
    cfg = DistillConfig(N=0, source="none", extraction="identity", distance="l2")
    assert kd_loss_et(F_T, F_S, None, cfg).item() == 5.0


def test_et_zero_when_adapted_student_matches():
    F = pyramid(9)
    student = [Tensor(f.data.copy(), requires_grad=True) for f in F]
    for ex in ("identity", "pearson-norm", "attention"):
        for dist in ("l2", "pearson", "ssim"):
            cfg = DistillConfig(N=0, source="none", extraction=ex, distance=dist)
            assert abs(kd_loss_et(F, student, None, cfg).item()) < 1e-12


def test_lambda_scales_loss():
    F_T, F_S = pyramid(10), pyramid(11)
    one = kd_loss_et(F_T, F_S, None, DistillConfig(N=0, source="none"))
    three = kd_loss_et(F_T, F_S, None, DistillConfig(N=0, source="none", lambda_kd=3.0))
    assert abs(three.item() - 3 * one.item()) < 1e-12


def test_teacher_pyramid_must_be_untracked():
    F_S = pyramid(0)
    tracked = [Tensor(f.data, requires_grad=True) for f in pyramid(1)]
    with pytest.raises(ValueError):
        kd_loss_et(tracked, F_S, None, DistillConfig(N=0, source="none"))


@pytest.mark.parametrize("ex", ["identity", "pearson-norm", "attention"])
@pytest.mark.parametrize("dist", ["l2", "pearson", "ssim"])
def test_zero_ratio_no_residual_reduces_to_et(ex, dist):
    F_T = pyramid(12, channels=4)
    F_S = [Tensor(f.data, requires_grad=True) for f in pyramid(13, channels=2)]
    ad = build_adapter(2, 4, 3, Rng(0))
    et = kd_loss_et(F_T, F_S, ad, DistillConfig(N=0, source="none", extraction=ex, distance=dist))
    for src in ("teacher", "student", "both"):
        cfg = DistillConfig(N=5, schedule=ZERO, source=src, residual=False, extraction=ex, distance=dist)
        uet = kd_loss_uet(F_T, F_S, ad, cfg, Rng(1), epoch=3)
        assert abs(uet.item() - et.item()) < 1e-12


def test_zero_ratio_residual_pearson_equals_et():
    F_T, F_S = pyramid(14), pyramid(15)
    et = kd_loss_et(F_T, F_S, None, DistillConfig(N=0, source="none", extraction="identity", distance="pearson"))
    cfg = DistillConfig(schedule=ZERO, extraction="identity", distance="pearson")
    assert abs(kd_loss_uet(F_T, F_S, None, cfg, Rng(0), 0).item() - et.item()) < 1e-12


def test_zero_ratio_residual_l2_targets_twice_teacher():
    F_T, F_S = pyramid(16), pyramid(17)
    cfg = DistillConfig(schedule=ZERO, extraction="identity", distance="l2")
    expected = distance("l2", [Tensor(2 * f.data) for f in F_T], F_S).item()
    assert abs(kd_loss_uet(F_T, F_S, None, cfg, Rng(0), 0).item() - expected) < 1e-12
    halved = DistillConfig(schedule=ZERO, extraction="identity", distance="l2", normalize_residual=True)
    et = kd_loss_et(F_T, F_S, None, DistillConfig(N=0, source="none", extraction="identity"))
    assert abs(kd_loss_uet(F_T, F_S, None, halved, Rng(0), 0).item() - et.item()) < 1e-12


def test_uet_bitwise_reproducible_and_seed_sensitive():
    F_T, F_S = pyramid(18), pyramid(19)
    cfg = DistillConfig()
    a = kd_loss_uet(F_T, F_S, None, cfg, Rng(5), 2).item()
    assert a == kd_loss_uet(F_T, F_S, None, cfg, Rng(5), 2).item()
    assert a != kd_loss_uet(F_T, F_S, None, cfg, Rng(6), 2).item()


def test_uet_rejects_scale_mismatch():
    with pytest.raises(ShapeError):
        kd_loss_uet(pyramid(0), pyramid(1)[:2], None, DistillConfig(), Rng(0), 0)


@pytest.mark.parametrize("source", ["teacher", "student", "both", "none"])
def test_gradient_isolation(source):
    spec = PyramidSpec()
    teacher = build_detnet(spec, 8, 1, TEACHER, Rng(0))
    student = build_detnet(spec, 4, 1, STUDENT, Rng(1))
    ad = adapter_for(teacher, student, Rng(2))
    img = Rng(3).uniform((2, 1, 32, 32))
    F_T = forward_pyramid(teacher, img)
    F_S = forward_pyramid(student, img)
    cfg = DistillConfig(N=0, source="none") if source == "none" else DistillConfig(source=source, extraction="attention")
    loss = kd_loss_uet(F_T, F_S, ad, cfg, Rng(4), 1)
    T.backward(loss)
    assert all(p.grad is None for p in teacher.parameters())
    assert all(f.grad is None for f in F_T)
    # heads sit downstream of the pyramid, so feature losses never reach them
    for p in [p for p in student.parameters() if not p.name.startswith("head")] + ad.weights:
        assert p.grad is not None and np.all(np.isfinite(p.grad))


# -- logits mode -----------------------------------------------------------------------


def _nets():
    spec = PyramidSpec()
    return build_detnet(spec, 8, 1, TEACHER, Rng(0)), build_detnet(spec, 8, 1, STUDENT, Rng(0))


def test_logits_identical_nets_zero_ratios_no_residual():
    teacher, student = _nets()
    img = Rng(1).uniform((2, 1, 32, 32))
    cfg = DistillConfig(schedule=ZERO, residual=False, logits_mode=True)
    assert abs(kd_loss_logits(teacher, student, img, cfg, Rng(2), 0).item()) < 1e-15


def test_logits_residual_uses_doubled_teacher_features():
    teacher, student = _nets()
    img = Rng(1).uniform((2, 1, 32, 32))
    base = kd_loss_logits(teacher, student, img, DistillConfig(N=0, source="none", logits_mode=True), Rng(2), 0)
    res = kd_loss_logits(teacher, student, img, DistillConfig(schedule=ZERO, logits_mode=True), Rng(2), 0)
    assert abs(base.item()) < 1e-15
    assert res.item() > 1e-6


def test_logits_kl_nonnegative_and_requires_mode():
    spec = PyramidSpec()
    teacher = build_detnet(spec, 8, 1, TEACHER, Rng(0))
    student = build_detnet(spec, 4, 1, STUDENT, Rng(5))
    img = Rng(1).uniform((2, 1, 32, 32))
    for seed in range(3):
        cfg = DistillConfig(logits_mode=True, source="both")
        assert kd_loss_logits(teacher, student, img, cfg, Rng(seed), seed).item() >= 0
    with pytest.raises(ConfigError):
        kd_loss_logits(teacher, student, img, DistillConfig(), Rng(0), 0)


def test_logits_class_mismatch_rejected():
    teacher = build_detnet(PyramidSpec(num_classes=5), 8, 1, TEACHER, Rng(0))
    student = build_detnet(PyramidSpec(), 8, 1, STUDENT, Rng(0))
    F = [Tensor(np.zeros((1, 8, 32 >> s, 32 >> s))) for s in range(3)]
    with pytest.raises(ShapeError):
        logits_kd_from_pyramids(teacher, student, F, F, DistillConfig(logits_mode=True), Rng(0), 0)
