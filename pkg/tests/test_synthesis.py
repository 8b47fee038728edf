import logging
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stars import autodiff as ad
from stars.autodiff import Tensor
from stars.errors import ContractError, NumericalError, ShapeError
from stars.nets import TeacherNet, forward_train
from stars.snn import FEATURE_BUILDS, LIFConfig, StudentNet
from stars.synthesis import (
    LayerThresholds,
    SynthesisConfig,
    assigned_labels,
    initial_batch,
    loss_bn,
    loss_cls,
    loss_reg,
    objective,
    pooled_features,
    rca_loss,
    soft_exceedance,
    synthesize,
    synthesize_bn_only,
    tar_loss,
    teacher_thresholds,
    write_trace_csv,
)

from .conftest import assert_grad_close


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def rand(shape, seed=0):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def unit(center=0.0, scale=1.0, thetas=(0.0,)):
    return LayerThresholds(center, scale, np.array(thetas))


# ---- pooling ------------------------------------------------------------------------
def test_pooling_degenerate_and_mean_cases():
    ft, fs = rand((3, 4)), rand((1, 3, 4), seed=1)
    zt, zs = pooled_features(ft, fs)
    assert zt.data.tobytes() == ft.data.tobytes()
    np.testing.assert_array_equal(zs.data, fs.data[0])
    v = np.random.default_rng(2).normal(size=(3, 4))
    _, zs = pooled_features(ft, Tensor(np.stack([v, v, v])))
    np.testing.assert_allclose(zs.data, v, rtol=1e-15)
    _, zs = pooled_features(ft, Tensor(np.stack([v, 3 * v])))
    np.testing.assert_allclose(zs.data, 2 * v, rtol=1e-15)
    zt, _ = pooled_features(Tensor(np.ones((3, 4, 5))), Tensor(np.ones((2, 3, 4, 5))))
    assert zt.shape == (3, 4)


def test_pooling_rejects_empty_axes():
    with pytest.raises((ContractError, ShapeError)):
        pooled_features(rand((3, 4)), Tensor(np.zeros((0, 3, 4))))
    with pytest.raises((ContractError, ShapeError)):
        pooled_features(Tensor(np.zeros((3, 4, 0))), Tensor(np.zeros((2, 3, 4, 0))))


# ---- teacher-side terms ---------------------------------------------------------------
def test_loss_cls_examples():
    peaked = np.zeros((3, 4))
    peaked[np.arange(3), [0, 2, 3]] = 20.0
    assert loss_cls(Tensor(peaked), [0, 2, 3]).item() < 1e-8
    assert abs(loss_cls(Tensor(np.zeros((2, 4))), [1, 3]).item() - math.log(4)) < 1e-15
    oracle = -math.log(math.e / (math.e + 1))
    assert abs(loss_cls(Tensor([[1.0, 0.0]]), [0]).item() - oracle) < 1e-15
    assert abs(oracle - 0.31326) < 1e-5
    with pytest.raises(ContractError):
        loss_cls(Tensor(np.zeros((1, 2))), [5])


def test_loss_bn_examples():
    mu, var = np.array([0.3, -1.0]), np.array([2.0, 0.5])
    assert loss_bn([(Tensor(mu), Tensor(var))], [(mu, var)]).item() == 0.0
    assert loss_bn([(Tensor([0.5]), Tensor([1.0]))], [(np.array([0.0]), np.array([1.0]))]).item() == 0.25


def test_loss_bn_zero_when_batch_matches_running():
    net = TeacherNet(6, (5, 4), 3, seed=0, bn_momentum=1.0)
    x = rand((10, 6))
    forward_train(net, x)  # running stats now equal the first layer's batch stats
    trace = net.forward(x, train=False)
    from stars.synthesis import batch_stats, running_stats
    value = loss_bn(batch_stats(trace.pre_bn[:1]), running_stats(net)[:1]).item()
    assert value <= 1e-12


def test_loss_reg_examples():
    assert loss_reg(Tensor(np.zeros((3, 4)))).item() == 0.0
    assert loss_reg(Tensor([[1.0, 1.0, 1.0, 1.0]])).item() == 4.0
    x = rand((5, 3))
    assert loss_reg(Tensor(2 * x.data)).item() == pytest.approx(4 * loss_reg(x).item(), rel=1e-15)


# ---- RCA ---------------------------------------------------------------------------------
def test_rca_examples():
    z = rand((6, 5))
    assert rca_loss([z], [Tensor(z.data.copy())]).item() <= 1e-12
    zt, zs = Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[1.0, 0.0], [1.0, 0.0]])
    assert rca_loss([zt], [zs]).item() == pytest.approx(1.0, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 4), elements=st.floats(-3, 3)).filter(lambda a: np.all(np.abs(a).sum(1) > 0.1)),
       arrays(np.float64, (5, 4), elements=st.floats(-3, 3)).filter(lambda a: np.all(np.abs(a).sum(1) > 0.1)),
       arrays(np.float64, (5,), elements=st.floats(0.01, 100.0)))
def test_rca_invariant_to_positive_row_scaling(zt, zs, c):
    base = rca_loss([Tensor(zt)], [Tensor(zs)]).item()
    scaled = rca_loss([Tensor(zt)], [Tensor(zs * c[:, None])]).item()
    assert abs(base - scaled) <= 1e-12
    # power-of-two scales leave every normalized row bit-identical
    p2 = 2.0 ** np.arange(-2, 3)
    assert rca_loss([Tensor(zt * p2[:, None])], [Tensor(zs)]).item() == base


def test_rca_ignores_diagonal_and_layer_weights_average():
    zt, zs = rand((4, 3), 1), rand((4, 3), 2)
    one = rca_loss([zt], [zs]).item()
    assert rca_loss([zt, zt], [zs, zs], weights=[1.0, 3.0]).item() == pytest.approx(one, rel=1e-15)
    # gram diagonals are 1 for any nonzero row; a large row norm change alters nothing
    zs2 = Tensor(zs.data * np.array([[10.0], [1.0], [1.0], [1.0]]))
    assert rca_loss([zt], [zs2]).item() == pytest.approx(one, abs=1e-12)


def test_rca_needs_two_samples():
    with pytest.raises(ContractError):
        rca_loss([rand((1, 3))], [rand((1, 3))])


# ---- TAR -------------------------------------------------------------------------------
def test_threshold_quantile_worked_example():
    cfg = SynthesisConfig(quantiles=(0.95,))
    th = teacher_thresholds([Tensor([[1.0, 2.0], [3.0, 4.0]])], cfg)[0]
    # linear interpolation: position 0.95*3 = 2.85 between 3 and 4 -> 3.85 raw
    oracle = (3.85 - 2.5) / (math.sqrt(1.25) + 1e-12)
    assert th.thetas[0] == pytest.approx(oracle, rel=1e-14)
    assert th.center == 2.5 and th.scale == pytest.approx(math.sqrt(1.25), rel=1e-15)


def test_threshold_median_of_normal_features_is_near_zero():
    cfg = SynthesisConfig(quantiles=(0.5,))
    th = teacher_thresholds([rand((200, 50), seed=3)], cfg)[0]
    assert abs(th.thetas[0]) < 0.03


def test_constant_teacher_features_warn_and_zero(caplog):
    cfg = SynthesisConfig()
    with caplog.at_level(logging.WARNING):
        th = teacher_thresholds([Tensor(np.full((4, 3), 2.0))], cfg)[0]
    assert np.all(th.thetas == 0.0) and len(th.thetas) == 5
    assert "constant" in caplog.text


def test_fixed_threshold_mode_uses_given_values():
    cfg = SynthesisConfig(threshold_mode="fixed", fixed_thresholds=(1.0, -0.5))
    th = teacher_thresholds([rand((4, 3))], cfg)[0]
    assert th.thetas.tolist() == [-0.5, 1.0]


def test_tar_worked_example():
    value = tar_loss([Tensor([[0.0]])], [Tensor([[0.5]])], [unit()], 0.5).item()
    assert abs(sigmoid(1.0) - 0.731059) < 1e-6
    assert value == pytest.approx((sigmoid(1.0) - 0.5) ** 2, rel=1e-10)
    assert abs(value - 0.053388) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)), arrays(np.float64, (4, 3), elements=st.floats(-5, 5)),
       st.floats(0.05, 2.0))
def test_tar_zero_symmetric_and_bounded(a, b, delta):
    th = teacher_thresholds([Tensor(a + np.arange(12).reshape(4, 3))], SynthesisConfig())
    za, zb = Tensor(a), Tensor(b)
    assert tar_loss([za], [Tensor(a.copy())], th, delta).item() <= 1e-12
    assert tar_loss([za], [zb], th, delta).item() == tar_loss([zb], [za], th, delta).item()
    assert 0.0 <= tar_loss([za], [zb], th, delta).item() <= 1.0


def test_soft_exceedance_approaches_hard_count():
    z = np.random.default_rng(4).normal(size=(40, 10))
    thetas = np.array([-0.5, 0.3, 1.1])
    hard = (z.reshape(-1)[None, :] > thetas[:, None]).mean(axis=1)
    gaps = [np.abs(soft_exceedance(Tensor(z), thetas, d).data - hard).max() for d in (0.5, 0.1, 0.02)]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 0.02


def test_tar_gradient_with_frozen_thresholds():
    zt, zs = rand((5, 4), 5), Tensor(np.random.default_rng(6).normal(size=(5, 4)), requires_grad=True)
    th = teacher_thresholds([zt], SynthesisConfig())
    fn = lambda: tar_loss([zt], [zs], th, 0.5)
    ad.backward(fn())
    assert_grad_close(zs.grad, ad.numerical_grad(fn, zs))


def test_rca_gradient():
    zt, zs = rand((5, 4), 7), Tensor(np.random.default_rng(8).normal(size=(5, 4)), requires_grad=True)
    fn = lambda: rca_loss([zt], [zs])
    ad.backward(fn())
    assert_grad_close(zs.grad, ad.numerical_grad(fn, zs))


# ---- engine -----------------------------------------------------------------------------
@pytest.fixture
def small_pair():
    teacher = TeacherNet(6, (8, 5), 3, seed=1)
    for s in range(5):
        forward_train(teacher, rand((16, 6), seed=10 + s))
    student = StudentNet(6, (8, 5), 3, seed=2)
    return teacher, student


def small_cfg(**kw):
    base = dict(batch_size=6, steps=5, quantiles=(0.6, 0.9))
    base.update(kw)
    return SynthesisConfig(**base)


def test_zero_steps_returns_initialization(small_pair):
    teacher, student = small_pair
    cfg = small_cfg(steps=0)
    res = synthesize(teacher, student, cfg, LIFConfig(), seed=3)
    assert res.batch.inputs.tobytes() == initial_batch(cfg, 6, 3).tobytes()
    assert res.batch.labels.tolist() == [0, 1, 2, 0, 1, 2]
    assert len(res.trace) == 1


def test_total_is_sum_of_weighted_terms(small_pair):
    teacher, student = small_pair
    cfg = small_cfg(lambda_bn=2.0, lambda_reg=0.1, lambda_rca=0.7, lambda_tar=1.3)
    x = Tensor(initial_batch(cfg, 6, 0))
    total, c = objective(teacher, student, x, assigned_labels(6, 3), cfg, LIFConfig())
    expect = c["L_cls"] + 2.0 * c["L_BN"] + 0.1 * c["L_reg"] + 0.7 * c["L_RCA"] + 1.3 * c["L_TAR"]
    assert total.item() == pytest.approx(expect, rel=1e-14)


def test_baseline_objective_when_stars_weights_are_zero(small_pair):
    teacher, _ = small_pair
    cfg = small_cfg(lambda_rca=0.0, lambda_tar=0.0, steps=10)
    res = synthesize(teacher, None, cfg, LIFConfig(), seed=4)
    for row in res.trace:
        assert row["L_total"] == row["L_cls"] + cfg.lambda_bn * row["L_BN"] + cfg.lambda_reg * row["L_reg"]


def test_bn_only_is_bit_identical_to_baseline_engine(small_pair):
    teacher, student = small_pair
    cfg = small_cfg(lambda_rca=0.0, lambda_tar=0.0, steps=20)
    before = FEATURE_BUILDS["count"]
    a = synthesize(teacher, student, cfg, LIFConfig(), seed=5)
    assert FEATURE_BUILDS["count"] == before
    b = synthesize_bn_only(teacher, cfg, seed=5)
    assert a.trace == b.trace
    assert a.batch.inputs.tobytes() == b.batch.inputs.tobytes()


def test_synthesis_decreases_total_loss(trained_teacher):
    teacher, _ = trained_teacher
    student = StudentNet(16, (64, 64), 4, seed=0)
    res = synthesize(teacher, student, SynthesisConfig(steps=50), LIFConfig(), seed=0)
    assert res.trace[-1]["L_total"] < res.trace[0]["L_total"]


def test_synthesis_leaves_networks_untouched(small_pair):
    teacher, student = small_pair
    t0, s0 = teacher.state(), student.state()
    synthesize(teacher, student, small_cfg(), LIFConfig(), seed=6)
    assert all(t0[k].tobytes() == v.tobytes() for k, v in teacher.state().items())
    assert all(s0[k].tobytes() == v.tobytes() for k, v in student.state().items())
    assert all(p.grad is None for p in teacher.parameters() + student.parameters())


def test_full_objective_gradient_matches_smoothed_finite_differences(small_pair):
    teacher, student = small_pair
    # fixed thresholds and running normalization keep every constant independent of the inputs
    cfg = small_cfg(batch_size=4, threshold_mode="fixed", fixed_thresholds=(-0.2, 0.4, 1.0), tar_norm="running")
    lif = LIFConfig(steps=3, surrogate_alpha=2.0)
    x = Tensor(initial_batch(cfg, 6, 7), requires_grad=True)
    labels = assigned_labels(4, 3)
    fn = lambda: objective(teacher, student, x, labels, cfg, lif, smooth=True)[0]
    with ad.frozen(teacher.parameters() + student.parameters()):
        ad.backward(fn())
    assert_grad_close(x.grad, ad.numerical_grad(fn, x), rel=1e-4)


def test_nan_loss_reports_step_and_components(small_pair):
    teacher, student = small_pair
    teacher.head.W.data[:] = np.nan
    with pytest.raises(NumericalError) as info:
        synthesize(teacher, student, small_cfg(), LIFConfig(), seed=0)
    assert info.value.step == 0 and math.isnan(info.value.components["L_cls"])


def test_config_validation():
    for bad in ({"quantiles": (0.9, 0.5)}, {"quantiles": (0.0, 0.5)}, {"delta": 0.0}, {"lambda_bn": -1.0},
                {"threshold_mode": "fixed"}, {"tar_norm": "other"}, {"batch_size": 1}):
        with pytest.raises(ValueError):
            SynthesisConfig(**bad)


def test_trace_csv_columns(tmp_path, small_pair):
    teacher, student = small_pair
    res = synthesize(teacher, student, small_cfg(steps=2), LIFConfig(), seed=0)
    write_trace_csv(res.trace, tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "step,L_cls,L_BN,L_reg,L_RCA,L_TAR,L_total"
    assert len(lines) == 4
