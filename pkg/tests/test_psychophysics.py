import math

import numpy as np
import pytest

from spca.core import SampleSet
from spca.curves import CurveParams
from spca.datagen import EnsembleSpec, ensemble_frame, gen_color_ensemble
from spca.errors import ParameterError
from spca.model import SpcaModel, fit
from spca.psychophysics import (AtdFrame, ThresholdProfile, affine_corr, argmin_within,
                                atd_convert, axis_points, corresponding_pairs, fechner_integrate,
                                marginal_density, pair_arrays, response_alignment,
                                response_criterion, thresholds_physiological,
                                thresholds_psychophysical)
from spca.psychophysics import test_grid as axis_grid

ENS = EnsembleSpec(saturation_decay=6.0, luminance_params=(0.0, 0.5), n=3000)
ENS_CP = CurveParams(0.2, 0.05, 4)


@pytest.fixture(scope="module")
def atd_model():
    P = atd_convert(AtdFrame(), gen_color_ensemble(ENS).points)
    return fit(SampleSet(P), 1 / 3, ENS_CP, origin_mode="mode")


@pytest.fixture(scope="module")
def affine_pair():
    # flattened chroma keeps the two chromatic directions apart
    spec = EnsembleSpec(chroma_aspect=0.5, saturation_decay=6.0, luminance_params=(0.0, 0.5))
    P = gen_color_ensemble(spec).points
    F = ensemble_frame((1, 1, 1))
    a = math.radians(20)
    Rz = np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]])
    M = Rz @ F @ np.diag([1.2, 1.0, 0.8]) @ F.T
    P2 = P @ M.T + np.array([0.1, -0.05, 0.2])
    mA = fit(SampleSet(P), 1.0, ENS_CP, origin_mode="mode")
    mB = fit(SampleSet(P2), 1.0, ENS_CP, origin_mode="mode")
    return P, P2, mA, mB


def test_flat_thresholds_on_uniform():
    u = SampleSet(np.random.default_rng(0).uniform(0, 1, 10_000)[:, None])
    m = fit(u, 1.0, CurveParams(0.2, 0.02, 4), origin_mode="mean")
    prof = thresholds_physiological(m, "A", axis_grid(m, "A"))
    assert not prof.flags.any()
    assert np.all(np.abs(prof.thresholds / np.median(prof.thresholds) - 1) < 0.15)


def test_laplacian_threshold_ratio():
    v = np.random.default_rng(1).laplace(0, 1, 10_000)
    m = fit(SampleSet(v[:, None]), 1.0, CurveParams(0.2, 0.1, 4), origin_mode="mode")
    mode = float(m.origin[0])
    prof = thresholds_physiological(m, "A", [mode, mode - 2, mode + 2])
    thr = prof.thresholds
    assert thr[0] < thr[1] and thr[0] < thr[2]
    ratio = 0.5 * (thr[1] + thr[2]) / thr[0]
    assert abs(ratio / math.exp(2) - 1) < 0.4


@pytest.mark.parametrize("axis", ["T", "D"])
def test_paradigms_agree(atd_model, axis):
    grid = axis_grid(atd_model, axis)
    ph = thresholds_physiological(atd_model, axis, grid)
    ps = thresholds_psychophysical(atd_model, axis, grid)
    ok = ~(ph.flags | ps.flags)
    assert ok.sum() >= 20
    assert np.all(np.abs(ps.thresholds[ok] / ph.thresholds[ok] - 1) < 0.2)
    assert affine_corr(ph.thresholds, ps.thresholds, ok) > 0.95


def test_criterion_doubling(atd_model):
    grid = axis_grid(atd_model, "T")
    c = response_criterion(atd_model, thresholds_physiological(atd_model, "T", grid[:1]).response_dim)
    one = thresholds_psychophysical(atd_model, "T", grid, criterion=c)
    two = thresholds_psychophysical(atd_model, "T", grid, criterion=2 * c)
    ok = ~(one.flags | two.flags)
    assert np.all(np.abs(two.thresholds[ok] / one.thresholds[ok] - 2) < 0.2)


def test_unreachable_criterion_flagged(atd_model):
    grid = axis_grid(atd_model, "D")
    prof = thresholds_psychophysical(atd_model, "D", grid[-1:], criterion=1e3)
    assert prof.flags[0] and np.isinf(prof.thresholds[0])


@pytest.mark.parametrize("axis", ["T", "D"])
def test_threshold_min_at_density_peak(atd_model, axis):
    grid = axis_grid(atd_model, axis)
    imin, imax = argmin_within(thresholds_physiological(atd_model, axis, grid),
                               marginal_density(atd_model, axis, grid))
    assert abs(imin - imax) <= 1


def test_fechner_constant_thresholds():
    x = np.linspace(-1, 3, 41)
    prof = ThresholdProfile("T", 1, x, np.full(41, 0.5), "physiological", np.zeros(41, bool))
    curve = fechner_integrate(prof, 0.0, beta=2.0)
    assert np.allclose(curve.response, 4.0 * x, atol=1e-12)
    assert curve.response[np.flatnonzero(x == 0.0)[0]] == 0.0


def test_fechner_weber_is_log():
    x = np.linspace(1, 100, 200)
    prof = ThresholdProfile("A", 0, x, 0.1 * x, "physiological", np.zeros(200, bool))
    resp = fechner_integrate(prof, 1.0).response
    logx = np.log(x)
    c = (resp @ logx) / (logx @ logx)
    assert abs(c / 10 - 1) < 0.02
    assert np.max(np.abs(resp - c * logx)) < 0.02 * resp[-1]


def test_fechner_flags_and_errors():
    x = np.linspace(0, 1, 5)
    thr = np.array([1.0, np.inf, 1.0, 1.0, 1.0])
    prof = ThresholdProfile("T", 1, x, thr, "physiological", np.zeros(5, bool))
    assert fechner_integrate(prof, 0.0).flags.tolist() == [False, True, False, False, False]
    with pytest.raises(ParameterError):
        fechner_integrate(prof, 2.0)
    with pytest.raises(ParameterError):
        fechner_integrate(prof, 0.0, beta=0.0)
    with pytest.raises(ParameterError):
        ThresholdProfile("T", 1, x, -thr, "physiological", np.zeros(5, bool))


@pytest.mark.parametrize("axis", ["T", "D"])
def test_fechner_recovers_model_response(atd_model, axis):
    grid = axis_grid(atd_model, axis)
    X, u, rd, _ = axis_points(atd_model, axis, grid)
    anchor = float(np.clip(atd_model.origin @ u, grid[0], grid[-1]))
    curve = fechner_integrate(thresholds_physiological(atd_model, axis, grid), anchor)
    resp = np.array([atd_model._forward(x)[0][rd] for x in X])
    assert affine_corr(curve.response, resp) > 0.999


def test_identity_pairs(affine_pair):
    P, _, mA, _ = affine_pair
    xs = P[np.random.default_rng(0).choice(len(P), 100, replace=False)]
    src, pred, ok = pair_arrays(corresponding_pairs(mA, mA, xs))
    assert ok.mean() > 0.8
    rel = np.linalg.norm(pred[ok] - src[ok], axis=1) / np.linalg.norm(src[ok], axis=1)
    assert np.median(rel) < 0.02
    assert len(src) == len(xs)


def test_affine_pairs_and_swapped_roles(affine_pair):
    P, P2, mA, mB = affine_pair
    idx = np.random.default_rng(1).choice(len(P), 150, replace=False)
    _, pred, ok = pair_arrays(corresponding_pairs(mB, mA, P2[idx], ("B", "A")))
    assert ok.mean() > 0.8
    rel = np.linalg.norm(pred[ok] - P[idx][ok], axis=1) / np.linalg.norm(P[idx][ok], axis=1)
    assert np.median(rel) < 0.05
    # A -> B -> A returns the source
    _, there, ok1 = pair_arrays(corresponding_pairs(mA, mB, P[idx]))
    _, back, ok2 = pair_arrays(corresponding_pairs(mB, mA, there[ok1]))
    src = P[idx][ok1][ok2]
    rel = np.linalg.norm(back[ok2] - src, axis=1) / np.linalg.norm(src, axis=1)
    assert np.median(rel) < 0.04


def test_alignment_undoes_direction_sign(affine_pair):
    P, _, mA, _ = affine_pair
    B = mA.basis.copy()
    B[:, mA.dim_order[1]] *= -1
    mF = SpcaModel(mA.training, mA.gamma, mA.origin, mA.dim_order, mA.scales,
                   mA.curve_params, mA.k_fraction_density, mA.slab_fraction, basis=B)
    perm, signs = response_alignment(mF, mA)
    assert perm.tolist() == [0, 1, 2] and signs.tolist() == [1.0, -1.0, 1.0]
    xs = P[:40]
    rF = mF.transform_many(xs)[0]
    rA = mA.transform_many(xs)[0]
    assert np.allclose(rF[:, 1], -rA[:, 1], atol=1e-6 * np.abs(rA).max())
    _, pred, ok = pair_arrays(corresponding_pairs(mF, mA, xs))
    rel = np.linalg.norm(pred[ok] - xs[ok], axis=1) / np.linalg.norm(xs[ok], axis=1)
    assert ok.mean() > 0.7 and np.median(rel) < 0.02
    _, raw, ok = pair_arrays(corresponding_pairs(mF, mA, xs, align=False))
    rel = np.linalg.norm(raw[ok] - xs[ok], axis=1) / np.linalg.norm(xs[ok], axis=1)
    assert np.median(rel) > 0.05


def test_atd_frame():
    f = AtdFrame()
    x = np.random.default_rng(2).uniform(0, 1, (10, 3))
    assert np.allclose(atd_convert(f, atd_convert(f, x), "from_atd"), x, atol=1e-12)
    assert np.array_equal(atd_convert(f, np.zeros(3)), np.zeros(3))
    assert np.array_equal(atd_convert(AtdFrame(np.eye(3)), x), x)
    with pytest.raises(ParameterError):
        AtdFrame(np.diag([1.0, 1.0, 1e-9]))
    with pytest.raises(ParameterError):
        atd_convert(f, x, "sideways")


def test_unknown_axis(atd_model):
    with pytest.raises(ParameterError):
        axis_grid(atd_model, "Q")
