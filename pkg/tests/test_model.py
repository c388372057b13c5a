import math
import threading

import numpy as np
import pytest

from spca.core import SampleSet, knn_density_nd
from spca.curves import CurveParams, points_at
from spca.datagen import GambaSpec, gen_gamba
from spca.errors import ConfigError, FitError, OutOfSupportError, ParameterError
from spca.model import ResponseVector, SpcaModel, fit

from conftest import angle_deg

GAUSS = CurveParams(0.5, 0.2, 16)
GAMBA = GambaSpec(arc_radius=16.8, base_std=1.4, arc_angle_deg=90, arc_profile=2)


def empirical_cdf(sorted_values):
    return lambda x: np.searchsorted(sorted_values, x, side="right") / sorted_values.size


@pytest.fixture(scope="module")
def iso():
    X = np.random.default_rng(0).standard_normal((5000, 2))
    return SampleSet(X)


@pytest.fixture(scope="module")
def laplace_1d():
    v = np.random.default_rng(2).laplace(0, 1, 10_000)
    s = SampleSet(v[:, None])
    return s, fit(s, 1.0, CurveParams(0.2, 0.1, 4), origin_mode="mean")


@pytest.fixture(scope="module")
def gamba_model():
    return fit(gen_gamba(GAMBA), 1.0, CurveParams(0.2, 0.56, 4), origin_mode="mode")


def test_elongated_gaussian_order_and_direction():
    X = np.random.default_rng(1).standard_normal((5000, 2)) * [3.0, 1.0]
    m = fit(SampleSet(X), 0.0, GAUSS, origin_mode="mean")
    assert m.dim_order == [0, 1]
    assert angle_deg(m._root.curve.tangent_at(0.0), [1, 0]) < 5
    assert np.prod(m.scales) == pytest.approx(1.0)
    assert m.scales[0] > m.scales[1]


def test_one_dimensional_scale_is_one(laplace_1d):
    _, m = laplace_1d
    assert m.dim_order == [0]
    assert m.scales[0] == pytest.approx(1.0, abs=1e-12)


def test_origin_maps_to_zero(iso, gamba_model):
    for m in (fit(iso, 1 / 3, GAUSS, origin_mode="mean"), gamba_model):
        r = m.transform(m.origin)
        assert np.array_equal(r.r, np.zeros(2)) and r.ok
        assert np.array_equal(m.inverse(np.zeros(2)), m.origin)


def test_gamma_one_1d_matches_cdf(laplace_1d):
    s, m = laplace_1d
    F = empirical_cdf(np.sort(s.points[:, 0]))
    xs = np.linspace(-4, 4, 81)
    R, conv, _ = m.transform_many(xs[:, None])
    assert conv.all()
    assert np.max(np.abs(R[:, 0] - (F(xs) - F(m.origin[0])))) < 0.03


def test_gamma_one_1d_inverse_matches_quantile(laplace_1d):
    s, m = laplace_1d
    F = empirical_cdf(np.sort(s.points[:, 0]))
    u = np.linspace(-0.45, 0.45, 37)
    q = np.array([m.inverse([v])[0] for v in u])
    assert np.max(np.abs(F(q) - F(m.origin[0]) - u)) < 0.03


def test_gamma_zero_isotropic_is_rotation(iso):
    m = fit(iso, 0.0, GAUSS, origin_mode="mean")
    assert np.all(np.abs(m.scales - 1) < 0.05)
    rng = np.random.default_rng(5)
    pts = rng.standard_normal((300, 2))
    pts = pts[np.linalg.norm(pts, axis=1) < 2]
    R, conv, _ = m.transform_many(pts)
    B = m.basis[:, m.dim_order]
    lin = (pts - m.origin) @ B
    err = np.linalg.norm(R - lin, axis=1) / np.linalg.norm(pts - m.origin, axis=1)
    assert conv.all() and err.max() < 0.05


def test_gamba_origin_is_density_peak(gamba_model):
    S = gamba_model.training
    k = gamba_model.curve_params.k_for(S.n, 2)
    dens = knn_density_nd(S.points, S.points, k, exclude_self=True)
    at = knn_density_nd(S.points, gamba_model.origin[None], k, exclude_self=True)[0]
    assert np.mean(dens >= at) <= 0.1
    # normalised arc position of the origin: Laplacian half is t < split
    theta = math.radians(GAMBA.arc_angle_deg)
    phi = math.atan2(gamba_model.origin[1], gamba_model.origin[0])
    assert (math.pi / 2 + theta / 2 - phi) / theta < GAMBA.split


def test_gamba_round_trip(gamba_model):
    S = gamba_model.training
    rng = np.random.default_rng(7)
    X = S.points[rng.choice(S.n, 200, replace=False)]
    R, conv, sup = gamba_model.transform_many(X)
    ok = conv.all(axis=1) & sup
    assert ok.mean() > 0.95
    back = np.array([gamba_model.inverse(r) for r in R[ok]])
    rms = math.sqrt(np.mean(np.sum((S.points - S.points.mean(0)) ** 2, axis=1)))
    err = np.linalg.norm(back - X[ok], axis=1) / rms
    assert np.median(err) < 0.02 and np.percentile(err, 90) < 0.05


def test_first_response_monotone_and_tangent(gamba_model):
    c = gamba_model._root.curve
    lo, hi = c.arc_range
    P, T = points_at(c, np.linspace(0.8 * lo, 0.8 * hi, 40))
    R, conv, _ = gamba_model.transform_many(P)
    assert conv.all() and np.all(np.diff(R[:, 0]) > 0)
    for p, t in zip(P[::4], T[::4]):
        J = gamba_model.jacobian_fd(p, 0.05)
        assert angle_deg(J[0], t) < 5


def test_jacobian_straight_gamma_zero(iso):
    m = fit(iso, 0.0, GAUSS, origin_mode="mean")
    J = m.jacobian_fd([0.3, 0.2], 0.05)
    Q = J / m.scales[:, None]
    assert np.allclose(Q @ Q.T, np.eye(2), atol=0.1)
    assert abs(abs(np.linalg.det(J)) / np.prod(m.scales) - 1) < 0.02
    d1 = np.linalg.det(m.jacobian_fd([0.1, 0.0], 0.1))
    d2 = np.linalg.det(m.jacobian_fd([0.1, 0.0], 0.05))
    assert abs(d2 / d1 - 1) < 0.01


def test_jacobian_density_ratio_gamma_one(iso):
    # pointwise determinants need a smoother marginal than the default k gives
    m = fit(iso, 1.0, GAUSS, origin_mode="mean", k_fraction_density=0.1, slab_fraction=0.2)
    dense, sparse = np.array([0.1, 0.0]), np.array([1.5, 0.5])
    rho = knn_density_nd(iso.points, np.array([dense, sparse]), 100)
    dets = [abs(np.linalg.det(m.jacobian_fd(x, 0.05))) for x in (dense, sparse)]
    assert abs((dets[0] / dets[1]) / (rho[0] / rho[1]) - 1) < 0.4


def test_jacobian_probe_outside_support(iso):
    m = fit(iso, 0.0, GAUSS, origin_mode="mean")
    with pytest.raises(Exception, match="probe"):
        m.jacobian_fd([0.0, 0.0], 50.0)
    with pytest.raises(ParameterError):
        m.jacobian_fd([0.0, 0.0], 0.0)


def test_fit_errors():
    rng = np.random.default_rng(0)
    flat = np.column_stack([rng.normal(size=100), np.zeros(100)])
    with pytest.raises(FitError, match="direction 2"):
        fit(SampleSet(flat), 1.0)
    with pytest.raises(ParameterError):
        fit(SampleSet(rng.normal(size=(15, 2))), 1.0)
    with pytest.raises(ParameterError):
        fit(SampleSet(rng.normal(size=(100, 2))), -1.0)


def test_out_of_support(iso):
    m = fit(iso, 0.0, GAUSS, origin_mode="mean")
    with pytest.raises(OutOfSupportError):
        m.transform([40.0, 40.0])
    assert not m.in_support([[40.0, 40.0]])[0]


def test_user_origin_and_bad_order(iso):
    m = fit(iso, 0.0, GAUSS, origin_mode=[0.1, -0.1])
    assert np.array_equal(m.origin, [0.1, -0.1])
    with pytest.raises(ParameterError):
        SpcaModel(iso, 0.0, [0, 0], [0, 0], [1, 1], GAUSS)


def test_save_load_reproduces(tmp_path, iso):
    from spca.core import write_csv
    write_csv(tmp_path / "train.csv", iso.points)
    from spca.core import read_csv
    train = read_csv(tmp_path / "train.csv")
    m = fit(train, 1 / 3, GAUSS, origin_mode="mean", training_path="train.csv")
    m.save(tmp_path / "m.json")
    back = SpcaModel.load(tmp_path / "m.json")
    x = np.array([0.4, -0.7])
    assert np.array_equal(back.transform(x).r, m.transform(x).r)
    other = SampleSet(train.points + 1e-3)
    with pytest.raises(ConfigError):
        SpcaModel.load(tmp_path / "m.json", training=other)


def test_deterministic_and_thread_safe(iso):
    rng = np.random.default_rng(4)
    X = rng.standard_normal((40, 2))
    a = fit(iso, 1.0, GAUSS, origin_mode="mode")
    b = fit(iso, 1.0, GAUSS, origin_mode="mode")
    ref, _, _ = a.transform_many(X)
    assert np.array_equal(ref, b.transform_many(X)[0])
    out = {}

    def work(i):
        out[i] = np.array([b._forward(x)[0] for x in X[i::4]])

    threads = [threading.Thread(target=work, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        assert np.array_equal(out[i], ref[i::4])


def test_response_vector_flags():
    r = ResponseVector(np.zeros(2), np.array([True, False]))
    assert not r.ok
