import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from bpscan.geometry import Pose
from bpscan.measurement import (
    AssociabilityModel,
    ClutterModel,
    ErrorModel,
    ScanModel,
    SupportViolation,
    clutter_density,
    clutter_product,
    joint_density_exact,
    log_joint_density_exact,
    log_q_factor,
    pair_likelihood,
    point_to_plane_residual,
    q_factor,
)
from bpscan.pointcloud import SurfaceCloud

I = Pose.identity()
PEAK = 1.0 / (0.03 * math.sqrt(2.0 * math.pi))


def test_residual_examples():
    assert point_to_plane_residual([1, 0], [1, 0], [0, 0], Pose.from_xytheta(1, 0, 0)) == 0.0
    assert point_to_plane_residual([1, 0], [1, 0], [0, 0], I) == 1.0
    assert point_to_plane_residual([0, 0], [0, 1], [5, 0], I) == 0.0


def test_residual_sign_retained():
    assert point_to_plane_residual([-1, 0], [1, 0], [0, 0], I) == -1.0


@given(st.floats(-10, 10), st.floats(-math.pi, math.pi), st.floats(-5, 5))
def test_residual_ignores_tangential_offsets(k, phi, x):
    n = np.array([math.cos(phi), math.sin(phi)])
    tangent = np.array([-n[1], n[0]])
    d = np.array([1.0, 2.0])
    s = np.array([x, 0.5])
    p = Pose.from_xytheta(0.3, -0.2, 0.1)
    r0 = point_to_plane_residual(d, n, s, p)
    r1 = point_to_plane_residual(d + k * tangent, n, s, p)
    assert r1 == pytest.approx(r0, abs=1e-9)


def test_pair_likelihood_values():
    em = ErrorModel(0.03)
    assert pair_likelihood([0, 0], [1, 0], [0, 0], I, em) == pytest.approx(13.298076, rel=1e-6)
    one_sigma = pair_likelihood([0.03, 0], [1, 0], [0, 0], I, em)
    assert one_sigma == pytest.approx(PEAK * math.exp(-0.5), rel=1e-12)
    assert pair_likelihood([0.3, 0], [1, 0], [0, 0], I, em) < 1e-20 * PEAK


def test_error_model_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        ErrorModel(0.0)


def test_associability_bounds():
    AssociabilityModel(0.0)
    with pytest.raises(ValueError):
        AssociabilityModel(1.0)
    with pytest.raises(ValueError):
        AssociabilityModel(-0.1)


def test_clutter_density_value():
    cm = ClutterModel(max_range=100.0)
    val, ok = clutter_density([50.0, 0.0], I, cm)
    assert ok
    assert val == pytest.approx(1.0 / (2 * math.pi * 100 * 50), rel=1e-12)


def test_clutter_density_support_violations():
    cm = ClutterModel(max_range=100.0)
    assert clutter_density([0.0, 0.0], I, cm) == (0.0, False)
    assert clutter_density([101.0, 0.0], I, cm) == (0.0, False)


def test_clutter_density_integrates_to_one():
    cm = ClutterModel(max_range=100.0)

    def f(r, b):
        # Cartesian density times the polar Jacobian r
        return clutter_density([r * math.cos(b), r * math.sin(b)], I, cm)[0] * r

    total, _ = integrate.dblquad(f, 0.0, 2 * math.pi, 1e-9, 100.0)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_clutter_density_pose_independent():
    cm = ClutterModel()
    a = clutter_density([3.0, 4.0], I, cm)
    b = clutter_density([3.0, 4.0], Pose.from_xytheta(5, -2, 1.0), cm)
    assert a == b


def test_clutter_product():
    cm = ClutterModel()
    assert clutter_product(I, np.zeros((0, 2)), cm) == (1.0, True)
    single = clutter_product(I, [[3.0, 4.0]], cm)[0]
    assert single == pytest.approx(clutter_density([3.0, 4.0], I, cm)[0], rel=1e-12)
    pts = [[3.0, 4.0], [10.0, -1.0]]
    assert clutter_product(I, pts, cm) == clutter_product(Pose.from_xytheta(1, 1, 1), pts, cm)
    assert clutter_product(I, [[3.0, 4.0], [200.0, 0.0]], cm) == (0.0, False)


def test_q_factor_cases():
    model = ScanModel()
    src = np.array([[5.0, 0.0]])
    # a_i = 0
    assert q_factor(I, 0, [5, 0], [1, 0], src, model) == pytest.approx(0.2)
    # zero residual
    fna = 1.0 / (2 * math.pi * 100 * 5)
    expected = 0.8 * PEAK / (1.0 * fna)
    assert q_factor(I, 1, [5, 0], [1, 0], src, model) == pytest.approx(expected, rel=1e-12)


def test_q_factor_without_associability():
    model = ScanModel(assoc=AssociabilityModel(0.0))
    src = np.array([[5.0, 0.0]])
    assert q_factor(I, 1, [5, 0], [1, 0], src, model) == 0.0
    assert q_factor(I, 0, [5, 0], [1, 0], src, model) == 1.0


def test_q_factor_positive_when_likelihood_positive():
    model = ScanModel()
    src = np.array([[5.0, 0.0]])
    assert q_factor(I, 1, [5.5, 0], [1, 0], src, model) > 0.0


def test_q_factor_support_violation():
    model = ScanModel()
    with pytest.raises(SupportViolation):
        log_q_factor(I, 1, [0, 0], [1, 0], np.array([[0.0, 0.0]]), model)


def _surface(points, normals):
    return SurfaceCloud(points, normals, np.ones(len(points), dtype=bool))


def test_joint_invalid_association_is_zero():
    surf = _surface([[1.0, 0.0], [2.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]])
    src = np.array([[1.0, 0.0], [2.0, 0.0]])
    assert joint_density_exact(I, [1, 1], surf, src, ScanModel()) == 0.0


def test_joint_all_zero_no_sources():
    model = ScanModel()
    surf = _surface([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]], [[1.0, 0.0]] * 3)
    val = joint_density_exact(I, [0, 0, 0], surf, np.zeros((0, 2)), model)
    assert val == pytest.approx(math.exp(-1.0) * 0.2**3, rel=1e-12)


def test_joint_two_by_two_golden():
    # hand-expanded: N_S = 2, a = (2, 0), lambda = 1.5, f_a = 0.6, sigma = 0.1
    model = ScanModel(ErrorModel(0.1), AssociabilityModel(0.6), ClutterModel(lambda_na=1.5, max_range=10.0))
    surf = _surface([[1.0, 1.0], [3.0, 0.0]], [[0.0, 1.0], [1.0, 0.0]])
    src = np.array([[2.0, 0.0], [1.0, 0.95]])
    r = 1.0 - 0.95
    g = math.exp(-0.5 * (r / 0.1) ** 2) / (0.1 * math.sqrt(2 * math.pi))
    f1 = 1.0 / (2 * math.pi * 10 * 2.0)
    f2 = 1.0 / (2 * math.pi * 10 * math.hypot(1.0, 0.95))
    expected = (1.5**1 / 2.0) * math.exp(-1.5) * f1 * f2 * (0.6 * g / f2) * 0.4
    got = joint_density_exact(I, [2, 0], surf, src, model)
    assert got == pytest.approx(expected, rel=1e-12)
    assert got == pytest.approx(0.001125237439495494, rel=1e-12)


def test_joint_poisson_ratio():
    # one more clutter point with fixed associations: the Poisson count factor
    # changes by lambda/(k+1) and the uniform association prior N_NA!/N_S! by
    # (k+1)/(N_S+1), on top of the new point's clutter density
    lam = 2.5
    model = ScanModel(clutter=ClutterModel(lambda_na=lam))
    surf = _surface([[1.0, 0.0]], [[1.0, 0.0]])
    src = np.array([[1.0, 0.0], [4.0, 3.0]])
    extra = np.array([[0.0, 7.0]])
    base = log_joint_density_exact(I, [1], surf, src, model)
    more = log_joint_density_exact(I, [1], surf, np.vstack([src, extra]), model)
    k, n_s = 1, 2  # clutter and source counts before adding one
    fna = clutter_density(extra[0], I, model.clutter)[0]
    ratio = lam / (k + 1) * (k + 1) / (n_s + 1) * fna
    assert more - base == pytest.approx(math.log(ratio), rel=1e-12)


def test_joint_mass_finite_and_positive():
    model = ScanModel(ErrorModel(0.2))
    surf = _surface([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]])
    src = np.array([[1.0, 0.1], [0.1, 1.0]])
    total = 0.0
    for x, y in itertools.product(np.linspace(-0.5, 0.5, 5), repeat=2):
        p = Pose.from_xytheta(x, y, 0.0)
        total += sum(joint_density_exact(p, a, surf, src, model) for a in itertools.product(range(3), repeat=2))
    assert np.isfinite(total) and total > 0.0
