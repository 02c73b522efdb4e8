import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tirecover.errors import ConformalPoint, TangencyError
from tirecover.fields import GaussianBump, Linear, RadialField
from tirecover.material import MaterialField
from tirecover.qsh import (RankOneMetric, SeedPatch, assemble_metric, build_adapted_coordinates,
                           extract_parameters, qsh_metric_field)
from tirecover.scenarios import M0

from strategies import unit_vectors

pos = st.floats(0.05, 5.0)


def canonical(v):
    v = np.asarray(v, float) / np.linalg.norm(v)
    k = np.argmax(np.abs(v) > 1e-12)
    return v if v[k] > 0 else -v


def test_conformal_case_is_a_multiple_of_g0():
    np.testing.assert_allclose(assemble_metric(1.0, 1.0, [0.3, 0.4, 0.5]), np.eye(3), atol=1e-15)


def test_axis_aligned_metric():
    np.testing.assert_allclose(assemble_metric(1.0, 2.0, [0, 0, 1.0]), np.diag([1.0, 1.0, 2.0]))


def test_m0_metric_from_stiffnesses(m0):
    rm = RankOneMetric.from_material(m0)
    a, b, w = rm.at(np.zeros(3))
    np.testing.assert_allclose(assemble_metric(a, b, w)[0], np.diag([0.2, 0.2, 0.25]), atol=1e-15)


def test_metric_dualizes_the_qsh_hamiltonian(tilted):
    from tirecover.material import hamiltonian

    x = np.zeros((1, 3))
    g = qsh_metric_field(tilted)(x)[0]
    xi = np.array([0.3, -0.4, 0.8])
    assert xi @ np.linalg.solve(g, xi) == pytest.approx(hamiltonian(tilted, "qSH", x, xi[None])[0], rel=1e-12)


def test_extraction_of_a_diagonal_metric():
    ex = extract_parameters(np.diag([1.0, 1.0, 2.0]))
    assert (ex.alpha, ex.beta) == pytest.approx((1.0, 2.0))
    np.testing.assert_allclose(ex.axis_span, [0, 0, 1.0], atol=1e-12)


def test_extraction_of_a_tilted_metric():
    g = assemble_metric(0.2, 0.25, np.array([1.0, 0.0, 1.0]) / np.sqrt(2))
    ex = extract_parameters(g)
    assert (ex.alpha, ex.beta) == pytest.approx((0.2, 0.25), rel=1e-12)
    np.testing.assert_allclose(ex.axis_span, np.array([1.0, 0, 1.0]) / np.sqrt(2), atol=1e-12)


def test_conformal_point_reports_alpha():
    with pytest.raises(ConformalPoint) as info:
        extract_parameters(3.0 * np.eye(3))
    assert info.value.alpha == pytest.approx(3.0)


@settings(max_examples=200)
@given(pos, pos, unit_vectors)
def test_extraction_inverts_assembly(alpha, beta, w):
    if abs(alpha - beta) < 1e-3 * (alpha + beta):
        return
    ex = extract_parameters(assemble_metric(alpha, beta, w))
    assert ex.alpha == pytest.approx(alpha, rel=1e-9)
    assert ex.beta == pytest.approx(beta, rel=1e-9)
    np.testing.assert_allclose(ex.axis_span, canonical(w), atol=1e-8)


@given(pos, pos, unit_vectors)
def test_metric_ignores_the_sign_and_scale_of_w(alpha, beta, w):
    np.testing.assert_allclose(assemble_metric(alpha, beta, w), assemble_metric(alpha, beta, -3.0 * w),
                               atol=1e-13 * (alpha + beta))


@settings(max_examples=50)
@given(pos, pos, unit_vectors)
def test_extraction_with_a_general_background(alpha, beta, w):
    if abs(alpha - beta) < 1e-3 * (alpha + beta):
        return
    L = np.array([[1.0, 0.0, 0.0], [0.3, 1.2, 0.0], [-0.2, 0.1, 0.8]])
    g0 = L @ L.T
    ex = extract_parameters(assemble_metric(alpha, beta, w, g0), g0)
    assert (ex.alpha, ex.beta) == pytest.approx((alpha, beta), rel=1e-9)
    np.testing.assert_allclose(ex.axis_span, canonical(w), atol=1e-8)


def flat_seed(n=3, half=0.4):
    ax = np.linspace(-half, half, n)
    return SeedPatch(np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), ax, ax)


def layered(layer):
    m = MaterialField.constant(M0)
    return m.replace(layer=layer, a55=m.a55 + GaussianBump(0.5, np.zeros(3), 0.4))


def test_horizontal_layers_give_the_identity_chart():
    chart = build_adapted_coordinates(layered(Linear([0, 0, 1.0])), flat_seed(), [-0.5, 0.0, 0.5])
    np.testing.assert_allclose(chart.x, chart.y, atol=1e-12)
    np.testing.assert_allclose(chart.jacobian, np.broadcast_to(np.eye(3), chart.jacobian.shape), atol=1e-10)
    assert chart.max_residual < 1e-12


def test_tilted_layers_are_straightened():
    f = Linear([0.1, 0.0, 1.0])
    m = layered(f)
    chart = build_adapted_coordinates(m, flat_seed(), [-0.4, 0.2, 0.6])
    np.testing.assert_allclose(f(chart.x), chart.y[:, 2], atol=1e-10)
    assert chart.max_residual < 1e-6
    # the plain Cartesian chart is not block diagonal for this axis
    g = qsh_metric_field(m)(chart.x)
    assert np.abs(g[:, 0, 2]).max() > 1e-3


def test_radial_layers_from_a_distant_center():
    f = RadialField(np.array([0.0, 0.0, -3.0]), sign=1.0, radius=3.0)
    m = layered(f)
    chart = build_adapted_coordinates(m, flat_seed(), [-0.3, 0.0, 0.4])
    np.testing.assert_allclose(f(chart.x), chart.y[:, 2], atol=1e-9)
    assert chart.max_residual < 1e-6


def test_metric_gradient_flow_matches_the_euclidean_one():
    f = Linear([0.2, -0.1, 1.0])
    m = layered(f)
    a = build_adapted_coordinates(m, flat_seed(), [0.3])
    b = build_adapted_coordinates(m, flat_seed(), [0.3], metric=qsh_metric_field(m))
    np.testing.assert_allclose(a.x, b.x, atol=1e-7)


def test_seed_tangent_to_the_gradient_is_rejected():
    m = layered(Linear([0, 0, 1.0]))
    ax = np.linspace(-0.2, 0.2, 2)
    seed = SeedPatch(np.zeros(3), np.array([1.0, 0, 0]), np.array([0, 0, 1.0]), ax, ax)
    with pytest.raises(TangencyError):
        build_adapted_coordinates(m, seed, [0.1])


def test_chart_csv(tmp_path):
    chart = build_adapted_coordinates(layered(Linear([0, 0, 1.0])), flat_seed(2), [0.0])
    path = tmp_path / "chart.csv"
    chart.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("y1,y2,y3") and len(lines) == 5
