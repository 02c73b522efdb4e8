import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from tirecover.errors import DiscriminantTooSmall, SegmentInadmissible
from tirecover.fields import GaussianBump
from tirecover.integrate import Tolerance
from tirecover.material import MaterialField, hamiltonian
from tirecover.pseudolin import (ParamDiff, e_weights, flow_jacobian, flow_jacobian_at,
                                 ray_states, simplified_transform, su_identity_residual, su_weights)
from tirecover.raytrace import PhasePoint, box_surfaces, integrate_flow, normalize_covectors, propagate
from tirecover.scenarios import M0

from strategies import admissible, unit_vectors

BOX = box_surfaces([-1, -1, -1], [1, 1, 1])
TIGHT = Tolerance(1e-11, 1e-13)


def tilted_m0():
    m = MaterialField.constant(M0, axis=(0.3, 0.1, 1.0))
    return m.replace(e2=44.0)


def with_bump(m, param="a11", amp=0.3, center=(0.0, 0.0, 0.0), width=0.3):
    return m.replace(**{param: getattr(m, param) + GaussianBump(amp, np.asarray(center), width)})


def shoot(m, wave, x0, d):
    x0 = np.asarray(x0, float)
    xi = normalize_covectors(m, wave, x0[None], np.asarray(d, float)[None])[0]
    return integrate_flow(m, wave, PhasePoint(x0, xi), BOX, tol=TIGHT)


def test_homogeneous_flow_jacobian_is_trivial():
    m = tilted_m0()
    ray = shoot(m, "qP", [-0.5, 0.0, -1.0], [0.3, 0.1, 1.0])
    J = flow_jacobian(m, "qP", ray)
    np.testing.assert_allclose(J.dXi_dx, 0.0, atol=1e-12)
    np.testing.assert_allclose(J.dXi_dxi, np.broadcast_to(np.eye(3), J.dXi_dxi.shape), atol=1e-12)


def test_weights_at_the_exit_point():
    nu_t = with_bump(tilted_m0(), "e2", -3.0)
    ray = shoot(nu_t, "qSV", [-0.5, 0.0, -1.0], [0.3, 0.1, 1.0])
    w = su_weights(with_bump(nu_t, "a11", 0.2, (0.1, 0, 0)), nu_t, "qSV", ray, times=[ray.tau])
    np.testing.assert_allclose(w.A[0], -np.eye(3), atol=1e-12)
    np.testing.assert_allclose(w.B[0], 0.0, atol=1e-12)


def test_flow_jacobian_matches_forward_differences():
    m = with_bump(tilted_m0(), "a11", 1.0)
    x = np.array([-0.4, 0.1, -0.3])
    xi = normalize_covectors(m, "qP", x[None], np.array([[0.8, 0.1, 0.4]]))[0]
    T = 0.25
    Y = flow_jacobian_at(m, "qP", x[None], xi[None], [T], TIGHT)[0]
    z0 = np.concatenate([x, xi])
    h = 1e-6
    base = np.concatenate(propagate(m, "qP", x[None], xi[None], [T], TIGHT)[:2], axis=1)[0]
    fd = np.zeros((6, 6))
    for j in range(6):
        z = z0.copy()
        z[j] += h
        out = np.concatenate(propagate(m, "qP", z[None, :3], z[None, 3:], [T], TIGHT)[:2], axis=1)[0]
        fd[:, j] = (out - base) / h
    assert np.abs(Y - fd).max() < 1e-5 * np.abs(Y).max()


def test_segment_weight_at_equal_media():
    m = MaterialField.constant(M0)
    E = e_weights(m, m, "qP", np.zeros((1, 3)), np.array([[1.0, 0.0, 1.0]]))
    assert E["e2"][0] == pytest.approx(-0.164398, abs=1e-6)
    assert E["e2"][0] == pytest.approx(-2.0 / np.sqrt(18**2 - 4 * 44), rel=1e-12)


@settings(max_examples=40)
@given(admissible(), admissible(), unit_vectors, st.sampled_from(["qP", "qSV"]))
def test_segment_weights_satisfy_the_difference_identity(a, b, xi, wave):
    layer = tilted_m0().layer
    nu = MaterialField(a[0], a[1], a[2], a[3], layer=layer, e2=a[4])
    # a55 and a66 are shared, so only the three active parameters move
    a11, a33, e2 = b[0], b[1], b[4]
    assume(a11 > a[2] + 1 and a33 > a[2] + 1 and e2 < 0.9 * (a11 - a[2]) * (a33 - a[2]))
    nut = MaterialField(a11, a33, a[2], a[3], layer=layer, e2=e2)
    x = np.zeros((1, 3))
    try:
        E = e_weights(nu, nut, wave, x, xi[None], n_nodes=32)
    except (DiscriminantTooSmall, SegmentInadmissible):
        assume(False)
    f = ParamDiff(nu, nut).values(x)
    lhs = hamiltonian(nu, wave, x, xi[None])[0] - hamiltonian(nut, wave, x, xi[None])[0]
    rhs = sum(f[l][0] * E[l][0] for l in E)
    assert lhs == pytest.approx(rhs, abs=1e-9 * (1 + abs(lhs)))


def test_su_identity_vanishes_for_equal_media():
    m = with_bump(tilted_m0(), "a11", 0.2)
    rays = [shoot(m, "qP", [-0.6, 0.0, -1.0], [0.4, 0.0, 1.0])]
    res = su_identity_residual(m, m, "qP", rays)
    assert np.abs(res.J).max() < 1e-9 and np.abs(res.oracle).max() < 1e-9


@pytest.mark.parametrize("wave", ["qP", "qSV"])
def test_su_identity_is_exact(wave):
    nut = tilted_m0()
    nu = with_bump(with_bump(nut, "a11", 0.5), "e2", -3.0, (0.1, -0.1, 0.2), 0.35)
    starts = [([-0.6, 0.0, -1.0], [0.4, 0.0, 1.0]), ([0.2, -0.5, -1.0], [-0.1, 0.5, 1.0]),
              ([0.0, 0.0, -1.0], [0.05, 0.02, 1.0])]
    rays = [shoot(nu, wave, x, d) for x, d in starts]
    res = su_identity_residual(nu, nut, wave, rays)
    assert np.linalg.norm(res.oracle, axis=1).min() > 1e-6
    assert res.relative().max() < 1e-6


def test_perturbation_off_the_rays_is_invisible():
    nut = tilted_m0()
    nu = with_bump(nut, "a11", 0.5, (0.8, 0.8, 0.8), 0.04)
    rays = [shoot(nu, "qP", [-0.6, -0.6, -1.0], [0.1, 0.0, 1.0])]
    res = su_identity_residual(nu, nut, "qP", rays)
    assert np.abs(res.J).max() < 1e-6 and np.abs(res.oracle).max() < 1e-6


def test_simplified_transform_of_zero_difference():
    m = tilted_m0()
    ray = shoot(m, "qP", [-0.5, 0.0, -1.0], [0.3, 0.1, 1.0])
    assert simplified_transform(m, m, "qP", "a11", ray) == 0.0


def test_simplified_transform_in_a_homogeneous_reference():
    nut = tilted_m0()
    nu = with_bump(nut, "a11", 0.05, (0.0, 0.0, 0.0), 0.3)
    ray = shoot(nu, "qP", [-0.5, 0.05, -1.0], [0.35, 0.0, 1.0])
    got = simplified_transform(nu, nut, "qP", "a11", ray, j=0, order=8)
    # homogeneous reference: the weight is -E, integrate on a fine trapezoid grid
    t = np.linspace(0, ray.tau, 4001)
    X, XI = ray_states(nu, "qP", ray, t)
    E = e_weights(nu, nut, "qP", X, XI)["a11"]
    bump = GaussianBump(0.05, np.zeros(3), 0.3)
    dfx = bump.gradient(X)[:, 0]
    want = np.trapezoid(-E * dfx, t) if hasattr(np, "trapezoid") else np.trapz(-E * dfx, t)
    assert got == pytest.approx(want, rel=1e-6)


def test_boundary_weight_is_minus_the_sensitivity():
    from tirecover.material import material_sensitivities

    m = tilted_m0()
    x = np.array([[0.3, 0.2, 1.0]])
    xi = np.array([[0.2, 0.4, 0.7]])
    w = -flow_jacobian_at(m, "qP", x, xi, [0.0])[0, 3:, 3:] * e_weights(m, m, "qP", x, xi)["a33"][0]
    np.testing.assert_allclose(w, -np.eye(3) * material_sensitivities(m, "qP", x, xi)[2][0], atol=1e-14)
