from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tirecover import inversion as I
from tirecover.errors import ConfigError
from tirecover.scenarios import Bump

BOX = ([-1.0, -1.0, 0.0], [1.0, 1.0, 0.5])


@pytest.fixture(scope="module")
def grid():
    return I.SplineGrid(*BOX, shape=(5, 6, 4))


def test_basis_is_a_partition_of_unity(grid):
    pts = I.eval_points([-0.9, -0.9, 0.05], [0.9, 0.9, 0.45], (5, 5, 4))
    phi, dphi = grid.evaluate(pts)
    np.testing.assert_allclose(phi.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(dphi.sum(axis=1), 0.0, atol=1e-10)


def test_basis_vanishes_outside_the_box(grid):
    phi = grid.evaluate(np.array([[0.0, 0.0, 0.8], [1.5, 0.0, 0.2]]), derivative=False)
    assert not phi.any()


def test_basis_gradients_match_finite_differences(grid):
    x = np.array([[0.13, -0.41, 0.27]])
    _, dphi = grid.evaluate(x)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (grid.evaluate(x + e, False) - grid.evaluate(x - e, False)) / (2 * h)
        np.testing.assert_allclose(dphi[0, :, k], fd[0], atol=1e-7)


def test_spline_fit_reproduces_cubic_products(grid):
    fn = lambda p: (p[:, 0] ** 3 - p[:, 0]) * (1 + p[:, 1] ** 2) * (2 - p[:, 2])  # noqa: E731
    coef = grid.fit(fn)
    pts = np.array([[0.3, 0.2, 0.1], [-0.7, 0.5, 0.4]])
    np.testing.assert_allclose(grid.evaluate(pts, False) @ coef, fn(pts), atol=1e-10)


def test_too_few_basis_functions():
    with pytest.raises(ConfigError):
        I.SplineGrid(*BOX, shape=(3, 5, 5))


def test_greville_heights_span_the_slab(grid):
    h = grid.heights()
    assert len(h) == grid.size and h.min() == 0.0 and h.max() == 0.5


def test_regularization_operator_structure():
    shape = (4, 5, 3)
    R = I.regularization_operator(shape, n_unknowns=2, identity=0.1)
    n = 60
    diffs = 3 * 5 * 3 + 4 * 4 * 3 + 4 * 5 * 2
    assert R.shape == (2 * (diffs + n), 2 * n)
    out = R @ np.ones(2 * n)
    blk = np.concatenate([np.zeros(diffs), np.full(n, 0.1)])
    np.testing.assert_allclose(out, np.concatenate([blk, blk]))


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.floats(1e-3, 1.0))
def test_cgls_matches_a_dense_solve(seed, lam):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(30, 12))
    d = rng.normal(size=30)
    x, hist, _ = I.cgls(A, d, lam, tol=1e-12)
    want = np.linalg.solve(A.T @ A + lam**2 * np.eye(12), A.T @ d)
    np.testing.assert_allclose(x, want, atol=1e-8 * (1 + np.abs(want).max()))
    assert hist[-1] <= hist[0] + 1e-12


def toy_system(rng, shape=(4, 4, 4), rows=90):
    K = int(np.prod(shape))
    A = rng.normal(size=(rows, K))
    coef = rng.normal(size=K)
    return I.LinearSystem(A, A @ coef, np.ones(rows), np.ones(K), I.SplineGrid(*BOX, shape=shape),
                          ("a11",), 0.0, I.regularization_operator(shape))


def test_cgls_with_the_gradient_penalty():
    rng = np.random.default_rng(3)
    s = toy_system(rng)
    lam = 0.3
    x, _, _ = I.cgls(s.A, s.d, lam, s.reg, tol=1e-12)
    M = np.vstack([s.A, lam * s.reg.toarray()])
    want = np.linalg.lstsq(M, np.concatenate([s.d, np.zeros(s.reg.shape[0])]), rcond=None)[0]
    np.testing.assert_allclose(x, want, atol=1e-8)


def test_recover_returns_zero_for_zero_data():
    s = toy_system(np.random.default_rng(0))
    s.d = np.zeros_like(s.d)
    rec = I.recover(s)
    assert not rec.coef.any() and rec.residual == 0.0


def test_recover_is_linear_for_a_fixed_weight():
    s = toy_system(np.random.default_rng(1))
    a = I.recover(s, reg_weight=1e-2).coef
    s.d = 0.5 * s.d
    b = I.recover(s, reg_weight=1e-2).coef
    np.testing.assert_allclose(b, 0.5 * a, atol=1e-9 * np.abs(a).max())


def test_discrepancy_weight_meets_the_target():
    rng = np.random.default_rng(2)
    s = toy_system(rng)
    noise = 0.05 * np.linalg.norm(s.d)
    s.d = s.d + noise * rng.normal(size=s.d.shape) / np.sqrt(len(s.d))
    s.noise = noise
    rec = I.recover(s, tau=1.5)
    assert rec.residual <= 1.5 * noise * 1.05
    assert rec.reg_weight > 1e-5


def test_conjugation_weights():
    w = I.conjugation_weights(np.array([0.0, 0.125, 0.25]), 0.0, 0.25, 2.0)
    np.testing.assert_allclose(w, np.exp(-2.0 / np.array([1.0, 1.5, 2.0])))


def test_node_matrix_agrees_with_pointwise_prediction(grid):
    rng = np.random.default_rng(4)
    N, U = 40, 2
    ns = I.NodeSet(rng.uniform([-0.8, -0.8, 0.05], [0.8, 0.8, 0.45], (N, 3)), rng.integers(0, 5, N),
                   rng.normal(size=(N, U, 6)), rng.normal(size=(N, U, 6, 3)), 5)
    coef = rng.normal(size=(U, grid.size))
    phi, dphi = grid.evaluate(ns.x)
    values = phi @ coef.T
    grads = np.einsum("nkj,uk->nuj", dphi, coef)
    np.testing.assert_allclose((ns.matrix(grid) @ coef.ravel()).reshape(5, 6), ns.predict(values, grads),
                               atol=1e-11)
    np.testing.assert_allclose(ns.predict(2 * values, 2 * grads), 2 * ns.predict(values, grads))


def small_a11(amp):
    cfg = I.default_config("a11")
    cfg.truth = cfg.reference.with_bumps([Bump("a11", amp, center=[0.0, 0.0, 0.12], width=0.25)])
    cfg.fan = replace(cfg.fan, n_rays=12)
    return cfg


def linearization_error(amp):
    cfg = small_a11(amp)
    ref, tru = cfg.reference.build(), cfg.truth.build()
    fan = I.synthesize_data(ref, tru, cfg.reference, "qP", cfg.fan)
    ns = I.transform_nodes(ref, "qP", fan.reference, ("a11",))
    v = I.truth_difference(cfg, ns.x)
    h = 1e-6
    g = np.stack([(I.truth_difference(cfg, ns.x + h * e) - I.truth_difference(cfg, ns.x - h * e)) / (2 * h)
                  for e in np.eye(3)], axis=2)
    return np.linalg.norm(ns.predict(v, g) - fan.data) / np.linalg.norm(fan.data)


def test_linearized_transform_predicts_exit_data():
    # the remainder is second order: halving the bump halves the relative error
    e1, e2 = linearization_error(0.04), linearization_error(0.02)
    assert e1 < 5e-3
    assert e2 == pytest.approx(0.5 * e1, rel=0.1)


def test_identical_media_give_zero_data():
    cfg = small_a11(0.0)
    ref = cfg.reference.build()
    fan = I.synthesize_data(ref, cfg.truth.build(), cfg.reference, "qP", cfg.fan)
    assert np.abs(fan.data).max() < 1e-12
    assert np.all(fan.turning < cfg.reference.domain[1][2])


def test_config_round_trip():
    for kind in ("a11", "functional", "joint"):
        cfg = I.default_config(kind)
        d = cfg.to_dict()
        assert I.InversionConfig.from_dict(d).to_dict() == d


@pytest.mark.parametrize("patch,field", [
    ({"waves": ["qX"]}, "waves"),
    ({"unknowns": ["a55"]}, "unknowns"),
    ({"unknowns": ["a11", "a11"]}, "unknowns"),
    ({"digamma": 0.0}, "digamma"),
    ({"artificial": 5.0}, "artificial"),
    ({"fan": {"rays": 3}}, "fan"),
    ({"bogus": 1}, "inversion"),
])
def test_config_errors_name_the_field(patch, field):
    d = I.default_config("a11").to_dict()
    d.update(patch)
    with pytest.raises(ConfigError) as info:
        I.InversionConfig.from_dict(d)
    assert info.value.field == field


def test_functional_recovery_needs_a_rule():
    d = I.default_config("a11").to_dict()
    d["unknowns"] = ["functional"]
    with pytest.raises(ConfigError) as info:
        I.InversionConfig.from_dict(d)
    assert info.value.field == "reference.functional"


def test_unknown_experiment_kind():
    with pytest.raises(ConfigError):
        I.default_config("e2-only")
