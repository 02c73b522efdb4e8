"""Property battery behind the ``verify`` subcommand.

Each check is cheap, deterministic for a given seed and returns a
:class:`CheckResult`. The battery is a smoke-level certificate; the test
suite repeats every property at full sample counts with its own oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .jets import Jet
from .material import (LocalParams, MaterialField, Wave, local_sensitivities, phase_core,
                       xi_hessian)
from .scenarios import M0


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "status": "PASS" if self.passed else "FAIL", **self.detail}


def random_admissible(rng: np.random.Generator, n: int, e2_sign: int = 0) -> LocalParams:
    """Admissible parameter samples with a strictly positive discriminant.

    ``E^2`` is drawn in ``[-ab, 0.95 ab]`` with ``a = a11 - a55`` and
    ``b = a33 - a55``; ``e2_sign`` restricts it to one side of zero.
    """
    a55 = rng.uniform(1.0, 5.0, n)
    a66 = rng.uniform(1.0, 5.0, n)
    floor = np.maximum(a55, a66)
    a11 = floor + rng.uniform(0.5, 10.0, n)
    a33 = floor + rng.uniform(0.5, 10.0, n)
    ab = (a11 - a55) * (a33 - a55)
    lo = 0.02 if e2_sign > 0 else -1.0
    hi = -0.02 if e2_sign < 0 else 0.95
    e2 = rng.uniform(lo, hi, n) * ab
    return LocalParams.from_values(a11, a33, a55, a66, e2)


def random_unit(rng: np.random.Generator, n: int) -> np.ndarray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def local_xi_hessian(lp: LocalParams, xi: np.ndarray, wave) -> np.ndarray:
    """Half the xi-Hessian in the tilted frame (axis along the third slot)."""
    X = Jet.variables(xi, order=2)
    P = X[0] * X[0] + X[1] * X[1]
    Q = X[2] * X[2]
    p = phase_core(lp.a11, lp.a33, lp.a55, lp.a66, lp.e2, P, Q, Wave.parse(wave))
    return 0.5 * p.h


def check_hessian_closed_form(tol: float = 1e-8) -> CheckResult:
    m = MaterialField.constant(M0)
    xi = np.array([[1.0, 0.0, 0.0]])
    expected = {"qP": [28.0, 28.0, 15.2], "qSV": [8.0, 8.0, 16.8]}
    errs = {}
    for wave, diag in expected.items():
        H = xi_hessian(m, wave, np.zeros(3), xi)[0]
        errs[wave] = float(np.max(np.abs(H - np.diag(diag))))
    return CheckResult("hessian_closed_form", max(errs.values()) <= tol, {"max_abs_error": errs})


def check_sign_lemma(n: int = 10_000, seed: int = 0, zero_tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(seed)
    violations = {}

    def count(name, bad):
        violations[name] = violations.get(name, 0) + int(np.count_nonzero(bad))

    for e2_sign in (1, -1):
        lp = random_admissible(rng, n // 2, e2_sign)
        xi = random_unit(rng, n // 2)
        P, Q = xi[:, 0] ** 2 + xi[:, 1] ** 2, xi[:, 2] ** 2
        sp = local_sensitivities(lp, P, Q, "qP")
        sv = local_sensitivities(lp, P, Q, "qSV")
        count("qP_a11_positive", sp["a11"] <= 0)
        count("qP_a33_positive", sp["a33"] <= 0)
        count("qP_e2_negative", -sp["e2"] <= 0)
        count("qSV_e2_positive", sv["e2"] <= 0)
        sgn = -float(e2_sign)
        count("qSV_a11_sign", sgn * sv["a11"] <= 0)
        count("qSV_a33_sign", sgn * sv["a33"] <= 0)
        # the claimed zeros: xi' = 0 and xi3 = 0
        for P0, Q0, keys in ((np.zeros_like(P), np.ones_like(Q), ("a11", "e2")),
                             (np.ones_like(P), np.zeros_like(Q), ("a33", "e2"))):
            for wave in ("qP", "qSV"):
                s = local_sensitivities(lp, P0, Q0, wave)
                for k in keys:
                    count(f"{wave}_{k}_zero", np.abs(s[k]) > zero_tol)
        s0 = local_sensitivities(lp, np.zeros_like(P), np.ones_like(Q), "qSV")["a33"]
        s1 = local_sensitivities(lp, np.ones_like(P), np.zeros_like(Q), "qSV")["a11"]
        count("qSV_zero_on_axes", (np.abs(s0) > zero_tol) | (np.abs(s1) > zero_tol))
    total = sum(violations.values())
    return CheckResult("sign_lemma", total == 0, {"samples": n, "violations": violations})


def check_qp_convexity(n: int = 10_000, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    lp = random_admissible(rng, n)
    xi = random_unit(rng, n)
    ev = np.linalg.eigvalsh(local_xi_hessian(lp, xi, "qP"))
    scale = np.maximum(lp.a11, lp.a33)
    margin = float(np.min(ev[:, 0] / scale))
    return CheckResult("qp_convexity", margin > 0, {"samples": n, "min_relative_eigenvalue": margin})


def check_corollary(n: int = 1000, seed: int = 2, tol: float = 1e-9) -> CheckResult:
    from .symbols import corollary_coefficient
    from .scenarios import functional_reference, functional_rule

    rng = np.random.default_rng(seed)
    rule = functional_rule(functional_reference())
    a11 = rng.uniform(12.0, 20.0, n)
    lp = LocalParams.from_values(a11, rule.F(a11), 4.0, 5.0, rule.H(a11))
    xi = random_unit(rng, n)
    P, Q = xi[:, 0] ** 2 + xi[:, 1] ** 2, xi[:, 2] ** 2
    got = corollary_coefficient(lp, rule, P, Q)
    want = 2 * P + 2 * rule.dF(a11) * Q
    err = float(np.max(np.abs(got - want)))
    return CheckResult("corollary_coefficient", err <= tol, {"samples": n, "max_abs_error": err})


def check_qsh_extraction(n: int = 1000, seed: int = 3, tol: float = 1e-9) -> CheckResult:
    from .qsh import assemble_metric, extract_parameters

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        a = rng.uniform(0.1, 2.0)
        b = a * rng.uniform(1.2, 3.0) ** rng.choice([-1, 1])
        w = random_unit(rng, 1)[0]
        ex = extract_parameters(assemble_metric(a, b, w))
        line_err = min(np.linalg.norm(ex.axis_span - w), np.linalg.norm(ex.axis_span + w))
        worst = max(worst, abs(ex.alpha - a) / a, abs(ex.beta - b) / b, line_err)
    return CheckResult("qsh_extraction", worst <= tol, {"samples": n, "max_error": worst})


def check_boundary_weights(tol: float = 1e-8) -> CheckResult:
    from .pseudolin import flow_jacobian_at

    m = MaterialField.constant(M0, axis=(0.3, 0.1, 1.0))
    rng = np.random.default_rng(4)
    x = rng.uniform(-0.5, 0.5, (8, 3))
    xi = random_unit(rng, 8)
    Y = flow_jacobian_at(m, "qP", x, xi, np.zeros(8))
    A, B = -Y[:, 3:, 3:], Y[:, 3:, :3]
    err = float(max(np.abs(A + np.eye(3)).max(), np.abs(B).max()))
    return CheckResult("boundary_weights", err <= tol, {"max_abs_error": err})


def run_battery(seed: int = 0) -> list[CheckResult]:
    return [check_hessian_closed_form(), check_sign_lemma(seed=seed), check_qp_convexity(seed=seed + 1),
            check_corollary(seed=seed + 2), check_qsh_extraction(seed=seed + 3),
            check_boundary_weights()]
