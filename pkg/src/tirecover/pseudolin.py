"""Pseudolinearization of the lens-data comparison between two media.

For media ``nu`` and ``nu~`` with Hamiltonians ``p`` and ``p~`` and a ray
``Z(s)`` of ``p`` of duration ``tau``,

    Phi~_tau(z0) - Phi_tau(z0) = -int_0^tau DPhi~_{tau-s}(Z(s)) H_{p - p~}(Z(s)) ds,

so the covector part of the exit mismatch ``Xi(tau) - Xi~(tau)`` is

    J f = int_0^tau ( A dx f + B dxi f ) ds,   A = -dXi~/dxi,  B = dXi~/dx,

with ``f = p - p~`` and the Jacobians of the ``nu~`` flow taken from ``Z(s)``
for the remaining time ``tau - s``. Writing ``p - p~ = sum_l f_l E^l`` with
``E^l`` the parameter-segment average of the sensitivities turns this into a
linear transform of the parameter differences ``f_l``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DiscriminantTooSmall, SegmentInadmissible
from .integrate import Tolerance
from .jets import Jet
from .material import (PARAM_NAMES, LocalParams, MaterialField, Wave, phase_jet, sensitivity_core)
from .raytrace import Bicharacteristic, propagate

GL_ORDER = 8


def gauss_legendre(n: int, a: float = 0.0, b: float = 1.0):
    t, w = np.polynomial.legendre.leggauss(n)
    return a + (b - a) * (t + 1) / 2, w * (b - a) / 2


# ---------------------------------------------------------------------------
# parameter differences and segment weights


@dataclass
class ParamDiff:
    """``f_l = nu_l - nu~_l`` for the active parameters (others zero)."""

    nu: MaterialField
    nu_tilde: MaterialField
    active: tuple = PARAM_NAMES

    def values(self, x) -> dict:
        a = self.nu.local_params(x)
        b = self.nu_tilde.local_params(x)
        return {l: (getattr(a, l) - getattr(b, l)) if l in self.active else np.zeros(len(a))
                for l in PARAM_NAMES}

    def jets(self, X: Sequence[Jet]) -> dict:
        a = dict(zip(("a11", "a33", "a55", "a66", "e2"), self.nu.param_jets(X)))
        b = dict(zip(("a11", "a33", "a55", "a66", "e2"), self.nu_tilde.param_jets(X)))
        return {l: a[l] - b[l] for l in PARAM_NAMES}


def _check_shared(nu: MaterialField, nu_tilde: MaterialField, x):
    a, b = nu.local_params(x), nu_tilde.local_params(x)
    if np.max(np.abs(a.a55 - b.a55)) > 1e-12 * np.max(np.abs(a.a55)):
        raise ValueError("media must share a55 (only E^2, a11, a33 may differ)")


def e_weights_local(lp: LocalParams, lp_tilde: LocalParams, wave, P, Q, n_nodes: int = GL_ORDER) -> dict:
    """Segment average of sensitivities from pointwise parameters."""
    s, w = gauss_legendre(n_nodes)
    out = {l: 0.0 for l in PARAM_NAMES}
    for sk, wk in zip(s, w):
        mix = {k: sk * getattr(lp, k) + (1 - sk) * getattr(lp_tilde, k)
               for k in ("a11", "a33", "a55", "e2")}
        if not LocalParams.from_values(mix["a11"], mix["a33"], mix["a55"], lp.a66, mix["e2"]).admissible().all():
            raise SegmentInadmissible("parameter segment leaves the admissible set")
        try:
            for l in PARAM_NAMES:
                out[l] = out[l] + wk * sensitivity_core(l, mix["a11"], mix["a33"], mix["a55"],
                                                        mix["e2"], P, Q, wave)
        except DiscriminantTooSmall as err:
            raise SegmentInadmissible(f"segment crosses a branch point: {err}") from None
    return out


def _tilted_invariants(m: MaterialField, X, XI):
    n = m.axis_jets(X)
    u = n[0] * XI[0] + n[1] * XI[1] + n[2] * XI[2]
    Q = u * u
    P = XI[0] * XI[0] + XI[1] * XI[1] + XI[2] * XI[2] - Q
    return P, Q


def e_weight_jets(nu: MaterialField, nu_tilde: MaterialField, wave, x, xi, order: int = 1,
                  n_nodes: int = GL_ORDER, check: bool = True) -> dict:
    """``E^l`` as Jets in (x, xi); the layer function of ``nu`` sets the axis."""
    x = np.atleast_2d(np.asarray(x, float))
    xi = np.atleast_2d(np.asarray(xi, float))
    Z = Jet.variables(np.hstack([x, xi]), order=order)
    X, XI = Z[:3], Z[3:]
    a = nu.param_jets(X)
    b = nu_tilde.param_jets(X)
    P, Q = _tilted_invariants(nu, X, XI)
    s, w = gauss_legendre(n_nodes)
    out = {}
    for sk, wk in zip(s, w):
        a11, a33, a55, _, e2 = (ai * sk + bi * (1 - sk) for ai, bi in zip(a, b))
        if check:
            lp = LocalParams.from_values(a11.v, a33.v, a55.v, a[3].v, e2.v)
            if not lp.admissible().all():
                raise SegmentInadmissible("parameter segment leaves the admissible set")
        try:
            for l in PARAM_NAMES:
                term = sensitivity_core(l, a11, a33, a55, e2, P, Q, wave) * wk
                out[l] = term if l not in out else out[l] + term
        except DiscriminantTooSmall as err:
            raise SegmentInadmissible(f"segment crosses a branch point: {err}") from None
    return out


def e_weights(nu: MaterialField, nu_tilde: MaterialField, wave, x, xi, n_nodes: int = GL_ORDER) -> dict:
    """``E^l(x, xi) = int_0^1 dp/dnu_l(s nu + (1-s) nu~) ds`` per parameter."""
    _check_shared(nu, nu_tilde, np.atleast_2d(x))
    return {l: j.v for l, j in e_weight_jets(nu, nu_tilde, wave, x, xi, 1, n_nodes).items()}


# ---------------------------------------------------------------------------
# flow Jacobians


@dataclass
class FlowJacobian:
    """Derivative of the ``nu~`` flow from ray samples to the exit time."""

    t: np.ndarray
    Y: np.ndarray  # (N, 6, 6)

    @property
    def dXi_dx(self) -> np.ndarray:
        return self.Y[:, 3:, :3]

    @property
    def dXi_dxi(self) -> np.ndarray:
        return self.Y[:, 3:, 3:]

    @property
    def A(self) -> np.ndarray:
        return -self.dXi_dxi

    @property
    def B(self) -> np.ndarray:
        return self.dXi_dx


def flow_jacobian(m_tilde: MaterialField, wave, ray: Bicharacteristic,
                  tol: Tolerance = Tolerance(1e-11, 1e-13)) -> FlowJacobian:
    """Variational flow of ``m_tilde`` from each ray sample to the ray's exit time."""
    _, _, Y, _ = propagate(m_tilde, wave, ray.x, ray.xi, ray.tau - ray.t, tol, variational=True)
    return FlowJacobian(np.asarray(ray.t), Y)


def flow_jacobian_at(m_tilde: MaterialField, wave, x, xi, remaining,
                     tol: Tolerance = Tolerance(1e-11, 1e-13)) -> np.ndarray:
    return propagate(m_tilde, wave, x, xi, remaining, tol, variational=True)[2]


def ray_states(m: MaterialField, wave, ray: Bicharacteristic, times,
               tol: Tolerance = Tolerance(1e-12, 1e-14)) -> tuple[np.ndarray, np.ndarray]:
    """Ray states at arbitrary times via restarts from the preceding sample."""
    times = np.asarray(times, dtype=float)
    k = np.clip(np.searchsorted(ray.t, times, side="right") - 1, 0, len(ray.t) - 1)
    X, XI, _, _ = propagate(m, wave, ray.x[k], ray.xi[k], times - ray.t[k], tol)
    return X, XI


def ray_quadrature(ray: Bicharacteristic, order: int = GL_ORDER,
                   max_panels: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss–Legendre nodes on the ray's sample intervals.

    ``max_panels`` merges consecutive intervals so that at most that many
    panels remain (panel ends are still integrator samples).
    """
    g, w = np.polynomial.legendre.leggauss(order)
    t = ray.t
    if max_panels is not None and len(t) - 1 > max_panels:
        stride = int(np.ceil((len(t) - 1) / max_panels))
        t = np.unique(np.concatenate([t[::stride], t[-1:]]))
    a, b = t[:-1], t[1:]
    nodes = (a[:, None] + (b - a)[:, None] * (g[None] + 1) / 2).ravel()
    weights = ((b - a)[:, None] * w[None] / 2).ravel()
    return nodes, weights


# ---------------------------------------------------------------------------
# SU identity


@dataclass
class SUResult:
    J: np.ndarray  # (R, 3)
    oracle: np.ndarray  # (R, 3)

    @property
    def abs_diff(self) -> np.ndarray:
        return np.linalg.norm(self.J - self.oracle, axis=1)

    def relative(self, floor: float = 0.0) -> np.ndarray:
        return self.abs_diff / np.maximum(np.linalg.norm(self.oracle, axis=1), floor)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ray_id", "component", "J", "oracle", "abs_diff"])
            for r in range(len(self.J)):
                for i in range(3):
                    w.writerow([r, i + 1, f"{self.J[r, i]:.15g}", f"{self.oracle[r, i]:.15g}",
                                f"{abs(self.J[r, i] - self.oracle[r, i]):.3e}"])


def hamiltonian_difference_grad(nu, nu_tilde, wave, x, xi) -> np.ndarray:
    """Gradient of ``p - p~`` in (x, xi), shape (B, 6)."""
    a = phase_jet(nu, wave, x, xi, order=1)
    b = phase_jet(nu_tilde, wave, x, xi, order=1)
    return a.g - b.g


def su_integrand(Y: np.ndarray, df: np.ndarray) -> np.ndarray:
    """Covector part of ``DPhi~ H_f``: ``-Y_xixi dx f + Y_xix dxi f``."""
    return (-np.einsum("bij,bj->bi", Y[:, 3:, 3:], df[:, :3])
            + np.einsum("bij,bj->bi", Y[:, 3:, :3], df[:, 3:]))


def su_identity_residual(nu: MaterialField, nu_tilde: MaterialField, wave,
                         rays: Sequence[Bicharacteristic], order: int = GL_ORDER,
                         tol: Tolerance = Tolerance(1e-10, 1e-12), chunk: int = 4000,
                         skip_rel: float = 1e-15, max_panels: Optional[int] = 12) -> SUResult:
    """Evaluate ``J f`` along each ray next to the exit-covector mismatch.

    The oracle is ``Xi(tau) - Xi~(tau)`` with both flows started at the ray's
    entry and run for the ``nu`` travel time ``tau``.
    """
    wave = Wave.parse(wave)
    # node states along every ray
    node_x, node_xi, node_w, node_ray, remaining = [], [], [], [], []
    for r, ray in enumerate(rays):
        s, w = ray_quadrature(ray, order, max_panels)
        X, XI = ray_states(nu, wave, ray, s)
        node_x.append(X)
        node_xi.append(XI)
        node_w.append(w)
        node_ray.append(np.full(len(s), r))
        remaining.append(ray.tau - s)
    X = np.vstack(node_x)
    XI = np.vstack(node_xi)
    W = np.concatenate(node_w)
    R = np.concatenate(node_ray)
    T = np.concatenate(remaining)
    df = hamiltonian_difference_grad(nu, nu_tilde, wave, X, XI)
    mag = np.linalg.norm(df, axis=1)
    keep = mag > skip_rel * max(mag.max(), 1e-300)
    J = np.zeros((len(rays), 3))
    idx = np.flatnonzero(keep)
    for c in range(0, len(idx), chunk):
        sel = idx[c:c + chunk]
        Y = flow_jacobian_at(nu_tilde, wave, X[sel], XI[sel], T[sel], tol)
        contrib = su_integrand(Y, df[sel]) * W[sel, None]
        np.add.at(J, R[sel], contrib)
    # endpoint oracle
    x0 = np.array([ray.x[0] for ray in rays])
    xi0 = np.array([ray.xi[0] for ray in rays])
    taus = np.array([ray.tau for ray in rays])
    _, xi_t, _, _ = propagate(nu_tilde, wave, x0, xi0, taus, tol)
    oracle = np.array([ray.xi[-1] for ray in rays]) - xi_t
    return SUResult(J, oracle)


# ---------------------------------------------------------------------------
# weights along a ray and the simplified transform


@dataclass
class SUWeights:
    t: np.ndarray
    A: np.ndarray  # (N, 3, 3), A[n, i, j] = A^j_i
    B: np.ndarray  # (N, 3, 3)
    E: dict  # l -> (N,)
    dE: dict  # l -> (N, 6) derivatives of E^l in (x, xi)

    def A_hat(self, l: str) -> np.ndarray:
        """``A^j_i E^l``, shape (N, 3, 3)."""
        return self.A * self.E[l][:, None, None]

    def B_hat(self, l: str) -> np.ndarray:
        """``A^j_i dx_j E^l + B_ij dxi_j E^l``, shape (N, 3)."""
        return (np.einsum("nij,nj->ni", self.A, self.dE[l][:, :3])
                + np.einsum("nij,nj->ni", self.B, self.dE[l][:, 3:]))


def su_weights(nu: MaterialField, nu_tilde: MaterialField, wave, ray: Bicharacteristic,
               times=None, tol: Tolerance = Tolerance(1e-11, 1e-13)) -> SUWeights:
    t = ray.t if times is None else np.asarray(times, float)
    X, XI = (ray.x, ray.xi) if times is None else ray_states(nu, wave, ray, t)
    Y = flow_jacobian_at(nu_tilde, wave, X, XI, ray.tau - t, tol)
    E = e_weight_jets(nu, nu_tilde, wave, X, XI, order=1)
    return SUWeights(t, -Y[:, 3:, 3:], Y[:, 3:, :3], {l: e.v for l, e in E.items()},
                     {l: e.g for l, e in E.items()})


def simplified_transform(nu: MaterialField, nu_tilde: MaterialField, wave, l: str,
                         ray: Bicharacteristic, j: int = 2, order: int = GL_ORDER,
                         tol: Tolerance = Tolerance(1e-11, 1e-13)) -> float:
    """``int -dXi~_j/dxi_j E^l  d_j f_l (X(t)) dt`` along the ray (``j`` fixed)."""
    s, w = ray_quadrature(ray, order)
    X, XI = ray_states(nu, wave, ray, s)
    Zx = Jet.variables(X, order=1)
    fl = ParamDiff(nu, nu_tilde).jets(Zx)[l]
    dfl = fl.g[:, j]
    keep = np.abs(dfl) > 0
    if not keep.any():
        return 0.0
    Y = flow_jacobian_at(nu_tilde, wave, X[keep], XI[keep], ray.tau - s[keep], tol)
    E = e_weights(nu, nu_tilde, wave, X[keep], XI[keep])[l]
    weight = -Y[:, 3 + j, 3 + j] * E
    return float(np.sum(w[keep] * weight * dfl[keep]))
