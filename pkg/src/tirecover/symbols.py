"""Principal symbols of the localized, conjugated normal operator.

Chart: the artificial boundary is ``x3 = 0`` and the boundary defining
function is ``x = x3`` with ``y = (x1, x2)``. A scattering covector
``zeta3 dx/x^2 + zeta' . dy/x`` is stored as ``(zeta3, zeta'_1, zeta'_2)``.

Standard symbol at an interior point ``z`` (up to a positive factor):

    S(zeta) = int int g(lam, th) chi(lam) delta(zeta3 lam + zeta' . w(th)) dlam dth,

where ``w(th) = (cos th, sin th)`` and ``g`` is the sensitivity ``dp/dnu_l``
at the covector whose ray velocity is ``(w, x lam)``. The delta function is
resolved in whichever variable keeps the Jacobian bounded: ``th`` when
``|zeta3| Lambda >= |zeta'|``, otherwise ``lam`` with two ``th`` branches.
S is even in zeta, so only the upper hemisphere is evaluated.

Boundary symbol with Gaussian weight (finite conjugation ``D``):

    B(zeta) = (zeta3^2 + D^2)^(-1/2) int_S1 nu^(-1/2) exp(-(Y.zeta')^2 / (2 nu (zeta3^2 + D^2))) g(Y) dY,

with ``nu = alpha / D`` and ``alpha`` half the second derivative of ``x`` along
the ray tangent to the boundary in direction ``Y``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (BranchFailure, FitFailure, NoConvergence, NonpositiveNu, RankDeficiency,
                     SingularHessian)
from .material import (PARAM_NAMES, FunctionalRule, LocalParams, MaterialField, Wave,
                       material_sensitivities, sensitivity_core, to_tilted)
from .raytrace import fibonacci_sphere, invert_hamilton_map, propagate, ray_acceleration

CIRCLE_NODES = 512
LAMBDA_NODES = 128
CHEB_DEGREE = 16


# ---------------------------------------------------------------------------
# cutoffs and grids


@dataclass
class Cutoff:
    """Even bump ``chi`` on ``[-Lambda, Lambda]`` with ``chi(0) = 1``."""

    Lambda: float = 0.5
    digamma: float = 1.0
    kind: str = "bump"

    def chi(self, s) -> np.ndarray:
        u = np.asarray(s, dtype=float) / self.Lambda
        out = np.zeros_like(u)
        inside = np.abs(u) < 1
        ui = u[inside]
        if self.kind == "bump":
            out[inside] = np.exp(1.0 - 1.0 / (1.0 - ui**2))
        elif self.kind == "flat":
            out[inside] = np.exp(1.0 - 1.0 / (1.0 - ui**4))
        else:
            raise ValueError(f"unknown cutoff kind {self.kind!r}")
        return out


def zeta_grid(resolution_deg: float = 1.0, hemisphere: bool = True) -> np.ndarray:
    """Near-uniform unit directions ``(zeta3, zeta'_1, zeta'_2)``."""
    h = np.deg2rad(resolution_deg)
    n = int(round(4 * np.pi / h**2))
    d = fibonacci_sphere(n)[:, [2, 0, 1]]
    if hemisphere:
        d = d[d[:, 0] >= 0]
    return d


def degenerate_direction(m: MaterialField, z, boundary: bool = False) -> np.ndarray:
    """Scattering image of ``df``: ``(x^2 f_x, x f_y)``, or ``(0, f_y)`` at x = 0."""
    z = np.asarray(z, dtype=float)
    g = m.layer.gradient(z[None])[0]
    x = z[2]
    if boundary or x == 0:
        d = np.array([0.0, g[0], g[1]])
    else:
        d = np.array([x * x * g[2], x * g[0], x * g[1]])
    nrm = np.linalg.norm(d)
    if nrm == 0:
        return d
    return d / nrm


def angle_to_line(dirs: np.ndarray, line: np.ndarray) -> np.ndarray:
    """Angle (degrees) between directions and the line ``+/- line``."""
    c = np.clip(np.abs(dirs @ line), 0.0, 1.0)
    return np.rad2deg(np.arccos(c))


# ---------------------------------------------------------------------------
# integrands


def _sens(m: MaterialField, wave, l: str, x, xi, rule: Optional[FunctionalRule] = None):
    dE2, d11, d33 = material_sensitivities(m, wave, x, xi)
    if l == "functional":
        a11 = m.local_params(x).a11
        return d11 + rule.dF(a11) * d33 + rule.dH(a11) * dE2
    return {"e2": dE2, "a11": d11, "a33": d33}[l]


def covectors_for(m: MaterialField, wave, z, v) -> np.ndarray:
    try:
        return invert_hamilton_map(m, wave, np.broadcast_to(z, v.shape), v)
    except (NoConvergence, SingularHessian) as err:
        raise BranchFailure(f"cannot resolve H^-1 on the critical set: {err}") from None


def integrand(m: MaterialField, wave, l: str, z, lam, theta, rule=None) -> np.ndarray:
    """Sensitivity at H_z^{-1}(cos th, sin th, x lam) for broadcast (lam, th)."""
    lam, theta = np.broadcast_arrays(np.asarray(lam, float), np.asarray(theta, float))
    shape = lam.shape
    x = float(z[2])
    v = np.stack([np.cos(theta).ravel(), np.sin(theta).ravel(), x * lam.ravel()], axis=1)
    zz = np.broadcast_to(np.asarray(z, float), v.shape)
    xi = covectors_for(m, wave, zz, v)
    return _sens(m, wave, l, zz, xi, rule).reshape(shape)


@dataclass
class CriticalSet:
    """Resolved critical set of ``zeta3 lam + zeta' . w(th) = 0``.

    ``kind = 'theta'``: nodes over the circle with ``lam(th)``; ``'lambda'``:
    nodes in ``lam`` with two angle branches. ``weight`` already includes the
    delta-function Jacobian and the quadrature weight (not ``chi``).
    """

    kind: str
    lam: np.ndarray
    theta: np.ndarray
    weight: np.ndarray
    inside: np.ndarray

    def points(self):
        return self.lam[self.inside], self.theta[self.inside]


def critical_set(zeta, cutoff: Cutoff, n_circle: int = CIRCLE_NODES,
                 n_lambda: int = LAMBDA_NODES) -> CriticalSet:
    zeta = np.asarray(zeta, dtype=float)
    z3, zp = zeta[0], zeta[1:]
    nzp = np.linalg.norm(zp)
    if z3 == 0 and nzp == 0:
        raise ValueError("zeta must be non-zero")
    L = cutoff.Lambda
    if abs(z3) * L >= nzp:
        th = 2 * np.pi * np.arange(n_circle) / n_circle
        lam = -(zp[0] * np.cos(th) + zp[1] * np.sin(th)) / z3
        w = np.full(n_circle, 2 * np.pi / n_circle / abs(z3))
        return CriticalSet("theta", lam, th, w, np.abs(lam) <= L)
    t, wl = np.polynomial.legendre.leggauss(n_lambda)
    lam = L * t
    c = -z3 * lam / nzp
    th0 = np.arctan2(zp[1], zp[0])
    ac = np.arccos(c)
    lam2 = np.concatenate([lam, lam])
    th2 = np.mod(np.concatenate([th0 + ac, th0 - ac]), 2 * np.pi)
    w = L * wl / (nzp * np.sqrt(1 - c * c))
    return CriticalSet("lambda", lam2, th2, np.concatenate([w, w]), np.ones(2 * n_lambda, bool))


def standard_symbol(m: MaterialField, wave, l: str, z, zeta, cutoff: Cutoff = Cutoff(),
                    rule: Optional[FunctionalRule] = None) -> float:
    """Standard symbol at one covector by direct quadrature (no tabulation)."""
    cs = critical_set(zeta, cutoff)
    lam, th = cs.points()
    w = cs.weight[cs.inside] * cutoff.chi(lam)
    keep = w > 0
    if not keep.any():
        return 0.0
    g = integrand(m, wave, l, z, lam[keep], th[keep], rule)
    return float(np.sum(w[keep] * g))


# ---------------------------------------------------------------------------
# tabulated evaluation over a direction grid


@dataclass
class SymbolTable:
    """Integrand ``g(lam, th)`` as Chebyshev series in ``lam`` per circle column."""

    Lambda: float
    coef: np.ndarray  # (n_theta, degree + 1)

    @classmethod
    def build(cls, m, wave, l, z, cutoff: Cutoff, n_theta: int = CIRCLE_NODES,
              degree: int = CHEB_DEGREE, rule=None) -> "SymbolTable":
        k = np.arange(degree + 1)
        u = np.cos(np.pi * (k + 0.5) / (degree + 1))
        th = 2 * np.pi * np.arange(n_theta) / n_theta
        vals = integrand(m, wave, l, z, cutoff.Lambda * u[None, :], th[:, None], rule)
        coef = np.polynomial.chebyshev.chebfit(u, vals.T, degree).T
        return cls(cutoff.Lambda, coef)

    @property
    def n_theta(self):
        return self.coef.shape[0]

    def _cheb(self, u, cols):
        """Clenshaw over the last axis of coef for per-point columns."""
        c = self.coef
        b1 = np.zeros(u.shape)
        b2 = np.zeros(u.shape)
        for j in range(c.shape[1] - 1, 0, -1):
            b1, b2 = 2 * u * b1 - b2 + c[cols, j], b1
        return u * b1 - b2 + c[cols, 0]

    def on_columns(self, lam, cols):
        return self._cheb(np.clip(lam / self.Lambda, -1, 1), cols)

    def at(self, lam, theta):
        """Cubic periodic interpolation in ``th`` between Chebyshev columns."""
        n = self.n_theta
        s = np.mod(theta, 2 * np.pi) * n / (2 * np.pi)
        i = np.floor(s).astype(int)
        f = s - i
        u = np.clip(lam / self.Lambda, -1, 1)
        w = (-f * (f - 1) * (f - 2) / 6, (f + 1) * (f - 1) * (f - 2) / 2,
             -(f + 1) * f * (f - 2) / 2, (f + 1) * f * (f - 1) / 6)
        out = np.zeros(u.shape)
        for k, wk in zip((-1, 0, 1, 2), w):
            out += wk * self._cheb(u, np.mod(i + k, n))
        return out


def symbol_on_grid(table: SymbolTable, zetas: np.ndarray, cutoff: Cutoff,
                   n_lambda: int = LAMBDA_NODES, block: int = 2048) -> np.ndarray:
    """Standard symbol at every grid direction from a tabulated integrand."""
    zetas = np.atleast_2d(zetas)
    z3, zp = zetas[:, 0], zetas[:, 1:]
    nzp = np.linalg.norm(zp, axis=1)
    L = cutoff.Lambda
    out = np.zeros(len(zetas))
    n = table.n_theta
    th = 2 * np.pi * np.arange(n) / n
    cols = np.arange(n)
    A = np.flatnonzero(np.abs(z3) * L >= nzp)
    for b in range(0, len(A), block):
        idx = A[b:b + block]
        lam = -(zp[idx, 0:1] * np.cos(th) + zp[idx, 1:2] * np.sin(th)) / z3[idx, None]
        chi = cutoff.chi(lam)
        g = table.on_columns(lam, np.broadcast_to(cols, lam.shape))
        out[idx] = np.sum(chi * g, axis=1) * (2 * np.pi / n) / np.abs(z3[idx])
    Bi = np.flatnonzero(np.abs(z3) * L < nzp)
    t, wl = np.polynomial.legendre.leggauss(n_lambda)
    lam = L * t
    chi = cutoff.chi(lam)
    for b in range(0, len(Bi), block):
        idx = Bi[b:b + block]
        c = -z3[idx, None] * lam[None, :] / nzp[idx, None]
        ac = np.arccos(c)
        th0 = np.arctan2(zp[idx, 1], zp[idx, 0])[:, None]
        ll = np.broadcast_to(lam, c.shape)
        g = table.at(ll, th0 + ac) + table.at(ll, th0 - ac)
        w = (L * wl * chi)[None, :] / (nzp[idx, None] * np.sqrt(1 - c * c))
        out[idx] = np.sum(w * g, axis=1)
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class SymbolReport:
    z: np.ndarray
    wave: str
    l: str
    grid: np.ndarray
    values: np.ndarray
    reference: np.ndarray
    degenerate: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    tolerance: float = 1e-3
    angle_limit: float = 3.0
    fits: list = field(default_factory=list)

    @property
    def grid_max(self) -> float:
        return float(np.max(np.abs(self.values))) if len(self.values) else 0.0

    @property
    def margin(self) -> float:
        """Signed minimum over the grid relative to the grid maximum."""
        if not len(self.values) or self.grid_max == 0:
            return 0.0
        return float(np.min(self.values) / self.grid_max)

    @property
    def degenerate_angles(self) -> np.ndarray:
        if not len(self.degenerate):
            return np.zeros(0)
        return angle_to_line(self.degenerate, self.reference)

    @property
    def localized(self) -> bool:
        return bool(np.all(self.degenerate_angles <= self.angle_limit))

    def to_dict(self) -> dict:
        return {
            "z": [float(v) for v in self.z], "wave": self.wave, "parameter": self.l,
            "n_grid": int(len(self.grid)), "grid_max": self.grid_max, "margin": self.margin,
            "tolerance": self.tolerance, "reference_direction": [float(v) for v in self.reference],
            "degenerate_directions": [[float(c) for c in d] for d in self.degenerate],
            "degenerate_max_angle_deg": float(self.degenerate_angles.max()) if len(self.degenerate) else 0.0,
            "localized": self.localized, "fits": self.fits,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    def write_csv(self, path):
        write_symbol_csv(path, self.grid, self.values, self.reference)


def write_symbol_csv(path, grid, values, reference=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["zeta3", "zeta1", "zeta2", "value", "angle_to_reference_deg"])
        for d, v in zip(np.atleast_2d(grid) if len(grid) else [], values):
            ang = angle_to_line(d[None], reference)[0] if reference is not None else float("nan")
            w.writerow([f"{d[0]:.12g}", f"{d[1]:.12g}", f"{d[2]:.12g}", f"{v:.12g}", f"{ang:.6g}"])


def standard_symbol_grid(m: MaterialField, wave, l: str, z, cutoff: Cutoff = Cutoff(),
                         resolution_deg: float = 1.0, zetas=None, rule=None) -> SymbolReport:
    z = np.asarray(z, dtype=float)
    grid = zeta_grid(resolution_deg) if zetas is None else np.atleast_2d(zetas)
    table = SymbolTable.build(m, wave, l, z, cutoff, rule=rule)
    vals = symbol_on_grid(table, grid, cutoff)
    ref = degenerate_direction(m, z)
    return SymbolReport(z, Wave.parse(wave).value, l, grid, vals, ref)


def degeneracy_scan(m: MaterialField, wave, l: str, z, cutoff: Cutoff = Cutoff(),
                    resolution_deg: float = 1.0, tol: float = 1e-3, angle_limit: float = 3.0,
                    report: Optional[SymbolReport] = None) -> SymbolReport:
    """Directions where |symbol| < tol * grid max; PASS iff they hug +/- df."""
    rep = report or standard_symbol_grid(m, wave, l, z, cutoff, resolution_deg)
    small = np.abs(rep.values) < tol * rep.grid_max
    rep.degenerate = rep.grid[small]
    rep.tolerance = tol
    rep.angle_limit = angle_limit
    return rep


@dataclass
class QuadraticFit:
    exponent: float
    coefficient: float
    residual: float
    eps: np.ndarray
    values: np.ndarray

    def to_dict(self):
        return {"exponent": self.exponent, "coefficient": self.coefficient, "residual": self.residual}


def quadratic_fit(m: MaterialField, wave, l: str, z, direction, cutoff: Cutoff = Cutoff(),
                  eps=None, max_residual: float = 0.05, min_sin: float = 1e-3,
                  boundary_value=None) -> QuadraticFit:
    """Fit ``|S(zeta_df + eps nu)| ~ c eps^q`` over a dyadic ladder.

    ``boundary_value`` (a callable zeta -> value) replaces the standard symbol,
    e.g. for fits of boundary symbols.
    """
    z = np.asarray(z, dtype=float)
    ref = degenerate_direction(m, z)
    nu = np.asarray(direction, dtype=float)
    nu = nu / np.linalg.norm(nu)
    if np.linalg.norm(nu - (nu @ ref) * ref) < min_sin:
        raise FitFailure("direction is not transversal to the degenerate line")
    eps = 2.0 ** -np.arange(5, 13) if eps is None else np.asarray(eps, float)
    fn = boundary_value or (lambda zeta: standard_symbol(m, wave, l, z, zeta, cutoff))
    vals = np.array([abs(fn(ref + e * nu)) for e in eps])
    if np.any(vals <= 0):
        raise FitFailure("symbol vanished on the ladder")
    A = np.stack([np.ones_like(eps), np.log(eps)], axis=1)
    coef, *_ = np.linalg.lstsq(A, np.log(vals), rcond=None)
    resid = float(np.max(np.abs(A @ coef - np.log(vals))))
    fit = QuadraticFit(float(coef[1]), float(np.exp(coef[0])), resid, eps, vals)
    if resid > max_residual:
        raise FitFailure(f"log-log residual {resid:.3g} exceeds {max_residual}")
    return fit


def transversal_directions(ref: np.ndarray, count: int = 8) -> np.ndarray:
    ref = ref / np.linalg.norm(ref)
    a = np.eye(3)[np.argmin(np.abs(ref))]
    e1 = a - (a @ ref) * ref
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(ref, e1)
    ang = 2 * np.pi * (np.arange(count) + 0.25) / count
    return np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2


# ---------------------------------------------------------------------------
# boundary symbol


def ray_curvature(m: MaterialField, wave, z, directions) -> tuple[np.ndarray, np.ndarray]:
    """``alpha`` = half the second derivative of ``x3`` along tangent rays.

    Returns ``(alpha, xi)`` for rays with velocity ``(Y, 0)`` at ``z``.
    """
    Y = np.atleast_2d(directions)
    v = np.column_stack([Y, np.zeros(len(Y))])
    zz = np.broadcast_to(np.asarray(z, float), v.shape)
    xi = covectors_for(m, wave, zz, v)
    _, acc = ray_acceleration(m, wave, zz, xi)
    return 0.5 * acc[:, 2], xi


def ray_curvature_fit(m: MaterialField, wave, z, directions, h: float = 1e-3, n: int = 9) -> np.ndarray:
    """Cross-check of :func:`ray_curvature` by quadratic fits to traced rays."""
    alpha, xi = ray_curvature(m, wave, z, directions)
    ts = np.linspace(-h, h, n)
    out = np.zeros(len(alpha))
    for b in range(len(alpha)):
        zz = np.tile(np.asarray(z, float), (n, 1))
        xx = np.tile(xi[b], (n, 1))
        fwd = ts >= 0
        X = np.zeros((n, 3))
        X[fwd] = propagate(m, wave, zz[fwd], xx[fwd], ts[fwd])[0]
        Xb, _, _, _ = propagate(m, wave, zz[~fwd], -xx[~fwd], -ts[~fwd])
        X[~fwd] = Xb
        out[b] = np.polyfit(ts, X[:, 2] - z[2], 2)[0]
    return out


@dataclass
class BoundaryCircle:
    """Per-node data on the tangent circle at a boundary point."""

    Y: np.ndarray
    alpha: np.ndarray
    xi: np.ndarray
    weight: float

    @classmethod
    def build(cls, m: MaterialField, wave, z, n: int = CIRCLE_NODES) -> "BoundaryCircle":
        th = 2 * np.pi * np.arange(n) / n
        Y = np.stack([np.cos(th), np.sin(th)], axis=1)
        alpha, xi = ray_curvature(m, wave, z, Y)
        if np.any(alpha <= 0):
            raise NonpositiveNu("ray curvature alpha <= 0: foliation not convex here")
        return cls(Y, alpha, xi, 2 * np.pi / n)

    def gaussian(self, zetas, digamma: float) -> np.ndarray:
        """Weights (N_zeta, n) of the Gaussian-localized circle integral."""
        zetas = np.atleast_2d(zetas)
        nu = self.alpha / digamma
        s2 = zetas[:, 0] ** 2 + digamma**2
        proj = zetas[:, 1:] @ self.Y.T
        return (np.exp(-proj**2 / (2 * nu[None, :] * s2[:, None])) / np.sqrt(nu)[None, :]
                / np.sqrt(s2)[:, None] * self.weight)


def boundary_symbol_finite(m: MaterialField, wave, l: str, z, zetas, digamma: float = 1.0,
                           n: int = CIRCLE_NODES, rule=None) -> np.ndarray:
    circ = BoundaryCircle.build(m, wave, z, n)
    zz = np.broadcast_to(np.asarray(z, float), (n, 3))
    g = _sens(m, wave, l, zz, circ.xi, rule)
    return circ.gaussian(zetas, digamma) @ g


# ---------------------------------------------------------------------------
# two-parameter symbols


def sensitivity_rows(m: MaterialField, wave, params: Sequence[str], x, xi, phi_prime=None):
    """Rows ``[dp/dmu_1, dp/dmu_2]``; 'functional' means d/da11 + phi' d/da33."""
    dE2, d11, d33 = material_sensitivities(m, wave, x, xi)
    cols = {"e2": dE2, "a11": d11, "a33": d33}
    out = []
    for p in params:
        if p == "functional":
            out.append(d11 + phi_prime * d33)
        else:
            out.append(cols[p])
    return np.stack(out, axis=1)


@dataclass
class MatrixSymbol:
    matrices: np.ndarray  # (N, 2, 2)
    min_eig: np.ndarray
    rank_deficient: bool
    node_rank: np.ndarray

    def to_dict(self):
        return {"min_symmetric_eigenvalue": float(self.min_eig.min()),
                "rank_deficient": self.rank_deficient,
                "min_node_rank": int(self.node_rank.min())}


def two_param_matrix_symbol(m: MaterialField, params: Sequence[str], z, zetas,
                            digamma: float = 1.0, phi_prime: float = 1.0, n: int = CIRCLE_NODES,
                            waves=(Wave.QP, Wave.QSV), node_mask=None,
                            rank_tol: float = 1e-10) -> MatrixSymbol:
    """``int sum_waves w(Y, zeta) C S dY`` with ``C = S^T`` at each circle node.

    ``S`` has one row per wave and one column per parameter. ``node_mask``
    restricts the rank check to selected circle nodes.
    """
    zetas = np.atleast_2d(zetas)
    M = np.zeros((len(zetas), 2, 2))
    ranks = []
    for wave in waves:
        circ = BoundaryCircle.build(m, wave, z, n)
        zz = np.broadcast_to(np.asarray(z, float), (n, 3))
        S = sensitivity_rows(m, wave, params, zz, circ.xi, phi_prime)  # (n, 2)
        G = circ.gaussian(zetas, digamma)  # (N, n)
        M += np.einsum("zn,ni,nj->zij", G, S, S)
        ranks.append(S)
    S_all = np.stack(ranks, axis=1)  # (n, waves, 2)
    sv = np.linalg.svd(S_all, compute_uv=False)
    node_rank = np.sum(sv > rank_tol * max(sv.max(), 1e-300), axis=1)
    sel = node_rank if node_mask is None else node_rank[node_mask]
    deficient = bool(np.all(sel < 2))
    sym = 0.5 * (M + np.swapaxes(M, 1, 2))
    return MatrixSymbol(M, np.linalg.eigvalsh(sym)[:, 0], deficient, node_rank)


def require_full_rank(ms: MatrixSymbol):
    if ms.rank_deficient:
        raise RankDeficiency("sensitivity matrix drops rank on the whole circle")


def corollary_coefficient(lp: LocalParams, rule: FunctionalRule, P, Q) -> np.ndarray:
    """Sum over qP and qSV of ``dp/da11 + F' dp/da33 + H' dp/dE^2``."""
    total = 0.0
    dF, dH = rule.dF(lp.a11), rule.dH(lp.a11)
    for w in (Wave.QP, Wave.QSV):
        s = {l: sensitivity_core(l, lp.a11, lp.a33, lp.a55, lp.e2, P, Q, w) for l in PARAM_NAMES}
        total = total + s["a11"] + dF * s["a33"] + dH * s["e2"]
    return total
