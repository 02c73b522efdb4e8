"""Linearized recovery of parameter differences near the artificial boundary.

Data: for each ray of a fan entering through the surface, the mismatch of
the exit phase point ``Z(tau) - Z~(tau)`` (``tau`` the travel time in the
true medium, ``Z~`` the reference flow from the same entry point).

Model: to first order in ``f = sum_l dnu_l dp~/dnu_l``,

    Z(tau) - Z~(tau) = int_0^tau~ Y(s) (d_xi f, -d_x f)(Z~(s)) ds,
    Y(s) = M(tau~) M(s)^{-1},

with ``M`` the derivative of the reference flow from the entry point. The
unknowns are expanded in tensor cubic B-splines on the slab between the
artificial boundary ``x3 = 0`` and the surface.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.linalg import cho_factor, cho_solve
from scipy.interpolate import BSpline
from scipy.stats import qmc

from .errors import ConfigError, EmptyRowWarning, NoConvergence
from .integrate import Tolerance
from .material import FunctionalRule, MaterialField, Wave, sensitivity_jet
from .pseudolin import ParamDiff, gauss_legendre
from .raytrace import (Bicharacteristic, Surface, box_surfaces, invert_hamilton_map,
                       normalize_covectors, propagate, trace_rays)
from .scenarios import MediumSpec, functional_rule

ARTIFICIAL = "artificial"


# ---------------------------------------------------------------------------
# basis


@dataclass
class SplineGrid:
    """Tensor cubic B-splines with clamped uniform knots on a box."""

    lo: Sequence[float]
    hi: Sequence[float]
    shape: Sequence[int] = (8, 8, 5)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, float)
        self.hi = np.asarray(self.hi, float)
        self.shape = tuple(int(n) for n in self.shape)
        if min(self.shape) < 4:
            raise ConfigError("grid.shape", "need at least 4 basis functions per axis")
        self._splines = []
        for d in range(3):
            inner = np.linspace(self.lo[d], self.hi[d], self.shape[d] - 2)
            t = np.concatenate([[self.lo[d]] * 3, inner, [self.hi[d]] * 3])
            sp = BSpline(t, np.eye(self.shape[d]), 3, extrapolate=False)
            self._splines.append((sp, sp.derivative()))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def _axis(self, d, x):
        sp, dsp = self._splines[d]
        xc = np.clip(x, self.lo[d], self.hi[d])
        v, g = sp(xc), dsp(xc)
        out = (x < self.lo[d] - 1e-12) | (x > self.hi[d] + 1e-12)
        v[out] = 0.0
        g[out] = 0.0
        return np.nan_to_num(v), np.nan_to_num(g)

    def evaluate(self, x, derivative: bool = True):
        """Basis values (N, K) and gradients (N, K, 3)."""
        x = np.atleast_2d(x)
        (v1, g1), (v2, g2), (v3, g3) = (self._axis(d, x[:, d]) for d in range(3))
        phi = np.einsum("ni,nj,nk->nijk", v1, v2, v3).reshape(len(x), -1)
        if not derivative:
            return phi
        d = np.stack([np.einsum("ni,nj,nk->nijk", g1, v2, v3).reshape(len(x), -1),
                      np.einsum("ni,nj,nk->nijk", v1, g2, v3).reshape(len(x), -1),
                      np.einsum("ni,nj,nk->nijk", v1, v2, g3).reshape(len(x), -1)], axis=2)
        return phi, d

    def heights(self) -> np.ndarray:
        """Greville abscissa in x3 of every basis function (flattened order)."""
        t = self._splines[2][0].t
        gv = np.array([t[i + 1:i + 4].mean() for i in range(self.shape[2])])
        return np.tile(gv, self.shape[0] * self.shape[1])

    def fit(self, fn, n: int = 24) -> np.ndarray:
        """Least-squares spline coefficients of a scalar function on the box."""
        pts = eval_points(self.lo, self.hi, (n, n, max(n // 2, 6)))
        phi = self.evaluate(pts, derivative=False)
        return np.linalg.lstsq(phi, fn(pts), rcond=None)[0]


def eval_points(lo, hi, shape) -> np.ndarray:
    axes = [np.linspace(lo[d], hi[d], shape[d]) for d in range(3)]
    G = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in G], axis=1)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class FanSpec:
    n_rays: int = 400
    window: float = 0.6
    dip_deg: tuple = (6.0, 50.0)
    seed: int = 0
    oversample: float = 2.5
    t_max: float = 6.0


@dataclass
class InversionConfig:
    reference: MediumSpec
    truth: MediumSpec
    waves: tuple = ("qP",)
    unknowns: tuple = ("a11",)
    fan: FanSpec = field(default_factory=FanSpec)
    grid_shape: tuple = (14, 14, 6)
    grid_lateral: float = 0.8
    artificial: float = 0.0
    digamma: float = 1.0
    Lambda: float = 0.5
    tau: float = 1.5
    model_error: float = 0.0
    reg_weight: Optional[float] = None
    reg_identity: float = 0.1
    eval_window: float = 0.6
    rtol: float = 1e-10
    order: int = 4
    max_panels: int = 24

    @property
    def functional(self) -> bool:
        return tuple(self.unknowns) == ("functional",)

    def validate(self):
        for w in self.waves:
            try:
                Wave.parse(w)
            except ValueError:
                raise ConfigError("waves", f"unknown wave {w!r}") from None
        ok = {"e2", "a11", "a33"}
        if self.functional:
            if self.reference.functional is None:
                raise ConfigError("reference.functional", "functional recovery needs a rule")
        elif not self.unknowns or not set(self.unknowns) <= ok or len(set(self.unknowns)) != len(self.unknowns):
            raise ConfigError("unknowns", "choose distinct entries of e2, a11, a33 or 'functional'")
        if len(self.unknowns) > 2:
            raise ConfigError("unknowns", "at most two parameters can be recovered together")
        if self.digamma <= 0:
            raise ConfigError("digamma", "must be positive")
        top = self.reference.domain[1][2]
        if not self.reference.domain[0][2] < self.artificial < top:
            raise ConfigError("artificial", "artificial boundary must lie inside the domain")
        return self

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("reference", "truth", "fan")}
        d["reference"] = self.reference.to_dict()
        d["truth"] = self.truth.to_dict()
        d["fan"] = asdict(self.fan)
        d["waves"] = list(self.waves)
        d["unknowns"] = list(self.unknowns)
        d["grid_shape"] = list(self.grid_shape)
        d["fan"]["dip_deg"] = list(self.fan.dip_deg)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InversionConfig":
        d = dict(d)
        for key in ("reference", "truth"):
            if key not in d:
                raise ConfigError(key, "missing medium")
            d[key] = MediumSpec.from_dict(d[key])
        fan = d.pop("fan", {})
        try:
            fan = FanSpec(**{**fan, "dip_deg": tuple(fan.get("dip_deg", FanSpec.dip_deg))})
        except TypeError as err:
            raise ConfigError("fan", str(err)) from None
        for key in ("waves", "unknowns", "grid_shape"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            cfg = cls(fan=fan, **d)
        except TypeError as err:
            raise ConfigError("inversion", str(err)) from None
        return cfg.validate()


# ---------------------------------------------------------------------------
# fan and data


@dataclass
class FanRays:
    wave: Wave
    x0: np.ndarray
    xi0: np.ndarray
    reference: list  # Bicharacteristic in the reference medium
    tau: np.ndarray  # travel times in the true medium
    data: np.ndarray  # (R, 6) exit mismatch
    turning: np.ndarray  # (R,) minimum x3 along the reference ray


def stop_surfaces(spec: MediumSpec, artificial: float) -> list[Surface]:
    lo, hi = spec.domain
    out = box_surfaces(lo, hi)
    out.append(Surface.plane(ARTIFICIAL, [0.0, 0.0, -1.0], -artificial))
    return out


def fan_candidates(m: MaterialField, spec: MediumSpec, wave, fan: FanSpec):
    """Quasi-random surface entries aimed so that ray midpoints fill the window."""
    n = int(np.ceil(fan.n_rays * fan.oversample))
    u = qmc.Halton(d=4, scramble=True, seed=fan.seed).random(n)
    top = spec.domain[1][2]
    mid = (2 * u[:, :2] - 1) * fan.window
    phi = 2 * np.pi * u[:, 2]
    lo, hi = np.deg2rad(fan.dip_deg)
    dip = lo + (hi - lo) * u[:, 3]
    # isotropic estimate of the half chord of a turning ray in a linear gradient
    g = max(spec.gain, 1e-6)
    depth = (1 / np.cos(dip) - 1) / g
    half = np.sqrt(depth**2 + 2 * depth / g)
    h = np.stack([np.cos(phi), np.sin(phi)], axis=1)
    x0 = np.column_stack([mid - half[:, None] * h, np.full(n, top)])
    v = np.column_stack([np.cos(dip)[:, None] * h, -np.sin(dip)])
    xi0 = invert_hamilton_map(m, wave, x0, v)
    return x0, normalize_covectors(m, wave, x0, xi0)


def synthesize_data(reference: MaterialField, truth: MaterialField, spec: MediumSpec, wave,
                    fan: FanSpec, artificial: float = 0.0, tol: Tolerance = Tolerance(1e-10, 1e-12)) -> FanRays:
    """Trace the fan in both media and keep rays that return to the surface."""
    wave = Wave.parse(wave)
    x0, xi0 = fan_candidates(reference, spec, wave, fan)
    surf = stop_surfaces(spec, artificial)
    ref = trace_rays(reference, wave, x0, xi0, surf, fan.t_max, tol)
    tru = trace_rays(truth, wave, x0, xi0, surf, fan.t_max, tol)
    keep = [i for i in range(len(x0))
            if ref[i].status == "exit" and ref[i].surface == "z_max"
            and tru[i].status == "exit" and tru[i].surface == "z_max"]
    keep = keep[:fan.n_rays]
    if not keep:
        raise ConfigError("fan", "no ray of the fan returns to the surface inside the slab")
    idx = np.array(keep)
    tau = np.array([tru[i].tau for i in keep])
    Xr, XIr, _, _ = propagate(reference, wave, x0[idx], xi0[idx], tau, tol)
    Zt = np.array([np.concatenate([tru[i].x[-1], tru[i].xi[-1]]) for i in keep])
    data = Zt - np.hstack([Xr, XIr])
    turning = np.array([ref[i].x[:, 2].min() for i in keep])
    return FanRays(wave, x0[idx], xi0[idx], [ref[i] for i in keep], tau, data, turning)


# ---------------------------------------------------------------------------
# linearized transform


@dataclass
class NodeSet:
    """Quadrature nodes along reference rays with their transform weights.

    A parameter difference with values ``v`` and gradients ``dv`` at the
    nodes contributes ``a v + b dv`` (summed per ray) to the predicted data.
    """

    x: np.ndarray  # (N, 3)
    ray: np.ndarray  # (N,)
    a: np.ndarray  # (N, U, 6) per unknown
    b: np.ndarray  # (N, U, 6, 3)
    n_rays: int

    def predict(self, values: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """``values`` (N, U), ``grads`` (N, U, 3) -> (R, 6)."""
        c = np.einsum("nui,nu->ni", self.a, values) + np.einsum("nuij,nuj->ni", self.b, grads)
        out = np.zeros((self.n_rays, 6))
        np.add.at(out, self.ray, c)
        return out

    def matrix(self, basis: SplineGrid, chunk: int = 1500) -> np.ndarray:
        """Rows (R * 6) by columns (U * K) for the spline coefficients."""
        U = self.a.shape[1]
        K = basis.size
        out = np.zeros((self.n_rays, 6, U, K))
        for c in range(0, len(self.x), chunk):
            s = slice(c, c + chunk)
            phi, dphi = basis.evaluate(self.x[s])
            blk = (np.einsum("nui,nk->nuik", self.a[s], phi)
                   + np.einsum("nuij,nkj->nuik", self.b[s], dphi))
            np.add.at(out, self.ray[s], np.swapaxes(blk, 1, 2))
        return out.reshape(self.n_rays * 6, U * K)


def _merged_panels(t: np.ndarray, max_panels: int) -> np.ndarray:
    if len(t) - 1 > max_panels:
        stride = int(np.ceil((len(t) - 1) / max_panels))
        t = np.unique(np.concatenate([t[::stride], t[-1:]]))
    return t


def transform_nodes(reference: MaterialField, wave, rays: Sequence[Bicharacteristic], unknowns,
                    rule: Optional[FunctionalRule] = None, order: int = 4, max_panels: int = 24,
                    tol: Tolerance = Tolerance(1e-10, 1e-12)) -> NodeSet:
    wave = Wave.parse(wave)
    x0 = np.array([r.x[0] for r in rays])
    xi0 = np.array([r.xi[0] for r in rays])
    taus = np.array([r.tau for r in rays])
    _, _, Mtau, res = propagate(reference, wave, x0, xi0, taus, tol, variational=True, record=True)
    g, w = gauss_legendre(order)
    starts, dts, weights, ray_id, Mk = [], [], [], [], []
    for r, tr in enumerate(res.trajectories):
        edges = _merged_panels(tr.t, max_panels)
        a, b = edges[:-1], edges[1:]
        s = (a[:, None] + (b - a)[:, None] * g[None]).ravel()
        wt = ((b - a)[:, None] * w[None]).ravel()
        k = np.clip(np.searchsorted(tr.t, s, side="right") - 1, 0, len(tr.t) - 1)
        starts.append(tr.y[k, :6])
        Mk.append(tr.y[k, 6:].reshape(-1, 6, 6))
        dts.append(s - tr.t[k])
        weights.append(wt)
        ray_id.append(np.full(len(s), r))
    Z0 = np.vstack(starts)
    W = np.concatenate(weights)
    R = np.concatenate(ray_id)
    X, XI, Mloc, _ = propagate(reference, wave, Z0[:, :3], Z0[:, 3:], np.concatenate(dts), tol,
                               variational=True)
    Ms = Mloc @ np.vstack(Mk)
    Y = Mtau[R] @ np.linalg.inv(Ms)
    Yx, Yxi = Y[:, :, :3], Y[:, :, 3:]
    a_all, b_all = [], []
    for l in unknowns:
        E = (sensitivity_jet(reference, wave, "a11", X, XI, 1, functional=rule) if l == "functional"
             else sensitivity_jet(reference, wave, l, X, XI, 1))
        dEx, dExi = E.g[:, :3], E.g[:, 3:]
        a = W[:, None] * (np.einsum("nij,nj->ni", Yx, dExi) - np.einsum("nij,nj->ni", Yxi, dEx))
        b = -(W * E.v)[:, None, None] * Yxi
        a_all.append(a)
        b_all.append(b)
    return NodeSet(X, R, np.stack(a_all, axis=1), np.stack(b_all, axis=1), len(rays))


# ---------------------------------------------------------------------------
# system and solver


@dataclass
class LinearSystem:
    A: np.ndarray
    d: np.ndarray
    row_scale: np.ndarray
    col_scale: np.ndarray
    basis: SplineGrid
    unknowns: tuple
    noise: float = 0.0
    R: Optional[sparse.spmatrix] = None

    @property
    def shape(self):
        return self.A.shape

    @property
    def reg(self) -> sparse.spmatrix:
        return self.R if self.R is not None else sparse.identity(self.A.shape[1], format="csr")


def regularization_operator(shape, n_unknowns: int = 1, identity: float = 0.1) -> sparse.csr_matrix:
    """Coefficient differences along each axis plus a small identity part."""
    eye = [sparse.identity(n, format="csr") for n in shape]
    diff = [sparse.diags([-np.ones(n - 1), np.ones(n - 1)], [0, 1], shape=(n - 1, n)) for n in shape]
    blocks = []
    for d in range(3):
        f = [eye[0], eye[1], eye[2]]
        f[d] = diff[d]
        blocks.append(sparse.kron(sparse.kron(f[0], f[1]), f[2]))
    blocks.append(identity * sparse.identity(int(np.prod(shape))))
    one = sparse.vstack(blocks)
    return sparse.block_diag([one] * n_unknowns, format="csr")


def conjugation_weights(x3, artificial, top, digamma):
    """``exp(-digamma / xh)`` with ``xh = 1 + (x3 - artificial)/(top - artificial)``."""
    xh = 1.0 + (np.asarray(x3, float) - artificial) / (top - artificial)
    return np.exp(-digamma / xh)


def assemble_system(cfg: InversionConfig, fans: Sequence[FanRays], nodes: Sequence[NodeSet],
                    noise: float = 0.0) -> LinearSystem:
    top = cfg.reference.domain[1][2]
    w = cfg.grid_lateral
    basis = SplineGrid([-w, -w, cfg.artificial], [w, w, top], cfg.grid_shape)
    blocks, rhs, scales = [], [], []
    for fan, ns in zip(fans, nodes):
        M = ns.matrix(basis)
        # dimensionless components: positions by the slab depth, covectors by |xi0|
        comp = np.concatenate([np.full(3, 1.0 / (top - cfg.artificial)), np.zeros(3)])
        comp = np.tile(comp, (len(fan.tau), 1))
        comp[:, 3:] = 1.0 / np.linalg.norm(fan.xi0, axis=1)[:, None]
        row = comp * conjugation_weights(fan.turning, cfg.artificial, top, cfg.digamma)[:, None]
        row = row * _chi_weight(cfg)
        blocks.append(M)
        rhs.append(fan.data.ravel())
        scales.append(row.ravel())
    A = np.vstack(blocks)
    d = np.concatenate(rhs)
    rs = np.concatenate(scales)
    empty = ~np.any(A != 0, axis=1)
    if np.any(empty.reshape(-1, 6).all(axis=1)):
        warnings.warn(f"{int(empty.reshape(-1, 6).all(axis=1).sum())} ray(s) miss the grid",
                      EmptyRowWarning)
    cs = np.tile(1.0 / conjugation_weights(basis.heights(), cfg.artificial, top, cfg.digamma),
                 len(cfg.unknowns))
    As = rs[:, None] * A * cs[None, :]
    R = regularization_operator(basis.shape, len(cfg.unknowns), cfg.reg_identity)
    return LinearSystem(As, rs * d, rs, cs, basis, tuple(cfg.unknowns), noise * float(np.max(rs)), R)


def _chi_weight(cfg: InversionConfig) -> float:
    # every ray of the fan is tangent to a level of x3 at its turning point
    from .symbols import Cutoff

    return float(Cutoff(cfg.Lambda, cfg.digamma).chi(np.array([0.0]))[0])


@dataclass
class Recovery:
    coef: np.ndarray  # spline coefficients per unknown, (U, K)
    reg_weight: float
    residual: float
    history: list
    iterations: int
    system: LinearSystem

    def evaluate(self, x) -> np.ndarray:
        phi = self.system.basis.evaluate(x, derivative=False)
        return phi @ self.coef.T


def cgls(A: np.ndarray, d: np.ndarray, lam: float, R=None, x0=None, tol: float = 1e-8,
         max_iter: int = 20000):
    """CG on ``(A^T A + lam^2 R^T R) x = A^T d``; returns x, residual history, iterations."""
    R = sparse.identity(A.shape[1], format="csr") if R is None else R
    x = np.zeros(A.shape[1]) if x0 is None else x0.copy()
    r = d - A @ x
    s = A.T @ r - lam**2 * (R.T @ (R @ x))
    p = s.copy()
    gamma = s @ s
    g0 = np.linalg.norm(A.T @ d)
    hist = [float(np.linalg.norm(r))]
    for it in range(max_iter):
        if np.sqrt(gamma) <= tol * max(g0, 1e-300):
            return x, hist, it
        q = A @ p
        Rp = R @ p
        alpha = gamma / (q @ q + lam**2 * (Rp @ Rp))
        x += alpha * p
        r -= alpha * q
        s = A.T @ r - lam**2 * (R.T @ (R @ x))
        gnew = s @ s
        p = s + (gnew / gamma) * p
        gamma = gnew
        hist.append(float(np.linalg.norm(r)))
    raise NoConvergence(f"CGLS did not converge in {max_iter} iterations")


def attainable_misfit(system: LinearSystem, rel_lambda: float = 1e-4) -> float:
    """Residual of a nearly unregularized dense solve: the misfit floor of the basis."""
    A = system.A
    lam = rel_lambda * np.linalg.norm(A, 2)
    M = np.vstack([A, lam * system.reg.toarray()])
    rhs = np.concatenate([system.d, np.zeros(system.reg.shape[0])])
    x = np.linalg.lstsq(M, rhs, rcond=None)[0]
    return float(np.linalg.norm(A @ x - system.d))


def recover(system: LinearSystem, reg_weight: Optional[float] = None, tau: float = 1.5,
            max_iter: int = 20000) -> Recovery:
    """Tikhonov solve; ``reg_weight`` None selects it by the discrepancy principle.

    The noise level is the larger of the integrator floor carried by the
    system and the attainable misfit of the basis; the weight (relative to
    ``||A||``) is bisected in ``log`` so the residual meets ``tau`` times it.
    Trial weights use a Cholesky solve of the normal equations, and the
    chosen one is polished by CGLS.
    """
    A, d, R = system.A, system.d, system.reg
    U = len(system.unknowns)
    if not np.any(d):
        z = np.zeros(A.shape[1])
        return Recovery(z.reshape(U, -1), 0.0, 0.0, [0.0], 0, system)
    normA = np.linalg.norm(A, 2)
    AtA, Atd = A.T @ A, A.T @ d
    RtR = (R.T @ R).toarray()

    def solve(w):
        return cho_solve(cho_factor(AtA + (w * normA) ** 2 * RtR), Atd)

    def misfit(x):
        return np.linalg.norm(A @ x - d)

    if reg_weight is None:
        target = tau * max(system.noise, attainable_misfit(system))
        lo, hi = np.log(1e-5), np.log(1.0)
        if misfit(solve(1.0)) <= target:
            lo = hi
        else:
            while hi - lo > 0.02:
                mid = 0.5 * (lo + hi)
                if misfit(solve(np.exp(mid))) > target:
                    hi = mid
                else:
                    lo = mid
        reg_weight = float(np.exp(lo))
    x, hist, it = cgls(A, d, reg_weight * normA, R, x0=solve(reg_weight), tol=1e-9,
                       max_iter=max_iter)
    coef = (x * system.col_scale).reshape(U, -1)
    return Recovery(coef, float(reg_weight), float(misfit(x)), hist, it, system)


# ---------------------------------------------------------------------------
# end-to-end driver and diagnostics


@dataclass
class Experiment:
    config: InversionConfig
    fans: list
    recovery: Recovery
    metrics: dict

    def write(self, outdir):
        import os

        os.makedirs(outdir, exist_ok=True)
        with open(os.path.join(outdir, "diagnostics.json"), "w") as fh:
            json.dump(self.metrics, fh, indent=2, sort_keys=True)
        write_estimate_csv(os.path.join(outdir, "estimate.csv"), self)
        write_depth_profile_csv(os.path.join(outdir, "error_vs_depth.csv"), self)


def truth_difference(cfg: InversionConfig, x) -> np.ndarray:
    """Held-out ``nu - nu~`` for each unknown at points ``x`` -> (N, U)."""
    diff = ParamDiff(cfg.truth.build(), cfg.reference.build()).values(np.atleast_2d(x))
    names = ("a11",) if cfg.functional else cfg.unknowns
    return np.stack([diff[l] for l in names], axis=1)


def slab_points(cfg: InversionConfig, n: int = 33) -> np.ndarray:
    top = cfg.reference.domain[1][2]
    w = cfg.eval_window
    return eval_points([-w, -w, cfg.artificial], [w, w, top], (n, n, max(n // 3, 5)))


def error_metrics(cfg: InversionConfig, rec: Recovery) -> dict:
    pts = slab_points(cfg)
    est = rec.evaluate(pts)
    tru = truth_difference(cfg, pts)
    names = ("a11",) if cfg.functional else tuple(cfg.unknowns)
    out = {}
    for u, name in enumerate(names):
        err = np.linalg.norm(est[:, u] - tru[:, u])
        nrm = np.linalg.norm(tru[:, u])
        out[name] = {"rel_L2": float(err / nrm) if nrm > 0 else None,
                     "estimate_L2": float(np.linalg.norm(est[:, u]) / np.sqrt(len(pts))),
                     "truth_L2": float(nrm / np.sqrt(len(pts)))}
    return out


def axis_concentration(cfg: InversionConfig, rec: Recovery, cone_deg: float = 20.0, n: int = 32) -> dict:
    """Share of the error's spectral energy within a cone about the axis projection."""
    top = cfg.reference.domain[1][2]
    w = cfg.eval_window
    ax = np.linspace(-w, w, n)
    az = np.linspace(cfg.artificial, top, n)
    G = np.meshgrid(ax, ax, az, indexing="ij")
    pts = np.stack([g.ravel() for g in G], axis=1)
    err = rec.evaluate(pts) - truth_difference(cfg, pts)
    k = [np.fft.fftfreq(n, d=(2 * w) / (n - 1)), np.fft.fftfreq(n, d=(2 * w) / (n - 1)),
         np.fft.fftfreq(n, d=(top - cfg.artificial) / (n - 1))]
    K = np.stack(np.meshgrid(*k, indexing="ij"), axis=-1).reshape(-1, 3)
    layer = np.asarray(cfg.reference.layer, float)
    axis = layer / np.linalg.norm(layer)
    kn = np.linalg.norm(K, axis=1)
    nz = kn > 0
    cosang = np.zeros(len(K))
    cosang[nz] = np.abs(K[nz] @ axis) / kn[nz]
    cone = cosang >= np.cos(np.deg2rad(cone_deg))
    solid = float(np.mean(cone[nz]))
    out = {}
    names = ("a11",) if cfg.functional else tuple(cfg.unknowns)
    for u, name in enumerate(names):
        F = np.abs(np.fft.fftn(err[:, u].reshape(n, n, n))).ravel() ** 2
        share = float(F[nz & cone].sum() / max(F[nz].sum(), 1e-300))
        out[name] = {"axis_cone_share": share, "cone_volume_share": solid}
    return out


PROBE_RAYS = 24


def run_experiment(cfg: InversionConfig, noise_probe: bool = True) -> Experiment:
    cfg.validate()
    ref = cfg.reference.build()
    tru = cfg.truth.build()
    rule = functional_rule(cfg.reference) if cfg.functional else None
    tol = Tolerance(cfg.rtol, cfg.rtol * 1e-2)
    fans, nodes = [], []
    noise = 0.0
    for wv in cfg.waves:
        fan = synthesize_data(ref, tru, cfg.reference, wv, cfg.fan, cfg.artificial, tol)
        if noise_probe:
            # integrator floor from a small fan traced at two tolerances
            small = replace(cfg.fan, n_rays=min(cfg.fan.n_rays, PROBE_RAYS))
            tight = synthesize_data(ref, tru, cfg.reference, wv, small, cfg.artificial, tol)
            loose = synthesize_data(ref, tru, cfg.reference, wv, small, cfg.artificial,
                                    Tolerance(cfg.rtol * 100, cfg.rtol))
            n = min(len(loose.tau), len(tight.tau))
            noise = max(noise, float(np.sqrt(np.mean((loose.data[:n] - tight.data[:n]) ** 2))))
        fans.append(fan)
        nodes.append(transform_nodes(ref, wv, fan.reference, cfg.unknowns, rule, cfg.order,
                                     cfg.max_panels, tol))
    rows = sum(6 * len(f.tau) for f in fans)
    noise_total = np.sqrt(rows) * noise + cfg.model_error * np.linalg.norm(
        np.concatenate([f.data.ravel() for f in fans]))
    system = assemble_system(cfg, fans, nodes, noise_total)
    rec = recover(system, cfg.reg_weight, cfg.tau)
    metrics = {"errors": error_metrics(cfg, rec), "n_rays": {f.wave.value: len(f.tau) for f in fans},
               "rows": int(system.shape[0]), "columns": int(system.shape[1]),
               "reg_weight": rec.reg_weight, "residual": rec.residual, "iterations": rec.iterations,
               "noise_floor": float(noise), "data_norm": float(np.linalg.norm(system.d))}
    if len(metrics["errors"]) > 1:
        metrics["axis_concentration"] = axis_concentration(cfg, rec)
    return Experiment(cfg, fans, rec, metrics)


def write_estimate_csv(path, exp: Experiment):
    import csv

    pts = slab_points(exp.config, 17)
    est = exp.recovery.evaluate(pts)
    tru = truth_difference(exp.config, pts)
    names = ("a11",) if exp.config.functional else tuple(exp.config.unknowns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2", "x3"] + [f"{n}_{k}" for n in names for k in ("estimate", "truth")])
        for p, e, t in zip(pts, est, tru):
            w.writerow([f"{v:.6g}" for v in p] + [f"{v:.10g}" for pair in zip(e, t) for v in pair])


def write_depth_profile_csv(path, exp: Experiment):
    import csv

    pts = slab_points(exp.config)
    est = exp.recovery.evaluate(pts)
    tru = truth_difference(exp.config, pts)
    depths = np.unique(pts[:, 2])
    names = ("a11",) if exp.config.functional else tuple(exp.config.unknowns)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x3"] + [f"{n}_rel_error" for n in names])
        for z in depths:
            sel = pts[:, 2] == z
            row = [f"{z:.6g}"]
            for u in range(len(names)):
                nrm = np.linalg.norm(tru[sel, u])
                row.append(f"{np.linalg.norm(est[sel, u] - tru[sel, u]) / nrm:.6g}" if nrm > 0 else "nan")
            w.writerow(row)


def default_config(kind: str = "a11", **kw) -> InversionConfig:
    """Stock experiments: 'a11' (qP data), 'functional' and 'joint' (qP + qSV)."""
    from .scenarios import Bump, functional_reference, gradient_reference

    bump = dict(center=[0.0, 0.0, 0.12], width=0.25)
    if kind == "a11":
        ref = gradient_reference()
        tru = ref.with_bumps([Bump("a11", 0.1, **bump)])
        cfg = InversionConfig(ref, tru, ("qP",), ("a11",))
    elif kind == "functional":
        ref = functional_reference()
        tru = ref.with_bumps([Bump("a11", 0.1, **bump)])
        cfg = InversionConfig(ref, tru, ("qP", "qSV"), ("functional",))
    elif kind == "joint":
        ref = gradient_reference()
        tru = ref.with_bumps([Bump("e2", -0.5, **bump), Bump("a11", 0.1, **bump)])
        cfg = InversionConfig(ref, tru, ("qP", "qSV"), ("e2", "a11"))
    else:
        raise ConfigError("kind", f"unknown experiment {kind!r}")
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg.validate()
