"""Hamiltonian ray tracing, lens relations and Hamilton-map probes."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import (DiscriminantHit, MaxTimeExceeded, NoConvergence, SingularHessian, TIError)
from .fields import Field
from .integrate import Tolerance, integrate_fixed, integrate_until
from .material import (MaterialField, Wave, hamiltonian, lemma_hessian_diagonal, phase_jet,
                       tilt_frame)

DRIFT_LIMIT = 1e-8


# ---------------------------------------------------------------------------
# right-hand sides


def hamilton_rhs(m: MaterialField, wave) -> Callable[[np.ndarray], np.ndarray]:
    wave = Wave.parse(wave)

    def rhs(y):
        J = phase_jet(m, wave, y[:, :3], y[:, 3:6], order=1, strict=None)
        return np.hstack([J.g[:, 3:], -J.g[:, :3]])

    return rhs


def flow_matrix(J) -> np.ndarray:
    """Linearization of the Hamilton vector field from a second-order jet."""
    H = J.h
    top = np.concatenate([H[:, 3:, :3], H[:, 3:, 3:]], axis=2)
    bot = np.concatenate([-H[:, :3, :3], -H[:, :3, 3:]], axis=2)
    return np.concatenate([top, bot], axis=1)


def variational_rhs(m: MaterialField, wave) -> Callable[[np.ndarray], np.ndarray]:
    """State (x, xi, vec(Y)) with Y the 6x6 flow derivative."""
    wave = Wave.parse(wave)

    def rhs(y):
        J = phase_jet(m, wave, y[:, :3], y[:, 3:6], order=2, strict=None)
        Y = y[:, 6:].reshape(-1, 6, 6)
        dY = flow_matrix(J) @ Y
        return np.hstack([J.g[:, 3:], -J.g[:, :3], dY.reshape(-1, 36)])

    return rhs


# ---------------------------------------------------------------------------
# surfaces and data types


@dataclass
class Surface:
    """Stop surface ``fn(x) = 0``; the ray is inside where ``fn < 0``."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @classmethod
    def plane(cls, name: str, normal, offset: float) -> "Surface":
        """Half-space ``normal . x <= offset`` is inside."""
        n = np.asarray(normal, dtype=float)
        return cls(name, lambda x: x @ n - offset, lambda x: np.tile(n, (len(x), 1)))

    def __call__(self, x):
        return self.fn(np.atleast_2d(x))


def box_surfaces(lo, hi) -> list[Surface]:
    out = []
    for d, axis in enumerate("xyz"):
        e = np.zeros(3)
        e[d] = 1.0
        out.append(Surface.plane(f"{axis}_min", -e, -lo[d]))
        out.append(Surface.plane(f"{axis}_max", e, hi[d]))
    return out


@dataclass
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray


@dataclass
class Bicharacteristic:
    t: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    wave: Wave
    p0: float
    status: str = "exit"
    surface: str = ""
    drift: float = 0.0

    @property
    def tau(self) -> float:
        return float(self.t[-1])

    @property
    def exit(self) -> PhasePoint:
        return PhasePoint(self.x[-1], self.xi[-1])

    @property
    def entry(self) -> PhasePoint:
        return PhasePoint(self.x[0], self.xi[0])


@dataclass
class LensRecord:
    ray_id: int
    wave: Wave
    entry_x: np.ndarray
    entry_xi: np.ndarray
    exit_x: np.ndarray
    exit_xi: np.ndarray
    tau: float
    surface: str
    status: str = "exit"


@dataclass
class ShootingSpec:
    """Fan of entry phase points and the surfaces that end each ray."""

    x: np.ndarray
    xi: np.ndarray
    surfaces: list
    t_max: float = 10.0
    normalize: bool = True


def normalize_covectors(m: MaterialField, wave, x, xi) -> np.ndarray:
    """Scale covectors so that p(x, xi) = 1."""
    p = hamiltonian(m, wave, x, xi)
    if np.any(p <= 0):
        raise TIError("non-positive Hamiltonian at ray start")
    return np.atleast_2d(xi) / np.sqrt(p)[:, None]


# ---------------------------------------------------------------------------
# flow integration


def _trace_batch(m, wave, x, xi, surfaces, t_max, tol):
    y0 = np.hstack([x, xi])
    fns = [s.fn for s in surfaces]
    return integrate_until(hamilton_rhs(m, wave), y0, fns, t_max, tol=tol)


def trace_rays(m: MaterialField, wave, x, xi, surfaces: Sequence[Surface], t_max: float = 10.0,
               tol: Tolerance = Tolerance(), retries: int = 3) -> list[Bicharacteristic]:
    """Trace a batch of rays; rays whose Hamiltonian drifts are re-run tighter."""
    wave = Wave.parse(wave)
    x = np.atleast_2d(np.asarray(x, float))
    xi = np.atleast_2d(np.asarray(xi, float))
    p0 = hamiltonian(m, wave, x, xi)
    out: list[Optional[Bicharacteristic]] = [None] * len(x)
    todo = np.arange(len(x))
    for attempt in range(retries + 1):
        res = _trace_batch(m, wave, x[todo], xi[todo], surfaces, t_max, tol)
        again = []
        for k, i in enumerate(todo):
            tr = res.trajectories[k]
            X, XI = tr.y[:, :3], tr.y[:, 3:6]
            status = str(res.status[k])
            drift = np.inf
            if status in ("exit", "max_time") and np.isfinite(tr.y).all():
                pv = hamiltonian(m, wave, X, XI) if status == "exit" else np.array([p0[i]])
                drift = float(np.max(np.abs(pv - p0[i])) / p0[i])
            if status in ("exit", "max_time") and drift > DRIFT_LIMIT and attempt < retries:
                again.append(i)
                continue
            surf = surfaces[tr.surface].name if tr.surface >= 0 else ""
            out[i] = Bicharacteristic(tr.t, X, XI, wave, float(p0[i]), status, surf, drift)
        if not again:
            break
        todo = np.array(again)
        tol = tol.tighter(0.1)
    return out


def integrate_flow(m: MaterialField, wave, start: PhasePoint, stop_surfaces: Sequence[Surface],
                   t_max: float = 10.0, tol: Tolerance = Tolerance()) -> Bicharacteristic:
    ray = trace_rays(m, wave, start.x, start.xi, stop_surfaces, t_max, tol)[0]
    if ray.status == "max_time":
        raise MaxTimeExceeded(f"ray did not reach a stop surface by t = {t_max}")
    if ray.status != "exit":
        raise DiscriminantHit(f"ray integration failed ({ray.status})")
    return ray


def lens_relation(m: MaterialField, wave, spec: ShootingSpec,
                  tol: Tolerance = Tolerance()) -> tuple[list[LensRecord], list[LensRecord]]:
    """Exit data for every ray of the fan; (records, failures) in fan order."""
    xi = spec.xi
    if spec.normalize:
        xi = normalize_covectors(m, wave, spec.x, spec.xi)
    rays = trace_rays(m, wave, spec.x, xi, spec.surfaces, spec.t_max, tol)
    ok, bad = [], []
    for i, r in enumerate(rays):
        rec = LensRecord(i, Wave.parse(wave), r.x[0], r.xi[0], r.x[-1], r.xi[-1], r.tau, r.surface,
                         r.status)
        (ok if r.status == "exit" else bad).append(rec)
    return ok, bad


def propagate(m: MaterialField, wave, x, xi, durations, tol: Tolerance = Tolerance(),
              variational: bool = False, record: bool = False):
    """Flow each phase point for its own duration (no stop surfaces).

    With ``variational`` the 6x6 flow derivative is returned as well.
    """
    x = np.atleast_2d(np.asarray(x, float))
    xi = np.atleast_2d(np.asarray(xi, float))
    B = len(x)
    if variational:
        y0 = np.hstack([x, xi, np.tile(np.eye(6).ravel(), (B, 1))])
        res = integrate_fixed(variational_rhs(m, wave), y0, durations, tol, record=record)
        return res.y[:, :3], res.y[:, 3:6], res.y[:, 6:].reshape(B, 6, 6), res
    res = integrate_fixed(hamilton_rhs(m, wave), np.hstack([x, xi]), durations, tol, record=record)
    return res.y[:, :3], res.y[:, 3:6], None, res


def write_lens_csv(path, records: Sequence[LensRecord]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ray_id", "wave", "entry_x1", "entry_x2", "entry_x3", "entry_xi1", "entry_xi2",
                    "entry_xi3", "exit_x1", "exit_x2", "exit_x3", "exit_xi1", "exit_xi2", "exit_xi3",
                    "tau", "surface", "status"])
        for r in records:
            w.writerow([r.ray_id, r.wave.value, *[f"{v:.15g}" for v in r.entry_x],
                        *[f"{v:.15g}" for v in r.entry_xi], *[f"{v:.15g}" for v in r.exit_x],
                        *[f"{v:.15g}" for v in r.exit_xi], f"{r.tau:.15g}", r.surface, r.status])


# ---------------------------------------------------------------------------
# Hamilton map


def hamilton_map(m: MaterialField, wave, x, xi) -> np.ndarray:
    J = phase_jet(m, wave, x, xi, order=1, strict=Wave.parse(wave) is not Wave.QSH)
    return J.g[:, 3:]


def _map_and_jacobian(m, wave, x, xi):
    J = phase_jet(m, wave, x, xi, order=2, strict=None)
    return J.g[:, 3:], J.h[:, 3:, 3:]


def lemma_seed(m: MaterialField, wave, x, v) -> np.ndarray:
    """Covector solving the map exactly for its ``xi_3 = 0`` quadratic part."""
    x = np.atleast_2d(x)
    v = np.atleast_2d(v)
    R = tilt_frame(m.axis(x))
    k1, k3 = lemma_hessian_diagonal(m.local_params(x), wave)
    vt = np.einsum("bij,bj->bi", R, v)
    xt = vt / (2 * np.stack([k1, k1, np.abs(k3) + 1e-300], axis=1))
    return np.einsum("bji,bj->bi", R, xt)


def stencil_directions() -> np.ndarray:
    d = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)
                  if (i, j, k) != (0, 0, 0)], dtype=float)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def newton_hamilton(m: MaterialField, wave, x, v, seeds, iters: int = 60, rtol: float = 1e-12):
    """Batched damped Newton for H_x(xi) = v; returns (xi, converged)."""
    x = np.atleast_2d(np.asarray(x, float))
    v = np.atleast_2d(np.asarray(v, float))
    scale = np.linalg.norm(v, axis=1)
    vh = v / scale[:, None]
    xi = np.array(seeds, dtype=float, copy=True)
    # normalize seeds to p = 1
    with np.errstate(invalid="ignore", divide="ignore"):
        p = phase_jet(m, wave, x, xi, order=1, strict=None).v
        xi = xi / np.sqrt(np.abs(p))[:, None]
    conv = np.zeros(len(x), bool)
    for _ in range(iters):
        Hm, Jm = _map_and_jacobian(m, wave, x, xi)
        r = vh - Hm
        rn = np.linalg.norm(r, axis=1)
        conv = np.isfinite(rn) & (rn <= rtol)
        if conv.all():
            break
        with np.errstate(all="ignore"):
            try:
                step = np.linalg.solve(Jm, r[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError:
                step = np.stack([np.linalg.lstsq(J, rr, rcond=None)[0] for J, rr in zip(Jm, r)])
        lam = np.ones(len(x))
        todo = ~conv
        for _ in range(30):
            trial = xi + lam[:, None] * step
            Ht, _ = _map_and_jacobian(m, wave, x, trial)
            with np.errstate(invalid="ignore"):
                rt = np.linalg.norm(vh - Ht, axis=1)
            good = np.isfinite(rt) & (rt < (1 - 1e-4 * lam) * rn)
            upd = todo & good
            xi[upd] = trial[upd]
            todo &= ~good
            if not todo.any():
                break
            lam[todo] *= 0.5
    Hm, _ = _map_and_jacobian(m, wave, x, xi)
    rn = np.linalg.norm(vh - Hm, axis=1)
    conv = np.isfinite(rn) & (rn <= max(rtol, 1e-11))
    return xi * scale[:, None], conv


def invert_hamilton_map(m: MaterialField, wave, x, v, seed_xi=None, det_tol: float = 1e-10) -> np.ndarray:
    """Covector xi with dp/dxi(x, xi) = v (batched over rows of ``v``)."""
    wave = Wave.parse(wave)
    x = np.atleast_2d(np.asarray(x, float))
    v = np.atleast_2d(np.asarray(v, float))
    x = np.broadcast_to(x, v.shape).copy()
    if wave is Wave.QSH:
        _, Jm = _map_and_jacobian(m, wave, x, v)  # constant in xi
        return np.linalg.solve(Jm, v[:, :, None])[:, :, 0]
    seeds = [lemma_seed(m, wave, x, v)] if seed_xi is None else [np.broadcast_to(seed_xi, v.shape)]
    xi = np.full(v.shape, np.nan)
    done = np.zeros(len(v), bool)
    stencil = stencil_directions()
    for k in range(-1, len(stencil)):
        idx = np.flatnonzero(~done)
        if len(idx) == 0:
            break
        s = seeds[0][idx] if k < 0 else np.tile(stencil[k], (len(idx), 1))
        sol, ok = newton_hamilton(m, wave, x[idx], v[idx], s)
        # branch must map forward (positive pairing <xi, v> = 2p > 0)
        ok &= np.sum(sol * v[idx], axis=1) > 0
        xi[idx[ok]] = sol[ok]
        done[idx[ok]] = True
        if seed_xi is not None and k < 0:
            pass
    if not done.all():
        raise NoConvergence(f"Hamilton map inversion failed for {np.sum(~done)} vector(s)")
    H = 0.5 * _map_and_jacobian(m, wave, x, xi)[1]
    det = np.linalg.det(H)
    scale = np.abs(np.linalg.eigvalsh(H)).max(axis=1) ** 3
    if np.any(np.abs(det) <= det_tol * scale):
        raise SingularHessian("xi-Hessian singular at the inverted covector")
    return xi


# ---------------------------------------------------------------------------
# probes


def ray_acceleration(m: MaterialField, wave, x, xi) -> tuple[np.ndarray, np.ndarray]:
    """Velocity and acceleration of the ray through (x, xi)."""
    J = phase_jet(m, wave, x, xi, order=2, strict=Wave.parse(wave) is not Wave.QSH)
    px, pxi = J.g[:, :3], J.g[:, 3:]
    p_xix = J.h[:, 3:, :3]
    p_xixi = J.h[:, 3:, 3:]
    acc = np.einsum("bij,bj->bi", p_xix, pxi) - np.einsum("bij,bj->bi", p_xixi, px)
    return pxi, acc


def level_second_derivative(m: MaterialField, wave, fol: Field, x, xi) -> np.ndarray:
    """d^2/dt^2 of ``fol`` along the ray through (x, xi) at t = 0."""
    vel, acc = ray_acceleration(m, wave, x, xi)
    _, g, h = fol.derivs(np.atleast_2d(x))
    return np.sum(g * acc, axis=1) + np.einsum("bi,bij,bj->b", vel, h, vel)


@dataclass
class ConvexityReport:
    points: np.ndarray
    directions: np.ndarray
    second_derivative: np.ndarray
    passed: bool
    margin: float
    orientation: float

    def to_dict(self):
        return {"passed": bool(self.passed), "margin": float(self.margin),
                "orientation": self.orientation, "n_tangencies": int(len(self.points)),
                "second_derivative": [float(v) for v in self.second_derivative]}


def tangent_fan(fol: Field, x, n_dirs: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors tangent to the level set of ``fol`` at each point."""
    x = np.atleast_2d(x)
    g = fol.gradient(x)
    R = tilt_frame(g)
    ang = 2 * np.pi * np.arange(n_dirs) / n_dirs
    pts, dirs = [], []
    for b in range(len(x)):
        for a in ang:
            pts.append(x[b])
            dirs.append(np.cos(a) * R[b, 0] + np.sin(a) * R[b, 1])
    return np.array(pts), np.array(dirs)


def convexity_scan(m: MaterialField, wave, fol: Field, points, n_dirs: int = 16,
                   orientation: float = 1.0, rel_tol: float = 1e-9) -> ConvexityReport:
    """Second derivative of ``fol`` along rays tangent to its level sets.

    Each sample ray is launched at a point with velocity tangent to the level
    set. PASS iff ``orientation * d2`` is strictly positive at every tangency.
    """
    pts, dirs = tangent_fan(fol, points, n_dirs)
    xi = invert_hamilton_map(m, wave, pts, dirs)
    d2 = orientation * level_second_derivative(m, wave, fol, pts, xi)
    speed2 = np.sum(dirs * dirs, axis=1)
    thresh = rel_tol * np.max(speed2)
    margin = float(d2.min()) if len(d2) else np.inf
    return ConvexityReport(pts, dirs, d2, bool(margin > thresh), margin, orientation)


@dataclass
class NondegeneracyReport:
    directions: np.ndarray
    branches: list
    passed: bool
    flagged: list

    def to_dict(self):
        return {"passed": bool(self.passed), "n_directions": int(len(self.directions)),
                "flagged": self.flagged,
                "branches": [[{"xi": [float(c) for c in b["xi"]], "det": float(b["det"]),
                               "min_eig": float(b["min_eig"])} for b in bl] for bl in self.branches]}


def _distinct(sols, tol=1e-7):
    out = []
    for s in sols:
        if not any(np.linalg.norm(s - o) <= tol * np.linalg.norm(o) for o in out):
            out.append(s)
    return out


def nondegeneracy_probe(m: MaterialField, wave, x, fol: Field, n_dirs: int = 16,
                        det_tol: float = 1e-10) -> NondegeneracyReport:
    """Find all branches of H_x^{-1} for level-tangent unit vectors.

    PASS iff every direction has a branch with invertible xi-Hessian. Branches
    whose Hessian is singular or not positive definite are listed in
    ``flagged``.
    """
    wave = Wave.parse(wave)
    x = np.atleast_2d(np.asarray(x, float))[:1]
    _, dirs = tangent_fan(fol, x, n_dirs)
    xs = np.tile(x, (len(dirs), 1))
    seeds = [lemma_seed(m, wave, xs, dirs)] + [np.tile(s, (len(dirs), 1)) for s in stencil_directions()]
    found = [[] for _ in dirs]
    for s in seeds:
        sol, ok = newton_hamilton(m, wave, xs, dirs, s)
        ok &= np.sum(sol * dirs, axis=1) > 0
        for i in np.flatnonzero(ok):
            found[i].append(sol[i])
    branches, flagged, passed = [], [], True
    for i, sols in enumerate(found):
        sols = _distinct(sols)
        info = []
        for s in sols:
            H = 0.5 * _map_and_jacobian(m, wave, x, s[None])[1][0]
            ev = np.linalg.eigvalsh(H)
            det = float(np.prod(ev))
            info.append({"xi": s, "det": det, "min_eig": float(ev.min())})
            scale = np.abs(ev).max() ** 3
            if abs(det) <= det_tol * scale or ev.min() <= 0:
                flagged.append({"direction": [float(c) for c in dirs[i]], "det": det,
                                "min_eig": float(ev.min())})
        if not any(abs(b["det"]) > det_tol * np.abs(np.linalg.eigvalsh(
                0.5 * _map_and_jacobian(m, wave, x, b["xi"][None])[1][0])).max() ** 3 for b in info):
            passed = False
        branches.append(info)
    return NondegeneracyReport(dirs, branches, passed, flagged)


def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5**0.5) * k
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def triplication_detect(m: MaterialField, wave, x, n: int = 4000, neighbors: int = 6) -> np.ndarray:
    """Covector directions where det of the xi-Hessian changes sign."""
    dirs = fibonacci_sphere(n)
    xs = np.tile(np.atleast_2d(x)[:1], (n, 1))
    with np.errstate(all="ignore"):
        H = _map_and_jacobian(m, wave, xs, dirs)[1]
    det = np.linalg.det(H)
    tree = cKDTree(dirs)
    _, nb = tree.query(dirs, k=neighbors + 1)
    sgn = np.sign(det)
    change = np.any(sgn[nb[:, 1:]] != sgn[:, None], axis=1) | (sgn == 0)
    return dirs[change]
