"""Batched adaptive Dormand–Prince 5(4) integration of autonomous ODEs.

Each item in the batch carries its own step size and error control (max-norm
over its components), so a single vectorized right-hand side call advances
hundreds of rays at once without one stiff ray dictating the others' steps.

Two modes: :func:`integrate_fixed` runs every item for its own duration;
:func:`integrate_until` stops each item when it crosses one of a list of
surfaces ``s(x) = 0`` from the negative side, localizing the crossing with a
bracketing secant (Illinois) iteration on the last step length.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Dormand–Prince tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

RHS = Callable[[np.ndarray], np.ndarray]


@dataclass
class Tolerance:
    rtol: float = 1e-11
    atol: float = 1e-13
    max_steps: int = 20000
    h0: float = 1e-3

    def tighter(self, factor: float = 0.5) -> "Tolerance":
        return Tolerance(self.rtol * factor, self.atol * factor, self.max_steps * 2, self.h0)


def _step(rhs: RHS, y: np.ndarray, k1: np.ndarray, h: np.ndarray):
    """One DP step for every row; returns y_new, k7 (FSAL) and error estimate."""
    ks = [k1]
    hh = h[:, None]
    for i in range(1, 7):
        acc = y.copy()
        for j, a in enumerate(_A[i]):
            if a != 0.0:
                acc += hh * a * ks[j]
        ks.append(rhs(acc))
    y_new = acc  # stage 7 input equals the 5th order solution
    err = hh * sum(_E[i] * ks[i] for i in range(7) if _E[i] != 0.0)
    return y_new, ks[6], err


def _error_norm(err, y, y_new, tol: Tolerance):
    scale = tol.atol + tol.rtol * np.maximum(np.abs(y), np.abs(y_new))
    with np.errstate(invalid="ignore"):
        e = np.max(np.abs(err) / scale, axis=1)
    return np.where(np.isfinite(e), e, np.inf)


def _new_h(h, e):
    with np.errstate(divide="ignore"):
        fac = np.where(e > 0, 0.9 * e ** (-0.2), 5.0)
    return h * np.clip(fac, 0.2, 5.0)


@dataclass
class Trajectory:
    """Accepted-step samples of one item (times ascending)."""

    t: np.ndarray
    y: np.ndarray
    status: str = "ok"
    surface: int = -1

    @property
    def end(self) -> np.ndarray:
        return self.y[-1]

    @property
    def duration(self) -> float:
        return float(self.t[-1])


@dataclass
class BatchResult:
    y: np.ndarray
    t: np.ndarray
    status: np.ndarray
    surface: np.ndarray
    trajectories: list = field(default_factory=list)


class _Recorder:
    def __init__(self, B, record):
        self.record = record
        self.ts = [[] for _ in range(B)] if record else None
        self.ys = [[] for _ in range(B)] if record else None

    def add(self, idx, t, y):
        if not self.record:
            return
        for k, i in enumerate(idx):
            self.ts[i].append(t[k])
            self.ys[i].append(y[k].copy())

    def build(self, status, surface):
        if not self.record:
            return []
        return [Trajectory(np.array(self.ts[i]), np.array(self.ys[i]), status[i], int(surface[i]))
                for i in range(len(self.ts))]


def integrate_fixed(rhs: RHS, y0: np.ndarray, durations, tol: Tolerance = Tolerance(),
                    record: bool = False) -> BatchResult:
    """Integrate every row ``y0[b]`` for time ``durations[b]`` (may be zero)."""
    y = np.array(y0, dtype=float, copy=True)
    B = y.shape[0]
    T = np.broadcast_to(np.asarray(durations, dtype=float), (B,)).copy()
    t = np.zeros(B)
    h = np.minimum(np.full(B, tol.h0), np.maximum(T, 1e-300))
    status = np.array(["ok"] * B, dtype=object)
    rec = _Recorder(B, record)
    rec.add(np.arange(B), t, y)
    active = T > 0
    k1 = np.zeros_like(y)
    if active.any():
        k1[active] = rhs(y[active])
    steps = 0
    while active.any():
        steps += 1
        idx = np.flatnonzero(active)
        if steps > tol.max_steps * 4:
            status[idx] = "max_steps"
            break
        hi = np.minimum(h[idx], T[idx] - t[idx])
        y_new, k7, err = _step(rhs, y[idx], k1[idx], hi)
        e = _error_norm(err, y[idx], y_new, tol)
        acc = e <= 1.0
        bad = ~np.isfinite(y_new).all(axis=1) & (hi < 1e-14 * np.maximum(T[idx], 1.0))
        if bad.any():
            status[idx[bad]] = "nonfinite"
            active[idx[bad]] = False
        ai = idx[acc]
        y[ai] = y_new[acc]
        k1[ai] = k7[acc]
        t[ai] = t[ai] + hi[acc]
        rec.add(ai, t[ai], y[ai])
        h[idx] = _new_h(hi, e)
        done = ai[t[ai] >= T[ai] * (1 - 1e-15)]
        t[done] = T[done]
        active[done] = False
    return BatchResult(y, t, status, np.full(B, -1), rec.build(status, np.full(B, -1)))


def integrate_until(rhs: RHS, y0: np.ndarray, surfaces: Sequence[Callable[[np.ndarray], np.ndarray]],
                    t_max: float, tol: Tolerance = Tolerance(), record: bool = True,
                    event_tol: float = 1e-12, state_dim: int = 3) -> BatchResult:
    """Integrate until the position ``y[:, :state_dim]`` crosses a surface.

    A crossing is a step over which some surface function goes from negative
    to non-negative. The step is then shortened until the surface value at its
    end point is within ``event_tol`` of zero (or the bracket collapses).
    """
    y = np.array(y0, dtype=float, copy=True)
    B = y.shape[0]
    t = np.zeros(B)
    h = np.full(B, tol.h0)
    status = np.array(["running"] * B, dtype=object)
    surface = np.full(B, -1)
    rec = _Recorder(B, record)
    rec.add(np.arange(B), t, y)
    k1 = rhs(y)
    active = np.isfinite(k1).all(axis=1)
    status[~active] = "nonfinite"

    def svals(yy):
        return np.stack([s(yy[:, :state_dim]) for s in surfaces], axis=1)

    steps = 0
    while active.any():
        steps += 1
        idx = np.flatnonzero(active)
        if steps > tol.max_steps:
            status[idx] = "max_steps"
            break
        hi = np.minimum(h[idx], t_max - t[idx])
        y_new, k7, err = _step(rhs, y[idx], k1[idx], hi)
        e = _error_norm(err, y[idx], y_new, tol)
        acc = e <= 1.0
        tiny = hi < 1e-14 * max(t_max, 1.0)
        dead = ~acc & tiny
        if dead.any():
            status[idx[dead]] = "nonfinite"
            active[idx[dead]] = False
        h[idx] = _new_h(hi, e)
        if not acc.any():
            continue
        ai = idx[acc]
        ya, k7a, ha = y_new[acc], k7[acc], hi[acc]
        s_old = svals(y[ai])
        s_new = svals(ya)
        cross = (s_old < 0) & (s_new >= 0)
        crossing = cross.any(axis=1)
        # items that crossed: localize on the step length
        if crossing.any():
            ci = np.flatnonzero(crossing)
            items = ai[ci]
            # localize the first root of the max over surfaces that started
            # inside; with several crossings in one step this is the earliest
            live = s_old[ci] < 0

            def lead(sv):
                return np.where(live, sv, -np.inf).max(axis=1)

            # bracketing Illinois iteration on the step length
            lo, f_lo = np.zeros(len(ci)), lead(s_old[ci])
            hi_b, f_hi = ha[ci].copy(), lead(s_new[ci])
            ybest, kbest = ya[ci].copy(), k7a[ci].copy()
            side = np.zeros(len(ci), int)
            for _ in range(100):
                done = np.abs(lead(svals(ybest))) <= event_tol
                done |= hi_b - lo <= 1e-15 * np.maximum(hi_b, 1e-300)
                if done.all():
                    break
                with np.errstate(invalid="ignore", divide="ignore"):
                    mid = hi_b - f_hi * (hi_b - lo) / (f_hi - f_lo)
                fallback = ~np.isfinite(mid) | (mid <= lo) | (mid >= hi_b)
                mid[fallback] = 0.5 * (lo + hi_b)[fallback]
                ym, km, _ = _step(rhs, y[items], k1[items], mid)
                fm = lead(svals(ym))
                went = (fm >= 0) & ~done
                stay = (fm < 0) & ~done
                hi_b[went], f_hi[went] = mid[went], fm[went]
                ybest[went], kbest[went] = ym[went], km[went]
                lo[stay], f_lo[stay] = mid[stay], fm[stay]
                f_lo[went & (side == 1)] *= 0.5
                f_hi[stay & (side == -1)] *= 0.5
                side[went] = 1
                side[stay] = -1
            surf = np.argmax(np.where(live, svals(ybest), -np.inf), axis=1)
            ya[ci], k7a[ci] = ybest, kbest
            ha[ci] = hi_b
            surface[items] = surf
            status[items] = "exit"
        y[ai] = ya
        k1[ai] = k7a
        t[ai] = t[ai] + ha
        rec.add(ai, t[ai], ya)
        fin = crossing | (t[ai] >= t_max * (1 - 1e-15))
        timeout = ~crossing & (t[ai] >= t_max * (1 - 1e-15))
        status[ai[timeout]] = "max_time"
        active[ai[fin]] = False
    return BatchResult(y, t, status, surface, rec.build(status, surface))
