"""Rank-one perturbed metrics of qSH waves and adapted layer coordinates.

The qSH Hamiltonian is the dual of ``g = alpha g0 + (beta - alpha) w (x) w``
with ``alpha = 1/a66`` and ``beta = 1/a55``. From ``g`` alone one recovers
``alpha``, ``beta`` and the line spanned by ``w`` (off conformal points).

Adapted coordinates: ``y1, y2`` are fixed on a seed patch and transported
along the integral curves of ``grad f / |grad f|^2`` (so that ``y3 = f``
increases at unit rate); in these coordinates the metric is block diagonal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .errors import ConformalPoint, TangencyError, ZeroGradient
from .fields import Field
from .integrate import Tolerance, integrate_fixed
from .material import MaterialField

EIG_PAIR_TOL = 1e-8


@dataclass
class RankOneMetric:
    alpha: object
    beta: object
    w: object
    g0: Optional[np.ndarray] = None

    @classmethod
    def from_material(cls, m: MaterialField) -> "RankOneMetric":
        return cls(lambda x: 1.0 / m.a66(x), lambda x: 1.0 / m.a55(x), m.axis)

    def at(self, x):
        def ev(f):
            return f(np.atleast_2d(x)) if callable(f) else f

        return ev(self.alpha), ev(self.beta), ev(self.w)


def assemble_metric(alpha, beta, w, g0=None) -> np.ndarray:
    """``alpha g0 + (beta - alpha) w w^T`` with ``w`` rescaled to unit g0-length.

    Arguments broadcast over a leading batch axis.
    """
    w = np.asarray(w, dtype=float)
    batched = w.ndim == 2
    w = np.atleast_2d(w)
    G0 = np.eye(3) if g0 is None else np.asarray(g0, dtype=float)
    G0 = np.broadcast_to(G0, (w.shape[0], 3, 3))
    G0inv = np.linalg.inv(G0)
    # unit length of the one-form w measured by the dual metric
    norm = np.sqrt(np.einsum("bi,bij,bj->b", w, G0inv, w))
    w = w / norm[:, None]
    a = np.broadcast_to(np.asarray(alpha, float), (w.shape[0],))
    b = np.broadcast_to(np.asarray(beta, float), (w.shape[0],))
    g = a[:, None, None] * G0 + (b - a)[:, None, None] * w[:, :, None] * w[:, None, :]
    return g if batched else g[0]


@dataclass
class Extraction:
    alpha: float
    beta: Optional[float]
    axis_span: Optional[np.ndarray]


def extract_parameters(g, g0=None, tol: float = EIG_PAIR_TOL) -> Extraction:
    """Recover ``alpha``, ``beta`` and the axis line from a single metric.

    The generalized eigenvalues of ``(g, g0)`` are ``alpha`` (twice) and
    ``beta``. The axis one-form is ``g0 v`` for the ``beta`` eigenvector ``v``,
    returned with unit Euclidean length and a non-negative leading
    component.
    """
    g = np.asarray(g, dtype=float)
    G0 = np.eye(3) if g0 is None else np.asarray(g0, dtype=float)
    mu, V = scipy.linalg.eigh(g, G0)
    if mu[-1] - mu[0] < tol * np.trace(g):
        raise ConformalPoint(float(np.mean(mu)))
    # the doubled eigenvalue is the closest pair
    if mu[1] - mu[0] <= mu[2] - mu[1]:
        alpha, beta, v = 0.5 * (mu[0] + mu[1]), mu[2], V[:, 2]
    else:
        alpha, beta, v = 0.5 * (mu[1] + mu[2]), mu[0], V[:, 0]
    span = G0 @ v
    span = span / np.linalg.norm(span)
    k = np.argmax(np.abs(span) > 1e-12)
    if span[k] < 0:
        span = -span
    return Extraction(float(alpha), float(beta), span)


# ---------------------------------------------------------------------------
# adapted coordinates


@dataclass
class SeedPatch:
    """Planar patch ``origin + y1 u1 + y2 u2`` sampled on a lattice."""

    origin: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    y1: np.ndarray
    y2: np.ndarray

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u1, self.u2)
        return n / np.linalg.norm(n)

    def points(self):
        Y1, Y2 = np.meshgrid(self.y1, self.y2, indexing="ij")
        Y1, Y2 = Y1.ravel(), Y2.ravel()
        X = self.origin + Y1[:, None] * self.u1 + Y2[:, None] * self.u2
        return Y1, Y2, X


@dataclass
class FoliationChart:
    y: np.ndarray  # (N, 3) chart coordinates
    x: np.ndarray  # (N, 3) ambient positions
    jacobian: np.ndarray  # (N, 3, 3), columns dx/dy_j
    residual: np.ndarray  # (N, 2) |g(dy_i, dy_3)| / |g|

    @property
    def max_residual(self) -> float:
        return float(self.residual.max()) if len(self.residual) else 0.0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y1", "y2", "y3", "x1", "x2", "x3", "residual_13", "residual_23"])
            for yy, xx, rr in zip(self.y, self.x, self.residual):
                w.writerow([f"{v:.15g}" for v in (*yy, *xx, *rr)])


def _flow_field(f: Field, metric: Optional[Callable]):
    """Vector field V with df(V) = 1 along grad f (g0 or g gradient) and DV."""

    def fields(x):
        _, g, h = f.derivs(x)
        if metric is None:
            Ginv = np.broadcast_to(np.eye(3), (len(x), 3, 3))
            dGinv = None
        else:
            G = metric(x)
            Ginv = np.linalg.inv(G)
            dGinv = _metric_inverse_derivative(metric, x, Ginv)
        u = np.einsum("bij,bj->bi", Ginv, g)
        s = np.sum(g * u, axis=1)
        if np.any(np.abs(s) < 1e-24):
            raise ZeroGradient("layer function gradient vanishes along the flow")
        V = u / s[:, None]
        du = np.einsum("bij,bjk->bik", Ginv, h)
        if dGinv is not None:
            du = du + np.einsum("bijk,bj->bik", dGinv, g)
        ds = np.einsum("bjk,bj->bk", h, u) + np.einsum("bj,bjk->bk", g, du)
        DV = du / s[:, None, None] - u[:, :, None] * ds[:, None, :] / s[:, None, None] ** 2
        return V, DV

    return fields


def _metric_inverse_derivative(metric, x, Ginv, step=1e-6):
    out = np.zeros((len(x), 3, 3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = step
        dG = (metric(x + e) - metric(x - e)) / (2 * step)
        out[:, :, :, k] = -Ginv @ dG @ Ginv
    return out


def build_adapted_coordinates(m: MaterialField, seed: SeedPatch, y3_levels,
                              metric: Optional[Callable] = None, min_angle: float = 1e-3,
                              tol: Tolerance = Tolerance(1e-11, 1e-13)) -> FoliationChart:
    """Chart with ``y3 = f`` and ``y1, y2`` constant along the layer-normal flow.

    ``metric`` (callable x -> 3x3) switches the flow from the Euclidean to the
    ``g``-gradient of ``f``; both give the same curves up to reparameterization
    when the axis is along ``df``. Residuals are measured with the qSH metric.
    """
    f = m.layer
    Y1, Y2, X0 = seed.points()
    grad0 = f.gradient(X0)
    sin_angle = np.abs(grad0 @ seed.normal) / np.linalg.norm(grad0, axis=1)
    if np.any(sin_angle < min_angle):
        raise TangencyError("layer gradient nearly tangent to the seed patch")
    f0 = f(X0)
    levels = np.asarray(y3_levels, dtype=float)
    n_seed, n_lev = len(X0), len(levels)
    xs = np.repeat(X0, n_lev, axis=0)
    dur = (levels[None, :] - f0[:, None]).ravel()
    fields = _flow_field(f, metric)

    def rhs(y):
        x = y[:, :3]
        V, DV = fields(x)
        J = y[:, 3:].reshape(-1, 3, 3)
        return np.hstack([V, (DV @ J).reshape(-1, 9)])

    # integrate forward or backward in the level label; seed columns start at I
    sign = np.where(dur >= 0, 1.0, -1.0)
    y0 = np.hstack([xs, np.tile(np.eye(3).ravel(), (len(xs), 1))])
    out = np.empty_like(y0)
    for sg in (1.0, -1.0):
        sel = sign == sg
        if not sel.any():
            continue
        r = integrate_fixed(lambda y, sg=sg: sg * rhs(y), y0[sel], np.abs(dur[sel]), tol)
        out[sel] = r.y
    x = out[:, :3]
    D = out[:, 3:].reshape(-1, 3, 3)
    V, _ = fields(x)
    # seed tangents, corrected for the varying start label f0(seed)
    g_seed = np.repeat(grad0, n_lev, axis=0)
    cols = []
    for u in (seed.u1, seed.u2):
        dfu = g_seed @ u
        cols.append(np.einsum("bij,j->bi", D, u) - V * dfu[:, None])
    cols.append(V)
    Jac = np.stack(cols, axis=2)
    if np.any(np.abs(np.sum(f.gradient(x) * V, axis=1) - 1) > 1e-6):
        raise TangencyError("flow lost transversality to the layers")
    G = _qsh_metric(m, x)
    gJ = np.einsum("bij,bjk->bik", G, Jac)
    gram = np.einsum("bji,bjk->bik", Jac, gJ)
    scale = np.linalg.norm(G, axis=(1, 2))
    resid = np.abs(np.stack([gram[:, 0, 2], gram[:, 1, 2]], axis=1)) / scale[:, None]
    y = np.stack([np.repeat(Y1, n_lev), np.repeat(Y2, n_lev), np.tile(levels, n_seed)], axis=1)
    return FoliationChart(y, x, Jac, resid)


def _qsh_metric(m: MaterialField, x) -> np.ndarray:
    return assemble_metric(1.0 / m.a66(x), 1.0 / m.a55(x), m.axis(x))


def qsh_metric_field(m: MaterialField) -> Callable:
    return lambda x: _qsh_metric(m, np.atleast_2d(x))
