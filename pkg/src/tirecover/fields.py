"""Smooth scalar fields on R^3 with analytic first and second derivatives.

Every field exposes ``derivs(x)`` returning value, gradient and Hessian for a
batch of points ``x`` of shape ``(B, 3)``. Fields used as layer or foliation
functions additionally provide :meth:`Field.axis_derivs`, the unit normal
``grad f / |grad f|`` with its first and second derivatives, which the
Hamiltonian jets need to differentiate the tilted frame twice.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .jets import Jet, VarJet


def _as_points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    return x


def compose_jet(v, g3, h3, X: Sequence[Jet]) -> Jet:
    """Jet of ``f(X)`` given f's value/gradient/Hessian at ``X`` values."""
    if all(isinstance(Xi, VarJet) for Xi in X):
        idx = np.array([Xi.index for Xi in X])
        return Jet.embed(v, g3, h3 if X[0].h is not None else None, X[0].n, idx)
    g = np.einsum("bi,bin->bn", g3, np.stack([Xi.g for Xi in X], axis=1))
    h = None
    if X[0].h is not None and h3 is not None:
        G = np.stack([Xi.g for Xi in X], axis=1)  # (B, 3, n)
        H = np.stack([Xi.h for Xi in X], axis=1)  # (B, 3, n, n)
        h = np.einsum("bi,binm->bnm", g3, H) + np.einsum("bij,bin,bjm->bnm", h3, G, G)
    return Jet(v, g, h)


class Field:
    """Base class: subclasses implement ``derivs``."""

    def derivs(self, x):
        raise NotImplementedError

    def __call__(self, x) -> np.ndarray:
        return self.derivs(x)[0]

    def gradient(self, x) -> np.ndarray:
        return self.derivs(x)[1]

    def jet(self, X: Sequence[Jet]) -> Jet:
        x = np.stack([Xi.v for Xi in X], axis=1)
        v, g, h = self.derivs(x)
        return compose_jet(v, g, h, X)

    def axis_derivs(self, x, step: float = 1e-4):
        """Unit normal n = grad f/|grad f| and its derivatives (FD fallback).

        Returns ``n (B,3)``, ``dn (B,3,3)`` with ``dn[b,i,j] = d n_i/d x_j`` and
        ``d2n (B,3,3,3)``.
        """
        x = _as_points(x)
        n0 = self.unit_normal(x)
        B = x.shape[0]
        dn = np.zeros((B, 3, 3))
        d2n = np.zeros((B, 3, 3, 3))
        for j in range(3):
            e = np.zeros(3)
            e[j] = step
            dn[:, :, j] = (self.unit_normal(x + e) - self.unit_normal(x - e)) / (2 * step)
        for j in range(3):
            for k in range(j, 3):
                ej = np.zeros(3)
                ej[j] = step
                ek = np.zeros(3)
                ek[k] = step
                val = (self.unit_normal(x + ej + ek) - self.unit_normal(x + ej - ek)
                       - self.unit_normal(x - ej + ek) + self.unit_normal(x - ej - ek)) / (4 * step**2)
                d2n[:, :, j, k] = val
                d2n[:, :, k, j] = val
        return n0, dn, d2n

    def unit_normal(self, x) -> np.ndarray:
        g = self.gradient(_as_points(x))
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    # composition helpers
    def __add__(self, other: "Field") -> "Field":
        if isinstance(other, (int, float)):
            other = Constant(float(other))
        return Sum([self, other])

    __radd__ = __add__

    def __mul__(self, c: float) -> "Field":
        return Scaled(self, float(c))

    __rmul__ = __mul__


@dataclass
class Constant(Field):
    value: float

    def derivs(self, x):
        x = _as_points(x)
        B = x.shape[0]
        return np.full(B, float(self.value)), np.zeros((B, 3)), np.zeros((B, 3, 3))

    def jet(self, X):
        B, n = X[0].g.shape
        return Jet.constant(self.value, B, n, order=X[0].order)


@dataclass
class Polynomial(Field):
    """Sum of monomials ``c * x^i y^j z^k`` given as ``(i, j, k, c)`` rows."""

    terms: list

    def derivs(self, x):
        x = _as_points(x)
        T = np.asarray(self.terms, dtype=float).reshape(-1, 4)
        E = T[:, :3].astype(int)
        C = T[:, 3]
        P, D1, D2 = [], [], []
        for d in range(3):
            # row k + 2 holds x^k; rows 0 and 1 stand for negative powers
            k = np.arange(E[:, d].max() + 1)
            pw = np.vstack([np.zeros((2, len(x))), x[None, :, d] ** k[:, None]])
            e = E[:, d]
            P.append(pw[e + 2])
            D1.append(e[:, None] * pw[e + 1])
            D2.append((e * (e - 1))[:, None] * pw[e])
        v = C @ (P[0] * P[1] * P[2])
        g = np.empty((len(x), 3))
        h = np.empty((len(x), 3, 3))
        for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            g[:, i] = C @ (D1[i] * P[j] * P[k])
            h[:, i, i] = C @ (D2[i] * P[j] * P[k])
            h[:, i, j] = h[:, j, i] = C @ (D1[i] * D1[j] * P[k])
        return v, g, h


@dataclass
class DepthPolynomial(Field):
    """Polynomial in ``x3`` alone, coefficients in increasing degree."""

    coefficients: Sequence[float]

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float)
        self._c = [c, c[1:] * np.arange(1, len(c)), c[2:] * np.arange(1, len(c) - 1) * np.arange(2, len(c))]

    @staticmethod
    def _horner(c, z):
        out = np.zeros_like(z)
        for a in c[::-1]:
            out = out * z + a
        return out

    def derivs(self, x):
        x = _as_points(x)
        z = x[:, 2]
        B = x.shape[0]
        g = np.zeros((B, 3))
        h = np.zeros((B, 3, 3))
        g[:, 2] = self._horner(self._c[1], z)
        h[:, 2, 2] = self._horner(self._c[2], z)
        return self._horner(self._c[0], z), g, h


def Linear(coefficients: Sequence[float], offset: float = 0.0) -> "LinearField":
    return LinearField(np.asarray(coefficients, dtype=float), float(offset))


@dataclass
class LinearField(Field):
    coefficients: np.ndarray
    offset: float = 0.0

    def derivs(self, x):
        x = _as_points(x)
        B = x.shape[0]
        c = np.asarray(self.coefficients, dtype=float)
        return x @ c + self.offset, np.tile(c, (B, 1)), np.zeros((B, 3, 3))

    def axis_derivs(self, x, step=None):
        x = _as_points(x)
        B = x.shape[0]
        c = np.asarray(self.coefficients, dtype=float)
        n = c / np.linalg.norm(c)
        return np.tile(n, (B, 1)), np.zeros((B, 3, 3)), np.zeros((B, 3, 3, 3))


@dataclass
class RadialField(Field):
    """``sign * (|x - center| - radius)``: spherical level sets."""

    center: np.ndarray
    sign: float = 1.0
    radius: float = 0.0

    def derivs(self, x):
        x = _as_points(x)
        d = x - np.asarray(self.center, dtype=float)
        r = np.linalg.norm(d, axis=1)
        n = d / r[:, None]
        eye = np.eye(3)[None]
        h = (eye - n[:, :, None] * n[:, None, :]) / r[:, None, None]
        s = self.sign
        return s * (r - self.radius), s * n, s * h

    def axis_derivs(self, x, step=None):
        x = _as_points(x)
        d = x - np.asarray(self.center, dtype=float)
        r = np.linalg.norm(d, axis=1)
        n = d / r[:, None]
        eye = np.eye(3)
        dn = (eye[None] - n[:, :, None] * n[:, None, :]) / r[:, None, None]
        d2n = (-np.einsum("ik,bj->bijk", eye, n)
               - np.einsum("jk,bi->bijk", eye, n)
               - np.einsum("ij,bk->bijk", eye, n)
               + 3 * np.einsum("bi,bj,bk->bijk", n, n, n)) / r[:, None, None, None] ** 2
        s = self.sign
        return s * n, s * dn, s * d2n


@dataclass
class GaussianBump(Field):
    """``amplitude * exp(-|x - center|^2 / (2 width^2))``."""

    amplitude: float
    center: np.ndarray
    width: float

    def derivs(self, x):
        x = _as_points(x)
        d = x - np.asarray(self.center, dtype=float)
        w2 = self.width**2
        e = self.amplitude * np.exp(-np.sum(d * d, axis=1) / (2 * w2))
        g = -d / w2 * e[:, None]
        h = (d[:, :, None] * d[:, None, :] / w2**2 - np.eye(3)[None] / w2) * e[:, None, None]
        return e, g, h


@dataclass
class Sum(Field):
    parts: list

    def derivs(self, x):
        out = [p.derivs(x) for p in self.parts]
        return tuple(sum(o[k] for o in out) for k in range(3))


@dataclass
class Scaled(Field):
    inner: Field
    factor: float

    def derivs(self, x):
        v, g, h = self.inner.derivs(x)
        return self.factor * v, self.factor * g, self.factor * h


@dataclass
class Composed(Field):
    """``fn(inner(x))`` for a smooth scalar map with known first/second derivative."""

    fn: Callable
    d1: Callable
    d2: Callable
    inner: Field

    def derivs(self, x):
        v, g, h = self.inner.derivs(x)
        f0, f1, f2 = self.fn(v), self.d1(v), self.d2(v)
        f0 = np.broadcast_to(np.asarray(f0, dtype=float), v.shape).copy()
        f1 = np.broadcast_to(np.asarray(f1, dtype=float), v.shape)
        f2 = np.broadcast_to(np.asarray(f2, dtype=float), v.shape)
        return (f0, g * f1[:, None],
                h * f1[:, None, None] + f2[:, None, None] * g[:, :, None] * g[:, None, :])


@dataclass
class JetFunction(Field):
    """Closed-form field written against :class:`Jet` arithmetic.

    ``fun`` receives a list of three coordinate jets and must return a Jet;
    only +, -, *, /, ``**`` and the ``Jet.exp``/``sqrt``/``log`` methods are
    needed.
    """

    fun: Callable

    def derivs(self, x):
        x = _as_points(x)
        J = self.fun(Jet.variables(x, order=2))
        return J.v, J.g, J.h


@dataclass
class GridField(Field):
    """Trilinear interpolation of samples on a regular grid.

    Derivatives are central differences of the interpolant with a step of one
    grid spacing; points outside the grid are clamped to its hull.
    """

    origin: np.ndarray
    spacing: np.ndarray
    values: np.ndarray
    _interp: object = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), (3,)).copy()
        self.values = np.asarray(self.values, dtype=float)
        axes = [self.origin[d] + self.spacing[d] * np.arange(self.values.shape[d]) for d in range(3)]
        self._lo = np.array([a[0] for a in axes])
        self._hi = np.array([a[-1] for a in axes])
        self._interp = RegularGridInterpolator(axes, self.values, method="linear")

    def _value(self, x):
        return self._interp(np.clip(x, self._lo, self._hi))

    def derivs(self, x):
        x = _as_points(x)
        B = x.shape[0]
        hs = self.spacing
        v = self._value(x)
        g = np.zeros((B, 3))
        h = np.zeros((B, 3, 3))
        for i in range(3):
            ei = np.zeros(3)
            ei[i] = hs[i]
            g[:, i] = (self._value(x + ei) - self._value(x - ei)) / (2 * hs[i])
            h[:, i, i] = (self._value(x + ei) - 2 * v + self._value(x - ei)) / hs[i] ** 2
            for j in range(i + 1, 3):
                ej = np.zeros(3)
                ej[j] = hs[j]
                val = (self._value(x + ei + ej) - self._value(x + ei - ej)
                       - self._value(x - ei + ej) + self._value(x - ei - ej)) / (4 * hs[i] * hs[j])
                h[:, i, j] = val
                h[:, j, i] = val
        return v, g, h


def as_field(value) -> Field:
    if isinstance(value, Field):
        return value
    return Constant(float(value))
