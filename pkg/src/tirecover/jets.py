"""Second-order forward-mode differentiation on batched numpy arrays.

A :class:`Jet` carries a value together with its gradient and (optionally)
Hessian with respect to a fixed set of ``n`` independent variables. Every
arithmetic operation propagates the derivatives exactly, so the Hamiltonians
and material sensitivities built from jets have analytic first and second
derivatives without hand-expanded chain rules.

Shapes: ``v`` is ``(B,)``, ``g`` is ``(B, n)``, ``h`` is ``(B, n, n)`` or
``None`` for first-order jets.
"""

from __future__ import annotations

import numpy as np


class Jet:
    __slots__ = ("v", "g", "h")
    __array_priority__ = 100

    def __init__(self, v, g, h=None):
        self.v = v
        self.g = g
        self.h = h

    @property
    def order(self) -> int:
        return 1 if self.h is None else 2

    @property
    def n(self) -> int:
        return self.g.shape[-1]

    @classmethod
    def variables(cls, values: np.ndarray, order: int = 2) -> list["Jet"]:
        """Independent-variable jets for the columns of ``values`` (B, n)."""
        values = np.asarray(values, dtype=float)
        B, n = values.shape
        out = []
        for i in range(n):
            g = np.zeros((B, n))
            g[:, i] = 1.0
            h = np.zeros((B, n, n)) if order >= 2 else None
            out.append(VarJet(values[:, i].copy(), g, h, i))
        return out

    @classmethod
    def constant(cls, value, B: int, n: int, order: int = 2) -> "Jet":
        v = np.broadcast_to(np.asarray(value, dtype=float), (B,)).copy()
        h = np.zeros((B, n, n)) if order >= 2 else None
        return cls(v, np.zeros((B, n)), h)

    @classmethod
    def embed(cls, v, g_sub, h_sub, n: int, index: slice | np.ndarray) -> "Jet":
        """Lift derivatives w.r.t. a subset of variables into ``n`` variables."""
        B = v.shape[0]
        g = np.zeros((B, n))
        g[:, index] = g_sub
        h = None
        if h_sub is not None:
            h = np.zeros((B, n, n))
            idx = np.arange(n)[index]
            h[:, idx[:, None], idx[None, :]] = h_sub
        return cls(v, g, h)

    # arithmetic ---------------------------------------------------------
    def _coerce(self, other):
        if isinstance(other, Jet):
            return other
        return None

    def __add__(self, other):
        o = self._coerce(other)
        if o is None:
            return Jet(self.v + other, self.g, self.h)
        h = None if (self.h is None or o.h is None) else self.h + o.h
        return Jet(self.v + o.v, self.g + o.g, h)

    __radd__ = __add__

    def __neg__(self):
        return Jet(-self.v, -self.g, None if self.h is None else -self.h)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        o = self._coerce(other)
        if o is None:
            c = np.asarray(other, dtype=float)
            h = None if self.h is None else self.h * c[..., None, None]
            return Jet(self.v * c, self.g * c[..., None], h)
        v = self.v * o.v
        g = self.g * o.v[:, None] + o.g * self.v[:, None]
        h = None
        if self.h is not None and o.h is not None:
            cross = self.g[:, :, None] * o.g[:, None, :]
            h = (self.h * o.v[:, None, None] + o.h * self.v[:, None, None]
                 + cross + np.swapaxes(cross, 1, 2))
        return Jet(v, g, h)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._coerce(other)
        if o is None:
            return self * (1.0 / np.asarray(other, dtype=float))
        return self * o.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, k):
        if k == 2:
            return self * self
        return self._unary(self.v ** k, k * self.v ** (k - 1),
                           k * (k - 1) * self.v ** (k - 2))

    def _unary(self, f0, f1, f2):
        """Apply a scalar function with value f0, derivative f1, second f2."""
        g = self.g * f1[:, None]
        h = None
        if self.h is not None:
            h = (self.h * f1[:, None, None]
                 + f2[:, None, None] * self.g[:, :, None] * self.g[:, None, :])
        return Jet(f0, g, h)

    def reciprocal(self):
        r = 1.0 / self.v
        return self._unary(r, -r * r, 2.0 * r * r * r)

    def sqrt(self):
        s = np.sqrt(self.v)
        return self._unary(s, 0.5 / s, -0.25 / (s * self.v))

    def exp(self):
        e = np.exp(self.v)
        return self._unary(e, e, e)

    def log(self):
        return self._unary(np.log(self.v), 1.0 / self.v, -1.0 / self.v**2)

    def take(self, mask) -> "Jet":
        return Jet(self.v[mask], self.g[mask],
                   None if self.h is None else self.h[mask])


class VarJet(Jet):
    """Independent variable; lets field compositions skip the chain rule."""

    __slots__ = ("index",)

    def __init__(self, v, g, h, index):
        super().__init__(v, g, h)
        self.index = index


def dot(a: list[Jet], b: list[Jet]) -> Jet:
    out = a[0] * b[0]
    for x, y in zip(a[1:], b[1:]):
        out = out + x * y
    return out


def from_field(v, g3, h3, n: int, offset: int = 0) -> Jet:
    """Jet of a spatial field known by value/gradient/Hessian in 3 coordinates."""
    return Jet.embed(v, g3, h3, n, slice(offset, offset + 3))
