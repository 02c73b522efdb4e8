"""Pointwise transversely isotropic algebra and the three Hamiltonians.

Parameters are stiffness over density (velocity squared). With the isotropy
axis along the third tilted coordinate, ``P = |xi'|^2`` and ``Q = xi_3^2``:

* qSH: ``p = a66 P + a55 Q``
* qP / qSV: ``p = (a11+a55) P + (a33+a55) Q +/- sqrt(D)`` with
  ``S = (a11-a55) P + (a33-a55) Q`` and ``D = S^2 - 4 E^2 P Q``.

The qP/qSV Hamiltonian is twice the squared phase speed. ``E^2`` is carried as
an independent parameter, so sensitivities w.r.t. ``a11`` and ``a33`` hold it
fixed.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import DiscriminantTooSmall, NegativeDiscriminant, ZeroGradient
from .fields import Field, as_field
from .jets import Jet

DISCRIMINANT_FLOOR = 1e-12
GRADIENT_FLOOR = 1e-12


class Wave(str, Enum):
    QP = "qP"
    QSV = "qSV"
    QSH = "qSH"

    @property
    def sign(self) -> float:
        return {Wave.QP: 1.0, Wave.QSV: -1.0, Wave.QSH: 0.0}[self]

    @classmethod
    def parse(cls, w) -> "Wave":
        if isinstance(w, Wave):
            return w
        for member in cls:
            if str(w).lower() == member.value.lower():
                return member
        raise ValueError(f"unknown wave {w!r}")


PARAM_NAMES = ("e2", "a11", "a33")


@dataclass(frozen=True)
class ElasticParams:
    a11: float
    a13: float
    a33: float
    a55: float
    a66: float

    @property
    def e2(self) -> float:
        return e_squared(self)

    def local(self) -> "LocalParams":
        return LocalParams.from_values(self.a11, self.a33, self.a55, self.a66, self.e2)


def isotropic_params(lam: float, mu: float) -> ElasticParams:
    return ElasticParams(lam + 2 * mu, lam, lam + 2 * mu, mu, mu)


def check_admissible(p: ElasticParams) -> bool:
    vals = (p.a11, p.a33, p.a55, p.a66)
    if not all(np.isfinite(v) and v > 0 for v in vals):
        return False
    if not max(p.a55, p.a66) < min(p.a11, p.a33):
        return False
    return p.a11 > p.a55


def e_squared(p: ElasticParams) -> float:
    return (p.a11 - p.a55) * (p.a33 - p.a55) - (p.a13 + p.a55) ** 2


@dataclass
class LocalParams:
    """Batched pointwise parameters ``(a11, a33, a55, a66, e2)``."""

    a11: np.ndarray
    a33: np.ndarray
    a55: np.ndarray
    a66: np.ndarray
    e2: np.ndarray

    @classmethod
    def from_values(cls, a11, a33, a55, a66, e2) -> "LocalParams":
        arr = np.broadcast_arrays(*[np.atleast_1d(np.asarray(v, dtype=float))
                                    for v in (a11, a33, a55, a66, e2)])
        return cls(*[a.copy() for a in arr])

    def replace(self, **kw) -> "LocalParams":
        d = dict(a11=self.a11, a33=self.a33, a55=self.a55, a66=self.a66, e2=self.e2)
        d.update(kw)
        return LocalParams.from_values(**d)

    def admissible(self) -> np.ndarray:
        ok = (self.a11 > 0) & (self.a33 > 0) & (self.a55 > 0) & (self.a66 > 0)
        ok &= np.maximum(self.a55, self.a66) < np.minimum(self.a11, self.a33)
        # real a13 requires E^2 <= (a11-a55)(a33-a55)
        ok &= self.e2 <= (self.a11 - self.a55) * (self.a33 - self.a55)
        return ok

    def __len__(self):
        return self.a11.shape[0]


def _sqrt(a):
    return a.sqrt() if isinstance(a, Jet) else np.sqrt(a)


def _value(a):
    return a.v if isinstance(a, Jet) else np.asarray(a)


def _check_discriminant(D, S_scale, strict, x=None, xi=None):
    if strict is None:
        return
    Dv = _value(D)
    floor = DISCRIMINANT_FLOOR * S_scale**2
    if strict:
        bad = Dv <= floor
        if np.any(bad):
            raise DiscriminantTooSmall(
                f"discriminant {Dv[bad].min():.3e} below floor near a branch point")
    else:
        bad = Dv < -floor
        if np.any(bad):
            raise NegativeDiscriminant(
                f"negative discriminant {Dv[bad].min():.3e}: parameters outside validity",
                x=x, xi=xi)


def phase_core(a11, a33, a55, a66, e2, P, Q, wave: Wave, strict=False):
    """Hamiltonian from tilted-frame invariants; works on arrays or Jets.

    ``strict`` True rejects near-branch points, False rejects only negative
    discriminants, None never raises (failing items turn NaN).
    """
    wave = Wave.parse(wave)
    if wave is Wave.QSH:
        return a66 * P + a55 * Q
    S = (a11 - a55) * P + (a33 - a55) * Q
    D = S * S - 4.0 * e2 * P * Q
    scale = (_value(a11) + _value(a33)) * (_value(P) + _value(Q))
    _check_discriminant(D, scale, strict)
    if strict is None:
        # unchecked mode for batched flows: bad items become non-finite
        if isinstance(D, Jet):
            D.v = np.where(D.v < 0, np.nan, D.v)
        else:
            D = np.where(D < 0, np.nan, D)
    elif not strict:
        if isinstance(D, Jet):
            D.v = np.maximum(D.v, 0.0)
        else:
            D = np.maximum(D, 0.0)
    return (a11 + a55) * P + (a33 + a55) * Q + wave.sign * _sqrt(D)


def sensitivity_core(l: str, a11, a33, a55, e2, P, Q, wave: Wave, strict: bool = True):
    """``dp/d nu_l`` for ``l`` in {'e2', 'a11', 'a33'} (closed form)."""
    wave = Wave.parse(wave)
    if wave is Wave.QSH:
        raise ValueError("qSH does not depend on a11, a33 or E^2")
    s = wave.sign
    S = (a11 - a55) * P + (a33 - a55) * Q
    D = S * S - 4.0 * e2 * P * Q
    scale = (_value(a11) + _value(a33)) * (_value(P) + _value(Q))
    _check_discriminant(D, scale, strict)
    R = _sqrt(D)
    if l == "e2":
        return (-2.0 * s) * (P * Q) / R
    if s > 0:
        fac = S / R + 1.0
    else:
        # 1 - S/R without cancellation
        fac = (-4.0 * e2 * P * Q) / (R * (R + S))
    if l == "a11":
        return P * fac
    if l == "a33":
        return Q * fac
    raise ValueError(f"unknown parameter {l!r}")


def local_hamiltonian(lp: LocalParams, P, Q, wave) -> np.ndarray:
    return phase_core(lp.a11, lp.a33, lp.a55, lp.a66, lp.e2, np.asarray(P, float),
                      np.asarray(Q, float), wave)


def local_sensitivities(lp: LocalParams, P, Q, wave) -> dict:
    """All three closed-form material sensitivities at tilted invariants."""
    P = np.asarray(P, float)
    Q = np.asarray(Q, float)
    return {l: sensitivity_core(l, lp.a11, lp.a33, lp.a55, lp.e2, P, Q, wave) for l in PARAM_NAMES}


def lemma_hessian_diagonal(lp: LocalParams, wave) -> tuple[np.ndarray, np.ndarray]:
    """(1/2) xi-Hessian entries at xi_3 = 0, |xi'| = 1 (in-plane, axial)."""
    wave = Wave.parse(wave)
    if wave is Wave.QSH:
        return lp.a66, lp.a55
    c = (lp.a11 - lp.a55) * (lp.a33 - lp.a55) - lp.e2  # (a13 + a55)^2
    if wave is Wave.QP:
        return 2 * lp.a11, 2 * lp.a55 + 2 * c / (lp.a11 - lp.a55)
    return 2 * lp.a55, 2 * lp.a33 - 2 * c / (lp.a11 - lp.a55)


# ---------------------------------------------------------------------------
# frames


def tilt_frame(axis) -> np.ndarray:
    """Rows (e1, e2, e3) of a right-handed orthonormal frame with e3 = axis."""
    n = np.atleast_2d(np.asarray(axis, dtype=float))
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    B = n.shape[0]
    ref = np.tile(np.array([1.0, 0.0, 0.0]), (B, 1))
    fallback = np.abs(n[:, 0]) > 1 - 1e-6
    ref[fallback] = np.array([0.0, 1.0, 0.0])
    e1 = ref - np.sum(ref * n, axis=1, keepdims=True) * n
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(n, e1)
    return np.stack([e1, e2, n], axis=1)


@dataclass
class TiltFrame:
    e1: np.ndarray
    e2: np.ndarray
    e3: np.ndarray

    @classmethod
    def at(cls, m: "MaterialField", x) -> "TiltFrame":
        R = tilt_frame(m.axis(x))[0]
        return cls(R[0], R[1], R[2])

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([self.e1, self.e2, self.e3])


@dataclass
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)


# ---------------------------------------------------------------------------
# material field


class MaterialField:
    """TI parameter fields plus the layer function ``f`` (axis ~ df).

    Supply either ``a13`` or ``e2``. The background metric is Euclidean.
    """

    def __init__(self, a11, a33, a55, a66, layer: Field, a13=None, e2=None,
                 domain: Optional[tuple[Sequence[float], Sequence[float]]] = None):
        if (a13 is None) == (e2 is None):
            raise ValueError("give exactly one of a13 or e2")
        self.a11 = as_field(a11)
        self.a33 = as_field(a33)
        self.a55 = as_field(a55)
        self.a66 = as_field(a66)
        self.a13 = None if a13 is None else as_field(a13)
        self.e2 = None if e2 is None else as_field(e2)
        self.layer = layer
        if domain is None:
            domain = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
        self.domain = (np.asarray(domain[0], float), np.asarray(domain[1], float))

    @classmethod
    def constant(cls, p: ElasticParams, axis=(0.0, 0.0, 1.0), domain=None) -> "MaterialField":
        from .fields import Linear

        return cls(p.a11, p.a33, p.a55, p.a66, Linear(axis), a13=p.a13, domain=domain)

    def replace(self, **kw) -> "MaterialField":
        d = dict(a11=self.a11, a33=self.a33, a55=self.a55, a66=self.a66, layer=self.layer,
                 a13=self.a13, e2=self.e2, domain=self.domain)
        if "e2" in kw and kw["e2"] is not None:
            d["a13"] = None
        if "a13" in kw and kw["a13"] is not None:
            d["e2"] = None
        d.update(kw)
        return MaterialField(**d)

    def local_params(self, x) -> LocalParams:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a11, a33, a55, a66 = self.a11(x), self.a33(x), self.a55(x), self.a66(x)
        if self.e2 is not None:
            e2 = self.e2(x)
        else:
            e2 = (a11 - a55) * (a33 - a55) - (self.a13(x) + a55) ** 2
        return LocalParams.from_values(a11, a33, a55, a66, e2)

    def param_jets(self, X: Sequence[Jet]) -> tuple:
        a11, a33, a55, a66 = (f.jet(X) for f in (self.a11, self.a33, self.a55, self.a66))
        if self.e2 is not None:
            e2 = self.e2.jet(X)
        else:
            s = self.a13.jet(X) + a55
            e2 = (a11 - a55) * (a33 - a55) - s * s
        return a11, a33, a55, a66, e2

    def axis(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        g = self.layer.gradient(x)
        nrm = np.linalg.norm(g, axis=1)
        if np.any(nrm < GRADIENT_FLOOR):
            raise ZeroGradient("layer function has vanishing gradient")
        return g / nrm[:, None]

    def axis_jets(self, X: Sequence[Jet]) -> list[Jet]:
        x = np.stack([Xi.v for Xi in X], axis=1)
        g = self.layer.gradient(x)
        if np.any(np.linalg.norm(g, axis=1) < GRADIENT_FLOOR):
            raise ZeroGradient("layer function has vanishing gradient")
        n, dn, d2n = self.layer.axis_derivs(x)
        from .fields import compose_jet

        return [compose_jet(n[:, i], dn[:, i, :], d2n[:, i], X) for i in range(3)]

    def check_admissible(self, x) -> np.ndarray:
        return self.local_params(x).admissible()


# ---------------------------------------------------------------------------
# Hamiltonians on a material field


def _pts(x, xi):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    x, xi = np.broadcast_arrays(x, xi)
    return x.copy(), xi.copy()


def to_tilted(m: MaterialField, x, xi) -> tuple[np.ndarray, np.ndarray]:
    """(|xi'|^2, xi_3) with xi_3 the axis component of xi."""
    x, xi = _pts(x, xi)
    n = m.axis(x)
    xi3 = np.sum(n * xi, axis=1)
    perp = np.sum(xi * xi, axis=1) - xi3**2
    return np.maximum(perp, 0.0), xi3


def tilted_covector(m: MaterialField, x, xi) -> np.ndarray:
    x, xi = _pts(x, xi)
    R = tilt_frame(m.axis(x))
    return np.einsum("bij,bj->bi", R, xi)


def hamiltonian(m: MaterialField, wave, x, xi) -> np.ndarray:
    x, xi = _pts(x, xi)
    P, xi3 = to_tilted(m, x, xi)
    lp = m.local_params(x)
    try:
        return local_hamiltonian(lp, P, xi3**2, wave)
    except NegativeDiscriminant as err:
        raise NegativeDiscriminant(str(err), x=x, xi=xi) from None


def phase_jet(m: MaterialField, wave, x, xi, order: int = 1, strict=False) -> Jet:
    """p as a Jet in the six variables (x1, x2, x3, xi1, xi2, xi3)."""
    x, xi = _pts(x, xi)
    Z = Jet.variables(np.hstack([x, xi]), order=order)
    X, XI = Z[:3], Z[3:]
    a11, a33, a55, a66, e2 = m.param_jets(X)
    n = m.axis_jets(X)
    u = n[0] * XI[0] + n[1] * XI[1] + n[2] * XI[2]
    Q = u * u
    P = XI[0] * XI[0] + XI[1] * XI[1] + XI[2] * XI[2] - Q
    return phase_core(a11, a33, a55, a66, e2, P, Q, wave, strict=strict)


def sensitivity_jet(m: MaterialField, wave, l: str, x, xi, order: int = 1,
                    functional=None) -> Jet:
    """Material sensitivity ``dP/d nu_l`` as a Jet in (x, xi).

    With ``functional`` (a :class:`FunctionalRule`) and ``l='a11'`` the
    effective coefficient ``dp/da11 + F' dp/da33 + H' dp/dE^2`` is returned.
    """
    x, xi = _pts(x, xi)
    Z = Jet.variables(np.hstack([x, xi]), order=order)
    X, XI = Z[:3], Z[3:]
    a11, a33, a55, a66, e2 = m.param_jets(X)
    n = m.axis_jets(X)
    u = n[0] * XI[0] + n[1] * XI[1] + n[2] * XI[2]
    Q = u * u
    P = XI[0] * XI[0] + XI[1] * XI[1] + XI[2] * XI[2] - Q
    if functional is None:
        return sensitivity_core(l, a11, a33, a55, e2, P, Q, wave)
    if l != "a11":
        raise ValueError("functional rules act on a11")
    total = sensitivity_core("a11", a11, a33, a55, e2, P, Q, wave)
    dF = a11._unary(functional.dF(a11.v), functional.d2F(a11.v), np.zeros_like(a11.v))
    dH = a11._unary(functional.dH(a11.v), functional.d2H(a11.v), np.zeros_like(a11.v))
    total = total + dF * sensitivity_core("a33", a11, a33, a55, e2, P, Q, wave)
    total = total + dH * sensitivity_core("e2", a11, a33, a55, e2, P, Q, wave)
    return total


def hamiltonian_derivs(m: MaterialField, wave, x, xi) -> tuple[np.ndarray, np.ndarray]:
    J = phase_jet(m, wave, x, xi, order=1, strict=Wave.parse(wave) is not Wave.QSH)
    return J.g[:, :3], J.g[:, 3:]


def phase_hessian(m: MaterialField, wave, x, xi) -> Jet:
    return phase_jet(m, wave, x, xi, order=2, strict=Wave.parse(wave) is not Wave.QSH)


def xi_hessian(m: MaterialField, wave, x, xi, frame: str = "tilted") -> np.ndarray:
    """Half the xi-Hessian of p, in the tilted frame (default) or ambient."""
    x, xi = _pts(x, xi)
    J = phase_hessian(m, wave, x, xi)
    H = 0.5 * J.h[:, 3:, 3:]
    if frame == "ambient":
        return H
    R = tilt_frame(m.axis(x))
    return np.einsum("bij,bjk,blk->bil", R, H, R)


def material_sensitivities(m: MaterialField, wave, x, xi) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dp/dE^2, dp/da11, dp/da33) at (x, xi)."""
    x, xi = _pts(x, xi)
    P, xi3 = to_tilted(m, x, xi)
    s = local_sensitivities(m.local_params(x), P, xi3**2, wave)
    return s["e2"], s["a11"], s["a33"]


@dataclass
class FunctionalRule:
    """``a33 = F(a11)``, ``E^2 = H(a11)`` with derivatives up to second order."""

    F: object
    dF: object
    d2F: object
    H: object
    dH: object
    d2H: object

    @classmethod
    def affine(cls, f0: float, fslope: float, h0: float, hslope: float, a11_ref: float) -> "FunctionalRule":
        """Affine rules about ``a11_ref``: F = f0 + fslope (a11 - a11_ref), same for H."""
        zero = lambda a: np.zeros_like(np.asarray(a, float))  # noqa: E731
        return cls(
            F=lambda a: f0 + fslope * (np.asarray(a, float) - a11_ref),
            dF=lambda a: fslope + zero(a),
            d2F=zero,
            H=lambda a: h0 + hslope * (np.asarray(a, float) - a11_ref),
            dH=lambda a: hslope + zero(a),
            d2H=zero,
        )
