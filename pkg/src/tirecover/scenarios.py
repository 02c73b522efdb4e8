"""Serializable medium descriptions and the stock scenarios.

A :class:`MediumSpec` is a constant TI parameter set optionally scaled by a
depth gradient ``s(x3)^2`` with ``s = 1 + gain (top - x3)`` (so velocities
grow with depth and rays turn back up), plus Gaussian bumps added to single
parameters. Every coefficient becomes a closed-form field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from math import comb
from typing import Optional

import numpy as np

from .errors import ConfigError
from .fields import Composed, Constant, DepthPolynomial, Field, GaussianBump, Linear
from .material import ElasticParams, FunctionalRule, MaterialField

M0 = ElasticParams(14.0, 2.0, 12.0, 4.0, 5.0)
BUMPABLE = ("a11", "a33", "a55", "a66", "e2")


@dataclass
class Bump:
    param: str
    amplitude: float
    center: list
    width: float

    def field(self) -> GaussianBump:
        return GaussianBump(self.amplitude, np.asarray(self.center, float), self.width)


@dataclass
class MediumSpec:
    params: dict = field(default_factory=lambda: asdict(M0))
    layer: list = field(default_factory=lambda: [0.0, 0.0, 1.0])
    gain: float = 0.0
    top: float = 0.0
    bumps: list = field(default_factory=list)
    domain: list = field(default_factory=lambda: [[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])
    # a33 = a33_ratio * a11 and E^2 = e2_coef * a11^2 when set
    functional: Optional[dict] = None

    def __post_init__(self):
        self.bumps = [b if isinstance(b, Bump) else Bump(**b) for b in self.bumps]
        missing = {"a11", "a13", "a33", "a55", "a66"} - set(self.params)
        if missing:
            raise ConfigError("params", f"missing {sorted(missing)}")
        for b in self.bumps:
            if b.param not in BUMPABLE:
                raise ConfigError("bumps.param", f"unknown parameter {b.param!r}")
            if b.width <= 0:
                raise ConfigError("bumps.width", "must be positive")
        if len(self.layer) != 3 or not np.any(self.layer):
            raise ConfigError("layer", "need a non-zero 3-vector")
        if self.functional is not None:
            extra = set(self.functional) - {"a33_ratio", "e2_coef"}
            if extra or len(self.functional) != 2:
                raise ConfigError("functional", "expected keys a33_ratio and e2_coef")
            if any(b.param in ("a33", "e2") for b in self.bumps):
                raise ConfigError("bumps.param", "a33 and e2 follow a11 in a functional medium")

    @property
    def elastic(self) -> ElasticParams:
        return ElasticParams(**{k: float(self.params[k]) for k in ("a11", "a13", "a33", "a55", "a66")})

    def scale_power(self, n: int) -> Field:
        """``s(x3)^n`` as a polynomial in ``x3``."""
        if self.gain == 0:
            return Constant(1.0)
        c0, c1 = 1.0 + self.gain * self.top, -self.gain
        return DepthPolynomial([comb(n, k) * c0 ** (n - k) * c1**k for k in range(n + 1)])

    def build(self) -> MaterialField:
        p = self.elastic
        s2, s4 = self.scale_power(2), self.scale_power(4)
        coeffs = {"a11": p.a11 * s2, "a33": p.a33 * s2, "a55": p.a55 * s2, "a66": p.a66 * s2,
                  "e2": p.e2 * s4}
        for b in self.bumps:
            coeffs[b.param] = coeffs[b.param] + b.field()
        if self.functional is not None:
            r, c = float(self.functional["a33_ratio"]), float(self.functional["e2_coef"])
            coeffs["a33"] = r * coeffs["a11"]
            coeffs["e2"] = Composed(lambda v: c * v * v, lambda v: 2 * c * v,
                                    lambda v: 2 * c + 0 * v, coeffs["a11"])
        return MaterialField(coeffs["a11"], coeffs["a33"], coeffs["a55"], coeffs["a66"],
                             Linear(self.layer), e2=coeffs["e2"],
                             domain=(self.domain[0], self.domain[1]))

    def with_bumps(self, bumps) -> "MediumSpec":
        d = self.to_dict()
        d["bumps"] = [asdict(b) if isinstance(b, Bump) else dict(b) for b in bumps]
        return MediumSpec.from_dict(d)

    def scaled_bumps(self, factor: float) -> "MediumSpec":
        return self.with_bumps([Bump(b.param, b.amplitude * factor, list(b.center), b.width)
                                for b in self.bumps])

    def to_dict(self) -> dict:
        return {"params": {k: float(v) for k, v in self.params.items()},
                "layer": [float(v) for v in self.layer], "gain": float(self.gain),
                "top": float(self.top),
                "bumps": [{"param": b.param, "amplitude": float(b.amplitude),
                           "center": [float(c) for c in b.center], "width": float(b.width)}
                          for b in self.bumps],
                "domain": [[float(v) for v in r] for r in self.domain],
                "functional": None if self.functional is None
                else {k: float(v) for k, v in self.functional.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "MediumSpec":
        known = {"params", "layer", "gain", "top", "bumps", "domain", "functional"}
        extra = set(d) - known
        if extra:
            raise ConfigError(sorted(extra)[0], "unknown medium field")
        try:
            return cls(**d)
        except TypeError as err:
            raise ConfigError("medium", str(err)) from None


def load_medium(path) -> MediumSpec:
    try:
        with open(path) as fh:
            return MediumSpec.from_dict(json.load(fh))
    except FileNotFoundError:
        raise ConfigError("material", f"file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError("material", f"invalid JSON: {err}") from None


# ---------------------------------------------------------------------------
# stock media

def m0(layer=(0.0, 0.0, 1.0)) -> MediumSpec:
    return MediumSpec(layer=list(layer))


def tilted_m0(tilt=(0.3, 0.1)) -> MediumSpec:
    """M0 whose axis is neither parallel nor orthogonal to ``x3 = const``."""
    return MediumSpec(layer=[tilt[0], tilt[1], 1.0])


def gradient_reference(tilt=(0.3, 0.0), gain: float = 2.0, top: float = 0.25,
                       depth: float = 2.5, half_width: float = 1.0) -> MediumSpec:
    """Tilted M0 with velocities increasing downwards from the surface ``x3 = top``."""
    lo = [-half_width, -half_width, top - depth]
    hi = [half_width, half_width, top]
    return MediumSpec(layer=[tilt[0], tilt[1], 1.0], gain=gain, top=top, domain=[lo, hi])


def a11_bump(reference: Optional[MediumSpec] = None, amplitude: float = 0.1,
             center=(0.0, 0.0, 0.1), width: float = 0.2) -> MediumSpec:
    ref = reference or gradient_reference()
    return ref.with_bumps([Bump("a11", amplitude, list(center), width)])


def functional_reference(**kw) -> MediumSpec:
    """Gradient reference obeying ``a33 = F(a11)``, ``E^2 = H(a11)`` exactly.

    ``F`` is linear and ``H`` quadratic, both fixed by the constant
    parameters, so the depth scaling keeps the reference on the rule.
    """
    ref = gradient_reference(**kw)
    p = ref.elastic
    d = ref.to_dict()
    d["functional"] = {"a33_ratio": p.a33 / p.a11, "e2_coef": p.e2 / p.a11**2}
    return MediumSpec.from_dict(d)


def functional_rule(spec: MediumSpec) -> FunctionalRule:
    r, c = spec.functional["a33_ratio"], spec.functional["e2_coef"]
    return FunctionalRule(F=lambda a: r * np.asarray(a, float), dF=lambda a: r + 0 * np.asarray(a, float),
                          d2F=lambda a: 0 * np.asarray(a, float), H=lambda a: c * np.asarray(a, float) ** 2,
                          dH=lambda a: 2 * c * np.asarray(a, float), d2H=lambda a: 2 * c + 0 * np.asarray(a, float))
