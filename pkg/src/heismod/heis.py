"""Heisenberg group points, tangents, and the contact condition.

The group is modelled as C x R with multiplication
``(z, t)(z', t') = (z + z', t + t' + 2 Im(z conj(z')))``.  A tangent
vector ``(dz, dt)`` at a point with complex part ``z`` is legendrian when
``dt + 2 Im(conj(z) dz) = 0``; curves whose velocity satisfies this
everywhere are the horizontal objects the rest of the package integrates
over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


def _require_finite(name: str, *values: float):
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"{name} has non-finite component {v!r}")


@dataclass(frozen=True)
class HPoint:
    """A point (z, t) of the group."""

    z: complex
    t: float

    def __post_init__(self):
        object.__setattr__(self, "z", complex(self.z))
        object.__setattr__(self, "t", float(self.t))
        _require_finite("HPoint", self.z.real, self.z.imag, self.t)


@dataclass(frozen=True)
class HTangent:
    """A tangent vector (dz, dt); purely a coordinate pair, not attached
    to a base point."""

    dz: complex
    dt: float

    def __post_init__(self):
        object.__setattr__(self, "dz", complex(self.dz))
        object.__setattr__(self, "dt", float(self.dt))
        _require_finite("HTangent", self.dz.real, self.dz.imag, self.dt)


IDENTITY = HPoint(0j, 0.0)


def group_mul(p: HPoint, q: HPoint) -> HPoint:
    """Group product; the vertical twist is 2 Im(p.z * conj(q.z))."""
    return HPoint(p.z + q.z, p.t + q.t + 2.0 * (p.z * q.z.conjugate()).imag)


def group_inv(p: HPoint) -> HPoint:
    return HPoint(-p.z, -p.t)


def koranyi_norm(p: HPoint) -> float:
    """Homogeneous gauge (t^2 + |z|^4)^(1/4)."""
    r2 = (p.z * p.z.conjugate()).real
    return (p.t * p.t + r2 * r2) ** 0.25


def koranyi_distance(p: HPoint, q: HPoint) -> float:
    return koranyi_norm(group_mul(group_inv(p), q))


def dilate(p: HPoint, r: float) -> HPoint:
    """Parabolic dilation (z, t) -> (r z, r^2 t); the gauge scales by r."""
    return HPoint(r * p.z, r * r * p.t)


def legendrian_residual(z: complex, v: HTangent) -> float:
    """Defect of the contact condition for tangent ``v`` at complex part
    ``z``: returns ``dt + 2 Im(conj(z) dz)``, zero iff legendrian.

    Linear in ``v``, so the residual of a velocity field along a curve
    scales with parametrization speed.
    """
    return v.dt + 2.0 * (z.conjugate() * v.dz).imag
