"""Constraint geometry in the current-voltage plane.

Every construction returns small abstract constraints over *local* variable
names (``v_re``, ``v_im``, ``i_re``, ``i_im``); the formulation layer binds
them to program columns. Angles are radians.

Robust current domains are inner approximations: any current satisfying
them keeps the exact power ``<v, i>`` inside its bounds for every voltage in
the admissible set

    S_V = { v : |v| <= vmax,  <v, e^{j theta}> >= vmax cos(phi) }

whose extreme points are the arc ``vmax e^{j a}``, ``a in [theta - phi, theta + phi]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Halfspace:
    coefficients: Mapping[str, float]
    rhs: float
    sense: str = "<="

    def __post_init__(self):
        if self.sense not in ("<=", ">="):
            raise GeometryError(f"bad sense {self.sense!r}")
        if not any(c != 0.0 for c in self.coefficients.values()):
            raise GeometryError("halfspace with all-zero coefficients")

    def lhs(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        return sum(c * np.asarray(values[k], float) for k, c in self.coefficients.items())

    def slack(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        """Nonnegative where satisfied."""
        lhs = self.lhs(values)
        return self.rhs - lhs if self.sense == "<=" else lhs - self.rhs

    def as_leq(self) -> tuple[dict[str, float], float]:
        if self.sense == "<=":
            return dict(self.coefficients), self.rhs
        return {k: -c for k, c in self.coefficients.items()}, -self.rhs


@dataclass(frozen=True)
class SecondOrderCone:
    """``sqrt(x^2 + y^2) <= bound`` for the variable pair ``terms``."""

    terms: tuple[str, str]
    bound: float

    def __post_init__(self):
        if self.bound < 0:
            raise GeometryError(f"negative cone radius {self.bound}")

    def slack(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        x, y = (np.asarray(values[t], float) for t in self.terms)
        return self.bound - np.hypot(x, y)


@dataclass(frozen=True)
class AffineRow:
    """``constant + sum(coefficients[k] * x_k)``."""

    coefficients: Mapping[str, float]
    constant: float = 0.0

    def __call__(self, values: Mapping[str, np.ndarray]) -> np.ndarray:
        return self.constant + sum(c * np.asarray(values[k], float) for k, c in self.coefficients.items())


Constraint = Halfspace | SecondOrderCone


def satisfied(constraints: Sequence[Constraint], values: Mapping[str, np.ndarray], tol: float = 0.0) -> np.ndarray:
    ok = True
    for c in constraints:
        ok = ok & (c.slack(values) >= -tol)
    return np.asarray(ok)


# --------------------------------------------------------------------------
# anchors and the convex voltage domain

@dataclass(frozen=True)
class AnchorAngles:
    theta: np.ndarray
    phi: np.ndarray
    energized: np.ndarray


def half_width(vmin: float, vmax: float) -> float:
    """Half-angle of the arc where the lower-bound chord meets the vmax circle."""
    return math.acos(min(1.0, vmin / vmax))


def anchor_angles(reference, network, energized=None) -> AnchorAngles:
    """Per-bus reference angle theta and arc half-width phi."""
    v0 = np.asarray(reference.state.v if hasattr(reference, "state") else reference, complex)
    if energized is None:
        from .network import energized_mask
        energized = energized_mask(network)
    energized = np.asarray(energized, bool)
    dead_ref = energized & (np.abs(v0) == 0)
    if np.any(dead_ref):
        ids = [network.buses[k].id for k in np.flatnonzero(dead_ref)]
        raise GeometryError(f"zero reference voltage at energized buses {ids}")
    theta = np.where(energized, np.arctan2(v0.imag, v0.real), 0.0)
    phi = np.array([half_width(b.vmin, b.vmax) for b in network.buses])
    return AnchorAngles(theta, phi, energized)


def voltage_domain(v0: complex, vmin: float, vmax: float) -> tuple[SecondOrderCone, Halfspace]:
    """Upper cone ``|v| <= vmax`` and the chord ``<v, v0> >= vmin |v0|``."""
    mag = abs(v0)
    if mag == 0:
        raise GeometryError("zero reference voltage")
    upper = SecondOrderCone(("v_re", "v_im"), vmax)
    lower = Halfspace({"v_re": v0.real, "v_im": v0.imag}, vmin * mag, ">=")
    return upper, lower


def voltage_convex_domain(reference, network, energized=None):
    """Per bus ``(upper, lower)``; ``None`` at de-energized buses."""
    ang = anchor_angles(reference, network, energized)
    v0 = np.asarray(reference.state.v, complex)
    return [voltage_domain(complex(v0[k]), b.vmin, b.vmax) if ang.energized[k] else None
            for k, b in enumerate(network.buses)]


# --------------------------------------------------------------------------
# first-order power rows

def taylor_power_row(v0: complex, i0: complex, which: str) -> AffineRow:
    """Linearisation of p or q of ``v conj(i)`` around ``(v0, i0)``."""
    vr, vi, ir, ii = v0.real, v0.imag, i0.real, i0.imag
    if which == "active":
        return AffineRow({"v_re": ir, "v_im": ii, "i_re": vr, "i_im": vi}, -(vr * ir + vi * ii))
    if which == "reactive":
        return AffineRow({"v_re": -ii, "v_im": ir, "i_re": vi, "i_im": -vr}, -(vi * ir - vr * ii))
    raise ValueError(f"which must be 'active' or 'reactive', got {which!r}")


# --------------------------------------------------------------------------
# worst-case voltages

def _wrap(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


def _clamp_to_arc(angle, theta, phi):
    d = _wrap(angle - theta)
    return theta + np.clip(d, -phi, phi)


def worst_case_voltage(i: complex, theta: float, phi: float, vmax: float, bound_kind: str) -> complex:
    """Voltage in S_V maximising (``upper``) or minimising (``lower``) ``<v, i>``.

    Both extremes sit on the arc: the maximiser is the arc point closest in
    angle to ``i``, the minimiser the one closest to ``-i``.
    """
    if i == 0:
        raise GeometryError("worst-case voltage undefined for zero current")
    if bound_kind == "upper":
        target = math.atan2(i.imag, i.real)
    elif bound_kind == "lower":
        target = math.atan2(-i.imag, -i.real)
    else:
        raise ValueError(f"bound_kind must be 'upper' or 'lower', got {bound_kind!r}")
    return vmax * complex(np.exp(1j * _clamp_to_arc(target, theta, phi)))


def robust_power_range(i, theta, phi, vmax):
    """Exact (min, max) of ``<v, i>`` over S_V, vectorised over ``i``."""
    i = np.asarray(i, complex)
    mag = np.abs(i)
    ang = np.angle(i)
    hi = vmax * mag * np.cos(_wrap(ang - _clamp_to_arc(ang, theta, phi)))
    neg = ang + np.pi
    lo = -vmax * mag * np.cos(_wrap(neg - _clamp_to_arc(neg, theta, phi)))
    return lo, hi


# --------------------------------------------------------------------------
# polygons

def inscribed_polygon_facets(radius: float, sides: int, terms: tuple[str, str] = ("i_re", "i_im")) -> list[Halfspace]:
    """Facets of the regular ``sides``-gon inscribed in the circle of ``radius``.

    Vertices sit at angles ``2 pi j / sides``.
    """
    if sides < 3:
        raise GeometryError("a polygon needs at least 3 sides")
    if radius < 0:
        raise GeometryError("negative radius")
    x, y = terms
    out = []
    for j in range(1, sides + 1):
        a, b = (j - 1) * math.pi / sides, j * math.pi / sides
        out.append(Halfspace({x: math.cos(a + b), y: math.sin(a + b)}, radius * math.cos(a - b)))
    return out


def polygon_vertices(radius: float, sides: int) -> np.ndarray:
    return radius * np.exp(2j * np.pi * np.arange(sides) / sides)


def voltage_polygon_facets(theta: float, phi: float, vmax: float, sides: int) -> list[Halfspace]:
    """Chords of the arc ``[theta - phi, theta + phi]`` split into ``2*sides`` pieces."""
    if sides < 1:
        raise GeometryError("need at least one voltage facet per side")
    out = []
    for j in range(1, sides + 1):
        for sgn in (1.0, -1.0):
            a = 0.5 * (theta + sgn * (j - 1) * phi / sides)
            b = 0.5 * (theta + sgn * j * phi / sides)
            out.append(Halfspace({"v_re": math.cos(a + b), "v_im": math.sin(a + b)}, vmax * math.cos(a - b)))
    return out


def voltage_polygon_vertices(theta: float, phi: float, vmax: float, sides: int) -> np.ndarray:
    k = np.arange(-sides, sides + 1)
    return vmax * np.exp(1j * (theta + k * phi / sides))


# --------------------------------------------------------------------------
# robust current domains

def _rotate(h: Halfspace, quarter: bool) -> Halfspace:
    """Re-express a constraint on ``w = j*i`` in terms of ``i``."""
    if not quarter:
        return h
    c = h.coefficients
    # w_re = -i_im, w_im = i_re
    return Halfspace({"i_re": c.get("i_im", 0.0), "i_im": -c.get("i_re", 0.0)}, h.rhs, h.sense)


def _dir(angle: float) -> dict[str, float]:
    return {"i_re": math.cos(angle), "i_im": math.sin(angle)}


def _lower_facets(lower: float, theta: float, phi: float, vmax: float, pieces: int) -> list[Halfspace]:
    """Robust ``<v, i> >= lower`` over S_V (acting on the un-rotated vector)."""
    out = [Halfspace(_dir(theta - phi), lower / vmax, ">="),
           Halfspace(_dir(theta + phi), lower / vmax, ">=")]
    if lower < 0 and phi > 0:
        # When -i points into the arc the minimiser is interior to it; bound
        # <u, i> from below on an outer polygon of the arc so the set stays inner.
        delta = 2 * phi / pieces
        scale = 1.0 / math.cos(delta / 2)
        for k in range(pieces):
            beta = theta - phi + (k + 0.5) * delta
            out.append(Halfspace({kk: scale * vv for kk, vv in _dir(beta).items()}, lower / vmax, ">="))
    return out


def _upper_edges(upper: float, theta: float, phi: float, vmax: float) -> list[Halfspace]:
    return [Halfspace(_dir(theta - phi), upper / vmax), Halfspace(_dir(theta + phi), upper / vmax)]


def _check_bounds(pmin, pmax, qmin, qmax, vmax):
    if vmax <= 0:
        raise GeometryError("vmax must be positive")
    if pmax < 0 or qmax < 0:
        raise GeometryError(f"robust domain needs pmax >= 0 and qmax >= 0 (got {pmax}, {qmax})")
    if pmin > pmax or qmin > qmax:
        raise GeometryError("inverted power bounds")


def robust_conic_domain(pmin: float, pmax: float, qmin: float, qmax: float,
                        theta: float, phi: float, vmax: float, pieces: int = 32) -> list[Constraint]:
    """Convex inner approximation of the currents whose exact (p, q) stay in bounds on S_V.

    Active power: disk of radius ``pmax/vmax`` with the two arc-end
    halfspaces, plus the lower halfspaces at the arc ends. Reactive power: the
    same construction applied to ``j*i``. ``pieces`` sets the outer polygon
    used when a lower bound is negative.
    """
    _check_bounds(pmin, pmax, qmin, qmax, vmax)
    out: list[Constraint] = [SecondOrderCone(("i_re", "i_im"), pmax / vmax)]
    out += _upper_edges(pmax, theta, phi, vmax)
    out += _lower_facets(pmin, theta, phi, vmax, pieces)
    out.append(SecondOrderCone(("i_re", "i_im"), qmax / vmax))
    out += [_rotate(h, True) for h in _upper_edges(qmax, theta, phi, vmax)]
    out += [_rotate(h, True) for h in _lower_facets(qmin, theta, phi, vmax, pieces)]
    return out


def robust_linear_domain(pmin: float, pmax: float, qmin: float, qmax: float,
                         theta: float, phi: float, vmax: float, sides: int,
                         form: str = "facets", voltage_sides: int | None = None) -> list[Halfspace]:
    """Polyhedral robust current domain.

    ``form='facets'`` swaps each disk of :func:`robust_conic_domain` for its
    inscribed ``sides``-gon. ``form='corners'`` instead requires the bounds at
    every vertex of the voltage polygon with ``voltage_sides`` facets per
    half-arc, which is exact for that polygon.
    """
    _check_bounds(pmin, pmax, qmin, qmax, vmax)
    if sides < 3:
        raise GeometryError("need at least 3 current facets")
    if form == "facets":
        out = inscribed_polygon_facets(pmax / vmax, sides)
        out += _upper_edges(pmax, theta, phi, vmax)
        out += _lower_facets(pmin, theta, phi, vmax, sides)
        out += [_rotate(h, True) for h in inscribed_polygon_facets(qmax / vmax, sides)]
        out += [_rotate(h, True) for h in _upper_edges(qmax, theta, phi, vmax)]
        out += [_rotate(h, True) for h in _lower_facets(qmin, theta, phi, vmax, sides)]
        return out
    if form == "corners":
        if voltage_sides is None:
            raise GeometryError("corner form needs the voltage polygon resolution")
        out = []
        for c in voltage_polygon_vertices(theta, phi, vmax, voltage_sides):
            p_row = {"i_re": c.real, "i_im": c.imag}
            q_row = {"i_re": c.imag, "i_im": -c.real}
            out += [Halfspace(p_row, pmax), Halfspace(p_row, pmin, ">="),
                    Halfspace(q_row, qmax), Halfspace(q_row, qmin, ">=")]
        return out
    raise ValueError(f"form must be 'facets' or 'corners', got {form!r}")
