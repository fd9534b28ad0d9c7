"""Complex RMS phasor helpers, Fortescue transforms and waveform synthesis.

Conventions used throughout the package:

* Phasors are plain ``complex`` numbers whose magnitude is the RMS value in
  per-unit; ``x(t) = sqrt(2) * |X| * cos(w t + angle(X) + shift)``.
* Positive-sequence quantities carry a per-phase shift of ``+alpha_k`` and
  negative-sequence quantities ``-alpha_k``, with ``alpha = (0, -2pi/3,
  +2pi/3)`` for phases a, b, c.
* Angles are wrapped to ``(-pi, pi]``.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * math.pi
#: Fortescue rotation operator, 1 /_ 120deg.
ALPHA = cmath.exp(2j * math.pi / 3.0)
#: Per-phase synthesis shifts for phases a, b, c (positive sequence).
PHASE_SHIFTS = (0.0, -TWO_PI / 3.0, TWO_PI / 3.0)


class ThreePhase(NamedTuple):
    """Per-phase complex RMS phasors."""

    a: complex
    b: complex
    c: complex


class SequenceSet(NamedTuple):
    """Positive / negative / zero sequence complex RMS phasors."""

    pos: complex
    neg: complex
    zero: complex


@dataclass(frozen=True)
class Impedance:
    """Series impedance, resistance and reactance at nominal frequency (pu)."""

    r: float
    x: float

    def __post_init__(self):
        if self.r < 0.0:
            raise ValueError(f"negative resistance: {self.r}")

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)

    @property
    def magnitude(self) -> float:
        return abs(self.z)

    @property
    def rho(self) -> float:
        """Impedance phase angle (rad)."""
        return math.atan2(self.x, self.r)

    def scaled(self, factor: float) -> "Impedance":
        return Impedance(self.r * factor, self.x * factor)


def from_polar(magnitude: float, angle_deg: float) -> complex:
    """Build a phasor from RMS magnitude and angle in degrees."""
    return cmath.rect(magnitude, math.radians(angle_deg))


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(theta + math.pi, TWO_PI)
    if w <= 0.0:
        w += TWO_PI
    return w - math.pi


def fortescue(abc: ThreePhase) -> SequenceSet:
    """Symmetric-component decomposition of a three-phase phasor set."""
    a, b, c = abc
    pos = (a + ALPHA * b + ALPHA**2 * c) / 3.0
    neg = (a + ALPHA**2 * b + ALPHA * c) / 3.0
    zero = (a + b + c) / 3.0
    return SequenceSet(pos, neg, zero)


def inverse_fortescue(seq: SequenceSet) -> ThreePhase:
    """Exact inverse of :func:`fortescue`."""
    p, n, z = seq
    a = p + n + z
    b = ALPHA**2 * p + ALPHA * n + z
    c = ALPHA * p + ALPHA**2 * n + z
    return ThreePhase(a, b, c)


def synthesize(phasor: complex, omega: float, t: float, shift: float = 0.0) -> float:
    """Instantaneous sample of an RMS phasor at time ``t``."""
    if omega <= 0.0:
        raise ValueError("omega must be positive")
    return math.sqrt(2.0) * abs(phasor) * math.cos(
        omega * t + cmath.phase(phasor) + shift)


def synthesize_sequences(seq: SequenceSet, omega: float, t: float) -> tuple[float, float, float]:
    """Instantaneous three-phase samples of a sequence set (zero seq included)."""
    out = []
    for ak in PHASE_SHIFTS:
        v = (synthesize(seq.pos, omega, t, ak)
             + synthesize(seq.neg, omega, t, -ak)
             + synthesize(seq.zero, omega, t, 0.0))
        out.append(v)
    return tuple(out)


def extract_phasor(samples, omega: float, dt: float, return_dc: bool = False):
    """Single-bin DFT projection of one fundamental period onto ``omega``.

    ``samples`` must span exactly one period of ``omega`` on a fixed step
    ``dt``.  Returns the complex RMS phasor referenced to ``t = 0`` of the
    buffer; with ``return_dc`` also returns the window mean.
    """
    x = np.asarray(samples, dtype=float)
    n = x.size
    period = TWO_PI / omega
    if n == 0 or abs(n * dt - period) > 1e-9 * period:
        raise ValueError(
            f"buffer of {n} samples at dt={dt} does not span one period {period}")
    t = np.arange(n) * dt
    peak = 2.0 / n * np.sum(x * np.exp(-1j * omega * t))
    phasor = complex(peak / math.sqrt(2.0))
    if return_dc:
        return phasor, float(np.mean(x))
    return phasor


def extract_sequences(a, b, c, omega: float, dt: float) -> SequenceSet:
    """Sequence phasors of three simultaneously sampled one-period buffers."""
    pa = extract_phasor(a, omega, dt)
    pb = extract_phasor(b, omega, dt)
    pc = extract_phasor(c, omega, dt)
    return fortescue(ThreePhase(pa, pb, pc))
