"""System parameters, release scheduling, and config-file I/O.

All quantities are kept in SI base units internally (m, s, molecules).
Config files may use unit suffixes (nm, us, ...) which are converted at
parse time.

A transmitted bit ``s[k]`` (1-indexed symbol interval k) maps to two
impulsive point releases at the origin:

* ``s[k] = 0``: ``n_tx_a`` type-A molecules at the interval start and
  ``n_tx_b`` type-B molecules ``tau0`` seconds later,
* ``s[k] = 1``: ``n_tx_b`` type-B molecules at the interval start and
  ``n_tx_a`` type-A molecules ``tau1`` seconds later.

``tau0``/``tau1`` may be the string ``"auto"``, in which case they are
resolved to the single-release peak time of the corresponding species
(see :func:`reactmc.solver.resolve_taus`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

__all__ = [
    "SystemParams",
    "ReleaseEvent",
    "ParamError",
    "validate_params",
    "build_schedule",
    "parse_bits",
    "parse_config",
    "read_config",
    "format_config",
    "write_config",
]

AUTO = "auto"

#: relative tolerance for "x is an integer multiple of dt"
LATTICE_RTOL = 1e-9


class ParamError(ValueError):
    """A system-parameter invariant is violated; message names it."""


class ParseError(ValueError):
    """A config file could not be parsed."""


@dataclass(frozen=True)
class SystemParams:
    """Physical and protocol constants of one link.

    Defaults are the standard operating point used throughout the test
    suite: 5000 molecules per release, 250 nm link distance, equal
    diffusion coefficients of 1e-9 m^2/s, forward rate 1e-17 per
    molecule m^3/s, backward production rate 1e17 molecules/(m^3 s),
    50 nm receiver radius, 20 us symbols on a 1 us step.
    """

    n_tx_a: int = 5000
    n_tx_b: int = 5000
    distance: float = 250e-9
    diff_a: float = 1e-9
    diff_b: float = 1e-9
    k_fwd: float = 1e-17
    k_bwd: float = 1e17
    rx_radius: float = 50e-9
    t_symb: float = 20e-6
    tau0: float | str = AUTO
    tau1: float | str = AUTO
    dt: float = 1e-6
    memory_len: int = 3

    @property
    def taus_resolved(self) -> bool:
        return not (self.tau0 == AUTO or self.tau1 == AUTO)

    def diff(self, species: str) -> float:
        return self.diff_a if species == "A" else self.diff_b

    def n_tx(self, species: str) -> int:
        return self.n_tx_a if species == "A" else self.n_tx_b


class ReleaseEvent(NamedTuple):
    time: float
    species: str  # "A" or "B"
    count: int


#: ordered release events; times nondecreasing, all on the dt lattice
ReleaseSchedule = tuple  # tuple[ReleaseEvent, ...]


def on_lattice(x: float, dt: float) -> bool:
    """True if x is an integer multiple of dt to within one part in 1e9."""
    ratio = x / dt
    return abs(ratio - round(ratio)) <= LATTICE_RTOL * max(1.0, abs(ratio))


def step_index(t: float, dt: float, what: str = "time") -> int:
    """Step index of a lattice time; raises ParamError off the lattice."""
    if not on_lattice(t, dt):
        raise ParamError(f"{what} {t!r} s is not on the dt lattice")
    return int(round(t / dt))


def events_by_step(sched, dt: float, n_steps: int) -> dict:
    """Group release events by the simulation step that injects them.

    Events at or beyond step ``n_steps`` never become visible within
    the run and are dropped.  Off-lattice event times raise ParamError.
    """
    by_step: dict[int, list[ReleaseEvent]] = {}
    for ev in sched:
        if ev.time < 0:
            raise ParamError("release times must be nonnegative")
        step = step_index(ev.time, dt, "schedule event")
        if step < n_steps:
            by_step.setdefault(step, []).append(ev)
    return by_step


def validate_params(p: SystemParams) -> SystemParams:
    """Return ``p`` unchanged if every invariant holds.

    Raises :class:`ParamError` naming the first violated invariant.
    Rate constants may be zero (non-reactive operation); every other
    physical quantity must be strictly positive.
    """
    if not isinstance(p.n_tx_a, int) or p.n_tx_a <= 0:
        raise ParamError("n_tx_a must be a positive integer")
    if not isinstance(p.n_tx_b, int) or p.n_tx_b <= 0:
        raise ParamError("n_tx_b must be a positive integer")
    for name in ("distance", "diff_a", "diff_b", "rx_radius", "t_symb", "dt"):
        value = getattr(p, name)
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            raise ParamError(f"{name} must be positive")
    for name in ("k_fwd", "k_bwd"):
        value = getattr(p, name)
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value >= 0):
            raise ParamError(f"{name} must be nonnegative")
    if p.rx_radius >= p.distance:
        raise ParamError("rx_radius must be smaller than distance")
    if not on_lattice(p.t_symb, p.dt):
        raise ParamError("t_symb must be an integer multiple of dt")
    for name in ("tau0", "tau1"):
        tau = getattr(p, name)
        if tau == AUTO:
            continue
        if not (isinstance(tau, (int, float)) and math.isfinite(tau) and tau > 0):
            raise ParamError(f"{name} must be positive")
        if tau >= p.t_symb:
            raise ParamError(f"{name} exceeds symbol duration")
        if not on_lattice(tau, p.dt):
            raise ParamError(f"{name} must be an integer multiple of dt")
    if not isinstance(p.memory_len, int) or p.memory_len < 1:
        raise ParamError("memory_len must be a positive integer")
    return p


def parse_bits(text: str) -> tuple:
    """Parse a binary string like ``"010"`` into a bit tuple."""
    if not text:
        raise ParamError("symbol sequence must be nonempty")
    if any(c not in "01" for c in text):
        raise ParamError(f"symbol sequence must be binary, got {text!r}")
    return tuple(int(c) for c in text)


def check_bits(bits: Sequence[int]) -> tuple:
    bits = tuple(int(b) for b in bits)
    if not bits:
        raise ParamError("symbol sequence must be nonempty")
    if any(b not in (0, 1) for b in bits):
        raise ParamError("symbol sequence must contain only 0/1")
    return bits


def build_schedule(p: SystemParams, bits: Sequence[int]) -> ReleaseSchedule:
    """Expand a bit sequence into the two-release-per-symbol schedule.

    Symbol k (1-indexed) starts at ``(k-1) * t_symb``.  Event times are
    snapped to the dt lattice they are guaranteed to lie on.
    """
    validate_params(p)
    if not p.taus_resolved:
        raise ParamError("tau0/tau1 must be resolved before scheduling")
    bits = check_bits(bits)
    events = []
    for k, s in enumerate(bits):
        start = k * p.t_symb
        if s == 0:
            events.append(ReleaseEvent(start, "A", p.n_tx_a))
            events.append(ReleaseEvent(start + p.tau0, "B", p.n_tx_b))
        else:
            events.append(ReleaseEvent(start, "B", p.n_tx_b))
            events.append(ReleaseEvent(start + p.tau1, "A", p.n_tx_a))
    snapped = [
        ReleaseEvent(round(e.time / p.dt) * p.dt, e.species, e.count) for e in events
    ]
    snapped.sort(key=lambda e: (e.time, e.species))
    return tuple(snapped)


# --------------------------------------------------------------------------
# config files: "name = value [unit]" lines, '#' comments
# --------------------------------------------------------------------------

_LENGTH = {"m": 1.0, "cm": 1e-2, "mm": 1e-3, "um": 1e-6, "µm": 1e-6, "nm": 1e-9}
_TIME = {"s": 1.0, "ms": 1e-3, "us": 1e-6, "µs": 1e-6, "ns": 1e-9}
_DIFF = {"m2/s": 1.0, "um2/s": 1e-12, "µm2/s": 1e-12}
_FWD = {"m3/s": 1.0}  # per-molecule volumetric rate
_BWD = {"1/m3/s": 1.0, "1/(m3*s)": 1.0}  # molecules per m^3 per s

_FIELD_UNITS = {
    "distance": _LENGTH,
    "rx_radius": _LENGTH,
    "t_symb": _TIME,
    "tau0": _TIME,
    "tau1": _TIME,
    "dt": _TIME,
    "diff_a": _DIFF,
    "diff_b": _DIFF,
    "k_fwd": _FWD,
    "k_bwd": _BWD,
}
_INT_FIELDS = ("n_tx_a", "n_tx_b", "memory_len")
_CANONICAL_UNIT = {
    "distance": "m", "rx_radius": "m",
    "t_symb": "s", "tau0": "s", "tau1": "s", "dt": "s",
    "diff_a": "m2/s", "diff_b": "m2/s",
    "k_fwd": "m3/s", "k_bwd": "1/m3/s",
}


def parse_config(text: str) -> SystemParams:
    """Parse config text into validated SystemParams.

    Every field of SystemParams must appear exactly once.
    """
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"line {lineno}: expected 'name = value', got {raw!r}")
        name, _, rhs = line.partition("=")
        name, rhs = name.strip(), rhs.strip()
        if name in values:
            raise ParseError(f"line {lineno}: duplicate key {name!r}")
        if name in _INT_FIELDS:
            try:
                values[name] = int(rhs)
            except ValueError:
                raise ParseError(f"line {lineno}: {name} must be an integer") from None
        elif name in _FIELD_UNITS:
            if name in ("tau0", "tau1") and rhs == AUTO:
                values[name] = AUTO
                continue
            parts = rhs.split()
            if len(parts) not in (1, 2):
                raise ParseError(f"line {lineno}: expected 'value [unit]'")
            try:
                value = float(parts[0])
            except ValueError:
                raise ParseError(f"line {lineno}: bad number {parts[0]!r}") from None
            scale = 1.0
            if len(parts) == 2:
                units = _FIELD_UNITS[name]
                if parts[1] not in units:
                    raise ParseError(
                        f"line {lineno}: unknown unit {parts[1]!r} for {name} "
                        f"(allowed: {', '.join(sorted(units))})"
                    )
                scale = units[parts[1]]
            values[name] = value * scale
        else:
            raise ParseError(f"line {lineno}: unknown key {name!r}")
    missing = [f.name for f in fields(SystemParams) if f.name not in values]
    if missing:
        raise ParseError(f"missing keys: {', '.join(missing)}")
    return validate_params(SystemParams(**values))


def read_config(path) -> SystemParams:
    return parse_config(Path(path).read_text())


def format_config(p: SystemParams) -> str:
    """Render params as config text in SI units, lossless round trip."""
    lines = []
    for f in fields(SystemParams):
        value = getattr(p, f.name)
        if f.name in _INT_FIELDS:
            lines.append(f"{f.name} = {value}")
        elif value == AUTO:
            lines.append(f"{f.name} = auto")
        else:
            lines.append(f"{f.name} = {value!r} {_CANONICAL_UNIT[f.name]}")
    return "\n".join(lines) + "\n"


def write_config(path, p: SystemParams) -> None:
    Path(path).write_text(format_config(p))
