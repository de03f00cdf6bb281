"""Interval-modulation codec for LED identifiers.

Symbols are carried by the time between consecutive ON (rising) edges: a
symbol's pulse lasts 1, 2, or 3 base periods, always followed by one base
period of lighting off, so rising-edge intervals are 2T (bit 0), 3T (bit 1),
and 4T (start).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Symbol(Enum):
    START = "start"
    BIT0 = "bit0"
    BIT1 = "bit1"


# ON-pulse length per symbol, in base periods. The OFF gap is always one.
_ON_PERIODS = {Symbol.START: 3, Symbol.BIT1: 2, Symbol.BIT0: 1}


@dataclass(frozen=True)
class ProtocolConfig:
    """Modulation and decoder parameters.

    f_b_hz: fundamental frequency; the base period T = 1/f_b rounded to
        integer microseconds.
    bit_width: payload bits per transmitted ID.
    tolerance_us: debounce tolerance of the time-map update rule.
    class_tol_us: half-window for classifying a rising-edge interval onto
        the nearest of {2T, 3T, 4T}.
    """

    f_b_hz: float = 5000.0
    bit_width: int = 8
    tolerance_us: int = 50
    class_tol_us: int = 60

    def __post_init__(self):
        if self.f_b_hz <= 0:
            raise ValueError("f_b must be positive")
        if self.base_period_us < 1:
            raise ValueError("base period must be at least 1 us")
        if not (1 <= self.bit_width <= 32):
            raise ValueError("bit width must be in [1, 32]")
        if not 0 <= self.tolerance_us < self.base_period_us:
            raise ValueError("need 0 <= tolerance < base period")
        if not 0 < self.class_tol_us <= self.base_period_us / 2:
            raise ValueError("need 0 < class_tol <= base period / 2")

    @property
    def base_period_us(self) -> int:
        return round(1e6 / self.f_b_hz)

    @property
    def pattern_period_us(self) -> int:
        """Total pattern duration for a full ID frame, worst case (all ones)."""
        t = self.base_period_us
        return (3 + 1) * t + self.bit_width * (2 + 1) * t


@dataclass(frozen=True)
class SymbolSequence:
    """One START followed by payload bit symbols."""

    symbols: tuple

    def __post_init__(self):
        object.__setattr__(self, "symbols", tuple(self.symbols))
        if not self.symbols or self.symbols[0] is not Symbol.START:
            raise ValueError("sequence must begin with START")
        if any(s is Symbol.START for s in self.symbols[1:]):
            raise ValueError("START may only appear first")
        if any(not isinstance(s, Symbol) for s in self.symbols):
            raise ValueError("sequence entries must be Symbols")

    def __len__(self):
        return len(self.symbols)

    def __iter__(self):
        return iter(self.symbols)


@dataclass(frozen=True)
class BlinkWaveform:
    """ON/OFF transition times of one pattern repetition.

    transitions: ordered (t_us, state) pairs, strictly alternating and
    starting with ON; period is the total pattern duration, after which the
    pattern repeats.
    """

    transitions: tuple
    period_us: int

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        if not self.transitions:
            raise ValueError("waveform needs at least one transition")
        if self.transitions[0][1] is not True:
            raise ValueError("waveform must start with an ON transition")
        states = [s for _, s in self.transitions]
        if any(a == b for a, b in zip(states, states[1:])):
            raise ValueError("states must strictly alternate")
        times = [t for t, _ in self.transitions]
        if any(a >= b for a, b in zip(times, times[1:])):
            raise ValueError("transition times must strictly increase")
        if self.period_us <= times[-1]:
            raise ValueError("period must exceed the last transition time")

    def rising_edges(self) -> np.ndarray:
        return np.array([t for t, on in self.transitions if on], dtype=np.int64)


@dataclass(frozen=True)
class DecodedId:
    """One decoded frame: payload ID plus the start/end rising-edge times."""

    id: int
    t_start: int
    t_end: int

    def __post_init__(self):
        if self.id < 0:
            raise ValueError("id must be non-negative")
        if not self.t_start < self.t_end:
            raise ValueError("t_start must precede t_end")


@dataclass
class DecodeTally:
    """Optional diagnostics for decode_intervals."""

    frames_started: int = 0
    frames_decoded: int = 0
    aborted_invalid: int = 0
    aborted_restart: int = 0


def encode_id(ident: int, cfg: ProtocolConfig) -> SymbolSequence:
    """Encode an integer ID as START followed by its bits, MSB first."""
    if not 0 <= ident < (1 << cfg.bit_width):
        raise ValueError(f"id {ident} out of range for {cfg.bit_width} bits")
    bits = [(ident >> k) & 1 for k in range(cfg.bit_width - 1, -1, -1)]
    symbols = [Symbol.START] + [Symbol.BIT1 if b else Symbol.BIT0 for b in bits]
    return SymbolSequence(tuple(symbols))


def symbols_to_waveform(seq: SymbolSequence, cfg: ProtocolConfig) -> BlinkWaveform:
    """Lay out a symbol sequence as ON/OFF transition times.

    Each symbol is ON for its duration (3T start, 2T one, 1T zero) then OFF
    for one base period; the period is the sum of all ON and OFF spans.
    """
    t = cfg.base_period_us
    transitions = []
    cursor = 0
    for sym in seq:
        transitions.append((cursor, True))
        cursor += _ON_PERIODS[sym] * t
        transitions.append((cursor, False))
        cursor += t
    return BlinkWaveform(tuple(transitions), cursor)


def tile_waveform(waveform: BlinkWaveform, t0_us: int, t1_us: int, phase_us: int = 0):
    """Transition times of the repeated pattern inside [t0, t1].

    The pattern is anchored so repetition k starts at phase + k * period; only
    transitions with t0 <= t <= t1 are returned.
    """
    if t0_us >= t1_us:
        raise ValueError("need t0 < t1")
    period = waveform.period_us
    k0 = (t0_us - phase_us - period) // period
    out = []
    k = k0
    while True:
        base = phase_us + k * period
        if base > t1_us:
            break
        for t, state in waveform.transitions:
            ts = base + t
            if t0_us <= ts <= t1_us:
                out.append((ts, state))
        k += 1
    return out


def classify_interval(dt_us: int, cfg: ProtocolConfig):
    """Classify a rising-edge interval as a Symbol, or None when out of band.

    Ties at exact midpoints resolve to the shorter-duration symbol.
    """
    if dt_us <= 0:
        raise ValueError("interval must be positive")
    t = cfg.base_period_us
    best_sym, best_dist = None, None
    for periods, sym in ((2, Symbol.BIT0), (3, Symbol.BIT1), (4, Symbol.START)):
        dist = abs(dt_us - periods * t)
        if best_dist is None or dist < best_dist:
            best_sym, best_dist = sym, dist
    if best_dist > cfg.class_tol_us:
        return None
    return best_sym


def decode_intervals(rising_edges, cfg: ProtocolConfig, tally: DecodeTally | None = None):
    """Decode ID frames from a strictly increasing rising-edge time series.

    Scans consecutive intervals: a START interval opens a frame, the next
    bit_width bit intervals fill it. An unclassifiable interval or a
    premature START drops the frame in progress (the premature START opens a
    new one); dropped frames are only counted in the optional tally.
    """
    edges = np.asarray(rising_edges, dtype=np.int64)
    if len(edges) >= 2 and np.any(np.diff(edges) <= 0):
        raise ValueError("rising edges must be strictly increasing")
    decoded = []
    bits = None  # None = not collecting
    start_idx = 0
    for i in range(len(edges) - 1):
        sym = classify_interval(int(edges[i + 1] - edges[i]), cfg)
        if sym is Symbol.START:
            if bits is not None and tally is not None:
                tally.aborted_restart += 1
            bits = []
            start_idx = i
            if tally is not None:
                tally.frames_started += 1
        elif sym is None:
            if bits is not None and tally is not None:
                tally.aborted_invalid += 1
            bits = None
        elif bits is not None:
            bits.append(1 if sym is Symbol.BIT1 else 0)
            if len(bits) == cfg.bit_width:
                ident = 0
                for b in bits:
                    ident = (ident << 1) | b
                decoded.append(
                    DecodedId(ident, int(edges[start_idx]), int(edges[start_idx + cfg.bit_width]))
                )
                if tally is not None:
                    tally.frames_decoded += 1
                bits = None
    return decoded
