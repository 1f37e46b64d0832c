"""Bit-exact range coder with integer Laplace CDF tables.

The same table-construction code runs on both the encoding and decoding
side, so any (mu, b) pair maps to one integer distribution. Tables use
16-bit probability precision (total 2^16) with at least one count per
symbol; tail mass beyond the symbol range is folded into the extreme
symbols. The coder itself is a 64-bit carry-less range coder emitting
bytes; probabilities enter as cumulative counts out of 2^16.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CoderError",
    "QuantizedCdf",
    "laplace_cdf_table",
    "laplace_masses",
    "RangeEncoder",
    "RangeDecoder",
    "range_encode",
    "range_decode",
]

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS

_MASK64 = (1 << 64) - 1
_TOP = 1 << 56
_BOT = 1 << 48

#: Symbol alphabets span mu +- max(64 b, 1), clipped to signed 16-bit range.
ALPHABET_SPAN_SCALE = 64.0
ALPHABET_MAX = (1 << 15) - 1
ALPHABET_MIN = -(1 << 15)


class CoderError(Exception):
    """Raised for out-of-range symbols or exhausted/corrupt streams."""


@dataclass(frozen=True)
class QuantizedCdf:
    """Integer cumulative counts: cum[k] .. cum[k+1] owns symbol z_min+k."""

    z_min: int
    z_max: int
    cum: np.ndarray  # int64, len symbols+1, cum[0]=0, cum[-1]=TOTAL, strictly increasing

    @property
    def num_symbols(self) -> int:
        return self.z_max - self.z_min + 1

    def mass(self, z: int) -> int:
        k = z - self.z_min
        return int(self.cum[k + 1] - self.cum[k])


def _laplace_cdf(x: np.ndarray, mu: float, b: float) -> np.ndarray:
    t = (x - mu) / b
    neg = np.minimum(t, 0.0)
    return np.where(t < 0, 0.5 * np.exp(neg), 1.0 - 0.5 * np.exp(-np.maximum(t, 0.0)))


def laplace_masses(mu: float, b: float, z_min: int, z_max: int) -> np.ndarray:
    """Continuous unit-interval masses with tails folded into the extremes."""
    if b <= 0:
        raise CoderError(f"Laplace scale must be > 0, got {b}")
    if z_min >= z_max:
        raise CoderError(f"need z_min < z_max, got [{z_min}, {z_max}]")
    edges = np.arange(z_min, z_max + 1, dtype=np.float64) + 0.5
    cdf = _laplace_cdf(edges, mu, b)
    m = np.empty(z_max - z_min + 1, dtype=np.float64)
    m[0] = cdf[0]
    m[1:] = np.diff(cdf)
    m[-1] += 1.0 - cdf[-1]
    return m


def laplace_cdf_table(mu: float, b: float, z_min: int, z_max: int) -> QuantizedCdf:
    """Integerize Laplace unit-interval masses to total 2^16, >= 1 each.

    Rounding rule (identical on encode and decode): round each mass to
    the nearest count, bump zeros to 1, then add the total correction to
    the symbol nearest mu, spilling outward by descending count if that
    symbol cannot absorb it. The per-symbol rounding is a function of the
    mass alone, so symmetric inputs yield symmetric tables.
    """
    m = laplace_masses(mu, b, z_min, z_max)
    n = m.size
    if n > TOTAL // 2:
        raise CoderError(f"alphabet of {n} symbols too large for {TOTAL_BITS}-bit precision")
    q = np.maximum(np.floor(m * TOTAL + 0.5).astype(np.int64), 1)
    delta = TOTAL - int(q.sum())
    center = int(np.clip(round(mu), z_min, z_max)) - z_min
    if delta != 0:
        if delta > 0 or q[center] + delta >= 1:
            q[center] += delta
        else:
            # rare flat-table case: drain the deficit from the largest entries
            need = -delta - (int(q[center]) - 1)
            q[center] = 1
            for k in np.argsort(-q, kind="stable"):
                if need <= 0:
                    break
                if k == center:
                    continue
                take = min(int(q[k]) - 1, need)
                q[k] -= take
                need -= take
            if need > 0:
                raise CoderError("cannot normalize table: alphabet too large")
    cum = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(q, out=cum[1:])
    return QuantizedCdf(z_min, z_max, cum)


def alphabet_range(mu: float, b: float) -> tuple[int, int]:
    """Symbol bounds used by the codec for a given Laplace parameter pair."""
    half = max(ALPHABET_SPAN_SCALE * b, 1.0)
    lo = int(math.floor(mu - half))
    hi = int(math.ceil(mu + half))
    lo = max(lo, ALPHABET_MIN)
    hi = min(hi, ALPHABET_MAX)
    if lo >= hi:  # keep at least two symbols around the mean
        c = int(np.clip(round(mu), ALPHABET_MIN + 1, ALPHABET_MAX - 1))
        lo, hi = c - 1, c + 1
    return lo, hi


class RangeEncoder:
    """Single-use 64-bit carry-less range encoder."""

    def __init__(self):
        self._low = 0
        self._range = _MASK64
        self._out = bytearray()
        self._done = False

    def encode(self, cum_lo: int, cum_hi: int, total: int = TOTAL) -> None:
        if self._done:
            raise CoderError("encoder already finished")
        if not (0 <= cum_lo < cum_hi <= total):
            raise CoderError(f"invalid cumulative interval [{cum_lo}, {cum_hi}) of {total}")
        r = self._range // total
        self._low = (self._low + r * cum_lo) & _MASK64
        self._range = r * (cum_hi - cum_lo)
        self._normalize()

    def encode_symbol(self, z: int, table: QuantizedCdf) -> None:
        if not (table.z_min <= z <= table.z_max):
            raise CoderError(f"symbol {z} outside table range [{table.z_min}, {table.z_max}]")
        k = z - table.z_min
        self.encode(int(table.cum[k]), int(table.cum[k + 1]))

    def _normalize(self) -> None:
        while True:
            if (self._low ^ (self._low + self._range)) & _MASK64 < _TOP:
                pass  # top byte settled, emit below
            elif self._range < _BOT:
                self._range = (-self._low) & (_BOT - 1)
            else:
                break
            self._out.append((self._low >> 56) & 0xFF)
            self._low = (self._low << 8) & _MASK64
            self._range = (self._range << 8) & _MASK64

    def finish(self) -> bytes:
        if not self._done:
            for _ in range(8):
                self._out.append((self._low >> 56) & 0xFF)
                self._low = (self._low << 8) & _MASK64
            self._done = True
        return bytes(self._out)


class RangeDecoder:
    """Mirror of :class:`RangeEncoder`; consumes the byte stream."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._low = 0
        self._range = _MASK64
        self._code = 0
        for _ in range(8):
            self._code = (self._code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos < len(self._data):
            b = self._data[self._pos]
            self._pos += 1
            return b
        raise CoderError(f"range decoder exhausted stream at byte {self._pos}")

    def decode(self, lookup, total: int = TOTAL) -> int:
        """lookup(scaled) -> (value, cum_lo, cum_hi) for the 0..total-1 point."""
        r = self._range // total
        scaled = min((self._code - self._low) & _MASK64, self._range - 1) // r
        scaled = min(int(scaled), total - 1)
        value, cum_lo, cum_hi = lookup(scaled)
        self._low = (self._low + r * cum_lo) & _MASK64
        self._range = r * (cum_hi - cum_lo)
        self._normalize()
        return value

    def decode_symbol(self, table: QuantizedCdf) -> int:
        def lookup(scaled):
            k = int(np.searchsorted(table.cum, scaled, side="right")) - 1
            k = min(max(k, 0), table.num_symbols - 1)
            return table.z_min + k, int(table.cum[k]), int(table.cum[k + 1])

        return self.decode(lookup)

    def _normalize(self) -> None:
        while True:
            if (self._low ^ (self._low + self._range)) & _MASK64 < _TOP:
                pass
            elif self._range < _BOT:
                self._range = (-self._low) & (_BOT - 1)
            else:
                break
            self._low = (self._low << 8) & _MASK64
            self._range = (self._range << 8) & _MASK64
            self._code = ((self._code << 8) | self._next_byte()) & _MASK64


def range_encode(symbols, tables) -> bytes:
    """Encode a symbol sequence; ``tables`` is one table or a per-symbol list."""
    enc = RangeEncoder()
    for i, z in enumerate(symbols):
        t = tables[i] if isinstance(tables, (list, tuple)) else tables
        enc.encode_symbol(int(z), t)
    return enc.finish()


def range_decode(data: bytes, tables, count: int) -> list[int]:
    dec = RangeDecoder(data)
    out = []
    for i in range(count):
        t = tables[i] if isinstance(tables, (list, tuple)) else tables
        out.append(dec.decode_symbol(t))
    return out
