"""Range coder over 16-bit quantized cumulative frequency tables.

Classic low/high interval coder with underflow counting; bits are packed
into a byte-aligned payload. Frequency tables must sum to ``1 << PRECISION``
with every symbol getting a nonzero frequency; see ``pmf_to_quantized_cdf``.
"""

from __future__ import annotations

from bisect import bisect_right

import numpy as np

PRECISION = 16

_STATE = 32
_MAX_RANGE = 1 << _STATE
_MASK = _MAX_RANGE - 1
_TOP = _MAX_RANGE >> 1
_SECOND = _TOP >> 1


def pmf_to_quantized_cdf(pmf: np.ndarray, precision: int = PRECISION) -> np.ndarray:
    """Turn a probability vector into an integer CDF summing to 2**precision.

    Every bin is guaranteed a frequency of at least 1 so any symbol in the
    support stays codable.
    """
    pmf = np.clip(np.asarray(pmf, dtype=np.float64), 0.0, None)
    n = pmf.size
    total = 1 << precision
    if n == 0:
        raise ValueError("empty pmf")
    if n > total:
        raise ValueError(f"support of {n} symbols exceeds CDF precision {precision}")
    mass = pmf.sum()
    if not np.isfinite(mass) or mass <= 0:
        pmf = np.ones(n)
        mass = float(n)
    freqs = np.maximum(1, np.rint(pmf / mass * total).astype(np.int64))
    excess = int(freqs.sum()) - total
    if excess < 0:
        freqs[int(np.argmax(pmf))] -= excess
    while excess > 0:
        i = int(np.argmax(freqs))
        take = min(excess, int(freqs[i]) - 1)
        if take <= 0:
            raise RuntimeError("cannot normalize pmf to the requested precision")
        freqs[i] -= take
        excess -= take
    cdf = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(freqs, out=cdf[1:])
    return cdf


class _BitOutput:
    def __init__(self):
        self._bytes = bytearray()
        self._cur = 0
        self._n = 0

    def write(self, bit: int) -> None:
        self._cur = (self._cur << 1) | bit
        self._n += 1
        if self._n == 8:
            self._bytes.append(self._cur)
            self._cur = 0
            self._n = 0

    def finish(self) -> bytes:
        if self._n:
            self._bytes.append(self._cur << (8 - self._n))
        return bytes(self._bytes)


class _BitInput:
    """Bit reader; the end of the payload acts as infinite trailing zeros."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._bit = 0

    def read(self) -> int:
        if self._pos >= len(self._data):
            return 0
        b = (self._data[self._pos] >> (7 - self._bit)) & 1
        self._bit += 1
        if self._bit == 8:
            self._bit = 0
            self._pos += 1
        return b


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._high = _MASK
        self._underflow = 0
        self._out = _BitOutput()

    def encode(self, cum_low: int, cum_high: int, total: int) -> None:
        """Narrow the interval to the symbol's cumulative frequency slice."""
        if not cum_low < cum_high <= total:
            raise ValueError("invalid cumulative frequency interval")
        rng = self._high - self._low + 1
        self._high = self._low + cum_high * rng // total - 1
        self._low = self._low + cum_low * rng // total
        self._renormalize()

    def _renormalize(self) -> None:
        while ((self._low ^ self._high) & _TOP) == 0:
            bit = self._low >> (_STATE - 1)
            self._out.write(bit)
            for _ in range(self._underflow):
                self._out.write(bit ^ 1)
            self._underflow = 0
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
        while (self._low & ~self._high & _SECOND) != 0:
            self._underflow += 1
            self._low = (self._low << 1) & (_MASK >> 1)
            self._high = ((self._high << 1) & (_MASK >> 1)) | _TOP | 1

    def finish(self) -> bytes:
        self._out.write(1)
        return self._out.finish()


class RangeDecoder:
    def __init__(self, data: bytes):
        self._in = _BitInput(data)
        self._low = 0
        self._high = _MASK
        self._code = 0
        for _ in range(_STATE):
            self._code = (self._code << 1) | self._in.read()

    def decode(self, cdf, total: int) -> int:
        """Decode one symbol from its quantized CDF table."""
        rng = self._high - self._low + 1
        offset = self._code - self._low
        value = ((offset + 1) * total - 1) // rng
        s = bisect_right(cdf, value) - 1
        cum_low, cum_high = int(cdf[s]), int(cdf[s + 1])
        self._high = self._low + cum_high * rng // total - 1
        self._low = self._low + cum_low * rng // total
        self._renormalize()
        return s

    def _renormalize(self) -> None:
        while ((self._low ^ self._high) & _TOP) == 0:
            self._code = ((self._code << 1) & _MASK) | self._in.read()
            self._low = (self._low << 1) & _MASK
            self._high = ((self._high << 1) & _MASK) | 1
        while (self._low & ~self._high & _SECOND) != 0:
            self._code = (self._code & _TOP) | ((self._code << 1) & (_MASK >> 1)) | self._in.read()
            self._low = (self._low << 1) & (_MASK >> 1)
            self._high = ((self._high << 1) & (_MASK >> 1)) | _TOP | 1


def encode_symbols(symbols, cdfs) -> bytes:
    """Encode parallel iterables of symbols and their per-symbol CDF tables."""
    enc = RangeEncoder()
    total = 1 << PRECISION
    for s, cdf in zip(symbols, cdfs):
        enc.encode(int(cdf[s]), int(cdf[s + 1]), total)
    return enc.finish()


def decode_symbols(data: bytes, cdfs) -> list[int]:
    """Decode one symbol per CDF table in ``cdfs``."""
    cdf_list = list(cdfs)
    if not cdf_list:
        return []
    dec = RangeDecoder(data)
    total = 1 << PRECISION
    return [dec.decode(cdf, total) for cdf in cdf_list]
