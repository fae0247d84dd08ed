"""Carry-less 32-bit range coder (Subbotin style).

Symbols are coded from integer frequency tables whose total must not
exceed 2**16. The encoder renormalizes byte-wise without carry
propagation: whenever the interval straddles a top-byte boundary and
cannot settle, the range is truncated to the distance to the next
2**16 boundary. This costs a fraction of a bit on rare occasions and
keeps all state in plain 32-bit integers on both sides.
"""

from .errors import BitstreamError

TOP = 1 << 24
BOTTOM = 1 << 16
MASK32 = 0xFFFFFFFF

#: Every frequency table used with this coder must sum to exactly this.
TOTAL_FREQ = 1 << 16


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self._out = bytearray()

    def encode(self, cum_freq, sym_freq, tot_freq=TOTAL_FREQ):
        """Encode one symbol given its cumulative/frequency counts."""
        r = self.range // tot_freq
        self.low = self.low + cum_freq * r
        self.range = r * sym_freq
        self._normalize()

    def _normalize(self):
        low = self.low
        rng = self.range
        out = self._out
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOTTOM:
                rng = -low & (BOTTOM - 1)
            else:
                break
            out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK32
            rng = (rng << 8) & MASK32
        self.low = low
        self.range = rng

    def finish(self):
        """Flush the remaining state and return the coded bytes."""
        low = self.low
        for _ in range(4):
            self._out.append((low >> 24) & 0xFF)
            low = (low << 8) & MASK32
        self.low = low
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data):
        self._data = data
        self._pos = 0
        self.low = 0
        self.range = MASK32
        self.code = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._read_byte()

    def _read_byte(self):
        if self._pos >= len(self._data):
            raise BitstreamError("range coder ran past end of stream")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_target(self, tot_freq=TOTAL_FREQ):
        """Return a value in [0, tot_freq) locating the next symbol's slot."""
        self._r = self.range // tot_freq
        target = (self.code - self.low) // self._r
        if target >= tot_freq:
            raise BitstreamError("corrupted stream: target out of range")
        return target

    def consume(self, cum_freq, sym_freq):
        """Advance past the symbol whose slot was found via decode_target."""
        self.low = self.low + cum_freq * self._r
        self.range = self._r * sym_freq
        self._normalize()

    def _normalize(self):
        low = self.low
        rng = self.range
        code = self.code
        while True:
            if (low ^ (low + rng)) < TOP:
                pass
            elif rng < BOTTOM:
                rng = -low & (BOTTOM - 1)
            else:
                break
            code = ((code << 8) | self._read_byte()) & MASK32
            low = (low << 8) & MASK32
            rng = (rng << 8) & MASK32
        self.low = low
        self.range = rng
        self.code = code
