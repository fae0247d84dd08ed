"""Discretized Laplace probability tables for the range coder.

Scales are snapped to a fixed log-spaced grid before any table is
built, so encoder and decoder derive byte-identical integer tables
from the same level index and float drift cannot desynchronize them.
Each table covers a symmetric symbol range plus one escape symbol for
outliers, which are followed by a 16-bit sign-magnitude raw code.
"""

import math
from bisect import bisect_right
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import BitstreamError, NumericError
from .rangecoder import RangeDecoder, RangeEncoder, TOTAL_FREQ

SIGMA_MIN = 0.11
SIGMA_MAX = 256.0
SIGMA_LEVELS = 64

#: Largest residual magnitude representable (escape raw code is 16-bit
#: sign-magnitude, so magnitudes up to 2**15 - 1).
RESIDUAL_MAX = (1 << 15) - 1

_LOG_MIN = math.log(SIGMA_MIN)
_LOG_MAX = math.log(SIGMA_MAX)


def scale_levels():
    """The grid of coding scales, log-spaced in [SIGMA_MIN, SIGMA_MAX]."""
    return np.exp(np.linspace(_LOG_MIN, _LOG_MAX, SIGMA_LEVELS))


def scale_to_level(sigma):
    """Snap scales to the nearest grid level index. Vectorized."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~np.isfinite(sigma)):
        raise NumericError("non-finite scale")
    t = (np.log(np.clip(sigma, SIGMA_MIN, SIGMA_MAX)) - _LOG_MIN) / (_LOG_MAX - _LOG_MIN)
    idx = np.rint(t * (SIGMA_LEVELS - 1)).astype(np.int64)
    return np.clip(idx, 0, SIGMA_LEVELS - 1)


def laplace_cdf(x, sigma):
    """CDF of the zero-mean Laplace distribution with scale sigma."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0, 0.5 * np.exp(x / sigma), 1.0 - 0.5 * np.exp(-x / sigma))


def laplace_bin_mass(k, sigma):
    """Probability of the integer bin k, i.e. F(k+0.5) - F(k-0.5)."""
    return laplace_cdf(np.asarray(k) + 0.5, sigma) - laplace_cdf(np.asarray(k) - 0.5, sigma)


@dataclass(frozen=True)
class CdfTable:
    """Integer frequency table over symbols [-k_max, k_max] plus escape.

    cum has length n_symbols + 1 with cum[0] == 0 and cum[-1] == 2**16.
    The escape symbol sits at the last index.
    """

    level: int
    symbol_offset: int  # == -k_max; symbol value v maps to index v - symbol_offset
    cum: np.ndarray

    @cached_property
    def cum_list(self):
        # plain ints make the decoder's bisect/arithmetic much faster
        return self.cum.tolist()

    @property
    def k_max(self):
        return -self.symbol_offset

    @property
    def n_symbols(self):
        return len(self.cum) - 1

    @property
    def escape_index(self):
        return self.n_symbols - 1

    def count(self, index):
        return int(self.cum[index + 1] - self.cum[index])

    def index_of(self, value):
        """Table index for an integer symbol value (escape if out of range)."""
        if -self.k_max <= value <= self.k_max:
            return value - self.symbol_offset
        return self.escape_index

    def bits_for(self, value):
        """Ideal code length of a symbol under this table (incl. escape raw bits)."""
        idx = self.index_of(value)
        bits = -math.log2(self.count(idx) / TOTAL_FREQ)
        if idx == self.escape_index:
            bits += 16.0
        return bits


def _table_k_max(sigma):
    # Cover ~9 scales of tail; beyond that the escape path takes over.
    return max(8, int(math.ceil(9.0 * sigma)))


def build_cdf(level):
    """Build the frequency table for one scale level.

    Counts are floor-rounded shares of (2**16 - n_symbols) with one
    count reserved per symbol, so every symbol stays codable and the
    total is exactly 2**16. The leftover goes to the center bin, which
    keeps the table symmetric and non-increasing away from zero.
    """
    level = int(level)
    if not 0 <= level < SIGMA_LEVELS:
        raise ValueError(f"unknown scale level {level}")
    sigma = float(scale_levels()[level])
    k_max = _table_k_max(sigma)
    ks = np.arange(-k_max, k_max + 1)
    mass = laplace_bin_mass(ks, sigma)
    # mirror the positive half onto the negative one: exact symmetry
    mass[:k_max] = mass[k_max + 1 :][::-1]
    escape_mass = max(2.0 * (1.0 - laplace_cdf(k_max + 0.5, sigma)), 0.0)
    probs = np.append(mass, escape_mass)
    probs /= probs.sum()

    n = len(probs)
    budget = TOTAL_FREQ - n
    counts = 1 + np.floor(probs * budget).astype(np.int64)
    leftover = TOTAL_FREQ - int(counts.sum())
    assert leftover >= 0
    counts[k_max] += leftover  # center bin
    cum = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=cum[1:])
    return CdfTable(level=level, symbol_offset=-k_max, cum=cum)


_TABLE_CACHE = {}


def table_for_level(level):
    level = int(level)
    tab = _TABLE_CACHE.get(level)
    if tab is None:
        tab = build_cdf(level)
        _TABLE_CACHE[level] = tab
    return tab


def _check_lengths(symbols, tables):
    if len(tables) != len(symbols):
        raise ValueError(f"{len(symbols)} symbols but {len(tables)} tables")


def encode_into(enc, symbols, tables):
    """Append integer symbols to an open RangeEncoder, one table each."""
    symbols = np.asarray(symbols, dtype=np.int64)
    _check_lengths(symbols, tables)
    if np.any(np.abs(symbols) > RESIDUAL_MAX):
        raise ValueError(f"symbol magnitude beyond {RESIDUAL_MAX}")
    for value, tab in zip(symbols.tolist(), tables):
        cum = tab.cum_list
        idx = tab.index_of(value)
        enc.encode(cum[idx], cum[idx + 1] - cum[idx])
        if idx == tab.escape_index:
            raw = (abs(value) & 0x7FFF) | (0x8000 if value < 0 else 0)
            enc.encode(raw, 1)


def decode_from(dec, tables):
    """Decode len(tables) symbols from an open RangeDecoder."""
    out = np.empty(len(tables), dtype=np.int64)
    for i, tab in enumerate(tables):
        cum = tab.cum_list
        target = dec.decode_target()
        idx = bisect_right(cum, target) - 1
        if idx >= tab.n_symbols:
            raise BitstreamError("decoded symbol index out of table")
        dec.consume(cum[idx], cum[idx + 1] - cum[idx])
        if idx == tab.escape_index:
            raw = dec.decode_target()
            dec.consume(raw, 1)
            mag = raw & 0x7FFF
            out[i] = -mag if raw & 0x8000 else mag
        else:
            out[i] = idx + tab.symbol_offset
    return out


def encode_symbols(symbols, tables):
    """Entropy-code integer symbols, one CdfTable per symbol."""
    enc = RangeEncoder()
    encode_into(enc, symbols, tables)
    return enc.finish()


def decode_symbols(data, tables, count):
    """Inverse of encode_symbols; raises BitstreamError on truncation."""
    if count != len(tables):
        raise ValueError(f"count {count} does not match {len(tables)} tables")
    dec = RangeDecoder(data)
    return decode_from(dec, tables)


def tables_for_levels(levels):
    """Resolve an int array of level ids to a list of shared CdfTables."""
    levels = np.asarray(levels, dtype=np.int64).ravel()
    return [table_for_level(l) for l in levels.tolist()]


def table_bits(symbols, tables):
    """Sum of ideal table code lengths, the tightness reference for tests."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    _check_lengths(symbols, tables)
    return float(sum(t.bits_for(v) for v, t in zip(symbols.tolist(), tables)))
