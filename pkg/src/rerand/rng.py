"""Counter-based random streams keyed by ``(master_seed, replicate_index)``.

Replicate ``r`` of a run always draws from Philox4x64-10 with key
``(master_seed, r)`` and a counter starting at zero.  The numba kernel below
reproduces :class:`numpy.random.Philox` bit for bit, so a replicate generated
inside a compiled loop is identical to one generated through
``numpy.random.Generator`` in plain Python, regardless of which worker or in
which order it was produced.
"""

from __future__ import annotations

import numba as nb
import numpy as np

__all__ = ["replicate_stream", "philox_block", "uniform_at", "first_uniforms", "MASK64"]

MASK64 = (1 << 64) - 1

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


def replicate_stream(master_seed: int, replicate: int) -> np.random.Generator:
    """Return the generator used by replicate ``replicate`` of ``master_seed``."""
    key = np.array([int(master_seed) & MASK64, int(replicate) & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@nb.njit(inline="always")
def _mulhilo(a, b):
    a_lo = a & _LO32
    a_hi = a >> _S32
    b_lo = b & _LO32
    b_hi = b >> _S32
    p0 = a_lo * b_lo
    p1 = a_lo * b_hi
    p2 = a_hi * b_lo
    p3 = a_hi * b_hi
    mid = (p0 >> _S32) + (p1 & _LO32) + (p2 & _LO32)
    hi = p3 + (p1 >> _S32) + (p2 >> _S32) + (mid >> _S32)
    lo = a * b
    return hi, lo


@nb.njit(nogil=True, cache=True)
def philox_block(c0, c1, c2, c3, k0, k1, out):
    """Philox4x64-10 of counter ``(c0..c3)`` under key ``(k0, k1)`` into ``out[:4]``."""
    x0, x1, x2, x3 = c0, c1, c2, c3
    for _ in range(10):
        hi0, lo0 = _mulhilo(_M0, x0)
        hi1, lo1 = _mulhilo(_M1, x2)
        x0 = hi1 ^ x1 ^ k0
        x1 = lo1
        x2 = hi0 ^ x3 ^ k1
        x3 = lo0
        k0 = k0 + _W0
        k1 = k1 + _W1
    out[0] = x0
    out[1] = x1
    out[2] = x2
    out[3] = x3


@nb.njit(nogil=True, cache=True)
def fill_uniforms(k0, k1, out):
    """Fill ``out`` with the first ``len(out)`` doubles of stream ``(k0, k1)``.

    Matches ``Generator(Philox(key=[k0, k1])).random(len(out))``: numpy bumps
    the 256-bit counter before each block and converts each 64-bit word with
    ``(x >> 11) * 2**-53``.
    """
    buf = np.empty(4, dtype=np.uint64)
    n = out.shape[0]
    block = np.uint64(0)
    i = 0
    while i < n:
        block += np.uint64(1)
        philox_block(block, np.uint64(0), np.uint64(0), np.uint64(0), k0, k1, buf)
        for j in range(4):
            if i >= n:
                break
            out[i] = float(buf[j] >> _S11) * _INV53
            i += 1


def uniform_at(master_seed: int, replicate: int, n: int) -> np.ndarray:
    """First ``n`` uniforms of a replicate stream, via the compiled kernel."""
    out = np.empty(n, dtype=np.float64)
    fill_uniforms(np.uint64(int(master_seed) & MASK64), np.uint64(int(replicate) & MASK64), out)
    return out


@nb.njit(nogil=True, cache=True)
def _first_uniforms(k0, start, out):
    buf = np.empty(4, dtype=np.uint64)
    for i in range(out.shape[0]):
        philox_block(np.uint64(1), np.uint64(0), np.uint64(0), np.uint64(0), k0, start + np.uint64(i), buf)
        out[i] = float(buf[0] >> _S11) * _INV53


def first_uniforms(master_seed: int, start: int, count: int) -> np.ndarray:
    """First uniform of each replicate stream ``start .. start+count-1``."""
    out = np.empty(count, dtype=np.float64)
    _first_uniforms(np.uint64(int(master_seed) & MASK64), np.uint64(start), out)
    return out
