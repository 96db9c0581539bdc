"""Keyed message spreading, Hamming ECC and bit-error accounting.

Spreading places message bit ``i`` at the ``i``-th cell drawn by a partial
Fisher-Yates shuffle of the ``h*w`` cell indices. The shuffle is driven by
SplitMix64 seeded from the XOR-fold of the key, so placements are bit-exact
on every platform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigurationError

MASK64 = (1 << 64) - 1
DEFAULT_KEY_BITS = 128


def _as_bits(bits) -> np.ndarray:
    arr = np.asarray(bits, dtype=np.uint8).ravel()
    if arr.size and arr.max() > 1:
        raise ValueError("bit vectors must contain only 0 and 1")
    return arr


def derive_seed(key) -> int:
    """XOR-fold the key into a 64-bit seed.

    Bits are read most-significant first in consecutive 64-bit words; a
    trailing partial word is padded with zeros on the right.
    """
    bits = _as_bits(key)
    if bits.size < 64:
        raise ConfigurationError(f"stego key must have at least 64 bits, got {bits.size}")
    seed = 0
    for start in range(0, bits.size, 64):
        word = bits[start:start + 64]
        value = 0
        for b in word:
            value = (value << 1) | int(b)
        value <<= 64 - word.size
        seed ^= value
    return seed & MASK64


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


@lru_cache(maxsize=4096)
def _positions(seed: int, n_cells: int, count: int) -> np.ndarray:
    # modulo reduction has a bias below 2**-40 for any realistic image size
    rng = SplitMix64(seed)
    cells = list(range(n_cells))
    for i in range(count):
        j = i + rng.next() % (n_cells - i)
        cells[i], cells[j] = cells[j], cells[i]
    out = np.array(cells[:count], dtype=np.int64)
    out.flags.writeable = False
    return out


def positions(key, height: int, width: int, count: int) -> np.ndarray:
    """Flat (row-major) cell indices holding message bits ``0..count-1``."""
    n_cells = height * width
    if count > n_cells:
        raise CapacityError(f"{count} bits do not fit in a {height}x{width} image")
    if count < 0:
        raise ValueError("message length must be non-negative")
    return _positions(derive_seed(key), n_cells, count)


@dataclass(frozen=True)
class SpreadMessage:
    s: np.ndarray       # (h, w) float, message bits at keyed cells, zero elsewhere
    omega: np.ndarray   # (h, w) uint8 occupancy mask
    order: np.ndarray   # flat cell index of message bit i

    @property
    def length(self) -> int:
        return int(self.order.size)


def spread(message, key, height: int, width: int) -> SpreadMessage:
    bits = _as_bits(message)
    order = positions(key, height, width, bits.size)
    s = np.zeros(height * width, dtype=np.float32)
    omega = np.zeros(height * width, dtype=np.uint8)
    s[order] = bits
    omega[order] = 1
    return SpreadMessage(s.reshape(height, width), omega.reshape(height, width), order)


def despread(s_hat, key, m_len: int) -> np.ndarray:
    """Read back the values sitting at the keyed cells, in message order."""
    s_hat = np.asarray(s_hat)
    height, width = s_hat.shape
    order = positions(key, height, width, m_len)
    return s_hat.reshape(-1)[order]


def harden(values) -> np.ndarray:
    return (np.asarray(values) >= 0.5).astype(np.uint8)


def ber(m, m_prime) -> float:
    a, b = _as_bits(m), _as_bits(m_prime)
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size == 0:
        raise ValueError("BER is undefined for an empty message")
    return float(np.count_nonzero(a != b)) / a.size


@dataclass(frozen=True)
class HammingCode:
    """Systematic binary Hamming code; codewords are data bits then parity bits."""

    n: int
    k: int
    generator: np.ndarray
    parity_check: np.ndarray

    @classmethod
    def build(cls, r: int) -> "HammingCode":
        n = 2**r - 1
        k = n - r
        # columns of P^T: every r-bit pattern with weight >= 2, ascending
        cols = [v for v in range(1, 2**r) if bin(v).count("1") >= 2]
        pt = np.array([[(v >> (r - 1 - i)) & 1 for v in cols] for i in range(r)], dtype=np.uint8)
        generator = np.concatenate([np.eye(k, dtype=np.uint8), pt.T], axis=1)
        parity_check = np.concatenate([pt, np.eye(r, dtype=np.uint8)], axis=1)
        return cls(n, k, generator, parity_check)

    @property
    def name(self) -> str:
        return f"[{self.n},{self.k},3]"

    @property
    def correction_limit(self) -> float:
        """Largest BER that single-error-per-block correction can absorb."""
        return 1.0 / self.n


HAMMING_7_4 = HammingCode.build(3)
HAMMING_15_11 = HammingCode.build(4)
CODES = {"h7": HAMMING_7_4, "h15": HAMMING_15_11}


def get_code(name: str | None) -> HammingCode | None:
    if name in (None, "none"):
        return None
    try:
        return CODES[name]
    except KeyError:
        raise ConfigurationError(f"unknown ECC {name!r}; expected none, h7 or h15") from None


def hamming_encode(bits, code: HammingCode) -> np.ndarray:
    """Encode, zero-padding the data up to a whole number of blocks.

    The caller keeps the original length and hands it to ``hamming_decode``.
    """
    data = _as_bits(bits)
    pad = (-data.size) % code.k
    data = np.concatenate([data, np.zeros(pad, dtype=np.uint8)])
    blocks = data.reshape(-1, code.k)
    return (blocks.astype(np.int64) @ code.generator % 2).astype(np.uint8).ravel()


def hamming_decode(bits, code: HammingCode, length: int | None = None) -> np.ndarray:
    """Syndrome decoding; two or more errors in a block give a wrong codeword."""
    word = _as_bits(bits)
    if word.size % code.n:
        raise ValueError(f"coded length {word.size} is not a multiple of {code.n}")
    blocks = word.reshape(-1, code.n).copy()
    syndromes = blocks.astype(np.int64) @ code.parity_check.T % 2
    weights = 1 << np.arange(code.n - code.k - 1, -1, -1)
    syn_val = syndromes @ weights
    col_val = code.parity_check.T.astype(np.int64) @ weights
    lookup = np.full(code.n + 1, -1, dtype=np.int64)
    lookup[col_val] = np.arange(code.n)
    err_pos = lookup[syn_val]
    rows = np.nonzero(err_pos >= 0)[0]
    blocks[rows, err_pos[rows]] ^= 1
    data = blocks[:, :code.k].ravel()
    return data if length is None else data[:length]


def real_payload(payload_bpp: float, code: HammingCode | None) -> float:
    if code is None:
        return payload_bpp
    return payload_bpp * code.k / code.n


def message_length(payload_bpp: float, height: int, width: int) -> int:
    return int(round(payload_bpp * height * width))


def random_bits(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(0, 2, size=n, dtype=np.uint8)


# file formats

def write_message(path, bits) -> None:
    arr = _as_bits(bits)
    Path(path).write_bytes(struct.pack("<Q", arr.size) + np.packbits(arr).tobytes())


def read_message(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: message file shorter than its 8-byte header")
    (n_bits,) = struct.unpack("<Q", raw[:8])
    payload = np.frombuffer(raw[8:], dtype=np.uint8)
    if payload.size * 8 < n_bits:
        raise ValueError(f"{path}: header announces {n_bits} bits, file holds {payload.size * 8}")
    return np.unpackbits(payload)[:n_bits]


def write_key(path, bits) -> None:
    arr = _as_bits(bits)
    if arr.size % 8:
        raise ValueError("key files store whole bytes")
    Path(path).write_bytes(np.packbits(arr).tobytes())


def read_key(path) -> np.ndarray:
    key = np.unpackbits(np.frombuffer(Path(path).read_bytes(), dtype=np.uint8))
    if key.size < 64:
        raise ConfigurationError(f"{path}: key has {key.size} bits, need at least 64")
    return key
