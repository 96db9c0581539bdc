"""8-bit grayscale images: PGM I/O, domain conversion, datasets and batching."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve

from . import codec
from .errors import ConfigurationError, CorruptFileError, UnsupportedFormatError


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM with maxval 255 into an (h, w) uint8 array."""
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(raw, pos)
        if m is None:
            raise CorruptFileError(f"{path}: truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
        if tokens[0] != b"P5":
            raise UnsupportedFormatError(
                f"{path}: unsupported image format {tokens[0].decode(errors='replace')!r}, need binary P5")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise CorruptFileError(f"{path}: malformed PGM header {tokens!r}") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: P5 with maxval {maxval}, only 255 is supported")
    pos += 1  # single whitespace byte after maxval
    data = raw[pos:pos + width * height]
    if len(data) != width * height:
        raise CorruptFileError(f"{path}: expected {width * height} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(image, path) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255 or not np.all(np.equal(np.mod(img, 1), 0)):
            raise ValueError("pixel values must be integers in 0..255")
        img = img.astype(np.uint8)
    height, width = img.shape
    Path(path).write_bytes(f"P5\n{width} {height}\n255\n".encode() + img.tobytes())


def normalize(image) -> np.ndarray:
    return np.asarray(image, dtype=np.float32) / 255.0


def round_half_away(values):
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def denormalize_round(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if np.isnan(v).any():
        raise ValueError("cannot discretize NaN pixel values")
    return np.clip(round_half_away(255.0 * v), 0, 255).astype(np.uint8)


@dataclass
class DatasetSplit:
    train: list[str] = field(default_factory=list)
    val: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.check_disjoint()

    def check_disjoint(self) -> None:
        sections = {"train": set(self.train), "val": set(self.val), "test": set(self.test)}
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            overlap = sections[a] & sections[b]
            if overlap:
                raise ConfigurationError(
                    f"split sections {a} and {b} share {len(overlap)} images, e.g. {sorted(overlap)[0]}")

    @classmethod
    def random(cls, ids, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> "DatasetSplit":
        ids = sorted(ids)
        order = np.random.default_rng(seed).permutation(len(ids))
        n_train = int(round(fractions[0] * len(ids)))
        n_val = int(round(fractions[1] * len(ids)))
        pick = [ids[i] for i in order]
        return cls(pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:], seed)

    def write(self, path) -> None:
        lines = [f"# seed {self.seed}"]
        for name in ("train", "val", "test"):
            lines.append(f"[{name}]")
            lines.extend(getattr(self, name))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "DatasetSplit":
        sections: dict[str, list[str]] = {"train": [], "val": [], "test": []}
        current = None
        seed = 0
        for line in Path(path).read_text().splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                m = re.match(r"#\s*seed\s+(\d+)", line)
                if m:
                    seed = int(m.group(1))
                continue
            m = re.fullmatch(r"\[(train|val|test)\]", line)
            if m:
                current = m.group(1)
            elif current is None:
                raise ConfigurationError(f"{path}: identifier {line!r} before any section header")
            else:
                sections[current].append(line)
        return cls(sections["train"], sections["val"], sections["test"], seed)


def load_directory(directory) -> dict[str, np.ndarray]:
    """All ``*.pgm`` files of a directory, keyed by file stem."""
    files = sorted(Path(directory).glob("*.pgm"))
    if not files:
        raise ConfigurationError(f"no .pgm images in {directory}")
    images = {f.stem: read_pgm(f) for f in files}
    shapes = {img.shape for img in images.values()}
    if len(shapes) != 1:
        raise ConfigurationError(f"{directory}: images have mixed sizes {sorted(shapes)}")
    return images


def make_batches(ids, batch_size: int, epoch_seed: int) -> list[list]:
    """One epoch of batches in a seeded order; the short tail batch is dropped."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    ids = list(ids)
    if not ids:
        raise ConfigurationError("cannot batch an empty split")
    order = np.random.default_rng(epoch_seed).permutation(len(ids))
    n_full = len(ids) // batch_size
    return [[ids[i] for i in order[b * batch_size:(b + 1) * batch_size]] for b in range(n_full)]


_BINOMIAL5 = np.outer([1, 4, 6, 4, 1], [1, 4, 6, 4, 1]) / 256.0


def synth_textures(count: int, width: int, height: int, seed: int) -> np.ndarray:
    """Blurred white-noise textures rescaled to the full 0..255 range.

    Each image gets 1 to 4 passes of a 5x5 binomial blur, so the set mixes
    busy and smooth content.
    """
    if width < 16 or height < 16:
        raise ConfigurationError("synthetic textures need w, h >= 16")
    rng = np.random.default_rng(seed)
    out = np.empty((count, height, width), dtype=np.uint8)
    for i in range(count):
        img = rng.standard_normal((height, width))
        for _ in range(int(rng.integers(1, 5))):
            img = convolve(img, _BINOMIAL5, mode="reflect")
        img = (img - img.min()) / (img.max() - img.min())
        out[i] = round_half_away(255.0 * img).astype(np.uint8)
    return out


def baseline_pm1_embed(cover, payload_bpp: float, key) -> np.ndarray:
    """Non-adaptive +-1 embedding at keyed cells; used to pre-train the steganalyzer.

    Saturated pixels are pushed inward instead of clipped, so every selected
    cell changes by exactly one grey level.
    """
    if not 0 <= payload_bpp <= 1:
        raise ConfigurationError(f"payload must be in [0, 1], got {payload_bpp}")
    cover = np.asarray(cover, dtype=np.uint8)
    height, width = cover.shape
    cells = codec.positions(key, height, width, codec.message_length(payload_bpp, height, width))
    rng = np.random.default_rng(codec.derive_seed(key) ^ 0x5EED)
    signs = rng.choice(np.array([-1, 1], dtype=np.int16), size=cells.size)
    flat = cover.astype(np.int16).ravel()
    vals = flat[cells]
    signs[(vals == 0) & (signs < 0)] = 1
    signs[(vals == 255) & (signs > 0)] = -1
    flat[cells] = vals + signs
    return flat.reshape(height, width).astype(np.uint8)
