"""Security (Pe) and fidelity (BER) measurements for trained embedders."""

from __future__ import annotations

import copy
import csv
import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from . import codec
from .agents import AliceBob
from .config import TrainConfig
from .errors import CapacityError, ConfigurationError
from .imaging import write_pgm
from .trainer import TrainSession, fit_steganalyzer, score_images, to_tensor, to_uint8

log = logging.getLogger(__name__)

THREADS_ENV = "TRIAD_STEGO_THREADS"


def apply_thread_cap() -> None:
    cap = os.environ.get(THREADS_ENV)
    if cap:
        torch.set_num_threads(max(1, int(cap)))


class Embedder(Protocol):
    def embed(self, covers: np.ndarray, bits: Sequence[np.ndarray], keys: Sequence[np.ndarray]) -> np.ndarray: ...


class StegoSystem:
    """Inference wrapper around a trained Alice/Bob pair.

    Emitted stegos are always 8-bit integer images: the discretizers are on
    regardless of the training phase the checkpoint stopped in.
    """

    def __init__(self, model: AliceBob, chunk: int = 32):
        self.model = model
        self.chunk = chunk

    @classmethod
    def from_checkpoint(cls, path) -> "StegoSystem":
        return cls(TrainSession.load(path).model)

    @property
    def arch(self) -> int:
        return self.model.arch

    def _maps(self, covers, bits, keys) -> torch.Tensor:
        h, w = covers.shape[1:]
        return torch.from_numpy(np.stack([codec.spread(b, k, h, w).s for b, k in zip(bits, keys)])).unsqueeze(1)

    def embed(self, covers: np.ndarray, bits, keys) -> np.ndarray:
        covers = np.asarray(covers, dtype=np.uint8)
        if covers.ndim == 2:
            return self.embed(covers[None], [bits], [keys])[0]
        out = []
        self.model.eval()
        saved = self.model.discretize
        self.model.discretize = True
        try:
            with torch.no_grad():
                for i in range(0, len(covers), self.chunk):
                    sl = slice(i, i + self.chunk)
                    y, _ = self.model.embed(to_tensor(covers[sl]), self._maps(covers[sl], bits[sl], keys[sl]))
                    out.append(to_uint8(y))
        finally:
            self.model.discretize = saved
        return np.concatenate(out)

    def extract_maps(self, stegos: np.ndarray) -> np.ndarray:
        stegos = np.asarray(stegos, dtype=np.uint8)
        self.model.eval()
        maps = []
        with torch.no_grad():
            for i in range(0, len(stegos), self.chunk):
                maps.append(self.model.extract(to_tensor(stegos[i:i + self.chunk])).squeeze(1).numpy())
        return np.concatenate(maps)

    def extract(self, stegos: np.ndarray, keys, m_len: int) -> list[np.ndarray]:
        stegos = np.asarray(stegos, dtype=np.uint8)
        if stegos.ndim == 2:
            return self.extract(stegos[None], [keys], m_len)
        return [codec.harden(codec.despread(mp, k, m_len)) for mp, k in zip(self.extract_maps(stegos), keys)]


class IdentityEmbedder:
    """Emits the cover unchanged; the null experiment for steganalysis."""

    def embed(self, covers, bits, keys):
        return np.array(covers, dtype=np.uint8, copy=True)


@dataclass
class SteganalysisReport:
    false_alarm_rate: float
    missed_detection_rate: float
    pe: float
    threshold: float = 0.5
    dataset: str = ""
    steganalyzer: str = "eve"
    n_covers: int = 0
    n_stegos: int = 0


def compute_pe(labels, scores, threshold: float = 0.5, dataset: str = "", steganalyzer: str = "eve") -> SteganalysisReport:
    """Pe = (false-alarm rate + missed-detection rate) / 2; a score at the threshold counts as stego."""
    labels = np.asarray(labels).astype(int)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError("labels and scores differ in length")
    covers, stegos = scores[labels == 0], scores[labels == 1]
    if covers.size == 0 or stegos.size == 0:
        raise ValueError("Pe needs both cover and stego samples")
    fa = float(np.mean(covers >= threshold))
    md = float(np.mean(stegos < threshold))
    return SteganalysisReport(fa, md, (fa + md) / 2, threshold, dataset, steganalyzer, covers.size, stegos.size)


@dataclass
class ExtractionReport:
    payload: float
    real_payload: float
    ecc: str
    ber: float            # on the embedded (coded) bits
    ber_decoded: float    # after ECC decoding; equals ``ber`` without ECC
    n_images: int

    @property
    def applicable(self) -> bool:
        return not np.isnan(self.ber)


def _random_messages(rng, n, m_len, key_bits):
    bits = [codec.random_bits(rng, m_len) for _ in range(n)]
    keys = [codec.random_bits(rng, key_bits) for _ in range(n)]
    return bits, keys


def evaluate_extraction(system: StegoSystem, covers: np.ndarray, payload: float,
                        ecc: codec.HammingCode | str | None = None, seed: int = 0,
                        key_bits: int = 128) -> ExtractionReport:
    """Embed a fresh random message with a fresh key per cover, extract, and score."""
    if payload > 1:
        raise CapacityError(f"payload {payload} bpp exceeds 1 bit per pixel")
    code = codec.get_code(ecc) if isinstance(ecc, str) or ecc is None else ecc
    ecc_name = "none" if code is None else code.name
    covers = np.asarray(covers, dtype=np.uint8)
    h, w = covers.shape[1:]
    slots = codec.message_length(payload, h, w)
    rp = codec.real_payload(payload, code)
    if code is not None:
        n_data = (slots // code.n) * code.k
        m_len = (slots // code.n) * code.n
    else:
        n_data = m_len = slots
    if n_data == 0:
        return ExtractionReport(payload, rp, ecc_name, float("nan"), float("nan"), len(covers))
    rng = np.random.default_rng(seed)
    data, keys = _random_messages(rng, len(covers), n_data, key_bits)
    sent = [codec.hamming_encode(d, code) for d in data] if code is not None else data
    stegos = system.embed(covers, sent, keys)
    got = system.extract(stegos, keys, m_len)
    raw = float(np.mean([codec.ber(a, b) for a, b in zip(sent, got)]))
    if code is None:
        return ExtractionReport(payload, rp, ecc_name, raw, raw, len(covers))
    decoded = [codec.hamming_decode(g, code, n_data) for g in got]
    dec = float(np.mean([codec.ber(a, b) for a, b in zip(data, decoded)]))
    return ExtractionReport(payload, rp, ecc_name, raw, dec, len(covers))


def _split_pairs(n: int, seed: int, fractions=(0.6, 0.2, 0.2)):
    order = np.random.default_rng(seed).permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return order[:a], order[a:b], order[b:]


def steganalysis_experiment(embedder: Embedder, covers: np.ndarray, cfg: TrainConfig, payload: float,
                            seed: int = 0, cover_ids: Sequence[str] | None = None,
                            excluded_ids: Sequence[str] | None = None, epochs: int | None = None,
                            patience: int | None = None, dataset: str = "") -> SteganalysisReport:
    """Train a fresh steganalyzer on held-out cover/stego pairs and report Pe on a test split.

    Pairs are split 60/20/20 into train/validation/test, so a cover and its
    stego always land in the same split. ``excluded_ids`` lists images the
    embedder was trained on; any overlap with ``cover_ids`` is refused.
    """
    covers = np.asarray(covers, dtype=np.uint8)
    if cover_ids is not None and excluded_ids is not None:
        overlap = set(cover_ids) & set(excluded_ids)
        if overlap:
            raise ConfigurationError(
                f"{len(overlap)} evaluation covers were used to train the embedder, e.g. {sorted(overlap)[0]}")
    h, w = covers.shape[1:]
    rng = np.random.default_rng(seed)
    bits, keys = _random_messages(rng, len(covers), codec.message_length(payload, h, w), cfg.key_bits)
    stegos = embedder.embed(covers, bits, keys)
    tr, va, te = _split_pairs(len(covers), seed + 1)
    if min(len(tr), len(va), len(te)) == 0:
        raise ConfigurationError(f"{len(covers)} covers are too few for a train/validation/test split")
    fit = fit_steganalyzer(covers[tr], stegos[tr], covers[va], stegos[va], cfg,
                           epochs=epochs, patience=patience, seed=seed, abort_stalled=False)
    scores = np.concatenate([score_images(fit.eve, covers[te]), score_images(fit.eve, stegos[te])])
    labels = np.concatenate([np.zeros(len(te)), np.ones(len(te))])
    return compute_pe(labels, scores, dataset=dataset, steganalyzer="fresh-eve")


def mod_map(cover: np.ndarray, stego: np.ndarray) -> np.ndarray:
    cover, stego = np.asarray(cover), np.asarray(stego)
    if cover.shape != stego.shape:
        raise ValueError(f"cover {cover.shape} and stego {stego.shape} differ in shape")
    diff = np.abs(cover.astype(np.int16) - stego.astype(np.int16))
    return np.where(diff >= 1, 255, 0).astype(np.uint8)


def export_mod_map(cover: np.ndarray, stego: np.ndarray, path) -> np.ndarray:
    """Write the black (unchanged) / white (changed) map as a PGM and return it."""
    m = mod_map(cover, stego)
    write_pgm(m, path)
    return m


@dataclass
class KeyReport:
    diff_fraction: float
    change_rate_1: float
    change_rate_2: float
    diff_image: np.ndarray = dataclasses.field(repr=False)


def key_sensitivity(system: Embedder, cover: np.ndarray, message, key1, key2, diff_path=None) -> KeyReport:
    """Embed the same message in the same cover under two keys and compare the stegos."""
    if np.array_equal(np.asarray(key1), np.asarray(key2)):
        log.warning("key_sensitivity called with identical keys; the difference is trivially empty")
    cover = np.asarray(cover, dtype=np.uint8)
    y1, y2 = system.embed(np.stack([cover, cover]), [message, message], [key1, key2])
    diff = mod_map(y1, y2)
    if diff_path is not None:
        write_pgm(diff, diff_path)
    return KeyReport(float(np.mean(diff > 0)), float(np.mean(y1 != cover)), float(np.mean(y2 != cover)), diff)


@dataclass
class SweepRow:
    payload: float
    real_payload: float
    ber: float
    pe: float
    failed: bool


def payload_sweep(system: StegoSystem, covers: np.ndarray, payloads: Sequence[float], cfg: TrainConfig,
                  ecc: str = "h7", seed: int = 0, steganalysis: bool = True,
                  epochs: int | None = None) -> list[SweepRow]:
    """Extraction and security at several payloads for one checkpoint.

    A BER above the code's correction limit (1/n) marks the payload as an
    extraction failure, and its Pe is reported as NaN.
    """
    code = codec.get_code(ecc)
    limit = code.correction_limit if code is not None else 0.0
    rows = []
    for p in payloads:
        rep = evaluate_extraction(system, covers, p, None, seed, cfg.key_bits)
        failed = not rep.applicable or rep.ber > limit
        pe = float("nan")
        if steganalysis and not failed:
            pe = steganalysis_experiment(system, covers, cfg, p, seed=seed, epochs=epochs).pe
        rows.append(SweepRow(p, codec.real_payload(p, code), rep.ber, pe, failed))
    return rows


@dataclass
class BetaRow:
    beta: float
    ber: float
    pe: float
    change_rate: float


def beta_sweep(cfg: TrainConfig, train_covers: np.ndarray, eval_covers: np.ndarray, betas: Sequence[float],
               seed: int = 0, eve=None, steganalysis_epochs: int | None = None) -> list[BetaRow]:
    """Train one architecture-2/3 model per beta and measure BER, Pe and change rate."""
    rows = []
    for beta in betas:
        run_cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, beta=beta))
        session = TrainSession(run_cfg, train_covers, eve=_clone(eve))
        session.run()
        system = StegoSystem(session.model)
        rep = evaluate_extraction(system, eval_covers, cfg.payload, None, seed, cfg.key_bits)
        pe = steganalysis_experiment(system, eval_covers, cfg, cfg.payload, seed=seed,
                                     epochs=steganalysis_epochs).pe
        rng = np.random.default_rng(seed)
        h, w = eval_covers.shape[1:]
        bits, keys = _random_messages(rng, len(eval_covers), codec.message_length(cfg.payload, h, w), cfg.key_bits)
        change = float(np.mean(system.embed(eval_covers, bits, keys) != eval_covers))
        rows.append(BetaRow(beta, rep.ber, pe, change))
    return rows


def _clone(module):
    return None if module is None else copy.deepcopy(module)


def write_rows_csv(rows: Sequence, path) -> None:
    rows = list(rows)
    if not rows:
        Path(path).write_text("")
        return
    fields = [f.name for f in dataclasses.fields(rows[0]) if f.name != "diff_image"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: getattr(r, k) for k in fields})


def format_rows(rows: Sequence) -> str:
    rows = list(rows)
    if not rows:
        return "(no rows)\n"
    fields = [f.name for f in dataclasses.fields(rows[0]) if f.name != "diff_image"]

    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    table = [fields] + [[fmt(getattr(r, k)) for k in fields] for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(fields))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in table) + "\n"
