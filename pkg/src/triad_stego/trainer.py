"""Alternating 3-player training: Alice+Bob for ``it1`` steps, then Eve for ``it2``.

One *loop* is one pass of the outer while-loop. Inside team 1 a single
forward pass feeds two updates: Bob on ``L_Bob``, then Alice on ``L_Alice``
(Eve frozen, inference-mode BN). Inside team 2 Eve learns on covers against
the stegos Alice currently produces (Alice and Bob frozen).
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, codec, losses
from .agents import AliceBob, Eve
from .config import TrainConfig
from .errors import CheckpointError, ConfigurationError, NonFiniteError, StegoError
from .imaging import baseline_pm1_embed, make_batches
from .nn import adam_step, backprop, make_adam

log = logging.getLogger(__name__)

LOG_FIELDS = ("loop", "l_alice", "l_bob", "l_eve", "ber", "change_rate", "phase")


class TrainingAborted(StegoError, RuntimeError):
    pass


class BatchStream:
    """Endless seeded epochs over a fixed list of indices; resumable from (epoch, cursor)."""

    def __init__(self, n_items: int, batch_size: int, seed: int):
        if n_items < batch_size:
            raise ConfigurationError(f"{n_items} images cannot fill a batch of {batch_size}")
        self.n_items = n_items
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self.cursor = 0
        self._batches = make_batches(range(n_items), batch_size, seed)

    def next(self) -> list[int]:
        if self.cursor >= len(self._batches):
            self.epoch += 1
            self.cursor = 0
            self._batches = make_batches(range(self.n_items), self.batch_size, self.seed + self.epoch)
        batch = self._batches[self.cursor]
        self.cursor += 1
        return batch

    def state(self) -> dict:
        return {"epoch": self.epoch, "cursor": self.cursor}

    def restore(self, state: dict) -> None:
        self.epoch = state["epoch"]
        self.cursor = state["cursor"]
        self._batches = make_batches(range(self.n_items), self.batch_size, self.seed + self.epoch)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(B, H, W) uint8 -> (B, 1, H, W) float32 normalized."""
    return torch.from_numpy(np.asarray(images, dtype=np.float32) / 255.0).unsqueeze(1)


def to_uint8(batch: torch.Tensor) -> np.ndarray:
    v = batch.detach().squeeze(1).numpy().astype(np.float64)
    return np.clip(np.sign(v) * np.floor(np.abs(255.0 * v) + 0.5), 0, 255).astype(np.uint8)


@dataclass
class MessageBatch:
    bits: list[np.ndarray]
    keys: list[np.ndarray]
    s: torch.Tensor        # (B, 1, H, W)
    omega: torch.Tensor    # (B, 1, H, W)


def make_message_batch(rng: np.random.Generator, batch: int, height: int, width: int,
                       payload: float, key_bits: int = 128, bits=None, keys=None) -> MessageBatch:
    m_len = codec.message_length(payload, height, width)
    if bits is None:
        bits = [codec.random_bits(rng, m_len) for _ in range(batch)]
    if keys is None:
        keys = [codec.random_bits(rng, key_bits) for _ in range(batch)]
    spreads = [codec.spread(b, k, height, width) for b, k in zip(bits, keys)]
    s = torch.from_numpy(np.stack([sp.s for sp in spreads])).unsqueeze(1)
    omega = torch.from_numpy(np.stack([sp.omega for sp in spreads]).astype(np.float32)).unsqueeze(1)
    return MessageBatch(list(bits), list(keys), s, omega)


def extract_bits(s_hat: torch.Tensor, keys, m_len: int) -> list[np.ndarray]:
    maps = s_hat.detach().squeeze(1).numpy()
    return [codec.harden(codec.despread(mp, k, m_len)) for mp, k in zip(maps, keys)]


def _moving_average_converged(values: list[float], window: int, tol: float) -> bool:
    if len(values) < 2 * window:
        return False
    recent = float(np.mean(values[-window:]))
    before = float(np.mean(values[-2 * window:-window]))
    return abs(recent - before) <= tol * max(abs(before), 1e-8)


class TrainSession:
    """Owns all three agents, their optimizers and the data/message RNG state."""

    def __init__(self, config: TrainConfig, covers: np.ndarray, eve: Eve | None = None,
                 val_covers: np.ndarray | None = None, cover_ids: list[str] | None = None):
        covers = np.asarray(covers, dtype=np.uint8)
        if covers.ndim != 3 or covers.shape[0] == 0:
            raise ConfigurationError("training needs a non-empty (N, H, W) stack of covers")
        self.config = config
        self.covers = covers
        self.cover_ids = list(cover_ids or [])
        self.height, self.width = covers.shape[1:]
        torch.manual_seed(config.seed_init)
        self.model = AliceBob(config.arch, config.agents)
        self.eve = eve if eve is not None else Eve(config.agents, (self.height, self.width))
        self.opt_alice = make_adam(self.model.alice.parameters(), lr=config.lr_alice)
        self.opt_bob = make_adam(self.model.bob.parameters(), lr=config.lr_bob)
        self.opt_eve = make_adam(self.eve.parameters(), lr=config.lr_eve)
        self.rng = np.random.default_rng([config.seed_messages, config.seed_keys])
        self.team1_stream = BatchStream(len(covers), config.batch_size, config.seed_data)
        self.team2_stream = BatchStream(len(covers), config.batch_size, config.seed_data + 7919)
        self.loop = 0
        self.fine_tune_left: int | None = None
        self.log: list[dict] = []
        val = covers[:config.val_images] if val_covers is None else np.asarray(val_covers, dtype=np.uint8)
        self.val_covers = val
        self.val_messages = make_message_batch(np.random.default_rng(config.seed_messages + 104729), len(val),
                                               self.height, self.width, max(config.payload, 1e-9),
                                               config.key_bits)

    # phases

    @property
    def discretizing(self) -> bool:
        return self.model.discretize

    def enable_discretization(self) -> None:
        if self.model.discretize:
            log.warning("discretization is already active; ignoring")
            return
        self.model.discretize = True
        self.fine_tune_left = self.config.fine_tune_loops
        if self.config.fine_tune_lr is not None:
            for opt in (self.opt_alice, self.opt_bob, self.opt_eve):
                for group in opt.param_groups:
                    group["lr"] = self.config.fine_tune_lr
        log.info("loop %d: discretization enabled for %d loops", self.loop, self.fine_tune_left)

    def _maybe_start_discretization(self) -> None:
        start = self.config.discretization_start
        if self.model.discretize or start == "never":
            return
        if start == "auto":
            w, tol = self.config.convergence_window, self.config.convergence_tol
            if all(_moving_average_converged([r[k] for r in self.log], w, tol) for k in ("l_alice", "l_bob", "l_eve")):
                self.enable_discretization()
        elif self.loop >= int(start):
            self.enable_discretization()

    def finished(self) -> bool:
        if self.loop >= self.config.max_iter:
            return True
        return self.fine_tune_left is not None and self.fine_tune_left <= 0

    # one outer loop

    def _team1_losses(self, x: torch.Tensor, msg: MessageBatch):
        cfg = self.config
        y, n = self.model.embed(x, msg.s)
        s_hat, x_prime, _ = self.model.extract(y, return_parts=True)
        l_msg = losses.bob_loss_spread(msg.s, s_hat, msg.omega)
        if cfg.arch == 3:
            l_bob = losses.bob_loss_v3(losses.pixel_dist_mse(x_prime, x), l_msg)
        else:
            l_bob = l_msg
        l_eve = losses.eve_loss(torch.ones(x.shape[0]), self.eve(y))
        if cfg.arch == 1:
            l_alice = losses.alice_loss_v1(losses.pixel_dist_mse(x, y), l_bob, l_eve, cfg.weights)
        else:
            l_alice = losses.alice_loss_v23(losses.modmap_dist(n), l_bob, l_eve, cfg.weights)
        return l_alice, l_bob, l_eve

    def team1_step(self) -> tuple[float, float, float]:
        cfg = self.config
        idx = self.team1_stream.next()
        x = to_tensor(self.covers[idx])
        msg = make_message_batch(self.rng, len(idx), self.height, self.width, cfg.payload, cfg.key_bits)
        self.model.train()
        self.eve.eval()
        l_alice, l_bob, l_eve = self._team1_losses(x, msg)
        backprop(l_bob, self.model.bob.named_parameters(), retain_graph=True)
        backprop(l_alice, self.model.alice.named_parameters())
        adam_step(self.opt_bob)
        adam_step(self.opt_alice)
        return l_alice.item(), l_bob.item(), l_eve.item()

    def make_stegos(self, x: torch.Tensor, msg: MessageBatch) -> torch.Tensor:
        self.model.eval()
        with torch.no_grad():
            y, _ = self.model.embed(x, msg.s)
        return y

    def team2_step(self) -> float:
        cfg = self.config
        idx = self.team2_stream.next()
        x = to_tensor(self.covers[idx])
        msg = make_message_batch(self.rng, len(idx), self.height, self.width, cfg.payload, cfg.key_bits)
        y = self.make_stegos(x, msg)
        self.eve.train()
        z = torch.cat([x, y])
        labels = torch.cat([torch.zeros(len(idx)), torch.ones(len(idx))])
        loss = losses.eve_loss(labels, self.eve(z))
        backprop(loss, self.eve.named_parameters())
        adam_step(self.opt_eve)
        return loss.item()

    def validate(self) -> tuple[float, float]:
        """BER and change rate on the fixed validation covers."""
        x = to_tensor(self.val_covers)
        msg = self.val_messages
        self.model.eval()
        with torch.no_grad():
            y, n = self.model.embed(x, msg.s)
            s_hat = self.model.extract(y)
        m_len = msg.bits[0].size
        if m_len == 0:
            ber = float("nan")
        else:
            got = extract_bits(s_hat, msg.keys, m_len)
            ber = float(np.mean([codec.ber(a, b) for a, b in zip(msg.bits, got)]))
        if n is None:
            change = float(np.mean(to_uint8(y) != self.val_covers))
        else:
            change = float((torch.clamp(torch.sign(n) * torch.floor(n.abs() + 0.5), -1, 1) != 0).float().mean())
        return ber, change

    def step_loop(self) -> dict:
        cfg = self.config
        t1 = [self.team1_step() for _ in range(cfg.it1)]
        t2 = [self.team2_step() for _ in range(cfg.it2)]
        l_alice, l_bob, l_eve_adv = (float(np.mean(c)) for c in zip(*t1))
        ber, change = self.validate()
        self.loop += 1
        record = {
            "loop": self.loop,
            "l_alice": l_alice,
            "l_bob": l_bob,
            "l_eve": float(np.mean(t2)) if t2 else l_eve_adv,
            "ber": ber,
            "change_rate": change,
            "phase": "discrete" if self.discretizing else "real",
        }
        if not all(np.isfinite(record[k]) for k in ("l_alice", "l_bob", "l_eve")):
            raise NonFiniteError(f"non-finite loss at loop {self.loop}: {record}")
        self.log.append(record)
        if self.fine_tune_left is not None:
            self.fine_tune_left -= 1
        self._maybe_start_discretization()
        return record

    def run(self, loops: int | None = None, checkpoint_path=None, log_every: int = 0) -> list[dict]:
        """Run until finished, or for at most ``loops`` more loops.

        On a non-finite loss the last good state is written to
        ``checkpoint_path`` (if given) before re-raising.
        """
        done = 0
        while not self.finished() and (loops is None or done < loops):
            snapshot = self.state_bytes() if checkpoint_path else None
            try:
                record = self.step_loop()
            except NonFiniteError:
                if snapshot is not None:
                    Path(checkpoint_path).write_bytes(snapshot)
                    log.error("non-finite loss; last good state written to %s", checkpoint_path)
                raise
            done += 1
            if log_every and self.loop % log_every == 0:
                log.info("loop %(loop)d  L_A %(l_alice).4f  L_B %(l_bob).4f  L_E %(l_eve).4f  "
                         "BER %(ber).3f  rate %(change_rate).3f  %(phase)s", record)
        return self.log

    # persistence

    def _meta_and_blobs(self) -> tuple[dict, dict]:
        blobs = {}
        blobs.update(checkpoint.module_blobs("alice", self.model.alice))
        blobs.update(checkpoint.module_blobs("bob", self.model.bob))
        blobs.update(checkpoint.module_blobs("eve", self.eve))
        blobs["val_covers"] = self.val_covers
        meta = {"config": self.config.to_dict(), "loop": self.loop, "discretize": self.model.discretize,
                "fine_tune_left": self.fine_tune_left, "log": self.log,
                "rng": self.rng.bit_generator.state,
                "streams": [self.team1_stream.state(), self.team2_stream.state()],
                "image_size": [self.height, self.width], "cover_ids": self.cover_ids, "optimizers": {}}
        for name, opt in (("opt_alice", self.opt_alice), ("opt_bob", self.opt_bob), ("opt_eve", self.opt_eve)):
            ob, om = checkpoint.optimizer_blobs(name, opt)
            blobs.update(ob)
            meta["optimizers"][name] = om
        return meta, blobs

    def state_bytes(self) -> bytes:
        meta, blobs = self._meta_and_blobs()
        return checkpoint.dumps(self.config.arch, meta, blobs)

    def save(self, path) -> None:
        Path(path).write_bytes(self.state_bytes())

    @classmethod
    def load(cls, path, covers: np.ndarray | None = None, val_covers=None,
             cover_ids: list[str] | None = None) -> "TrainSession":
        """Restore a session; ``covers`` must be the same training stack to resume training."""
        arch, meta, blobs = checkpoint.load(path)
        if "config" not in meta:
            raise CheckpointError(f"{path} holds no training session")
        config = TrainConfig.from_dict(meta["config"])
        if covers is None:
            h, w = meta["image_size"]
            covers = np.zeros((max(config.batch_size, config.val_images), h, w), dtype=np.uint8)
        if val_covers is None and "val_covers" in blobs:
            val_covers = blobs["val_covers"]
        session = cls(config, covers, val_covers=val_covers, cover_ids=meta.get("cover_ids", []))
        checkpoint.load_module("alice", session.model.alice, blobs)
        checkpoint.load_module("bob", session.model.bob, blobs)
        checkpoint.load_module("eve", session.eve, blobs)
        for name in ("opt_alice", "opt_bob", "opt_eve"):
            checkpoint.load_optimizer(name, getattr(session, name), meta["optimizers"][name], blobs)
        session.loop = meta["loop"]
        session.model.discretize = meta["discretize"]
        session.fine_tune_left = meta["fine_tune_left"]
        session.log = meta["log"]
        session.rng.bit_generator.state = meta["rng"]
        session.team1_stream.restore(meta["streams"][0])
        session.team2_stream.restore(meta["streams"][1])
        return session


def save_checkpoint(session: TrainSession, path) -> None:
    session.save(path)


def load_checkpoint(path, covers=None) -> TrainSession:
    return TrainSession.load(path, covers)


def write_log_csv(records: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for r in records:
            writer.writerow({k: r[k] for k in LOG_FIELDS})


# steganalyzer training (Eve pre-training and fresh steganalyzers for evaluation)

@dataclass
class FitResult:
    eve: Eve
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1


def accuracy(eve: Eve, covers: np.ndarray, stegos: np.ndarray, batch: int = 64) -> float:
    scores_c = score_images(eve, covers, batch)
    scores_s = score_images(eve, stegos, batch)
    return float((np.sum(scores_c < 0.5) + np.sum(scores_s >= 0.5)) / (len(scores_c) + len(scores_s)))


def score_images(eve: Eve, images: np.ndarray, batch: int = 64) -> np.ndarray:
    eve.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch):
            out.append(eve(to_tensor(images[i:i + batch])).numpy())
    return np.concatenate(out) if out else np.empty(0)


def fit_steganalyzer(train_covers: np.ndarray, train_stegos: np.ndarray, val_covers: np.ndarray,
                     val_stegos: np.ndarray, cfg: TrainConfig, epochs: int | None = None,
                     patience: int | None = None, seed: int = 0, eve: Eve | None = None,
                     batch_pairs: int | None = None, abort_stalled: bool = True) -> FitResult:
    """Train a steganalyzer on cover/stego pairs, keeping the best validation epoch.

    Once validation accuracy has risen above its first value, training stops
    after ``patience`` epochs without a new best. If it never rises within
    ``3 * patience`` epochs, training stops there, raising
    :class:`TrainingAborted` when ``abort_stalled`` is set.
    """
    epochs = cfg.eve_pretrain_epochs if epochs is None else epochs
    patience = cfg.eve_patience if patience is None else patience
    batch_pairs = batch_pairs or cfg.batch_size
    torch.manual_seed(seed)
    if eve is None:
        eve = Eve(cfg.agents, train_covers.shape[1:])
    opt = make_adam(eve.parameters(), lr=cfg.lr_eve)
    result = FitResult(eve)
    if epochs == 0:
        return result
    best, best_state, since_best = -1.0, None, 0
    first = None
    for epoch in range(epochs):
        for idx in make_batches(range(len(train_covers)), batch_pairs, seed + epoch):
            eve.train()
            z = torch.cat([to_tensor(train_covers[idx]), to_tensor(train_stegos[idx])])
            labels = torch.cat([torch.zeros(len(idx)), torch.ones(len(idx))])
            loss = losses.eve_loss(labels, eve(z))
            backprop(loss, eve.named_parameters())
            adam_step(opt)
        acc = accuracy(eve, val_covers, val_stegos)
        result.val_accuracy.append(acc)
        first = acc if first is None else first
        if acc > best:
            best, since_best, result.best_epoch = acc, 0, epoch
            best_state = {k: v.clone() for k, v in eve.state_dict().items()}
        else:
            since_best += 1
        if best > first:
            if since_best >= patience:
                break
        elif epoch + 1 >= 3 * patience:
            if abort_stalled:
                raise TrainingAborted(f"steganalyzer accuracy stuck at {best:.3f} after {epoch + 1} epochs")
            break
    eve.load_state_dict(best_state)
    return result


def pretrain_eve(covers: np.ndarray, cfg: TrainConfig, val_fraction: float = 0.2, seed: int = 0,
                 epochs: int | None = None) -> FitResult:
    """Pre-train Eve on covers versus non-adaptive +-1 stegos at ``eve_pretrain_payload``."""
    covers = np.asarray(covers, dtype=np.uint8)
    rng = np.random.default_rng(seed)
    stegos = np.stack([baseline_pm1_embed(c, cfg.eve_pretrain_payload, codec.random_bits(rng, cfg.key_bits))
                       for c in covers])
    order = rng.permutation(len(covers))
    n_val = max(1, int(round(val_fraction * len(covers))))
    val, train = order[:n_val], order[n_val:]
    return fit_steganalyzer(covers[train], stegos[train], covers[val], stegos[val], cfg,
                            epochs=epochs, seed=seed)


def save_eve(eve: Eve, path, cfg: TrainConfig) -> None:
    checkpoint.save(path, 0, {"config": cfg.to_dict(), "image_size": list(eve.image_size or ())},
                    checkpoint.module_blobs("eve", eve))


def load_eve(path) -> Eve:
    arch, meta, blobs = checkpoint.load(path)
    cfg = TrainConfig.from_dict(meta["config"])
    eve = Eve(cfg.agents, tuple(meta["image_size"]) or None)
    checkpoint.load_module("eve", eve, blobs)
    return eve
