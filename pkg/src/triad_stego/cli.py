"""Command-line front end: ``triad-stego <command> [flags]``.

Exit codes are 0 on success, 1 on usage errors (bad flags, unreadable
config) and 2 on runtime errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import codec, evaluation, srm
from .config import TrainConfig, format_config, load_config
from .errors import ConfigurationError, StegoError
from .imaging import DatasetSplit, load_directory, read_pgm, synth_textures, write_pgm
from .trainer import TrainSession, load_eve, pretrain_eve, save_eve, write_log_csv

log = logging.getLogger("triad_stego")

COMMANDS = ("gen-data", "pretrain-eve", "train", "embed", "extract", "steganalyze", "eval",
            "sweep-beta", "sweep-payload", "key-test", "export-maps", "dump-srm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    output_dir: str
    config_path: str | None = None
    dataset_paths: list[str] = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    timestamp: str = ""
    extra: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="triad-stego", description="3-player adversarial steganography toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("--seed", type=int, default=None, help="seed for every random choice of the run")
        return c

    def data_flags(c, cover_dir_required=True):
        c.add_argument("--cover-dir", required=cover_dir_required, help="directory of 8-bit PGM covers")
        c.add_argument("--split", help="split manifest; defaults to <cover-dir>/split.txt when present")

    c = cmd("gen-data", "write synthetic texture covers, a split manifest, a key and a message")
    c.add_argument("--out-dir", required=True)
    c.add_argument("--count", type=int, default=1000)
    c.add_argument("--size", type=int, default=32)

    c = cmd("pretrain-eve", "pre-train Eve against non-adaptive +-1 embedding")
    c.add_argument("--config")
    data_flags(c)
    c.add_argument("--out-dir", required=True)
    c.add_argument("--epochs", type=int)

    c = cmd("train", "run the 3-player game")
    c.add_argument("--config")
    data_flags(c)
    c.add_argument("--out-dir", required=True)
    c.add_argument("--checkpoint", help="resume from this training checkpoint")
    c.add_argument("--eve", help="pre-trained Eve checkpoint")
    c.add_argument("--arch", type=int, choices=(1, 2, 3))
    c.add_argument("--payload", type=float)
    c.add_argument("--beta", type=float)
    c.add_argument("--loops", type=int, help="stop after this many further loops")

    c = cmd("embed", "hide a message file in one cover")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--cover", required=True)
    c.add_argument("--message", required=True)
    c.add_argument("--key", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--ecc", choices=("none", "h7", "h15"), default="none")

    c = cmd("extract", "recover a message file from one stego")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--stego", "--cover", dest="stego", required=True)
    c.add_argument("--key", required=True)
    c.add_argument("--length", type=int, required=True, help="message length in bits (before ECC)")
    c.add_argument("--out", required=True)
    c.add_argument("--ecc", choices=("none", "h7", "h15"), default="none")

    c = cmd("steganalyze", "train a fresh steganalyzer on held-out covers and report Pe")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--config")
    data_flags(c)
    c.add_argument("--section", default="test", choices=("train", "val", "test"))
    c.add_argument("--payload", type=float)
    c.add_argument("--epochs", type=int)
    c.add_argument("--out-dir", required=True)

    c = cmd("eval", "extraction BER of a checkpoint")
    c.add_argument("--checkpoint", required=True)
    data_flags(c)
    c.add_argument("--section", default="test", choices=("train", "val", "test"))
    c.add_argument("--payload", type=float)
    c.add_argument("--ecc", choices=("none", "h7", "h15"), default="none")
    c.add_argument("--out-dir", required=True)

    c = cmd("sweep-beta", "train one architecture-2/3 model per change rate and tabulate BER/Pe")
    c.add_argument("--config")
    data_flags(c)
    c.add_argument("--betas", type=_floats, default=[0.0, 0.1, 0.2, 0.4])
    c.add_argument("--arch", type=int, choices=(2, 3))
    c.add_argument("--eve")
    c.add_argument("--epochs", type=int)
    c.add_argument("--out-dir", required=True)

    c = cmd("sweep-payload", "evaluate a checkpoint at several payloads")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--config")
    data_flags(c)
    c.add_argument("--section", default="test", choices=("train", "val", "test"))
    c.add_argument("--payloads", type=_floats, default=[0.14, 0.4, 1.0])
    c.add_argument("--ecc", choices=("none", "h7", "h15"), default="h7")
    c.add_argument("--epochs", type=int)
    c.add_argument("--no-steganalysis", action="store_true")
    c.add_argument("--out-dir", required=True)

    c = cmd("key-test", "embed one message under two keys and export the difference map")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--cover", required=True)
    c.add_argument("--message", required=True)
    c.add_argument("--key", required=True)
    c.add_argument("--key2", required=True)
    c.add_argument("--out-dir", required=True)

    c = cmd("export-maps", "write black/white modification maps for a set of covers")
    c.add_argument("--checkpoint", required=True)
    data_flags(c)
    c.add_argument("--section", default="test", choices=("train", "val", "test"))
    c.add_argument("--payload", type=float)
    c.add_argument("--limit", type=int, default=16)
    c.add_argument("--out-dir", required=True)

    c = cmd("dump-srm", "print the 30 SRM kernels")
    c.add_argument("--out-dir")
    return p


# helpers

def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    if args.seed is not None:
        s = args.seed
        cfg = dataclasses.replace(cfg, seed_data=s, seed_keys=s + 1, seed_messages=s + 2, seed_init=s + 3)
    return cfg


def _seed(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _split(args) -> DatasetSplit | None:
    path = args.split or (Path(args.cover_dir) / "split.txt")
    if args.split or Path(path).is_file():
        return DatasetSplit.read(path)
    return None


def _covers(args, section: str | None) -> tuple[list[str], np.ndarray]:
    images = load_directory(args.cover_dir)
    if not images:
        raise ConfigurationError(f"no PGM images in {args.cover_dir}")
    split = _split(args)
    ids = sorted(images) if split is None or section is None else list(getattr(split, section))
    missing = [i for i in ids if i not in images]
    if missing:
        raise ConfigurationError(f"split lists {len(missing)} images missing from {args.cover_dir}, e.g. {missing[0]}")
    return ids, np.stack([images[i] for i in ids])


def _ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _manifest(args, argv, out_dir, **extra) -> None:
    datasets = [str(getattr(args, a)) for a in ("cover_dir", "split", "cover", "stego", "checkpoint", "eve")
                if getattr(args, a, None)]
    seeds = {"seed": args.seed}
    if "config" in extra:
        seeds.update({k: v for k, v in extra["config"].items() if k.startswith("seed_")})
    RunManifest(args.command, list(argv), str(out_dir), getattr(args, "config", None), datasets, seeds,
                datetime.now(timezone.utc).isoformat(timespec="seconds"), extra).write(Path(out_dir) / "run_manifest.json")


def _report(out_dir: Path, name: str, rows) -> str:
    evaluation.write_rows_csv(rows, out_dir / f"{name}.csv")
    text = evaluation.format_rows(rows)
    (out_dir / f"{name}.txt").write_text(text)
    return text


def _payload(args, system_or_cfg) -> float:
    if getattr(args, "payload", None) is not None:
        return args.payload
    return system_or_cfg.payload


# commands

def cmd_gen_data(args, argv) -> None:
    out = _ensure_dir(args.out_dir)
    seed = _seed(args)
    images = synth_textures(args.count, args.size, args.size, seed)
    ids = [f"img_{i:05d}" for i in range(args.count)]
    for i, img in zip(ids, images):
        write_pgm(img, out / f"{i}.pgm")
    DatasetSplit.random(ids, seed=seed).write(out / "split.txt")
    rng = np.random.default_rng(seed + 1)
    codec.write_key(out / "key.bin", codec.random_bits(rng, codec.DEFAULT_KEY_BITS))
    codec.write_message(out / "message.bin", codec.random_bits(rng, codec.message_length(0.1, args.size, args.size)))
    _manifest(args, argv, out, count=args.count, size=args.size)
    print(f"wrote {args.count} covers, split.txt, key.bin and message.bin to {out}")


def cmd_pretrain_eve(args, argv) -> None:
    cfg = _config(args)
    out = _ensure_dir(args.out_dir)
    _, covers = _covers(args, "train")
    fit = pretrain_eve(covers, cfg, seed=_seed(args), epochs=args.epochs)
    save_eve(fit.eve, out / "eve.tstg", cfg)
    _manifest(args, argv, out, config=cfg.to_dict(), val_accuracy=fit.val_accuracy, best_epoch=fit.best_epoch)
    print(f"best validation accuracy {max(fit.val_accuracy or [float('nan')]):.4f} at epoch {fit.best_epoch}")


def _overrides(cfg: TrainConfig, args) -> TrainConfig:
    if args.arch is not None:
        cfg = dataclasses.replace(cfg, arch=args.arch)
    if getattr(args, "payload", None) is not None:
        cfg = dataclasses.replace(cfg, payload=args.payload)
    if getattr(args, "beta", None) is not None:
        cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, beta=args.beta))
    return cfg


def cmd_train(args, argv) -> None:
    out = _ensure_dir(args.out_dir)
    ids, covers = _covers(args, "train")
    if args.checkpoint:
        session = TrainSession.load(args.checkpoint, covers)
    else:
        cfg = _overrides(_config(args), args)
        eve = load_eve(args.eve) if args.eve else None
        session = TrainSession(cfg, covers, eve=eve, cover_ids=ids)
    (out / "config.txt").write_text(format_config(session.config))
    ckpt = out / "checkpoint.tstg"
    session.run(loops=args.loops, checkpoint_path=ckpt, log_every=10 if args.verbose else 0)
    session.save(ckpt)
    write_log_csv(session.log, out / "train_log.csv")
    _manifest(args, argv, out, config=session.config.to_dict(), train_ids=ids, loops=session.loop)
    last = session.log[-1] if session.log else {}
    print(f"trained {session.loop} loops; last BER {last.get('ber', float('nan')):.4f}; checkpoint {ckpt}")


def cmd_embed(args, argv) -> None:
    system = evaluation.StegoSystem.from_checkpoint(args.checkpoint)
    cover = read_pgm(args.cover)
    bits = codec.read_message(args.message)
    code = codec.get_code(args.ecc)
    if code is not None:
        bits = codec.hamming_encode(bits, code)
    stego = system.embed(cover, bits, codec.read_key(args.key))
    write_pgm(stego, args.out)
    out = Path(args.out)
    _manifest(args, argv, out.parent, out=str(out), ecc=args.ecc, embedded_bits=int(bits.size))
    print(f"embedded {bits.size} bits; changed {np.mean(stego != cover):.4f} of pixels")


def cmd_extract(args, argv) -> None:
    system = evaluation.StegoSystem.from_checkpoint(args.checkpoint)
    stego = read_pgm(args.stego)
    code = codec.get_code(args.ecc)
    m_len = args.length if code is None else -(-args.length // code.k) * code.n
    bits = system.extract(stego, codec.read_key(args.key), m_len)[0]
    if code is not None:
        bits = codec.hamming_decode(bits, code, args.length)
    codec.write_message(args.out, bits)
    out = Path(args.out)
    _manifest(args, argv, out.parent, out=str(out), ecc=args.ecc, length=args.length)
    print(f"extracted {bits.size} bits to {out}")


def cmd_steganalyze(args, argv) -> None:
    out = _ensure_dir(args.out_dir)
    session = TrainSession.load(args.checkpoint)
    cfg = load_config(args.config) if args.config else session.config
    ids, covers = _covers(args, args.section)
    split = _split(args)
    excluded = set(session.cover_ids) | (set(split.train) if split is not None else set())
    payload = _payload(args, session.config)
    rep = evaluation.steganalysis_experiment(evaluation.StegoSystem(session.model), covers, cfg, payload,
                                             seed=_seed(args), cover_ids=ids, excluded_ids=excluded,
                                             epochs=args.epochs, dataset=str(args.cover_dir))
    text = _report(out, "steganalysis", [rep])
    _manifest(args, argv, out, config=cfg.to_dict(), payload=payload, pe=rep.pe)
    print(text, end="")


def cmd_eval(args, argv) -> None:
    out = _ensure_dir(args.out_dir)
    session = TrainSession.load(args.checkpoint)
    _, covers = _covers(args, args.section)
    payload = _payload(args, session.config)
    rep = evaluation.evaluate_extraction(evaluation.StegoSystem(session.model), covers, payload,
                                         args.ecc, seed=_seed(args), key_bits=session.config.key_bits)
    text = _report(out, "extraction", [rep])
    _manifest(args, argv, out, payload=payload, ber=rep.ber, ber_decoded=rep.ber_decoded)
    print(text, end="")


def cmd_sweep_beta(args, argv) -> None:
    out = _ensure_dir(args.out_dir)
    cfg = _config(args)
    if args.arch is not None:
        cfg = dataclasses.replace(cfg, arch=args.arch)
    if cfg.arch == 1:
        raise ConfigurationError("the change-rate sweep needs architecture 2 or 3")
    _, train_covers = _covers(args, "train")
    _, eval_covers = _covers(args, "test")
    eve = load_eve(args.eve) if args.eve else None
    rows = evaluation.beta_sweep(cfg, train_covers, eval_covers, args.betas, seed=_seed(args), eve=eve,
                                 steganalysis_epochs=args.epochs)
    text = _report(out, "beta_sweep", rows)
    _manifest(args, argv, out, config=cfg.to_dict(), betas=args.betas)
    print(text, end="")


def cmd_sweep_payload(args, argv) -> None:
    out = _ensure_dir(args.out_dir)
    session = TrainSession.load(args.checkpoint)
    cfg = load_config(args.config) if args.config else session.config
    _, covers = _covers(args, args.section)
    rows = evaluation.payload_sweep(evaluation.StegoSystem(session.model), covers, args.payloads, cfg,
                                    ecc=args.ecc, seed=_seed(args), steganalysis=not args.no_steganalysis,
                                    epochs=args.epochs)
    text = _report(out, "payload_sweep", rows)
    _manifest(args, argv, out, payloads=args.payloads, ecc=args.ecc)
    print(text, end="")


def cmd_key_test(args, argv) -> None:
    out = _ensure_dir(args.out_dir)
    system = evaluation.StegoSystem.from_checkpoint(args.checkpoint)
    rep = evaluation.key_sensitivity(system, read_pgm(args.cover), codec.read_message(args.message),
                                     codec.read_key(args.key), codec.read_key(args.key2), out / "key_diff.pgm")
    text = _report(out, "key_test", [rep])
    _manifest(args, argv, out, diff_fraction=rep.diff_fraction)
    print(text, end="")


def cmd_export_maps(args, argv) -> None:
    out = _ensure_dir(args.out_dir)
    session = TrainSession.load(args.checkpoint)
    ids, covers = _covers(args, args.section)
    ids, covers = ids[:args.limit], covers[:args.limit]
    payload = _payload(args, session.config)
    h, w = covers.shape[1:]
    rng = np.random.default_rng(_seed(args))
    bits = [codec.random_bits(rng, codec.message_length(payload, h, w)) for _ in ids]
    keys = [codec.random_bits(rng, session.config.key_bits) for _ in ids]
    stegos = evaluation.StegoSystem(session.model).embed(covers, bits, keys)
    for i, c, s in zip(ids, covers, stegos):
        write_pgm(s, out / f"{i}_stego.pgm")
        evaluation.export_mod_map(c, s, out / f"{i}_map.pgm")
    _manifest(args, argv, out, payload=payload, images=ids)
    print(f"wrote {len(ids)} stegos and modification maps to {out}")


def cmd_dump_srm(args, argv) -> None:
    text = srm.format_bank()
    if args.out_dir:
        out = _ensure_dir(args.out_dir)
        (out / "srm.txt").write_text(text)
        _manifest(args, argv, out)
    print(text, end="")


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def dispatch(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    evaluation.apply_thread_cap()
    try:
        HANDLERS[args.command](args, argv)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (StegoError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    sys.exit(dispatch())
