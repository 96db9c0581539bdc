"""Training configuration and its ``key = value`` text format.

Example::

    [train]
    arch = 2
    payload = 0.4
    it1 = 50

    [losses]
    beta = 0.1

    [agents]
    alice_widths = 16,16,16

Unknown sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .agents import AgentConfig
from .errors import ConfigurationError
from .losses import LossWeights


@dataclass
class TrainConfig:
    arch: int = 2
    payload: float = 0.4
    weights: LossWeights = field(default_factory=LossWeights)
    it1: int = 50
    it2: int = 1
    max_iter: int = 5000          # outer loops
    batch_size: int = 4
    image_size: int = 32
    key_bits: int = 128
    seed_data: int = 0
    seed_keys: int = 1
    seed_messages: int = 2
    seed_init: int = 3
    lr_alice: float = 1e-4
    lr_bob: float = 1e-4
    lr_eve: float = 1e-4
    # loop index at which discretization starts; "auto" waits for convergence, "never" disables it
    discretization_start: int | str = "auto"
    fine_tune_iters: int = 50_000  # team-1 iterations after discretization starts
    fine_tune_lr: float | None = None  # learning rate of all agents once discretizing; None keeps the current ones
    convergence_window: int = 200
    convergence_tol: float = 0.01
    val_images: int = 8
    eve_pretrain_payload: float = 0.4
    eve_pretrain_epochs: int = 30
    eve_patience: int = 5
    agents: AgentConfig = field(default_factory=AgentConfig)

    def __post_init__(self):
        if self.arch not in (1, 2, 3):
            raise ConfigurationError(f"arch must be 1, 2 or 3, got {self.arch}")
        if self.it1 < 1 or self.it2 < 0 or self.max_iter < 0 or self.batch_size < 1:
            raise ConfigurationError("need it1 >= 1, it2 >= 0, max_iter >= 0, batch_size >= 1")
        if not 0 <= self.payload <= 1:
            raise ConfigurationError(f"payload must be within [0, 1] bpp, got {self.payload}")
        if isinstance(self.discretization_start, str) and self.discretization_start not in ("auto", "never"):
            raise ConfigurationError("discretization_start must be an integer, 'auto' or 'never'")
        if self.fine_tune_lr is not None and self.fine_tune_lr <= 0:
            raise ConfigurationError("fine_tune_lr must be positive")

    @property
    def fine_tune_loops(self) -> int:
        return -(-self.fine_tune_iters // self.it1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        weights = LossWeights(**data.pop("weights", {}))
        agents = AgentConfig(**data.pop("agents", {}))
        return cls(weights=weights, agents=agents, **data)


_SECTIONS = {"train": TrainConfig, "losses": LossWeights, "agents": AgentConfig}


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ConfigurationError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, list):
        return [int(v) for v in raw.split(",") if v.strip()]
    if key == "discretization_start":
        return raw if raw in ("auto", "never") else int(raw)
    if key == "fine_tune_lr":
        return None if raw.lower() == "none" else float(raw)
    if isinstance(default, int):
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    base = TrainConfig()
    defaults = {"train": base, "losses": base.weights, "agents": base.agents}
    values: dict[str, dict] = {name: {} for name in _SECTIONS}
    section = "train"
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigurationError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        fields = {f.name for f in dataclasses.fields(_SECTIONS[section])} - {"weights", "agents"}
        if key not in fields:
            raise ConfigurationError(f"{source}:{lineno}: unknown key {key!r} in [{section}]")
        try:
            values[section][key] = _coerce(raw, getattr(defaults[section], key), key)
        except ValueError as exc:
            raise ConfigurationError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    weights = dataclasses.replace(base.weights, **values["losses"])
    agents = dataclasses.replace(base.agents, **values["agents"])
    return TrainConfig(**{**{f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)},
                          **values["train"], "weights": weights, "agents": agents})


def load_config(path) -> TrainConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(p.read_text(), str(p))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for section, obj in (("train", cfg), ("losses", cfg.weights), ("agents", cfg.agents)):
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            if f.name in ("weights", "agents"):
                continue
            v = getattr(obj, f.name)
            lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, list) else v}")
        lines.append("")
    return "\n".join(lines)
