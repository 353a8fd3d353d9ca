"""Training hyperparameters and presets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

ALGOS = ("factored-cql", "hybrid-iql", "hybrid-edac")


@dataclass(frozen=True)
class TrainConfig:
    algo: str = "factored-cql"
    steps: int = 400_000
    batch_size: int = 256
    gamma: float = 0.99
    hidden: int = 256
    layers: int = 4                 # hidden layers
    polyak: float = 0.005
    checkpoint_interval: int = 20_000
    log_interval: int = 100
    # factored-cql
    cql_alpha: float = 10.0
    cql_lr: float = 1e-5
    cql_clip: float = 0.01
    # hybrid-iql
    iql_lr: float = 3e-4
    iql_beta: float = 100.0
    iql_tau: float = 0.8
    iql_actor_last: bool = True      # False: actor step between the V and Q steps
    iql_actor_cosine: bool = True    # cosine decay of the actor learning rate
    # hybrid-edac
    edac_lr: float = 3e-5
    edac_eta: float = 0.1
    edac_ensemble: int = 10
    edac_entropy_cont: float = -0.3
    edac_entropy_disc: float = 0.3
    edac_alpha_init: float = 1.0

    def __post_init__(self):
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}; choose from {', '.join(ALGOS)}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 < self.iql_tau < 1.0:
            raise ValueError("iql_tau must lie in (0, 1)")
        for name in ("cql_lr", "iql_lr", "edac_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.edac_ensemble < 2:
            raise ValueError("edac_ensemble must be at least 2")
        if min(self.steps, self.batch_size, self.hidden, self.layers, self.checkpoint_interval) < 1:
            raise ValueError("steps, sizes and intervals must be positive")
        if self.cql_alpha < 0 or self.cql_clip <= 0:
            raise ValueError("cql_alpha must be >= 0 and cql_clip > 0")

    @property
    def lr(self) -> float:
        return {"factored-cql": self.cql_lr, "hybrid-iql": self.iql_lr, "hybrid-edac": self.edac_lr}[self.algo]

    def hidden_sizes(self) -> list:
        return [self.hidden] * self.layers

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_dict(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Override ``base`` with string or typed values; keys are field names."""
        base = base or cls()
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        out = {}
        for k, v in values.items():
            if k not in types:
                raise ValueError(f"unknown training key {k!r}")
            out[k] = coerce_value(v, types[k], k)
        return replace(base, **out)

    @classmethod
    def from_text(cls, text: str, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_dict(parse_key_values(text), base)

    @classmethod
    def load(cls, path, base: "TrainConfig | None" = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), base)


def coerce_value(value, kind, key):
    if not isinstance(value, str):
        return kind(value)
    if kind is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if kind is int:
        return int(float(value)) if "e" in value.lower() else int(value)
    return kind(value.strip())


def parse_key_values(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def preset(name: str, algo: str = "factored-cql") -> TrainConfig:
    """``paper``: full-scale settings. ``desk``: 20k steps on small networks, one CPU.

    The desk preset raises the CQL and EDAC learning rates: at 1e-5 and
    3e-5 a 20k-step run cannot move the output layer far enough to
    represent returns of order 10.
    """
    if name == "paper":
        return TrainConfig(algo=algo)
    if name == "desk":
        return TrainConfig(algo=algo, steps=20_000, hidden=64, layers=2, checkpoint_interval=2_000,
                           cql_lr=3e-4, edac_lr=3e-4)
    raise ValueError(f"unknown preset {name!r}; choose paper or desk")
