"""Run configuration: ``key = value`` files with typed, validated fields."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from lmcgnn.exceptions import ConfigError
from lmcgnn.lmc import SCORES, EstimatorMode


@dataclass
class RunConfig:
    # data: either the three file paths or the SBM parameters
    edges: str = ""
    features: str = ""
    labels: str = ""
    blocks: int = 2
    nodes_per_block: int = 300
    p_in: float = 0.05
    p_out: float = 0.01
    d_x: int = 8
    classes: int = 2
    label_fraction: float = 0.3
    data_seed: int = 0
    # model
    layers: int = 2
    hidden: int = 16
    # training
    B: int = 8
    c: int = 2
    eta: float = 0.5
    iterations: int = 200
    mode: str = "LMC"
    alpha: float = -1.0
    score: str = ""
    seed: int = 0
    warm_start: bool = False
    partition: str = ""
    out_dir: str = "out"
    eval_every: int = 0
    track_grad_error: bool = False
    # grad-error sweep
    modes: tuple = ("LMC", "GAS", "Cluster")
    measure_every: int = 1
    warmup: int = 20

    @property
    def uses_files(self) -> bool:
        return bool(self.edges or self.features or self.labels)

    @property
    def epoch_steps(self) -> int:
        return -(-self.B // self.c)

    @property
    def resolved_eval_every(self) -> int:
        return self.eval_every if self.eval_every > 0 else self.epoch_steps

    def schedule_args(self):
        """``(alpha, score)``, or ``None`` to use the batch-size default."""
        if self.alpha < 0 and not self.score:
            return None
        return (0.4 if self.alpha < 0 else self.alpha, self.score or "2x-x^2")

    def validate(self) -> "RunConfig":
        if self.uses_files and not (self.edges and self.features and self.labels):
            raise ConfigError("edges, features and labels must be given together")
        if self.eta <= 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.B < 1 or not 1 <= self.c <= self.B:
            raise ConfigError(f"need 1 <= c <= B, got B={self.B}, c={self.c}")
        if self.layers < 1 or self.hidden < 1:
            raise ConfigError("layers and hidden must be >= 1")
        if self.alpha > 1.0:
            raise ConfigError(f"alpha must be <= 1, got {self.alpha}")
        if self.score and self.score not in SCORES:
            raise ConfigError(f"unknown score {self.score!r}")
        if self.measure_every < 1 or self.warmup < 0:
            raise ConfigError("measure_every must be >= 1 and warmup >= 0")
        try:
            EstimatorMode.parse(self.mode)
            for m in self.modes:
                EstimatorMode.parse(m)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def items(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(value)
            yield f.name, value

    def set(self, key: str, raw: str) -> None:
        fields = {f.name: f for f in dataclasses.fields(self)}
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(self, key)
        raw = raw.strip()
        try:
            if isinstance(current, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                value = raw.lower() in ("true", "1", "yes")
            elif isinstance(current, int):
                value = int(raw)
            elif isinstance(current, float):
                value = float(raw)
            elif isinstance(current, tuple):
                value = tuple(tok.strip() for tok in raw.split(",") if tok.strip())
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        setattr(self, key, value)


def parse_config(text: str, config: RunConfig | None = None) -> RunConfig:
    config = config if config is not None else RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        config.set(key.strip(), value)
    return config


def load_config(path=None, overrides=()) -> RunConfig:
    config = RunConfig()
    if path is not None:
        with open(path) as fh:
            parse_config(fh.read(), config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        config.set(key.strip(), value)
    return config


def dump_config(config: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in config.items())
