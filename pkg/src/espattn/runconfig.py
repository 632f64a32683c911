"""Run configuration for the command-line tool: flat ``key=value`` text."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

from .errors import ParameterError

COMMANDS = ("bench", "gradcheck", "invariants", "plan-dump", "train", "anneal-demo")
ATTENTION_KINDS = ("esp", "sinkhorn", "softmax", "diff")

_INT_TUPLES = {"n", "iters"}
_FLOAT_TUPLES = {"tau"}
_INTS = {"m", "d", "slices", "seed", "repeats", "threads", "epochs", "warmup", "hidden", "batch_size"}
_FLOATS = {"sort_temp", "epsilon", "lr", "gamma", "initial_temp", "lam"}


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("ESP_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI command needs. ``None`` means "use the command's default"."""

    command: str = "invariants"
    attention: str | None = None
    n: tuple[int, ...] | None = None
    m: int | None = None
    d: int | None = None
    slices: int | None = None
    sort_temp: float | None = None
    sort_mode: str | None = None
    tau: tuple[float, ...] | None = None
    epsilon: float | None = None
    iters: tuple[int, ...] | None = None
    lam: float | None = None
    seed: int = 0
    repeats: int | None = None
    warmup: int = 3
    threads: int = 1
    epochs: int | None = None
    lr: float | None = None
    gamma: float | None = None
    initial_temp: float | None = None
    hidden: int | None = None
    batch_size: int | None = None
    out: str = "-"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ParameterError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if self.attention is not None and self.attention not in ATTENTION_KINDS:
            raise ParameterError(f"unknown attention {self.attention!r}")
        if self.sort_mode is not None and self.sort_mode not in ("soft", "hard"):
            raise ParameterError(f"unknown sort mode {self.sort_mode!r}")
        if self.n is not None and any(v < 1 for v in self.n):
            raise ParameterError("token counts must be >= 1")
        if self.repeats is not None and self.repeats < 1:
            raise ParameterError("repeats must be >= 1")
        if self.threads < 1:
            raise ParameterError("threads must be >= 1")

    def get(self, name: str, default):
        value = getattr(self, name)
        return default if value is None else value

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None:
                text = ""
            elif isinstance(value, tuple):
                text = ",".join(repr(v) for v in value)
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> RunConfig:
        return cls(**parse_pairs(text))

    def merged(self, overrides: dict) -> RunConfig:
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def convert(key: str, raw: str):
    """Turn the text of one setting into its typed value."""
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if key in _INT_TUPLES:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if key in _FLOAT_TUPLES:
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if key in _INTS:
            return int(raw)
        if key in _FLOATS:
            return float(raw)
    except ValueError as exc:
        raise ParameterError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_pairs(text: str) -> dict:
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParameterError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in known:
            raise ParameterError(f"line {lineno}: unknown setting {key!r}")
        value = convert(key, raw)
        if value is not None:
            values[key] = value
    return values
