"""Run configuration: flat ``key = value`` files plus command-line overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from treeformer.autodiff import OptimConfig
from treeformer.data import TASKS
from treeformer.errors import ConfigError
from treeformer.model import ModelConfig


@dataclass
class RunConfig:
    task: str = "dyck2"
    train: str = ""
    valid: str = ""
    out: str = "run"
    # model
    d: int = 64
    H: int = 6
    L: int = 1
    L_dec: int = 2
    n_heads: int = 4
    d_ffn: int = 128
    dropout: float = 0.0
    activation: str = "none"
    compose_bias: bool = True
    learned_qk: bool = True
    use_summary: bool = True
    positional: bool = True
    max_output_length: int = 32
    max_length: int = 64
    # optimisation
    optimizer: str = "adam"
    lr: float = 1e-3
    schedule: str = "inverse_sqrt"
    warmup: int = 500
    weight_decay: float = 0.0
    label_smoothing: float = 0.1
    clip_norm: float = 1.0
    batch_size: int = 32
    max_steps: int = 2000
    eval_every: int = 250
    seed: int = 0
    # decoding
    beam: int = 1
    length_penalty: float = 0.0

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {', '.join(TASKS)}, got {self.task!r}")
        for name in ("d", "H", "n_heads", "batch_size", "max_steps", "eval_every", "beam", "max_output_length"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.L < 0 or self.L_dec < 0:
            raise ConfigError("layer counts must be >= 0")
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1)")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        if self.schedule not in ("constant", "inverse_sqrt"):
            raise ConfigError(f"schedule must be constant or inverse_sqrt, got {self.schedule!r}")
        if self.activation not in ("none", "tanh"):
            raise ConfigError(f"activation must be none or tanh, got {self.activation!r}")
        if check_paths:
            for name in ("train", "valid"):
                value = getattr(self, name)
                if not value:
                    raise ConfigError(f"{name} dataset path is required")
                if not Path(value).is_file():
                    raise ConfigError(f"{name} dataset {value} not found")
            if not Path(self.out).parent.resolve().is_dir():
                raise ConfigError(f"parent directory of output {self.out} does not exist")
        return self

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(
            head="classify" if self.task == "dyck2" else "seq2seq",
            vocab_size=vocab_size, n_classes=2, d=self.d, H=self.H, L=self.L, L_dec=self.L_dec,
            n_heads=self.n_heads, d_ffn=self.d_ffn, dropout=self.dropout, activation=self.activation,
            compose_bias=self.compose_bias, learned_qk=self.learned_qk, use_summary=self.use_summary,
            positional=self.positional, max_output_length=self.max_output_length,
            label_smoothing=self.label_smoothing, seed=self.seed)

    def optim_config(self) -> OptimConfig:
        return OptimConfig(kind=self.optimizer, lr=self.lr, schedule=self.schedule, warmup_steps=self.warmup,
                           weight_decay=self.weight_decay, clip_norm=self.clip_norm)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.__name__}") from None


_HINTS = typing.get_type_hints(RunConfig)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, _HINTS[key])
    return values


def format_config(config: RunConfig) -> str:
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in asdict(config).items())


def load_run_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then non-None ``overrides``."""
    values: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        values.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _HINTS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = value
    return dataclasses.replace(RunConfig(), **values)
