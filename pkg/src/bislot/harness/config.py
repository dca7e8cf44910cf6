"""Experiment configuration, presets and the key=value config file format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..bilateral import VARIANTS, ModelConfig
from ..encoder import ConfigError
from ..synthdata import DatasetSpec

EXPERIMENTS = ("train_eval", "ablation", "k_sweep", "disruption", "stress", "grounding",
               "correspondence")
K_SWEEP = (2, 4, 6, 8, 12, 16)
NOISE_SIGMAS = (0.0, 0.05, 0.1, 0.2)
ABLATION_VARIANTS = ("full", "no_slots", "no_bilateral", "patch_cross_attn", "lambda_zero",
                     "frozen_encoder")

# fields that never change results, excluded from the config hash
_RUNTIME_FIELDS = {"seeds", "workers", "experiment"}


@dataclass
class ExperimentConfig:
    # model
    variant: str = "full"
    num_slots: int = 8
    iterations: int = 3
    heads: int = 4
    dim: int = 64
    image_side: int = 64
    patch_size: int = 8
    num_classes: int = 4
    mlp_hidden: int = 64
    decoder_hidden: int = 32
    dropout: float = 0.1
    lam: float = 0.5
    # optimization
    lr_encoder: float = 3e-4
    lr_module: float = 1e-3
    weight_decay: float = 0.05
    batch_size: int = 16
    epochs: int = 30
    warmup_epochs: int = 2
    pretrain_epochs: int = 0
    grad_clip: float = 0.0
    # data
    n_train: int = 2000
    n_val: int = 400
    n_test: int = 400
    data_seed: int = 0
    asym_threshold: float = 1.5
    # protocol
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    eval_seed: int = 12345
    experiment: str = "train_eval"
    ablation_variants: list[str] = field(default_factory=lambda: list(ABLATION_VARIANTS))
    k_values: list[int] = field(default_factory=lambda: list(K_SWEEP))
    noise_sigmas: list[float] = field(default_factory=lambda: list(NOISE_SIGMAS))
    workers: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide dim={self.dim}")
        if self.patch_size <= 0 or self.image_side % self.patch_size:
            raise ConfigError(f"image_side={self.image_side} not divisible by "
                              f"patch_size={self.patch_size}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}")
        if self.num_slots < 1 or self.iterations < 1:
            raise ConfigError("num_slots and iterations must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and warmup_epochs >= 0 required")
        if self.lam < 0:
            raise ConfigError("lam must be non-negative")
        if min(self.n_train, self.n_val, self.n_test) < 2:
            raise ConfigError("every split needs at least two samples")
        for v in self.ablation_variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown ablation variant {v!r}")
        if any(k < 2 for k in self.k_values):
            raise ConfigError("K sweep values must be >= 2 (correspondence needs two slots)")
        if any(s < 0 for s in self.noise_sigmas):
            raise ConfigError("noise sigmas must be non-negative")

    # -- derived objects ---------------------------------------------------
    def model_config(self, **overrides) -> ModelConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(ModelConfig)}
        kw.update(overrides)
        return ModelConfig(**kw)

    def dataset_spec(self) -> DatasetSpec:
        return DatasetSpec(n_train=self.n_train, n_val=self.n_val, n_test=self.n_test,
                           image_side=self.image_side, patch_size=self.patch_size,
                           seed=self.data_seed, asym_threshold=self.asym_threshold)

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _RUNTIME_FIELDS}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def dataset_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self.dataset_spec()), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


PRESETS: dict[str, dict] = {
    # desk scale: the defaults above
    "desk": {},
    # reduced budget used by the acceptance suite on a single CPU core
    "quick": {"dim": 32, "mlp_hidden": 64, "decoder_hidden": 16, "n_train": 1000,
              "n_val": 300, "n_test": 400, "epochs": 40, "warmup_epochs": 1,
              "lr_encoder": 1e-3, "lr_module": 2e-3},
    # minimal smoke configuration
    "tiny": {"dim": 8, "heads": 2, "num_slots": 2, "mlp_hidden": 8, "decoder_hidden": 4,
             "image_side": 32, "patch_size": 8, "n_train": 24, "n_val": 8, "n_test": 8,
             "epochs": 1, "warmup_epochs": 0, "batch_size": 8, "seeds": [0]},
    # hyperparameters reported for the original backbone-scale model (documentation;
    # runs on the synthetic task but far too slow for the pure-numpy engine)
    "paper": {"dim": 1024, "heads": 8, "num_slots": 8, "iterations": 3, "image_side": 224,
              "patch_size": 16, "mlp_hidden": 512, "lr_encoder": 1e-4, "lr_module": 5e-4,
              "weight_decay": 0.05, "batch_size": 32, "epochs": 50, "warmup_epochs": 3,
              "seeds": list(range(10))},
}


def preset(name: str, **overrides) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw.update(overrides)
    return ExperimentConfig(**kw)


def _coerce(name: str, raw: str, hint):
    origin = typing.get_origin(hint)
    try:
        if origin in (list, tuple):
            (inner,) = typing.get_args(hint)[:1]
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return [_coerce(name, s, inner) for s in items]
        if hint is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def parse_assignments(lines, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply ``key = value`` lines (``#`` comments allowed) on top of ``base``."""
    hints = typing.get_type_hints(ExperimentConfig)
    changes: dict = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        changes[key] = _coerce(key, raw, hints[key])
    base = base if base is not None else ExperimentConfig()
    return base.replace(**changes)


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    return parse_assignments(text.splitlines(), base)


def dump_config(cfg: ExperimentConfig) -> str:
    out = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"
