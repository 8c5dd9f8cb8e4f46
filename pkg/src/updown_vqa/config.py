"""Flat ``key=value`` run configuration.

One setting per line, ``#`` starts a comment. Every key has a default;
unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from .trainer import LrSchedule, TrainRunConfig


class ConfigError(ValueError):
    pass


# key -> (default, description); order here is the echo order
DEFAULTS: dict[str, tuple[Any, str]] = {
    # model
    "embed_dim": (300, "word embedding width"),
    "gru_hidden": (64, "GRU state width"),
    "fusion_hidden": (64, "fusion / attention projection width"),
    "num_attention_glimpses": (1, "question-attention glimpses"),
    "use_feature_adapter": (False, "trainable per-region adapter layer in the finetune group"),
    "use_boxes": (False, "append box coordinates to region features"),
    "use_grid": (False, "enable the grid-feature path (needs <image_id>.grid.pyf1 files)"),
    "num_answers": (3000, "answer space size: most frequent training answers"),
    # schedule
    "schedule": ("challenge", "challenge (decay 5K, stop 12K) or augmented (decay 15K, stop 22K)"),
    "schedule_scale": (1.0, "multiply every iteration count of the schedule"),
    "base_lr": (0.002, "learning rate at iteration 0"),
    "peak_lr": (0.01, "learning rate at the end of warmup"),
    "decay_factor": (0.1, "step-decay factor"),
    # training
    "seed": (0, "run seed: initialization and batch order"),
    "batch_size": (32, "mini-batch size"),
    "finetune_lr_multiplier": (0.1, "learning-rate multiplier of the finetune group"),
    "grad_clip": (0.0, "global gradient-norm clip, 0 disables"),
    "log_every": (1, "metrics log cadence in iterations"),
    "eval_every": (0, "validation cadence in iterations, 0 disables"),
    # data
    "train_data": ("", "training JSON-lines file"),
    "val_data": ("", "validation JSON-lines file"),
    "features_dir": ("", "directory of <image_id>.pyf1 feature files"),
    "embeddings": ("", "word-vector text file used to initialize embeddings"),
    "proposal_mode": ("adaptive", "adaptive (10..100 proposals) or fixed100"),
    # augmentation
    "mirror": (False, "add horizontally mirrored copies of VQA-format questions"),
    "mirror_all_sources": (False, "also mirror replicated single-answer sources"),
    "replicate": (True, "replicate single-answer records to 10 annotations"),
    "dialog_flatten": (True, "turn each dialog into independent question-answer records"),
    # ensembling
    "ensemble_members": ("", "comma-separated prediction files"),
    "ensemble_average": ("probability", "probability or logit averaging"),
    "ensemble_strategy": ("same-model", "report tag: same-model or diverse"),
    "threads": (1, "worker processes for member evaluation"),
}


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _render(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({k: v for k, (v, _) in DEFAULTS.items()})

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        return cls.defaults().updated(_lines(text, source))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text(), str(path))

    def updated(self, pairs: Iterable[tuple[str, str]]) -> "RunConfig":
        values = dict(self.values)
        for key, raw in pairs:
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key: {key}")
            values[key] = _coerce(key, raw, DEFAULTS[key][0])
        return RunConfig(values)

    def with_overrides(self, assignments: Iterable[str]) -> "RunConfig":
        pairs = []
        for a in assignments:
            if "=" not in a:
                raise ConfigError(f"expected key=value, got {a!r}")
            k, v = a.split("=", 1)
            pairs.append((k.strip(), v))
        return self.updated(pairs)

    def render(self) -> str:
        return "".join(f"{k}={_render(self.values[k])}\n" for k in DEFAULTS)

    def schedule(self) -> LrSchedule:
        kind = self["schedule"]
        if kind == "challenge":
            base = LrSchedule.challenge()
        elif kind == "augmented":
            base = LrSchedule.augmented()
        else:
            raise ConfigError(f"unknown schedule {kind!r}")
        if self["schedule_scale"] != 1.0:
            base = base.scaled(self["schedule_scale"])
        try:
            return replace(base, base_lr=self["base_lr"], peak_lr=self["peak_lr"],
                           decay_factor=self["decay_factor"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_run(self, checkpoint_path=None, log_path=None) -> TrainRunConfig:
        try:
            return TrainRunConfig(
                seed=self["seed"], batch_size=self["batch_size"], schedule=self.schedule(),
                finetune_lr_multiplier=self["finetune_lr_multiplier"], grad_clip=self["grad_clip"],
                log_every=self["log_every"], eval_every=self["eval_every"],
                checkpoint_path=checkpoint_path, log_path=log_path,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def _lines(text: str, source: str):
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, raw = line.split("=", 1)
        yield key.strip(), raw


def documented_defaults() -> str:
    """Default config file text with one comment per key."""
    return "".join(f"# {desc}\n{k}={_render(v)}\n" for k, (v, desc) in DEFAULTS.items())
