"""Run configuration: one flat, diff-friendly ``section.key = value`` text file.

Values are JSON literals (``stage1.base_lr = 0.00015``,
``rehearsal.gamma = [6, 3, 1]``); bare words are read as strings. Blank lines
and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .continual_trainer import TrainConfig
from .datasets import LUNG, MEDIASTINAL, FINETUNE, DomainSpec
from .errors import InvalidArgument
from .finetune_eval import FinetuneConfig
from .mae_model import PRESETS, ModelConfig


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 32
    channels: int = 1
    n_d1: int = 1024
    n_d2: int = 1024
    n_ft_train: int = 128
    n_ft_test: int = 512
    seed: int = 1234
    pretrain_blobs: tuple = (0, 2)
    finetune_blobs: tuple = (0, 1)


@dataclass(frozen=True)
class RehearsalConfig:
    alpha: float = 0.01
    beta: float = 0.05
    gamma: tuple = (6, 3, 1)
    seed: int = 0
    strategy: str = "kmeans"


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    d1: DomainSpec = MEDIASTINAL
    d2: DomainSpec = LUNG
    ft: DomainSpec = FINETUNE
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: TrainConfig = field(default_factory=TrainConfig)
    stage3: TrainConfig = field(default_factory=TrainConfig)
    rehearsal: RehearsalConfig = field(default_factory=RehearsalConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    seed: int = 0

    def with_seed(self, seed):
        """Copy with every training seed (not the data seed) derived from ``seed``."""
        return replace(self, seed=seed,
                       stage1=replace(self.stage1, seed=seed),
                       stage3=replace(self.stage3, seed=seed + 1),
                       rehearsal=replace(self.rehearsal, seed=seed),
                       finetune=replace(self.finetune, seed=seed + 2))


def _tiny():
    # a few minutes per seed on one CPU core
    stage1 = TrainConfig(epochs=60, batch_size=64, base_lr=1.5e-3, warmup_epochs=6)
    return RunConfig(
        stage1=stage1,
        stage3=replace(stage1, epochs=20, warmup_epochs=2),
        finetune=FinetuneConfig(epochs=30, batch_size=16, base_lr=3e-4, warmup_epochs=2),
    )


def _full():
    # values reported for the full-scale chest CT setup
    return RunConfig(
        data=DataConfig(image_size=512, n_d1=31256, n_d2=26403, n_ft_train=1986, n_ft_test=495),
        model=PRESETS["full"],
        stage1=TrainConfig(),
        stage3=TrainConfig(),
        rehearsal=RehearsalConfig(alpha=0.01, beta=0.05, gamma=(6, 3, 1)),
        finetune=FinetuneConfig(epochs=80, base_lr=5e-5),
    )


def preset(name):
    try:
        cfg = {"tiny": _tiny, "full": _full, "paper": _full}[name]()
    except KeyError:
        raise InvalidArgument(f"unknown preset {name!r}; choose tiny or full (alias paper)") from None
    return replace(cfg, model=replace(cfg.model, image_size=cfg.data.image_size,
                                      channels=cfg.data.channels))


# ---------------------------------------------------------------------------
# flat text form


def to_flat(cfg):
    out = {}
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if dataclasses.is_dataclass(val):
            for sub in fields(val):
                out[f"{f.name}.{sub.name}"] = getattr(val, sub.name)
        else:
            out[f.name] = val
    return out


def _parse_value(text):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(like, tuple):
        if isinstance(value, str):
            value = [_parse_value(v) for v in value.replace(":", ",").split(",")]
        return tuple(value)
    if isinstance(like, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(like, int) and isinstance(value, float) and value.is_integer():
        return int(value)
    if like is not None and not isinstance(value, type(like)):
        raise InvalidArgument(f"expected {type(like).__name__}, got {value!r}")
    return value


def apply_overrides(cfg, items):
    """Return ``cfg`` with ``{"section.key": value}`` overrides applied."""
    sections = {}
    top = {}
    for key, value in items.items():
        if "." in key:
            sec, sub = key.split(".", 1)
            sections.setdefault(sec, {})[sub] = value
        else:
            top[key] = value
    changes = {}
    for key, value in top.items():
        if not hasattr(cfg, key) or dataclasses.is_dataclass(getattr(cfg, key)):
            raise InvalidArgument(f"unknown config key {key!r}")
        changes[key] = _coerce(value, getattr(cfg, key))
    for sec, subs in sections.items():
        if not hasattr(cfg, sec):
            raise InvalidArgument(f"unknown config section {sec!r}")
        obj = getattr(cfg, sec)
        upd = {}
        for sub, value in subs.items():
            if not hasattr(obj, sub):
                raise InvalidArgument(f"unknown config key {sec}.{sub}")
            upd[sub] = _coerce(value, getattr(obj, sub))
        changes[sec] = replace(obj, **upd)
    return replace(cfg, **changes)


def dumps(cfg):
    lines = []
    prev = None
    for key, value in to_flat(cfg).items():
        sec = key.split(".", 1)[0]
        if prev is not None and sec != prev:
            lines.append("")
        prev = sec
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


def loads(text, base=None):
    items = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgument(f"line {n}: expected `key = value`, got {raw!r}")
        key, value = line.split("=", 1)
        items[key.strip()] = _parse_value(value)
    return apply_overrides(base or RunConfig(), items)


def load(path, base=None):
    return loads(Path(path).read_text(), base)


def save(cfg, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path
