"""INI-style run configuration: one section per concern, every dataclass field addressable."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .contrastive import PretrainConfig
from .pipeline import SplitSpec, TrainConfig


@dataclass
class DataConfig:
    manifest: str = ""
    pretrain_manifest: str = ""
    encoder: str = ""
    test_manifests: tuple = ()


@dataclass
class GmadConfig:
    level_count: int = 2
    eps_fraction: float = 0.02
    n_patches: int = 50
    seed: int = 0
    cache_dir: str = ".gmad_cache"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    gmad: GmadConfig = field(default_factory=GmadConfig)
    base_dir: Path = field(default=Path("."), compare=False)

    def path(self, value: str) -> Path:
        """Resolve a path from the config relative to the config file's directory."""
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        return {s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}


SECTIONS = ("data", "pretrain", "train", "split", "gmad")


def _coerce(raw: str, default, name: str):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple) or (default is None and name.endswith("seeds")):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if not items:
            return ()
        try:
            return tuple(int(x) for x in items)
        except ValueError:
            return tuple(items)
    return raw


def _field_default(obj, name: str):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    if name not in fields:
        raise KeyError(f"unknown field {name!r} in section [{type(obj).__name__}]")
    f = fields[name]
    return f.default if f.default is not dataclasses.MISSING else f.default_factory()


def _split_key(key: str):
    if "." not in key:
        raise KeyError(f"setting {key!r} must look like section.field")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise KeyError(f"unknown config section {section!r}")
    return section, name


def apply_settings(cfg: RunConfig, settings: dict) -> RunConfig:
    """Apply ``{"section.field": "text"}`` settings; each section is rebuilt (and validated) once."""
    grouped: dict[str, dict] = {}
    for key, value in settings.items():
        section, name = _split_key(key)
        obj = getattr(cfg, section)
        grouped.setdefault(section, {})[name] = _coerce(str(value), _field_default(obj, name), name)
    for section, values in grouped.items():
        setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values))
    return cfg


def load_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read an INI file (``[train]``, ``[split]``, ...); ``overrides`` win over file values."""
    cfg = RunConfig()
    settings = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        parser = configparser.ConfigParser()
        parser.read(path, encoding="utf-8")
        for section in parser.sections():
            for key, value in parser.items(section):
                settings[f"{section}.{key}"] = value
        cfg.base_dir = path.parent
    settings.update(overrides or {})
    return apply_settings(cfg, settings)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for s, values in cfg.to_dict().items():
        lines.append(f"[{s}]")
        for k, v in values.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            elif v is None:
                continue
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
