"""Pipeline configuration: INI-style ``key = value`` sections plus flag overrides.

Example::

    [pipeline]
    corpus_dir = corpus
    volume_dir = volumes
    overrides_path = overrides.csv
    output_dir = out
    window_size = 50
    threshold = 0.80

    [net]
    epochs = 1
    batch_size = 512

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .anomalous import ALL_METHODS, DEFAULT_THRESHOLD
from .corpus import LABEL_RULES
from .predictor import NetConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ClassifyConfig:
    n_trees: int = 100
    k_candidates: int | None = None
    class_weights: str = "maximum"
    tree_class_weights: str = "maximum"
    max_depth: int | None = None
    min_leaf: int = 1
    tfidf_top: int = 20


@dataclass(frozen=True)
class PipelineConfig:
    corpus_dir: Path | None = None
    volume_dir: Path | None = None
    overrides_path: Path | None = None
    output_dir: Path = Path("out")
    keyword: str = "insider"
    label_rule: str = "either"
    stem: bool = False
    window_size: int = 50
    threshold: float = DEFAULT_THRESHOLD
    stride: int | None = None
    epsilon_base: bool = False
    methods: tuple[str, ...] = ALL_METHODS
    max_plots: int = 12
    seed: int = 0
    net: NetConfig = field(default_factory=NetConfig)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)

    def validate(self, need: tuple[str, ...] = ()) -> None:
        if self.window_size < 2:
            raise ConfigError("window_size must be >= 2")
        if not 0 < self.threshold <= 1:
            raise ConfigError("threshold must be in (0, 1]")
        if self.label_rule not in LABEL_RULES:
            raise ConfigError(f"label_rule must be one of {LABEL_RULES}")
        if self.stride is not None and self.stride < 1:
            raise ConfigError("stride must be >= 1")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}")
        if self.net.input_len != self.window_size:
            raise ConfigError("net input length must equal window_size")
        for name in need:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"{name} is required")
            if name.endswith("_dir") and not Path(value).is_dir():
                raise ConfigError(f"{name} {value} is not a directory")
            if name.endswith("_path") and not Path(value).is_file():
                raise ConfigError(f"{name} {value} does not exist")


def _coerce(value: str, typ: Any):
    text = value.strip()
    if typ in ("int | None", "float | None", "Path | None") and text.lower() in ("", "none"):
        return None
    if typ in (int, "int", "int | None"):
        return int(text)
    if typ in (float, "float", "float | None"):
        return float(text)
    if typ in (bool, "bool"):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if typ in ("Path", "Path | None"):
        return Path(text)
    if typ == "tuple[str, ...]":
        return tuple(t.strip() for t in text.split(",") if t.strip())
    return text


def _apply(obj, section: dict[str, str], where: str):
    types = {f.name: f.type for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in types:
            raise ConfigError(f"[{where}] unknown key {key!r}")
        try:
            updates[key] = _coerce(raw, types[key])
        except ValueError as exc:
            raise ConfigError(f"[{where}] {key}: {exc}") from exc
    return dataclasses.replace(obj, **updates)


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    """Defaults, then the config file, then non-None ``overrides``.

    Override keys are PipelineConfig fields, or ``net.<field>`` /
    ``classify.<field>`` for the nested sections.
    """
    cfg = PipelineConfig()
    explicit_net = set()
    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read config {path}")
        base = path.parent
        if parser.has_section("pipeline"):
            cfg = _apply(cfg, dict(parser["pipeline"]), "pipeline")
            cfg = dataclasses.replace(cfg, **{
                k: (base / getattr(cfg, k)) for k in ("corpus_dir", "volume_dir", "overrides_path", "output_dir")
                if getattr(cfg, k) is not None and not Path(getattr(cfg, k)).is_absolute()})
        if parser.has_section("net"):
            explicit_net |= set(parser["net"])
            cfg = dataclasses.replace(cfg, net=_apply(cfg.net, dict(parser["net"]), "net"))
        if parser.has_section("classify"):
            cfg = dataclasses.replace(cfg, classify=_apply(cfg.classify, dict(parser["classify"]), "classify"))
        unknown = set(parser.sections()) - {"pipeline", "net", "classify"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
    top, net, cls = {}, {}, {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("net."):
            net[key[4:]] = value
        elif key.startswith("classify."):
            cls[key[9:]] = value
        else:
            top[key] = value
    if top:
        cfg = dataclasses.replace(cfg, **top)
    if net:
        cfg = dataclasses.replace(cfg, net=dataclasses.replace(cfg.net, **net))
    if cls:
        cfg = dataclasses.replace(cfg, classify=dataclasses.replace(cfg.classify, **cls))
    # the seed and window size drive the network too unless set there explicitly
    net_updates = {}
    explicit_net |= set(net)
    if "seed" not in explicit_net and cfg.net.seed != cfg.seed:
        net_updates["seed"] = cfg.seed
    if cfg.net.input_len != cfg.window_size and "input_len" not in explicit_net:
        net_updates["input_len"] = cfg.window_size
    if net_updates:
        cfg = dataclasses.replace(cfg, net=dataclasses.replace(cfg.net, **net_updates))
    return cfg
