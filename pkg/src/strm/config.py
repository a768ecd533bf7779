"""``key = value`` run configuration with [train], [model], [data], [eval] sections."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .model import ModelConfig
from .synthdata import Corruption, SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    momentum: float = 0.9
    nesterov: bool = True
    iterations: int = 300
    n_ids: int = 10
    k_seqs: int = 2
    margin: float = 0.4
    use_lc: bool = True
    use_lv: bool = True
    use_lp: bool = True
    seed: int = 0
    grad_clip: float = 0.0
    log_every: int = 10
    eval_every: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")
        if self.n_ids < 2 or self.k_seqs < 2:
            raise ConfigError("PK sampling needs n_ids >= 2 and k_seqs >= 2")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")
        if not (self.use_lc or self.use_lv or self.use_lp):
            raise ConfigError("at least one of use_lc, use_lv, use_lp must be enabled")


@dataclass
class EvalConfig:
    trials: int = 10
    probes_per_id: int = 2
    gallery_per_id: int = 1
    probe_camera: int = 0
    gallery_camera: int = 1
    max_rank: int = 20


# [model] keys that are filled in from [data] rather than read from the file
_DERIVED_MODEL_KEYS = {"image_height", "image_width", "num_identities"}
_CORRUPTION_KEYS = {f.name for f in dataclasses.fields(Corruption)}


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.sync()

    def sync(self) -> None:
        """Propagate data-derived fields into the model and check consistency."""
        self.model.image_height = self.data.image_height
        self.model.image_width = self.data.image_width
        self.model.num_identities = self.data.num_identities
        if self.train.n_ids > self.data.num_identities:
            raise ConfigError(f"n_ids={self.train.n_ids} exceeds num_identities={self.data.num_identities}")


def _section_items(cfg: RunConfig) -> dict[str, dict[str, Any]]:
    data = {f.name: getattr(cfg.data, f.name) for f in dataclasses.fields(cfg.data) if f.name != "corruption"}
    data.update(dataclasses.asdict(cfg.data.corruption))
    model = {k: v for k, v in dataclasses.asdict(cfg.model).items() if k not in _DERIVED_MODEL_KEYS}
    return {
        "train": dataclasses.asdict(cfg.train),
        "model": model,
        "data": data,
        "eval": dataclasses.asdict(cfg.eval),
    }


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def _parse(raw: str, default: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(p) for p in raw.split(",") if p.strip())
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def dumps(cfg: RunConfig) -> str:
    out = []
    for section, items in _section_items(cfg).items():
        out.append(f"[{section}]")
        out.extend(f"{k} = {_format(v)}" for k, v in items.items())
        out.append("")
    return "\n".join(out)


def _apply(cfg_items: dict[str, dict[str, Any]], section: str, key: str, raw: str) -> None:
    if section not in cfg_items:
        raise ConfigError(f"unknown section [{section}]")
    if key not in cfg_items[section]:
        raise ConfigError(f"unknown key '{key}' in [{section}]")
    cfg_items[section][key] = _parse(raw, cfg_items[section][key], f"{section}.{key}")


def _build(items: dict[str, dict[str, Any]]) -> RunConfig:
    data = dict(items["data"])
    corruption = Corruption(**{k: data.pop(k) for k in list(data) if k in _CORRUPTION_KEYS})
    try:
        return RunConfig(
            train=TrainConfig(**items["train"]),
            model=ModelConfig(**items["model"]),
            data=SynthConfig(corruption=corruption, **data),
            eval=EvalConfig(**items["eval"]),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def loads(text: str, overrides: dict[str, str] | None = None) -> RunConfig:
    """Parse config text; unknown sections or keys are errors.

    ``overrides`` maps ``key`` or ``section.key`` to raw string values and is
    applied after the file.
    """
    parser = configparser.ConfigParser(interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    items = _section_items(RunConfig())
    for section in parser.sections():
        for key, raw in parser.items(section):
            _apply(items, section, key, raw)
    for key, raw in (overrides or {}).items():
        if "." in key:
            section, name = key.split(".", 1)
        else:
            owners = [s for s, vals in items.items() if key in vals]
            if not owners:
                raise ConfigError(f"unknown override key '{key}'")
            section, name = owners[0], key
        _apply(items, section, name, raw)
    return _build(items)


def load(path: str | Path, overrides: dict[str, str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    return loads(path.read_text(), overrides)


def parse_assignments(text: str) -> dict[str, str]:
    """``a=1,b=false`` -> {'a': '1', 'b': 'false'}."""
    out = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"expected key=value, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out
