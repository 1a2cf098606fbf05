"""Run configuration: INI-style sections with typed keys and dotted overrides.

Grammar::

    [data]
    manifest = data/manifest.jsonl
    factor = 4

    [model]
    num_sr_units = 2

Overrides use ``section.key=value`` (``train.base_lr=5e-5``). Booleans accept
true/false/yes/no/1/0. Unknown sections or keys are rejected; `` ;`` starts an
inline comment.
"""

import configparser
import dataclasses
from dataclasses import dataclass, field

from .datapipe import DEFAULT_PROMPT
from .errors import ConfigurationError
from .reconstructor import ModelConfig
from .trainer import TrainConfig


@dataclass
class DataConfig:
    manifest: str = ""
    prepared_dir: str = ""
    compare_dir: str = ""
    factor: int = 4
    quality: int = 75
    caption_provider: str = "constant"
    caption_text: str = "a satellite image"
    caption_cache: str = ""
    caption_endpoint: str = ""
    caption_prompt: str = DEFAULT_PROMPT
    caption_timeout: float = 30.0
    caption_retries: int = 2
    caption_max_in_flight: int = 2
    caption_source: str = "hr"
    workers: int = 1


@dataclass
class ModelSection(ModelConfig):
    clip_backend: str = "tiny-random"


@dataclass
class EvalConfig:
    checkpoint: str = ""
    per_record_csv: bool = True
    plot_trace: str = ""
    plot_fractions: str = ""


# seeds come from train.seed so one value reproduces a run
_HIDDEN = {"model": {"seed"}}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    SECTIONS = ("data", "model", "train", "eval")

    def section_fields(self, section):
        obj = getattr(self, section)
        hidden = _HIDDEN.get(section, set())
        return {f.name: f for f in dataclasses.fields(obj) if f.name not in hidden}

    def set(self, section, key, raw):
        if section not in self.SECTIONS:
            raise ConfigurationError(f"unknown config section {section!r}")
        fields = self.section_fields(section)
        if key not in fields:
            raise ConfigurationError(f"unknown config key {section}.{key}")
        value = _parse_value(raw, fields[key].type, f"{section}.{key}")
        setattr(getattr(self, section), key, value)

    def to_ini(self):
        lines = []
        for section in self.SECTIONS:
            obj = getattr(self, section)
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_format_value(getattr(obj, k))}" for k in self.section_fields(section))
            lines.append("")
        return "\n".join(lines)

    def model_config(self):
        kwargs = {f.name: getattr(self.model, f.name) for f in dataclasses.fields(ModelConfig)}
        kwargs["seed"] = self.train.seed
        return ModelConfig(**kwargs)


def _parse_value(raw, typ, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if typ is bool or typ == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int or typ == "int":
            return int(text)
        if typ is float or typ == "float":
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None
    return text


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_overrides(items):
    """``["train.base_lr=5e-5", ...]`` -> ``{("train", "base_lr"): 5e-05, ...}``.

    Keys and values are type-checked against a default :class:`RunConfig`.
    """
    probe = RunConfig()
    patch = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if "." not in key:
            raise ConfigurationError(f"override key {key!r} needs a section prefix")
        section, name = key.split(".", 1)
        probe.set(section, name, raw)
        patch[(section, name)] = getattr(getattr(probe, section), name)
    return patch


def load_config(path=None, overrides=None):
    """Read an INI file (optional), then apply overrides on top."""
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigurationError(f"{path}: {exc}") from exc
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser[section].items():
                cfg.set(section, key, raw)
    for (section, key), value in (overrides or {}).items():
        cfg.set(section, key, value)
    return cfg
