"""Run configuration: a flat, sectioned key=value file format with a JSON
alternative, plus a writer whose output reloads to an identical config.

Grammar of the text format (INI as understood by configparser):

    [model]             ModelConfig fields
    [lora]              "enabled" plus LoraConfig fields; omitted = disabled
    [train]             TrainConfig fields except the loss weights
    [weights]           LossWeights fields
    [data]              training/eval data sources and synthetic-task sizes
    [run]               output_dir

Values are int/float/bool/string scalars; tuples (LoRA targets) are written
as comma-separated lists; optional fields use the literal ``none``. A file
whose first non-blank character is ``{`` (or a ``.json`` path) is parsed as
JSON with the same section/key structure.
"""

import configparser
import dataclasses
import json
import os

from .losses import LossWeights
from .model import LoraConfig, ModelConfig
from .trainer import TrainConfig

_BOOL_WORDS = {
    "1": True,
    "yes": True,
    "true": True,
    "on": True,
    "0": False,
    "no": False,
    "false": False,
    "off": False,
}

# Fields whose value may be None; they serialize as the literal "none".
_OPTIONAL = {
    ("train", "micro_batch_size"),
    ("data", "train_path"),
    ("data", "eval_corpus"),
}


@dataclasses.dataclass(frozen=True)
class DataConfig:
    """Where training examples and the eval corpus come from.

    With train_path unset, training examples come from the seeded synthetic
    task sized by n_train/n_eval/n_keys; with eval_corpus unset, evaluation
    uses the synthetic task's own corpus.
    """

    train_path: str = None
    eval_corpus: str = None
    n_train: int = 2000
    n_eval: int = 100
    n_keys: int = 500

    def validate(self):
        for name in ("n_train", "n_eval", "n_keys"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.train_path is not None and not os.path.isfile(self.train_path):
            raise ValueError(f"train_path does not exist: {self.train_path}")
        if self.eval_corpus is not None:
            if not os.path.isdir(self.eval_corpus):
                raise ValueError(f"eval_corpus does not exist: {self.eval_corpus}")
            for fname in ("documents.jsonl", "queries.jsonl", "qrels.jsonl"):
                if not os.path.isfile(os.path.join(self.eval_corpus, fname)):
                    raise ValueError(
                        f"eval_corpus is missing {fname}: {self.eval_corpus}"
                    )


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """Everything one training or evaluation run needs."""

    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    lora: LoraConfig = None
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    output_dir: str = "runs/run"

    def validate(self):
        self.model.validate()
        if self.lora is not None:
            self.lora.validate()
        self.train.validate()
        self.data.validate()
        if not self.output_dir:
            raise ValueError("output_dir must be a non-empty path")
        os.makedirs(self.output_dir, exist_ok=True)
        if not os.access(self.output_dir, os.W_OK):
            raise ValueError(f"output_dir is not writable: {self.output_dir}")


def _coerce(raw, typ, where):
    """Parse a raw config value (string or JSON scalar) as the field type."""
    if raw is None:
        raise ValueError(f"missing value for {where}")
    if typ is bool:
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.strip().lower() in _BOOL_WORDS:
            return _BOOL_WORDS[raw.strip().lower()]
        raise ValueError(f"invalid value {raw!r} for {where}: expected a boolean")
    if typ is int:
        if isinstance(raw, bool):
            raise ValueError(f"invalid value {raw!r} for {where}: expected an integer")
        if isinstance(raw, int):
            return raw
        try:
            return int(str(raw).strip())
        except ValueError:
            raise ValueError(
                f"invalid value {raw!r} for {where}: expected an integer"
            ) from None
    if typ is float:
        if isinstance(raw, bool):
            raise ValueError(f"invalid value {raw!r} for {where}: expected a number")
        if isinstance(raw, (int, float)):
            return float(raw)
        try:
            return float(str(raw).strip())
        except ValueError:
            raise ValueError(
                f"invalid value {raw!r} for {where}: expected a number"
            ) from None
    if typ is tuple:
        if isinstance(raw, (list, tuple)):
            return tuple(str(x) for x in raw)
        return tuple(part.strip() for part in str(raw).split(",") if part.strip())
    return str(raw)


def _field_types(cls, skip=()):
    return {
        f.name: f.type
        for f in dataclasses.fields(cls)
        if f.name not in skip
    }


_MODEL_FIELDS = _field_types(ModelConfig)
_LORA_FIELDS = _field_types(LoraConfig)
_TRAIN_FIELDS = _field_types(TrainConfig, skip=("weights",))
_WEIGHT_FIELDS = _field_types(LossWeights)
_DATA_FIELDS = _field_types(DataConfig)

_SECTION_FIELDS = {
    "model": _MODEL_FIELDS,
    "lora": dict(_LORA_FIELDS, enabled=bool),
    "train": _TRAIN_FIELDS,
    "weights": _WEIGHT_FIELDS,
    "data": _DATA_FIELDS,
    "run": {"output_dir": str},
}

# Dataclass field annotations arrive as strings under from __future__ or as
# types otherwise; normalize to the plain types _coerce handles.
_TYPE_NAMES = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple}


def _normalize(typ):
    if isinstance(typ, str):
        return _TYPE_NAMES.get(typ, str)
    return typ if typ in (int, float, bool, str, tuple) else str


def _parse_section(name, items, fields):
    """Coerce one section's raw key/value pairs against its field table."""
    out = {}
    for key, raw in items.items():
        if key not in fields:
            raise ValueError(f"unknown config key {name}.{key}")
        where = f"{name}.{key}"
        if (name, key) in _OPTIONAL and (
            raw is None or (isinstance(raw, str) and raw.strip().lower() == "none")
        ):
            out[key] = None
            continue
        out[key] = _coerce(raw, _normalize(fields[key]), where)
    return out


def config_from_mapping(mapping):
    """Build a RunConfig from {section: {key: value}} without validating."""
    unknown = set(mapping) - set(_SECTION_FIELDS)
    if unknown:
        raise ValueError(f"unknown config section [{sorted(unknown)[0]}]")
    parsed = {
        name: _parse_section(name, dict(mapping.get(name, {})), fields)
        for name, fields in _SECTION_FIELDS.items()
    }

    lora_items = parsed["lora"]
    enabled = lora_items.pop("enabled", bool(lora_items))
    lora = LoraConfig(**lora_items) if enabled else None

    weights = LossWeights(**parsed["weights"])
    train = TrainConfig(weights=weights, **parsed["train"])
    return RunConfig(
        model=ModelConfig(**parsed["model"]),
        lora=lora,
        train=train,
        data=DataConfig(**parsed["data"]),
        output_dir=parsed["run"].get("output_dir", RunConfig.output_dir),
    )


def load_config(path):
    """Read a RunConfig from an INI-style or JSON file (not yet validated)."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if path.endswith(".json") or stripped.startswith("{"):
        try:
            mapping = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON: {exc}") from None
        if not isinstance(mapping, dict) or not all(
            isinstance(v, dict) for v in mapping.values()
        ):
            raise ValueError(f"{path}: JSON config must map sections to objects")
        return config_from_mapping(mapping)
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=path)
    except configparser.Error as exc:
        raise ValueError(f"{path}: {exc}") from None
    return config_from_mapping({s: dict(parser.items(s)) for s in parser.sections()})


def config_to_mapping(config):
    """RunConfig -> {section: {key: value}} mirroring the file grammar."""
    if config.lora is not None:
        lora_items = dataclasses.asdict(config.lora)
        lora_items["targets"] = ",".join(config.lora.targets)
        lora = dict(enabled=True, **lora_items)
    else:
        lora = {"enabled": False}
    return {
        "model": dataclasses.asdict(config.model),
        "lora": lora,
        "train": {
            k: v
            for k, v in dataclasses.asdict(config.train).items()
            if k != "weights"
        },
        "weights": dataclasses.asdict(config.train.weights),
        "data": dataclasses.asdict(config.data),
        "run": {"output_dir": config.output_dir},
    }


def write_config(config, path):
    """Persist a RunConfig in the text format; reloading reproduces it."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, items in config_to_mapping(config).items():
        parser[section] = {
            key: "none" if value is None else str(value)
            for key, value in items.items()
        }
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
