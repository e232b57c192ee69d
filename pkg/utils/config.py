"""
Experiment configuration.

A config is a tree of dataclass sections. Files are flat TOML documents whose
keys are ``section.field`` (dotted keys or ``[section]`` tables both work);
command-line ``--set section.field=value`` overrides are parsed as TOML values.
Defaults follow data/hyperparameters.py where that table gives a value.
"""
import dataclasses
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import typing
from dataclasses import dataclass, field
from pathlib import Path

from data.hyperparameters import preset_overrides
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

DATA_SOURCES = ("sbm", "preferential", "files")
SHIFTS = ("covariate", "degree", "none")
ACTIVATIONS = ("relu", "linear")
SELECTION_MODES = ("bernoulli", "top_fraction", "random_fraction", "all", "none")
CANDIDATE_SETS = ("test_only", "all_nodes")
VARIANT_KINDS = ("loreft", "direft", "uv")
OBJECTIVES = ("iamae", "mae_uniform", "entropy_only")
DECODER_KINDS = ("gcn", "mlp", "linear")
INFERENCE_MODES = ("gated_dual_pass", "propagating")


@dataclass
class DataConfig:
    source: str = "sbm"
    edge_file: str = ""
    feature_file: str = ""
    label_file: str = ""
    split_file: str = ""
    n: int = 500
    classes: int = 4
    p_in: float = 0.05
    p_out: float = 0.005
    feature_dim: int = 16
    mean_scale: float = 1.0
    attachment: int = 3
    # None: label-blind Barabási–Albert topology
    homophily: typing.Optional[float] = 0.8
    shift: str = "covariate"
    quantile: float = 0.7
    train_fraction: float = 0.5
    val_fraction: float = 0.1


@dataclass
class BackboneConfig:
    depth: int = 2
    hidden: int = 64
    activation: str = "relu"
    dropout: float = 0.5
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 500
    patience: int = 50


@dataclass
class SelectionConfig:
    alpha_gate: float = 10.0
    # None: median entropy over the candidate set, computed once per run
    entropy_threshold: typing.Optional[float] = None
    mode: str = "bernoulli"
    fraction: float = 0.1
    candidate_set: str = "test_only"
    resample_each_epoch: bool = False


@dataclass
class InterventionConfig:
    kind: str = "loreft"
    rank: int = 8
    layers: tuple = (1,)


@dataclass
class MaskingConfig:
    rho: float = 0.5
    beta: float = 0.5
    eps: float = 1e-8


@dataclass
class SslConfig:
    gamma: float = 2.0
    lambda_e: float = 0.1
    # weight of the mean-prediction entropy bonus inside L_e
    diversity: float = 1.0
    epochs: int = 100
    lr: float = 0.01
    objective: str = "iamae"
    decoder: str = "gcn"


@dataclass
class RunConfig:
    seeds: tuple = (0, 1, 2, 3, 4)
    mode: str = "gated_dual_pass"
    out_dir: str = "runs"
    results_db: str = ""


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    intervention: InterventionConfig = field(default_factory=InterventionConfig)
    masking: MaskingConfig = field(default_factory=MaskingConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self):
        """Nested plain-data view with tuples as lists (the record written next to outputs)"""
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def flat_items(self):
        for section in dataclasses.fields(self):
            for f in dataclasses.fields(getattr(self, section.name)):
                yield f"{section.name}.{f.name}", getattr(getattr(self, section.name), f.name)

    def set(self, key, value):
        """Assign one ``section.field`` key with type coercion"""
        section_name, _, field_name = key.partition(".")
        section = getattr(self, section_name, None)
        if section is None or not dataclasses.is_dataclass(section) or not field_name:
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(section))
        if field_name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, field_name, _coerce(key, value, hints[field_name]))

    def update(self, mapping):
        for key, value in flatten_mapping(mapping).items():
            self.set(key, value)
        return self

    def validate(self):
        d, b, s, i, m, ssl, run = (self.data, self.backbone, self.selection, self.intervention,
                                   self.masking, self.ssl, self.run)
        _choice("data.source", d.source, DATA_SOURCES)
        _choice("data.shift", d.shift, SHIFTS)
        if d.source == "files":
            for key in ("edge_file", "feature_file", "label_file", "split_file"):
                if not getattr(d, key):
                    raise ConfigError(f"data.{key} is required when data.source = 'files'")
        _check(d.n >= 4, "data.n must be at least 4")
        _check(d.classes >= 2, "data.classes must be at least 2")
        _check(0.0 <= d.p_out < d.p_in <= 1.0, "expected 0 <= data.p_out < data.p_in <= 1")
        _check(d.feature_dim >= d.classes, "data.feature_dim must be at least data.classes")
        _check(0.0 < d.quantile < 1.0, "data.quantile must lie in (0, 1)")
        _check(0.0 < d.train_fraction < 1.0 and 0.0 < d.val_fraction < 1.0
               and d.train_fraction + d.val_fraction < 1.0, "data split fractions must leave test nodes")
        _check(d.attachment >= 1, "data.attachment must be positive")
        _check(d.homophily is None or 0.0 <= d.homophily <= 1.0, "data.homophily must lie in [0, 1]")

        _check(b.depth >= 1, "backbone.depth must be positive")
        _check(b.hidden >= 1, "backbone.hidden must be positive")
        _choice("backbone.activation", b.activation, ACTIVATIONS)
        _check(0.0 <= b.dropout < 1.0, "backbone.dropout must lie in [0, 1)")
        _check(b.lr > 0 and b.weight_decay >= 0, "backbone.lr must be positive, weight_decay non-negative")
        _check(b.epochs >= 0 and b.patience >= 1, "backbone.epochs must be >= 0 and patience >= 1")

        _check(s.alpha_gate > 0, "selection.alpha_gate must be positive")
        _choice("selection.mode", s.mode, SELECTION_MODES)
        _choice("selection.candidate_set", s.candidate_set, CANDIDATE_SETS)
        _check(0.0 < s.fraction <= 1.0, "selection.fraction must lie in (0, 1]")

        _choice("intervention.kind", i.kind, VARIANT_KINDS)
        _check(i.rank >= 1, "intervention.rank must be at least 1")
        _check(len(i.layers) >= 1, "intervention.layers must name at least one layer")
        _check(all(1 <= layer <= b.depth for layer in i.layers),
               f"intervention.layers must lie in 1..{b.depth} (backbone.depth)")
        hidden_dims = [b.hidden] * (b.depth - 1) + [d.classes]
        _check(all(i.rank <= hidden_dims[layer - 1] for layer in i.layers),
               "intervention.rank exceeds the width of an intervened layer")

        _check(0.0 <= m.rho <= 1.0 and 0.0 <= m.beta <= 1.0, "masking.rho and masking.beta must lie in [0, 1]")
        _check(m.eps > 0, "masking.eps must be positive")

        _check(ssl.gamma >= 1.0, "ssl.gamma must be >= 1")
        _check(ssl.lambda_e >= 0.0, "ssl.lambda_e must be >= 0")
        _check(ssl.diversity >= 0.0, "ssl.diversity must be >= 0")
        _check(ssl.epochs >= 0 and ssl.lr > 0, "ssl.epochs must be >= 0 and ssl.lr positive")
        _choice("ssl.objective", ssl.objective, OBJECTIVES)
        _choice("ssl.decoder", ssl.decoder, DECODER_KINDS)

        _check(len(run.seeds) >= 1, "run.seeds must list at least one seed")
        _choice("run.mode", run.mode, INFERENCE_MODES)
        return self


def _check(condition, message):
    if not condition:
        raise ConfigError(message)


def _choice(key, value, options):
    if value not in options:
        raise ConfigError(f"{key} must be one of {', '.join(options)}; got {value!r}")


def _coerce(key, value, annotation):
    origin = typing.get_origin(annotation)
    if origin is typing.Union:
        if value is None or value == "none":
            return None
        annotation = next(a for a in typing.get_args(annotation) if a is not type(None))
    if annotation is tuple:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{key} expects a list of integers, got {value!r}")
        return tuple(value)
    if annotation is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if annotation is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if annotation is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if annotation is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {annotation!r}")


def flatten_mapping(mapping, prefix=""):
    flat = {}
    for key, value in mapping.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_mapping(value, prefix=f"{name}."))
        else:
            flat[name] = value
    return flat


def parse_override(text):
    """``section.field=value`` with the value parsed as TOML, falling back to a bare string"""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like section.field=value, got {text!r}")
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip(), value


def load_config(path=None, preset=None, overrides=()):
    """
    Build a validated ExperimentConfig.

    Parameters:
    - path: optional TOML file
    - preset: optional dataset name from the hyperparameter table
    - overrides: iterable of ``section.field=value`` strings, applied last
    """
    config = ExperimentConfig()
    if preset:
        config.update(preset_overrides(preset))
    if path:
        path = Path(path)
        try:
            with open(path, "rb") as f:
                document = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}")
        config.update(document)
    for text in overrides:
        key, value = parse_override(text)
        config.set(key, value)
    return config.validate()


def dump_config(config, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, sort_keys=True, indent=2)
        f.write("\n")
    return path
