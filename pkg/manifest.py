import copy
import json
import os
import typing
from dataclasses import asdict, dataclass, field, fields

import yaml
from yaml.loader import SafeLoader

from data_loader import AugmentationConfig, DataConfig
from fedrg.directional_stats import EmConfig, TemperingConfig
from fedrg.errors import ManifestError
from fedrg.federation import RoundConfig
from fedrg.geometry_evidence import EvidenceConfig, GmmConfig
from fedrg.learner import LossConfig, ModelConfig
from fedrg.noise_model import NoiseSpec

SETTINGS_FILE = "config.yaml"

DEFAULT_SETTINGS = {
    "logging": {
        "level": "INFO",
        "format": "%(asctime)s %(levelname)s %(name)s: %(message)s",
    },
    "output": {
        "env_var": "FEDRG_OUTPUT_DIR",
    },
}

SECTIONS = {
    "data": DataConfig,
    "augmentation": AugmentationConfig,
    "noise": NoiseSpec,
    "model": ModelConfig,
    "loss": LossConfig,
    "rounds": RoundConfig,
    "vmf": EmConfig,
    "tempering": TemperingConfig,
    "evidence": EvidenceConfig,
    "gmm": GmmConfig,
}


@dataclass(frozen=True)
class RunManifest:
    data: DataConfig = field(default_factory=DataConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    vmf: EmConfig = field(default_factory=EmConfig)
    tempering: TemperingConfig = field(default_factory=TemperingConfig)
    evidence: EvidenceConfig = field(default_factory=EvidenceConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    output_dir: str = "runs/default"
    master_seed: int = 0

    def validate(self):
        for name in SECTIONS:
            section = getattr(self, name)
            if name == "rounds":
                section.validate(num_clients=self.data.num_clients, prefix=name)
            else:
                section.validate(prefix=name)
        if isinstance(self.master_seed, bool) or not isinstance(self.master_seed, int) or self.master_seed < 0:
            raise ManifestError("master_seed", f"must be a non-negative integer (got {self.master_seed!r})")
        if not self.output_dir:
            raise ManifestError("output_dir", "must be a non-empty path")
        return self

    def to_dict(self):
        return asdict(self)


# Load runtime settings from file
def load_settings(config_file=SETTINGS_FILE):
    if os.path.exists(config_file):
        with open(config_file, 'r') as file:
            loaded = yaml.load(file, Loader=SafeLoader) or {}
        settings = copy.deepcopy(DEFAULT_SETTINGS)
        for section, values in loaded.items():
            settings.setdefault(section, {}).update(values or {})
        return settings
    else:
        # Create the default settings file
        settings = copy.deepcopy(DEFAULT_SETTINGS)
        with open(config_file, 'w') as file:
            yaml.dump(settings, file)
        return settings


def _coerce(path, annotation, value):
    allowed = typing.get_args(annotation) if typing.get_origin(annotation) is typing.Union else (annotation,)
    if value is None:
        if type(None) in allowed:
            return None
        raise ManifestError(path, "may not be null")
    for kind in allowed:
        if kind is bool and isinstance(value, bool):
            return value
        if kind is int and isinstance(value, int) and not isinstance(value, bool):
            return value
        if kind is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if kind is str and isinstance(value, str):
            return value
    names = " or ".join(getattr(kind, "__name__", str(kind)) for kind in allowed)
    raise ManifestError(path, f"expected {names}, got {type(value).__name__} {value!r}")


def _build_section(name, cls, payload):
    if not isinstance(payload, dict):
        raise ManifestError(name, f"expected a mapping, got {type(payload).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    for key in payload:
        if key not in known:
            raise ManifestError(f"{name}.{key}", "unknown field")
    return cls(**{key: _coerce(f"{name}.{key}", hints[key], value) for key, value in payload.items()})


def manifest_from_dict(payload):
    """Build and validate a RunManifest, rejecting unknown fields at every level."""
    if not isinstance(payload, dict):
        raise ManifestError("<root>", f"expected a mapping, got {type(payload).__name__}")
    kwargs = {}
    for key, value in payload.items():
        if key in SECTIONS:
            kwargs[key] = _build_section(key, SECTIONS[key], value)
        elif key == "output_dir":
            kwargs[key] = _coerce(key, str, value)
        elif key == "master_seed":
            kwargs[key] = _coerce(key, int, value)
        else:
            raise ManifestError(key, "unknown field")
    return RunManifest(**kwargs).validate()


def load_manifest(path):
    """Read a JSON (or .yaml/.yml) manifest file."""
    if not os.path.exists(path):
        raise ManifestError("<file>", f"manifest not found: {path}")
    with open(path, 'r') as file:
        try:
            if path.endswith((".yaml", ".yml")):
                payload = yaml.load(file, Loader=SafeLoader)
            else:
                payload = json.load(file)
        except (json.JSONDecodeError, yaml.YAMLError) as exc:
            raise ManifestError("<file>", f"cannot parse {path}: {exc}") from exc
    return manifest_from_dict(payload)


def override(manifest, dotted, value):
    """Return a revalidated copy with one dotted field replaced."""
    payload = manifest.to_dict()
    target = payload
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not isinstance(target.get(part), dict):
            raise ManifestError(dotted, "unknown field")
        target = target[part]
    if parts[-1] not in target:
        raise ManifestError(dotted, "unknown field")
    target[parts[-1]] = value
    return manifest_from_dict(payload)


def write_manifest(manifest, path):
    with open(path, 'w') as file:
        json.dump(manifest.to_dict(), file, indent=2, sort_keys=True)
