"""Run configuration: one JSON document with six sections.

Every hyperparameter lives here rather than on command-line flags so a run
directory plus its config file fully determines the experiment. Unknown
keys are rejected. parse -> serialize -> parse is a fixpoint.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .datasets import ShiftSpec, SynthConfig
from .errors import ConfigurationError
from .networks import NetworkSpec

_DESCRIPTIONS: dict[str, str] = {
    "dataset.manifest": "path to an existing dataset manifest; null generates one from the knobs below",
    "dataset.image_size": "square image side in pixels (>= 16)",
    "dataset.num_classes": "number of segmentation classes including background (>= 2)",
    "dataset.num_source": "labeled source images to generate",
    "dataset.num_target": "unlabeled target training images to generate",
    "dataset.num_target_eval": "held-out labeled target images for evaluation only",
    "dataset.color_shift": "target palette rotation strength in [0,1]",
    "dataset.texture_noise_sigma": "target additive noise level (>= 0)",
    "dataset.shape_deform": "extra target blob boundary wobble in [0,1]",
    "dataset.blob_radius_lo": "min blob radius as fraction of image size (class-frequency knob)",
    "dataset.blob_radius_hi": "max blob radius as fraction of image size (class-frequency knob)",
    "dataset.seed": "dataset generation seed",
    "networks.base_channels": "channel width of the first stage of every network",
    "networks.depth": "number of encoder stages (>= 2)",
    "networks.latent_channels": "translator bottleneck channels",
    "networks.ra2b_count": "attention blocks stacked in the feature augmentor",
    "networks.noise_channels": "channels of the noise injected into the augmentor",
    "td.alpha": "weight of the cycle-consistency loss",
    "td.t_threshold": "bottleneck constraint threshold",
    "td.gamma": "update step of the constraint multipliers",
    "td.lambda_init": "initial value of both constraint multipliers",
    "td.conventional_adv": "use log(1-D) instead of the default 1-log(D) adversarial form",
    "td.lr": "translation phase learning rate (constant then linear decay, 2:1)",
    "td.epochs": "translation epochs per alternation",
    "td.batch_size": "translation minibatch size",
    "tf.beta": "pseudo-label confidence threshold",
    "tf.seg_lr": "segmenter learning rate (polynomial decay)",
    "tf.seg_poly_power": "segmenter learning-rate decay power",
    "tf.seg_momentum": "segmenter SGD momentum",
    "tf.align_lr_scale": "alignment-step learning rate as a fraction of seg_lr",
    "tf.aug_lr": "augmentor Adam learning rate",
    "tf.disc_lr": "feature discriminator Adam learning rate",
    "tf.disc_beta1": "feature discriminator Adam beta1",
    "tf.disc_beta2": "feature discriminator Adam beta2",
    "tf.epochs_step1": "segmentation training epochs per round",
    "tf.epochs_step2": "augmentor training epochs per round",
    "tf.epochs_step3": "alignment training epochs per round",
    "tf.batch_size": "feature-transfer minibatch size",
    "orchestrator.alternation_count": "outer alternations of the two phases",
    "orchestrator.seed": "master seed for initialization and training draws",
    "orchestrator.reinit_discriminators": "re-initialize all discriminators at each alternation",
    "eval.gap_holdout_fraction": "holdout fraction of the domain-gap probe",
    "eval.gap_probe_seeds": "split shuffles averaged by the domain-gap probe",
    "eval.batch_size": "inference batch size during evaluation",
}


@dataclass
class DatasetSection:
    manifest: str | None = None
    image_size: int = 32
    num_classes: int = 2
    num_source: int = 60
    num_target: int = 60
    num_target_eval: int = 40
    color_shift: float = 0.55
    texture_noise_sigma: float = 0.05
    shape_deform: float = 0.25
    blob_radius_lo: float = 0.18
    blob_radius_hi: float = 0.30
    seed: int = 0

    def to_synth_config(self) -> SynthConfig:
        return SynthConfig(
            image_size=self.image_size, num_classes=self.num_classes,
            num_source=self.num_source, num_target=self.num_target,
            num_target_eval=self.num_target_eval,
            shift=ShiftSpec(self.color_shift, self.texture_noise_sigma, self.shape_deform),
            seed=self.seed, blob_radius_range=(self.blob_radius_lo, self.blob_radius_hi))


@dataclass
class NetworksSection:
    base_channels: int = 12
    depth: int = 3
    latent_channels: int = 8
    ra2b_count: int = 16
    noise_channels: int = 4

    def to_network_spec(self, num_classes: int) -> NetworkSpec:
        return NetworkSpec(base_channels=self.base_channels, depth=self.depth,
                           num_classes=num_classes, latent_channels=self.latent_channels,
                           ra2b_count=self.ra2b_count, noise_channels=self.noise_channels)


@dataclass
class TdSection:
    alpha: float = 10.0
    t_threshold: float = 200.0
    gamma: float = 1.0e-6
    lambda_init: float = 1.0e-4
    conventional_adv: bool = False
    lr: float = 1.0e-3
    epochs: int = 10
    batch_size: int = 4


@dataclass
class TfSection:
    beta: float = 0.9
    seg_lr: float = 1.0e-2
    seg_poly_power: float = 0.9
    seg_momentum: float = 0.9
    align_lr_scale: float = 0.05
    aug_lr: float = 1.0e-4
    disc_lr: float = 1.0e-4
    disc_beta1: float = 0.9
    disc_beta2: float = 0.99
    epochs_step1: int = 4
    epochs_step2: int = 2
    epochs_step3: int = 2
    batch_size: int = 4


@dataclass
class OrchestratorSection:
    alternation_count: int = 3
    seed: int = 0
    reinit_discriminators: bool = False


@dataclass
class EvalSection:
    gap_holdout_fraction: float = 0.5
    gap_probe_seeds: int = 3
    batch_size: int = 8


@dataclass
class RunConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    networks: NetworksSection = field(default_factory=NetworksSection)
    td: TdSection = field(default_factory=TdSection)
    tf: TfSection = field(default_factory=TfSection)
    orchestrator: OrchestratorSection = field(default_factory=OrchestratorSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        self.dataset.to_synth_config()  # raises on bad dataset knobs
        if self.orchestrator.alternation_count < 1:
            raise ConfigurationError("orchestrator.alternation_count must be >= 1")
        if not (0 < self.tf.beta < 1):
            raise ConfigurationError("tf.beta must be in (0,1)")
        for name, value in (("td.epochs", self.td.epochs),
                            ("td.batch_size", self.td.batch_size),
                            ("tf.batch_size", self.tf.batch_size),
                            ("eval.batch_size", self.eval.batch_size)):
            if value < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name, value in (("td.alpha", self.td.alpha),
                            ("td.t_threshold", self.td.t_threshold),
                            ("td.gamma", self.td.gamma),
                            ("td.lambda_init", self.td.lambda_init)):
            if value <= 0:
                raise ConfigurationError(f"{name} must be positive")


_SECTIONS = {f.name: f.type for f in fields(RunConfig)}


def config_to_dict(cfg: RunConfig) -> dict:
    return {name: dataclasses.asdict(getattr(cfg, name)) for name in _SECTIONS}


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("config document must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name in _SECTIONS:
        section_cls = type(getattr(RunConfig(), name))
        payload = doc.get(name, {})
        if not isinstance(payload, dict):
            raise ConfigurationError(f"config section {name!r} must be an object")
        known = {f.name for f in fields(section_cls)}
        bad = set(payload) - known
        if bad:
            raise ConfigurationError(f"unknown keys in section {name!r}: {sorted(bad)}")
        kwargs[name] = section_cls(**payload)
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config is not valid JSON: {e}") from e
    return config_from_dict(doc)


def save_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config_to_dict(cfg), indent=1, sort_keys=True) + "\n")
    return path


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def config_resume_hash(cfg: RunConfig) -> str:
    """Hash of everything that must match for a checkpoint resume.

    alternation_count is excluded: extending a finished run by more
    alternations is the supported resume pattern.
    """
    doc = config_to_dict(cfg)
    doc["orchestrator"] = dict(doc["orchestrator"])
    doc["orchestrator"].pop("alternation_count")
    blob = json.dumps(doc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def describe_keys() -> str:
    """Flat listing of every config key with its default, for --help."""
    lines = []
    base = RunConfig()
    for section in _SECTIONS:
        for f in fields(getattr(base, section)):
            key = f"{section}.{f.name}"
            default = getattr(getattr(base, section), f.name)
            desc = _DESCRIPTIONS.get(key, "")
            lines.append(f"  {key} (default {default!r}): {desc}")
    return "\n".join(lines)
