"""Experiment configuration: one YAML document with sections, full defaults,
unknown-key rejection and a stable content hash."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import yaml

from .synthetic import SyntheticConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    mode: str = "synthetic"            # synthetic | files
    interactions: str = ""             # files mode: interactions.tsv
    manifest: str = ""                 # files mode: manifest.tsv
    images: str = ""                   # files mode: image directory
    holdout_ratio: float = 0.3
    interaction_test_ratio: float = 0.2
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)


@dataclass(frozen=True)
class CFSection:
    model: str = "vae"                 # popularity | bpr | vae
    f: int = 16
    learning_rate: float = 0.05
    epochs: int = 40
    regularization: float = 0.1       # tuned for the vae; bpr wants ~0.002
    batch_size: int = 256
    vae_hidden: Optional[int] = None
    vae_kl_cap: float = 0.2
    vae_learning_rate: float = 1e-3
    bpr_negatives: int = 1

    def hyper(self):
        from .cf import CFHyper
        return CFHyper(f=self.f, learning_rate=self.learning_rate,
                       epochs=self.epochs, regularization=self.regularization,
                       batch_size=self.batch_size, vae_hidden=self.vae_hidden,
                       vae_kl_cap=self.vae_kl_cap,
                       vae_learning_rate=self.vae_learning_rate,
                       bpr_negatives=self.bpr_negatives)


@dataclass(frozen=True)
class GuidanceSection:
    scheme: str = "uniform"            # uniform | interaction | loss
    omega_cap: float = 5.0
    probe_hidden: Optional[int] = None
    probe_hidden_layers: int = 1
    probe_epochs: int = 200
    probe_learning_rate: float = 5e-3
    probe_batch_size: int = 64

    def probe_hyper(self):
        from .guidance import CF2LabelHyper
        return CF2LabelHyper(hidden=self.probe_hidden,
                             hidden_layers=self.probe_hidden_layers,
                             epochs=self.probe_epochs,
                             learning_rate=self.probe_learning_rate,
                             batch_size=self.probe_batch_size)


@dataclass(frozen=True)
class MTLSection:
    regime: str = "mtl_reconstruct"    # image_only | mtl_reconstruct | contrastive | sequential
    alpha: float = 1.5
    tau: float = 1.0
    epochs: int = 30
    epochs_aux: int = 15
    batch_size: int = 64
    learning_rate: float = 2e-3
    optimizer: str = "adam"
    momentum: float = 0.9
    max_grad_norm: float = 5.0
    encoder: str = "desk-small"


@dataclass(frozen=True)
class EvalSection:
    bootstrap_B: int = 1000
    level: float = 0.95
    ratios: tuple[float, ...] = (0.1, 0.25, 0.5, 0.75, 1.0)
    sweep_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    baseline: str = "image_only"


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    cf: CFSection = field(default_factory=CFSection)
    guidance: GuidanceSection = field(default_factory=GuidanceSection)
    mtl: MTLSection = field(default_factory=MTLSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0

    def canonical(self) -> dict:
        doc = dataclasses.asdict(self)
        return json.loads(json.dumps(doc, sort_keys=True))

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True,
                          separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def loss_config(self):
        from .training import LossConfig
        return LossConfig(alpha=self.mtl.alpha, omega_cap=self.guidance.omega_cap,
                          tau=self.mtl.tau, epochs=self.mtl.epochs,
                          epochs_aux=self.mtl.epochs_aux,
                          batch_size=self.mtl.batch_size,
                          learning_rate=self.mtl.learning_rate,
                          optimizer=self.mtl.optimizer,
                          momentum=self.mtl.momentum,
                          max_grad_norm=self.mtl.max_grad_norm, seed=self.seed,
                          encoder=self.mtl.encoder, latent_dim=self.cf.f)


def _build(cls, doc: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    kwargs = {}
    for name, value in doc.items():
        if isinstance(value, list):  # YAML sequences map onto tuple fields
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {where}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = dict(doc or {})
    sections = {"dataset", "cf", "guidance", "mtl", "eval", "seed"}
    unknown = set(doc) - sections
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {sorted(unknown)}")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")

    dataset_doc = dict(doc.get("dataset") or {})
    synthetic_doc = dict(dataset_doc.pop("synthetic", {}) or {})
    synthetic_doc.setdefault("seed", seed)
    synthetic = _build(SyntheticConfig, synthetic_doc, "dataset.synthetic")
    dataset = _build(DatasetConfig, {**dataset_doc, "synthetic": synthetic}, "dataset")

    return ExperimentConfig(
        dataset=dataset,
        cf=_build(CFSection, doc.get("cf") or {}, "cf"),
        guidance=_build(GuidanceSection, doc.get("guidance") or {}, "guidance"),
        mtl=_build(MTLSection, doc.get("mtl") or {}, "mtl"),
        eval=_build(EvalSection, doc.get("eval") or {}, "eval"),
        seed=seed,
    )


def load_config(path: str | Path, seed_override: Optional[int] = None
                ) -> ExperimentConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    doc = doc or {}
    if seed_override is not None:
        doc["seed"] = seed_override
        if isinstance(doc.get("dataset"), dict) and \
                isinstance(doc["dataset"].get("synthetic"), dict):
            doc["dataset"]["synthetic"].pop("seed", None)
    return config_from_dict(doc)
