"""Experiment configuration: one JSON document layered over a named profile."""

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from .model import ArchitectureConfig
from .scoring import DetectionConfig
from .synth import FaultPattern, ProcessParams


@dataclass
class PathsConfig:
    """Stage output directories, relative to the experiment root (``--out``)."""

    dataset: str = "dataset"
    model: str = "model"
    scores: str = "scores"
    eval: str = "eval"
    report: str = "report"

    def validate(self):
        names = [self.dataset, self.model, self.scores, self.eval, self.report]
        resolved = [str(Path(n)) for n in names]
        if len(set(resolved)) != len(resolved):
            raise ValueError(f"stage paths must be distinct, got {names}")


@dataclass
class ExperimentConfig:
    profile: str = "defaults"
    seed: int = 0
    process: ProcessParams = field(default_factory=ProcessParams)
    fault_pattern: FaultPattern = field(default_factory=FaultPattern)
    train_layers: int = 5
    test_deviations: List[float] = field(default_factory=lambda: [13, 11, 9, 5, 3])
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        # the experiment seed drives every stage
        self.process.seed = self.seed
        self.architecture.seed = self.seed
        self.validate()

    def validate(self):
        self.paths.validate()
        if self.train_layers < 1:
            raise ValueError("need at least one training layer")
        if self.process.lines_per_layer < self.architecture.p + self.architecture.q:
            raise ValueError("lines_per_layer must be at least p+q")
        if (self.process.frame_height // 2, self.process.frame_width // 2) != (
                self.architecture.height, self.architecture.width):
            raise ValueError("architecture frame size must be half the camera frame size (2x2 downsampling)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fault_pattern"]["durations"] = list(self.fault_pattern.durations)
        d["architecture"] = self.architecture.to_dict()
        d["detection"] = self.detection.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        fp = d.get("fault_pattern", {})
        if "durations" in fp:
            fp["durations"] = tuple(fp["durations"])
        return cls(
            profile=d.get("profile", "defaults"),
            seed=int(d.get("seed", 0)),
            process=ProcessParams.from_dict(d.get("process", {})),
            fault_pattern=FaultPattern(**fp),
            train_layers=int(d.get("train_layers", 5)),
            test_deviations=list(d.get("test_deviations", [13, 11, 9, 5, 3])),
            architecture=ArchitectureConfig.from_dict(d.get("architecture", {})),
            detection=DetectionConfig.from_dict(d.get("detection", {})),
            paths=PathsConfig(**d.get("paths", {})),
        )


# Overrides applied on top of the dataclass defaults, which already match the
# published experiment (p=q=3, lambda=1, 500 epochs, detrend 20, 20% validation).
PROFILES = {
    "defaults": {"architecture": {"augment_copies": 1}},
    "desk": {
        "architecture": {"epochs": 60, "snippets_per_epoch": 512, "max_val_snippets": 512, "augment_copies": 1},
    },
    "smoke": {
        "process": {"lines_per_layer": 40, "frames_per_line": 4, "frame_height": 32, "frame_width": 32},
        "fault_pattern": {"first_line": 8, "spacing": 12, "end_margin": 4},
        "architecture": {"height": 16, "width": 16, "base_width": 4, "latent_width": 16, "epochs": 3,
                         "snippets_per_epoch": 64, "max_val_snippets": 32, "augment_copies": 1},
        "detection": {"window": [4, 4], "detrend_window": 6},
    },
}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def profile_dict(name: str) -> dict:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return _merge({"profile": name}, PROFILES[name])


def config_from_overrides(overrides: Optional[dict] = None, seed: Optional[int] = None) -> ExperimentConfig:
    overrides = overrides or {}
    d = _merge(profile_dict(overrides.get("profile", "defaults")), overrides)
    if seed is not None:
        d["seed"] = seed
    return ExperimentConfig.from_dict(d)


def load_config(path=None, seed: Optional[int] = None) -> ExperimentConfig:
    """Read a JSON config (or none) and layer it over its profile."""
    overrides = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            overrides = json.load(fh)
        if not isinstance(overrides, dict):
            raise ValueError(f"{path}: config must be a JSON object")
    return config_from_overrides(overrides, seed)
