"""Experiment configuration: a flat TOML schema with strict keys.

Every run is a pure function of one config (all randomness flows from the
named seed), so two runs from the same file produce byte-identical
outputs.  Unknown keys are rejected to catch typos.  sigma_min/sigma_max
of 0 mean "calibrate from the training images".
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    seed: int = 7
    image_size: int = 32
    n_train: int = 256
    n_val: int = 32
    n_test: int = 32
    # phantom content
    background: float = 0.05
    tissue: float = 0.35
    texture_amplitude: float = 0.08
    blob_min: float = 0.45
    blob_max: float = 0.95
    # lesion simulation
    lesion_load: int = 20
    lesion_radius_min: float = 1.0
    lesion_radius_max: float = 3.0
    lesion_factor: float = 1.5
    # noise schedule (0 => calibrate)
    sigma_min: float = 0.0
    sigma_max: float = 0.0
    n_scales: int = 10
    calib_subsample: int = 64
    # patch features
    patch_size: int = 4
    pos_dim: int = 16
    ctx_dim: int = 32
    # score model
    score_channels: list = field(default_factory=lambda: [8, 16, 32])
    score_iterations: int = 3000
    score_batch: int = 16
    score_lr: float = 1e-3
    batch_doubling: bool = True
    # conditional flow
    flow_blocks: int = 6
    flow_hidden: int = 64
    gmm_components: int = 5
    flow_iterations: int = 2000
    flow_batch_images: int = 8
    flow_lr: float = 3e-3
    # baseline
    baseline_components: int = 3
    # run control
    method: str = "both"
    snapshot_every: int = 500

    def __post_init__(self):
        if self.method not in ("spatial", "baseline", "both"):
            raise ConfigError(f"method must be spatial|baseline|both, got {self.method!r}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} must divide image_size {self.image_size}")

    @classmethod
    def load(cls, path=None, **overrides):
        """Config from a TOML file (defaults when path is None) plus overrides.

        Override values of None are ignored, so CLI flags can pass through
        unset options.
        """
        data = {}
        if path is not None:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown override: {key}")
            if value is not None:
                data[key] = value
        return cls(**data)

    def to_dict(self):
        return asdict(self)
