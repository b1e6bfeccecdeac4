"""Experiment configuration: one JSON file, every key overridable from the command line.

Key schema (all optional; defaults are the dataclass field values below)::

    seed, snr_grid, adapt_snr_grid, codebook_size, steps, guidance_w,
    griffin_lim_iters, max_lag, noise_ids, workers,
    ablations: {no_vq, skip_ns}
    paths: {manifest, noise_dir, work_dir, ns_ckpt, vc_ckpt, vc_adapted_ckpt, eval_dir, report_dir}
    train: {epochs, ns_epochs, adapt_epochs, batch_size, crop_frames, crops_per_utterance,
            ns_lr, vc_lr, spk_steps, vq_warmup_fraction, ns_snr_range, adapt_noisy_fraction,
            adapt_drop_prob, adapt_bandlimit_prob}
    external: {mos_url, asr_url, timeout}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .degrade import ADAPT_SNR_GRID, EVAL_SNR_GRID


class ConfigError(ValueError):
    pass


@dataclass
class Ablations:
    no_vq: bool = False
    skip_ns: bool = False


@dataclass
class Paths:
    manifest: str | None = None
    noise_dir: str | None = None
    work_dir: str = "runs/default"
    ns_ckpt: str | None = None
    vc_ckpt: str | None = None
    vc_adapted_ckpt: str | None = None
    eval_dir: str | None = None
    report_dir: str | None = None

    def resolve(self, name) -> Path:
        value = getattr(self, name)
        if value is not None:
            return Path(value)
        work = Path(self.work_dir)
        defaults = {
            "ns_ckpt": work / "ns.pt",
            "vc_ckpt": work / "vc.pt",
            "vc_adapted_ckpt": work / "vc_adapted.pt",
            "eval_dir": work / "eval",
            "report_dir": work / "reports",
        }
        if name not in defaults:
            raise ConfigError(f"paths.{name} is not set")
        return defaults[name]


@dataclass
class TrainConfig:
    epochs: int = 25
    ns_epochs: int = 25
    adapt_epochs: int = 10
    batch_size: int = 8
    crop_frames: int = 64
    crops_per_utterance: int = 4
    ns_lr: float = 2e-4
    vc_lr: float = 1e-3
    spk_steps: int = 400
    vq_warmup_fraction: float = 0.2
    ns_snr_range: list = field(default_factory=lambda: [0.0, 25.0])
    adapt_noisy_fraction: float = 0.5
    adapt_drop_prob: float = 0.3
    adapt_bandlimit_prob: float = 0.2


@dataclass
class External:
    mos_url: str | None = None
    asr_url: str | None = None
    timeout: float = 10.0


@dataclass
class ExperimentConfig:
    seed: int = 7
    snr_grid: list = field(default_factory=lambda: list(EVAL_SNR_GRID))
    adapt_snr_grid: list = field(default_factory=lambda: list(ADAPT_SNR_GRID))
    codebook_size: int = 128
    steps: int = 30
    guidance_w: float = 1.0
    griffin_lim_iters: int = 32
    max_lag: int = 1600
    noise_ids: list | None = None
    workers: int = 1
    ablations: Ablations = field(default_factory=Ablations)
    paths: Paths = field(default_factory=Paths)
    train: TrainConfig = field(default_factory=TrainConfig)
    external: External = field(default_factory=External)

    def __post_init__(self):
        if not self.snr_grid or not self.adapt_snr_grid:
            raise ConfigError("SNR grids must be nonempty")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}".lstrip("."))
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return from_dict(data)


def override(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """Set ``a.b`` style key in place."""
    target = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if not is_dataclass(target) or not hasattr(target, part):
            raise ConfigError(f"unknown config key {dotted}")
        target = getattr(target, part)
    if not is_dataclass(target) or not hasattr(target, parts[-1]):
        raise ConfigError(f"unknown config key {dotted}")
    setattr(target, parts[-1], value)
    return cfg
