"""Experiment configuration: flat ``key = value`` text with dotted prefixes.

Every key has a default; the file only needs the keys that differ. Values
are coerced from the field's default type, and comma lists become integer
tuples. ``save_config`` writes the fully resolved configuration in sorted
key order, so saved copies are byte-stable.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path


@dataclass
class ExperimentConfig:
    # dataset
    dataset_path: str = "data"
    dataset_count: int = 500
    train_fraction: float = 0.8
    resolution: int = 16
    image_size: int = 32
    view_spacing_deg: float = 15.0
    # camera
    elevation_deg: float = 30.0
    radius: float = 2.0
    depth_samples: int = 32
    # model
    variant: str = "R2E-R3D"
    enc_channels: tuple[int, ...] = (16, 32, 64)
    dec_channels: tuple[int, ...] = (64, 32, 8)
    kernel: int = 3
    # supervision loss
    lambda_vox: float = 0.5
    lambda_proj: float = 0.5
    projection_views: int = 4
    # rewards
    lambda_v: float = 10.0
    lambda_p: float = 10.0
    lambda_m: float = 0.04
    tau: float = 0.4
    flip_movement_sign: bool = False
    # planner
    sigma_deg: float = 15.0
    planner_hidden: int = 128
    episode_len: int = 6
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # reconstruction training
    batch_size: int = 16
    epochs: int = 40
    seq_len: int = 5
    seed: int = 0
    val_shapes: int = 24
    # planner training
    planner_episodes: int = 960
    planner_batch_episodes: int = 8
    planner_lr: float = 1e-3
    # evaluation
    eval_episodes_per_shape: int = 2
    # timing column in metrics CSVs (off by default: keeps reruns byte-identical)
    timing_enabled: bool = False


KEYMAP = {
    "dataset.path": "dataset_path",
    "dataset.count": "dataset_count",
    "dataset.train_fraction": "train_fraction",
    "dataset.resolution": "resolution",
    "dataset.image_size": "image_size",
    "dataset.view_spacing_deg": "view_spacing_deg",
    "camera.elevation_deg": "elevation_deg",
    "camera.radius": "radius",
    "camera.depth_samples": "depth_samples",
    "model.variant": "variant",
    "model.enc_channels": "enc_channels",
    "model.dec_channels": "dec_channels",
    "model.kernel": "kernel",
    "loss.lambda_vox": "lambda_vox",
    "loss.lambda_proj": "lambda_proj",
    "loss.projection_views": "projection_views",
    "reward.lambda_v": "lambda_v",
    "reward.lambda_p": "lambda_p",
    "reward.lambda_m": "lambda_m",
    "reward.tau": "tau",
    "reward.flip_movement_sign": "flip_movement_sign",
    "planner.sigma_deg": "sigma_deg",
    "planner.hidden": "planner_hidden",
    "planner.episode_len": "episode_len",
    "optim.lr": "lr",
    "optim.beta1": "beta1",
    "optim.beta2": "beta2",
    "optim.eps": "eps",
    "train.batch_size": "batch_size",
    "train.epochs": "epochs",
    "train.seq_len": "seq_len",
    "train.seed": "seed",
    "train.val_shapes": "val_shapes",
    "planner_train.episodes": "planner_episodes",
    "planner_train.batch_episodes": "planner_batch_episodes",
    "planner_train.lr": "planner_lr",
    "eval.episodes_per_shape": "eval_episodes_per_shape",
    "timing.enabled": "timing_enabled",
}

_FIELDMAP = {v: k for k, v in KEYMAP.items()}


class ConfigError(Exception):
    pass


def _coerce(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(tok) for tok in raw.replace(",", " ").split())
    return raw


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the file's keys, then explicit overrides."""
    cfg = ExperimentConfig()
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in KEYMAP:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            attr = KEYMAP[key]
            default = getattr(cfg, attr)
            values[attr] = _coerce(raw.strip(), default)
    if overrides:
        values.update(overrides)
    return replace(cfg, **values)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(e) for e in v)
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def save_config(cfg: ExperimentConfig, path) -> None:
    lines = []
    for f in fields(cfg):
        lines.append(f"{_FIELDMAP[f.name]} = {format_value(getattr(cfg, f.name))}")
    Path(path).write_text("\n".join(sorted(lines)) + "\n")


def projection_azimuths(cfg: ExperimentConfig) -> list[float]:
    """Evenly spaced azimuths used by the projection loss and reward."""
    n = cfg.projection_views
    if n < 1:
        raise ConfigError("at least one projection view is required")
    return [360.0 * i / n for i in range(n)]
