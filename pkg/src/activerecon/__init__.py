"""Active multi-view voxel reconstruction with a learned view planner."""

from . import autodiff, baselines, camera, config, dataset, harness, nets, planner, rewards

__all__ = [
    "autodiff",
    "baselines",
    "camera",
    "config",
    "dataset",
    "harness",
    "nets",
    "planner",
    "rewards",
]
