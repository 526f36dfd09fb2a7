"""Non-learned view-selection strategies used as comparison planners.

All planners pick from the unvisited grid azimuths and never revisit a view
while candidates remain; ties always break toward the smallest azimuth so
results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .camera import grid_azimuths
from .nets import ReconSession
from .rewards import circular_distance, shannon_entropy


@dataclass
class ViewBudget:
    """Candidate azimuths and the ones already spent."""

    candidates: tuple[float, ...] = field(default_factory=lambda: tuple(grid_azimuths()))
    visited: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidate views must be distinct")
        bad = [v for v in self.visited if v not in self.candidates]
        if bad:
            raise ValueError(f"visited views {bad} are not candidates")

    def unvisited(self) -> list[float]:
        return [c for c in self.candidates if c not in self.visited]

    def visit(self, azimuth: float) -> None:
        if azimuth in self.visited:
            raise ValueError(f"view {azimuth} was already visited")
        if azimuth not in self.candidates:
            raise ValueError(f"view {azimuth} is not a candidate")
        self.visited.append(azimuth)


def random_planner(budget: ViewBudget, rng: np.random.Generator) -> float:
    """Uniform choice over the unvisited candidates."""
    options = budget.unvisited()
    if not options:
        raise ValueError("all candidate views have been visited")
    return float(options[rng.integers(len(options))])


def farthest_planner(budget: ViewBudget) -> float:
    """Unvisited candidate maximizing the minimum circle distance to the past."""
    if not budget.visited:
        raise ValueError("farthest planner needs at least one visited view")
    options = budget.unvisited()
    if not options:
        raise ValueError("all candidate views have been visited")
    best = None
    best_d = -1.0
    for c in options:  # ascending order makes ties pick the smallest azimuth
        d = min(circular_distance(c, v) for v in budget.visited)
        if d > best_d:
            best, best_d = c, d
    return float(best)


def greedy_entropy_planner(budget: ViewBudget, session: ReconSession,
                           image_for_view: Callable[[float], np.ndarray]) -> float:
    """One-step-greedy next best view: probe each candidate through the model
    and pick the one whose predicted volume has the least Shannon entropy.

    Probing uses ``session.peek``, which never mutates the recurrent state.
    """
    options = budget.unvisited()
    if not options:
        raise ValueError("all candidate views have been visited")
    if len(options) == 1:
        return float(options[0])
    best = None
    best_h = None
    for c in options:
        vol = session.peek(image_for_view(c))
        h = shannon_entropy(vol)
        if best_h is None or h < best_h:
            best, best_h = c, h
    return float(best)
