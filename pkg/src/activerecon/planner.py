"""The learned view-planning policy and its REINFORCE training loss.

The policy embeds the previous view as (sin, cos) through a learned affine
layer, fuses it with the flattened encoder feature by elementwise product
(the glimpse), aggregates glimpses with a vector GRU, and regresses the next
view as a (sin, cos) pair so the output lives on the circle. A separate head
predicts the per-step return baseline; it reads a detached copy of the
hidden state, so policy and baseline gradients never mix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rewards import RewardBreakdown, circular_distance, returns as returns_of

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def snap_to_available(azimuth: float, spacing: float) -> float:
    """Nearest multiple of ``spacing`` on the circle; ties pick the smaller angle."""
    if spacing <= 0 or abs(360.0 / spacing - round(360.0 / spacing)) > 1e-9:
        raise ValueError(f"view spacing must divide 360, got {spacing}")
    az = azimuth % 360.0
    lo = (math.floor(az / spacing) * spacing) % 360.0
    hi = (math.floor(az / spacing) + 1) * spacing % 360.0
    d_lo = circular_distance(az, lo)
    d_hi = circular_distance(az, hi)
    if d_lo < d_hi:
        return lo
    if d_hi < d_lo:
        return hi
    return min(lo, hi)


@dataclass
class SampledView:
    azimuth: float      # wrapped into [0, 360)
    raw: float          # the unwrapped normal draw the log-density refers to
    log_prob: float


def sample_view(mean_deg: float, sigma_deg: float, rng: np.random.Generator) -> SampledView:
    """Draw the next view from Normal(mean, sigma) and wrap it onto the circle."""
    if sigma_deg <= 0:
        raise ValueError(f"sampling stddev must be positive, got {sigma_deg}")
    raw = float(rng.normal(mean_deg, sigma_deg))
    log_prob = -0.5 * ((raw - mean_deg) / sigma_deg) ** 2 - math.log(sigma_deg) - LOG_SQRT_2PI
    return SampledView(raw % 360.0, raw, log_prob)


def normal_log_prob(x: float, mean: Tensor, sigma_deg: float) -> Tensor:
    """Log-density of a fixed draw under Normal(mean, sigma), differentiable in mean."""
    z = ad.mul(ad.square(ad.sub(mean, float(x))), 1.0 / (2.0 * sigma_deg**2))
    return ad.sub(ad.neg(z), math.log(sigma_deg) + LOG_SQRT_2PI)


@dataclass
class PlannerStep:
    mean: Tensor          # shape (1,), degrees, unwrapped (gradient target)
    baseline: Tensor      # shape (1,)
    state: Tensor         # new hidden, shape (1, hidden)

    @property
    def mean_deg(self) -> float:
        return self.mean.item() % 360.0

    @property
    def baseline_value(self) -> float:
        return self.baseline.item()


class PlannerPolicy:
    """View-planning network: embedding, vector GRU, view and baseline heads."""

    def __init__(self, latent_dim: int, hidden_dim: int = 128,
                 sigma_deg: float = 15.0, rng: np.random.Generator | None = None):
        if sigma_deg <= 0:
            raise ValueError("sigma must be positive")
        if rng is None:
            rng = np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.sigma_deg = sigma_deg
        p: list[tuple[str, Tensor]] = []

        def dense(name, n_in, n_out):
            w = ad.xavier_init((n_in, n_out), n_in, n_out, rng)
            b = ad.parameter(np.zeros((1, n_out)))
            p.append((f"{name}.w", w))
            p.append((f"{name}.b", b))
            return w, b

        self.embed = dense("embed", 2, latent_dim)
        both = latent_dim + hidden_dim
        self.gru_z = dense("gru.z", both, hidden_dim)
        self.gru_r = dense("gru.r", both, hidden_dim)
        self.gru_h = dense("gru.h", both, hidden_dim)
        self.view_head = dense("view", hidden_dim, 2)
        self.baseline_head = dense("baseline", hidden_dim, 1)
        self._params = p

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self._params]

    def initial_state(self) -> Tensor:
        return ad.constant(np.zeros((1, self.hidden_dim)))

    def view_embed(self, azimuth_deg: float) -> Tensor:
        """360-degree-periodic embedding of a view angle."""
        a = math.radians(azimuth_deg)
        feats = ad.constant(np.array([[math.sin(a), math.cos(a)]]))
        w, b = self.embed
        return ad.tanh(ad.add(ad.matmul(feats, w), b))

    def glimpse(self, latent: Tensor, azimuth_deg: float) -> Tensor:
        """Fuse the encoder feature with the current view: elementwise product."""
        flat = ad.reshape(latent, (1, latent.data.size))
        emb = self.view_embed(azimuth_deg)
        if flat.data.shape != emb.data.shape:
            raise ValueError(
                f"latent dimension {flat.data.shape} does not match view "
                f"embedding {emb.data.shape}"
            )
        return ad.mul(flat, emb)

    def _affine(self, x: Tensor, layer) -> Tensor:
        w, b = layer
        return ad.add(ad.matmul(x, w), b)

    def step(self, state: Tensor, glimpse: Tensor) -> PlannerStep:
        gh = ad.concat([glimpse, state], axis=1)
        z = ad.sigmoid(self._affine(gh, self.gru_z))
        r = ad.sigmoid(self._affine(gh, self.gru_r))
        cand = ad.tanh(self._affine(ad.concat([glimpse, ad.mul(r, state)], axis=1), self.gru_h))
        h = ad.add(ad.mul(ad.sub(1.0, z), state), ad.mul(z, cand))
        vh = self._affine(h, self.view_head)
        s = ad.reshape(ad.narrow(vh, 1, 0, 1), (1,))
        c = ad.reshape(ad.narrow(vh, 1, 1, 1), (1,))
        mean = ad.mul(ad.atan2(s, c), 180.0 / math.pi)
        # the baseline reads a detached hidden state: its loss must not train
        # the trunk, and the policy loss never sees baseline parameters
        baseline = ad.reshape(self._affine(h.detach(), self.baseline_head), (1,))
        return PlannerStep(mean, baseline, h)


@dataclass
class EpisodeTrace:
    """Per-step record of one planning episode."""

    views: list[float] = field(default_factory=list)
    means: list[float] = field(default_factory=list)
    log_probs: list[float] = field(default_factory=list)
    rewards: list[RewardBreakdown] = field(default_factory=list)
    baselines: list[float] = field(default_factory=list)
    returns: list[float] | None = None
    # graph-connected values, populated while training
    log_prob_tensors: list[Tensor] = field(default_factory=list)
    baseline_tensors: list[Tensor] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.views)

    def add_step(self, view: float, mean: float, log_prob: float,
                 reward: RewardBreakdown, baseline: float,
                 log_prob_tensor: Tensor | None = None,
                 baseline_tensor: Tensor | None = None) -> None:
        self.views.append(view)
        self.means.append(mean)
        self.log_probs.append(log_prob)
        self.rewards.append(reward)
        self.baselines.append(baseline)
        if log_prob_tensor is not None:
            self.log_prob_tensors.append(log_prob_tensor)
        if baseline_tensor is not None:
            self.baseline_tensors.append(baseline_tensor)

    def finish(self) -> None:
        """Compute return-to-go from the recorded combined rewards."""
        self.returns = returns_of([r.combined for r in self.rewards])

    def _check_complete(self):
        if self.returns is None or len(self.returns) != len(self.views):
            raise ValueError("episode trace has no returns; call finish() first")
        if not all(math.isfinite(lp) for lp in self.log_probs):
            raise FloatingPointError("non-finite log-probability in episode trace")


def reinforce_loss(trace: EpisodeTrace) -> Tensor:
    """Policy-gradient surrogate: sum of -log p(view) * (return - baseline).

    The advantage is a constant during differentiation; only the log-density
    terms carry gradients, so minimizing this raises the density of sampled
    views in proportion to their centered return.
    """
    trace._check_complete()
    if len(trace.log_prob_tensors) != len(trace.views):
        raise ValueError("trace lacks differentiable log-probabilities")
    total = None
    for lp, r, b in zip(trace.log_prob_tensors, trace.returns, trace.baselines):
        term = ad.mul(ad.neg(lp), r - b)
        total = term if total is None else ad.add(total, term)
    return total


def baseline_loss(trace: EpisodeTrace) -> Tensor:
    """Squared-error regression of the baseline head onto the returns."""
    trace._check_complete()
    if len(trace.baseline_tensors) != len(trace.views):
        raise ValueError("trace lacks differentiable baselines")
    total = None
    for b, r in zip(trace.baseline_tensors, trace.returns):
        term = ad.square(ad.sub(b, float(r)))
        total = term if total is None else ad.add(total, term)
    return ad.mul(total, 1.0 / len(trace.views))
