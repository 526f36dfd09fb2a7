"""Recurrent encoder-decoder: 2D Conv-GRU encoder, 3D Conv-GRU decoder with
voxel shuffle upsampling, the architecture variants, and the supervision
losses.

Gate convention, fixed once for the whole package: gates read the channel
concatenation of input and hidden, and the state update is
h' = (1 - z) * h + z * h_candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .camera import Projector

VARIANTS = {
    # (recurrent encoder, recurrent decoder); the fully convolutional
    # encoder-decoder keeps one recurrent 3D cell at the latent seed so that
    # it can still aggregate a view sequence, matching its published role.
    "R2E-R3D": (True, True),
    "R2E-3D": (True, False),
    "2E-R3D": (False, True),
    "2E-R-3D": (False, False),
}


@dataclass(frozen=True)
class ModelConfig:
    """Shapes and switches of the reconstruction network."""

    resolution: int = 16
    image_size: int = 32
    in_channels: int = 2
    enc_channels: tuple[int, ...] = (16, 32, 64)
    dec_channels: tuple[int, ...] = (64, 32, 8)
    kernel: int = 3
    variant: str = "R2E-R3D"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(
                f"unknown variant {self.variant!r}; expected one of {sorted(VARIANTS)}"
            )
        if self.image_size % (1 << len(self.enc_channels)) != 0:
            raise ValueError("image size must be divisible by 2^len(enc_channels)")
        for c in self.dec_channels:
            if c % 8 != 0:
                raise ValueError(f"decoder hidden channels must be divisible by 8, got {c}")
        if self.resolution % (1 << len(self.dec_channels)) != 0:
            raise ValueError("resolution must be divisible by 2^len(dec_channels)")
        if self.latent_flat % (self.seed_side**3) != 0:
            raise ValueError(
                f"latent size {self.latent_flat} does not tile a "
                f"{self.seed_side}^3 seed grid"
            )

    @property
    def latent_side(self) -> int:
        return self.image_size >> len(self.enc_channels)

    @property
    def latent_flat(self) -> int:
        return self.enc_channels[-1] * self.latent_side**2

    @property
    def seed_side(self) -> int:
        return self.resolution >> len(self.dec_channels)

    @property
    def seed_channels(self) -> int:
        return self.latent_flat // self.seed_side**3

    @property
    def encoder_recurrent(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def decoder_recurrent(self) -> bool:
        return VARIANTS[self.variant][1]

    @property
    def has_bottleneck(self) -> bool:
        return not (self.encoder_recurrent or self.decoder_recurrent)


def _conv_param(name, rng, c_out, c_in, k, ndim, params):
    kshape = (c_out, c_in) + (k,) * ndim
    taps = k**ndim
    w = ad.xavier_init(kshape, c_in * taps, c_out * taps, rng)
    b = ad.parameter(np.zeros(c_out))
    params.append((f"{name}.w", w))
    params.append((f"{name}.b", b))
    return w, b


class ConvGRUCell:
    """Gated recurrent cell whose three gates are same-size convolutions.

    Works in 2D or 3D depending on ``ndim``; hidden state keeps the spatial
    extent of the input.
    """

    def __init__(self, name: str, rng, in_channels: int, hidden_channels: int,
                 kernel: int, ndim: int, params: list):
        self.ndim = ndim
        self.hidden_channels = hidden_channels
        self.padding = (kernel - 1) // 2
        both = in_channels + hidden_channels
        self.w_z, self.b_z = _conv_param(f"{name}.z", rng, hidden_channels, both, kernel, ndim, params)
        self.w_r, self.b_r = _conv_param(f"{name}.r", rng, hidden_channels, both, kernel, ndim, params)
        self.w_h, self.b_h = _conv_param(f"{name}.h", rng, hidden_channels, both, kernel, ndim, params)

    def _conv(self, x, w, b):
        op = ad.conv2d if self.ndim == 2 else ad.conv3d
        return op(x, w, b, padding=self.padding)

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        ch_axis = -(self.ndim + 1)
        xh = ad.concat([x, h], axis=ch_axis)
        # z and r share their input, so run them as one convolution
        zr = self._conv(
            xh,
            ad.concat([self.w_z, self.w_r], axis=0),
            ad.concat([self.b_z, self.b_r], axis=0),
        )
        hc = self.hidden_channels
        z = ad.sigmoid(ad.narrow(zr, ch_axis, 0, hc))
        r = ad.sigmoid(ad.narrow(zr, ch_axis, hc, hc))
        cand = ad.tanh(self._conv(ad.concat([x, ad.mul(r, h)], axis=ch_axis), self.w_h, self.b_h))
        return ad.add(ad.mul(ad.sub(1.0, z), h), ad.mul(z, cand))

    def zero_state(self, spatial: tuple[int, ...], batch: int | None = None) -> Tensor:
        shape = (self.hidden_channels,) + spatial
        if batch is not None:
            shape = (batch,) + shape
        return ad.constant(np.zeros(shape))


class PlainConvCell:
    """Stateless drop-in for ConvGRUCell used by the non-recurrent variants."""

    def __init__(self, name: str, rng, in_channels: int, hidden_channels: int,
                 kernel: int, ndim: int, params: list):
        self.ndim = ndim
        self.hidden_channels = hidden_channels
        self.padding = (kernel - 1) // 2
        self.w, self.b = _conv_param(name, rng, hidden_channels, in_channels, kernel, ndim, params)

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        op = ad.conv2d if self.ndim == 2 else ad.conv3d
        return ad.tanh(op(x, self.w, self.b, padding=self.padding))

    def zero_state(self, spatial: tuple[int, ...], batch: int | None = None) -> Tensor:
        shape = (self.hidden_channels,) + spatial
        if batch is not None:
            shape = (batch,) + shape
        return ad.constant(np.zeros(shape))


def voxel_shuffle(x: Tensor) -> Tensor:
    """Rearrange a [N x] (C*8, D, D, D) tensor into [N x] (C, 2D, 2D, 2D).

    Channel block offsets (dx, dy, dz) fill the 2x2x2 sub-cube of each output
    voxel; bijective, so the gradient is the inverse rearrangement.
    """
    if x.data.ndim not in (4, 5) or x.data.shape[-4] % 8 != 0:
        raise ValueError(
            f"voxel shuffle needs [N x] (C*8, D, D, D) input, got shape {x.data.shape}"
        )
    batched = x.data.ndim == 5
    c8, d = x.data.shape[-4], x.data.shape[-1]
    c = c8 // 8
    lead = x.data.shape[:1] if batched else ()

    def fwd(a):
        y = a.reshape(lead + (c, 2, 2, 2, d, d, d))
        o = len(lead)
        y = y.transpose(tuple(range(o)) + (o, o + 4, o + 1, o + 5, o + 2, o + 6, o + 3))
        return y.reshape(lead + (c, 2 * d, 2 * d, 2 * d))

    def vjp(g):
        y = g.reshape(lead + (c, d, 2, d, 2, d, 2))
        o = len(lead)
        y = y.transpose(tuple(range(o)) + (o, o + 2, o + 4, o + 6, o + 1, o + 3, o + 5))
        return [np.ascontiguousarray(y.reshape(lead + (c8, d, d, d)))]

    return ad.apply_op(fwd(x.data), (x,), vjp)


def voxel_unshuffle(x: np.ndarray) -> np.ndarray:
    """Inverse of the shuffle on plain arrays (test and inspection helper)."""
    c, d2 = x.shape[0], x.shape[1]
    d = d2 // 2
    y = x.reshape(c, d, 2, d, 2, d, 2)
    return y.transpose(0, 2, 4, 6, 1, 3, 5).reshape(c * 8, d, d, d)


@dataclass
class ModelState:
    encoder: list[Tensor]
    decoder: list[Tensor]
    bottleneck: Tensor | None = None


class ReconModel:
    """The full view-sequence-to-volume network for one architecture variant."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self._params: list[tuple[str, Tensor]] = []
        cell2d = ConvGRUCell if config.encoder_recurrent else PlainConvCell
        cell3d = ConvGRUCell if config.decoder_recurrent else PlainConvCell
        k = config.kernel

        self.enc_down: list[tuple[Tensor, Tensor]] = []
        self.enc_cells = []
        c_prev = config.in_channels
        for i, c in enumerate(config.enc_channels):
            self.enc_down.append(
                _conv_param(f"enc.down{i}", rng, c, c_prev, k, 2, self._params)
            )
            self.enc_cells.append(
                cell2d(f"enc.cell{i}", rng, c, c, k, 2, self._params)
            )
            c_prev = c

        if config.has_bottleneck:
            self.bottleneck = ConvGRUCell(
                "bottleneck", rng, config.seed_channels, config.seed_channels,
                k, 3, self._params,
            )
        else:
            self.bottleneck = None

        self.dec_cells = []
        c_prev = config.seed_channels
        for i, c in enumerate(config.dec_channels):
            self.dec_cells.append(
                cell3d(f"dec.cell{i}", rng, c_prev, c, k, 3, self._params)
            )
            c_prev = c // 8
        self.head = _conv_param("head", rng, 1, c_prev, 1, 3, self._params)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self._params)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self._params]

    def initial_state(self, batch: int | None = None) -> ModelState:
        cfg = self.config
        side = cfg.image_size
        enc = []
        for cell in self.enc_cells:
            side //= 2
            enc.append(cell.zero_state((side, side), batch))
        dec = []
        side = cfg.seed_side
        for cell in self.dec_cells:
            dec.append(cell.zero_state((side,) * 3, batch))
            side *= 2
        bott = None
        if self.bottleneck is not None:
            bott = self.bottleneck.zero_state((cfg.seed_side,) * 3, batch)
        return ModelState(enc, dec, bott)

    def encode(self, image, state: ModelState) -> tuple[Tensor, list[Tensor]]:
        x = image if isinstance(image, Tensor) else ad.constant(np.asarray(image, dtype=np.float64))
        expect = (self.config.in_channels, self.config.image_size, self.config.image_size)
        if x.data.shape[-3:] != expect or x.data.ndim not in (3, 4):
            raise ValueError(
                f"encoder expects image of shape [N x] {expect}, got {x.data.shape}"
            )
        new_states = []
        pad = (self.config.kernel - 1) // 2
        for (w, b), cell, h in zip(self.enc_down, self.enc_cells, state.encoder):
            x = ad.tanh(ad.conv2d(x, w, b, padding=pad, stride=2))
            x = cell.step(x, h)
            new_states.append(x)
        return x, new_states

    def decode(self, latent: Tensor, state: ModelState) -> tuple[Tensor, list[Tensor], Tensor | None]:
        cfg = self.config
        seed = (cfg.seed_channels,) + (cfg.seed_side,) * 3
        batched = latent.data.ndim == 4
        x = ad.reshape(latent, ((latent.data.shape[0],) if batched else ()) + seed)
        new_bott = None
        if self.bottleneck is not None:
            x = self.bottleneck.step(x, state.bottleneck)
            new_bott = x
        new_states = []
        for cell, h in zip(self.dec_cells, state.decoder):
            x = cell.step(x, h)
            new_states.append(x)
            x = voxel_shuffle(x)
        w, b = self.head
        vol = ad.sigmoid(ad.conv3d(x, w, b, padding=0))
        res = (cfg.resolution,) * 3
        vol = ad.reshape(vol, ((vol.data.shape[0],) if batched else ()) + res)
        return vol, new_states, new_bott

    def step(self, image, state: ModelState) -> tuple[Tensor, Tensor, ModelState]:
        """One view in: returns (volume, latent, updated state).

        A leading batch axis on the image (and a state built with the same
        batch size) processes the whole batch in lockstep.
        """
        latent, enc_states = self.encode(image, state)
        vol, dec_states, bott = self.decode(latent, state)
        return vol, latent, ModelState(enc_states, dec_states, bott)


class ReconSession:
    """Stateful episode wrapper around a ReconModel.

    ``observe`` advances the recurrent state; ``peek`` evaluates a candidate
    view without touching it, which is what the entropy-probing planner needs.
    """

    def __init__(self, model: ReconModel):
        self.model = model
        self.state = model.initial_state()
        self.last_latent: Tensor | None = None
        self.last_volume: Tensor | None = None

    def observe(self, image) -> Tensor:
        vol, latent, self.state = self.model.step(image, self.state)
        self.last_latent = latent
        self.last_volume = vol
        return vol

    def peek(self, image) -> np.ndarray:
        with ad.no_grad():
            vol, _, _ = self.model.step(image, self.state)
        return vol.data


# ---------------------------------------------------------------------------
# supervision losses


def loss_vox(pred: Tensor, truth: np.ndarray) -> Tensor:
    """Mean voxel-wise squared error between prediction and ground truth."""
    t = np.asarray(truth, dtype=np.float64)
    if pred.data.shape != t.shape:
        raise ValueError(
            f"volume resolutions differ: {pred.data.shape} vs {t.shape}"
        )
    return ad.tmean(ad.square(ad.sub(pred, ad.constant(t))))


def loss_proj(pred: Tensor, truth_masks: list[np.ndarray], azimuths: list[float],
              projector: Projector) -> Tensor:
    """Mean over views of mean squared silhouette error against the masks."""
    if len(truth_masks) != len(azimuths):
        raise ValueError(
            f"{len(azimuths)} views but {len(truth_masks)} masks were supplied"
        )
    if not azimuths:
        raise ValueError("at least one projection view is required")
    total = None
    for az, mask in zip(azimuths, truth_masks):
        sil = projector.silhouette(pred, az)
        err = ad.tmean(ad.square(ad.sub(sil, ad.constant(mask))))
        total = err if total is None else ad.add(total, err)
    return ad.mul(total, 1.0 / len(azimuths))


def loss_combined(lvox: Tensor, lproj: Tensor, lambda_vox: float, lambda_proj: float) -> Tensor:
    if lambda_vox < 0 or lambda_proj < 0:
        raise ValueError("loss weights must be non-negative")
    return ad.add(ad.mul(lvox, lambda_vox), ad.mul(lproj, lambda_proj))
