"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine records every differentiable primitive on a per-thread tape in
forward execution order; ``backward`` replays the tape in reverse, summing a
node's gradient over all of its consumers. Only the operations the networks
in this package actually need are provided: elementwise arithmetic and
nonlinearities, 2D/3D cross-correlation, matrix product, concatenation,
reshape, and scalar reductions. Shapes must match exactly; the only implicit
broadcasting allowed is python-scalar against tensor.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "constant",
    "parameter",
    "no_grad",
    "grad_enabled",
    "apply_op",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "square",
    "atan2",
    "matmul",
    "conv2d",
    "conv3d",
    "concat",
    "reshape",
    "narrow",
    "tsum",
    "tmean",
    "xavier_init",
    "Adam",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
]


class _Node:
    """One recorded primitive: output, ordered inputs, and the local vjp."""

    __slots__ = ("output", "inputs", "vjp")

    def __init__(self, output: "Tensor", inputs: tuple, vjp: Callable):
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class _TapeState(threading.local):
    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True


_STATE = _TapeState()


class no_grad:
    """Context manager suspending tape recording (forward-only evaluation)."""

    def __enter__(self):
        self._prev = _STATE.enabled
        _STATE.enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _STATE.enabled


class Tensor:
    """N-D float64 array, row-major, optionally tracked for differentiation.

    ``grad`` is populated on leaf tensors by ``backward`` and accumulates
    across calls until reset, which is what batched gradient accumulation
    relies on.
    """

    __slots__ = ("data", "requires_grad", "grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if arr.size == 0:
            raise ValueError(f"empty tensor of shape {arr.shape} is not allowed")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are python numbers, never silently broadcast arrays
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a primitive's result and record it when gradients are live.

    ``vjp(g)`` must return one gradient array (or None) per entry of
    ``inputs``, each shaped like the corresponding input. This is the hook
    other modules use to define fused differentiable primitives.
    """
    needs = _STATE.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._from_op = True
        _STATE.nodes.append(_Node(out, tuple(inputs), vjp))
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar loss; returns {leaf: gradient}.

    Leaf tensors (``requires_grad`` and not produced by an op) additionally
    receive the gradient summed into ``.grad``. The tape is consumed: all
    nodes recorded on this thread are discarded afterwards.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    nodes = _STATE.nodes
    if not nodes:
        raise RuntimeError("backward on an empty tape: no operations were recorded")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, np.ndarray] = {}
    try:
        for node in reversed(nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            in_grads = node.vjp(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if t._from_op:
                    prev = grads.get(id(t))
                    grads[id(t)] = g if prev is None else prev + g
                else:
                    if t in leaf_grads:
                        leaf_grads[t] = leaf_grads[t] + g
                    else:
                        leaf_grads[t] = np.array(g, dtype=np.float64, copy=True)
    finally:
        _STATE.nodes = []
    for t, g in leaf_grads.items():
        t.grad = g.copy() if t.grad is None else t.grad + g
    return leaf_grads


# ---------------------------------------------------------------------------
# elementwise primitives


def _coerce_pair(a, b):
    """Return (tensor_inputs, a_val, b_val) treating python numbers as constants."""
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    if a_t is None and b_t is None:
        raise TypeError("at least one operand must be a Tensor")
    a_val = a_t.data if a_t is not None else float(a)
    b_val = b_t.data if b_t is not None else float(b)
    if a_t is not None and b_t is not None and a_t.data.shape != b_t.data.shape:
        raise ValueError(
            f"shape mismatch in elementwise op: {a_t.data.shape} vs {b_t.data.shape}"
        )
    return a_t, b_t, a_val, b_val


def _pair_inputs(a_t, b_t):
    return tuple(t for t in (a_t, b_t) if t is not None)


def _pair_grads(a_t, b_t, ga, gb):
    out = []
    if a_t is not None:
        out.append(ga)
    if b_t is not None:
        out.append(gb)
    return out


def add(a, b) -> Tensor:
    a_t, b_t, av, bv = _coerce_pair(a, b)
    return apply_op(
        av + bv,
        _pair_inputs(a_t, b_t),
        lambda g: _pair_grads(a_t, b_t, g, g),
    )


def sub(a, b) -> Tensor:
    a_t, b_t, av, bv = _coerce_pair(a, b)
    return apply_op(
        av - bv,
        _pair_inputs(a_t, b_t),
        lambda g: _pair_grads(a_t, b_t, g, -g),
    )


def mul(a, b) -> Tensor:
    a_t, b_t, av, bv = _coerce_pair(a, b)
    return apply_op(
        av * bv,
        _pair_inputs(a_t, b_t),
        lambda g: _pair_grads(a_t, b_t, g * bv, g * av),
    )


def neg(a: Tensor) -> Tensor:
    return apply_op(-a.data, (a,), lambda g: [-g])


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return apply_op(out, (a,), lambda g: [g * out * (1.0 - out)])


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return apply_op(out, (a,), lambda g: [g * (1.0 - out * out)])


def square(a: Tensor) -> Tensor:
    x = a.data
    return apply_op(x * x, (a,), lambda g: [g * 2.0 * x])


def atan2(y: Tensor, x: Tensor) -> Tensor:
    """Elementwise two-argument arctangent, differentiable in both inputs."""
    if y.data.shape != x.data.shape:
        raise ValueError(f"shape mismatch in atan2: {y.data.shape} vs {x.data.shape}")
    yv, xv = y.data, x.data
    denom = yv * yv + xv * xv
    return apply_op(
        np.arctan2(yv, xv),
        (y, x),
        lambda g: [g * xv / denom, g * (-yv) / denom],
    )


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-D operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} @ {b.data.shape}"
        )
    av, bv = a.data, b.data
    return apply_op(
        av @ bv,
        (a, b),
        lambda g: [g @ bv.T, av.T @ g],
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrs = [t.data for t in tensors]
    out = np.concatenate(arrs, axis=axis)
    sizes = [a.shape[axis] for a in arrs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return list(np.split(g, splits, axis=axis))

    return apply_op(out, tuple(tensors), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.data.shape
    return apply_op(
        a.data.reshape(shape),
        (a,),
        lambda g: [g.reshape(orig)],
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; gradient scatters back into zeros."""
    shape = a.data.shape
    ax = axis % len(shape)
    if start < 0 or start + length > shape[ax]:
        raise ValueError(
            f"narrow [{start}:{start + length}] out of range for axis {ax} "
            f"of shape {shape}"
        )
    sl = (slice(None),) * ax + (slice(start, start + length),)

    def vjp(g):
        out = np.zeros(shape)
        out[sl] = g
        return [out]

    return apply_op(np.ascontiguousarray(a.data[sl]), (a,), vjp)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a shape-(1,) scalar."""
    shape = a.data.shape
    return apply_op(
        np.array([a.data.sum()]),
        (a,),
        lambda g: [np.full(shape, g[0])],
    )


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape
    return apply_op(
        np.array([a.data.mean()]),
        (a,),
        lambda g: [np.full(shape, g[0] / n)],
    )


# ---------------------------------------------------------------------------
# convolution (cross-correlation convention: no kernel flip)


def _conv_check(in_shape, k_shape, ndim, padding, stride):
    if len(in_shape) not in (ndim + 1, ndim + 2) or len(k_shape) != ndim + 2:
        raise ValueError(
            f"conv{ndim}d expects input [N x] C_in x spatial and kernel "
            f"C_out x C_in x taps, got {in_shape} and {k_shape}"
        )
    if in_shape[-ndim - 1] != k_shape[1]:
        raise ValueError(
            f"conv{ndim}d channel mismatch: input {in_shape} vs kernel {k_shape}"
        )
    k = k_shape[2]
    if any(e != k for e in k_shape[2:]):
        raise ValueError(f"conv{ndim}d kernels must be cubic, got {k_shape}")
    if k % 2 == 0:
        raise ValueError(f"conv{ndim}d kernel size must be odd, got {k}")
    if padding < 0 or stride < 1:
        raise ValueError(f"invalid padding={padding} or stride={stride}")
    for e in in_shape[-ndim:]:
        if e + 2 * padding < k:
            raise ValueError(
                f"kernel size {k} exceeds padded input extent {e + 2 * padding}"
            )


def _im2col(x: np.ndarray, k: int, ndim: int, padding: int, stride: int):
    """Columns (N * positions, C_in * k^ndim), channel-major per position."""
    c_in = x.shape[1]
    sp_axes = tuple(range(2, 2 + ndim))
    pad = [(0, 0), (0, 0)] + [(padding, padding)] * ndim
    xp = np.pad(x, pad) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k,) * ndim, axis=sp_axes)
    if stride > 1:
        sl = (slice(None), slice(None)) + (slice(None, None, stride),) * ndim
        win = win[sl]
    out_sp = win.shape[2 : 2 + ndim]
    cols = np.moveaxis(win, 1, 1 + ndim).reshape(-1, c_in * k**ndim)
    return cols, out_sp, xp.shape


def _conv_forward(x: np.ndarray, kern: np.ndarray, ndim: int, padding: int, stride: int):
    """Forward cross-correlation over a (N, C_in, spatial...) batch."""
    n = x.shape[0]
    k = kern.shape[2]
    cols, out_sp, xp_shape = _im2col(x, k, ndim, padding, stride)
    kmat = kern.reshape(kern.shape[0], -1)
    out = cols @ kmat.T  # (N*positions, C_out)
    out = np.moveaxis(out.reshape((n,) + out_sp + (kern.shape[0],)), 1 + ndim, 1)
    return np.ascontiguousarray(out), out_sp, xp_shape


def _conv_input_grad(g, kern, ndim, padding, stride, xp_shape):
    """Input gradient as a transposed convolution, so it runs as one GEMM.

    Dilate the output gradient by the stride, surround it with k-1 zeros
    (plus the remainder rows a non-dividing stride never touched), and
    cross-correlate with the channel-swapped, spatially flipped kernel.
    """
    k = kern.shape[2]
    out_sp = g.shape[2:]
    if stride > 1:
        dil_sp = tuple((e - 1) * stride + 1 for e in out_sp)
        g_dil = np.zeros(g.shape[:2] + dil_sp)
        sl = (slice(None), slice(None)) + (slice(None, None, stride),) * ndim
        g_dil[sl] = g
        g = g_dil
    pads = [(0, 0), (0, 0)]
    for d in range(ndim):
        rem = xp_shape[2 + d] - ((out_sp[d] - 1) * stride + k)
        pads.append((k - 1, k - 1 + rem))
    gp = np.pad(g, pads)
    flip = (slice(None), slice(None)) + (slice(None, None, -1),) * ndim
    kern_t = np.ascontiguousarray(kern.transpose((1, 0) + tuple(range(2, 2 + ndim)))[flip])
    dxp, _, _ = _conv_forward(gp, kern_t, ndim, 0, 1)
    if padding:
        core = (slice(None), slice(None)) + (slice(padding, -padding),) * ndim
        dxp = dxp[core]
    return np.ascontiguousarray(dxp)


def _conv(x: Tensor, kern: Tensor, bias: Tensor | None, ndim: int, padding: int, stride: int) -> Tensor:
    """Shared conv path; a leading batch axis on the input is optional."""
    _conv_check(x.data.shape, kern.data.shape, ndim, padding, stride)
    c_out = kern.data.shape[0]
    if bias is not None and bias.data.shape != (c_out,):
        raise ValueError(
            f"conv{ndim}d bias shape {bias.data.shape} does not match C_out={c_out}"
        )
    batched = x.data.ndim == ndim + 2
    xb = x.data if batched else x.data[None]
    out, out_sp, xp_shape = _conv_forward(xb, kern.data, ndim, padding, stride)
    if bias is not None:
        out = out + bias.data.reshape((c_out,) + (1,) * ndim)
    if not batched:
        out = out[0]
    k = kern.data.shape[2]

    def vjp(g):
        gb = g if batched else g[None]
        # (N, C_out, out_sp) -> (N*positions, C_out)
        g2 = np.moveaxis(gb, 1, 1 + ndim).reshape(-1, c_out)
        # columns are rebuilt here rather than kept alive on the tape: the
        # padded input is an order of magnitude smaller than its unfolding
        cols, _, _ = _im2col(xb, k, ndim, padding, stride)
        dk = (g2.T @ cols).reshape(kern.data.shape)
        dx = _conv_input_grad(gb, kern.data, ndim, padding, stride, xp_shape)
        if not batched:
            dx = dx[0]
        grads = [dx, dk]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, kern) if bias is None else (x, kern, bias)
    return apply_op(out, inputs, vjp)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlate a [N x] C_in x H x W input with a C_out x C_in x k x k kernel."""
    return _conv(x, kernel, bias, 2, padding, stride)


def conv3d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, padding: int = 0, stride: int = 1) -> Tensor:
    """Cross-correlate a [N x] C_in x D x H x W input with a C_out x C_in x k^3 kernel."""
    return _conv(x, kernel, bias, 3, padding, stride)


# ---------------------------------------------------------------------------
# initialization and optimization


def xavier_init(shape: Sequence[int], fan_in: int, fan_out: int, rng: np.random.Generator) -> Tensor:
    """Uniform(-b, b) parameter tensor with b = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fans must be >= 1, got fan_in={fan_in}, fan_out={fan_out}")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-bound, bound, size=tuple(shape)))


class Adam:
    """Bias-corrected Adam over a fixed parameter list.

    Parameters with ``grad is None`` are treated as having zero gradient.
    A non-finite gradient rejects the whole step.
    """

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError("non-finite gradient; optimizer step rejected")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else 0.0
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self, names: Sequence[str]) -> dict[str, np.ndarray]:
        """Moment estimates and step counter keyed for checkpointing."""
        if len(names) != len(self.params):
            raise ValueError("one name per parameter is required")
        out: dict[str, np.ndarray] = {"adam.t": np.array([float(self.t)])}
        for name, m, v in zip(names, self._m, self._v):
            out[f"adam.m.{name}"] = m
            out[f"adam.v.{name}"] = v
        return out

    def load_state_arrays(self, names: Sequence[str], arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for i, name in enumerate(names):
            self._m[i] = np.array(arrays[f"adam.m.{name}"], dtype=np.float64).reshape(self._m[i].shape)
            self._v[i] = np.array(arrays[f"adam.v.{name}"], dtype=np.float64).reshape(self._v[i].shape)


# ---------------------------------------------------------------------------
# checkpoint format: "ACTR1 <count>" header line, then per parameter a name
# line, a shape line of space-separated extents, a payload-length line in
# bytes, and the raw little-endian float64 payload followed by a newline.

_CKPT_MAGIC = b"ACTR1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + b" %d\n" % len(arrays))
        for name, arr in arrays.items():
            if "\n" in name:
                raise CheckpointError(f"parameter name {name!r} contains a newline")
            a = np.ascontiguousarray(arr, dtype="<f8")
            payload = a.tobytes()
            fh.write(name.encode() + b"\n")
            fh.write(" ".join(str(e) for e in a.shape).encode() + b"\n")
            fh.write(b"%d\n" % len(payload))
            fh.write(payload)
            fh.write(b"\n")


def _read_line(fh, what: str) -> bytes:
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return line[:-1]


def load_checkpoint(path) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        header = _read_line(fh, "header")
        parts = header.split(b" ")
        if len(parts) != 2 or parts[0] != _CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint header: {header!r}")
        try:
            count = int(parts[1])
        except ValueError:
            raise CheckpointError(f"bad parameter count in header: {header!r}")
        for _ in range(count):
            name = _read_line(fh, "parameter name").decode()
            shape_line = _read_line(fh, f"shape of {name}")
            try:
                shape = tuple(int(tok) for tok in shape_line.split())
            except ValueError:
                raise CheckpointError(f"bad shape line for {name}: {shape_line!r}")
            nbytes = int(_read_line(fh, f"payload length of {name}"))
            expected = 8 * int(np.prod(shape)) if shape else 8
            if nbytes != expected:
                raise CheckpointError(
                    f"payload length {nbytes} for {name} does not match shape {shape}"
                )
            payload = fh.read(nbytes)
            if len(payload) != nbytes:
                raise CheckpointError(f"truncated payload for {name}")
            if fh.read(1) != b"\n":
                raise CheckpointError(f"missing terminator after {name}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError("trailing bytes after final parameter")
    return arrays
