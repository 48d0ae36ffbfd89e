"""Dense rank-4 tensor engine with reverse-mode automatic differentiation.

Every feature map, hidden state, and label in this package lives in a
:class:`GridTensor`: a dense (batch, channel, height, width) array of 64-bit
floats.  Operations executed while a :class:`Tape` is active are recorded
define-by-run; :func:`backward` replays the tape in reverse to accumulate
exact chain-rule gradients.  With no tape active the same functions run in
plain inference mode at no bookkeeping cost.

Shape discipline is strict: binary operations require identical shapes.  The
only sanctioned relaxations are the channel-wise convolution bias and the
explicit :func:`scale_channels` gate multiply; anything else is an error, not
a broadcast.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "GridTensor",
    "Tape",
    "ShapeMismatchError",
    "DomainError",
    "add",
    "sub",
    "mul",
    "div",
    "affine",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "softplus",
    "absolute",
    "elementwise",
    "conv2d",
    "pad_replicate",
    "upsample_nearest4",
    "resample",
    "softmax_channel",
    "log_softmax_channel",
    "concat_channels",
    "slice_channels",
    "scale_channels",
    "sum_all",
    "detach",
    "backward",
    "clear_grads",
    "uniform_kernel",
    "zero_bias",
    "save_tensor",
    "load_tensor",
]

# exp(x) beyond this overflows float64
_EXP_MAX = 709.0


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An elementwise input lies outside the operation's domain."""


class GridTensor:
    """Dense (B, C, H, W) float64 tensor with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeMismatchError(
                f"GridTensor requires a rank-4 (B, C, H, W) array, got rank {arr.ndim}"
            )
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False) -> "GridTensor":
        return cls(np.zeros(tuple(shape)), requires_grad=requires_grad)

    @classmethod
    def full(cls, shape: Sequence[int], value: float) -> "GridTensor":
        return cls(np.full(tuple(shape), float(value)))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        if isinstance(other, GridTensor):
            return add(self, other)
        return affine(self, shift=float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, GridTensor):
            return sub(self, other)
        return affine(self, shift=-float(other))

    def __mul__(self, other):
        if isinstance(other, GridTensor):
            return mul(self, other)
        return affine(self, scale=float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return affine(self, scale=-1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"GridTensor(shape={self.shape}{flag})"


class Tape:
    """Recorded operation list; replaying it in reverse yields exact gradients.

    One tape is single-threaded; independent tapes may run on separate
    threads.  The tape is consumed by :meth:`backward`.
    """

    def __init__(self):
        self._entries: list[tuple[GridTensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self._entries)

    def record(self, out: GridTensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        out._tape = self
        self._entries.append((out, backward_fn))

    def backward(self, loss: GridTensor) -> None:
        if loss.shape != (1, 1, 1, 1):
            raise ShapeMismatchError(
                f"backward requires a 1x1x1x1 scalar loss, got shape {loss.shape}"
            )
        if not self._entries:
            raise ValueError("backward called on an empty tape")
        loss.grad = np.ones((1, 1, 1, 1))
        # Recording order is a topological order, so the reverse walk is valid.
        for out, fn in reversed(self._entries):
            if out.grad is not None:
                fn(out.grad)
        self._entries.clear()


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: GridTensor, backward_fn: Callable[[np.ndarray], None]) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward_fn)


def _accum(t: GridTensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def backward(loss: GridTensor) -> None:
    """Run the reverse pass from a scalar loss; consumes the recording tape."""
    if loss._tape is None:
        raise ValueError("loss was not recorded on an active tape")
    loss._tape.backward(loss)


def clear_grads(tensors: Iterable[GridTensor]) -> None:
    for t in tensors:
        t.grad = None


def detach(x: GridTensor) -> GridTensor:
    """Copy of ``x`` cut off from gradient flow."""
    return GridTensor(x.data.copy())


def _check_same_shape(a: GridTensor, b: GridTensor, op: str) -> None:
    if a.shape != b.shape:
        for axis, (da, db) in enumerate(zip(a.shape, b.shape)):
            if da != db:
                raise ShapeMismatchError(
                    f"{op}: operand shapes {a.shape} and {b.shape} differ on axis {axis} "
                    f"({'BCHW'[axis]}: {da} vs {db})"
                )


def _first_violation(mask: np.ndarray, values: np.ndarray, op: str, requirement: str) -> None:
    if mask.any():
        idx = np.unravel_index(int(np.argmax(mask)), mask.shape)
        raise DomainError(
            f"{op}: input at index {tuple(int(i) for i in idx)} is "
            f"{values[idx]!r}, which violates {requirement}"
        )


# ---------------------------------------------------------------------------
# elementwise operations
# ---------------------------------------------------------------------------


def add(a: GridTensor, b: GridTensor) -> GridTensor:
    _check_same_shape(a, b, "add")
    out = GridTensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    _record(out, fn)
    return out


def sub(a: GridTensor, b: GridTensor) -> GridTensor:
    _check_same_shape(a, b, "sub")
    out = GridTensor(a.data - b.data, requires_grad=a.requires_grad or b.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    _record(out, fn)
    return out


def mul(a: GridTensor, b: GridTensor) -> GridTensor:
    _check_same_shape(a, b, "mul")
    out = GridTensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    _record(out, fn)
    return out


def div(a: GridTensor, b: GridTensor) -> GridTensor:
    _check_same_shape(a, b, "div")
    _first_violation(b.data == 0.0, b.data, "div", "a non-zero denominator")
    out = GridTensor(a.data / b.data, requires_grad=a.requires_grad or b.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(a, g / b.data)
        _accum(b, -g * a.data / (b.data * b.data))

    _record(out, fn)
    return out


def affine(x: GridTensor, scale: float = 1.0, shift: float = 0.0) -> GridTensor:
    """``scale * x + shift`` with python-float constants."""
    out = GridTensor(scale * x.data + shift, requires_grad=x.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(x, g * scale)

    _record(out, fn)
    return out


def sigmoid(x: GridTensor) -> GridTensor:
    y = expit(x.data)
    out = GridTensor(y, requires_grad=x.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(x, g * y * (1.0 - y))

    _record(out, fn)
    return out


def tanh(x: GridTensor) -> GridTensor:
    y = np.tanh(x.data)
    out = GridTensor(y, requires_grad=x.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(x, g * (1.0 - y * y))

    _record(out, fn)
    return out


def exp(x: GridTensor) -> GridTensor:
    _first_violation(x.data > _EXP_MAX, x.data, "exp", f"the overflow bound {_EXP_MAX}")
    y = np.exp(x.data)
    out = GridTensor(y, requires_grad=x.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(x, g * y)

    _record(out, fn)
    return out


def log(x: GridTensor) -> GridTensor:
    _first_violation(x.data <= 0.0, x.data, "log", "a strictly positive input")
    out = GridTensor(np.log(x.data), requires_grad=x.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(x, g / x.data)

    _record(out, fn)
    return out


def softplus(x: GridTensor) -> GridTensor:
    # max(x, 0) + log1p(exp(-|x|)) is stable for large |x|
    y = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))
    out = GridTensor(y, requires_grad=x.requires_grad)
    s = expit(x.data)

    def fn(g: np.ndarray) -> None:
        _accum(x, g * s)

    _record(out, fn)
    return out


def absolute(x: GridTensor) -> GridTensor:
    out = GridTensor(np.abs(x.data), requires_grad=x.requires_grad)
    sign = np.sign(x.data)  # subgradient 0 at exact zeros

    def fn(g: np.ndarray) -> None:
        _accum(x, g * sign)

    _record(out, fn)
    return out


_ELEMENTWISE: dict[str, Callable[..., GridTensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "abs": absolute,
}


def elementwise(tag: str, *operands: GridTensor) -> GridTensor:
    """Dispatch an elementwise operation by tag."""
    if tag not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise tag {tag!r}; known: {sorted(_ELEMENTWISE)}")
    return _ELEMENTWISE[tag](*operands)


# ---------------------------------------------------------------------------
# spatial operations
# ---------------------------------------------------------------------------


def conv2d(
    x: GridTensor,
    kernel: GridTensor,
    bias: GridTensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> GridTensor:
    """2-D cross-correlation with zero padding and a channel-wise bias.

    ``kernel`` is (C_out, C_in, K, K) with odd square extent; the output
    spatial size is ``floor((H + 2*padding - K) / stride) + 1``.
    """
    B, C, H, W = x.shape
    O, KC, KH, KW = kernel.shape
    if KC != C:
        raise ShapeMismatchError(
            f"conv2d: kernel input channels ({KC}) do not match input channels ({C})"
        )
    if KH != KW:
        raise ShapeMismatchError(f"conv2d: kernel extent must be square, got {KH}x{KW}")
    if KH % 2 == 0:
        raise ShapeMismatchError(f"conv2d: kernel extent must be odd, got {KH}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be non-negative, got {padding}")
    if bias is not None and bias.shape != (1, O, 1, 1):
        raise ShapeMismatchError(
            f"conv2d: bias shape {bias.shape} must be (1, {O}, 1, 1) for channel-wise addition"
        )
    if H + 2 * padding < KH or W + 2 * padding < KW:
        raise ShapeMismatchError(
            f"conv2d: padded input {H + 2 * padding}x{W + 2 * padding} is smaller than "
            f"the {KH}x{KW} kernel on axis 2"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    win = sliding_window_view(xp, (KH, KW), axis=(2, 3))[:, :, ::stride, ::stride]
    y = np.tensordot(win, kernel.data, axes=([1, 4, 5], [1, 2, 3]))  # (B, Ho, Wo, O)
    y = np.ascontiguousarray(np.moveaxis(y, 3, 1))
    if bias is not None:
        y = y + bias.data
    requires = x.requires_grad or kernel.requires_grad or (
        bias is not None and bias.requires_grad
    )
    out = GridTensor(y, requires_grad=requires)
    Ho, Wo = out.shape[2], out.shape[3]

    def fn(g: np.ndarray) -> None:
        if kernel.requires_grad:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            _accum(kernel, dw)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)).reshape(1, O, 1, 1))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for u in range(KH):
                for v in range(KW):
                    contrib = np.tensordot(g, kernel.data[:, :, u, v], axes=([1], [0]))
                    contrib = np.moveaxis(contrib, 3, 1)
                    dxp[
                        :,
                        :,
                        u : u + stride * (Ho - 1) + 1 : stride,
                        v : v + stride * (Wo - 1) + 1 : stride,
                    ] += contrib
            if padding:
                dxp = dxp[:, :, padding : padding + H, padding : padding + W]
            _accum(x, dxp)

    _record(out, fn)
    return out


def pad_replicate(x: GridTensor, pad: int) -> GridTensor:
    """Edge-replicating spatial padding; preserves constant fields."""
    if pad < 0:
        raise ValueError(f"pad_replicate: pad must be non-negative, got {pad}")
    if pad == 0:
        return x
    B, C, H, W = x.shape
    out = GridTensor(
        np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge"),
        requires_grad=x.requires_grad,
    )

    def fn(g: np.ndarray) -> None:
        rows = g[:, :, pad : pad + H, :].copy()
        rows[:, :, 0, :] += g[:, :, :pad, :].sum(axis=2)
        rows[:, :, -1, :] += g[:, :, pad + H :, :].sum(axis=2)
        dx = rows[:, :, :, pad : pad + W].copy()
        dx[:, :, :, 0] += rows[:, :, :, :pad].sum(axis=3)
        dx[:, :, :, -1] += rows[:, :, :, pad + W :].sum(axis=3)
        _accum(x, dx)

    _record(out, fn)
    return out


def upsample_nearest4(x: GridTensor) -> GridTensor:
    B, C, H, W = x.shape
    y = np.repeat(np.repeat(x.data, 4, axis=2), 4, axis=3)
    out = GridTensor(y, requires_grad=x.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(x, g.reshape(B, C, H, 4, W, 4).sum(axis=(3, 5)))

    _record(out, fn)
    return out


def resample(
    x: GridTensor,
    tag: str,
    kernel: GridTensor,
    bias: GridTensor | None = None,
) -> GridTensor:
    """Resolution change by a factor of 4 in each spatial dimension.

    ``down4`` is a stride-4 convolution, ``up4`` a nearest-neighbour upsample
    followed by a stride-1 convolution.  Both use replicate padding so a
    constant field stays constant.
    """
    K = kernel.shape[2]
    pad = (K - 1) // 2
    if tag == "down4":
        B, C, H, W = x.shape
        if H % 4 != 0 or W % 4 != 0:
            raise ShapeMismatchError(
                f"resample down4: spatial extents ({H}, {W}) must be divisible by 4"
            )
        return conv2d(pad_replicate(x, pad), kernel, bias, stride=4)
    if tag == "up4":
        return conv2d(pad_replicate(upsample_nearest4(x), pad), kernel, bias, stride=1)
    raise ValueError(f"unknown resample tag {tag!r}; expected 'down4' or 'up4'")


def softmax_channel(x: GridTensor) -> GridTensor:
    """Softmax across the channel axis, per cell."""
    if x.shape[1] < 2:
        raise ShapeMismatchError(
            f"softmax_channel requires at least 2 channels, got {x.shape[1]}"
        )
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = GridTensor(y, requires_grad=x.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(x, y * (g - (g * y).sum(axis=1, keepdims=True)))

    _record(out, fn)
    return out


def log_softmax_channel(x: GridTensor) -> GridTensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = GridTensor(shifted - lse, requires_grad=x.requires_grad)
    soft = np.exp(shifted - lse)

    def fn(g: np.ndarray) -> None:
        _accum(x, g - soft * g.sum(axis=1, keepdims=True))

    _record(out, fn)
    return out


def concat_channels(parts: Sequence[GridTensor]) -> GridTensor:
    if not parts:
        raise ValueError("concat_channels requires at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeMismatchError(
                f"concat_channels: shape {p.shape} does not align with {ref} outside the channel axis"
            )
    out = GridTensor(
        np.concatenate([p.data for p in parts], axis=1),
        requires_grad=any(p.requires_grad for p in parts),
    )
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def fn(g: np.ndarray) -> None:
        for p, gp in zip(parts, np.split(g, splits, axis=1)):
            _accum(p, gp)

    _record(out, fn)
    return out


def slice_channels(x: GridTensor, start: int, stop: int) -> GridTensor:
    if not (0 <= start < stop <= x.shape[1]):
        raise ShapeMismatchError(
            f"slice_channels: range [{start}, {stop}) invalid for {x.shape[1]} channels"
        )
    out = GridTensor(x.data[:, start:stop].copy(), requires_grad=x.requires_grad)

    def fn(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        _accum(x, dx)

    _record(out, fn)
    return out


def scale_channels(x: GridTensor, gate: GridTensor) -> GridTensor:
    """Multiply every channel of ``x`` by a single-channel spatial gate."""
    B, C, H, W = x.shape
    if gate.shape != (B, 1, H, W):
        raise ShapeMismatchError(
            f"scale_channels: gate shape {gate.shape} must be ({B}, 1, {H}, {W})"
        )
    out = GridTensor(x.data * gate.data, requires_grad=x.requires_grad or gate.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(x, g * gate.data)
        _accum(gate, (g * x.data).sum(axis=1, keepdims=True))

    _record(out, fn)
    return out


def sum_all(x: GridTensor) -> GridTensor:
    """Sum over every element, yielding a 1x1x1x1 scalar tensor."""
    out = GridTensor(np.full((1, 1, 1, 1), x.data.sum()), requires_grad=x.requires_grad)

    def fn(g: np.ndarray) -> None:
        _accum(x, np.full_like(x.data, g[0, 0, 0, 0]))

    _record(out, fn)
    return out


# ---------------------------------------------------------------------------
# initialisation and snapshot I/O
# ---------------------------------------------------------------------------


def uniform_kernel(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> GridTensor:
    """Kernel drawn uniformly in +-sqrt(1/fan_in), fan_in = in_ch * k * k."""
    limit = float(np.sqrt(1.0 / (in_ch * k * k)))
    return GridTensor(rng.uniform(-limit, limit, (out_ch, in_ch, k, k)), requires_grad=True)


def zero_bias(out_ch: int) -> GridTensor:
    return GridTensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True)


def save_tensor(path, t: GridTensor) -> None:
    """Snapshot format: little-endian 4xu32 shape header + raw f64 payload."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", *t.shape))
        fh.write(t.data.astype("<f8", copy=False).tobytes())


def load_tensor(path, requires_grad: bool = False) -> GridTensor:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated tensor snapshot header")
        shape = struct.unpack("<4I", header)
        payload = fh.read()
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for shape {shape}"
        )
    data = np.frombuffer(payload, dtype="<f8").reshape(shape)
    return GridTensor(data.copy(), requires_grad=requires_grad)
