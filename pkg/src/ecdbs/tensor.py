"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Values are contiguous row-major numpy arrays (float32 for training, float64
for finite-difference gradient checks; every op keeps the dtype of its
inputs).  Recording happens on an explicit :class:`Tape`: inside a
``with Tape() as tape:`` block every op appends one entry, and
``tape.backward(loss)`` replays the entries once, in reverse order.  With no
tape active an op is a plain numpy computation, which is the inference path.

Only the operations the change-detection network needs exist; elementwise
ops require equal shapes (the single exception is multiplication by a
python scalar via :func:`scale`).
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS_DEFAULT = 1e-5

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense n-d value with an optional gradient slot of identical shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # keeps 0-d shapes intact
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class TapeEntry:
    """One recorded op: inputs, output and the backward rule that links them."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_ACTIVE = threading.local()


def _tape_stack():
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered operation record; creation order is already topological."""

    def __init__(self):
        self.entries = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def backward(self, root):
        """Propagate d(root)/d(leaf) into every requires_grad leaf.

        Gradients accumulate additively across fan-out.  Each entry is
        visited exactly once, in reverse recording order.
        """
        if root.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        root.accumulate_grad(np.ones_like(root.data))
        for entry in reversed(self.entries):
            out_grad = entry.output.grad
            if out_grad is None:
                continue
            grads = entry.backward_fn(out_grad)
            for tensor, grad in zip(entry.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                tensor.accumulate_grad(grad)


def record(op, inputs, data, backward_fn):
    """Create the output of `op` and record it on the active tape.

    `backward_fn(out_grad)` must return one gradient array (or None) per
    input, in order.  Other modules use this hook to define fused ops.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.entries.append(TapeEntry(op, tuple(inputs), out, backward_fn))
    return out


def constant(data, dtype=None):
    """Tensor that never receives gradients (frozen matrices, inputs)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None):
    return Tensor(data, requires_grad=True, dtype=dtype)


def _require_same_shape(op, a, b):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-d tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(
            f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(
            f"matmul: inner dimensions disagree, {a.data.shape} x {b.data.shape}"
        )
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g @ bd.T, ad.T @ g

    return record("matmul", (a, b), ad @ bd, backward_fn)


def conv2d(x: Tensor, kernel: Tensor, groups: int = 1, pad: str = "none") -> Tensor:
    """2-d cross-correlation of a C_in x H x W map with a grouped kernel.

    kernel has shape (C_out, C_in/groups, kh, kw).  pad="same" keeps the
    spatial size (odd kernel required); pad="none" shrinks it.
    """
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects (C,H,W) input and (O,C/g,kh,kw) kernel, got {x.data.shape} and {kernel.data.shape}"
        )
    if pad not in ("same", "none"):
        raise ValueError(f"conv2d: pad must be 'same' or 'none', got {pad!r}")
    c_in, h, w = x.data.shape
    c_out, cpg, kh, kw = kernel.data.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise ValueError(
            f"conv2d: channels ({c_in} in, {c_out} out) not divisible by groups={groups}"
        )
    if cpg * groups != c_in:
        raise ValueError(
            f"conv2d: kernel expects {cpg * groups} input channels, input has {c_in}"
        )
    if pad == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"conv2d: pad='same' requires odd kernel, got {kh}x{kw}")
        ph, pw = kh // 2, kw // 2
    else:
        ph = pw = 0
    h_out = h + 2 * ph - kh + 1
    w_out = w + 2 * pw - kw + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(
            f"conv2d: patch too small, {h}x{w} input cannot fit a {kh}x{kw} kernel without padding"
        )

    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C_in, H', W', kh, kw)
    kd = kernel.data
    cig = c_in // groups
    cog = c_out // groups
    out = np.empty((c_out, h_out, w_out), dtype=x.data.dtype)
    for g in range(groups):
        kg = kd[g * cog : (g + 1) * cog]
        wg = win[g * cig : (g + 1) * cig]
        out[g * cog : (g + 1) * cog] = np.tensordot(kg, wg, axes=((1, 2, 3), (0, 3, 4)))

    def backward_fn(grad):
        dk = np.empty_like(kd)
        dxp = np.zeros_like(xp)
        for g in range(groups):
            gg = grad[g * cog : (g + 1) * cog]
            kg = kd[g * cog : (g + 1) * cog]
            wg = win[g * cig : (g + 1) * cig]
            dk[g * cog : (g + 1) * cog] = np.tensordot(gg, wg, axes=((1, 2), (1, 2)))
            dxg = dxp[g * cig : (g + 1) * cig]
            for u in range(kh):
                for v in range(kw):
                    dxg[:, u : u + h_out, v : v + w_out] += np.tensordot(
                        kg[:, :, u, v], gg, axes=(0, 0)
                    )
        dx = dxp[:, ph : ph + h, pw : pw + w] if (ph or pw) else dxp
        return dx, dk

    return record("conv2d", (x, kernel), out, backward_fn)


def add_channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-channel bias to a (C,H,W) map."""
    if x.data.ndim != 3 or bias.data.shape != (x.data.shape[0],):
        raise ValueError(
            f"add_channel_bias: bias {bias.data.shape} does not match channels of {x.data.shape}"
        )

    def backward_fn(g):
        return g, g.sum(axis=(1, 2))

    return record(
        "add_channel_bias", (x, bias), x.data + bias.data[:, None, None], backward_fn
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean of a (C,H,W) map, one value per channel."""
    if x.data.ndim != 3:
        raise ValueError(f"global_avg_pool expects (C,H,W), got {x.data.shape}")
    c, h, w = x.data.shape
    inv = 1.0 / (h * w)

    def backward_fn(g):
        return (np.broadcast_to((g * inv)[:, None, None], (c, h, w)),)

    return record("global_avg_pool", (x,), x.data.mean(axis=(1, 2)), backward_fn)


# ---------------------------------------------------------------------------
# pointwise family


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward_fn(g):
        return (g * mask,)

    return record("relu", (x,), np.maximum(x.data, 0), backward_fn)


def _sigmoid_values(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_values(x.data)

    def backward_fn(g):
        return (g * s * (1.0 - s),)

    return record("sigmoid", (x,), s, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (the one permitted broadcast)."""
    factor = float(factor)
    return record("scale", (x,), x.data * factor, lambda g: (g * factor,))


def concat(parts, axis: int = 0) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat of zero tensors")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return record(
        "concat", parts, np.concatenate([p.data for p in parts], axis=axis), backward_fn
    )


def element(x: Tensor, index: int) -> Tensor:
    """Scalar view of one entry of a 1-d tensor."""
    if x.data.ndim != 1:
        raise ValueError(f"element expects a vector, got shape {x.data.shape}")
    if not 0 <= index < x.data.size:
        raise ValueError(f"element index {index} out of range for {x.data.size}")

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record("element", (x,), np.asarray(x.data[index]), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Reduce to a scalar (shape ()) by summation."""
    shape = x.data.shape

    def backward_fn(g):
        return (np.broadcast_to(g, shape),)

    return record("sum", (x,), np.asarray(x.data.sum(), dtype=x.data.dtype), backward_fn)


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# structural ops


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous channel range of a (C,...) tensor."""
    if not (0 <= start < stop <= x.data.shape[0]):
        raise ValueError(
            f"slice_channels: range [{start}:{stop}) invalid for {x.data.shape[0]} channels"
        )
    shape = x.data.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record("slice_channels", (x,), x.data[start:stop].copy(), backward_fn)


def tile_channels(x: Tensor, reps: int) -> Tensor:
    """Repeat a single-channel (1,H,W) map along the channel axis."""
    if x.data.ndim != 3 or x.data.shape[0] != 1:
        raise ValueError(f"tile_channels expects (1,H,W), got {x.data.shape}")

    def backward_fn(g):
        return (g.sum(axis=0, keepdims=True),)

    return record(
        "tile_channels", (x,), np.repeat(x.data, reps, axis=0), backward_fn
    )


# ---------------------------------------------------------------------------
# normalisation / soft selection


def softmax(x: Tensor, temperature: float = 1.0) -> Tensor:
    """Temperature softmax over a 1-d vector, stabilised by max-subtraction."""
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be > 0, got {temperature}")
    if x.data.ndim != 1:
        raise ValueError(f"softmax expects a vector, got shape {x.data.shape}")
    z = (x.data - x.data.max()) / temperature
    e = np.exp(z)
    out = e / e.sum()

    def backward_fn(g):
        dot = float(np.dot(g, out))
        return (out * (g - dot) / temperature,)

    return record("softmax", (x,), out, backward_fn)


def normalize_affine(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = EPS_DEFAULT) -> Tensor:
    """((x - mean) / (std + eps)) * gamma + beta over a 1-d vector.

    std is the population standard deviation; gamma and beta are scalar
    parameters.  A constant input maps to beta everywhere.
    """
    if x.data.ndim != 1:
        raise ValueError(f"normalize_affine expects a vector, got shape {x.data.shape}")
    n = x.data.size
    mu = x.data.mean()
    centered = x.data - mu
    sigma = float(np.sqrt((centered**2).mean()))
    denom = sigma + eps
    xhat = centered / denom
    gval = float(gamma.data)
    out = xhat * gval + float(beta.data)

    def backward_fn(g):
        dgamma = np.asarray(np.dot(g, xhat), dtype=g.dtype)
        dbeta = np.asarray(g.sum(), dtype=g.dtype)
        dx = (gval / denom) * (g - g.mean())
        if sigma > 0.0:
            dx -= (gval * float(np.dot(g, centered)) / (denom * denom * n * sigma)) * centered
        return dx, dgamma.reshape(gamma.data.shape), dbeta.reshape(beta.data.shape)

    return record("normalize_affine", (x, gamma, beta), out, backward_fn)


def row_distance_sums(x: Tensor, metric: str = "l2") -> Tensor:
    """Per-row sums of pairwise row distances of a (B,m) matrix.

    out[i] = sum_j d(x_i, x_j) with d the L2 (default) or elementwise-L1 row
    distance.  The gradient of either distance at zero separation is 0, so
    duplicated rows are safe.
    """
    if x.data.ndim != 2:
        raise ValueError(f"row_distance_sums expects (B,m), got shape {x.data.shape}")
    if metric not in ("l2", "l1"):
        raise ValueError(f"row_distance_sums: unknown metric {metric!r}")
    diff = x.data[:, None, :] - x.data[None, :, :]  # (B,B,m)
    if metric == "l2":
        dist = np.sqrt((diff**2).sum(axis=2))
        out = dist.sum(axis=1)

        def backward_fn(g):
            safe = np.where(dist > 0, dist, 1.0)
            unit = diff / safe[:, :, None]
            unit[dist == 0] = 0.0
            pair = g[:, None] + g[None, :]
            return ((pair[:, :, None] * unit).sum(axis=1),)

    else:
        out = np.abs(diff).sum(axis=(1, 2))

        def backward_fn(g):
            pair = g[:, None] + g[None, :]
            return ((pair[:, :, None] * np.sign(diff)).sum(axis=1),)

    return record("row_distance_sums", (x,), out, backward_fn)
