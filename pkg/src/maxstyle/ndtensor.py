"""Minimal dense float32 tensor with reverse-mode autodiff.

Covers exactly the operations the rest of the package needs: 3x3-style
convolutions, relu, 2x pooling/upsampling, the two losses, and the handful
of elementwise/statistic ops used by the style transforms. Recording is
define-by-run: a fresh Tape per forward pass, nodes stored in execution
order, backward walks them in reverse. Broadcasting is deliberately
restricted to the dedicated per-channel / per-row ops; everything else
requires exact shape matches so shape bugs surface immediately.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .errors import DimensionError, ValidationError

F32 = np.float32


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes = []
        self.active = True


class _Node:
    __slots__ = ("out", "backward_fn", "tape")

    def __init__(self, out, backward_fn, tape):
        self.out = out
        self.backward_fn = backward_fn
        self.tape = tape


_TAPE_STACK: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def record():
    """Open a fresh tape; ops on grad-requiring tensors are recorded on it."""
    tape = Tape()
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        tape.active = False
        _TAPE_STACK.pop()


@contextmanager
def no_grad():
    """Suspend recording; outputs created inside are plain constants."""
    _TAPE_STACK.append(None)
    try:
        yield
    finally:
        _TAPE_STACK.pop()


class Tensor:
    """Dense float32 array, optionally participating in the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad=False):
        # asarray with order="C" keeps 0-d shapes (ascontiguousarray would not)
        arr = np.asarray(data, dtype=F32, order="C")
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(())[()])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Fresh constant leaf with a copy of this tensor's values."""
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul_scalar(self, -1.0)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=F32), requires_grad=requires_grad)


def _accum(t: Tensor, g: np.ndarray):
    # skipping non-grad inputs is what freezes model parameters during the
    # adversarial inner loop
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make_op(inputs, out_data, backward_fn) -> Tensor:
    """Wrap a forward result; record the node if the pass is being taped."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = _Node(out, backward_fn, tape)
        tape.nodes.append(out.node)
    return out


def backward(loss: Tensor):
    """Populate grads of every grad-requiring leaf reachable from `loss`.

    Repeated calls accumulate into leaf grads; intermediate grads are
    cleared at the start of each call.
    """
    if loss.data.shape != ():
        raise ValidationError(f"backward() needs a scalar, got shape {loss.data.shape}")
    if loss.node is None:
        raise ValidationError("backward() on a tensor that was not recorded on a tape")
    tape = loss.node.tape
    for node in tape.nodes:
        node.out.grad = None
    loss.grad = np.ones((), dtype=F32)
    for node in reversed(tape.nodes):
        if node.out.grad is not None:
            node.backward_fn(node.out.grad)


# ---------------------------------------------------------------------------
# elementwise and broadcast ops


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _make_op((a, b), a.data + b.data, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    return _make_op((a, b), a.data - b.data, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _make_op((a, b), a.data * b.data, bw)


def add_scalar(a: Tensor, c: float) -> Tensor:
    def bw(g):
        _accum(a, g)

    return _make_op((a,), a.data + F32(c), bw)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c = F32(c)

    def bw(g):
        _accum(a, g * c)

    return _make_op((a,), a.data * c, bw)


def identity(a: Tensor) -> Tensor:
    """Fresh copy; used where an op must not alias its input buffer."""

    def bw(g):
        _accum(a, g)

    return _make_op((a,), a.data.copy(), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at exactly 0

    def bw(g):
        _accum(x, g * mask)

    return _make_op((x,), np.where(mask, x.data, F32(0)), bw)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def bw(g):
        _accum(x, g / (2 * out_data))

    return _make_op((x,), out_data, bw)


def reciprocal(x: Tensor) -> Tensor:
    out_data = 1.0 / x.data

    def bw(g):
        _accum(x, -g * out_data * out_data)

    return _make_op((x,), out_data.astype(F32, copy=False), bw)


def sum_all(x: Tensor) -> Tensor:
    def bw(g):
        _accum(x, np.broadcast_to(g, x.data.shape).astype(F32))

    return _make_op((x,), np.asarray(x.data.sum(), dtype=F32), bw)


def spatial_mean(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) mean over the spatial axes."""
    if x.data.ndim != 4:
        raise DimensionError(f"spatial_mean: expected 4-d (N,C,H,W), got {x.data.shape}")
    n_px = x.data.shape[2] * x.data.shape[3]

    def bw(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / F32(n_px), x.data.shape))

    return _make_op((x,), x.data.mean(axis=(2, 3), dtype=F32), bw)


def scale_channels(x: Tensor, s: Tensor) -> Tensor:
    """Multiply (N,C,H,W) by a per-instance per-channel factor (N,C)."""
    if x.data.ndim != 4 or s.data.shape != x.data.shape[:2]:
        raise DimensionError(
            f"scale_channels: x {x.data.shape} vs scale {s.data.shape}, need (N,C,H,W) and (N,C)"
        )

    def bw(g):
        _accum(x, g * s.data[:, :, None, None])
        _accum(s, (g * x.data).sum(axis=(2, 3), dtype=F32))

    return _make_op((x, s), x.data * s.data[:, :, None, None], bw)


def shift_channels(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-instance per-channel offset (N,C) to (N,C,H,W)."""
    if x.data.ndim != 4 or b.data.shape != x.data.shape[:2]:
        raise DimensionError(
            f"shift_channels: x {x.data.shape} vs shift {b.data.shape}, need (N,C,H,W) and (N,C)"
        )

    def bw(g):
        _accum(x, g)
        _accum(b, g.sum(axis=(2, 3), dtype=F32))

    return _make_op((x, b), x.data + b.data[:, :, None, None], bw)


def scale_rows(m: Tensor, v: Tensor) -> Tensor:
    """Multiply each row of (N,C) by the matching entry of (N,)."""
    if m.data.ndim != 2 or v.data.shape != (m.data.shape[0],):
        raise DimensionError(f"scale_rows: m {m.data.shape} vs v {v.data.shape}")

    def bw(g):
        _accum(m, g * v.data[:, None])
        _accum(v, (g * m.data).sum(axis=1, dtype=F32))

    return _make_op((m, v), m.data * v.data[:, None], bw)


def take_rows(m: Tensor, idx) -> Tensor:
    """Gather rows of (N,...) by an integer index array; backward scatter-adds."""
    idx = np.asarray(idx)
    if idx.ndim != 1 or idx.shape[0] != m.data.shape[0]:
        raise DimensionError(f"take_rows: index shape {idx.shape} vs m {m.data.shape}")

    def bw(g):
        if m.requires_grad:
            acc = np.zeros_like(m.data)
            np.add.at(acc, idx, g)
            _accum(m, acc)

    return _make_op((m,), m.data[idx].copy(), bw)


# ---------------------------------------------------------------------------
# convolution and resampling


def _im2colT(xp: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Padded (N,C,Hp,Wp) -> transposed patch matrix (C*kh*kw, N*OH*OW).

    Row-by-row block copies keep this memory-bound rather than gather-bound;
    BLAS consumes the transpose for free in the following GEMM.
    """
    n, c, hp, wp = xp.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    at = np.empty((c * kh * kw, n * oh * ow), dtype=F32)
    r = 0
    for ci in range(c):
        for i in range(kh):
            for j in range(kw):
                np.copyto(at[r].reshape(n, oh, ow), xp[:, ci, i : i + oh, j : j + ow])
                r += 1
    return at


def _corr2d(x: np.ndarray, k: np.ndarray, padding: int) -> np.ndarray:
    """Raw batched cross-correlation, stride 1."""
    n, _, h, w = x.shape
    cout, cin, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    at = _im2colT(xp, kh, kw)
    oh, ow = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    # both GEMM operands C-contiguous; result is channel-major, one copy back
    out_t = k.reshape(cout, cin * kh * kw) @ at
    return np.ascontiguousarray(out_t.reshape(cout, n, oh, ow).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: int) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,kh,kw) plus per-channel bias."""
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d: input must be (N,Cin,H,W), got {x.data.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"conv2d: kernel must be (Cout,Cin,kh,kw), got {kernel.data.shape}")
    cout, cin, kh, kw = kernel.data.shape
    if x.data.shape[1] != cin:
        raise DimensionError(
            f"conv2d: input channel axis {x.data.shape[1]} != kernel channel axis {cin}"
        )
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel spatial dims must be odd, got {kh}x{kw}")
    if bias.data.shape != (cout,):
        raise DimensionError(f"conv2d: bias shape {bias.data.shape} != ({cout},)")
    if not 0 <= padding <= kh - 1:
        raise ValidationError(f"conv2d: padding {padding} outside [0, {kh - 1}]")

    out_data = _corr2d(x.data, kernel.data, padding) + bias.data[None, :, None, None]

    def bw(g):
        if x.requires_grad:
            # grad wrt input = correlation of g with the flipped, axis-swapped kernel
            kf = np.ascontiguousarray(kernel.data.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            _accum(x, _corr2d(g, kf, kh - 1 - padding))
        if kernel.requires_grad:
            xp = np.pad(
                x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))
            )
            at = _im2colT(xp, kh, kw)
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
            gk = (at @ g2).T.reshape(kernel.data.shape)
            _accum(kernel, gk)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3), dtype=F32))

    return _make_op((x, kernel, bias), out_data, bw)


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 mean pooling, (N,C,H,W) -> (N,C,H/2,W/2)."""
    if x.data.ndim != 4:
        raise DimensionError(f"avgpool2x: expected 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x: spatial axes must be even, got H={h}, W={w}")
    out_data = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=F32)

    def bw(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * F32(0.25)
        _accum(x, gx)

    return _make_op((x,), out_data, bw)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Replicate each pixel into a 2x2 block, (N,C,H,W) -> (N,C,2H,2W)."""
    if x.data.ndim != 4:
        raise DimensionError(f"upsample_nearest2x: expected 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        _accum(x, g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=F32))

    return _make_op((x,), out_data, bw)


# ---------------------------------------------------------------------------
# losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared elementwise difference, scalar output."""
    _check_same_shape(a, b, "mse")
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        d = g * F32(2.0 / n) * diff
        _accum(a, d)
        _accum(b, -d)

    return _make_op((a, b), np.asarray(np.mean(diff * diff), dtype=F32), bw)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel cross entropy of (N,K,H,W) logits against integer labels (N,H,W)."""
    if logits.data.ndim != 4:
        raise DimensionError(f"softmax_cross_entropy: logits must be 4-d, got {logits.data.shape}")
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValidationError(f"softmax_cross_entropy: labels must be integers, got {labels.dtype}")
    n, k, h, w = logits.data.shape
    if labels.shape != (n, h, w):
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {labels.shape} != {(n, h, w)}"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(
            f"softmax_cross_entropy: labels outside [0, {k}): min={labels.min()} max={labels.max()}"
        )

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sz = ez.sum(axis=1, keepdims=True)
    lse = np.log(sz)
    lab = labels[:, None, :, :]
    z_true = np.take_along_axis(z, lab, axis=1)
    n_px = n * h * w
    loss = np.asarray((lse - z_true).sum() / n_px, dtype=F32)

    def bw(g):
        if logits.requires_grad:
            p = ez / sz
            np.put_along_axis(p, lab, np.take_along_axis(p, lab, axis=1) - 1, axis=1)
            _accum(logits, p * (g / F32(n_px)))

    return _make_op((logits,), loss, bw)


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_diff_grad(f, x: Tensor, h: float = 1e-3) -> Tensor:
    """Central-difference gradient of scalar-valued `f` at `x`, elementwise."""
    if h <= 0:
        raise ValidationError(f"finite_diff_grad: h must be positive, got {h}")
    flat = x.data.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            xp = x.data.copy().reshape(-1)
            xp[i] = orig + F32(h)
            fp = f(Tensor(xp.reshape(x.data.shape))).item()
            xm = x.data.copy().reshape(-1)
            xm[i] = orig - F32(h)
            fm = f(Tensor(xm.reshape(x.data.shape))).item()
            out[i] = (fp - fm) / (2.0 * h)
    return Tensor(out.reshape(x.data.shape))


# ---------------------------------------------------------------------------
# TNS1 tensor file format

_TNS1_MAGIC = b"TNS1"


def write_tns(path, array: np.ndarray):
    """Write an array as TNS1: magic, u8 rank, rank x u32 LE dims, f32 LE data."""
    arr = np.asarray(array, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise ValidationError(f"write_tns: rank {arr.ndim} exceeds 255")
    with open(path, "wb") as fh:
        fh.write(_TNS1_MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_tns(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _TNS1_MAGIC:
            raise ValidationError(f"read_tns: bad magic {magic!r} in {path}")
        (rank,) = struct.unpack("<B", fh.read(1))
        dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        buf = fh.read(4 * count)
        if len(buf) != 4 * count:
            raise ValidationError(f"read_tns: truncated payload in {path}")
        return np.frombuffer(buf, dtype="<f4").reshape(dims).astype(F32)


def save_tensor(path, t: Tensor):
    write_tns(path, t.data)


def load_tensor(path) -> Tensor:
    return Tensor(read_tns(path))
