"""Dense-tensor engine with reverse-mode differentiation.

The backward pass is built out of the same recorded primitives as the
forward pass, so gradients returned with ``create_graph=True`` are
themselves differentiable (double backward). Everything is float64.
"""

from __future__ import annotations

import base64
import functools
import json
import struct

import numpy as np

# When True, every primitive checks its output for NaN/Inf. Enabled by the
# test suite; off by default because the check walks every array.
debug_nan_checks = False


class DimensionError(ValueError):
    """Shape disagreement between operands."""


class TapeError(RuntimeError):
    """Misuse of the recording tape (no active tape, reused tape, ...)."""


_active_tape = None
_recording_enabled = True


class Tape:
    """Append-only record of primitive applications.

    Used as a context manager; ops record onto the innermost active tape.
    When ``retain_for_higher_order`` is set (the default), gradients computed
    with ``create_graph=True`` record their own arithmetic onto the tape so
    they can be differentiated again.
    """

    def __init__(self, retain_for_higher_order=True):
        self.nodes = []
        self.retain_for_higher_order = retain_for_higher_order
        self.consumed = False
        self._prev = None

    def __enter__(self):
        global _active_tape
        self._prev = _active_tape
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = self._prev
        return False


class Node:
    __slots__ = ("op", "inputs", "output", "backward_fn", "seq")

    def __init__(self, op, inputs, output, backward_fn, seq):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.seq = seq


class Tensor:
    """Shape-carrying float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def copy(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; scalars are allowed on either side
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)


def _as_tensor(value, shape):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


_seq_counter = 0


def _record(op, data, inputs, backward_fn):
    global _seq_counter
    if debug_nan_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    tape = _active_tape
    track = (
        _recording_enabled
        and tape is not None
        and any(t.requires_grad for t in inputs)
    )
    out = Tensor(data, requires_grad=track)
    if track:
        _seq_counter += 1
        node = Node(op, tuple(inputs), out, backward_fn, _seq_counter)
        tape.nodes.append(node)
        out.node = node
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, neg(g)))


def neg(a):
    return _record("neg", -a.data, (a,), lambda g: (neg(g),))


def mul(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mul: {a.shape} vs {b.shape}")
    return _record("mul", a.data * b.data, (a, b), lambda g: (mul(g, b), mul(g, a)))


def scale(a, c):
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (scale(g, c),))


def div(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"div: {a.shape} vs {b.shape}")
    out = _record("div", a.data / b.data, (a, b), None)
    out_ref = out

    def backward(g):
        return (div(g, b), neg(div(mul(g, out_ref), b)))

    if out.node is not None:
        out.node.backward_fn = backward
    return out


def exp(a):
    out = _record("exp", np.exp(a.data), (a,), None)
    if out.node is not None:
        out.node.backward_fn = lambda g: (mul(g, out),)
    return out


def log(a):
    return _record("log", np.log(a.data), (a,), lambda g: (div(g, a),))


def sigmoid(a):
    # computed via a stable split so neither exp overflows
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _record("sigmoid", y, (a,), None)
    if out.node is not None:
        out.node.backward_fn = lambda g: (mul(g, sub(out, mul(out, out))),)
    return out


def relu(a):
    mask = Tensor((a.data > 0).astype(np.float64))
    return _record("relu", a.data * mask.data, (a,), lambda g: (mul(g, mask),))


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} vs {b.shape}")
    return _record(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a):
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects 2-D, got {a.shape}")
    return _record("transpose", a.data.T.copy(), (a,), lambda g: (transpose(g),))


def permute(a, axes):
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(
        "permute", np.transpose(a.data, axes).copy(), (a,), lambda g: (permute(g, inv),)
    )


def reshape(a, shape):
    shape = tuple(shape)
    old = a.shape
    return _record(
        "reshape", a.data.reshape(shape).copy(), (a,), lambda g: (reshape(g, old),)
    )


def gather(a, idx):
    """out.flat[i] = a.flat[idx.flat[i]]; idx is a constant integer array."""
    idx = np.asarray(idx)
    shape = a.shape
    data = a.data.reshape(-1)[idx]
    return _record("gather", data, (a,), lambda g: (scatter_add(g, idx, shape),))


def scatter_add(a, idx, shape):
    """Adjoint of gather: accumulate a's entries into a zeros(shape) array."""
    idx = np.asarray(idx)
    out = np.zeros(shape, dtype=np.float64)
    np.add.at(out.reshape(-1), idx.reshape(-1), a.data.reshape(-1))
    return _record("scatter_add", out, (a,), lambda g: (gather(g, idx),))


def pad2d(a, ph, pw):
    if a.data.ndim != 4:
        raise DimensionError(f"pad2d expects 4-D, got {a.shape}")
    data = np.pad(a.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return _record("pad2d", data, (a,), lambda g: (crop2d(g, ph, pw),))


def crop2d(a, ph, pw):
    if a.data.ndim != 4:
        raise DimensionError(f"crop2d expects 4-D, got {a.shape}")
    h, w = a.shape[2], a.shape[3]
    data = a.data[:, :, ph : h - ph or None, pw : w - pw or None].copy()
    return _record("crop2d", data, (a,), lambda g: (pad2d(g, ph, pw),))


def reduce_sum(a, axes=None, keepdims=False):
    if axes is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    shape = a.shape

    def backward(g):
        return (expand(reshape(g, kept), shape),)

    return _record("reduce_sum", data, (a,), backward)


def expand(a, shape):
    """Broadcast size-1 axes of a up to shape (rank must match)."""
    shape = tuple(shape)
    if len(shape) != a.data.ndim:
        raise DimensionError(f"expand: rank {a.data.ndim} -> {shape}")
    axes = tuple(i for i, (m, n) in enumerate(zip(a.shape, shape)) if m != n)
    if any(a.shape[i] != 1 for i in axes):
        raise DimensionError(f"expand: {a.shape} -> {shape}")
    data = np.broadcast_to(a.data, shape).copy()
    return _record(
        "expand", data, (a,), lambda g: (reduce_sum(g, axes, keepdims=True),)
    )


def mean(a):
    return scale(reduce_sum(a), 1.0 / a.size)


def squared_norm(a):
    return reduce_sum(mul(a, a))


# ---------------------------------------------------------------------------
# composite operations


def linear(x, w, b=None):
    """x: (B, I), w: (O, I), b: (O,) -> (B, O)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear: x {x.shape} incompatible with w {w.shape}")
    out = matmul(x, transpose(w))
    if b is not None:
        if b.shape != (w.shape[0],):
            raise DimensionError(f"linear: bias {b.shape} vs out dim {w.shape[0]}")
        out = add(out, expand(reshape(b, (1, b.shape[0])), out.shape))
    return out


@functools.lru_cache(maxsize=256)
def _col_indices(c, h, w, kh, kw, sh, sw, ph, pw):
    """Flat indices into a padded (c, h+2ph, w+2pw) sample realizing im2col.

    Returns (idx of shape (c*kh*kw, hout*wout), hout, wout).
    """
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh or wp < kw:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {hp}x{wp}"
        )
    hout = (hp - kh) // sh + 1
    wout = (wp - kw) // sw + 1
    ci, ki, kj = np.meshgrid(
        np.arange(c), np.arange(kh), np.arange(kw), indexing="ij"
    )
    base = (ci * hp + ki) * wp + kj  # (c, kh, kw)
    oi, oj = np.meshgrid(np.arange(hout), np.arange(wout), indexing="ij")
    off = (oi * sh) * wp + oj * sw  # (hout, wout)
    idx = base.reshape(-1, 1) + off.reshape(1, -1)
    return idx, hout, wout


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x, k, stride=1, pad=0, bias=None):
    """Cross-correlation. x: (B, C, H, W), k: (F, C, Kh, Kw)."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise DimensionError(f"conv2d: x {x.shape}, k {k.shape}")
    b_, c, h, w = x.shape
    f, ck, kh, kw = k.shape
    if ck != c:
        raise DimensionError(f"conv2d: input channels {c} vs kernel channels {ck}")
    sh, sw = _pair(stride)
    ph, pw = _pair(pad)
    if sh < 1 or sw < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    idx, hout, wout = _col_indices(c, h, w, kh, kw, sh, sw, ph, pw)
    xp = pad2d(x, ph, pw) if (ph or pw) else x
    sample = c * (h + 2 * ph) * (w + 2 * pw)
    full = idx[None, :, :] + (np.arange(b_) * sample)[:, None, None]
    cols = gather(xp, full)  # (B, C*Kh*Kw, L)
    cols = reshape(permute(cols, (1, 0, 2)), (c * kh * kw, b_ * hout * wout))
    k2 = reshape(k, (f, c * kh * kw))
    y = matmul(k2, cols)  # (F, B*L)
    y = permute(reshape(y, (f, b_, hout, wout)), (1, 0, 2, 3))
    if bias is not None:
        if bias.shape != (f,):
            raise DimensionError(f"conv2d: bias {bias.shape} vs channels {f}")
        y = add(y, expand(reshape(bias, (1, f, 1, 1)), y.shape))
    return y


def maxpool2d(x, k, stride=None):
    """Non-overlapping-capable max pooling over (B, C, H, W)."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D, got {x.shape}")
    if stride is None:
        stride = k
    b_, c, h, w = x.shape
    kh, kw = _pair(k)
    sh, sw = _pair(stride)
    idx, hout, wout = _col_indices(1, h, w, kh, kw, sh, sw, 0, 0)
    full = idx[None, :, :] + (np.arange(b_ * c) * (h * w))[:, None, None]
    vals = x.data.reshape(-1)[full]  # (B*C, Kh*Kw, L)
    arg = np.argmax(vals, axis=1)  # (B*C, L)
    chosen = np.take_along_axis(full, arg[:, None, :], axis=1)[:, 0, :]
    return reshape(gather(x, chosen), (b_, c, hout, wout))


def flatten(x):
    b_ = x.shape[0]
    return reshape(x, (b_, int(np.prod(x.shape[1:]))))


def log_softmax(logits):
    m = Tensor(logits.data.max(axis=1, keepdims=True))  # detached shift
    z = sub(logits, expand(m, logits.shape))
    lse = log(reduce_sum(exp(z), axes=1, keepdims=True))
    return sub(z, expand(lse, logits.shape))


def softmax(logits):
    return exp(log_softmax(logits))


def softmax_cross_entropy(logits, label):
    """Mean cross-entropy over the batch.

    ``label`` may be a class index, a sequence of per-sample indices, or a
    Tensor of soft label distributions with the logits' shape.
    """
    if logits.data.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape}")
    b_, c = logits.shape
    logp = log_softmax(logits)
    if isinstance(label, Tensor):
        if label.shape != logits.shape:
            raise DimensionError(
                f"softmax_cross_entropy: labels {label.shape} vs logits {logits.shape}"
            )
        return scale(neg(reduce_sum(mul(label, logp))), 1.0 / b_)
    idx = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if idx.shape != (b_,):
        raise IndexError(f"expected {b_} labels, got shape {idx.shape}")
    if np.any(idx < 0) or np.any(idx >= c):
        raise IndexError(f"label out of range [0, {c})")
    flat = np.arange(b_) * c + idx
    return scale(neg(reduce_sum(gather(logp, flat))), 1.0 / b_)


# ---------------------------------------------------------------------------
# differentiation


def grad(output, wrt, create_graph=False, retain_graph=None):
    """d(output)/d(each tensor in wrt), as a list of Tensors.

    With ``create_graph`` the returned tensors are recorded on the tape and
    can be differentiated again. Tensors unreachable from ``output`` get a
    zero gradient of matching shape.
    """
    global _recording_enabled
    if output.size != 1:
        raise TapeError(f"grad output must be scalar, got shape {output.shape}")
    if retain_graph is None:
        retain_graph = create_graph
    tape = _active_tape
    if output.node is None:
        return [Tensor(np.zeros(t.shape)) for t in wrt]
    if tape is None:
        raise TapeError("grad called outside an active Tape")
    if tape.consumed:
        raise TapeError("tape already consumed; pass retain_graph=True to reuse")
    if create_graph and not tape.retain_for_higher_order:
        raise TapeError("tape was not opened with retain_for_higher_order")

    # reachable subgraph, in recording order
    seen = set()
    stack = [output.node]
    nodes = []
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        for t in node.inputs:
            if t.node is not None and id(t.node) not in seen:
                stack.append(t.node)
    nodes.sort(key=lambda n: n.seq)

    prev_enabled = _recording_enabled
    _recording_enabled = create_graph
    try:
        adjoints = {id(output): Tensor(np.ones(output.shape))}
        tensor_of = {id(output): output}
        for node in reversed(nodes):
            g = adjoints.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for t, ig in zip(node.inputs, in_grads):
                if ig is None or not t.requires_grad:
                    continue
                prev = adjoints.get(id(t))
                adjoints[id(t)] = ig if prev is None else add(prev, ig)
                tensor_of[id(t)] = t
        result = []
        for t in wrt:
            g = adjoints.get(id(t))
            if t is output:
                g = Tensor(np.ones(t.shape))
            if g is None:
                g = Tensor(np.zeros(t.shape))
            result.append(g)
    finally:
        _recording_enabled = prev_enabled
    if not retain_graph:
        tape.consumed = True
    return result


# ---------------------------------------------------------------------------
# serialization

_FTEN_MAGIC = b"FTEN"


def tensor_to_json(t):
    return {"shape": list(t.shape), "data": [float(v) for v in t.data.reshape(-1)]}


def tensor_from_json(obj):
    shape = tuple(int(d) for d in obj["shape"])
    data = np.asarray(obj["data"], dtype=np.float64)
    if int(np.prod(shape)) != data.size:
        raise ValueError(f"shape {shape} does not match {data.size} values")
    return Tensor(data.reshape(shape))


def tensor_to_ften(t):
    """Compact binary form: magic, u32 rank, u32 dims, little-endian f32."""
    head = _FTEN_MAGIC + struct.pack("<I", len(t.shape))
    head += struct.pack(f"<{len(t.shape)}I", *t.shape)
    return head + t.data.astype("<f4").tobytes()


def tensor_from_ften(buf):
    if buf[:4] != _FTEN_MAGIC:
        raise ValueError("bad FTEN magic at byte 0")
    (rank,) = struct.unpack_from("<I", buf, 4)
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    n = int(np.prod(dims)) if dims else 1
    payload = buf[off : off + 4 * n]
    if len(payload) != 4 * n:
        raise ValueError(f"FTEN payload truncated at byte {off + len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return Tensor(data.reshape(dims))


def tensor_to_ften_b64(t):
    return base64.b64encode(tensor_to_ften(t)).decode("ascii")


def tensor_from_ften_b64(s):
    return tensor_from_ften(base64.b64decode(s))


def dumps_tensor(t):
    return json.dumps(tensor_to_json(t))
