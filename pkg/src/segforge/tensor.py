"""Dense float64 tensors with reverse-mode automatic differentiation.

Implements exactly the operation set a 2D encoder/decoder segmentation
network needs: dilated conv2d, max pooling, matrix-based upsampling,
batch norm, linear layers, ReLU/sigmoid, global average pooling, channel
concatenation and the elementwise arithmetic used by the loss functions.

Every op records a tape node (input references plus a backward rule) on
the output tensor; ``Tensor.backward()`` replays the rules in reverse
topological order and accumulates gradients into leaf tensors exactly
once. All math is float64 and deterministic: there is no randomness and
no accumulation-order ambiguity beyond what the BLAS provides for a
fixed thread count.

Checkpoint payloads use a little-endian binary format: magic ``SFT1``,
u32 rank, u64 dims, raw f64 data in row-major order.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from functools import lru_cache

import numpy as np

from .errors import ConfigError, FormatError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / validation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class TapeNode:
    """One recorded operation: parent tensors plus the rule producing their gradients."""

    __slots__ = ("inputs", "backward")

    def __init__(self, inputs, backward):
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "_backward_ran")

    def __init__(self, data, requires_grad=False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self._backward_ran = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # elementwise arithmetic (numpy broadcasting, gradients un-broadcast)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def backward(self):
        """Populate ``grad`` of every requires_grad leaf reachable from this scalar.

        The graph is released afterwards; calling backward twice on the
        same tensor raises.
        """
        if self.data.size != 1:
            raise ConfigError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._backward_ran:
            raise RuntimeError("backward already ran on this tensor; rebuild the graph first")
        if self.node is None and not self.requires_grad:
            raise RuntimeError("tensor is detached from the tape; nothing to differentiate")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                topo.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.inputs:
                    if id(p) not in seen:
                        stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(topo):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.requires_grad:
                    t.grad = g if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t.node.inputs, t.node.backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

        for t in topo:
            t.node = None
        self._backward_ran = True


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, inputs, backward):
    """Wrap op output; record a tape node only when grads are live."""
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad or t.node is not None for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(tuple(inputs), backward)
    return out


def _unbroadcast(g, shape):
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return np.ascontiguousarray(g)


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def clip(a, lo, hi):
    """Clamp values; gradient passes through the interior, zero where clipped."""
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi)
    return _make(out, (a,), lambda g: (g * inside,))


def tsum(a):
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def tmean(a):
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def relu(a):
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a):
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def activation(a, kind):
    if kind == "relu":
        return relu(a)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ConfigError(f"unknown activation kind {kind!r}")


def linear(x, weight, bias):
    """Affine map: (N, F_in) @ weight.T + bias with weight (F_out, F_in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ConfigError("linear expects 2D input and weight")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ConfigError(
            f"linear feature mismatch: input {x.data.shape[1]} vs weight {weight.data.shape[1]}"
        )
    if bias.data.shape != (weight.data.shape[0],):
        raise ConfigError(f"linear bias shape {bias.data.shape} does not match F_out {weight.data.shape[0]}")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), backward)


def conv_output_size(size, kernel, stride, dilation, padding):
    span = size + 2 * padding - dilation * (kernel - 1) - 1
    if span < 0 or span % stride != 0:
        raise ConfigError(
            f"conv output size is not a positive integer for size={size} kernel={kernel} "
            f"stride={stride} dilation={dilation} padding={padding}"
        )
    out = span // stride + 1
    if out < 1:
        raise ConfigError("conv output collapses to zero size")
    return out


_COL_BLOCK_BYTES = 1 << 20  # patch blocks sized to stay cache-resident


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    """Full patch matrix (Cin*kh*kw, N*Ho*Wo) from the padded input (strided path)."""
    n, c = xp.shape[0], xp.shape[1]
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh * dilation, sw * dilation, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view.transpose(1, 2, 3, 0, 4, 5)).reshape(c * kh * kw, n * ho * wo)


def _patch_view(xp, kh, kw, dilation):
    """6D (Cin, kh, kw, N, H', W') window view over the padded input, stride 1."""
    n, cin = xp.shape[0], xp.shape[1]
    sn, sc, sh, sw = xp.strides
    ho = xp.shape[2] - dilation * (kh - 1)
    wo = xp.shape[3] - dilation * (kw - 1)
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(cin, kh, kw, n, ho, wo),
        strides=(sc, sh * dilation, sw * dilation, sn, sh, sw),
        writeable=False,
    )


def _block_rows(cin, kh, kw, wo, ho):
    rows = _COL_BLOCK_BYTES // (cin * kh * kw * wo * 8)
    return max(1, min(ho, rows))


def _blocked_conv(xp, wmat, cout, kh, kw, dilation, ho, wo, bias=None):
    """Stride-1 conv of padded input against (Cout, Cin*kh*kw) weights.

    Per-sample patch blocks are copied through a cache-sized buffer, so
    the GEMMs never round-trip a full-feature-map im2col through DRAM
    (memory bandwidth, not BLAS throughput, limits conv speed here).
    """
    n, cin = xp.shape[0], xp.shape[1]
    k = cin * kh * kw
    view = _patch_view(xp, kh, kw, dilation)
    rows = _block_rows(cin, kh, kw, wo, ho)
    buf = np.empty((k, rows * wo))
    ybuf = np.empty((cout, rows * wo))
    out = np.empty((n, cout, ho, wo))
    badd = bias[:, None] if bias is not None else None
    for i in range(n):
        for r0 in range(0, ho, rows):
            rb = min(rows, ho - r0)
            cols = rb * wo
            blk = buf[:, :cols]
            np.copyto(blk.reshape(cin, kh, kw, rb, wo), view[:, :, :, i, r0 : r0 + rb, :])
            y = np.matmul(wmat, blk, out=ybuf[:, :cols])
            if badd is not None:
                y += badd
            out[i, :, r0 : r0 + rb, :] = y.reshape(cout, rb, wo)
    return out


def _blocked_gradw(xp, g, kh, kw, dilation, ho, wo):
    """Kernel gradient, streaming the same cache-sized patch blocks."""
    n, cin = xp.shape[0], xp.shape[1]
    cout = g.shape[1]
    k = cin * kh * kw
    gk = np.zeros((cout, k))
    view = _patch_view(xp, kh, kw, dilation)
    rows = _block_rows(cin, kh, kw, wo, ho)
    buf = np.empty((k, rows * wo))
    for i in range(n):
        for r0 in range(0, ho, rows):
            rb = min(rows, ho - r0)
            blk = buf[:, : rb * wo]
            np.copyto(blk.reshape(cin, kh, kw, rb, wo), view[:, :, :, i, r0 : r0 + rb, :])
            gblk = g[i, :, r0 : r0 + rb, :].reshape(cout, rb * wo)
            gk += gblk @ blk.T
    return gk


def _pad_nchw(arr, pad):
    if pad == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x, kernel, bias, stride=1, dilation=1, padding=0):
    """Dilated cross-correlation of (N,Cin,H,W) with (Cout,Cin,kH,kW) plus bias.

    Stride-1 convs (the whole network) run through the cache-blocked
    im2col core; the input gradient is computed as a conv of the output
    gradient with the flipped, channel-transposed kernel. Strided convs
    fall back to a full im2col with a scatter backward.
    """
    if stride < 1 or dilation < 1 or padding < 0:
        raise ConfigError("conv2d requires stride >= 1, dilation >= 1, padding >= 0")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ConfigError("conv2d expects 4D input and kernel")
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ConfigError(f"kernel expects {kcin} input channels, input has {cin}")
    if bias.data.shape != (cout,):
        raise ConfigError(f"conv bias shape {bias.data.shape} does not match C_out {cout}")
    ho = conv_output_size(h, kh, stride, dilation, padding)
    wo = conv_output_size(w, kw, stride, dilation, padding)
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    x_needs_grad = x.requires_grad or x.node is not None
    flip_pad = dilation * (kh - 1) - padding
    fast = stride == 1 and flip_pad >= 0

    if fast:
        xp = _pad_nchw(x.data, padding)
        out = _blocked_conv(xp, wmat, cout, kh, kw, dilation, ho, wo, bias=bias.data)

        def backward(g):
            g_kernel = _blocked_gradw(xp, g, kh, kw, dilation, ho, wo).reshape(cout, cin, kh, kw)
            g_bias = g.sum(axis=(0, 2, 3))
            if not x_needs_grad:
                return None, g_kernel, g_bias
            wflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, cout * kh * kw)
            gx = _blocked_conv(_pad_nchw(g, flip_pad), wflip, cin, kh, kw, dilation, h, w)
            return gx, g_kernel, g_bias

        return _make(out, (x, kernel, bias), backward)

    xp = _pad_nchw(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    out = (wmat @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3) + bias.data[None, :, None, None]

    def backward(g):
        g2d = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(cout, n * ho * wo)
        g_kernel = (g2d @ cols.T).reshape(cout, cin, kh, kw)
        g_bias = g.sum(axis=(0, 2, 3))
        if not x_needs_grad:
            return None, g_kernel, g_bias
        # channel-major scatter of the patch gradients
        gcols = (wmat.T @ g2d).reshape(cin, kh, kw, n, ho, wo)
        gxp = np.zeros((cin, n, h + 2 * padding, w + 2 * padding))
        for ki in range(kh):
            for kj in range(kw):
                gxp[
                    :,
                    :,
                    ki * dilation : ki * dilation + stride * ho : stride,
                    kj * dilation : kj * dilation + stride * wo : stride,
                ] += gcols[:, ki, kj]
        if padding:
            gxp = gxp[:, :, padding:-padding, padding:-padding]
        return np.ascontiguousarray(gxp.transpose(1, 0, 2, 3)), g_kernel, g_bias

    return _make(np.ascontiguousarray(out), (x, kernel, bias), backward)


def max_pool2d(x, window=2):
    """Non-overlapping window max; gradient goes to the first (row-major) maximum."""
    if x.data.ndim != 4:
        raise ConfigError("max_pool2d expects a 4D tensor")
    n, c, h, w = x.data.shape
    if h % window or w % window:
        raise ConfigError(f"spatial size {h}x{w} not divisible by pooling window {window}")
    ho, wo = h // window, w // window
    tiles = (
        x.data.reshape(n, c, ho, window, wo, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, window * window)
    )
    idx = tiles.argmax(axis=-1)
    out = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        buf = np.zeros((n, c, ho, wo, window * window))
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        gx = (
            buf.reshape(n, c, ho, wo, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (np.ascontiguousarray(gx),)

    return _make(np.ascontiguousarray(out), (x,), backward)


@lru_cache(maxsize=None)
def _upsample_matrix(in_size, factor, mode):
    """(out_size, in_size) interpolation matrix for one spatial axis."""
    out_size = in_size * factor
    m = np.zeros((out_size, in_size))
    if mode == "nearest":
        for i in range(out_size):
            m[i, i // factor] = 1.0
    elif mode == "bilinear":
        # sample centers at (i + 0.5)/f - 0.5, edges clamped
        for i in range(out_size):
            src = (i + 0.5) / factor - 0.5
            if src <= 0:
                m[i, 0] = 1.0
            elif src >= in_size - 1:
                m[i, in_size - 1] = 1.0
            else:
                i0 = int(np.floor(src))
                t = src - i0
                m[i, i0] = 1.0 - t
                m[i, i0 + 1] = t
    else:
        raise ConfigError(f"unknown upsample mode {mode!r}")
    m.setflags(write=False)
    return m


def upsample2d(x, factor=2, mode="bilinear"):
    """Integer-factor spatial upsampling as two small matrix products."""
    if factor < 2:
        raise ConfigError("upsample factor must be >= 2")
    if x.data.ndim != 4:
        raise ConfigError("upsample2d expects a 4D tensor")
    h, w = x.data.shape[2], x.data.shape[3]
    mh = _upsample_matrix(h, factor, mode)
    mw = _upsample_matrix(w, factor, mode)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def backward(g):
        return (np.ascontiguousarray(np.matmul(np.matmul(mh.T, g), mw)),)

    return _make(np.ascontiguousarray(out), (x,), backward)


class BNStats:
    """Running mean/variance for one batch-norm layer (not trained, mutated in training mode)."""

    def __init__(self, channels):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)

    def copy(self):
        out = BNStats(len(self.mean))
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batch_norm(x, gamma, beta, stats, training, eps=1e-5, momentum=0.1):
    """Channelwise batch normalization over (N, H, W) of a 4D tensor.

    Training mode normalizes by batch statistics (biased variance) and
    updates ``stats`` with momentum-weighted running values (unbiased
    variance, matching common framework behaviour). Eval mode uses the
    running statistics.
    """
    if x.data.ndim != 4:
        raise ConfigError("batch_norm expects a 4D tensor")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ConfigError("batch_norm gamma/beta must have one value per channel")
    axes = (0, 2, 3)
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]

    if training:
        if m < 2:
            raise ConfigError("training-mode batch_norm needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
        stats.var = (1.0 - momentum) * stats.var + momentum * (var * m / (m - 1))
        inv = 1.0 / np.sqrt(var + eps)
        # fused affine: out = x * (gamma*inv) + (beta - mu*gamma*inv); the
        # centered/normalized intermediates are rebuilt only in backward
        scale = gamma.data * inv
        out = x.data * scale[None, :, None, None]
        out += (beta.data - mu * scale)[None, :, None, None]

        def backward(g):
            xc = x.data - mu[None, :, None, None]
            gxhat = g * gamma.data[None, :, None, None]
            gvar = (gxhat * xc).sum(axis=axes) * (-0.5) * inv**3
            gmu = -(gxhat.sum(axis=axes)) * inv + gvar * (-2.0 / m) * xc.sum(axis=axes)
            gx = gxhat * inv[None, :, None, None]
            gx += (2.0 / m) * gvar[None, :, None, None] * xc
            gx += gmu[None, :, None, None] / m
            ggamma = (g * xc).sum(axis=axes) * inv
            gbeta = g.sum(axis=axes)
            return gx, ggamma, gbeta

        return _make(out, (x, gamma, beta), backward)

    inv = 1.0 / np.sqrt(stats.var + eps)
    run_mean = stats.mean.copy()
    scale = gamma.data * inv
    out = x.data * scale[None, :, None, None]
    out += (beta.data - run_mean * scale)[None, :, None, None]

    def backward(g):
        gx = g * scale[None, :, None, None]
        ggamma = ((g * x.data).sum(axis=axes) - run_mean * g.sum(axis=axes)) * inv
        gbeta = g.sum(axis=axes)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward)


def global_avg_pool(x):
    """Per-channel spatial mean: (N,C,H,W) -> (N,C)."""
    if x.data.ndim != 4:
        raise ConfigError("global_avg_pool expects a 4D tensor")
    n, c, h, w = x.data.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),)

    return _make(out, (x,), backward)


def concat_channels(a, b):
    """Channel-axis concatenation, ``a`` first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ConfigError("concat_channels expects 4D tensors")
    if a.data.shape[0] != b.data.shape[0] or a.data.shape[2:] != b.data.shape[2:]:
        raise ConfigError(f"concat spatial/batch mismatch: {a.data.shape} vs {b.data.shape}")
    ca = a.data.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g):
        return np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])

    return _make(out, (a, b), backward)


# --- checkpoint payload serialization ("SFT1") -----------------------------

_MAGIC = b"SFT1"


def save_array(f, arr):
    """Write one float64 array: magic, u32 rank, u64 dims, f64 payload (all little-endian)."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    own = isinstance(f, (str, bytes)) or hasattr(f, "__fspath__")
    fh = open(f, "wb") if own else f
    try:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.astype("<f8").tobytes())
    finally:
        if own:
            fh.close()


def load_array(f):
    """Read one array written by :func:`save_array`, validating structure byte by byte."""
    own = isinstance(f, (str, bytes)) or hasattr(f, "__fspath__")
    fh = open(f, "rb") if own else f
    try:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise FormatError(f"bad tensor magic {magic!r}, expected {_MAGIC!r}", offset=0)
        raw = fh.read(4)
        if len(raw) < 4:
            raise FormatError("truncated tensor header (rank)", offset=4 + len(raw))
        rank = struct.unpack("<I", raw)[0]
        raw = fh.read(8 * rank)
        if len(raw) < 8 * rank:
            raise FormatError("truncated tensor header (dims)", offset=8 + len(raw))
        dims = struct.unpack(f"<{rank}Q", raw) if rank else ()
        count = 1
        for d in dims:
            count *= d
        payload = fh.read(8 * count)
        if len(payload) < 8 * count:
            raise FormatError(
                f"truncated tensor payload: expected {8 * count} bytes, got {len(payload)}",
                offset=8 + 8 * rank + len(payload),
            )
        return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    finally:
        if own:
            fh.close()
