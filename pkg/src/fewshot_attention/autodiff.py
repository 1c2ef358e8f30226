"""Dense tensor library with reverse-mode automatic differentiation.

Numpy-backed. Storage is float32 by default; float64 tensors are supported
so numerical checks can run at full precision. Reductions accumulate in
float64 before casting back to the storage dtype. Every differentiable
operation records its parents and a backward closure; ``backward`` walks the
recorded graph once, in reverse topological order, and accumulates (+=) into
the ``grad`` buffers of every tensor with ``requires_grad``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DegenerateBatchError, DimensionError

DEFAULT_DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


def _as_array(data, dtype):
    a = np.asarray(data)
    if dtype is None:
        dtype = a.dtype if a.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
    if a.ndim == 0:
        return np.asarray(a, dtype=dtype)  # ascontiguousarray would promote to 1-d
    return np.ascontiguousarray(a, dtype=dtype)


class Tensor:
    """A dense n-dimensional array plus differentiation bookkeeping.

    ``data`` is a row-major numpy array. ``grad`` stays ``None`` until a
    backward pass populates it; repeated backward passes accumulate.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result, linking the graph only when gradients are live."""
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def backward(loss: Tensor):
    """Run reverse-mode differentiation from a scalar loss.

    Visits each recorded node exactly once in reverse topological order.
    Upstream gradients for the pass live in a scratch map, so calling
    backward twice without zeroing doubles every populated grad exactly.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")

    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, emit = stack.pop()
        if emit:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    upstream = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad += g
        if node._backward is None:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            acc = upstream.get(id(p))
            if acc is None:
                upstream[id(p)] = pg
            else:
                acc += pg


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        return (g if a.requires_grad else None,
                g if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), _bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def _bw(g):
        return (g * c,)

    return _make(a.data * np.asarray(c, dtype=a.dtype), (a,), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        return (g * b.data if a.requires_grad else None,
                g * a.data if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), _bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def _bw(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, x.dtype.type(0)), (x,), _bw)


def sigmoid(x: Tensor) -> Tensor:
    # evaluate in float64 to keep tails accurate, store at input precision
    s = (1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))).astype(x.dtype)

    def _bw(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), _bw)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape

    def _bw(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), _bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.ascontiguousarray(part) for part in np.split(g, offsets, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _bw)


def index_select0(x: Tensor, indices) -> Tensor:
    """Gather rows along axis 0; repeated indices accumulate on backward."""
    idx = np.asarray(indices, dtype=np.intp)

    def _bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, idx, g)
        return (dx,)

    return _make(x.data[idx], (x,), _bw)


def sum_axis(x: Tensor, axis: int) -> Tensor:
    ax = axis if axis >= 0 else axis + x.data.ndim
    out = x.data.sum(axis=ax, dtype=np.float64).astype(x.dtype)

    def _bw(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).astype(x.dtype, copy=True),)

    return _make(out, (x,), _bw)


def mean_axis(x: Tensor, axis: int) -> Tensor:
    return scale(sum_axis(x, axis), 1.0 / x.shape[axis])


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)

    def _bw(g):
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _make(out, (x,), _bw)


# ---------------------------------------------------------------------------
# feature-map ops
# ---------------------------------------------------------------------------

def channel_scale(feature: Tensor, weights: Tensor) -> Tensor:
    """Multiply every spatial map by its per-channel weight.

    Accepts ``[C,H,W] x [C]`` or batched ``[B,C,H,W] x [B,C]``.
    """
    if feature.data.ndim == 3 and weights.data.ndim == 1:
        c = feature.shape[0]
        if weights.shape[0] != c:
            raise DimensionError(
                f"channel_scale: {weights.shape[0]} weights for {c} channels")
        w = weights.data[:, None, None]
        sum_axes = (1, 2)
    elif feature.data.ndim == 4 and weights.data.ndim == 2:
        if weights.shape != feature.shape[:2]:
            raise DimensionError(
                f"channel_scale: weights {weights.shape} vs feature {feature.shape}")
        w = weights.data[:, :, None, None]
        sum_axes = (2, 3)
    else:
        raise DimensionError(
            f"channel_scale: unsupported ranks {feature.data.ndim}/{weights.data.ndim}")

    def _bw(g):
        dw = None
        if weights.requires_grad:
            dw = (g.astype(np.float64) * feature.data).sum(axis=sum_axes).astype(weights.dtype)
        df = g * w if feature.requires_grad else None
        return (df, dw)

    return _make(feature.data * w, (feature, weights), _bw)


def broadcast_mul(feature: Tensor, mask: Tensor) -> Tensor:
    """Multiply all channels by a single-channel spatial map.

    Accepts ``[C,H,W] x [1,H,W]`` or batched ``[B,C,H,W] x [B,1,H,W]``.
    """
    nd = feature.data.ndim
    if nd == 3 and mask.data.ndim == 3:
        ok = mask.shape[0] == 1 and mask.shape[1:] == feature.shape[1:]
        ch_axis = 0
    elif nd == 4 and mask.data.ndim == 4:
        ok = (mask.shape[0] == feature.shape[0] and mask.shape[1] == 1
              and mask.shape[2:] == feature.shape[2:])
        ch_axis = 1
    else:
        ok = False
        ch_axis = 0
    if not ok:
        raise DimensionError(
            f"broadcast_mul: mask {mask.shape} does not align with feature {feature.shape}")

    def _bw(g):
        dm = None
        if mask.requires_grad:
            dm = (g.astype(np.float64) * feature.data).sum(axis=ch_axis, keepdims=True)
            dm = dm.astype(mask.dtype)
        df = g * mask.data if feature.requires_grad else None
        return (df, dm)

    return _make(feature.data * mask.data, (feature, mask), _bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial dims: ``[...,C,H,W] -> [...,C]``."""
    if x.data.ndim < 3:
        raise DimensionError(f"global_avg_pool: need at least 3 dims, got {x.shape}")
    h, w = x.shape[-2], x.shape[-1]
    out = x.data.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)

    def _bw(g):
        gex = np.expand_dims(np.expand_dims(g, -1), -1) / np.asarray(h * w, dtype=x.dtype)
        return (np.broadcast_to(gex, x.shape).astype(x.dtype, copy=True),)

    return _make(out, (x,), _bw)


# ---------------------------------------------------------------------------
# linear and convolution
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``[B,D_in] @ weight[D_out,D_in].T + bias[D_out]``."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear: need 2-d input/weight, got {x.shape}/{weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input dim {x.shape[1]} vs weight dim {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs weight {weight.shape}")

    def _bw(g):
        dx = g @ weight.data if x.requires_grad else None
        dw = g.T @ x.data if weight.requires_grad else None
        db = g.sum(axis=0, dtype=np.float64).astype(bias.dtype) if bias.requires_grad else None
        return (dx, dw, db)

    return _make(x.data @ weight.data.T + bias.data, (x, weight, bias), _bw)


def _pad_channels_last(x: np.ndarray, pad: int) -> np.ndarray:
    """[B,C,H,W] -> zero-padded channels-last [B,H+2p,W+2p,C] working copy."""
    xt = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    return np.pad(xt, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _build_cols(xt: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """Channels-last column tensor ``[B,H,W,k*k,C]`` (one strided copy per tap)."""
    b, _, _, c = xt.shape
    cols = np.empty((b, h, w, k * k, c), dtype=xt.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, dy * k + dx, :] = xt[:, dy:dy + h, dx:dx + w, :]
    return cols


def _kernel_flat(kernel: np.ndarray) -> np.ndarray:
    """[O,C,k,k] -> contiguous [k*k*C, O] matching the column layout."""
    c_out, c_in, k, _ = kernel.shape
    return np.ascontiguousarray(kernel.transpose(2, 3, 1, 0)).reshape(k * k * c_in, c_out)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, same-padded 2-d convolution (cross-correlation).

    ``x``: ``[C_in,H,W]`` or ``[B,C_in,H,W]``; ``kernel``: ``[C_out,C_in,k,k]``
    with odd ``k``; output keeps the spatial dims.
    """
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise DimensionError(f"conv2d: kernel must be [C_out,C_in,k,k] with odd k, got {kernel.shape}")
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4:
        raise DimensionError(f"conv2d: input must be 3-d or 4-d, got {x.shape}")
    if xd.shape[1] != kernel.shape[1]:
        raise DimensionError(
            f"conv2d: input has {xd.shape[1]} channels, kernel expects {kernel.shape[1]}")
    c_out, c_in, k, _ = kernel.shape
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias {bias.shape} vs {c_out} output channels")

    pad = k // 2
    b, _, h, w = xd.shape
    cols = _build_cols(_pad_channels_last(xd, pad), k, h, w)
    cols2 = cols.reshape(b * h * w, k * k * c_in)
    kflat = _kernel_flat(kernel.data)
    out = cols2 @ kflat
    out += bias.data
    out = np.ascontiguousarray(out.reshape(b, h, w, c_out).transpose(0, 3, 1, 2))
    if not (_grad_enabled and (x.requires_grad or kernel.requires_grad)):
        cols = cols2 = None  # free saved activations in pure inference

    def _bw(g):
        gd = g if batched else g[None]
        gmat = np.ascontiguousarray(gd.transpose(0, 2, 3, 1)).reshape(b * h * w, c_out)
        dk = db = dx = None
        if kernel.requires_grad:
            dk = (gmat.T @ cols2).reshape(c_out, k * k, c_in) \
                .transpose(0, 2, 1).reshape(kernel.shape)
        if bias.requires_grad:
            db = gd.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.dtype)
        if x.requires_grad:
            dcols = (gmat @ kflat.T).reshape(b, h, w, k * k, c_in)
            dxt = np.zeros((b, h + 2 * pad, w + 2 * pad, c_in), dtype=gd.dtype)
            for dy in range(k):
                for dx_ in range(k):
                    dxt[:, dy:dy + h, dx_:dx_ + w, :] += dcols[:, :, :, dy * k + dx_, :]
            dx = np.ascontiguousarray(
                dxt[:, pad:pad + h, pad:pad + w, :].transpose(0, 3, 1, 2))
            if not batched:
                dx = dx[0]
        return (dx, dk, db)

    return _make(out if batched else out[0], (x, kernel, bias), _bw)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; trailing odd row/column dropped.

    Gradient routes to the first (row-major) maximal element of each window.
    """
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4:
        raise DimensionError(f"maxpool2: input must be 3-d or 4-d, got {x.shape}")
    b, c, h, w = xd.shape
    if h < 2 or w < 2:
        raise DimensionError(f"maxpool2: spatial dims must be >= 2, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = (xd[:, :, :2 * h2, :2 * w2]
           .reshape(b, c, h2, 2, w2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(b, c, h2, w2, 4))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _bw(g):
        gd = g if batched else g[None]
        dwin = np.zeros((b, c, h2, w2, 4), dtype=xd.dtype)
        np.put_along_axis(dwin, idx[..., None], gd[..., None], axis=-1)
        dx = np.zeros_like(xd)
        dx[:, :, :2 * h2, :2 * w2] = (dwin
                                      .reshape(b, c, h2, w2, 2, 2)
                                      .transpose(0, 1, 2, 4, 3, 5)
                                      .reshape(b, c, 2 * h2, 2 * w2))
        return (dx if batched else dx[0],)

    return _make(out if batched else out[0], (x,), _bw)


def _spp_bins(n: int, level: int):
    edges = [(i * n) // level for i in range(level + 1)]
    return [(edges[i], edges[i + 1]) for i in range(level)]


def spatial_pyramid_pool(x: Tensor, levels) -> Tensor:
    """Max-pool an ``l x l`` grid per level and concatenate: ``[...,C,H,W] -> [...,C*sum(l^2)]``.

    Per level the output block is the ``[C,l,l]`` cell grid flattened row-major.
    Output length depends only on C and the levels, never on H, W.
    """
    levels = [int(l) for l in levels]
    batched = x.data.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4:
        raise DimensionError(f"spatial_pyramid_pool: input must be 3-d or 4-d, got {x.shape}")
    b, c, h, w = xd.shape
    if max(levels) > min(h, w):
        raise DimensionError(
            f"spatial_pyramid_pool: level {max(levels)} exceeds spatial dims {h}x{w}")

    blocks = []
    cells = []  # (r0, c0, cw, argmax[b,c]) per cell, in output order
    for level in levels:
        vals = np.empty((b, c, level, level), dtype=xd.dtype)
        for i, (r0, r1) in enumerate(_spp_bins(h, level)):
            for j, (c0, c1) in enumerate(_spp_bins(w, level)):
                region = xd[:, :, r0:r1, c0:c1].reshape(b, c, -1)
                am = region.argmax(axis=-1)
                vals[:, :, i, j] = np.take_along_axis(region, am[..., None], axis=-1)[..., 0]
                cells.append((r0, c0, c1 - c0, am))
        blocks.append(vals.reshape(b, c * level * level))
    out = np.concatenate(blocks, axis=1)

    def _bw(g):
        gd = g if batched else g[None]
        dx = np.zeros_like(xd)
        bi = np.repeat(np.arange(b), c)
        ci = np.tile(np.arange(c), b)
        col = 0
        cell_iter = iter(cells)
        for level in levels:
            gl = gd[:, col:col + c * level * level].reshape(b, c, level * level)
            col += c * level * level
            for cell in range(level * level):
                r0, c0, cw, am = next(cell_iter)
                rows = r0 + am // cw
                colsx = c0 + am % cw
                np.add.at(dx, (bi, ci, rows.reshape(-1), colsx.reshape(-1)),
                          gl[:, :, cell].reshape(-1))
        return (dx if batched else dx[0],)

    return _make(out if batched else out[0], (x,), _bw)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormState:
    """Trainable scale/shift plus running statistics for one BN layer."""
    scale: Tensor
    shift: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, epsilon: float = 1e-5,
               dtype=DEFAULT_DTYPE) -> "BatchNormState":
        return cls(
            scale=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            shift=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over ``[B,C,H,W]``.

    Training mode normalizes with batch statistics (computed in float64) and
    updates the running statistics; eval mode applies the running statistics.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm: input must be [B,C,H,W], got {x.shape}")
    b, c, h, w = x.shape
    if state.scale.shape != (c,):
        raise DimensionError(f"batchnorm: state has {state.scale.shape[0]} channels, input {c}")
    gamma, beta = state.scale, state.shift
    eps = state.epsilon
    n = b * h * w

    if training:
        if n < 2:
            raise DegenerateBatchError(f"batchnorm: needs B*H*W >= 2 in training mode, got {n}")
        # reductions in float64, elementwise math at storage precision
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        sq = np.einsum("bchw,bchw->c", x.data, x.data, dtype=np.float64) / n
        var = np.maximum(sq - mean * mean, 0.0)
        invstd = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None].astype(x.dtype)) \
            * invstd[None, :, None, None].astype(x.dtype)
        mom = state.momentum
        state.running_mean[...] = ((1.0 - mom) * state.running_mean.astype(np.float64)
                                   + mom * mean).astype(state.running_mean.dtype)
        unbiased = var * n / (n - 1)
        state.running_var[...] = ((1.0 - mom) * state.running_var.astype(np.float64)
                                  + mom * unbiased).astype(state.running_var.dtype)

        def _bw(g):
            dgamma = dbeta = dx = None
            if beta.requires_grad:
                dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(beta.dtype)
            if gamma.requires_grad:
                dgamma = np.einsum("bchw,bchw->c", g, xhat, dtype=np.float64).astype(gamma.dtype)
            if x.requires_grad:
                dxhat = g * gamma.data[None, :, None, None]
                s1 = dxhat.sum(axis=(0, 2, 3), dtype=np.float64)
                s2 = np.einsum("bchw,bchw->c", dxhat, xhat, dtype=np.float64)
                coeff = (invstd / n).astype(x.dtype)
                dx = coeff[None, :, None, None] * (
                    n * dxhat - s1[None, :, None, None].astype(x.dtype)
                    - xhat * s2[None, :, None, None].astype(x.dtype))
            return (dx, dgamma, dbeta)

    else:
        invstd = 1.0 / np.sqrt(state.running_var.astype(np.float64) + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) \
            * invstd[None, :, None, None].astype(x.dtype)

        def _bw(g):
            dgamma = dbeta = dx = None
            if beta.requires_grad:
                dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(beta.dtype)
            if gamma.requires_grad:
                dgamma = np.einsum("bchw,bchw->c", g, xhat, dtype=np.float64).astype(gamma.dtype)
            if x.requires_grad:
                coeff = (gamma.data.astype(np.float64) * invstd).astype(x.dtype)
                dx = g * coeff[None, :, None, None]
            return (dx, dgamma, dbeta)

    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    return _make(out, (x, gamma, beta), _bw)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[target]``.

    Numerically stabilized by per-row max subtraction; internals in float64.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [B,K], got {logits.shape}")
    b, k = logits.shape
    t = np.asarray(targets, dtype=np.intp)
    if t.shape != (b,):
        raise DimensionError(f"softmax_cross_entropy: targets shape {t.shape}, expected ({b},)")
    if t.min(initial=0) < 0 or t.max(initial=0) >= k:
        raise IndexError(f"softmax_cross_entropy: target index outside [0,{k})")

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    expz = np.exp(z)
    probs = expz / expz.sum(axis=1, keepdims=True)
    loss = -(z[np.arange(b), t] - np.log(expz.sum(axis=1))).mean()

    def _bw(g):
        dz = probs.copy()
        dz[np.arange(b), t] -= 1.0
        dz *= float(np.asarray(g).reshape(-1)[0]) / b
        return (dz.astype(logits.dtype),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), _bw)
