"""Central finite-difference checks for every differentiable operation.

The harness runs in float64 ("64-bit harness"): instances are built at full
precision, the analytic gradient comes from one backward pass, and the
numerical gradient perturbs each input entry by an absolute-or-relative step
``h = step * max(1, |x|)``. The reported error is

    max over entries of |analytic - numeric| / max(1, |analytic|, |numeric|).

Losses are random projections of the op output (elementwise product with a
fixed random tensor, then a full sum) so that permutation bugs cannot cancel.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

DEFAULT_STEP = 1e-3
DEFAULT_TOLERANCE = 1e-4
DEFAULT_INSTANCES = 5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return float((np.abs(analytic - numeric) / denom).max())


def numerical_gradient(forward, param: ad.Tensor, step: float = DEFAULT_STEP) -> np.ndarray:
    """Central differences of a scalar-valued ``forward`` w.r.t. one tensor."""
    flat = param.data.reshape(-1)
    grad = np.zeros_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        h = step * max(1.0, abs(orig))
        flat[j] = orig + h
        fp = forward()
        flat[j] = orig - h
        fm = forward()
        flat[j] = orig
        grad[j] = (fp - fm) / (2.0 * h)
    return grad.reshape(param.shape)


def check_instance(build_loss, params, step: float = DEFAULT_STEP) -> float:
    """Compare backward gradients against finite differences for one instance."""
    for p in params:
        p.grad = None
    loss = build_loss()
    ad.backward(loss)
    worst = 0.0
    for p in params:
        num = numerical_gradient(lambda: build_loss().item(), p, step)
        ana = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, relative_error(ana, num))
    return worst


def _param(rng, shape, lo=-1.0, hi=1.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _distinct(rng, shape):
    """Values with pairwise gaps >= 0.1, so max-selection survives the fd step."""
    n = int(np.prod(shape))
    vals = rng.permutation(n).astype(np.float64) * 0.1
    return ad.Tensor(vals.reshape(shape), requires_grad=True, dtype=np.float64)


def _projected(rng, out: ad.Tensor) -> ad.Tensor:
    proj = ad.Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return ad.sum_all(ad.mul(out, proj))


def _with_projection(rng, params, op):
    """Freeze a projection so repeated forwards give identical scalars."""
    proj_rng = np.random.default_rng(rng.integers(2**32))
    first = op()
    proj = ad.Tensor(proj_rng.standard_normal(first.shape), dtype=np.float64)
    return lambda: ad.sum_all(ad.mul(op(), proj)), params


# --- one builder per registered op; each returns (build_loss, params) -------

def _build_add(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (3, 4))
    return _with_projection(rng, [a, b], lambda: ad.add(a, b))


def _build_mul(rng):
    a, b = _param(rng, (2, 5)), _param(rng, (2, 5))
    return _with_projection(rng, [a, b], lambda: ad.mul(a, b))


def _build_scale(rng):
    a = _param(rng, (4, 3))
    c = float(rng.uniform(-2.0, 2.0))
    return _with_projection(rng, [a], lambda: ad.scale(a, c))


def _build_relu(rng):
    x = _param(rng, (3, 5))
    # keep entries away from the kink
    x.data += np.sign(x.data) * 0.05
    return _with_projection(rng, [x], lambda: ad.relu(x))


def _build_sigmoid(rng):
    x = _param(rng, (3, 5), lo=-3.0, hi=3.0)
    return _with_projection(rng, [x], lambda: ad.sigmoid(x))


def _build_reshape(rng):
    x = _param(rng, (3, 4))
    return _with_projection(rng, [x], lambda: ad.reshape(x, (2, 6)))


def _build_concat(rng):
    a, b = _param(rng, (2, 3)), _param(rng, (4, 3))
    return _with_projection(rng, [a, b], lambda: ad.concat([a, b], axis=0))


def _build_index_select0(rng):
    x = _param(rng, (5, 3))
    idx = rng.integers(0, 5, size=8)  # repeats exercise accumulation
    return _with_projection(rng, [x], lambda: ad.index_select0(x, idx))


def _build_sum_axis(rng):
    x = _param(rng, (3, 4, 2))
    ax = int(rng.integers(0, 3))
    return _with_projection(rng, [x], lambda: ad.sum_axis(x, ax))


def _build_sum_all(rng):
    x = _param(rng, (4, 5))
    return (lambda: ad.sum_all(x)), [x]


def _build_linear(rng):
    x, w, b = _param(rng, (3, 4)), _param(rng, (5, 4)), _param(rng, (5,))
    return _with_projection(rng, [x, w, b], lambda: ad.linear(x, w, b))


def _build_conv2d(rng):
    if rng.integers(2):
        x = _param(rng, (2, 3, 5, 5))
    else:
        x = _param(rng, (3, 4, 4))
    k = _param(rng, (4, 3, 3, 3))
    b = _param(rng, (4,))
    return _with_projection(rng, [x, k, b], lambda: ad.conv2d(x, k, b))


def _build_maxpool2(rng):
    x = _distinct(rng, (2, 2, 5, 6))
    return _with_projection(rng, [x], lambda: ad.maxpool2(x))


def _build_spatial_pyramid_pool(rng):
    x = _distinct(rng, (2, 3, 7, 9))
    return _with_projection(rng, [x], lambda: ad.spatial_pyramid_pool(x, (1, 2, 3)))


def _build_global_avg_pool(rng):
    x = _param(rng, (2, 3, 4, 5))
    return _with_projection(rng, [x], lambda: ad.global_avg_pool(x))


def _build_channel_scale(rng):
    if rng.integers(2):
        f, w = _param(rng, (3, 4, 5)), _param(rng, (3,))
    else:
        f, w = _param(rng, (2, 3, 4, 4)), _param(rng, (2, 3))
    return _with_projection(rng, [f, w], lambda: ad.channel_scale(f, w))


def _build_broadcast_mul(rng):
    if rng.integers(2):
        f, m = _param(rng, (3, 4, 5)), _param(rng, (1, 4, 5))
    else:
        f, m = _param(rng, (2, 3, 4, 4)), _param(rng, (2, 1, 4, 4))
    return _with_projection(rng, [f, m], lambda: ad.broadcast_mul(f, m))


def _build_batchnorm_train(rng):
    x = _param(rng, (3, 4, 3, 3))
    state = ad.BatchNormState.create(4, dtype=np.float64)
    state.scale.data = rng.uniform(0.5, 1.5, size=4)
    state.shift.data = rng.uniform(-0.5, 0.5, size=4)
    params = [x, state.scale, state.shift]
    return _with_projection(rng, params, lambda: ad.batchnorm(x, state, training=True))


def _build_batchnorm_eval(rng):
    x = _param(rng, (2, 3, 4, 4))
    state = ad.BatchNormState.create(3, dtype=np.float64)
    state.scale.data = rng.uniform(0.5, 1.5, size=3)
    state.shift.data = rng.uniform(-0.5, 0.5, size=3)
    state.running_mean = rng.uniform(-0.5, 0.5, size=3)
    state.running_var = rng.uniform(0.5, 2.0, size=3)
    params = [x, state.scale, state.shift]
    return _with_projection(rng, params, lambda: ad.batchnorm(x, state, training=False))


def _build_softmax_cross_entropy(rng):
    logits = _param(rng, (4, 5), lo=-2.0, hi=2.0)
    targets = rng.integers(0, 5, size=4)
    return (lambda: ad.softmax_cross_entropy(logits, targets)), [logits]


REGISTRY = {
    "add": _build_add,
    "mul": _build_mul,
    "scale": _build_scale,
    "relu": _build_relu,
    "sigmoid": _build_sigmoid,
    "reshape": _build_reshape,
    "concat": _build_concat,
    "index_select0": _build_index_select0,
    "sum_axis": _build_sum_axis,
    "sum_all": _build_sum_all,
    "linear": _build_linear,
    "conv2d": _build_conv2d,
    "maxpool2": _build_maxpool2,
    "spatial_pyramid_pool": _build_spatial_pyramid_pool,
    "global_avg_pool": _build_global_avg_pool,
    "channel_scale": _build_channel_scale,
    "broadcast_mul": _build_broadcast_mul,
    "batchnorm_train": _build_batchnorm_train,
    "batchnorm_eval": _build_batchnorm_eval,
    "softmax_cross_entropy": _build_softmax_cross_entropy,
}


def registered_ops():
    return sorted(REGISTRY)


def check_op(name: str, seed: int = 0, instances: int = DEFAULT_INSTANCES,
             step: float = DEFAULT_STEP) -> float:
    """Worst relative error over ``instances`` random instances of one op."""
    if name not in REGISTRY:
        raise KeyError(f"unknown op {name!r}; registered: {', '.join(registered_ops())}")
    # stable per-op stream: same seed checks the same instances every run
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    for _ in range(instances):
        build_loss, params = REGISTRY[name](rng)
        worst = max(worst, check_instance(build_loss, params, step))
    return worst


def check_all(seed: int = 0, instances: int = DEFAULT_INSTANCES,
              step: float = DEFAULT_STEP) -> dict:
    """Worst relative error per registered op, keyed by op name."""
    return {name: check_op(name, seed, instances, step) for name in registered_ops()}
