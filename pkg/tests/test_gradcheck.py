"""The finite-difference harness itself, plus the whole-model gradient check:
analytic gradients of the episode loss against central differences on
randomly sampled parameters, at float64."""

import numpy as np
import pytest

from fewshot_attention import autodiff as ad
from fewshot_attention import episodic, gradcheck
from fewshot_attention.model import AdaptiveAttentionNetwork, ModelConfig


def test_registry_covers_every_op():
    expected = {
        "add", "mul", "scale", "relu", "sigmoid", "reshape", "concat",
        "index_select0", "sum_axis", "sum_all", "linear", "conv2d",
        "maxpool2", "spatial_pyramid_pool", "global_avg_pool",
        "channel_scale", "broadcast_mul", "batchnorm_train",
        "batchnorm_eval", "softmax_cross_entropy",
    }
    assert set(gradcheck.registered_ops()) == expected


def test_unknown_op_rejected():
    with pytest.raises(KeyError):
        gradcheck.check_op("not_an_op")


def test_relative_error_metric():
    a = np.array([1.0, 0.0])
    assert gradcheck.relative_error(a, a) == 0.0
    assert gradcheck.relative_error(np.array([2.0]), np.array([1.0])) == pytest.approx(0.5)
    # below 1 the metric is absolute
    assert gradcheck.relative_error(np.array([1e-3]), np.array([2e-3])) == pytest.approx(1e-3)


def test_harness_catches_a_wrong_gradient():
    """A deliberately broken backward must blow past the tolerance."""
    x = ad.Tensor(np.random.default_rng(0).standard_normal((3, 3)),
                  requires_grad=True, dtype=np.float64)

    def build():
        out = ad.sigmoid(x)
        out._backward = lambda g: (2.5 * g,)  # wrong by construction
        return ad.sum_all(out)

    assert gradcheck.check_instance(build, [x]) > 1e-2


def test_every_registered_op_passes():
    results = gradcheck.check_all(seed=0)
    bad = {k: v for k, v in results.items() if v >= 1e-4}
    assert not bad, f"ops over tolerance: {bad}"


@pytest.mark.slow
def test_full_model_episode_gradient():
    """Backprop through the whole network on a 2-way 1-shot micro-episode
    matches central differences on 20 sampled parameters (64-bit)."""
    config = ModelConfig(input_size=24)
    model = AdaptiveAttentionNetwork(config, seed=0, dtype=np.float64)
    rng = np.random.default_rng(9)
    episode = episodic.Episode(
        way=2, shot=1, query=1,
        support_images=rng.uniform(0, 1, (2, 1, 24, 24)),
        support_labels=np.array([0, 1]),
        query_images=rng.uniform(0, 1, (2, 1, 24, 24)),
        query_labels=np.array([0, 1]),
        class_names=["a", "b"],
        support_refs=np.zeros((2, 2), dtype=np.int64),
        query_refs=np.zeros((2, 2), dtype=np.int64),
    )

    def loss_value():
        return episodic.total_loss(model, episode, training=True).item()

    model.zero_grad()
    ad.backward(episodic.total_loss(model, episode, training=True))

    params = model.parameters()
    picks = []
    while len(picks) < 20:
        p = params[rng.integers(len(params))]
        picks.append((p, int(rng.integers(p.size))))

    # step 1e-4: the composite loss has enough curvature that a 1e-3 step
    # leaves ~1e-3 truncation error, masking what the check is after
    worst = 0.0
    for p, flat_idx in picks:
        flat = p.data.reshape(-1)
        orig = flat[flat_idx]
        h = 1e-4 * max(1.0, abs(orig))
        flat[flat_idx] = orig + h
        fp = loss_value()
        flat[flat_idx] = orig - h
        fm = loss_value()
        flat[flat_idx] = orig
        numeric = (fp - fm) / (2.0 * h)
        analytic = p.grad.reshape(-1)[flat_idx]
        worst = max(worst, gradcheck.relative_error(
            np.array([analytic]), np.array([numeric])))
    assert worst < 1e-3, f"worst parameter-gradient error {worst:.2e}"
