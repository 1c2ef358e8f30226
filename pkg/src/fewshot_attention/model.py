"""The adaptive-attention few-shot network.

Four components over a shared tensor core:

* a 4-block convolutional feature extractor (64 channels per block, the
  final block keeps its spatial resolution by omitting the pool),
* a meta-weight generator turning one support feature map into a
  per-channel weight vector,
* a spatial attention generator producing a single-channel map over the
  query feature conditioned on the support, and
* a relation classifier scoring the attention-refined query feature.

The pair score is symmetrized: score(s, q) = C(q refined by map(s->q)) +
C(s refined by map(q->s)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError

COMBINE_MODES = ("reweight", "concatenate")


def feature_map_size(input_size: int) -> int:
    """Spatial size after the three pooled blocks (floor halving)."""
    s = int(input_size)
    for _ in range(3):
        s //= 2
    return s


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    input_size: int = 28
    feature_channels: int = 64
    spp_levels: tuple = (1, 2, 3)
    combine_mode: str = "reweight"
    classifier_enabled: bool = True
    map_activation: str = "sigmoid"

    def __post_init__(self):
        if self.combine_mode not in COMBINE_MODES:
            raise ConfigError(f"combine_mode must be one of {COMBINE_MODES}")
        if self.map_activation != "sigmoid":
            raise ConfigError("map_activation: only 'sigmoid' is supported")
        if feature_map_size(self.input_size) < max(self.spp_levels):
            raise ConfigError(
                f"input_size {self.input_size} leaves a "
                f"{feature_map_size(self.input_size)}px feature map, smaller than "
                f"the coarsest pyramid level {max(self.spp_levels)}")

    @property
    def feature_size(self) -> int:
        return feature_map_size(self.input_size)

    @property
    def spp_length(self) -> int:
        return self.feature_channels * sum(l * l for l in self.spp_levels)

    def to_dict(self) -> dict:
        return {
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "feature_channels": self.feature_channels,
            "spp_levels": list(self.spp_levels),
            "combine_mode": self.combine_mode,
            "classifier_enabled": self.classifier_enabled,
            "map_activation": self.map_activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["spp_levels"] = tuple(d.get("spp_levels", (1, 2, 3)))
        return cls(**d)


class Conv2dLayer:
    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, dtype=np.float32):
        std = np.sqrt(2.0 / (c_in * k * k))
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias)

    def named(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class LinearLayer:
    def __init__(self, rng, d_in: int, d_out: int, dtype=np.float32):
        std = np.sqrt(2.0 / d_in)
        self.weight = Tensor(rng.normal(0.0, std, size=(d_out, d_in)),
                             requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def named(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class BatchNormLayer:
    def __init__(self, channels: int, dtype=np.float32):
        self.state = ad.BatchNormState.create(channels, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ad.batchnorm(x, self.state, training)

    def named(self, prefix: str):
        return [(f"{prefix}.scale", self.state.scale), (f"{prefix}.shift", self.state.shift)]

    def named_stats(self, prefix: str):
        return [(f"{prefix}.running_mean", self.state.running_mean),
                (f"{prefix}.running_var", self.state.running_var)]


class AdaptiveAttentionNetwork:
    """Holds all trainable components and the forward paths between them."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        fc = config.feature_channels

        self.blocks = []
        c_in = config.input_channels
        for i in range(4):
            self.blocks.append({
                "conv": Conv2dLayer(rng, c_in, fc, dtype=dtype),
                "bn": BatchNormLayer(fc, dtype=dtype),
                "pool": i < 3,
            })
            c_in = fc

        d = config.spp_length
        self.meta_weight_gen = [
            LinearLayer(rng, d, 200, dtype=dtype),
            LinearLayer(rng, 200, 200, dtype=dtype),
            LinearLayer(rng, 200, fc, dtype=dtype),
        ]

        attn_in = fc if config.combine_mode == "reweight" else 2 * fc
        self.spatial_attn = [
            Conv2dLayer(rng, attn_in, fc, dtype=dtype),
            Conv2dLayer(rng, fc, 1, dtype=dtype),
        ]

        self.classifier = [
            LinearLayer(rng, d, 200, dtype=dtype),
            LinearLayer(rng, 200, 200, dtype=dtype),
            LinearLayer(rng, 200, 1, dtype=dtype),
        ]

    # -- parameter bookkeeping ------------------------------------------------

    def named_parameters(self):
        out = []
        for i, blk in enumerate(self.blocks):
            out += blk["conv"].named(f"extractor.block{i + 1}.conv")
            out += blk["bn"].named(f"extractor.block{i + 1}.bn")
        for i, fcl in enumerate(self.meta_weight_gen):
            out += fcl.named(f"meta_weight_gen.fc{i + 1}")
        for i, cv in enumerate(self.spatial_attn):
            out += cv.named(f"spatial_attn.conv{i + 1}")
        for i, fcl in enumerate(self.classifier):
            out += fcl.named(f"classifier.fc{i + 1}")
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def named_stats(self):
        out = []
        for i, blk in enumerate(self.blocks):
            out += blk["bn"].named_stats(f"extractor.block{i + 1}.bn")
        return out

    def state_dict(self) -> dict:
        d = {name: t.data.copy() for name, t in self.named_parameters()}
        d.update({name: arr.copy() for name, arr in self.named_stats()})
        return d

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        stats = dict(self.named_stats())
        missing = (set(own) | set(stats)) - set(state)
        extra = set(state) - (set(own) | set(stats))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, t in own.items():
            arr = np.asarray(state[name], dtype=t.dtype)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: shape {arr.shape} vs expected {t.shape}")
            t.data[...] = arr
        for name, arr in stats.items():
            src = np.asarray(state[name], dtype=arr.dtype)
            if src.shape != arr.shape:
                raise DimensionError(f"{name}: shape {src.shape} vs expected {arr.shape}")
            arr[...] = src

    def clone(self) -> "AdaptiveAttentionNetwork":
        other = AdaptiveAttentionNetwork(self.config, seed=0, dtype=self.dtype)
        other.load_state_dict(self.state_dict())
        return other

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for _, t in self.named_parameters())

    # -- forward paths ---------------------------------------------------------

    def _as_tensor(self, images) -> Tensor:
        if isinstance(images, Tensor):
            return images
        return Tensor(np.asarray(images), dtype=self.dtype)

    def extract_features(self, images, training: bool = False) -> Tensor:
        """Images ``[B,C_in,S,S]`` -> features ``[B,64,S',S']`` (28->3, 84->10)."""
        x = self._as_tensor(images)
        if x.data.ndim != 4:
            raise DimensionError(f"extract_features: expected [B,C,S,S], got {x.shape}")
        if x.shape[1] != self.config.input_channels or x.shape[2] != self.config.input_size:
            raise ConfigError(
                f"extract_features: got {tuple(x.shape[1:])}, model expects "
                f"({self.config.input_channels}, {self.config.input_size}, {self.config.input_size})")
        for blk in self.blocks:
            x = ad.relu(blk["bn"](blk["conv"](x), training))
            if blk["pool"]:
                x = ad.maxpool2(x)
        return x

    def _mlp(self, x: Tensor, layers) -> Tensor:
        x = ad.relu(layers[0](x))
        x = ad.relu(layers[1](x))
        return layers[2](x)

    def meta_weights_batch(self, feats: Tensor) -> Tensor:
        """Support features ``[N,64,h,w]`` -> weight vectors ``[N,64]``."""
        pooled = ad.spatial_pyramid_pool(feats, self.config.spp_levels)
        return self._mlp(pooled, self.meta_weight_gen)

    def meta_weights(self, f_s: Tensor) -> Tensor:
        """One support feature ``[64,h,w]`` -> weight vector ``[64]``."""
        if f_s.data.ndim != 3:
            raise DimensionError(f"meta_weights: expected [C,H,W], got {f_s.shape}")
        w = self.meta_weights_batch(ad.reshape(f_s, (1,) + tuple(f_s.shape)))
        return ad.reshape(w, (w.shape[1],))

    def spatial_attn_batch(self, x: Tensor) -> Tensor:
        """Merged features ``[N,C,h,w]`` -> pre-activation maps ``[N,1,h,w]``."""
        return self.spatial_attn[1](ad.relu(self.spatial_attn[0](x)))

    def attention_map_from_weights(self, f_q: Tensor, weights: Tensor) -> Tensor:
        """Reweight path: map over the query feature for one weight vector."""
        scaled = ad.channel_scale(f_q, weights)
        if scaled.data.ndim == 3:
            m = self.spatial_attn_batch(ad.reshape(scaled, (1,) + tuple(scaled.shape)))
            return ad.reshape(m, tuple(m.shape[1:]))
        return self.spatial_attn_batch(scaled)

    def adaptive_attention_map(self, f_s: Tensor, f_q: Tensor) -> Tensor:
        """Pre-activation attention map ``[1,h,w]`` over the query, conditioned
        on the support. Resolution always equals the query feature's."""
        if f_s.shape != f_q.shape:
            raise DimensionError(
                f"adaptive_attention_map: support {f_s.shape} vs query {f_q.shape}")
        if self.config.combine_mode == "reweight":
            return self.attention_map_from_weights(f_q, self.meta_weights(f_s))
        merged = ad.concat([f_s, f_q], axis=0)
        m = self.spatial_attn_batch(ad.reshape(merged, (1,) + tuple(merged.shape)))
        return ad.reshape(m, tuple(m.shape[1:]))

    def refine(self, f_q: Tensor, attn_map: Tensor) -> Tensor:
        """Mask the feature with the sigmoid of the map (bounded in (0,1))."""
        return ad.broadcast_mul(f_q, ad.sigmoid(attn_map))

    def classifier_batch(self, feats: Tensor) -> Tensor:
        """Refined features ``[N,64,h,w]`` -> relation scores ``[N,1]``."""
        if not self.config.classifier_enabled:
            raise ContractError("classifier is disabled in this configuration")
        pooled = ad.spatial_pyramid_pool(feats, self.config.spp_levels)
        return self._mlp(pooled, self.classifier)

    def classifier_score(self, feat: Tensor) -> Tensor:
        """One refined feature ``[64,h,w]`` -> scalar relation score."""
        s = self.classifier_batch(ad.reshape(feat, (1,) + tuple(feat.shape)))
        return ad.reshape(s, ())

    def pair_score(self, f_s: Tensor, f_q: Tensor) -> Tensor:
        """Symmetric relation score between a support and a query feature."""
        if not self.config.classifier_enabled:
            raise ContractError("pair_score needs the classifier; use attention logits instead")
        fwd = self.classifier_score(self.refine(f_q, self.adaptive_attention_map(f_s, f_q)))
        rev = self.classifier_score(self.refine(f_s, self.adaptive_attention_map(f_q, f_s)))
        return ad.add(fwd, rev)

    def attention_logits(self, class_weights, f_q: Tensor) -> Tensor:
        """Per-class confidence = spatial mean of each class-conditioned map.

        ``class_weights``: K weight vectors (list of ``[64]`` tensors or one
        ``[K,64]`` tensor); returns ``[K]`` logits for a single query feature.
        """
        if self.config.combine_mode != "reweight":
            raise ContractError("attention_logits needs reweight mode; "
                                "use attention_logits_from_features for concatenate")
        if isinstance(class_weights, Tensor):
            k = class_weights.shape[0]
            w = class_weights
        else:
            class_weights = list(class_weights)
            k = len(class_weights)
            w = ad.concat([ad.reshape(cw, (1, cw.shape[0])) for cw in class_weights], axis=0)
        if k < 2:
            raise ConfigError(f"attention_logits: need at least 2 classes, got {k}")
        fq_rep = ad.index_select0(ad.reshape(f_q, (1,) + tuple(f_q.shape)),
                                  np.zeros(k, dtype=np.intp))
        maps = self.spatial_attn_batch(ad.channel_scale(fq_rep, w))
        return ad.reshape(ad.global_avg_pool(maps), (k,))

    def attention_logits_from_features(self, class_feats: Tensor, f_q: Tensor) -> Tensor:
        """Concatenate-mode analogue: per-class map means from ``[K,64,h,w]``
        class-representative support features concatenated with the query."""
        k = class_feats.shape[0]
        if k < 2:
            raise ConfigError(f"attention_logits_from_features: need at least 2 classes, got {k}")
        fq_rep = ad.index_select0(ad.reshape(f_q, (1,) + tuple(f_q.shape)),
                                  np.zeros(k, dtype=np.intp))
        maps = self.spatial_attn_batch(ad.concat([class_feats, fq_rep], axis=1))
        return ad.reshape(ad.global_avg_pool(maps), (k,))
