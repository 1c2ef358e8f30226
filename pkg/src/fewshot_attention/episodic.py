"""Episode sampling, the two losses, training, and the evaluation protocol.

Episodes keep a class-major layout: support row ``i*shot + j`` is shot ``j``
of episode-class ``i``, query row ``i*query + r`` likewise. The loss paths
below exploit that layout to batch every attention map and relation score of
an episode into a handful of tensor ops.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as datamod
from .autodiff import Tensor
from .errors import ContractError, DatasetError, TrainingDivergedError
from .model import AdaptiveAttentionNetwork


@dataclass(frozen=True)
class EpisodeSpec:
    way: int
    shot: int
    query: int

    def __post_init__(self):
        if self.way < 2 or self.shot < 1 or self.query < 1:
            raise DatasetError(f"episode spec needs way>=2, shot>=1, query>=1, got {self}")


@dataclass
class Episode:
    """One K-way n-shot task. ``*_refs`` are (dataset class, image) indices."""
    way: int
    shot: int
    query: int
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_names: list
    support_refs: np.ndarray
    query_refs: np.ndarray


def sample_episode(dataset, spec: EpisodeSpec, rng: np.random.Generator) -> Episode:
    """Draw K classes without replacement, then n+m distinct images per class.

    The class-to-label assignment is randomized per episode; support and
    query sets are disjoint by construction.
    """
    need = spec.shot + spec.query
    eligible = [i for i, cls in enumerate(dataset.classes) if len(cls.images) >= need]
    if len(eligible) < spec.way:
        raise DatasetError(
            f"need {spec.way} classes with >= {need} images, dataset has {len(eligible)}")
    chosen = rng.choice(np.asarray(eligible), size=spec.way, replace=False)

    sup_imgs, qry_imgs, sup_refs, qry_refs, names = [], [], [], [], []
    for ci in chosen:
        cls = dataset.classes[ci]
        picks = rng.choice(len(cls.images), size=need, replace=False)
        sup_imgs.append(cls.images[picks[:spec.shot]])
        qry_imgs.append(cls.images[picks[spec.shot:]])
        sup_refs.append([(ci, p) for p in picks[:spec.shot]])
        qry_refs.append([(ci, p) for p in picks[spec.shot:]])
        names.append(cls.name)

    return Episode(
        way=spec.way, shot=spec.shot, query=spec.query,
        support_images=np.concatenate(sup_imgs),
        support_labels=np.repeat(np.arange(spec.way), spec.shot),
        query_images=np.concatenate(qry_imgs),
        query_labels=np.repeat(np.arange(spec.way), spec.query),
        class_names=names,
        support_refs=np.concatenate(sup_refs),
        query_refs=np.concatenate(qry_refs),
    )


# ---------------------------------------------------------------------------
# episode forward paths
# ---------------------------------------------------------------------------

def class_weight_average(model: AdaptiveAttentionNetwork, support_feats: Tensor,
                         way: int, shot: int) -> Tensor:
    """Average per-support weight vectors into K class weights ``[K,64]``."""
    ws = model.meta_weights_batch(support_feats)
    grouped = ad.reshape(ws, (way, shot, ws.shape[1]))
    return ad.scale(ad.sum_axis(grouped, 1), 1.0 / shot)


def _class_feature_average(support_feats: Tensor, way: int, shot: int) -> Tensor:
    n, c, h, w = support_feats.shape
    grouped = ad.reshape(support_feats, (way, shot, c, h, w))
    return ad.scale(ad.sum_axis(grouped, 1), 1.0 / shot)


def episode_logits(model: AdaptiveAttentionNetwork, episode: Episode,
                   training: bool = False, need_attention: bool = True,
                   need_classifier: bool = True, tta_weights: Tensor | None = None,
                   tta_features: Tensor | None = None):
    """Compute the ``[mK, K]`` logit matrices for one episode.

    Returns ``(attention_logits, score_logits)``; entries are ``None`` when
    not requested. Both paths share a single extractor forward over the
    combined support+query batch.
    """
    way, shot = episode.way, episode.shot
    n_sup = way * shot
    n_qry = way * episode.query

    batch = np.concatenate([episode.support_images, episode.query_images])
    feats = model.extract_features(batch, training)
    fs = ad.index_select0(feats, np.arange(n_sup))
    fq = ad.index_select0(feats, n_sup + np.arange(n_qry))

    reweight = model.config.combine_mode == "reweight"
    att_logits = score_logits = None

    if reweight:
        ws = model.meta_weights_batch(fs)                      # [nK, 64]
        if tta_weights is not None:
            w_cls = tta_weights
        else:
            grouped = ad.reshape(ws, (way, shot, ws.shape[1]))
            w_cls = ad.scale(ad.sum_axis(grouped, 1), 1.0 / shot)
    else:
        f_cls = tta_features if tta_features is not None else \
            _class_feature_average(fs, way, shot)

    qry_rep = np.repeat(np.arange(n_qry), way)
    cls_rep = np.tile(np.arange(way), n_qry)

    if need_attention:
        fq_rep = ad.index_select0(fq, qry_rep)
        if reweight:
            merged = ad.channel_scale(fq_rep, ad.index_select0(w_cls, cls_rep))
        else:
            merged = ad.concat([ad.index_select0(f_cls, cls_rep), fq_rep], axis=1)
        maps = model.spatial_attn_batch(merged)
        att_logits = ad.reshape(ad.global_avg_pool(maps), (n_qry, way))

    if need_classifier:
        if not model.config.classifier_enabled:
            raise ContractError("classifier logits requested but classifier is disabled")
        qry_big = np.repeat(np.arange(n_qry), n_sup)
        sup_big = np.tile(np.arange(n_sup), n_qry)
        fq_big = ad.index_select0(fq, qry_big)
        fs_big = ad.index_select0(fs, sup_big)
        if reweight:
            if tta_weights is not None:
                w_fwd = ad.index_select0(tta_weights, sup_big // shot)
            else:
                w_fwd = ad.index_select0(ws, sup_big)
            wq = model.meta_weights_batch(fq)
            map_fwd = model.spatial_attn_batch(ad.channel_scale(fq_big, w_fwd))
            map_rev = model.spatial_attn_batch(
                ad.channel_scale(fs_big, ad.index_select0(wq, qry_big)))
        else:
            map_fwd = model.spatial_attn_batch(ad.concat([fs_big, fq_big], axis=1))
            map_rev = model.spatial_attn_batch(ad.concat([fq_big, fs_big], axis=1))
        d_fwd = model.classifier_batch(ad.broadcast_mul(fq_big, ad.sigmoid(map_fwd)))
        d_rev = model.classifier_batch(ad.broadcast_mul(fs_big, ad.sigmoid(map_rev)))
        d = ad.add(d_fwd, d_rev)                               # [mK*nK, 1]
        per_class = ad.reshape(d, (n_qry, way, shot))
        score_logits = ad.scale(ad.sum_axis(per_class, 2), 1.0 / shot)

    return att_logits, score_logits


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def episode_losses(model, episode, training: bool = True):
    """(total, attention, classification) losses with one shared forward.

    The classification term is ``None`` when the classifier is disabled, in
    which case the total is the attention loss alone.
    """
    use_cls = model.config.classifier_enabled
    att_logits, score_logits = episode_logits(
        model, episode, training, need_attention=True, need_classifier=use_cls)
    l_att = ad.softmax_cross_entropy(att_logits, episode.query_labels)
    if not use_cls:
        return l_att, l_att, None
    l_ce = ad.softmax_cross_entropy(score_logits, episode.query_labels)
    return ad.add(l_ce, l_att), l_att, l_ce


def attention_loss(model, episode, training: bool = True) -> Tensor:
    att_logits, _ = episode_logits(model, episode, training, need_classifier=False)
    return ad.softmax_cross_entropy(att_logits, episode.query_labels)


def classification_loss(model, episode, training: bool = True) -> Tensor:
    _, score_logits = episode_logits(model, episode, training, need_attention=False)
    return ad.softmax_cross_entropy(score_logits, episode.query_labels)


def total_loss(model, episode, training: bool = True) -> Tensor:
    total, _, _ = episode_losses(model, episode, training)
    return total


# ---------------------------------------------------------------------------
# optimizer and training loop
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; the caller zeroes grads between steps."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / (1.0 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1.0 - self.beta2 ** self.t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass
class TrainConfig:
    episodes: int = 2000
    learning_rate: float = 1e-3
    seed: int = 0
    tta_copies: int = 10
    finetune_lr: float = 1e-4


def train_step(model, episode, optimizer: Adam):
    """One episodic update; returns (total, l_att, l_ce) as floats."""
    model.zero_grad()
    total, l_att, l_ce = episode_losses(model, episode, training=True)
    values = (total.item(), l_att.item(), l_ce.item() if l_ce is not None else float("nan"))
    if not np.isfinite(values[0]):
        raise TrainingDivergedError(f"non-finite loss {values[0]!r}; aborting")
    ad.backward(total)
    optimizer.step()
    return values


def train(model, dataset, spec: EpisodeSpec, cfg: TrainConfig, on_episode=None):
    """Episodic training loop; returns one (index, l_att, l_ce, total) row per episode."""
    rng = np.random.default_rng([cfg.seed, 1])
    optimizer = Adam(model.parameters(), lr=cfg.learning_rate)
    rows = []
    for i in range(cfg.episodes):
        episode = sample_episode(dataset, spec, rng)
        try:
            total, l_att, l_ce = train_step(model, episode, optimizer)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"episode {i}: {exc}") from exc
        rows.append((i, l_att, l_ce, total))
        if on_episode is not None:
            on_episode(i, l_att, l_ce, total)
    return rows


# ---------------------------------------------------------------------------
# test-time augmentation and fine-tuning
# ---------------------------------------------------------------------------

def tta_class_weights(model, support_images: np.ndarray, way: int, shot: int,
                      copies: int, rng: np.random.Generator,
                      augment: "datamod.AugmentSpec | None" = None) -> Tensor:
    """Class weights averaged over each support plus ``copies`` augmented views.

    ``copies=0`` reduces exactly to the plain class-weight average.
    """
    if augment is None:
        augment = datamod.AugmentSpec(
            crop_ratio=0.875, flip_horizontal=support_images.shape[1] == 3)
    views = [support_images]
    for _ in range(copies):
        views.append(np.stack([
            datamod.random_crop_flip(img, augment, rng) for img in support_images]))
    # row u*(copies+1)+t = view t of support u; supports stay class-major
    batch = np.stack(views, axis=1).reshape((-1,) + support_images.shape[1:])
    feats = model.extract_features(batch, training=False)
    ws = model.meta_weights_batch(feats)
    grouped = ad.reshape(ws, (way, shot * (copies + 1), ws.shape[1]))
    return ad.scale(ad.sum_axis(grouped, 1), 1.0 / (shot * (copies + 1)))


def tta_class_features(model, support_images: np.ndarray, way: int, shot: int,
                       copies: int, rng: np.random.Generator,
                       augment: "datamod.AugmentSpec | None" = None) -> Tensor:
    """Concatenate-mode analogue: class-mean features over augmented views."""
    if augment is None:
        augment = datamod.AugmentSpec(
            crop_ratio=0.875, flip_horizontal=support_images.shape[1] == 3)
    views = [support_images]
    for _ in range(copies):
        views.append(np.stack([
            datamod.random_crop_flip(img, augment, rng) for img in support_images]))
    batch = np.stack(views, axis=1).reshape((-1,) + support_images.shape[1:])
    feats = model.extract_features(batch, training=False)
    _, c, h, w = feats.shape
    grouped = ad.reshape(feats, (way, shot * (copies + 1), c, h, w))
    return ad.scale(ad.sum_axis(grouped, 1), 1.0 / (shot * (copies + 1)))


def _leave_one_out_episodes(episode: Episode):
    """Self-episodes from the support set: shot j of each class becomes the
    query, the remaining shots stay as support (1-shot: support is its own query)."""
    way, shot = episode.way, episode.shot
    imgs = episode.support_images.reshape((way, shot) + episode.support_images.shape[1:])
    refs = episode.support_refs.reshape(way, shot, 2)
    subs = []
    for j in range(shot):
        keep = [t for t in range(shot) if shot == 1 or t != j]
        subs.append(Episode(
            way=way, shot=len(keep), query=1,
            support_images=imgs[:, keep].reshape((-1,) + imgs.shape[2:]),
            support_labels=np.repeat(np.arange(way), len(keep)),
            query_images=imgs[:, j],
            query_labels=np.arange(way),
            class_names=episode.class_names,
            support_refs=refs[:, keep].reshape(-1, 2),
            query_refs=refs[:, j],
        ))
    return subs


def finetune_one_step(model, episode: Episode, lr: float) -> AdaptiveAttentionNetwork:
    """One plain gradient step on the support self-episode, on a parameter copy.

    The input model is never mutated. Batch normalization runs in eval mode
    (running statistics) since the self-episode batches are tiny.
    """
    adapted = model.clone()
    subs = _leave_one_out_episodes(episode)
    loss = total_loss(adapted, subs[0], training=False)
    for sub in subs[1:]:
        loss = ad.add(loss, total_loss(adapted, sub, training=False))
    loss = ad.scale(loss, 1.0 / len(subs))
    adapted.zero_grad()
    ad.backward(loss)
    for p in adapted.parameters():
        if p.grad is not None:
            p.data -= (lr * p.grad).astype(p.dtype)
    return adapted


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracies: list
    mean_accuracy: float
    ci95: float
    episodes: int
    config: dict = field(default_factory=dict)


def summarize_accuracies(accuracies) -> tuple:
    """Mean and 1.96 * sample std / sqrt(E) half-width (ddof=1)."""
    accs = np.asarray(accuracies, dtype=np.float64)
    mean = float(accs.mean()) if accs.size else 0.0
    if accs.size < 2:
        return mean, 0.0
    return mean, float(1.96 * accs.std(ddof=1) / np.sqrt(accs.size))


def episode_scores(model, episode: Episode, tta_copies: int = 0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-query class scores ``[mK, K]``: relation scores when the classifier
    is enabled, attention-map means otherwise."""
    reweight = model.config.combine_mode == "reweight"
    tta_w = tta_f = None
    if tta_copies > 0:
        if rng is None:
            raise ContractError("episode_scores: TTA needs an rng")
        if reweight:
            tta_w = tta_class_weights(
                model, episode.support_images, episode.way, episode.shot, tta_copies, rng)
        else:
            tta_f = tta_class_features(
                model, episode.support_images, episode.way, episode.shot, tta_copies, rng)
    use_cls = model.config.classifier_enabled
    att, scores = episode_logits(
        model, episode, training=False, need_attention=not use_cls,
        need_classifier=use_cls, tta_weights=tta_w, tta_features=tta_f)
    return (scores if use_cls else att).data.copy()


def evaluate(model, dataset, spec: EpisodeSpec, episodes: int, seed: int = 0,
             tta_copies: int = 0, finetune_lr: float | None = None,
             score_fn=None, config_snapshot: dict | None = None) -> EvalReport:
    """Run the episodic protocol: argmax class score per query, accuracy per
    episode, and the mean with a 95% confidence half-width."""
    rng = np.random.default_rng([seed, 2])
    accs = []
    for _ in range(episodes):
        episode = sample_episode(dataset, spec, rng)
        net = model
        if finetune_lr is not None:
            net = finetune_one_step(model, episode, finetune_lr)
        if score_fn is not None:
            scores = score_fn(net, episode)
        else:
            with ad.no_grad():
                scores = episode_scores(net, episode, tta_copies, rng)
        pred = scores.argmax(axis=1)
        accs.append(float((pred == episode.query_labels).mean()))
    mean, ci = summarize_accuracies(accs)
    snapshot = dict(config_snapshot or {})
    snapshot.setdefault("way", spec.way)
    snapshot.setdefault("shot", spec.shot)
    snapshot.setdefault("query", spec.query)
    snapshot.setdefault("episodes", episodes)
    snapshot.setdefault("seed", seed)
    return EvalReport(accuracies=accs, mean_accuracy=mean, ci95=ci,
                      episodes=episodes, config=snapshot)
