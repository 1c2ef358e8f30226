"""Command-line entry points: train, eval, visualize, gradcheck, ablate.

All commands are deterministic under a fixed ``--seed``. Diagnostics go to
stderr; data (records, tables) go to stdout or the named output files.

With ``--synthetic``, training draws the corpus from the run seed while
evaluation offsets the corpus seed by a constant, so a train/eval pair with
the same seed sees the same shape classes but disjoint procedurally
generated instances.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys

import numpy as np

from . import data as datamod
from . import episodic
from . import figures
from . import gradcheck
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import FewshotError
from .model import AdaptiveAttentionNetwork, ModelConfig

EVAL_DATA_SEED_OFFSET = 900000

LOSS_LOG_HEADER = "episode\tl_att\tl_ce\tl_total"
EVAL_RECORD_HEADER = "mean\tci95\tepisodes\tconfig_hash"


def _fail(message: str, code: int = 1):
    print(f"error: {message}", file=sys.stderr)
    raise SystemExit(code)


def _config_hash(snapshot: dict) -> str:
    blob = json.dumps(snapshot, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def _add_data_args(p: argparse.ArgumentParser):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", metavar="DIR", help="root of a <class>/<file>.pgm|.ppm tree")
    src.add_argument("--synthetic", action="store_true", help="procedural shape corpus")
    p.add_argument("--image-size", type=int, default=28,
                   help="square input resolution (default 28)")
    p.add_argument("--synthetic-classes", type=int, default=10)
    p.add_argument("--synthetic-images", type=int, default=40)


def _load_dataset(args, image_size: int, data_seed: int):
    if args.data is not None:
        return datamod.load_directory_dataset(args.data, image_size)
    return datamod.synthetic_shapes_generate(
        args.synthetic_classes, args.synthetic_images, image_size, seed=data_seed)


def _episode_spec(args) -> episodic.EpisodeSpec:
    return episodic.EpisodeSpec(way=args.way, shot=args.shot, query=args.query)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    dataset = _load_dataset(args, args.image_size, data_seed=args.seed)
    channels = dataset.image_shape[0]
    config = ModelConfig(
        input_channels=channels,
        input_size=args.image_size,
        combine_mode=args.combine,
        classifier_enabled=not args.no_classifier,
    )
    model = AdaptiveAttentionNetwork(config, seed=args.seed)
    spec = _episode_spec(args)
    cfg = episodic.TrainConfig(episodes=args.episodes, learning_rate=args.lr, seed=args.seed)

    log_path = args.log if args.log else args.out + ".log"
    rows = []
    with open(log_path, "w", encoding="ascii") as log:
        log.write(LOSS_LOG_HEADER + "\n")

        def on_episode(i, l_att, l_ce, total):
            log.write(f"{i}\t{l_att:.6f}\t{l_ce:.6f}\t{total:.6f}\n")
            if args.progress and (i + 1) % 100 == 0:
                print(f"episode {i + 1}/{args.episodes} total={total:.4f}", file=sys.stderr)

        rows = episodic.train(model, dataset, spec, cfg, on_episode=on_episode)

    save_checkpoint(args.out, model)
    print(f"saved checkpoint to {args.out} ({args.episodes} episodes)", file=sys.stderr)
    if not args.no_figures:
        figures.save_loss_curve(rows, args.out + ".loss.png")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    image_size = model.config.input_size
    dataset = _load_dataset(args, image_size, data_seed=args.seed + EVAL_DATA_SEED_OFFSET)
    if dataset.image_shape[0] != model.config.input_channels:
        _fail(f"checkpoint expects {model.config.input_channels}-channel images, "
              f"dataset has {dataset.image_shape[0]}")
    spec = _episode_spec(args)
    snapshot = {
        "ckpt": args.ckpt,
        "model": model.config.to_dict(),
        "way": spec.way, "shot": spec.shot, "query": spec.query,
        "episodes": args.episodes, "tta": args.tta,
        "finetune": bool(args.finetune), "seed": args.seed,
    }
    report = episodic.evaluate(
        model, dataset, spec, episodes=args.episodes, seed=args.seed,
        tta_copies=args.tta,
        finetune_lr=args.finetune_lr if args.finetune else None,
        config_snapshot=snapshot,
    )
    chash = _config_hash(snapshot)
    print(f"accuracy {report.mean_accuracy:.6f}±{report.ci95:.6f}")
    record = f"{report.mean_accuracy:.6f}\t{report.ci95:.6f}\t{report.episodes}\t{chash}"
    print(record)
    if args.report:
        with open(args.report + ".tsv", "w", encoding="ascii") as fh:
            fh.write(EVAL_RECORD_HEADER + "\n" + record + "\n")
        figures.save_accuracy_histogram(
            report.accuracies, report.mean_accuracy, report.ci95, args.report + ".png")
    return 0


# ---------------------------------------------------------------------------
# visualize
# ---------------------------------------------------------------------------

def _upsampled_map(model, support_img, query_img):
    """Raw attention map for one support/query pair, at query resolution."""
    from . import autodiff as ad

    size = model.config.input_size
    sup = datamod.bilinear_resize(support_img, size, size)
    qry = datamod.bilinear_resize(query_img, size, size)
    with ad.no_grad():
        feats = model.extract_features(np.stack([sup, qry]), training=False)
        f_s = ad.index_select0(feats, np.array([0]))
        f_q = ad.index_select0(feats, np.array([1]))
        if model.config.combine_mode == "reweight":
            w = model.meta_weights_batch(f_s)
            maps = model.spatial_attn_batch(ad.channel_scale(f_q, w))
        else:
            maps = model.spatial_attn_batch(ad.concat([f_s, f_q], axis=1))
    raw = maps.data[0]                       # [1, h, w]
    _, qh, qw = query_img.shape
    return datamod.bilinear_resize(raw, qh, qw)[0]


def cmd_visualize(args) -> int:
    model = load_checkpoint(args.ckpt)
    support_img = datamod.read_pnm(args.support)
    query_img = datamod.read_pnm(args.query)
    for name, img in (("support", support_img), ("query", query_img)):
        if img.shape[0] != model.config.input_channels:
            _fail(f"{name} image has {img.shape[0]} channels, "
                  f"checkpoint expects {model.config.input_channels}")

    raw = _upsampled_map(model, support_img, query_img)
    lo, hi = float(raw.min()), float(raw.max())
    heat = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)

    query_gray = datamod.grayscale(query_img)
    overlay = 0.5 * query_gray + 0.5 * heat
    datamod.write_pgm(args.out_prefix + "_map.pgm", heat)
    datamod.write_pgm(args.out_prefix + "_overlay.pgm", overlay)
    if not args.no_figures:
        figures.save_attention_overlay(query_gray, heat, args.out_prefix + "_overlay.png")
    print(f"wrote {args.out_prefix}_map.pgm and {args.out_prefix}_overlay.pgm",
          file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    if args.ops == "all":
        names = gradcheck.registered_ops()
    else:
        names = [n.strip() for n in args.ops.split(",") if n.strip()]
        unknown = [n for n in names if n not in gradcheck.REGISTRY]
        if unknown:
            _fail(f"unknown ops: {', '.join(unknown)} "
                  f"(registered: {', '.join(gradcheck.registered_ops())})", code=2)
    failures = 0
    for name in names:
        err = gradcheck.check_op(name, seed=args.seed, instances=args.instances)
        ok = err < args.tolerance
        failures += 0 if ok else 1
        print(f"{'PASS' if ok else 'FAIL'}\t{name}\t{err:.3e}")
    print(f"{len(names) - failures}/{len(names)} ops within {args.tolerance:g}",
          file=sys.stderr)
    return 0 if failures == 0 else 1


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATION_ARMS = (
    ("concatenate", False),
    ("concatenate", True),
    ("reweight", False),
    ("reweight", True),
)


def cmd_ablate(args) -> int:
    spec = _episode_spec(args)
    train_ds = _load_dataset(args, args.image_size, data_seed=args.seed)
    eval_ds = _load_dataset(args, args.image_size,
                            data_seed=args.seed + EVAL_DATA_SEED_OFFSET)
    channels = train_ds.image_shape[0]

    rows = []
    for combine, use_cls in ABLATION_ARMS:
        config = ModelConfig(input_channels=channels, input_size=args.image_size,
                             combine_mode=combine, classifier_enabled=use_cls)
        model = AdaptiveAttentionNetwork(config, seed=args.seed)
        cfg = episodic.TrainConfig(episodes=args.episodes_train,
                                   learning_rate=args.lr, seed=args.seed)
        print(f"training {combine} AC={'on' if use_cls else 'off'} "
              f"({args.episodes_train} episodes)", file=sys.stderr)
        episodic.train(model, train_ds, spec, cfg)
        for tta in (0, args.tta):
            report = episodic.evaluate(model, eval_ds, spec,
                                       episodes=args.episodes_eval, seed=args.seed,
                                       tta_copies=tta)
            rows.append((combine, tta > 0, use_cls,
                         report.mean_accuracy, report.ci95))

    header = f"{'combination':<12} {'TA':<4} {'AC':<4} {'accuracy':>9} {'ci95':>8}"
    print(header)
    print("-" * len(header))
    for combine, tta, ac, mean, ci in rows:
        print(f"{combine:<12} {'yes' if tta else 'no':<4} {'yes' if ac else 'no':<4} "
              f"{mean:>9.4f} {ci:>8.4f}")

    if args.out_prefix:
        with open(args.out_prefix + ".tsv", "w", encoding="ascii") as fh:
            fh.write("combination\tta\tac\taccuracy\tci95\n")
            for combine, tta, ac, mean, ci in rows:
                fh.write(f"{combine}\t{int(tta)}\t{int(ac)}\t{mean:.6f}\t{ci:.6f}\n")
        labels = [f"{c[:6]}/TA{'+' if t else '-'}/AC{'+' if a else '-'}"
                  for c, t, a, _, _ in rows]
        figures.save_ablation_bars(
            [(lab, mean, ci) for lab, (_, _, _, mean, ci) in zip(labels, rows)],
            args.out_prefix + ".png")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsattn",
        description="Few-shot classification with support-adaptive attention")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="episodic training -> checkpoint + loss log")
    _add_data_args(p)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--combine", choices=("reweight", "concatenate"), default="reweight")
    p.add_argument("--no-classifier", action="store_true",
                   help="drop the relation classifier; train on the attention loss alone")
    p.add_argument("--out", required=True, metavar="CKPT")
    p.add_argument("--log", metavar="PATH", help="loss log path (default CKPT.log)")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_data_args(p)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--tta", type=int, default=0, metavar="COPIES",
                   help="augmented support copies for test-time augmentation")
    p.add_argument("--finetune", action="store_true",
                   help="one task-specific adaptation step per episode")
    p.add_argument("--finetune-lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", metavar="PREFIX",
                   help="also write PREFIX.tsv and PREFIX.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="attention heatmap for one support/query pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("gradcheck", help="finite-difference checks for all ops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ops", default="all", help="comma-separated op names or 'all'")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--instances", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="attention/classifier/TA ablation grid")
    _add_data_args(p)
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=1)
    p.add_argument("--query", type=int, default=15)
    p.add_argument("--episodes-train", type=int, default=400)
    p.add_argument("--episodes-eval", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--tta", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", metavar="PREFIX",
                   help="also write PREFIX.tsv and PREFIX.png")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FewshotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
