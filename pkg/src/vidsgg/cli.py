"""Command-line entry point: synth, train-cls, train-grd, infer, eval, stats, report.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Path defaults may be overridden with VIDSGG_DATA, VIDSGG_CHECKPOINTS and
VIDSGG_OUTPUT.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import plotting
from .classifier import ClassifierConfig
from .data_io import (SchemaError, SynthConfig, generate_corpus, gt_triplets, load_predictions,
                      multi_instance_stats, read_manifest, save_predictions, save_scene, to_graph,
                      validate_prediction_doc, write_manifest)
from .evaluation import evaluate
from .grounding import DEFAULT_BINS, NMS_THRESH, SCORE_FLOOR, GroundingConfig
from .matching import LAMBDA_ATT
from .train import (CLS_DEFAULTS, GRD_DEFAULTS, NumericError, TrainConfig, infer, load_model,
                    train_classifier, train_grounding)

log = logging.getLogger("vidsgg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _env(name: str, fallback: str) -> str:
    return os.environ.get(name, fallback)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _milestones(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated epochs, got {text!r}") from None


def _train_flags(p: argparse.ArgumentParser, defaults: dict) -> None:
    p.add_argument("--epochs", type=int, default=defaults["epochs"], help="training epochs (default %(default)s)")
    p.add_argument("--lr", type=float, default=defaults["lr"], help="Adam learning rate (default %(default)s)")
    p.add_argument("--batch-size", type=int, default=defaults["batch_size"], help="videos per step (default %(default)s)")
    p.add_argument("--milestones", type=_milestones, default=defaults["milestones"],
                   help="comma-separated epochs where the rate is multiplied by --gamma (default %(default)s)")
    p.add_argument("--gamma", type=float, default=defaults["gamma"], help="step decay factor (default %(default)s)")
    p.add_argument("--grad-clip", type=float, default=1.0, help="gradient norm clip, 0 disables (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="initialization and shuffling seed (default %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vidsgg", description="Video scene graphs as temporal bipartite graphs: "
                                                "classify relations, then ground them in time.")
    parser.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default %(default)s)")
    parser.add_argument("--log-level", default="WARNING", help="logging level (default %(default)s)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    data_default = _env("VIDSGG_DATA", "data")
    ck_default = _env("VIDSGG_CHECKPOINTS", "checkpoints")
    out_default = _env("VIDSGG_OUTPUT", "output")
    manifest_default = str(Path(data_default) / "manifest.json")

    p = sub.add_parser("synth", help="generate a synthetic dataset and its manifest")
    p.add_argument("--out", default=data_default, help="dataset directory (default %(default)s, env VIDSGG_DATA)")
    p.add_argument("--scenes", type=int, default=250, help="total scenes (default %(default)s)")
    p.add_argument("--val-scenes", type=int, default=None,
                   help="scenes held out as the val split, taken from the end (default: 20%% of --scenes)")
    p.add_argument("--seed", type=int, default=0, help="corpus seed (default %(default)s)")
    p.add_argument("--multi-instance-prob", type=float, default=0.35,
                   help="chance a relation gets 2-3 disjoint slots (default %(default)s)")
    p.add_argument("--frames", type=int, default=64, help="frames per video (default %(default)s)")
    p.add_argument("--noise", type=float, default=0.1, help="feature noise std (default %(default)s)")

    p = sub.add_parser("train-cls", help="train the classification stage")
    p.add_argument("--data", default=manifest_default, help="manifest path (default %(default)s)")
    p.add_argument("--split", default="train", help="manifest split (default %(default)s)")
    p.add_argument("--out", default=ck_default, help="checkpoint directory (default %(default)s, env VIDSGG_CHECKPOINTS)")
    p.add_argument("--queries", type=int, default=192, help="predicate queries m (default %(default)s)")
    p.add_argument("--d-e", type=int, default=512, help="entity width (default %(default)s)")
    p.add_argument("--d-q", type=int, default=512, help="query width (default %(default)s)")
    p.add_argument("--d-w", type=int, default=300, help="category embedding width (default %(default)s)")
    p.add_argument("--d-hidden", type=int, default=512, help="MLP hidden width (default %(default)s)")
    p.add_argument("--enc-layers", type=int, default=3, help="encoder layers (default %(default)s)")
    p.add_argument("--dec-layers", type=int, default=3, help="decoder layers (default %(default)s)")
    p.add_argument("--heads", type=int, default=8, help="self-attention heads (default %(default)s)")
    p.add_argument("--pool-len", type=int, default=4, help="pooled tracklet length (default %(default)s)")
    p.add_argument("--lambda-att", type=float, default=LAMBDA_ATT, help="edge loss weight (default %(default)s)")
    _train_flags(p, CLS_DEFAULTS)

    p = sub.add_parser("train-grd", help="train the grounding stage on ground-truth triplets")
    p.add_argument("--data", default=manifest_default, help="manifest path (default %(default)s)")
    p.add_argument("--split", default="train", help="manifest split (default %(default)s)")
    p.add_argument("--out", default=ck_default, help="checkpoint directory (default %(default)s, env VIDSGG_CHECKPOINTS)")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS, help="grounding bins K (default %(default)s)")
    p.add_argument("--d", type=int, default=256, help="fused width (default %(default)s)")
    p.add_argument("--d-w", type=int, default=300, help="category embedding width (default %(default)s)")
    p.add_argument("--d-hidden", type=int, default=512, help="MLP hidden width (default %(default)s)")
    p.add_argument("--heads", type=int, default=4, help="encoder heads (default %(default)s)")
    p.add_argument("--no-positions", action="store_true", help="drop sinusoidal frame positions")
    _train_flags(p, GRD_DEFAULTS)

    p = sub.add_parser("infer", help="classify and ground relations, write a prediction file")
    p.add_argument("--data", default=manifest_default, help="manifest path (default %(default)s)")
    p.add_argument("--split", default="val", help="manifest split (default %(default)s)")
    p.add_argument("--cls", default=str(Path(ck_default) / "cls.json"), help="classifier checkpoint (default %(default)s)")
    p.add_argument("--grd", default=str(Path(ck_default) / "grd.json"),
                   help="grounding checkpoint, used with --mode big (default %(default)s)")
    p.add_argument("--mode", choices=("big", "vidvrd"), default="big",
                   help="big: grounded multi-slot output; vidvrd: one overlap slot per relation (default %(default)s)")
    p.add_argument("--bins", type=int, default=None, help="expected bin count of the grounding checkpoint")
    p.add_argument("--k-keep", type=int, default=3, help="predicate categories kept per query (default %(default)s)")
    p.add_argument("--score-floor", type=float, default=SCORE_FLOOR,
                   help="drop relations whose best grounded score is lower (default %(default)s)")
    p.add_argument("--nms-thresh", type=float, default=NMS_THRESH, help="temporal NMS tIoU (default %(default)s)")
    p.add_argument("--out", default=str(Path(out_default) / "predictions.json"),
                   help="prediction file (default %(default)s, env VIDSGG_OUTPUT)")

    p = sub.add_parser("eval", help="score a prediction file")
    p.add_argument("--data", default=manifest_default, help="manifest path (default %(default)s)")
    p.add_argument("--split", default="val", help="manifest split (default %(default)s)")
    p.add_argument("--pred", default=str(Path(out_default) / "predictions.json"), help="prediction file (default %(default)s)")
    p.add_argument("--out", default=out_default, help="report directory (default %(default)s, env VIDSGG_OUTPUT)")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    p = sub.add_parser("stats", help="instance-count and bin-collision statistics")
    p.add_argument("--data", default=manifest_default, help="manifest path (default %(default)s)")
    p.add_argument("--split", default=None, help="manifest split (default: all splits)")
    p.add_argument("--bins", type=int, default=DEFAULT_BINS, help="bins K (default %(default)s)")
    p.add_argument("--out", default=None, help="directory for stats.json and the figure")

    p = sub.add_parser("report", help="render loss curves and metric figures from a run directory")
    p.add_argument("--checkpoints", default=ck_default, help="directory with *_loss.csv (default %(default)s)")
    p.add_argument("--reports", default=out_default, help="directory with report.json (default %(default)s)")
    p.add_argument("--out", default=out_default, help="figure directory (default %(default)s)")
    return parser


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    if args.scenes < 1:
        raise SchemaError("--scenes must be positive")
    val = args.val_scenes if args.val_scenes is not None else args.scenes // 5
    if not 0 <= val <= args.scenes:
        raise SchemaError("--val-scenes must lie in [0, --scenes]")
    cfg = SynthConfig(seed=args.seed, multi_instance_prob=args.multi_instance_prob, frames=args.frames,
                      noise=args.noise)
    root = Path(args.out)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    paths = [str(save_scene(rec, root / "scenes").relative_to(root)) for rec in generate_corpus(cfg, args.scenes)]
    cut = len(paths) - val
    write_manifest(root / "manifest.json", {"train": paths[:cut], "val": paths[cut:]}, cfg.vocab(), cfg)
    print(f"wrote {len(paths)} scenes ({cut} train, {val} val) to {root}")
    return EXIT_OK


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, milestones=tuple(args.milestones),
                       gamma=args.gamma, seed=args.seed, lam=getattr(args, "lambda_att", LAMBDA_ATT),
                       grad_clip=args.grad_clip or None)


def _records(manifest_path: str, split: str | None):
    man = read_manifest(manifest_path)
    splits = [split] if split else sorted(man.splits)
    recs = [r for s in splits for r in man.records(s)]
    if not recs:
        raise SchemaError(f"{manifest_path}: split {split!r} is empty")
    return man, recs


def _feature_width(recs, kind: str) -> int:
    if kind == "appearance":
        for r in recs:
            if r.appearance:
                return int(next(iter(r.appearance.values())).shape[1])
    elif any(r.frames is not None for r in recs):
        return int(next(r.frames for r in recs if r.frames is not None).shape[1])
    raise SchemaError(f"no {kind} features found next to the annotations")


def cmd_train_cls(args) -> int:
    man, recs = _records(args.data, args.split)
    cfg = ClassifierConfig(len(man.vocab.entities), len(man.vocab.predicates), d_a=_feature_width(recs, "appearance"),
                           d_e=args.d_e, d_q=args.d_q, d_w=args.d_w, d_hidden=args.d_hidden,
                           num_queries=args.queries, enc_layers=args.enc_layers, dec_layers=args.dec_layers,
                           heads=args.heads, pool_len=args.pool_len, seed=args.seed)
    _, history = train_classifier(recs, man.vocab, cfg, _train_cfg(args), args.out)
    print(f"classifier: {len(history)} epochs, final loss {history[-1]:.6f}, checkpoint {Path(args.out) / 'cls.json'}")
    return EXIT_OK


def cmd_train_grd(args) -> int:
    man, recs = _records(args.data, args.split)
    cfg = GroundingConfig(len(man.vocab.entities), len(man.vocab.predicates), d_v=_feature_width(recs, "frames"),
                          d_w=args.d_w, d=args.d, d_hidden=args.d_hidden, bins=args.bins, heads=args.heads,
                          positions=not args.no_positions, seed=args.seed)
    _, history = train_grounding(recs, man.vocab, cfg, _train_cfg(args), args.out)
    print(f"grounding: {len(history)} epochs, final loss {history[-1]:.6f}, checkpoint {Path(args.out) / 'grd.json'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    man, recs = _records(args.data, args.split)
    cls_model, _ = load_model(args.cls)
    grd_model = None
    if args.mode == "big":
        grd_model, _ = load_model(args.grd)
        if args.bins is not None and grd_model.cfg.bins != args.bins:
            raise SchemaError(f"{args.grd}: checkpoint has {grd_model.cfg.bins} bins, --bins asks for {args.bins}")
    preds = infer(cls_model, recs, man.vocab, grd_model, k_keep=args.k_keep, score_floor=args.score_floor,
                  nms_thresh=args.nms_thresh)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_predictions(preds, out, man.vocab)
    validate_prediction_doc(json.loads(out.read_text(encoding="utf-8")))
    print(f"wrote {sum(len(v) for v in preds.values())} triplets for {len(preds)} videos to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    man, recs = _records(args.data, args.split)
    gts = {r.video_id: gt_triplets(r, man.vocab) for r in recs}
    preds = load_predictions(args.pred, man.vocab, {r.video_id: r.frame_count for r in recs})
    report = evaluate(preds, gts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
    (out / "per_video.csv").write_text(report.to_csv(), encoding="utf-8")
    if not args.no_figures:
        plotting.metrics_figure(report.aggregate, out / "metrics.png")
        plotting.fraction_recall_figure(report.aggregate, out / "fraction_recall.png")
    print(report.to_table(), end="")
    return EXIT_OK


def cmd_stats(args) -> int:
    man, recs = _records(args.data, args.split)
    stats = multi_instance_stats((to_graph(r, man.vocab) for r in recs), args.bins).to_dict()
    text = json.dumps(stats, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.json").write_text(text, encoding="utf-8")
        plotting.instance_figure(stats, out / "instances.png")
    return EXIT_OK


def cmd_report(args) -> int:
    curves = {}
    for path in sorted(Path(args.checkpoints).glob("*_loss.csv")):
        with open(path, newline="") as fh:
            curves[path.stem.removesuffix("_loss")] = [float(row["loss"]) for row in csv.DictReader(fh)]
    report_path = Path(args.reports) / "report.json"
    if not curves and not report_path.exists():
        raise SchemaError(f"nothing to report: no *_loss.csv in {args.checkpoints} and no {report_path}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if curves:
        written.append(plotting.loss_figure(curves, out / "loss.png"))
    if report_path.exists():
        agg = json.loads(report_path.read_text(encoding="utf-8"))["aggregate"]
        written.append(plotting.metrics_figure(agg, out / "metrics.png"))
        written.append(plotting.fraction_recall_figure(agg, out / "fraction_recall.png"))
        print("\n".join(f"{k}\t{v:.6f}" for k, v in sorted(agg.items())))
    for name, values in sorted(curves.items()):
        print(f"{name}_loss\tepochs={len(values)}\tfirst={values[0]:.6f}\tlast={values[-1]:.6f}")
    print("\n".join(f"figure\t{p}" for p in written))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train-cls": cmd_train_cls, "train-grd": cmd_train_grd, "infer": cmd_infer,
            "eval": cmd_eval, "stats": cmd_stats, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("vidsgg: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(args.threads)
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"vidsgg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemaError, FileNotFoundError, NotADirectoryError, PermissionError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"vidsgg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
