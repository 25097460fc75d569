"""Command-line entry point.

Exit codes: 0 success, 1 usage/configuration error, 2 data or validation
error, 3 numeric failure. Flags override config-file values, which override
built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from . import __version__
from .dataio import SyntheticConfig, gen_synthetic, read_annotations, read_corpus
from .decode import read_predictions, write_predictions
from .errors import ConfigError, NumericError, ValidationError
from .evalkit import PRESETS, mean_ap, resolve_thresholds
from .gradcheck import model_gradient_error
from .scenegraph import Readout, Topology
from .trainer import Checkpoint, TrainConfig, detect, train
from .tubes import (DEFAULT_LAMBDA_IOU, DEFAULT_N_TERM, DEFAULT_TOP_K, MIN_AGENTNESS, TubeLinker, interpolate_tube,
                    label_tube, prefilter, read_detections)

log = logging.getLogger("hybridgraph")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4
CONFIG_SECTIONS = {"train", "synthetic", "preset"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default(value) -> str:
    return f"(default: {value})"


def load_config_file(path) -> dict:
    """Parse a JSON config with optional ``train``, ``synthetic`` and ``preset`` sections."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(doc) - CONFIG_SECTIONS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    # validate every section, including those the current subcommand ignores
    try:
        TrainConfig.from_dict(doc.get("train", {}))
        SyntheticConfig.from_dict(doc.get("synthetic", {}))
        if doc.get("preset") is not None:
            resolve_thresholds(doc["preset"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return doc


def _train_config(args, doc) -> TrainConfig:
    d = dict(doc.get("train", {}))
    for name in ("N", "n_classes", "topology", "readout", "epochs", "lr", "seed", "theta"):
        v = getattr(args, name, None)
        if v is not None:
            d[name] = v
    return TrainConfig.from_dict(d)


def cmd_gen_synth(args) -> int:
    doc = load_config_file(args.config)
    d = dict(doc.get("synthetic", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    cfg = SyntheticConfig.from_dict(d)
    summary = gen_synthetic(cfg, args.out)
    for split, s in summary["splits"].items():
        log.info("%s: %d videos, %d segments, probe accuracy %.4f", split, s["videos"], s["segments"],
                 s["probe_accuracy"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args, load_config_file(args.config))
    videos = read_corpus(args.features)
    ann = read_annotations(args.annotations, {v.video_id: v.n_snippets for v in videos})
    ck = train(cfg, videos, ann)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ck.save(args.out)
    log.info("first/final epoch loss %.6f / %.6f", ck.epoch_losses[0] if ck.epoch_losses else float("nan"),
             ck.epoch_losses[-1] if ck.epoch_losses else float("nan"))
    return EXIT_OK


def cmd_detect(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    videos = read_corpus(args.features)
    preds = detect(ck, videos, args.theta, args.jobs)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_predictions(args.out, preds)
    log.info("%d segments over %d videos", sum(len(v) for v in preds.values()), len(videos))
    return EXIT_OK


def cmd_eval(args) -> int:
    doc = load_config_file(args.config)
    preset = args.preset or doc.get("preset")
    thresholds = [float(t) for t in args.thresholds.split(",")] if args.thresholds else None
    if not thresholds and not preset:
        raise ConfigError("eval needs --preset or --thresholds")
    thresholds = resolve_thresholds(preset, thresholds)
    preds = read_predictions(args.pred)
    gts = read_annotations(args.gt)
    report = mean_ap(preds, gts, thresholds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    table = report.to_table()
    (out / "report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seeds = range(args.seed, args.seed + args.trials)
    errors = {s: model_gradient_error(s) for s in seeds}
    worst = max(errors.values())
    print(f"max relative error {worst:.3e} over {len(errors)} instance(s)")
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({"errors": {str(k): v for k, v in errors.items()}, "max": worst},
                                             indent=2) + "\n", encoding="utf-8")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def cmd_link_tubes(args) -> int:
    dets = read_detections(args.detections)
    result = {}
    for vid in sorted(dets):
        frames = {f: prefilter(d, args.min_agentness, args.nms_iou) for f, d in dets[vid].items()}
        linker = TubeLinker(args.lambda_iou, args.n_term)
        tubes = linker.run(frames, min(frames), max(frames))
        out = []
        for t in tubes:
            full = interpolate_tube(t)
            n_cls = t.class_scores_mean.size
            out.append({
                "tube_id": t.tube_id,
                "labels": label_tube(t, min(args.k, n_cls)) if n_cls else [],
                "mean_agentness": t.mean_agentness,
                "entries": [{"frame": f, "box": list(b), "agentness": s} for f, b, s in full.entries],
            })
        result[vid] = out
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    log.info("linked %d tubes over %d videos", sum(len(v) for v in result.values()), len(result))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    tc, sc = TrainConfig(), SyntheticConfig()
    p = _Parser(prog="hybridgraph", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging (default: off)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="write a seeded synthetic feature corpus")
    g.add_argument("--config", help="JSON config file; its 'synthetic' section is used (default: none)")
    g.add_argument("--out", required=True, help="output directory (train/, test/, summary.json)")
    g.add_argument("--seed", type=int, help=_default(sc.seed))
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="JSON config file; its 'train' section is used (default: none)")
    t.add_argument("--features", required=True, help="directory of <video_id>.jsonl feature files")
    t.add_argument("--annotations", required=True, help="ground-truth CSV")
    t.add_argument("--out", required=True, help="checkpoint path (JSON)")
    t.add_argument("--seed", type=int, help=_default(tc.seed))
    t.add_argument("--epochs", type=int, help=_default(tc.epochs))
    t.add_argument("--lr", type=float, help=_default(tc.lr))
    t.add_argument("--N", type=int, help=f"temporal graph length {_default(tc.N)}")
    t.add_argument("--n-classes", dest="n_classes", type=int, help=_default(tc.n_classes))
    t.add_argument("--topology", choices=[x.value for x in Topology], help=_default(tc.topology))
    t.add_argument("--readout", choices=[x.value for x in Readout], help=_default(tc.readout))
    t.add_argument("--theta", type=float, help=f"stored decode threshold {_default(tc.theta)}")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="decode activity segments with a trained checkpoint")
    d.add_argument("--checkpoint", required=True, help="checkpoint from 'train'")
    d.add_argument("--features", required=True, help="directory of <video_id>.jsonl feature files")
    d.add_argument("--out", required=True, help="predictions CSV path")
    d.add_argument("--theta", type=float, help="boundary threshold (default: value stored in checkpoint)")
    d.add_argument("--jobs", type=int, default=1, help=_default(1))
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("eval", help="temporal mAP of predictions against ground truth")
    e.add_argument("--config", help="JSON config file; its 'preset' entry is used (default: none)")
    e.add_argument("--pred", required=True, help="predictions CSV")
    e.add_argument("--gt", required=True, help="ground-truth CSV")
    e.add_argument("--preset", choices=sorted(PRESETS), help="threshold preset (default: none)")
    e.add_argument("--thresholds", help="comma-separated IoU thresholds, overrides --preset (default: none)")
    e.add_argument("--out", required=True, help="output directory for report.json and report.txt")
    e.add_argument("--jobs", type=int, default=1, help=f"accepted for symmetry with detect {_default(1)}")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    c.add_argument("--seed", type=int, default=0, help=f"first instance seed {_default(0)}")
    c.add_argument("--trials", type=int, default=1, help=f"number of consecutive seeds {_default(1)}")
    c.add_argument("--out", help="optional JSON report path (default: none)")
    c.set_defaults(func=cmd_gradcheck)

    k = sub.add_parser("link-tubes", help="build agentness tubes from per-frame detections")
    k.add_argument("--detections", required=True, help="detections CSV")
    k.add_argument("--out", required=True, help="tubes JSON path")
    k.add_argument("--lambda-iou", dest="lambda_iou", type=float, default=DEFAULT_LAMBDA_IOU,
                   help=_default(DEFAULT_LAMBDA_IOU))
    k.add_argument("--k", type=int, default=DEFAULT_TOP_K, help=f"labels per tube {_default(DEFAULT_TOP_K)}")
    k.add_argument("--n-term", dest="n_term", type=int, default=DEFAULT_N_TERM, help=_default(DEFAULT_N_TERM))
    k.add_argument("--min-agentness", dest="min_agentness", type=float, default=MIN_AGENTNESS,
                   help=_default(MIN_AGENTNESS))
    k.add_argument("--nms-iou", dest="nms_iou", type=float, default=0.5, help=_default(0.5))
    k.set_defaults(func=cmd_link_tubes)
    return p


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        print("hybridgraph: a subcommand is required (see --help)", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
