"""``artspot`` command line.

Exit codes: 0 success, 1 verification / analysis failure, 2 I/O or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .arm import rectify_image
from .checks import TOLERANCE, run_grad_checks
from .errors import ArtspotError, ConfigError, DatasetParseError, InsufficientDataError
from .nn.tensor import ParamStore, load_checkpoint, save_checkpoint
from .runconfig import RunConfig, load_run_config
from .spotter.config import MODES
from .spotter.inference import Predictor
from .spotter.metrics import (
    IOU_BIN_EDGES,
    evaluate_predictions,
    feature_shift_diagnostic,
    iou_bin_analysis,
    predict_dataset,
)
from .spotter.model import SpotterModel
from .spotter.training import fit
from .synth import generate, read_dataset, read_ppm, write_dataset, write_ppm

log = logging.getLogger("artspot")

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2


class CliError(Exception):
    def __init__(self, message, code=EXIT_IO):
        super().__init__(message)
        self.code = code


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.6g}"
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(x) for x in r])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


# --------------------------------------------------------------------- helpers
def load_images(data_dir):
    data_dir = Path(data_dir)
    if not (data_dir / "annotations.jsonl").is_file():
        raise CliError(f"no annotations.jsonl in {data_dir}")
    samples = read_dataset(data_dir, as_uint8=True)
    if not samples:
        return np.zeros((0, 3, 1, 1), dtype=np.uint8), []
    return np.stack([s.image for s in samples]), [s.instances for s in samples]


def load_model(cfg: RunConfig, path) -> SpotterModel:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}")
    return SpotterModel(cfg.spotter, ParamStore(load_checkpoint(path)))


def train_model(cfg: RunConfig, images, annotations, mode, seed, steps=None, progress=True):
    sched = cfg.train.schedule()
    if steps is not None:
        sched.steps = steps
    model = SpotterModel(cfg.spotter, seed=cfg.train.init_seed if seed is None else seed)
    rows = []

    def cb(step, rec):
        rows.append([step, sched.lr_at(step), rec.total, rec.cls, rec.ctr, rec.rcp, rec.rec,
                     rec.num_pos, rec.skipped])
        if progress and (step + 1) % 100 == 0:
            log.info("[%s] step %d loss %.4f", mode, step + 1, rec.total)

    fit(model, images, annotations, sched, mode=mode, seed=cfg.train.seed if seed is None else seed, callback=cb)
    return model, rows


LOSS_HEADER = ["step", "lr", "total", "cls", "ctr", "rcp", "rec", "num_pos", "skipped"]


def _seed(args, cfg):
    return cfg.train.seed if args.seed is None else args.seed


# -------------------------------------------------------------------- commands
def cmd_gen_data(args, cfg: RunConfig):
    out = Path(args.out) if args.out else cfg.resolve(cfg.paths.train_data)
    if out is None:
        raise CliError("gen-data needs --out (or paths.train_data)")
    if args.count < 0:
        raise CliError("--count must be >= 0")
    base = args.base_seed if args.base_seed is not None else _seed(args, cfg)
    try:
        write_dataset(generate(cfg.synth, args.count, base), out)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {out}: {exc}") from exc
    print(f"generated,{args.count}")
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig):
    results = run_grad_checks(eps=args.eps, seed=_seed(args, cfg))
    print("op,max_rel_error,status")
    failed = []
    for r in results:
        print(f"{r.name},{fmt(r.max_rel_error)},{'ok' if r.ok else 'FAIL'}")
        if not r.ok:
            failed.append(r.name)
    print(f"checked,{len(results)}")
    if failed:
        print(f"grad-check failed (> {TOLERANCE:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_train(args, cfg: RunConfig):
    data = args.data or cfg.resolve(cfg.paths.train_data)
    images, ann = load_images(data)
    if not len(ann):
        raise CliError("training data is empty")
    mode = args.mode or cfg.train.mode
    model, rows = train_model(cfg, images, ann, mode, _seed(args, cfg), args.steps)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model.state())
    loss_csv = Path(args.loss_csv) if args.loss_csv else out.with_suffix(".loss.csv")
    write_csv(loss_csv, LOSS_HEADER, rows)
    print(f"checkpoint,{out}")
    print(f"loss_csv,{loss_csv}")
    return EXIT_OK


def _metrics_rows(metrics):
    return [[k, v] for k, v in metrics.items()]


def cmd_eval(args, cfg: RunConfig):
    model = load_model(cfg, args.checkpoint)
    images, ann = load_images(args.data or cfg.resolve(cfg.paths.eval_data))
    preds = predict_dataset(model, images)
    metrics = evaluate_predictions(preds, ann, cfg.spotter.rec_threshold, cfg.spotter.iou_raster_px)
    rows = _metrics_rows(metrics)
    if args.out:
        write_csv(args.out, ["metric", "value"], rows)
    print("metric,value")
    for k, v in rows:
        print(f"{k},{fmt(v)}")
    return EXIT_OK


def run_ablation(cfg: RunConfig, images, ann, eval_images, eval_ann, out_dir, seed, steps=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for mode in MODES:
        model, rows = train_model(cfg, images, ann, mode, seed, steps)
        save_checkpoint(out_dir / f"{mode}.ten", model.state())
        write_csv(out_dir / f"{mode}.loss.csv", LOSS_HEADER, rows)
        preds = predict_dataset(model, eval_images)
        m = evaluate_predictions(preds, eval_ann, cfg.spotter.rec_threshold, cfg.spotter.iou_raster_px)
        write_csv(out_dir / f"{mode}.metrics.csv", ["metric", "value"], _metrics_rows(m))
        table.append([mode, m["det_f"], m["e2e_f"]])
    write_csv(out_dir / "ablation.csv", ["mode", "det_f", "e2e_f"], table)
    return table


def cmd_ablate(args, cfg: RunConfig):
    images, ann = load_images(args.data or cfg.resolve(cfg.paths.train_data))
    ev_dir = args.eval_data or cfg.resolve(cfg.paths.eval_data) or args.data
    eval_images, eval_ann = load_images(ev_dir)
    out = args.out or cfg.resolve(cfg.paths.out_dir)
    if out is None:
        raise CliError("ablate needs --out (or paths.out_dir)")
    table = run_ablation(cfg, images, ann, eval_images, eval_ann, out, _seed(args, cfg), args.steps)
    print("mode,det_f,e2e_f")
    for mode, d, e in table:
        print(f"{mode},{fmt(d)},{fmt(e)}")
    return EXIT_OK


def cmd_rectify(args, cfg: RunConfig):
    model = load_model(cfg, args.checkpoint)
    try:
        image = read_ppm(args.image)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read image {args.image}: {exc}") from exc
    preds = Predictor(model)(image, apply_rec_threshold=not args.all)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h, w = cfg.spotter.arm_out
    scale = args.scale
    lines = []
    for k, p in enumerate(preds):
        crop = rectify_image(image, p.points, cfg.spotter.n_rcp, (scale * h, scale * w))
        name = f"crop_{k:03d}.ppm"
        write_ppm(out / name, np.clip(crop, 0.0, 1.0))
        lines.append(json.dumps({
            "crop": name,
            "polygon": np.round(p.polygon, 3).tolist(),
            "points": np.round(p.points, 3).tolist(),
            "det_score": float(fmt(p.det_score)),
            "rec_score": float(fmt(p.rec_score)),
            "transcript": p.transcript,
        }))
    (out / "predictions.jsonl").write_text("".join(x + "\n" for x in lines), encoding="utf-8")
    print(f"predictions,{len(preds)}")
    return EXIT_OK


def cmd_analyze(args, cfg: RunConfig):
    model = load_model(cfg, args.checkpoint)
    images, ann = load_images(args.data or cfg.resolve(cfg.paths.eval_data))
    out = Path(args.out)
    raster = cfg.spotter.iou_raster_px
    preds = predict_dataset(model, images)
    bins = iou_bin_analysis(preds, ann, IOU_BIN_EDGES, raster)
    if sum(b.count for b in bins) == 0:
        print("analyze: no matched predictions", file=sys.stderr)
        return EXIT_FAIL
    write_csv(out / "iou_bins.csv", ["bin_lo", "bin_hi", "count", "accuracy"],
              [[b.lo, b.hi, b.count, b.accuracy] for b in bins])
    try:
        shift = feature_shift_diagnostic(model, images, ann, raster)
    except InsufficientDataError as exc:
        print(f"analyze: {exc}", file=sys.stderr)
        return EXIT_FAIL
    write_csv(out / "feature_shift.csv", ["metric", "value"], [["frechet_distance", shift]])
    print("bin_lo,bin_hi,count,accuracy")
    for b in bins:
        print(",".join(fmt(x) for x in (b.lo, b.hi, b.count, b.accuracy)))
    print(f"frechet_distance,{fmt(shift)}")
    return EXIT_OK


# ---------------------------------------------------------------------- parser
def build_parser():
    p = argparse.ArgumentParser(prog="artspot", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (1 = bit-exact)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="render a synthetic dataset")
    s.add_argument("--out")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--base-seed", type=int, default=None)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("grad-check", help="finite-difference check of every operator")
    s.add_argument("--eps", type=float, default=1e-3)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("train", help="train a model and write checkpoint + loss CSV")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--loss-csv")
    s.add_argument("--mode")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="detection / end-to-end metrics as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train all three extraction modes and compare")
    s.add_argument("--data")
    s.add_argument("--eval-data")
    s.add_argument("--out")
    s.add_argument("--steps", type=int)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("rectify", help="dump rectified crops and predictions for one image")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, default=4)
    s.add_argument("--all", action="store_true", help="skip the recognition threshold")
    s.set_defaults(func=cmd_rectify)

    s = sub.add_parser("analyze", help="IoU-binned accuracy and feature-shift CSVs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return EXIT_IO
    try:
        cfg = load_run_config(args.config)
        with threadpool_limits(limits=args.threads):
            return args.func(args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, DatasetParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ArtspotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
