"""``oct-quant`` command line.

Exit codes: 0 success, 1 invalid input, 2 processing failure.  Errors are
reported on stderr as one JSON object.  Every output file is written
atomically.  A ``--config`` JSON file supplies defaults that explicit flags
override; keys are flag names (``tau``, ``bv-lambda``...) either at top level
or under a section named after the subcommand.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .core import LabelMask, Volume3D, validate_pair
from .errors import EmptyBatch, OctQuantError, ProcessingError, ValidationError
from .io import (
    emit_etdrs_svg,
    read_cohort,
    read_etdrs_dir,
    read_json,
    read_octb,
    write_json,
    write_octb,
    write_rows_csv,
)
from .losses import LossConfig, one_hot, total_loss
from .metrics import SCORE_COLUMNS, score_pair, score_rows
from .phantom import PhantomSpec, generate
from .preprocess import BvParams, axial_center, bv_smooth, motion_correct
from .stats import CELL_COLUMNS, TWEEDIE_POWER, run_group_study, run_va_study
from .thickness import (
    MAP_SHAPE,
    ThicknessMap,
    class_map,
    etdrs_summarize,
    layer_names,
)

log = logging.getLogger("octquant")

THREADS_ENV = "OCT_QUANT_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}")
    if n < 1:
        raise ValidationError(f"thread count must be >= 1, got {n}")
    return n


def _center(text):
    if text is None:
        return None
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise ValidationError(f"--center-mm expects 'x,y' in mm, got {text!r}")
    return x, y


def _stem(path) -> str:
    return Path(path).name.split(".")[0]


def _read_kind(path, cls):
    obj = read_octb(path)
    if not isinstance(obj, cls):
        raise ValidationError(f"{path}: expected a {cls.__name__} file")
    return obj


# -- commands -----------------------------------------------------------------

def cmd_preprocess(args):
    vol = _read_kind(args.input, Volume3D)
    sidecar = {"axial_center_offsets": None, "bv": None, "motion": None}
    if not args.skip_center:
        vol, offsets = axial_center(vol)
        sidecar["axial_center_offsets"] = [int(v) for v in offsets]
    if not args.skip_bv:
        params = BvParams(args.bv_lambda, args.bv_iters, args.bv_tol)
        vol = bv_smooth(vol, params)
        sidecar["bv"] = {"weight": params.weight, "max_iters": params.max_iters, "tol": params.tol}
    if not args.skip_motion:
        vol, est = motion_correct(vol, window=args.ma_window, workers=args.threads_n)
        sidecar["motion"] = est.to_json()
    write_octb(vol, args.out)
    write_json(sidecar, args.motion_json or f"{args.out}.motion.json")
    return 0


def _evaluate_rows(gt_path, pred_path, tau, cutoff):
    gt = _read_kind(gt_path, LabelMask)
    pred = _read_kind(pred_path, LabelMask)
    return score_rows(_stem(gt_path), score_pair(gt, pred, tau), cutoff)


def cmd_evaluate(args):
    rows = _evaluate_rows(args.gt, args.pred, args.tau, args.cutoff)
    write_rows_csv(rows, SCORE_COLUMNS, args.out)
    return 0


def _svg_path(base, name, many):
    if not many:
        return base
    p = Path(base)
    safe = name.replace("+", "_")
    return p.with_name(f"{p.stem}.{safe}{p.suffix or '.svg'}")


def _summaries(maps, center, laterality, subject_id):
    return [etdrs_summarize(m, center, laterality, subject_id=subject_id) for m in maps]


def _emit_summaries(summaries, args):
    many = len(summaries) > 1
    if args.etdrs:
        payload = [s.to_json() for s in summaries]
        write_json(payload if many else payload[0], args.etdrs)
    if args.svg:
        for s in summaries:
            emit_etdrs_svg(s, _svg_path(args.svg, s.layer, many))


def cmd_thickness(args):
    mask = _read_kind(args.mask, LabelMask)
    names = layer_names(args.layer)
    # summarise the maps at their stored (float32) precision so that `etdrs`
    # on the written file reproduces these summaries exactly
    maps = [dataclasses.replace(m, values=m.values.astype(np.float32)) for m in
            (class_map(mask, n, MAP_SHAPE) for n in names)]
    if args.out:
        write_octb(maps, args.out)
    if args.etdrs or args.svg:
        fov = mask.field_of_view_mm
        center = _center(args.center_mm) or (fov[1] / 2.0, fov[0] / 2.0)
        _emit_summaries(_summaries(maps, center, None, args.subject_id or _stem(args.mask)), args)
    return 0


def cmd_etdrs(args):
    maps = read_octb(args.map)
    if isinstance(maps, ThicknessMap):
        maps = [maps]
    if not isinstance(maps, list):
        raise ValidationError(f"{args.map}: expected a map file")
    if args.layer:
        keep = set(layer_names(args.layer))
        maps = [m for m in maps if m.name in keep]
        if not maps:
            raise ValidationError(f"{args.map}: no map named {args.layer}")
    fov = maps[0].field_of_view_mm
    center = _center(args.center_mm) or (fov[1] / 2.0, fov[0] / 2.0)
    _emit_summaries(_summaries(maps, center, args.laterality, args.subject_id or _stem(args.map)), args)
    return 0


def cmd_stats(args):
    cohort = read_cohort(args.cohort)
    summaries = read_etdrs_dir(args.summaries)
    if args.study == "group":
        report = run_group_study(cohort, summaries, args.tweedie_power, workers=args.threads_n)
    else:
        report = run_va_study(cohort, summaries, args.group, workers=args.threads_n)
    write_json(report.to_json(), args.out)
    if args.csv:
        write_rows_csv(report.rows(), CELL_COLUMNS, args.csv)
    return 0


def cmd_losses(args):
    y = _read_kind(args.y, LabelMask)
    yhat = _read_kind(args.yhat, LabelMask)
    validate_pair(y, yhat)
    cfg = LossConfig(args.alpha, args.beta, args.gamma)
    result = total_loss(one_hot(y), one_hot(yhat), cfg)
    if args.out:
        write_json(result, args.out)
    else:
        sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


def cmd_phantom(args):
    spec = PhantomSpec.from_json(read_json(args.spec)) if args.spec else PhantomSpec()
    if args.seed is not None:
        spec = PhantomSpec.from_json({**spec.to_json(), "seed": args.seed})
    vol, mask, truth = generate(spec)
    write_octb(vol, args.out_volume)
    write_octb(mask, args.out_mask)
    if args.out_truth:
        write_json(truth.to_json(), args.out_truth)
    return 0


def _batch_pairs(directory):
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"not a directory: {d}")
    pairs = []
    for gt in sorted(d.glob("*.gt.octb")):
        vid = gt.name[: -len(".gt.octb")]
        pairs.append((vid, gt, d / f"{vid}.pred.octb"))
    if not pairs:
        raise EmptyBatch(f"{d}: no {{id}}.gt.octb / {{id}}.pred.octb pairs")
    return pairs


def cmd_batch(args):
    pairs = _batch_pairs(args.dir)
    out = Path(args.out_dir)

    def one(item):
        vid, gt, pred = item
        try:
            rows = _evaluate_rows(gt, pred, args.tau, args.cutoff)
        except OctQuantError as exc:
            return vid, None, {"volume_id": vid, "error": type(exc).__name__, "message": str(exc)}
        write_rows_csv(rows, SCORE_COLUMNS, out / f"{vid}.scores.csv")
        return vid, rows, None

    with ThreadPoolExecutor(max(1, min(args.threads_n, len(pairs)))) as ex:
        results = list(ex.map(one, pairs))
    rows = [r for _, rs, _ in results if rs for r in rs]
    failures = [f for _, _, f in results if f]
    write_rows_csv(rows, SCORE_COLUMNS, out / "aggregate.csv")
    write_json({"n_pairs": len(pairs), "n_failed": len(failures), "failures": failures}, out / "failures.json")
    if failures:
        log.warning("%d of %d pairs failed; see %s", len(failures), len(pairs), out / "failures.json")
    return 0


# -- parser -------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="oct-quant", description="Retinal OCT segmentation quantification toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="JSON file of defaults; explicit flags win")
    p.add_argument("--threads", type=int, default=None, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)
    subs = {}

    s = subs["preprocess"] = sub.add_parser("preprocess", help="axial centring, BV smoothing, motion correction")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bv-lambda", type=float, default=0.08)
    s.add_argument("--bv-iters", type=int, default=100)
    s.add_argument("--bv-tol", type=float, default=1e-4)
    s.add_argument("--ma-window", type=int, default=5)
    s.add_argument("--skip-center", action="store_true")
    s.add_argument("--skip-bv", action="store_true")
    s.add_argument("--skip-motion", action="store_true")
    s.add_argument("--motion-json", help="sidecar path (default: OUT.motion.json)")
    s.set_defaults(func=cmd_preprocess)

    s = subs["evaluate"] = sub.add_parser("evaluate", help="per-class Dice, NSD, USS, OSS")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True)
    s.add_argument("--tau", type=float, default=10.0)
    s.add_argument("--cutoff", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = subs["thickness"] = sub.add_parser("thickness", help="350x350 en-face maps and ETDRS summaries")
    s.add_argument("--mask", required=True)
    s.add_argument("--layer", default="all", help="class name or 'all'")
    s.add_argument("--center-mm", help="foveal centre 'x,y' in mm (default: field centre)")
    s.add_argument("--subject-id")
    s.add_argument("--out")
    s.add_argument("--etdrs")
    s.add_argument("--svg")
    s.set_defaults(func=cmd_thickness)

    s = subs["etdrs"] = sub.add_parser("etdrs", help="ETDRS summaries of a saved map file")
    s.add_argument("--map", required=True)
    s.add_argument("--layer")
    s.add_argument("--center-mm")
    s.add_argument("--laterality", choices=["OD", "OS"])
    s.add_argument("--subject-id")
    s.add_argument("--etdrs", required=True)
    s.add_argument("--svg")
    s.set_defaults(func=cmd_etdrs)

    s = subs["stats"] = sub.add_parser("stats", help="group comparison or visual-acuity association")
    s.add_argument("study", choices=["group", "va"])
    s.add_argument("--cohort", required=True)
    s.add_argument("--summaries", required=True)
    s.add_argument("--tweedie-power", type=float, default=TWEEDIE_POWER)
    s.add_argument("--group", type=int, choices=[0, 1], default=1, help="DR group for 'va' (0 NPDR, 1 PDR)")
    s.add_argument("--out", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_stats)

    s = subs["losses"] = sub.add_parser("losses", help="Dice, CE, texture and total loss of two masks")
    s.add_argument("--y", required=True)
    s.add_argument("--yhat", required=True)
    s.add_argument("--alpha", type=float, default=1.0)
    s.add_argument("--beta", type=float, default=1.0)
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_losses)

    s = subs["phantom"] = sub.add_parser("phantom", help="synthetic volume, mask and ground truth")
    s.add_argument("--spec")
    s.add_argument("--seed", type=int)
    s.add_argument("--out-volume", required=True)
    s.add_argument("--out-mask", required=True)
    s.add_argument("--out-truth")
    s.set_defaults(func=cmd_phantom)

    s = subs["batch"] = sub.add_parser("batch", help="evaluate every {id}.gt.octb/{id}.pred.octb pair in a directory")
    s.add_argument("--dir", required=True)
    s.add_argument("--command", dest="batch_command", choices=["evaluate"], default="evaluate")
    s.add_argument("--tau", type=float, default=10.0)
    s.add_argument("--cutoff", type=float, default=0.2)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_batch)

    return p, subs


def _config_defaults(path, command, subparser):
    cfg = read_json(path)
    if not isinstance(cfg, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    merged = {k: v for k, v in cfg.items() if not isinstance(v, dict)}
    merged.update(cfg.get(command, {}) or {})
    known = {a.dest for a in subparser._actions}
    out = {}
    for k, v in merged.items():
        dest = k.replace("-", "_")
        if dest == "in":
            dest = "input"
        if dest in known:
            out[dest] = v
    return out


def parse(argv):
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        subs[args.command].set_defaults(**_config_defaults(args.config, args.command, subs[args.command]))
        cfg = read_json(args.config)
        if isinstance(cfg.get("threads"), int):
            parser.set_defaults(threads=cfg["threads"])
        args = parser.parse_args(argv)
    args.threads_n = _threads(args)
    return args


def run(argv=None) -> int:
    """Execute one command; returns the process exit code."""
    try:
        args = parse(sys.argv[1:] if argv is None else list(argv))
        logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except ValidationError as exc:
        return _fail(exc, 1)
    except ProcessingError as exc:
        return _fail(exc, 2)
    except OctQuantError as exc:
        return _fail(exc, 2)
    except Exception as exc:  # never let a traceback replace the error JSON
        log.debug("unexpected failure", exc_info=True)
        return _fail(exc, 2)


def _fail(exc, code) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
