"""Command line entry point: synth, train, eval, gradcheck, ablate, loss-bench, attnviz.

Exit codes: 0 success, 1 invalid input, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import bench, checks
from . import blocks as B
from . import detector as D
from . import synth as S
from . import tensor as T
from .bbox_loss import FocusStateError
from .metrics import evaluate, read_jsonl, write_jsonl

log = logging.getLogger("detectlab")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

CORE_GRID = [
    {"name": "baseline", "neck": "sppcspc", "attention": "none", "box_loss": "ciou"},
    {"name": "+rfb", "neck": "rfb", "attention": "none", "box_loss": "ciou"},
    {"name": "+rfb+ca", "neck": "rfb", "attention": "ca", "box_loss": "ciou"},
    {"name": "+rfb+ca+wiou3", "neck": "rfb", "attention": "ca", "box_loss": "wiou3"},
]
ABLATE_HEADER = ["name", "neck", "attention", "box_loss", "precision", "recall", "map50", "map5095",
                 "params", "macs", "speed_ms"]


class CLIError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    # usage errors are invalid input (1); argparse would use 2, which is reserved for numerical failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise CLIError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise CLIError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(obj, dict):
        raise CLIError(f"{path}: expected a JSON object")
    return obj


def _require_dataset(data_dir, splits=("train", "val", "test")) -> None:
    for s in splits:
        if not (Path(data_dir) / f"{s}.jsonl").exists():
            raise CLIError(f"{data_dir} has no {s}.jsonl manifest (run `detectlab synth` first)")


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- commands ----------------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = S.SceneSpec.from_dict(_load_json(args.spec)) if args.spec else S.SceneSpec()
    if args.n < 1:
        raise CLIError("--n must be >= 1")
    t0 = time.perf_counter()
    paths = S.build_dataset(spec, args.n, args.out, seed=args.seed)
    log.info("wrote %d scenes in %.1fs", args.n, time.perf_counter() - t0)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def _train_one(config: D.DetectorConfig, data_dir, out_dir) -> dict:
    train_set = D.DetectionData.from_dir(data_dir, "train")
    val_set = D.DetectionData.from_dir(data_dir, "val")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    ckpt, rows = D.train(config, train_set, val_set, csv_path=out / "log.csv")
    elapsed = time.perf_counter() - t0
    ckpt.save(out / "model.dlck")
    model = D.model_from_checkpoint(ckpt)
    test = D.evaluate_model(model, D.DetectionData.from_dir(data_dir, "test"))
    summary = {"config": config.to_dict(), "train_seconds": elapsed, "params": model.param_count(),
               "epochs": [{k: r[k] for k in D.CSV_HEADER} for r in rows], "test": test.to_dict()}
    _write_json(out / "summary.json", summary)
    return {"model": model, "test": test, "rows": rows, "seconds": elapsed}


def cmd_train(args) -> int:
    config = D.DetectorConfig.from_dict(_load_json(args.config))
    _require_dataset(args.data)
    res = _train_one(config, args.data, args.out)
    print(res["test"].table())
    print(f"test mAP0.5 {res['test'].map50:.4f}  trained in {res['seconds']:.1f}s  -> {args.out}")
    return EXIT_OK


def _report_costs(model, runs, warmup) -> dict:
    return {"params": model.param_count(), "macs": D.forward_macs(model),
            "speed_ms": D.measure_speed(model, runs, warmup)}


def cmd_eval(args) -> int:
    if bool(args.ckpt) == bool(args.pred):
        raise CLIError("give either --ckpt with --data, or --pred with --gt")
    costs = None
    if args.ckpt:
        if not args.data:
            raise CLIError("--ckpt needs --data")
        _require_dataset(args.data, (args.split,))
        model = D.model_from_checkpoint(D.Checkpoint.load(args.ckpt))
        data = D.DetectionData.from_dir(args.data, args.split)
        cfg = model.config
        pred = D.predict(model, data.images)
        dets = [d for per in D.decode(pred, cfg.conf_thresh, cfg.nms_iou, cfg, data.image_ids) for d in per]
        gts = data.ground_truth()
        if args.save_pred:
            write_jsonl(args.save_pred, dets)
        costs = _report_costs(model, args.runs, args.warmup)
    else:
        if not args.gt:
            raise CLIError("--pred needs --gt")
        dets, gts = read_jsonl(args.pred), read_jsonl(args.gt)
    res = evaluate(dets, gts)
    print(res.table())
    report = res.to_dict()
    if costs:
        print(f"Parameters: {costs['params']}  MACs: {costs['macs']} ({costs['macs'] / 1e9:.4f} G)  "
              f"Speed: {costs['speed_ms']:.2f} ms/image")
        report["costs"] = costs
    if args.json:
        _write_json(args.json, report)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    mods = checks.MODULES if args.module == "all" else args.module.split(",")
    for m in mods:
        if m not in checks.MODULES:
            raise CLIError(f"unknown module {m!r}; choose from {', '.join(checks.MODULES)}")
    ok = True
    for m in mods:
        res = checks.run(m, seed=args.seed, tol=args.tol, h=args.h, max_coords=args.max_coords)
        status = "PASS" if res["pass"] else "FAIL"
        print(f"{status} {m}: max_rel_err={res['max_rel_err']:.3e} over {res['coords']} coords")
        ok &= bool(res["pass"])
        if m == "wiou3":
            dev = checks.wiou3_gain_identity(args.seed)
            good = dev <= 1e-10
            print(f"{'PASS' if good else 'FAIL'} wiou3 = r * wiou1 backward: max dev {dev:.3e}")
            ok &= good
    return EXIT_OK if ok else EXIT_NUMERICAL


def _grid_rows(path) -> tuple[dict, list[dict]]:
    if path is None:
        return {}, [dict(r) for r in CORE_GRID]
    grid = _load_json(path)
    extra = set(grid) - {"base", "rows"}
    if extra:
        raise CLIError(f"grid file: unknown keys {sorted(extra)}")
    base = grid.get("base", {})
    rows = grid.get("rows", [dict(r) for r in CORE_GRID])
    if not isinstance(rows, list) or not rows:
        raise CLIError("grid file: rows must be a non-empty list")
    return base, rows


def cmd_ablate(args) -> int:
    base, rows = _grid_rows(args.grid)
    _require_dataset(args.data)
    configs = []
    for i, row in enumerate(rows):
        row = dict(row)
        name = row.pop("name", f"row{i}")
        configs.append((name, D.DetectorConfig.from_dict({**base, **row})))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for name, cfg in configs:
        log.info("ablation row %s", name)
        res = _train_one(cfg, args.data, out / name.replace("+", "p"))
        costs = _report_costs(res["model"], args.runs, args.warmup)
        t = res["test"]
        results.append({"name": name, "neck": cfg.neck, "attention": cfg.attention, "box_loss": cfg.box_loss,
                        "precision": t.precision, "recall": t.recall, "map50": t.map50, "map5095": t.map5095,
                        **costs})
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATE_HEADER)
        w.writeheader()
        w.writerows(results)
    for r in results:
        print(f"{r['name']:<16} mAP0.5 {100 * r['map50']:5.1f}  mAP0.5:0.95 {100 * r['map5095']:5.1f}  "
              f"params {r['params']}  MACs {r['macs']}  {r['speed_ms']:.2f} ms")
    return EXIT_OK


def cmd_loss_bench(args) -> int:
    losses = [s.strip() for s in args.losses.split(",") if s.strip()]
    for name in losses:
        if name not in bench.L.BOX_LOSSES:
            raise CLIError(f"unknown loss {name!r}")
    if args.steps < 1 or args.pairs < 1 or not args.lr > 0:
        raise CLIError("--steps and --pairs must be >= 1 and --lr > 0")
    curves = bench.loss_bench(losses, args.steps, args.seed, args.lr, args.pairs)
    bench.write_curves(args.out, curves)
    for name, c in curves.items():
        hit = bench.first_below(c, args.level)
        print(f"{name}: first step below {args.level}: {hit if hit is not None else 'never'}  final {c[-1]:.4f}")
    return EXIT_OK


def cmd_attnviz(args) -> int:
    ckpt = D.Checkpoint.load(args.ckpt)
    if ckpt.config.attention != "ca":
        raise CLIError("checkpoint has no coordinate attention block")
    img = T.load_tnsr(args.image)
    size = ckpt.config.input_size
    if img.shape != (3, size, size):
        raise CLIError(f"image must be [3,{size},{size}], got {list(img.shape)}")
    model = D.model_from_checkpoint(ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        _, extras = model.forward(T.Tensor(img[None].astype(T.default_dtype())), training=False)
    paths = B.attention_maps_export(extras["g_h"], extras["g_w"], out / Path(args.image).stem)
    for p in paths:
        print(p)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="detectlab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON scene spec")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one config")
    p.add_argument("--config", required=True, help="flat JSON detector config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class report for a checkpoint or a prediction file")
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--pred", help="detections JSONL")
    p.add_argument("--gt", help="ground-truth JSONL")
    p.add_argument("--save-pred", help="write the checkpoint's detections as JSONL")
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--runs", type=int, default=50, help="timed forwards for the speed figure")
    p.add_argument("--warmup", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", default="all", help=f"comma list of {','.join(checks.MODULES)} or 'all'")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--max-coords", type=int, default=40, help="probed coordinates per input")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and score a grid of configs")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", help='JSON {"base": {...}, "rows": [{"name": ..., ...}]}; default core 4 rows')
    p.add_argument("--out", default="ablation")
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--warmup", type=int, default=5)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("loss-bench", help="gradient descent on box coordinates under each loss")
    p.add_argument("--losses", default="ciou,wiou1,wiou3")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--lr", type=float, default=10.0, help="fixed step size")
    p.add_argument("--pairs", type=int, default=256)
    p.add_argument("--level", type=float, default=0.2, help="report the first step below this mean L_IoU")
    p.add_argument("--out", default="loss_bench.csv")
    p.set_defaults(func=cmd_loss_bench)

    p = sub.add_parser("attnviz", help="dump coordinate-attention gate maps for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="TNSR image [3,H,W]")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attnviz)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (D.NumericalError, FocusStateError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TypeError, KeyError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
