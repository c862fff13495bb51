"""``polarring`` command line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .centerline import CHANNELS, CenterlinePath, trace_with_waypoints
from .contour import ContourPair, SliceGrid, load_contours, save_contours
from .metrics import evaluate_pair, summarize, write_csv, write_summary
from .phantom import PhantomConfig, PhantomTruth, generate_phantom, save_phantom
from .segmenter import ModelConfig, PolarSegmenter, ensemble_predict, training_slices, train, build_model
from .volume import load_volume, normalize_intensity, read_volume_header, save_volume

log = logging.getLogger("polarring")


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def cmd_phantom(args) -> int:
    obj = _read_json(args.config) if args.config else {}
    if "phantom" in obj:
        obj = obj["phantom"]
    cfg = PhantomConfig.from_json(obj)
    if args.seed is not None:
        cfg.seed = args.seed
    vol, truth = generate_phantom(cfg)
    out = Path(args.out)
    save_phantom(vol, truth, out, cfg)
    pmap = pipeline.proximity_map(truth, vol, args.a, args.d_max)
    for name in CHANNELS:
        save_volume(pmap[name], out / f"proximity_{name}", channel=name, a=args.a, d_max_mm=args.d_max)
    print(f"wrote phantom to {out}")
    return 0


def cmd_trace(args) -> int:
    channel = load_volume(args.map)
    name = args.channel or read_volume_header(args.map).get("channel", "internal")
    path = trace_with_waypoints(channel, args.stride, name)
    path.save(args.out)
    print(f"traced {len(path.voxels)} voxels, cost {path.cost:.4f}")
    return 0


def _phantom_dirs(root: Path) -> list[Path]:
    return sorted(p.parent for p in root.rglob("truth.json") if (p.parent / "volume.vol.json").exists())


def cmd_train(args) -> int:
    overrides = _read_json(args.config) if args.config else {}
    overrides.pop("version", None)
    cfg = pipeline.desk_model_config(**overrides)
    if args.mode:
        cfg.mode = args.mode
    if args.aug:
        cfg.augment = args.aug == "on"
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    dirs = _phantom_dirs(Path(args.data))
    if not dirs:
        raise FileNotFoundError(f"no phantoms (truth.json + volume.vol.json) under {args.data}")
    data = [(normalize_intensity(load_volume(d / "volume")), PhantomTruth.load(d / "truth.json")) for d in dirs]
    model = build_model(cfg)
    model, record = train(model, training_slices(data), cfg,
                          progress=lambda e: print(f"epoch {e['epoch']} loss {e['loss']:.5f}", flush=True))
    model.save(args.out)
    (Path(args.out) / "train_record.json").write_text(
        json.dumps([{k: v for k, v in e.items() if k != "seconds"} for e in record.epochs], indent=1))
    print(f"saved model to {args.out}")
    return 0


def cmd_predict(args) -> int:
    models = [PolarSegmenter.load(m) for m in args.model]
    vol = normalize_intensity(load_volume(args.volume))
    path = CenterlinePath.load(args.centerline)
    centers = path.centers_by_slice()
    contours = [ensemble_predict(models, vol, centers[k], k) for k in sorted(centers)]
    save_contours(contours, args.out)
    print(f"wrote {len(contours)} contour pairs to {args.out}")
    return 0


def _match_vessel(truth: PhantomTruth, cp: ContourPair):
    best, best_d = None, np.inf
    for vi, v in enumerate(truth.vessels):
        pos = np.flatnonzero(v.slices == cp.slice_index)
        if pos.size == 0:
            continue
        d = np.linalg.norm(v.centerline[pos[0], :2] - np.asarray(cp.center[:2]))
        if d < best_d:
            best, best_d = vi, d
    return best


def cmd_eval(args) -> int:
    truth = PhantomTruth.load(args.truth)
    grid = SliceGrid.from_volume(load_volume(args.volume))
    results = []
    for cp in load_contours(args.contours):
        vi = _match_vessel(truth, cp)
        if vi is None:
            log.warning("no truth for slice %s; skipped", cp.slice_index)
            continue
        v = truth.vessels[vi]
        t = v.contour(cp.slice_index, truth.angles)
        results.append(evaluate_pair(cp, t, grid, f"{v.label}_{cp.slice_index:04d}", args.supersample))
    out = Path(args.out)
    write_csv(results, out / "metrics.csv")
    summary = summarize(results)
    write_summary(summary, out / "summary.json")
    print(json.dumps(summary, indent=2))
    return 0


def cmd_e2e(args) -> int:
    cfg = pipeline.PipelineConfig.load(args.config) if args.config else pipeline.PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    summary = pipeline.run_e2e(cfg, args.out, progress=lambda e: print(
        f"epoch {e['epoch']} loss {e['loss']:.5f}", flush=True))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    return 0 if run_all(print) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polarring", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate a synthetic vessel phantom")
    s.add_argument("--config", help="phantom config JSON (or pipeline config with a 'phantom' key)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--a", type=float, default=6.0)
    s.add_argument("--d-max", type=float, default=5.0)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("trace", help="trace a centreline on a proximity map")
    s.add_argument("--map", required=True)
    s.add_argument("--stride", type=int, default=50)
    s.add_argument("--channel")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("train", help="train a polar contour regressor")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=["single", "multi"])
    s.add_argument("--aug", choices=["on", "off"])
    s.add_argument("--config", help="model config JSON overrides")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="predict contours along a centreline")
    s.add_argument("--model", required=True, action="append", help="model dir; repeat to ensemble")
    s.add_argument("--volume", required=True)
    s.add_argument("--centerline", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="score contours against phantom truth")
    s.add_argument("--contours", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--supersample", type=int, default=4)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("e2e", help="run the whole pipeline on generated phantoms")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="e2e_out")
    s.set_defaults(func=cmd_e2e)

    s = sub.add_parser("selftest", help="run the built-in oracle checks")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # stage failure -> exit 1
        print(f"polarring {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
