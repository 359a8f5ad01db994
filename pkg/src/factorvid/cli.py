"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 numerical failure, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import bench, costmodel, data, gradcheck, metrics
from . import numerics as nx
from .config import ConfigError, load_config
from .losses import FeatureExtractor
from .model import init_weights, predict_array
from .training import CheckpointError, TrainingError, fit, load_checkpoint

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, msg, code=EXIT_VALIDATION):
        super().__init__(msg)
        self.code = code


def _config(args):
    overrides = list(args.overrides or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(("train.seed", args.seed))
        overrides.append(("data.base_seed", args.seed))
    return load_config(args.config, overrides)


def _ints(text):
    return [int(x) for x in text.split(",") if x]


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    cfg = _config(args)
    out = Path(args.out or cfg.paths["data_dir"])
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise CliError(f"{out} is not empty; pass --force to regenerate", EXIT_IO)
        for split in data.SPLITS:
            shutil.rmtree(out / split, ignore_errors=True)
        (out / data.MANIFEST_NAME).unlink(missing_ok=True)
    out.mkdir(parents=True, exist_ok=True)
    manifest = data.write_dataset(out, cfg.scene, cfg.counts(), cfg.data["base_seed"])
    print(f"wrote {len(manifest['clips'])} clips to {out} "
          + " ".join(f"{k}={v}" for k, v in manifest["counts"].items()))


def _arrays(clips, mcfg):
    if not clips:
        return None
    return data.stack_clips(clips, mcfg.T_in, mcfg.T_out)


def cmd_train(args):
    cfg = _config(args)
    data_dir = Path(args.data or cfg.paths["data_dir"])
    run = Path(args.out or cfg.paths["run_dir"])
    if not (data_dir / data.MANIFEST_NAME).exists():
        raise CliError(f"no dataset at {data_dir}; run gen-data first", EXIT_IO)
    train = _arrays(data.load_split(data_dir, "train"), cfg.model)
    if train is None:
        raise CliError("training split is empty")
    val = _arrays(data.load_split(data_dir, "val"), cfg.model)
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.yaml").write_text(cfg.dump())
    resume = load_checkpoint(args.resume) if args.resume else None
    model = init_weights(cfg.model, seed=cfg.train.seed)
    model, rows = fit(model, train, cfg.train, val=val, log_file=run / "train.log",
                      checkpoint_dir=run / "checkpoints", resume=resume,
                      final_checkpoint=run / "final.evac")
    if rows and not np.isfinite(rows[-1]["loss"]):
        raise CliError("final loss is not finite", EXIT_NUMERIC)
    print(f"saved {run / 'final.evac'}")


def _load_model(path):
    ck = load_checkpoint(path)
    return ck.to_model()


def _triptych(last, pred, truth):
    gap = np.ones(last.shape[:-1] + (2,), dtype=np.float32)
    return np.concatenate([last, gap, pred, gap, truth], axis=-1)


def cmd_predict(args):
    model = _load_model(args.checkpoint)
    mc = model.cfg
    clip = data.read_frames(args.clip)
    if clip.frames.shape[1:] != (mc.C, mc.H, mc.W):
        raise CliError(f"clip geometry {clip.frames.shape[1:]} does not match checkpoint "
                       f"({mc.C}, {mc.H}, {mc.W})")
    if clip.frames.shape[0] < mc.T_in:
        raise CliError(f"clip has {clip.frames.shape[0]} frames, model needs {mc.T_in}")
    x = clip.frames[None, : mc.T_in]
    pred = predict_array(x, model)[0]
    truth = clip.frames[mc.T_in : mc.T_in + mc.T_out]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if mc.C == 1 else "ppm"
    for t in range(mc.T_out):
        data.write_frame(out / f"pred_{t:03d}.{ext}", pred[t])
        gt = truth[t] if t < len(truth) else np.zeros_like(pred[t])
        data.write_frame(out / f"triptych_{t:03d}.{ext}", _triptych(x[0, -1], pred[t], gt))
    print(f"wrote {mc.T_out} predicted frames to {out}")


EVAL_FIELDS = ["clip", "psnr", "ssim", "phi_dist", "base_psnr", "base_ssim", "base_phi_dist", "psnr_delta"]


def evaluate_clips(model, clips, oracle=False):
    mc = model.cfg
    phi = FeatureExtractor(in_channels=mc.C)
    rows = []
    for i, clip in enumerate(clips):
        x, y = data.stack_clips([clip], mc.T_in, mc.T_out)
        pred = y.copy() if oracle else predict_array(x, model)
        base = data.copy_last_baseline(x, mc.T_out)
        row = {"clip": clip.meta.get("name", str(i)),
               "psnr": metrics.psnr(pred, y), "ssim": metrics.ssim(pred[0], y[0]),
               "phi_dist": metrics.perceptual_distance(pred, y, phi),
               "base_psnr": metrics.psnr(base, y), "base_ssim": metrics.ssim(base[0], y[0]),
               "base_phi_dist": metrics.perceptual_distance(base, y, phi)}
        row["psnr_delta"] = row["psnr"] - row["base_psnr"]
        rows.append(row)
    mean = {"clip": "mean"}
    for k in EVAL_FIELDS[1:]:
        mean[k] = float(np.mean([r[k] for r in rows]))
    return rows, mean


def cmd_eval(args):
    model = _load_model(args.checkpoint)
    manifest, root = data.load_manifest(args.data)
    entries = [c for c in manifest["clips"] if c["split"] == args.split]
    if not entries:
        raise CliError(f"no clips in split {args.split!r}")
    clips = []
    for c in entries:
        clip = data.read_frames(root / c["name"], c["frames"], seed=c["seed"], split=c["split"])
        clip.meta["name"] = c["name"]
        clips.append(clip)
    rows, mean = evaluate_clips(model, clips, oracle=args.oracle)
    buf = io.StringIO()
    wr = csv.DictWriter(buf, EVAL_FIELDS, lineterminator="\n")
    wr.writeheader()
    for r in rows + [mean]:
        wr.writerow(r)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue())
    print(f"{'clip':<24}{'psnr':>8}{'ssim':>8}{'phi':>10}{'base':>8}{'delta':>8}")
    for r in rows + [mean]:
        print(f"{r['clip']:<24}{r['psnr']:>8.2f}{r['ssim']:>8.3f}{r['phi_dist']:>10.2e}"
              f"{r['base_psnr']:>8.2f}{r['psnr_delta']:>8.2f}")


def cmd_costmodel(args):
    try:
        hw = costmodel.get_preset(args.preset, args.presets)
    except KeyError as exc:
        raise CliError(str(exc.args[0]))
    if args.table1:
        rows = costmodel.table1(hw)
    else:
        rows = costmodel.sweep(hw, _ints(args.res), _ints(args.T), _ints(args.D), args.downsample)
    print(costmodel.format_table(rows))
    text = costmodel.to_csv(rows, args.out)
    if not args.out:
        print(text, end="")


def cmd_bench(args):
    Ms = _ints(args.M)
    T_ladder = _ints(args.T_ladder) if args.T_ladder else None
    timings, verdict = bench.run_scaling(Ms, T=args.T, runs=args.runs, naive=not args.no_naive,
                                         T_ladder=T_ladder)
    text = bench.timings_csv(timings)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    print(json.dumps(verdict, sort_keys=True))
    print("PASS" if verdict["pass"] else "FAIL")
    if not verdict["pass"]:
        raise CliError("scaling verdict FAIL", EXIT_NUMERIC)


def cmd_gradcheck(args):
    overrides = {"mish": gradcheck.faulty_mish} if args.inject_fault == "mish" else None
    only = [x for x in args.only.split(",") if x] if args.only else None
    if only and set(only) - set(gradcheck.CASES):
        raise CliError(f"unknown cases: {', '.join(sorted(set(only) - set(gradcheck.CASES)))}")
    results = gradcheck.run_suite(instances=args.instances, only=only, overrides=overrides)
    failed = False
    for op, (ok, worst, n) in gradcheck.summarize(results).items():
        print(f"{'PASS' if ok else 'FAIL'}  {op:<20} worst_rel_err={worst:.3e}  instances={n}")
        failed |= not ok
    if failed:
        raise CliError("gradient check failed", EXIT_NUMERIC)


# ---------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="factorvid", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out=True):
        sp.add_argument("--config", type=Path, help="YAML file of dotted keys")
        sp.add_argument("--seed", type=int)
        if out:
            sp.add_argument("--out", type=Path)
        sp.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted-key overrides")

    sp = sub.add_parser("gen-data", help="generate the bouncing-shapes dataset")
    common(sp)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="run the staged curriculum")
    common(sp)
    sp.add_argument("--data", type=Path)
    sp.add_argument("--resume", type=Path, help="checkpoint to continue from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("predict", help="predict future frames of one clip")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--clip", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(fn=cmd_predict)

    sp = sub.add_parser("eval", help="metrics report against the copy-last baseline")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", type=Path)
    sp.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("costmodel", help="roofline cost table")
    sp.add_argument("--preset", default="orin")
    sp.add_argument("--presets", type=Path, help="alternative presets YAML")
    sp.add_argument("--table1", action="store_true")
    sp.add_argument("--res", default="256,512,1024")
    sp.add_argument("--T", default="10")
    sp.add_argument("--D", default="512")
    sp.add_argument("--downsample", type=int, default=8)
    sp.add_argument("--out", type=Path)
    sp.set_defaults(fn=cmd_costmodel)

    sp = sub.add_parser("bench", help="translator scaling benchmark")
    sp.add_argument("--M", default="256,512,1024,2048")
    sp.add_argument("--T", type=int, default=8)
    sp.add_argument("--T-ladder", dest="T_ladder", default="")
    sp.add_argument("--runs", type=int, default=5)
    sp.add_argument("--no-naive", action="store_true")
    sp.add_argument("--out", type=Path)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--only", default="", help="comma-separated case names")
    sp.add_argument("--inject-fault", choices=["mish"], help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, nx.ShapeError, data.FrameFormatError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, nx.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
