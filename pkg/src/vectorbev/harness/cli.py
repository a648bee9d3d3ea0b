"""``vectorbev`` command line interface.

Subcommands: gen, train, eval, bench, gradcheck. Exit codes: 0 success,
2 usage or configuration error, 3 runtime failure (non-finite loss,
failed checks, broken dataset).
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from ..errors import ConfigError, VectorBevError
from ..geometry import make_rig
from ..model import Model
from ..synthdata import generate_scene, write_dataset
from .bench import (COMPARE_PROFILE, HEAVY_PROFILE, compare_backends,
                    compare_modes, run_scaling, slopes_of, write_rows)
from .config import format_config, load_config, model_config_of
from .evaluate import evaluate_model
from .gradcheckrun import run_suite, suite_ok
from .train import load_checkpoint, load_sequences, restore_model, train

__all__ = ["main"]


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key")


def _cmd_gen(args) -> int:
    cfg = load_config(args.config, args.overrides)
    mcfg = model_config_of(cfg)
    spec = mcfg.bev_spec()
    rig = make_rig(n_cams=mcfg.n_cams, fov_deg=mcfg.cam_fov_deg,
                   image_w=mcfg.cam_size, image_h=mcfg.cam_size,
                   cam_height=mcfg.cam_height)
    os.makedirs(args.out, exist_ok=True)
    for i in range(cfg["scenes"]):
        seq = generate_scene(seed=cfg["seed"] + i,
                             n_boxes=cfg["boxes_per_scene"], spec=spec,
                             rig=rig, T=cfg["frames"], dt=cfg["dt"],
                             c_img=mcfg.C, n_classes=mcfg.n_classes)
        write_dataset(seq, os.path.join(args.out, f"scene_{i:04d}.vbev"))
    with open(os.path.join(args.out, "config_resolved.cfg"), "w",
              encoding="utf-8") as f:
        f.write(format_config(cfg))
    print(f"wrote {cfg['scenes']} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    if args.resume is not None:
        # the checkpoint's config snapshot plus --set keeps a resumed run
        # consistent with the run it continues
        summary = train(None, args.data, args.out, resume=args.resume,
                        overrides=args.overrides)
    else:
        cfg = load_config(args.config, args.overrides)
        summary = train(cfg, args.data, args.out)
    print(f"trained to step {summary['steps']}, "
          f"final loss {summary['loss']:.6f}, "
          f"checkpoint {summary['checkpoint']}")
    return 0


def _cmd_eval(args) -> int:
    ckpt_cfg, params, _, _, _ = load_checkpoint(args.ckpt)
    cfg = ckpt_cfg if args.config is None else load_config(args.config,
                                                           args.overrides)
    if args.config is None and args.overrides:
        raise ConfigError("--set requires --config for eval")
    mcfg = model_config_of(cfg)
    model = Model(mcfg)
    restore_model(model, params)
    seqs = load_sequences(args.data)
    metrics = evaluate_model(model, seqs, mcfg)
    if metrics["mate"] != metrics["mate"]:
        metrics["mate"] = None
    print(json.dumps(metrics, indent=2, sort_keys=True))
    if args.out:
        os.makedirs(os.path.dirname(args.out) or ".", exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(metrics, f, indent=2, sort_keys=True)
    return 0


def _cmd_bench(args) -> int:
    if args.mode == "compare":
        res = compare_modes(repeats=args.repeats)
        for key, val in sorted(res.items()):
            print(f"{key}: {val:.6g}")
        ok = res["time_reduction"] > 0 and res["peak_reduction"] > 0
        return 0 if ok else 3
    if args.mode == "backends":
        res = compare_backends(repeats=args.repeats)
        for key, val in sorted(res.items()):
            print(f"{key}: {val:.6g}")
        return 0
    sizes = [int(s) for s in args.sizes.split(",")]
    rows = run_scaling(sizes, repeats=args.repeats, profile=HEAVY_PROFILE)
    if args.out:
        write_rows(rows, args.out)
    print("n,mode,queries,time_s,peak_bytes")
    for r in rows:
        print(f"{r['n']},{r['mode']},{r['queries']},{r['time_s']:.6f},"
              f"{r['peak_bytes']}")
    for mode in ("vector", "full"):
        s = slopes_of(rows, mode)
        print(f"{mode}: time slope {s['time']:.3f}, "
              f"query slope {s['queries']:.3f}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suite(seeds=range(args.seeds))
    by_name: dict[str, float] = {}
    failed = []
    for r in results:
        if not r.expect_fail:
            by_name[r.name] = max(by_name.get(r.name, 0.0), r.max_rel_err)
        if not r.ok:
            failed.append(r)
    for name, err in sorted(by_name.items()):
        print(f"{name:24s} worst rel err {err:.3e}")
    control = [r for r in results if r.expect_fail]
    print(f"negative control caught: {all(r.ok for r in control)}")
    if failed:
        for r in failed:
            print(f"FAIL {r.name} seed {r.seed}: {r.max_rel_err:.3e} "
                  f"(tol {r.tol})", file=sys.stderr)
        return 3
    print(f"all checks passed over {args.seeds} seeds")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vectorbev")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_gen)

    p = sub.add_parser("train", help="train on a generated dataset")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default=None, help="write metrics JSON here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("bench", help="encoder scaling benchmark")
    p.add_argument("--mode", choices=["scaling", "compare", "backends"],
                   default="scaling")
    p.add_argument("--sizes", default="32,64,128,256")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None, help="write CSV here")
    p.set_defaults(fn=_cmd_bench)

    p = sub.add_parser("gradcheck", help="run the gradient-check suite")
    p.add_argument("--seeds", type=int, default=20)
    p.set_defaults(fn=_cmd_gradcheck)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = _build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except VectorBevError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
