"""Command-line interface: data generation, training, evaluation,
prediction, gradient checking, ablation studies, and benchmarking.

Configuration is a JSON file with "network" and "train" sections plus
flat dotted-key overrides (--network.block_points=512); exit code 1 marks
config/IO errors, exit code 2 a failed gradient check.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import backbone
from .attention import channel_attention, classify, spatial_attention
from .backbone import (NetworkConfig, build_plan, forward, init_model_params,
                       load_checkpoint, save_checkpoint)
from .cloud import PointCloud, generate_synthetic_scene, load_cloud, load_scene_spec, save_cloud
from .errors import ContractViolation, PointsegError
from .tensor import Tensor, gradcheck
from .training import (TrainConfig, cross_entropy_loss, effective_config,
                       evaluate_params, predict_cloud, run_ablation,
                       run_robustness, train, training_blocks)

GRADCHECK_TOLERANCE = 1e-4
_OVERRIDE_RE = re.compile(r"^--(network|train)\.([a-z_0-9]+)=(.*)$", re.S)


# ---------------------------------------------------------------------------
# configuration plumbing


def parse_overrides(extras: list) -> dict:
    """Leftover --section.key=value arguments as {(section, key): value}."""
    overrides = {}
    for raw in extras:
        m = _OVERRIDE_RE.match(raw)
        if m is None:
            raise ContractViolation(
                f"unrecognized argument {raw!r}; overrides look like "
                "--network.block_points=512 or --train.epochs=50")
        section, key, text = m.groups()
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text  # bare strings, e.g. --train.optimizer=sgd
        overrides[(section, key)] = value
    return overrides


def ensure_no_overrides(overrides: dict):
    if overrides:
        keys = [f"{s}.{k}" for s, k in overrides]
        raise ContractViolation(f"this command takes no config overrides: {keys}")


def _env_seed():
    text = os.environ.get("ELGS_SEED")
    if text is None:
        return None
    try:
        return int(text)
    except ValueError:
        raise ContractViolation(f"ELGS_SEED must be an integer, got {text!r}")


def load_configs(args, overrides: dict):
    """File sections + dotted overrides + sugar flags -> config objects.

    Seed precedence: --seed flag, then the config file, then ELGS_SEED."""
    sections = {"network": {}, "train": {}}
    config_path = getattr(args, "config", None)
    if config_path:
        data = json.loads(Path(config_path).read_text())
        if not isinstance(data, dict):
            raise ContractViolation(f"{config_path}: config must be a JSON object")
        unknown = set(data) - set(sections)
        if unknown:
            raise ContractViolation(
                f"{config_path}: unknown config sections {sorted(unknown)}")
        for name in sections:
            part = data.get(name, {})
            if not isinstance(part, dict):
                raise ContractViolation(f"{config_path}: {name!r} must be an object")
            sections[name].update(part)
    for (section, key), value in overrides.items():
        sections[section][key] = value

    if getattr(args, "lr", None) is not None:
        sections["train"]["learning_rate"] = args.lr
    if getattr(args, "epochs", None) is not None:
        sections["train"]["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        sections["train"]["seed"] = args.seed
    elif "seed" not in sections["train"] and _env_seed() is not None:
        sections["train"]["seed"] = _env_seed()

    net = NetworkConfig.from_dict(sections["network"])
    tc = TrainConfig.from_dict(sections["train"])
    return net, tc


def _check_checkpoint_matches(params: dict, config: NetworkConfig):
    expected = {name: p.data.shape
                for name, p in init_model_params(config, 0).items()}
    got = {name: p.data.shape for name, p in params.items()}
    if set(expected) != set(got):
        raise ContractViolation(
            "checkpoint does not match the configured architecture: "
            f"missing {sorted(set(expected) - set(got))}, "
            f"unexpected {sorted(set(got) - set(expected))}")
    wrong = [f"{n} is {got[n]}, config implies {expected[n]}"
             for n in sorted(expected) if expected[n] != got[n]]
    if wrong:
        raise ContractViolation(
            "checkpoint does not match the configured architecture: "
            + "; ".join(wrong))


def _load_model(args, overrides):
    net, tc = load_configs(args, overrides)
    config = effective_config(net, tc)
    params = load_checkpoint(args.model, dtype=config.dtype)
    _check_checkpoint_matches(params, config)
    return params, config, tc


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, overrides) -> int:
    ensure_no_overrides(overrides)
    seed = args.seed
    if seed is None:
        seed = _env_seed()
    if seed is None:
        seed = 0
    scene = load_scene_spec(args.spec)
    cloud = generate_synthetic_scene(scene, seed=seed)
    save_cloud(cloud, args.out, format=args.format)
    print(json.dumps({"out": args.out, "points": cloud.n, "seed": seed}))
    return 0


def cmd_train(args, overrides) -> int:
    net, tc = load_configs(args, overrides)
    cloud = load_cloud(args.data)
    blocks = training_blocks(cloud, net, tc.seed)
    log_path = args.log or f"{args.out}.log.jsonl"
    params, history = train(blocks, net, tc, log_path=log_path)
    save_checkpoint(params, args.out)
    if args.report_dir:
        from .report import save_training_report
        save_training_report(history, args.report_dir)
    last = history[-1]
    print(json.dumps({"checkpoint": args.out, "log": log_path,
                      "epochs": tc.epochs, "loss": last["loss"],
                      "oa": last["oa"], "miou": last["miou"]}))
    return 0


def cmd_eval(args, overrides) -> int:
    params, config, tc = _load_model(args, overrides)
    cloud = load_cloud(args.data)
    blocks = training_blocks(cloud, config, tc.seed)
    report = evaluate_params(params, config, blocks)
    payload = report.to_dict()
    if args.robustness:
        payload["robustness"] = run_robustness(params, config, cloud, tc.seed)
    print(json.dumps(payload, indent=2))
    if args.report_dir:
        from .report import save_eval_report, save_robustness_report
        save_eval_report(payload, args.report_dir)
        if args.robustness:
            save_robustness_report(payload["robustness"], args.report_dir)
    return 0


def cmd_predict(args, overrides) -> int:
    params, config, tc = _load_model(args, overrides)
    cloud = load_cloud(args.cloud)
    pred = predict_cloud(params, config, cloud, tc.seed)
    save_cloud(PointCloud(cloud.xyz, cloud.attrs, pred), args.out,
               format=args.format)
    print(json.dumps({"out": args.out, "points": cloud.n,
                      "classes": np.bincount(pred, minlength=config.num_classes).tolist()}))
    return 0


def gradcheck_config() -> NetworkConfig:
    """Small all-modules architecture the finite-difference suite runs on."""
    return NetworkConfig(
        num_classes=4, feature_width=3, k_neighbors=3, enrich_radius=0.75,
        enrich_mode="gated", layer_scales=(16, 8), layer_radii=(0.5, 1.0),
        group_sizes=(8, 8), channel_widths=(16, 16), decoder_widths=(16, 16),
        gpm_enabled=(True, True), gpm_stack_depth=2, use_attention=True,
        block_points=32)


def cmd_gradcheck(args, overrides) -> int:
    net, tc = load_configs(args, overrides)
    config = net if (args.config or overrides) else gradcheck_config()
    rng = np.random.default_rng(tc.seed)
    xyz = rng.uniform(0.0, 1.0, size=(config.block_points, 3))
    labels = rng.integers(0, config.num_classes, size=config.block_points)
    params = init_model_params(config, tc.seed)
    plan = build_plan(config, xyz)

    started = time.perf_counter()

    def loss_fn(p):
        return cross_entropy_loss(forward(p, config, plan, xyz), labels)

    worst, per_param = gradcheck(loss_fn, params)
    elapsed = time.perf_counter() - started

    by_module: dict = {}
    for name, err in per_param.items():
        module = name.split(".")[0]
        by_module[module] = max(by_module.get(module, 0.0), err)
    for module in sorted(by_module):
        print(f"  {module:<10} max rel err {by_module[module]:.3e}")
    entries = sum(p.data.size for p in params.values())
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"gradcheck {'PASS' if ok else 'FAIL'}: {entries} parameter entries, "
          f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g}), "
          f"{elapsed:.1f}s")
    return 0 if ok else 2


def cmd_ablate(args, overrides) -> int:
    net, tc = load_configs(args, overrides)
    cloud = load_cloud(args.data)
    blocks = training_blocks(cloud, net, tc.seed)
    variants = tuple(v.strip() for v in args.variants.split(",") if v.strip())
    log_dir = args.report_dir
    if log_dir:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
    results = run_ablation(blocks, net, tc, variants, log_dir=log_dir)
    print(json.dumps(results, indent=2))
    if args.report_dir:
        from .report import save_ablation_report
        save_ablation_report(results, args.report_dir)
    return 0


def cmd_bench(args, overrides) -> int:
    net, tc = load_configs(args, overrides)
    config = replace(net, block_points=args.points)
    rng = np.random.default_rng(tc.seed)
    xyz = rng.uniform(0.0, 1.0, size=(args.points, 3))
    features = np.hstack([xyz] + [rng.uniform(0, 1, (args.points, 1))
                                  for _ in range(config.feature_width - 3)])
    params = init_model_params(config, tc.seed)

    rows = []

    def timed(stage, fn):
        t0 = time.perf_counter()
        out = fn()
        rows.append({"stage": stage, "ms": (time.perf_counter() - t0) * 1e3})
        return out

    plan = timed("plan", lambda: build_plan(config, xyz))
    x = Tensor(features.astype(config.dtype))
    enriched = timed("enrich", lambda: backbone.enrich(params, config, plan, x))
    levels = timed("encode", lambda: backbone.encode(params, config, plan, enriched))
    feats = timed("decode", lambda: backbone.decode(params, config, plan, levels))
    if config.use_attention:
        f_sp = timed("spatial_attention", lambda: spatial_attention(params, feats))
        f_ch = timed("channel_attention", lambda: channel_attention(feats))
        timed("classify", lambda: classify(params, f_sp, f_ch))
    rows.append({"stage": "total", "ms": sum(r["ms"] for r in rows)})
    print(json.dumps({"points": args.points, "stages": rows}, indent=2))
    if args.report_dir:
        from .report import save_bench_report
        save_bench_report(rows, args.report_dir)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointseg",
        description="Point cloud semantic segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="JSON file with network/train sections")
        p.add_argument("--seed", type=int, default=None,
                       help="seed override (default: config, then ELGS_SEED)")

    gen = sub.add_parser("gen-data", help="synthesize a labeled scene from a JSON spec")
    gen.add_argument("--spec", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--format", choices=("binary", "ascii"), default="binary")
    common(gen, config=False)
    gen.set_defaults(func=cmd_gen_data)

    tr = sub.add_parser("train", help="fit a model and write checkpoint + log")
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--log", help="JSONL log path (default: <out>.log.jsonl)")
    tr.add_argument("--report-dir")
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    common(tr)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="print metrics for a checkpoint on labeled data")
    ev.add_argument("--model", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--robustness", action="store_true",
                    help="also report OA deltas under scaling and rotation")
    ev.add_argument("--report-dir")
    common(ev)
    ev.set_defaults(func=cmd_eval)

    pr = sub.add_parser("predict", help="write the cloud with predicted labels")
    pr.add_argument("--model", required=True)
    pr.add_argument("--cloud", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--format", choices=("binary", "ascii"), default="binary")
    common(pr)
    pr.set_defaults(func=cmd_predict)

    gc = sub.add_parser("gradcheck", help="finite-difference audit of all gradients")
    common(gc)
    gc.set_defaults(func=cmd_gradcheck)

    ab = sub.add_parser("ablate", help="train and score architecture variants")
    ab.add_argument("--data", required=True)
    ab.add_argument("--variants", default="full,no_cr,no_gpm,no_am")
    ab.add_argument("--report-dir")
    common(ab)
    ab.set_defaults(func=cmd_ablate)

    be = sub.add_parser("bench", help="per-stage forward timing")
    be.add_argument("--points", type=int, default=4096)
    be.add_argument("--report-dir")
    common(be)
    be.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        overrides = parse_overrides(extras)
        return args.func(args, overrides)
    except (PointsegError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
