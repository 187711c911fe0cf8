"""Command-line entry point.

Verbs: train-stage1, train-stage2, train-tradeoff, evaluate, heatmap,
qslice, oracle-suite.  Every run writes a manifest (resolved config, seed,
version, argv) into the output directory, sufficient to reproduce the run
bit-exactly.

Config values come from the --config file, then SAFEAC_<KEY> environment
variables, then --seed.  Exit codes: 0 success, 1 runtime failure,
2 config/usage error, 3 missing or incompatible checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, certify
from .seeding import substream_seed
from .trainer import (
    ConfigError,
    MetricLog,
    PolicyCheckpoint,
    StateError,
    TrainConfig,
    evaluate,
    parse_config_text,
    run_stage1,
    run_stage2,
    run_tradeoff,
    _coerce_value,
)

ENV_PREFIX = "SAFEAC_"


def _load_config(args) -> TrainConfig:
    mapping = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        mapping = parse_config_text(path.read_text())
    for field in dataclasses.fields(TrainConfig):
        env_key = ENV_PREFIX + field.name.upper()
        if env_key in os.environ:
            mapping[field.name] = _coerce_value(field.name, os.environ[env_key])
    if getattr(args, "seed", None) is not None:
        mapping["seed"] = args.seed
    if getattr(args, "mix", None) is not None:
        mapping["tradeoff_mix"] = args.mix
    return TrainConfig.from_mapping(mapping)


def _write_manifest(out_dir: Path, verb: str, config: TrainConfig | None, args_extra: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "verb": verb,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": config.to_mapping() if config is not None else None,
        "seed": config.seed if config is not None else args_extra.get("seed"),
    }
    manifest.update(args_extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _parse_grid(text: str | None, resolution_default: int = 21) -> certify.StateGrid:
    """Grid syntax: 'name:min:max:res,name:min:max:res' with cartpole state
    names x, v, theta, omega (theta in radians)."""
    if not text:
        return certify.cartpole_default_grid(resolution_default)
    names = {"x": 0, "v": 1, "theta": 2, "omega": 3}
    parts = text.split(",")
    if len(parts) != 2:
        raise ConfigError("grid spec needs exactly two axes, e.g. 'x:-2.4:2.4:21,theta:-0.2:0.2:21'")
    dims, mins, maxs, res = [], [], [], []
    for part in parts:
        bits = part.split(":")
        if len(bits) != 4 or bits[0] not in names:
            raise ConfigError(f"bad grid axis {part!r}")
        dims.append(names[bits[0]])
        mins.append(float(bits[1]))
        maxs.append(float(bits[2]))
        res.append(int(bits[3]))
    return certify.StateGrid(
        dims=(dims[0], dims[1]),
        mins=(mins[0], mins[1]),
        maxs=(maxs[0], maxs[1]),
        resolution=(res[0], res[1]),
        base_state=(0.0, 0.0, 0.0, 0.0),
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safeac", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, checkpoint=False, config=True):
        if config:
            p.add_argument("--config", help="path to a key = value config file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint .npz path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")

    p = sub.add_parser("train-stage1", help="train policy + safety critics on the barrier reward")
    common(p)
    p = sub.add_parser("train-stage2", help="restricted policy update from a stage-1 checkpoint")
    common(p, checkpoint=True)
    p = sub.add_parser("train-tradeoff", help="single-stage blended-reward baseline")
    common(p)
    p.add_argument("--mix", type=float, default=None, help="safety weight x in x*r1+(1-x)*r2")

    p = sub.add_parser("evaluate", help="deterministic-policy evaluation of a checkpoint")
    common(p, checkpoint=True, config=False)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--traces", action="store_true", help="also write per-episode records")

    p = sub.add_parser("heatmap", help="critic-value and empirical safe-rate maps")
    common(p, checkpoint=True, config=False)
    p.add_argument("--grid", default=None, help="axis spec 'name:min:max:res,name:min:max:res'")
    p.add_argument("--episodes", type=int, default=10, help="episodes per grid cell")

    p = sub.add_parser("qslice", help="safety-critic value across the action axis")
    common(p, checkpoint=True, config=False)
    p.add_argument("--actions", type=int, default=41, help="action grid size")

    p = sub.add_parser("oracle-suite", help="exact tabular certificate verification")
    common(p, config=False)
    p.add_argument("--instances", type=int, default=100)
    return parser


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return _dispatch(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except StateError as e:
        print(f"error: state: {e}", file=sys.stderr)
        return 3
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: runtime: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    out = Path(args.out)
    verb = args.verb

    if verb == "train-stage1":
        config = _load_config(args)
        _write_manifest(out, verb, config, {})
        ckpt = run_stage1(config, out_dir=out)
        _final_eval(ckpt, out)
        return 0

    if verb == "train-stage2":
        config = _load_config(args)
        base = PolicyCheckpoint.load(args.checkpoint)
        _write_manifest(out, verb, config, {"checkpoint": str(args.checkpoint)})
        ckpt = run_stage2(base, config, out_dir=out)
        _final_eval(ckpt, out)
        return 0

    if verb == "train-tradeoff":
        config = _load_config(args)
        if config.tradeoff_mix is None:
            raise ConfigError("train-tradeoff needs --mix or tradeoff_mix in the config")
        _write_manifest(out, verb, config, {})
        ckpt = run_tradeoff(config, out_dir=out)
        _final_eval(ckpt, out)
        return 0

    if verb == "evaluate":
        ckpt = PolicyCheckpoint.load(args.checkpoint)
        seed = args.seed if args.seed is not None else 0
        _write_manifest(out, verb, None, {
            "checkpoint": str(args.checkpoint), "episodes": args.episodes, "seed": seed,
        })
        if args.traces:
            report, records = evaluate(ckpt, n_episodes=args.episodes, seed=seed, record_episodes=True)
            with (out / "episodes.jsonl").open("w") as fh:
                for rec in records:
                    fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
        else:
            report = evaluate(ckpt, n_episodes=args.episodes, seed=seed)
        (out / "eval.json").write_text(report.to_json() + "\n")
        print(report.to_json())
        return 0

    if verb == "heatmap":
        ckpt = PolicyCheckpoint.load(args.checkpoint)
        seed = args.seed if args.seed is not None else 0
        grid = _parse_grid(args.grid)
        _write_manifest(out, verb, None, {
            "checkpoint": str(args.checkpoint), "grid": args.grid,
            "episodes_per_cell": args.episodes, "seed": seed,
        })
        k_max = ckpt.config.episode_cap
        vmap = certify.value_heatmap(ckpt, grid)
        rmap, smap = certify.empirical_safe_map(ckpt, grid, args.episodes, k_max, seed)
        meta = {
            "axis0": f"dim {grid.dims[0]} from {grid.mins[0]} to {grid.maxs[0]} n={grid.resolution[0]}",
            "axis1": f"dim {grid.dims[1]} from {grid.mins[1]} to {grid.maxs[1]} n={grid.resolution[1]}",
            "k_max": k_max,
        }
        certify.export_matrix(out / "value_map.txt", vmap, meta)
        certify.export_matrix(out / "return_map.txt", rmap, meta)
        certify.export_matrix(out / "safe_rate_map.txt", smap, meta)
        result = {
            "spearman_value_vs_safe_rate": certify.consistency_stats(vmap, smap),
            "spearman_value_vs_return": certify.consistency_stats(vmap, rmap),
        }
        (out / "consistency.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        print(json.dumps(result, sort_keys=True))
        return 0

    if verb == "qslice":
        ckpt = PolicyCheckpoint.load(args.checkpoint)
        if ckpt.config.env_id != "navigation":
            raise StateError("qslice expects a navigation checkpoint")
        _write_manifest(out, verb, None, {"checkpoint": str(args.checkpoint), "actions": args.actions})
        grid = np.linspace(-1.0, 1.0, args.actions)
        scenarios = avoidance_scenarios()
        summary = []
        for i, (label, obs, clear_side) in enumerate(scenarios):
            slice_values = certify.q_action_slice(ckpt, obs, grid)
            certify.export_matrix(
                out / f"qslice_{i:02d}.txt",
                np.column_stack([grid, slice_values]),
                {"scenario": label, "clear_side": clear_side, "columns": "action value"},
            )
            best = float(grid[int(np.argmax(slice_values))])
            summary.append({
                "scenario": label,
                "clear_side": clear_side,
                "argmax_action": best,
                "turns_clear": bool(best > 0) if clear_side == "left" else bool(best < 0),
            })
        (out / "qslice_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        print(json.dumps(summary, sort_keys=True))
        return 0

    if verb == "oracle-suite":
        seed = args.seed if args.seed is not None else 0
        _write_manifest(out, verb, None, {"instances": args.instances, "seed": seed})
        result = certify.theorem_suite(seed=seed, instances=args.instances)
        (out / "oracle_report.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        total = result["value_form_counterexamples"] + result["action_form_counterexamples"]
        print(json.dumps(result, sort_keys=True))
        print(f"counterexamples: {total}")
        return 0 if total == 0 else 1

    raise ConfigError(f"unknown verb {verb!r}")


def _final_eval(ckpt: PolicyCheckpoint, out: Path) -> None:
    report = evaluate(ckpt, n_episodes=ckpt.config.eval_episodes,
                      seed=substream_seed(ckpt.config.seed, "final-eval", 0))
    (out / "eval.json").write_text(report.to_json() + "\n")


def avoidance_scenarios():
    """Constructed rangefinder observations: a blocked heading with one clear
    side, in normalised observation space.  Returns (label, obs, clear_side)."""
    from .envs.navigation import normalize_features

    scenarios = []
    rng = np.random.default_rng(7)
    for i in range(10):
        clear_side = "left" if i % 2 == 0 else "right"
        near = rng.uniform(0.6, 0.9)
        far = rng.uniform(6.0, 9.5)
        rays = np.full(9, far)
        # rays run right (-60 deg) to left (+60 deg); block center and the
        # non-clear side.
        if clear_side == "left":
            rays[0:6] = near + rng.uniform(0.0, 0.3, size=6)
        else:
            rays[3:9] = near + rng.uniform(0.0, 0.3, size=6)
        x, y = rng.uniform(3.5, 6.5, size=2)
        gamma = rng.uniform(-math.pi, math.pi)
        raw = np.concatenate([
            rays,
            [0.0, 0.9 * math.cos(gamma), 0.9 * math.sin(gamma), x, y, gamma, 8.0, 8.0],
        ])
        scenarios.append((f"blocked_ahead_clear_{clear_side}_{i}", normalize_features(raw), clear_side))
    return scenarios


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
