"""Command-line entry points: synth, train, register, evaluate, curve.

Every command resolves its options from hard defaults, then an optional
flat key=value config file, then explicit flags (flags win), and echoes
the resolved configuration into the output directory so runs are
reproducible from the echo alone.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import data, fieldops, framework, metrics, refiner
from .framework import MODE_BASELINE, MODE_FIREWORK, RegistrationResult, TrainConfig
from .types import DisplacementField


def _parse_ints(text: str) -> tuple[int, ...]:
    try:
        parts = tuple(int(p) for p in text.replace("x", ",").split(","))
    except ValueError:
        raise ValueError(f"expected comma-separated integers, got {text!r}")
    return parts


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(","))


def _read_config_file(path) -> dict[str, str]:
    values = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    resolved = dict(defaults)
    if getattr(args, "config", None):
        for key, raw in _read_config_file(args.config).items():
            if key not in defaults:
                raise ValueError(f"unknown config key: {key}")
            default = defaults[key]
            if isinstance(default, bool):
                resolved[key] = raw.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                resolved[key] = int(raw)
            elif isinstance(default, float):
                resolved[key] = float(raw)
            else:
                resolved[key] = raw
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _echo_config(out_dir: Path, command: str, resolved: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"command={command}"] + [f"{k}={v}" for k, v in sorted(resolved.items())]
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def cmd_synth(args) -> int:
    defaults = {"seed": 0, "count": 5, "shape": "32,32,32", "out": "", "amplitude": 3.5}
    cfg = _resolve(args, defaults)
    if not cfg["out"]:
        raise ValueError("--out is required")
    shape = _parse_ints(cfg["shape"])
    if len(shape) != 3 or any(s < 8 for s in shape):
        raise ValueError(f"shape must be three dims >= 8, got {cfg['shape']!r}")
    out = Path(cfg["out"])
    _echo_config(out, "synth", cfg)
    for i in range(cfg["count"]):
        pair = data.gen_synthetic_pair(cfg["seed"] + i, shape, amplitude=cfg["amplitude"])
        data.save_pair(out / "pairs" / f"{i:03d}", pair)
    print(f"wrote {cfg['count']} pairs to {out / 'pairs'}")
    return 0


def _load_pairs(data_dir: Path) -> list[data.SyntheticPair]:
    pair_dirs = sorted((data_dir / "pairs").glob("*")) if (data_dir / "pairs").is_dir() \
        else sorted(data_dir.glob("*"))
    pairs = [data.load_pair(d) for d in pair_dirs if d.is_dir()]
    if not pairs:
        raise FileNotFoundError(f"no pair directories found under {data_dir}")
    return pairs


def cmd_train(args) -> int:
    defaults = {
        "data": "", "mode": MODE_FIREWORK, "lr": 4e-4, "epochs": 30,
        "lam": 4.0, "window": 9, "seed": 0, "out": "",
    }
    cfg = _resolve(args, defaults)
    if not cfg["data"] or not cfg["out"]:
        raise ValueError("--data and --out are required")
    data_dir = Path(cfg["data"])
    if not data_dir.exists():
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    out = Path(cfg["out"])
    _echo_config(out, "train", cfg)
    pairs = [(p.moving, p.fixed) for p in _load_pairs(data_dir)]
    train_cfg = TrainConfig(lr_init=cfg["lr"], epochs=cfg["epochs"], lam=cfg["lam"],
                            window=cfg["window"], seed=cfg["seed"], mode=cfg["mode"])
    params, log = framework.train(pairs, train_cfg)
    refiner.save_checkpoint(out / "checkpoint.ckpt", params, cfg["mode"])
    framework.write_training_log(out / "train_log.csv", log)
    print(f"trained {cfg['mode']} model on {len(pairs)} pairs for {cfg['epochs']} epochs")
    print(f"final mean loss {log[-1].total:.4f}; checkpoint at {out / 'checkpoint.ckpt'}")
    return 0


def cmd_register(args) -> int:
    defaults = {
        "checkpoint": "", "moving": "", "fixed": "", "steps": 5, "out": "",
        "check_telescoping": False,
    }
    cfg = _resolve(args, defaults)
    for key in ("checkpoint", "moving", "fixed", "out"):
        if not cfg[key]:
            raise ValueError(f"--{key} is required")
    if cfg["steps"] < 1:
        raise ValueError("--steps must be >= 1")
    params, mode = refiner.load_checkpoint(cfg["checkpoint"])
    moving = data.load_volume(cfg["moving"])
    fixed = data.load_volume(cfg["fixed"])
    out = Path(cfg["out"])
    _echo_config(out, "register", cfg)

    infer = framework.infer_firework if mode == MODE_FIREWORK else framework.infer_baseline
    result = infer(params, moving, fixed, cfg["steps"])

    data.save_volume(out / "warped", type(moving)(result.warped[-1], spacing=moving.spacing))
    data.save_volume(out / "field", DisplacementField(result.phis[-1]))
    for t, (phi, inc) in enumerate(zip(result.phis, result.increments), start=1):
        data.save_volume(out / f"field_step_{t:03d}", DisplacementField(phi))
        data.save_volume(out / f"increment_step_{t:03d}", DisplacementField(inc))
    (out / "result.txt").write_text(f"mode={mode}\nsteps={result.steps}\n")

    if cfg["check_telescoping"]:
        if mode != MODE_FIREWORK:
            raise ValueError("telescoping check applies to refinement-mode results only")
        residual = result.phis[-1] + torch.stack(result.increments).sum(dim=0)
        worst = float(residual.abs().max())
        ok = worst < 1e-5
        print(f"telescoping check: max |phi_T + sum eps_t| = {worst:.3e} -> "
              f"{'PASS' if ok else 'FAIL'}")
        if not ok:
            return 1
    print(f"registered in {result.steps} steps; outputs in {out}")
    return 0


def cmd_evaluate(args) -> int:
    defaults = {"result_dir": "", "labels": "", "spacing": "1,1,1", "out": ""}
    cfg = _resolve(args, defaults)
    for key in ("result_dir", "labels", "out"):
        if not cfg[key]:
            raise ValueError(f"--{key.replace('_', '-')} is required")
    result_dir = Path(cfg["result_dir"])
    labels_dir = Path(cfg["labels"])
    spacing = _parse_floats(cfg["spacing"])
    manifest = _read_config_file(result_dir / "result.txt")
    steps = int(manifest["steps"])

    labels_m = data.load_volume(labels_dir / "labels_m")
    labels_f = data.load_volume(labels_dir / "labels_f")
    phis = [data.load_volume(result_dir / f"field_step_{t:03d}").data for t in range(1, steps + 1)]
    warped_labels = [fieldops.warp(labels_m, phi, mode="nearest") for phi in phis]
    result = RegistrationResult(mode=manifest["mode"], phis=phis, increments=[],
                                warped=[], warped_labels=warped_labels)
    rois = sorted(labels_f.roi_ids)
    records = metrics.evaluate(result, labels_f, rois, spacing)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(out, records, rois)
    print(f"wrote {len(records)} step records to {out}")
    return 0


def cmd_curve(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "firework"
    import matplotlib.pyplot as plt

    csvs = args.metrics_csv
    labels = args.labels_for_series or [Path(p).stem for p in csvs]
    if len(labels) != len(csvs):
        raise ValueError("need one series label per metrics CSV")
    fig, ax = plt.subplots(figsize=(6, 4))
    for path, label in zip(csvs, labels):
        rows = metrics.read_metrics_csv(path)
        steps = [r["step"] for r in rows]
        dsc = [r["dsc_mean"] for r in rows]
        (line,) = ax.plot(steps, dsc, marker="o", label=label)
        best = max(range(len(dsc)), key=lambda i: dsc[i])
        ax.plot(steps[best], dsc[best], marker="*", markersize=16, color=line.get_color())
    ax.set_xlabel("refinement step t")
    ax.set_ylabel("mean DSC")
    ax.legend()
    ax.grid(True, alpha=0.3)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, format="svg", metadata={"Date": None})
    plt.close(fig)
    print(f"wrote DSC-vs-step plot to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="firework",
        description="Deformation-field refinement registration toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--shape", type=str, help="D,H,W")
    p.add_argument("--amplitude", type=float)
    p.add_argument("--out", type=str)
    p.add_argument("--config", type=str)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a registration model")
    p.add_argument("--data", type=str)
    p.add_argument("--mode", choices=[MODE_FIREWORK, MODE_BASELINE])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--config", type=str)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register one moving/fixed pair")
    p.add_argument("--checkpoint", type=str)
    p.add_argument("--moving", type=str)
    p.add_argument("--fixed", type=str)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", type=str)
    p.add_argument("--check-telescoping", dest="check_telescoping", action="store_const", const=True)
    p.add_argument("--config", type=str)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="score per-step registration outputs")
    p.add_argument("--result-dir", dest="result_dir", type=str)
    p.add_argument("--labels", type=str, help="directory holding labels_m/labels_f")
    p.add_argument("--spacing", type=str, help="sx,sy,sz in mm")
    p.add_argument("--out", type=str)
    p.add_argument("--config", type=str)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("curve", help="plot DSC vs refinement step")
    p.add_argument("--metrics-csv", dest="metrics_csv", nargs="+", required=True)
    p.add_argument("--labels-for-series", dest="labels_for_series", nargs="*")
    p.add_argument("--out", type=str, required=True)
    p.set_defaults(func=cmd_curve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # uniform nonzero exit with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
