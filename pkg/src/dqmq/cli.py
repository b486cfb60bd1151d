"""Command-line entry point: ``dqmq <subcommand> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric error.
Machine-readable output goes to files under ``--out``; stdout is a short
human-readable summary.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataquality as dq
from .checkpoint import from_bytes, save_checkpoint
from .errors import CheckpointError, ConfigError, FormatError, NumericError, ProtocolError
from .report import (SENSITIVITY_HEADER, argmin_amplitude, csv_text, emit_figure_data, evaluate,
                     perturbation_curves, sensitivity_vs_quality)
from .sensitivity import QuadraticSurface, hutchinson, perturbation_direction, profile
from .trainer import TrainConfig, fit, write_history

logger = logging.getLogger("dqmq")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _levels(text: str) -> list:
    levels = [int(v) for v in text.split(",") if v.strip()]
    for lvl in levels:
        if lvl not in dq.LEVELS:
            raise ConfigError(f"unknown quality level {lvl}; expected one of {list(dq.LEVELS)}")
    return levels


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad number list {text!r}") from e


def _load_bundle(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"checkpoint not found: {p}")
    return from_bytes(p.read_bytes())


def _load_json(text_or_path: str):
    p = Path(text_or_path)
    try:
        return json.loads(p.read_text()) if p.is_file() else json.loads(text_or_path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {text_or_path!r}: {e}") from e


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_prepare_data(args) -> int:
    n = args.per_level
    if n < 1:
        raise ConfigError("--per-level must be >= 1")
    if args.base == "synth":
        base = dq.synth_dataset({"samples": args.base_samples or len(dq.LEVELS) * n}, seed=args.seed)
    else:
        if not Path(args.base).exists():
            raise ConfigError(f"base dataset not found: {args.base}")
        base = dq.load_cifar_binary(args.base)
    mixed = dq.build_mixed(base, n, seed=args.seed)
    out = Path(args.out)
    mixed.save(out, extra={"base": args.base, "per_level": n, "seed": args.seed})
    if args.test_per_level:
        if args.base != "synth":
            raise ConfigError("--test-per-level needs the synth base")
        tbase = dq.synth_dataset({"samples": len(dq.LEVELS) * args.test_per_level}, seed=args.seed + 1000)
        dq.build_mixed(tbase, args.test_per_level, seed=args.seed + 1).save(out / "test")
    print(f"wrote {len(mixed)} samples to {out}")
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    out = Path(args.out)
    if args.model.startswith("quadratic:"):
        diag = _floats(args.model.split(":", 1)[1])
        est = hutchinson(QuadraticSurface(diag), args.probes, args.seed)
        rows = [(0, name, t, e) for name, (t, e) in est.items()]
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(csv_text(SENSITIVITY_HEADER, rows))
        for _, name, t, e in rows:
            print(f"{name}: trace {t:.6g} +- {e:.3g}")
        return EXIT_OK
    model, _, _ = _load_bundle(args.model)
    data = dq.Dataset.load(args.data)
    analysis = sensitivity_vs_quality(model, data, _levels(args.levels), args.probes, args.seed, args.batch)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_figure_data(analysis, out)
    rho = analysis["spearman"]
    lv = analysis["levels"]
    print("spearman vs level %d: %s" % (lv[0], ", ".join(f"{b}={rho[lv[0]][b]:.3f}" for b in lv)))
    return EXIT_OK


def cmd_train(args) -> int:
    raw = _load_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = TrainConfig.from_dict(raw)
    data = dq.Dataset.load(args.data)
    test = dq.Dataset.load(args.test) if args.test else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = "fixed" if cfg.fixed_bits is not None else "dqmq"
    res = fit(None, None, data, cfg, eval_set=test, out_dir=out, mode=mode)
    blob = save_checkpoint(res.model, out / "model.ckpt", policy=res.policy,
                           metadata={"config": cfg.to_dict()})
    write_history(res.history, out / "history.jsonl")
    _write_json(out / "config.json", cfg.to_dict())
    last = res.history[-1] if res.history else {}
    if res.policy is not None and "pools" in last:
        emit_figure_data({"kind": "histogram", "histogram": last["decisions"], "pools": last["pools"]},
                         out / "decisions.csv")
    print(f"trained {cfg.epochs} epochs; final loss {last.get('loss', float('nan')):.4f}; "
          f"checkpoint sha256 {hashlib.sha256(blob).hexdigest()[:16]}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, policy, _ = _load_bundle(args.model)
    if args.policy:
        _, policy, _ = _load_bundle(args.policy)
        if policy is None:
            raise ConfigError(f"{args.policy} holds no policy")
    if args.bits is not None:
        policy = None
    data = dq.Dataset.load(args.data)
    rep = evaluate(model, policy, data, bits=args.bits)
    _write_json(Path(args.out), rep.to_dict())
    levels = ", ".join(f"{k}:{v:.1f}" for k, v in rep.per_level.items())
    print(f"overall {rep.overall:.2f}% ({levels}); compression {rep.compression:.2f}x")
    return EXIT_OK


def cmd_perturb_sweep(args) -> int:
    model, _, _ = _load_bundle(args.model)
    data = dq.Dataset.load(args.data)
    amps = sorted(set(_floats(args.amplitudes)) | {0.0})
    raw = data.at_level(dq.RAW) if np.any(data.levels == dq.RAW) else data
    raw = raw.head(args.batch)
    if args.direction == "top":
        direction = perturbation_direction(model, seed=args.seed, kind="top", batch=(raw.images, raw.labels))
    else:
        traces = None
        if args.direction == "trace":
            traces = profile(model, (raw.images, raw.labels), args.probes, args.seed).traces
        direction = perturbation_direction(model, traces, seed=args.seed, kind="trace")
    analysis = perturbation_curves(model, data, _levels(args.levels), amps, direction, args.batch)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    emit_figure_data(analysis, out)
    for lvl, curve in analysis["curves"].items():
        print(f"level {lvl}: argmin amplitude {argmin_amplitude(curve):g}")
    return EXIT_OK


def cmd_deploy_sim(args) -> int:
    from .deploysim import Server, count_swaps, simulate_session, write_log

    schedule = _load_json(args.schedule)
    if not isinstance(schedule, list) or not schedule:
        raise ConfigError("schedule must be a non-empty JSON list of {level, batches}")
    model, policy, _ = _load_bundle(args.model)
    if policy is None:
        raise ConfigError(f"{args.model} holds no policy; deploy-sim needs a trained policy")
    data = dq.Dataset.load(args.data)
    server = Server(model, policy, data)
    log = simulate_session(args.mode, schedule, args.seed, server, data, batch_size=args.batch,
                           tau=args.tau, window=args.window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_log(log, out / "session.jsonl")
    segs = [e for e in log if e["event"] == "segment"]
    _write_json(out / "summary.json", {"mode": args.mode, "swaps": count_swaps(log), "segments": segs})
    print(f"{args.mode}: {count_swaps(log)} swaps over {len(segs)} segments")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="default 0; train defaults to the config's seed")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="dqmq", description="Quality-aware mixed-precision quantization tools")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare-data", parents=[common], help="build a mixed-quality dataset")
    s.add_argument("--base", required=True, help="'synth' or a CIFAR-10 binary file/directory")
    s.add_argument("--per-level", type=int, required=True)
    s.add_argument("--base-samples", type=int, default=0, help="synth base size (default 5 x per-level)")
    s.add_argument("--test-per-level", type=int, default=0, help="also write a synthetic test split")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare_data)

    s = sub.add_parser("sensitivity", parents=[common], help="per-layer traces across quality levels")
    s.add_argument("--model", required=True, help="checkpoint, or quadratic:d1,d2,... test fixture")
    s.add_argument("--data")
    s.add_argument("--probes", type=int, default=8)
    s.add_argument("--levels", default="1,2,3,4,5")
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sensitivity)

    s = sub.add_parser("train", parents=[common], help="train a model (DQMQ, or fixed bits via config)")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--test")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="per-level accuracy and compression")
    s.add_argument("--model", required=True)
    s.add_argument("--policy")
    s.add_argument("--bits", type=int)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("perturb-sweep", parents=[common], help="loss along a weight direction per level")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--amplitudes", default="-1,-0.5,0,0.5,1")
    s.add_argument("--levels", default="2,5")
    s.add_argument("--direction", choices=("trace", "uniform", "top"), default="trace")
    s.add_argument("--probes", type=int, default=8)
    s.add_argument("--batch", type=int, default=512)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_perturb_sweep)

    s = sub.add_parser("deploy-sim", parents=[common], help="simulate edge/server updates")
    s.add_argument("--mode", choices=("full", "partial", "skeleton"), default="skeleton")
    s.add_argument("--schedule", required=True, help="JSON list (inline or file) of {level, batches}")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--tau", type=float, default=0.3)
    s.add_argument("--window", type=int, default=8)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_deploy_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is None and args.func is not cmd_train:
        args.seed = 0
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, FormatError, CheckpointError, ProtocolError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
