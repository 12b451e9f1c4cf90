"""Command-line entry point wiring all modules into reproducible experiments.

Every command takes an explicit seed, writes only under its --out directory,
and drops a run manifest there recording the resolved configuration and the
SHA-256 of every artifact, so identical invocations yield identical outputs.
Exit codes: 0 success, 1 runtime failure, 2 usage or input error.
"""

from __future__ import annotations

import os


def _apply_thread_cap() -> None:
    # OFFSEG_THREADS caps BLAS/OpenMP pools; must be set before numpy loads.
    cap = os.environ.get("OFFSEG_THREADS")
    if cap:
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
        ):
            os.environ.setdefault(var, cap)


_apply_thread_cap()

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import container, data, gradscopes, heads, mining
from . import train as train_mod


class InputError(Exception):
    """Bad user input: maps to exit code 2."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_run_manifest(
    out_dir: Path, command: str, config: dict, seed: int | None, artifacts: list[Path]
) -> None:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    (out_dir / "run.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


def _ensure_out(path_str: str) -> Path:
    out = Path(path_str)
    out.mkdir(parents=True, exist_ok=True)
    return out


# gen-data


def cmd_gen_data(args: argparse.Namespace) -> int:
    out = _ensure_out(args.out)
    try:
        if args.task == "separable":
            config = data.SeparableTaskConfig(
                k=args.k,
                c0=args.c0,
                sigma=args.sigma,
                height=args.height,
                width=args.width,
                n_samples=args.n_samples,
            )
            dataset = data.gen_separable(config, args.seed)
        else:
            priors = _parse_priors(args.context_priors)
            config = data.ContextTaskConfig(
                k=args.k,
                v=args.v,
                c0=args.c0,
                p_amb=args.p_amb,
                sigma=args.sigma,
                cue_width=args.cue_width,
                height=args.height,
                width=args.width,
                n_samples=args.n_samples,
                context_priors=priors,
            )
            dataset = data.gen_context(config, args.seed)
    except data.TaskConfigError as exc:
        raise InputError(str(exc)) from exc

    ds_path = out / "dataset.osg"
    data.write_dataset(dataset, ds_path)
    artifacts = [ds_path, data.manifest_path(ds_path)]
    _write_run_manifest(out, "gen-data", asdict(config), args.seed, artifacts)
    line = f"wrote {dataset.n_samples} samples to {ds_path}"
    if dataset.static_ceiling is not None:
        line += f" (static ceiling {dataset.static_ceiling:.6g})"
    print(line)
    return 0


def _parse_priors(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise InputError(f"expected two comma-separated priors, got {text!r}")
    try:
        return (float(parts[0]), float(parts[1]))
    except ValueError as exc:
        raise InputError(f"bad context priors {text!r}: {exc}") from None


# train


def _resolve_head_config(args: argparse.Namespace) -> train_mod.HeadConfig:
    co = args.co == "on"
    fo = args.fo == "on"
    if args.head == "baseline":
        co = fo = False
    hidden = args.hidden if args.hidden is not None else max(1, args.channels // 2)
    return train_mod.HeadConfig(
        channels=args.channels,
        hidden=hidden,
        class_offset=co,
        feature_offset=fo,
        temperature=args.temperature,
    )


def cmd_train(args: argparse.Namespace) -> int:
    dataset = data.read_dataset(args.data)
    head_cfg = _resolve_head_config(args)
    enc_cfg = train_mod.EncoderConfig(hidden=args.enc_hidden)
    cfg = train_mod.TrainConfig(
        base_lr=args.lr,
        weight_decay=args.weight_decay,
        warmup_iters=args.warmup,
        total_iters=args.iters,
        poly_power=args.poly_power,
        batch_size=args.batch_size,
        seed=args.seed,
        eval_interval=args.eval_interval,
    )
    out = _ensure_out(args.out)

    result = train_mod.train(head_cfg, enc_cfg, dataset, cfg)

    ckpt_path = out / "checkpoint.osc"
    heads.save_checkpoint(
        ckpt_path,
        result.head,
        encoder=result.encoder,
        seed=args.seed,
        extra={
            "train_config": asdict(cfg),
            "encoder_config": asdict(enc_cfg),
            "dataset": str(args.data),
        },
    )
    log_path = out / "log.ndjson"
    with open(log_path, "w") as fh:
        for record in result.log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    metrics_path = out / "metrics.json"
    if result.final_metrics is not None:
        metrics_path.write_text(
            json.dumps(result.final_metrics.to_json_dict(), indent=2, sort_keys=True)
            + "\n"
        )
        print(
            f"final val mIoU {result.final_metrics.miou:.4f} "
            f"accuracy {result.final_metrics.pixel_accuracy:.4f}"
        )
    artifacts = [ckpt_path, heads.manifest_path(ckpt_path), log_path]
    if metrics_path.exists():
        artifacts.append(metrics_path)
    config = {
        "data": str(args.data),
        "head": asdict(head_cfg),
        "encoder": asdict(enc_cfg),
        "train": asdict(cfg),
    }
    _write_run_manifest(out, "train", config, args.seed, artifacts)
    return 0


# eval


def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = heads.load_checkpoint(args.checkpoint)
    dataset = data.read_dataset(args.data)
    report = train_mod.evaluate(checkpoint, dataset, args.split)
    print(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return 0


# mine


def cmd_mine(args: argparse.Namespace) -> int:
    dataset = data.read_dataset(args.data)
    checkpoint = heads.load_checkpoint(args.checkpoint)
    if checkpoint.encoder is None:
        raise InputError(f"checkpoint {args.checkpoint} carries no encoder parameters")
    out = _ensure_out(args.out)
    study = mining.prototype_similarity_study(
        dataset,
        checkpoint.encoder,
        class_id=args.class_id,
        n_images=args.n,
        seed=args.seed,
    )
    csv_path = out / "similarity.csv"
    study.to_csv(csv_path)
    stats_path = out / "stats.json"
    stats_path.write_text(json.dumps(study.summary, indent=2, sort_keys=True) + "\n")
    config = {
        "data": str(args.data),
        "checkpoint": str(args.checkpoint),
        "class": args.class_id,
        "n": args.n,
    }
    _write_run_manifest(out, "mine", config, args.seed, [csv_path, stats_path])
    print(json.dumps(study.summary, sort_keys=True))
    return 0


# heatmap

CELL_PIXELS = 8


def render_heatmap_ppm(sim: np.ndarray, path: Path, cell: int = CELL_PIXELS) -> None:
    """P6 PPM with one cell per matrix entry on a blue-white-red ramp.

    Similarity -1 maps to (0,0,255), 0 to white, +1 to (255,0,0), linearly
    on each half; values are clamped to [-1, 1].
    """
    s = np.clip(np.asarray(sim, dtype=np.float64), -1.0, 1.0)
    pos = s >= 0
    fade_pos = np.rint(255.0 * (1.0 - s)).astype(np.uint8)  # used where s >= 0
    fade_neg = np.rint(255.0 * (1.0 + s)).astype(np.uint8)  # used where s < 0
    r = np.where(pos, np.uint8(255), fade_neg)
    g = np.where(pos, fade_pos, fade_neg)
    b = np.where(pos, fade_pos, np.uint8(255))
    rgb = np.stack([r, g, b], axis=-1).astype(np.uint8)
    img = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def cmd_heatmap(args: argparse.Namespace) -> int:
    try:
        names, sim = mining.read_similarity_csv(args.similarity_csv)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = _ensure_out(args.out)
    ppm_path = out / "heatmap.ppm"
    render_heatmap_ppm(sim, ppm_path)
    config = {"similarity_csv": str(args.similarity_csv), "ids": names}
    _write_run_manifest(out, "heatmap", config, None, [ppm_path])
    print(f"wrote {ppm_path} ({len(names)}x{len(names)} cells)")
    return 0


# grad-check


def cmd_grad_check(args: argparse.Namespace) -> int:
    scopes = list(gradscopes.SCOPES) if args.scope == "all" else [args.scope]
    all_passed = True
    for scope in scopes:
        for seed in range(args.seed, args.seed + args.num_seeds):
            report = gradscopes.run_scope(
                scope, seed, tol=args.tol, fault=args.inject_fault
            )
            all_passed &= report.passed
            print(f"scope={scope} seed={seed} {report}")
    print("grad-check:", "all passed" if all_passed else "FAILED")
    return 0 if all_passed else 1


# params


def cmd_params(args: argparse.Namespace) -> int:
    co = args.co == "on"
    fo = args.fo == "on"
    k, c, ch = args.k, args.channels, args.hidden
    base = k * c
    branch = c * ch + ch + ch * c + c
    total = heads.param_count(k, c, ch, co, fo)
    print(
        json.dumps(
            {
                "k": k,
                "channels": c,
                "hidden": ch,
                "class_offset": co,
                "feature_offset": fo,
                "base": base,
                "branch_each": branch,
                "total": total,
                "overhead": total - base,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


# Parser wiring


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="offseg",
        description="Offset-learning segmentation head: data, training, mining, analysis.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("task", choices=["separable", "context"])
    g.add_argument("--k", type=int, default=6)
    g.add_argument("--v", type=int, default=12, help="codebook size (context task)")
    g.add_argument("--c0", type=int, default=16)
    g.add_argument("--sigma", type=float, default=0.05)
    g.add_argument("--p-amb", type=float, default=0.5, dest="p_amb")
    g.add_argument("--cue-width", type=int, default=1, dest="cue_width")
    g.add_argument("--height", type=int, default=16)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--n-samples", type=int, default=100, dest="n_samples")
    g.add_argument("--context-priors", default="0.5,0.5", dest="context_priors")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a head on a dataset")
    t.add_argument("--data", required=True, help="path to dataset.osg")
    t.add_argument("--head", choices=["baseline", "offset"], default="offset")
    t.add_argument("--co", choices=["on", "off"], default="on")
    t.add_argument("--fo", choices=["on", "off"], default="on")
    t.add_argument("--channels", type=int, default=32)
    t.add_argument("--hidden", type=int, default=None, help="default: channels/2")
    t.add_argument("--enc-hidden", type=int, default=6, dest="enc_hidden")
    t.add_argument("--temperature", type=float, default=1.0)
    t.add_argument("--iters", type=int, default=2000)
    t.add_argument("--warmup", type=int, default=100)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--weight-decay", type=float, default=0.01, dest="weight_decay")
    t.add_argument("--poly-power", type=float, default=0.9, dest="poly_power")
    t.add_argument("--batch-size", type=int, default=8, dest="batch_size")
    t.add_argument("--eval-interval", type=int, default=0, dest="eval_interval")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=["train", "val", "all"], default="val")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("mine", help="prototype similarity study")
    m.add_argument("--data", required=True)
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--class", type=int, required=True, dest="class_id")
    m.add_argument("--n", type=int, default=10)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mine)

    h = sub.add_parser("heatmap", help="render a similarity CSV as a PPM heatmap")
    h.add_argument("--similarity-csv", required=True, dest="similarity_csv")
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_heatmap)

    c = sub.add_parser("grad-check", help="finite-difference gradient verification")
    c.add_argument(
        "--scope", choices=list(gradscopes.SCOPES) + ["all"], default="all"
    )
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--num-seeds", type=int, default=20, dest="num_seeds")
    c.add_argument("--tol", type=float, default=1e-5)
    c.add_argument("--inject-fault", action="store_true", dest="inject_fault")
    c.set_defaults(func=cmd_grad_check)

    q = sub.add_parser("params", help="parameter-count breakdown")
    q.add_argument("--k", type=int, required=True)
    q.add_argument("--channels", type=int, required=True)
    q.add_argument("--hidden", type=int, required=True)
    q.add_argument("--co", choices=["on", "off"], default="on")
    q.add_argument("--fo", choices=["on", "off"], default="on")
    q.set_defaults(func=cmd_params)

    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, container.FormatError, data.TaskConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except train_mod.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
