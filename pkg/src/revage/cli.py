"""Single entry-point command wiring the modules into reproducible runs.

Subcommands: ``synth`` builds a paired dataset, ``train`` optimizes a model
on it, ``infer`` re-ages one clip, ``eval`` scores a corpus, ``report``
renders metric tables and charts. Every run writes a resolved-config
snapshot under its output root before doing work; errors come back as a
JSON object on stderr with exit code 1 (runtime) or 2 (usage).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

from . import __version__
from .errors import RevageError, UsageError

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems surface as JSON, exit code 2
        raise UsageError(message)


def _load_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid JSON: {p}: {e}") from e


def _merge(dataclass_type, file_section: dict, overrides: dict):
    """defaults <- config file <- explicitly passed CLI flags."""
    valid = {f.name for f in dataclass_fields(dataclass_type)}
    merged = {k: v for k, v in file_section.items() if k in valid}
    merged.update({k: v for k, v in overrides.items() if k in valid and v is not None})
    return dataclass_type(**merged)


def _ages_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(a) for a in text.split(","))
    except ValueError as e:
        raise UsageError(f"expected a comma-separated number list, got {text!r}") from e


def _ints_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(a) for a in text.split(","))
    except ValueError as e:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}") from e


def _snapshot(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8"
    )


def cmd_synth(args) -> int:
    from .synthpipeline import PipelineConfig, build_dataset

    file_cfg = _load_json_config(args.config)
    overrides = {
        "subjects": args.subjects,
        "ages": args.ages,
        "keyframes_per_video": args.keyframes,
        "recursion_depth": args.recursion_depth,
        "resolution": args.resolution,
        "sharpness_threshold": args.sharpness_threshold,
        "seed": args.seed,
    }
    config = _merge(PipelineConfig, file_cfg, overrides)
    out = Path(args.out)
    _snapshot(out, {"command": "synth", "pipeline": config.to_dict(), "workers": args.workers})
    manifest = build_dataset(config, out, workers=args.workers)
    print(
        json.dumps(
            {
                "subjects": len(manifest.subjects),
                "clips": sum(len(s.videos) for s in manifest.subjects),
                "rejected": len(manifest.errata),
                "out": str(out),
            }
        )
    )
    return 0


def cmd_train(args) -> int:
    from .datamodel import load_manifest
    from .generator import GeneratorConfig
    from .training import LossWeights, TrainConfig, Trainer

    data_root = Path(args.data)
    manifest = load_manifest(data_root)
    file_cfg = _load_json_config(args.config)

    train_overrides = {
        "learning_rate": args.learning_rate,
        "iterations": args.iterations,
        "batch_size": args.batch_size,
        "delta_t_choices": args.delta_t_choices,
        "reverse_prob": args.reverse_prob,
        "seed": args.seed,
        "window_frames": args.window_frames,
        "checkpoint_every": args.checkpoint_every,
    }
    gen_overrides = {
        "resolution": args.resolution
        if args.resolution is not None
        else int(manifest.creation.get("resolution", 64)),
        "base_channels": args.base_channels,
        "hidden_channels": args.hidden_channels,
        "depth": args.depth,
        "leaky_slope": args.leaky_slope,
    }
    weight_overrides = {
        "l1": args.lambda_l1,
        "adv_image": args.lambda_adv_image,
        "adv_video": args.lambda_adv_video,
        "perceptual": args.lambda_perceptual,
    }
    train_config = _merge(TrainConfig, file_cfg.get("train", {}), train_overrides)
    gen_config = _merge(GeneratorConfig, file_cfg.get("generator", {}), gen_overrides)
    weights = _merge(LossWeights, file_cfg.get("weights", {}), weight_overrides)

    run_dir = Path(args.out)
    _snapshot(
        run_dir,
        {
            "command": "train",
            "data": str(data_root),
            "train": train_config.to_dict(),
            "generator": gen_config.to_dict(),
            "weights": weights.to_dict(),
            "resume": args.resume,
        },
    )
    trainer = Trainer(manifest, data_root, gen_config, train_config, weights, run_dir=run_dir)
    if args.resume:
        trainer.restore(args.resume)
        log.info("resumed from %s at iteration %d", args.resume, trainer.iteration)
    remaining = max(train_config.iterations - trainer.iteration, 0)
    trainer.run(remaining)
    print(
        json.dumps(
            {
                "iterations": trainer.iteration,
                "final": trainer.history[-1] if trainer.history else None,
                "checkpoint": str(run_dir / "ckpt_final.npz"),
            }
        )
    )
    return 0


def cmd_infer(args) -> int:
    import numpy as np
    from PIL import Image

    from .checkpoint import load_generator
    from .datamodel import encode_frame, load_clip, save_clip
    from .generator import generate_video

    model, _meta = load_generator(args.ckpt)
    clip = load_clip(args.clip)
    if args.input_age is not None:
        input_age = float(args.input_age)
    elif clip.apparent_age is not None:
        input_age = clip.apparent_age.years
    else:
        raise UsageError("clip metadata has no apparent age; pass --input-age")

    out = Path(args.out)
    _snapshot(
        out,
        {
            "command": "infer",
            "ckpt": str(args.ckpt),
            "clip": str(args.clip),
            "input_age": input_age,
            "target_age": args.target_age,
            "interval": args.interval,
        },
    )
    result = generate_video(model, clip, input_age, args.target_age, interval=args.interval)
    save_clip(result, out / "clip")

    # side-by-side grid: input row over output row, up to 6 sampled frames
    count = min(6, clip.frame_count)
    picks = np.linspace(0, clip.frame_count - 1, count).round().astype(int)
    top = np.concatenate([encode_frame(clip.frames[i].data) for i in picks], axis=1)
    bottom = np.concatenate([encode_frame(result.frames[i].data) for i in picks], axis=1)
    Image.fromarray(np.concatenate([top, bottom], axis=0)).save(out / "grid.png")
    print(json.dumps({"frames": result.frame_count, "out": str(out)}))
    return 0


def cmd_eval(args) -> int:
    from .metrics import evaluate_corpus

    out = Path(args.out)
    _snapshot(
        out,
        {
            "command": "eval",
            "ckpt": str(args.ckpt),
            "data": str(args.data),
            "targets": list(args.targets),
            "interval": args.interval,
            "debug_roi": args.debug_roi,
        },
    )
    summary = evaluate_corpus(
        args.data,
        args.ckpt,
        targets=args.targets,
        out_dir=out,
        interval=args.interval,
        debug_roi=args.debug_roi,
    )
    print(json.dumps({"rows": summary["rows"], "out": str(out)}))
    return 0


def cmd_report(args) -> int:
    from .reporting import write_report

    out = Path(args.out)
    _snapshot(out, {"command": "report", "rows": str(args.rows)})
    written = write_report(args.rows, out)
    print(json.dumps({"written": [str(p) for p in written]}))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="revage", description=__doc__)
    parser.add_argument("--version", action="version", version=f"revage {__version__}")
    parser.add_argument("--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a paired synthetic dataset")
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int)
    p.add_argument("--ages", type=_ages_list)
    p.add_argument("--keyframes", type=int)
    p.add_argument("--recursion-depth", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--sharpness-threshold", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a re-aging model on a dataset")
    p.add_argument("--data", required=True, help="dataset root containing manifest.json")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON with train/generator/weights sections")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--delta-t-choices", type=_ints_list)
    p.add_argument("--reverse-prob", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--window-frames", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--hidden-channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--leaky-slope", type=float)
    p.add_argument("--lambda-l1", type=float)
    p.add_argument("--lambda-adv-image", type=float)
    p.add_argument("--lambda-adv-video", type=float)
    p.add_argument("--lambda-perceptual", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="re-age one clip with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--clip", required=True, help="clip directory")
    p.add_argument("--target-age", type=float, required=True)
    p.add_argument("--input-age", type=float)
    p.add_argument("--interval", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a corpus with the temporal metrics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--targets", type=_ages_list, required=True)
    p.add_argument("--interval", type=int, default=1)
    p.add_argument("--debug-roi", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render metric rows into tables and charts")
    p.add_argument("--rows", required=True, help="rows.csv from eval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        return args.func(args)
    except UsageError as e:
        print(json.dumps({"error": str(e), "kind": "usage"}), file=sys.stderr)
        return 2
    except RevageError as e:
        print(json.dumps({"error": str(e), "kind": "runtime"}), file=sys.stderr)
        return 1
    except Exception as e:  # anything unexpected is still a runtime failure
        log.exception("unhandled failure")
        print(
            json.dumps({"error": f"{type(e).__name__}: {e}", "kind": "runtime"}), file=sys.stderr
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
