"""Command-line interface: ``promptseg segment | relevance | evaluate``.

Exit codes: 0 ok, 2 invalid arguments, 3 backend failure, 4 no signal,
5 dataset not found.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .backends import PromptSet
from .config import METHODS, PipelineConfig
from .errors import (
    BackendUnavailableError,
    DatasetNotFoundError,
    NoSignalError,
    NonFiniteRelevanceError,
)

log = logging.getLogger("promptseg")

EXIT_OK, EXIT_ARGS, EXIT_BACKEND, EXIT_NO_SIGNAL, EXIT_DATASET = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _views(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON pipeline config; flags override it")
    p.add_argument("--backend", help="vision-language backend (mock, clip)")
    p.add_argument("--views", type=_views, help="comma-separated: identity,hflip,contrast,crop")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--tau", type=float, help="sampling temperature")
    p.add_argument("--weights", help="weights path for the real backend")
    p.add_argument("-v", "--verbose", action="store_true")


def _image_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("image", type=Path)
    p.add_argument("--prompts", nargs="+", required=True, help="category labels to segment")
    p.add_argument("--distractors", nargs="*", help="distractor labels (default: stock list)")
    p.add_argument("--mock-scene", type=Path,
                   help="label PNG with JSON sidecar giving the mock backend its ground truth")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    seg = sub.add_parser("segment", help="segment an image for the given prompts")
    _image_args(seg)
    _shared(seg)
    seg.add_argument("--method", choices=METHODS)
    seg.add_argument("--threshold", type=float, help="binarisation threshold (threshold method)")
    seg.add_argument("--clicks", type=int, help="positive clicks per category (interactive)")
    seg.add_argument("--budget", type=float, help="soft time limit in seconds for the cluster method")

    rel = sub.add_parser("relevance", help="compute refined relevance maps only")
    _image_args(rel)
    _shared(rel)
    rel.add_argument("--render", action="store_true", help="also write per-category heatmap PNGs")

    ev = sub.add_parser("evaluate", help="benchmark on a dataset")
    _shared(ev)
    ev.add_argument("--dataset", required=True, choices=["voc", "imagenet-seg", "synthetic"])
    ev.add_argument("--root", type=Path, help="dataset root (or PROMPTSEG_*_ROOT)")
    ev.add_argument("--subset", type=int, help="evaluate a seeded random subset of this size")
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--method", choices=METHODS)
    ev.add_argument("--clicks", type=int)
    ev.add_argument("--k-mode", choices=["gt", "k1", "unknown"])
    ev.add_argument("--sweep", type=Path,
                    help="JSON list of override objects, one benchmark row per entry")
    ev.add_argument("--cache", type=Path, help="result cache (default <out>/cache.jsonl)")
    return parser


def _config(args, base: PipelineConfig | None = None) -> PipelineConfig:
    if args.config is not None:
        if not args.config.is_file():
            raise UsageError(f"config file not found: {args.config}")
        config = PipelineConfig.load(args.config)
    else:
        config = base or PipelineConfig()
    overrides = {
        "backend": args.backend, "views": args.views, "seed": args.seed, "out": args.out,
        "tau": args.tau, "method": getattr(args, "method", None),
        "threshold": getattr(args, "threshold", None), "clicks": getattr(args, "clicks", None),
        "budget": getattr(args, "budget", None), "k_mode": getattr(args, "k_mode", None),
        "distractors": getattr(args, "distractors", None),
    }
    backend_options = dict(config.backend_options)
    if getattr(args, "mock_scene", None) is not None:
        if not args.mock_scene.is_file():
            raise UsageError(f"mock scene not found: {args.mock_scene}")
        backend_options["scene"] = str(args.mock_scene)
    if args.weights:
        backend_options["weights_path"] = args.weights
    overrides["backend_options"] = backend_options
    try:
        return config.merged(**overrides)
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from exc


def _load_image(path: Path):
    from .storage import load_image

    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    try:
        return load_image(path)
    except Exception as exc:  # noqa: BLE001 - PIL raises several types
        raise UsageError(f"cannot read image {path}: {exc}") from exc


def _refine(args, config, image):
    from .pipeline import build_backend
    from .tta import refine

    backend = build_backend(config)
    prompts = PromptSet.create(args.prompts, config.distractors, config.template)
    return backend, refine(backend, image, prompts, config.views, config.grid, config.seed,
                           config.calibrate)


def cmd_segment(args) -> int:
    from .pipeline import build_backend, run
    from .plotting import save_overlay
    from .storage import save_mask, save_rmz, write_jsonl

    config = _config(args)
    image = _load_image(args.image)
    out = Path(config.out)
    stem = args.image.stem
    backend = build_backend(config)
    result = run(image, args.prompts, config, backend=backend)
    save_mask(out / f"{stem}_mask.png", result.mask)
    save_rmz(out / f"{stem}.rmz", result.refined)
    save_overlay(out / f"{stem}_overlay.png", image, result.mask)
    config.save(out / f"{stem}_config.json")
    records = [{"event": "config", "digest": config.digest(), "seed": config.seed}]
    records += [{"event": "iteration", **h} for h in result.history]
    records += [{"event": "click", **c} for c in result.transcript]
    records.append({"event": "done", "method": config.method, "flags": result.mask.flags})
    write_jsonl(out / f"{stem}_run.jsonl", records)
    print(f"wrote {out / (stem + '_mask.png')}")
    return EXIT_OK


def cmd_relevance(args) -> int:
    from .plotting import render_heatmaps
    from .storage import save_rmz

    config = _config(args)
    image = _load_image(args.image)
    out = Path(config.out)
    _, refined = _refine(args, config, image)
    path = save_rmz(out / f"{args.image.stem}.rmz", refined)
    if args.render:
        render_heatmaps(image, refined, out, stem=args.image.stem)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import format_table, load_dataset, run_benchmark, select_subset
    from .plotting import render_report
    from .synthetic import synthetic_config

    base = synthetic_config() if args.dataset == "synthetic" else None
    config = _config(args, base)
    records = load_dataset(args.dataset, args.root)
    records = select_subset(records, args.subset, config.seed)
    configs = [config]
    if args.sweep is not None:
        if not args.sweep.is_file():
            raise UsageError(f"sweep file not found: {args.sweep}")
        try:
            configs = [config.merged(**row) for row in json.loads(args.sweep.read_text())]
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad sweep file: {exc}") from exc
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = args.cache or out / "cache.jsonl"
    reports = run_benchmark(records, configs, cache, config.seed, args.workers)
    (out / "report.json").write_text(json.dumps(
        {"dataset": args.dataset, "images": [r.image_id for r in records],
         "reports": [r.to_dict(include_runtime=False) for r in reports]}, indent=2, sort_keys=True))
    (out / "timing.json").write_text(json.dumps([r.runtime for r in reports], indent=2))
    table = format_table(reports)
    (out / "report.txt").write_text(table + "\n")
    render_report(reports, out / "report.png")
    print(table)
    return EXIT_OK


COMMANDS = {"segment": cmd_segment, "relevance": cmd_relevance, "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"promptseg: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (BackendUnavailableError, NonFiniteRelevanceError) as exc:
        print(f"promptseg: backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except NoSignalError as exc:
        print(f"promptseg: no signal: {exc}", file=sys.stderr)
        return EXIT_NO_SIGNAL
    except DatasetNotFoundError as exc:
        print(f"promptseg: dataset not found: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except ValueError as exc:
        print(f"promptseg: error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
