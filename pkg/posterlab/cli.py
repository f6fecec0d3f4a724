"""Command-line entry point: ``posterlab <command> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
from pathlib import Path

import torch

from posterlab.data import DatasetConfig, export_sample, gen_dataset, load_dataset, save_dataset, sample_seed
from posterlab.experiment import (
    AcceptanceError,
    EvalFlags,
    ExperimentSpec,
    ablate_cpe,
    ablate_data_scale,
    ablate_extension,
    eval_suite,
    train,
    write_report,
)
from posterlab.flow import FlowConfig, generate
from posterlab.model import load_checkpoint

logger = logging.getLogger("posterlab")

THREADS_ENV = "POSTERLAB_NUM_THREADS"


def _parse_ids(text: str | None, n: int) -> list[int]:
    if not text:
        return list(range(n))
    ids = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            ids.extend(range(int(lo), int(hi) + 1))
        else:
            ids.append(int(part))
    bad = [i for i in ids if not 0 <= i < n]
    if bad:
        raise ValueError(f"sample ids out of range [0, {n}): {bad}")
    return ids


def cmd_gen_data(args) -> int:
    cfg = DatasetConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else DatasetConfig()
    dataset = gen_dataset(cfg, args.count, args.seed)
    save_dataset(dataset, args.out)
    if args.export:
        for i, sample in enumerate(dataset[: args.export]):
            export_sample(sample, Path(args.out).with_suffix(""), name=f"{i:05d}")
    logger.info("wrote %d samples to %s", len(dataset), args.out)
    return 0


def cmd_train(args) -> int:
    train(ExperimentSpec.from_file(args.spec), args.out, progress=not args.quiet)
    return 0


def cmd_sample(args) -> int:
    model, info = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.dataset)
    ids = _parse_ids(args.ids, len(dataset))
    cfg = FlowConfig(n_sample_steps=args.steps, paste_product=args.paste)
    samples = [dataset[i] for i in ids]
    seeds = [sample_seed(args.seed, i) for i in ids]
    cpe = info.extra.get("cpe_enabled", True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for gen in generate(model, samples, cfg, seeds, cpe, sample_ids=ids):
        gen.save(out)
    logger.info("wrote %d images to %s", len(ids), out)
    return 0


def cmd_eval(args) -> int:
    flags = EvalFlags(n_steps=args.steps, paste_both=args.paste_both, seed=args.seed, limit=args.limit)
    report = eval_suite(args.ckpt, load_dataset(args.testset), flags)
    write_report(report.to_dict(), args.out)
    print(report.table())
    return 0


def _ablation(fn):
    def run(args) -> int:
        report = fn(ExperimentSpec.from_file(args.spec), args.out, progress=not args.quiet)
        print(report.table())
        report.require()
        return 0

    return run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posterlab", description="Desk-scale poster inpainting lab.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic poster dataset")
    p.add_argument("--config", type=Path, help="DatasetConfig JSON (defaults when omitted)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--export", type=int, default=0, help="also export the first N samples as PNG + JSON")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from an experiment spec")
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--quiet", action="store_true", help="no progress bar")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate posters for dataset samples")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--ids", help="comma-separated ids or ranges, e.g. 0-3,7")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--paste", action="store_true", help="paste the product back after sampling")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("samples"))
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--testset", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int)
    p.add_argument("--paste-both", action="store_true", help="also report the pasted variant")
    p.set_defaults(func=cmd_eval)

    for name, fn in (
        ("ablate-cpe", ablate_cpe),
        ("ablate-extension", ablate_extension),
        ("ablate-data-scale", ablate_data_scale),
    ):
        p = sub.add_parser(name, help=f"run the {name[len('ablate-'):]} ablation")
        p.add_argument("--spec", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--quiet", action="store_true", help="no progress bar")
        p.set_defaults(func=_ablation(fn))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s"
    )
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(int(threads))
    try:
        return args.func(args)
    except AcceptanceError as exc:
        logger.error("%s", exc)
        return 2
    except Exception as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            logger.exception("traceback")
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
