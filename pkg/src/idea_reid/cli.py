"""Command-line entry points tying the pipeline together.

Subcommands: synth-data, annotate, train, eval, ablate, inspect-offsets.
Exit codes: 0 success, 1 usage error, 2 runtime error. Every run writes a
resolved-config snapshot next to its artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from multiprocessing import Pool
from pathlib import Path

from .captions import (
    MODALITIES,
    Modality,
    HttpMLLMClient,
    MockMLLMClient,
    annotate_image,
    caption_record,
    extract_attributes,
)
from .cda import grid_export
from .config import RunConfig
from .retrieval_eval import rank_list
from .synth_data import generate_dataset, load_manifest
from .training import evaluate_model, load_batch, load_model, train

TEXT_MISSING_CASES = (
    ("M(R)", (Modality.RGB,)),
    ("M(N)", (Modality.NIR,)),
    ("M(T)", (Modality.TIR,)),
    ("M(RN)", (Modality.RGB, Modality.NIR)),
    ("M(RT)", (Modality.RGB, Modality.TIR)),
    ("M(NT)", (Modality.NIR, Modality.TIR)),
    ("M(RNT)", (Modality.RGB, Modality.NIR, Modality.TIR)),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="idea-reid", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override one config key (repeatable)",
        )
        p.add_argument("--seed", type=int, help="override run.seed")

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("annotate", help="caption dataset images through an MLLM client")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--client", choices=("mock", "mock-verbose", "http"), default="mock")
    p.add_argument("--endpoint", help="HTTP endpoint for --client http")
    p.add_argument("--out", help="output caption file (default: <data>/captions_annotated.jsonl)")

    p = sub.add_parser("train", help="train one variant on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", help="override run.variant")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="results JSON path")
    p.add_argument("--blank", default="", help="comma list of modalities with blanked text, e.g. R,N")
    p.add_argument("--rank-query", help="also export the rank list of this query sample id")
    p.add_argument("--top-n", type=int, default=10)

    p = sub.add_parser("ablate", help="train/evaluate the variant-by-seed matrix")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--variants", default="all")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--skip-text-missing", action="store_true")

    p = sub.add_parser("inspect-offsets", help="export deformable sampling grids")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples", help="comma list of sample ids (default: first queries)")
    p.add_argument("--limit", type=int, default=8)
    return parser


def _load_config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return RunConfig.load(args.config, overrides)


def _parse_blank(spec: str) -> frozenset:
    tags = {"R": Modality.RGB, "N": Modality.NIR, "T": Modality.TIR}
    out = set()
    for token in spec.split(","):
        token = token.strip().upper()
        if not token:
            continue
        if token not in tags:
            raise UsageError(f"unknown modality tag {token!r} in --blank")
        out.add(tags[token])
    return frozenset(out)


def _write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    manifest = generate_dataset(cfg.synth_config(), out)
    cfg.write_snapshot(out / "resolved_config.json", {"command": "synth-data"})
    print(f"wrote {len(manifest.entries)} triplets to {out}")
    return 0


def cmd_annotate(args) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(args.data)
    if args.client == "http":
        if not args.endpoint:
            raise UsageError("--client http requires --endpoint")
        client = HttpMLLMClient(args.endpoint)
    else:
        client = MockMLLMClient(verbose=args.client == "mock-verbose")
    out_path = Path(args.out) if args.out else Path(args.data) / "captions_annotated.jsonl"
    lines = []
    for entry in manifest.entries:
        for m in MODALITIES:
            image_ref = str(manifest.image_path(entry, m))
            caption = annotate_image(image_ref, m, manifest.subject_kind, client)
            attrs = extract_attributes(caption.text, manifest.subject_kind)
            lines.append(caption_record(entry.sample_id, caption, attrs))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    cfg.write_snapshot(out_path.with_suffix(".config.json"), {"command": "annotate"})
    print(f"annotated {len(lines)} captions -> {out_path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = load_manifest(args.data)
    variant = args.variant or cfg.variant
    out = Path(args.out)
    result = train(
        manifest,
        cfg.model_config(),
        cfg.loss_config(),
        variant,
        cfg.seed,
        out,
        batch_p=cfg["train.batch_p"],
        batch_k=cfg["train.batch_k"],
        eval_every=cfg["train.eval_every"],
        eval_metric=cfg["train.metric"],
    )
    cfg.write_snapshot(out / "resolved_config.json", {"command": "train", "run.variant": variant})
    results = {"variant": variant, "seed": cfg.seed}
    results.update(result.eval_result.to_dict())
    _write_json(out / "results.json", results)
    print(
        f"variant={variant} seed={cfg.seed} final_loss={result.final_loss:.4f} "
        f"mAP={result.eval_result.mAP:.4f}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    model, _, meta = load_model(args.checkpoint)
    manifest = load_manifest(args.data)
    blank = _parse_blank(args.blank)
    run = evaluate_model(model, manifest, cfg["train.metric"], blank_modalities=blank)
    results = {
        "variant": model.variant,
        "seed": meta.get("seed"),
        "blank": sorted(m.value for m in blank),
    }
    results.update(run.result.to_dict())
    _write_json(args.out, results)
    if args.rank_query:
        records = rank_list(run.distances, manifest, args.rank_query, args.top_n)
        _write_json(Path(args.out).with_name("rank_list.json"), records)
    cfg.write_snapshot(Path(args.out).with_suffix(".config.json"), {"command": "eval"})
    print(f"mAP={run.result.mAP:.4f} over {run.result.num_valid_queries} queries")
    return 0


def _run_cell(payload: dict) -> dict:
    cfg = RunConfig(payload["values"])
    manifest = load_manifest(payload["data"])
    variant, seed = payload["variant"], payload["seed"]
    out = Path(payload["out"])
    cell = {"variant": variant, "seed": seed}
    missing = []
    try:
        result = train(
            manifest,
            cfg.model_config(),
            cfg.loss_config(),
            variant,
            seed,
            out,
            batch_p=cfg["train.batch_p"],
            batch_k=cfg["train.batch_k"],
            eval_metric=cfg["train.metric"],
        )
        cell.update(result.eval_result.to_dict())
        cell["final_loss"] = result.final_loss
        cell["checkpoint"] = str(result.checkpoint_path)
        cell["status"] = "ok"
        if variant == "idea" and payload["text_missing"]:
            model, _, _ = load_model(result.checkpoint_path)
            for case, blanks in TEXT_MISSING_CASES:
                run = evaluate_model(
                    model, manifest, cfg["train.metric"], blank_modalities=frozenset(blanks)
                )
                missing.append({"case": case, "seed": seed, "mAP": run.result.mAP})
    except Exception as exc:  # cell failures are reported, not fatal
        cell["status"] = "error"
        cell["error"] = f"{type(exc).__name__}: {exc}"
    return {"cell": cell, "text_missing": missing}


def run_ablation(
    data,
    out,
    seeds,
    variants,
    values: dict,
    workers: int = 1,
    text_missing: bool = True,
) -> dict:
    """Train/evaluate every (variant, seed) cell and aggregate the report."""
    out = Path(out)
    payloads = [
        {
            "data": str(data),
            "out": str(out / variant / f"seed{seed}"),
            "variant": variant,
            "seed": seed,
            "values": values,
            "text_missing": text_missing,
        }
        for variant in variants
        for seed in seeds
    ]
    if workers > 1:
        with Pool(workers) as pool:
            outcomes = pool.map(_run_cell, payloads)
    else:
        outcomes = [_run_cell(p) for p in payloads]

    cells = [o["cell"] for o in outcomes]
    missing = [m for o in outcomes for m in o["text_missing"]]
    aggregates = {}
    for variant in variants:
        done = [c for c in cells if c["variant"] == variant and c["status"] == "ok"]
        if done:
            aggregates[variant] = {
                "mean_mAP": sum(c["mAP"] for c in done) / len(done),
                "mean_rank1": sum(c["cmc"]["1"] for c in done) / len(done),
                "seeds": sorted(c["seed"] for c in done),
            }
    missing_agg = {}
    for case, _ in TEXT_MISSING_CASES:
        rows = [m["mAP"] for m in missing if m["case"] == case]
        if rows:
            missing_agg[case] = sum(rows) / len(rows)
    report = {
        "cells": cells,
        "aggregates": aggregates,
        "text_missing": missing,
        "text_missing_mean": missing_agg,
    }
    _write_json(out / "report.json", report)
    return report


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if args.variants == "all":
        variants = ["baseline", "parallel_text", "imfe", "idea"]
    else:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    report = run_ablation(
        args.data,
        args.out,
        seeds,
        variants,
        cfg.values,
        workers=args.workers,
        text_missing=not args.skip_text_missing,
    )
    cfg.write_snapshot(Path(args.out) / "resolved_config.json", {"command": "ablate"})
    for variant, agg in report["aggregates"].items():
        print(f"{variant}: mean mAP {agg['mean_mAP']:.4f} over seeds {agg['seeds']}")
    failed = [c for c in report["cells"] if c["status"] != "ok"]
    if failed:
        print(f"{len(failed)} cells failed; see report.json", file=sys.stderr)
    return 0


def cmd_inspect(args) -> int:
    cfg = _load_config(args)
    model, _, _ = load_model(args.checkpoint)
    if model.cda is None:
        raise RuntimeError("checkpoint variant has no deformable aggregation block")
    manifest = load_manifest(args.data)
    if args.samples:
        sample_ids = [s.strip() for s in args.samples.split(",") if s.strip()]
    else:
        sample_ids = sorted(manifest.sample_ids("query"))[: args.limit]
    import torch

    with torch.no_grad():
        images, seqs, _ = load_batch(manifest, sample_ids, model)
        bundle = model(images, seqs)
    _write_json(args.out, grid_export(sample_ids, bundle.grid))
    cfg.write_snapshot(Path(args.out).with_suffix(".config.json"), {"command": "inspect-offsets"})
    print(f"exported {len(sample_ids)} sampling grids -> {args.out}")
    return 0


COMMANDS = {
    "synth-data": cmd_synth,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-offsets": cmd_inspect,
}


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_help(sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
