"""Command-line surface: dataset generation, harmonizer pretraining,
strategy runs, and report comparison.

Exit codes: 0 success, 2 config error, 3 runtime/numeric error, 4 I/O
error. Log verbosity comes from FETTL_LOG (error|info|debug).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import ConfigError, FettlError, InvalidInputError
from .fedcore import (
    STRATEGY_TABLE, Transcript, build_harmonizer_bundle, execute_run,
    _load_or_generate_datasets,
)
from .metrics import RunReport, wilcoxon_signed_rank
from .seeding import derive_seed
from .synthdata import generate_sites, save_dataset_dir

log = logging.getLogger("fettl")


def _setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("FETTL_LOG", "info"), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _check_output_dir(path: Path, force: bool, markers) -> None:
    if not path.exists():
        return
    existing = [m for m in markers if (path / m).exists()]
    if existing and not force:
        raise ConfigError(
            f"output {path} already contains {existing[0]}; pass --force to overwrite")


def cmd_gen_data(config_path: str, output: str, force: bool = False) -> dict:
    """Materialize all site datasets plus the manifest."""
    cfg = load_config(config_path)
    out = Path(output)
    _check_output_dir(out, force, ["manifest.json"])
    datasets = generate_sites(cfg.task, cfg.resolved_sites(), cfg.image_size,
                              derive_seed(cfg.seed, "data"), cfg.class_balance)
    manifest = save_dataset_dir(datasets, out, cfg.task, cfg.image_size, cfg.seed)
    log.info("wrote %d sites to %s (digest %s)", len(datasets), out,
             manifest["digest"][:12])
    print(f"dataset: {out}  sites: {len(datasets)}  digest: {manifest['digest']}")
    return manifest


def cmd_pretrain(config_path: str, output: str, force: bool = False,
                 rounds: int | None = None) -> dict:
    """Train the frozen encoder and the federated decoder; write checkpoints."""
    cfg = load_config(config_path)
    if rounds is not None:
        cfg.pretrain.rounds = rounds
    out = Path(output)
    _check_output_dir(out, force, ["encoder.params"])
    out.mkdir(parents=True, exist_ok=True)
    datasets = _load_or_generate_datasets(cfg)
    transcript = Transcript()
    bundle = build_harmonizer_bundle(cfg.with_overrides(checkpoint_dir=None),
                                     datasets, transcript)
    (out / "encoder.params").write_bytes(bundle["enc"])
    (out / "decoder_init.params").write_bytes(bundle["dec_init"])
    (out / "decoder.params").write_bytes(bundle["dec_global"])
    log_payload = {"rounds": len(bundle["history"]),
                   "val_l1_per_round": bundle["history"]}
    (out / "pretrain_log.json").write_text(json.dumps(log_payload, indent=1, sort_keys=True))
    transcript.save(out / "transcript.log")
    if bundle["history"]:
        log.info("decoder val L1: %.4f -> %.4f", bundle["history"][0], bundle["history"][-1])
    print(f"checkpoints: {out}  rounds: {len(bundle['history'])}")
    return log_payload


def cmd_run(config_path: str, strategy: str | None = None, seeds: str | None = None,
            rounds: int | None = None, output: str | None = None,
            force: bool = False, parallel_clients: int | None = None) -> list:
    """Execute the configured strategy for every seed; write reports."""
    cfg = load_config(config_path)
    overrides = {}
    if strategy is not None:
        if strategy not in STRATEGY_TABLE:
            raise ConfigError(f"unknown strategy {strategy!r}")
        overrides["strategy"] = strategy
    if rounds is not None:
        overrides["rounds"] = rounds
    if parallel_clients is not None:
        overrides["parallel_clients"] = parallel_clients
    if output is not None:
        overrides["output_dir"] = output
    cfg = cfg.with_overrides(**overrides) if overrides else cfg
    seed_list = cfg.seeds
    if seeds is not None:
        try:
            seed_list = [int(s) for s in seeds.split(",") if s.strip() != ""]
        except ValueError as exc:
            raise ConfigError(f"--seeds must be comma-separated integers: {seeds!r}") from exc
        if not seed_list:
            raise ConfigError("--seeds produced an empty list")
    out_dir = Path(cfg.output_dir or "runs")
    marker = "report.json" if len(seed_list) == 1 else f"report_seed{seed_list[0]}.json"
    _check_output_dir(out_dir, force, [marker])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)

    written = []
    for seed in seed_list:
        run_cfg = cfg.with_overrides(seed=seed)
        outcome = execute_run(run_cfg)
        suffix = "" if len(seed_list) == 1 else f"_seed{seed}"
        report_path = out_dir / f"report{suffix}.json"
        outcome.report.save_json(report_path)
        outcome.report.save_csv(out_dir / f"report{suffix}.csv")
        outcome.transcript.save(out_dir / f"transcript{suffix}.log")
        prefix = f"{run_cfg.strategy}{suffix}"
        if outcome.best_model is not None:
            (out_dir / "checkpoints" / f"{prefix}_model.params").write_bytes(outcome.best_model)
        if outcome.best_template is not None:
            (out_dir / "checkpoints" / f"{prefix}_template.params").write_bytes(
                outcome.best_template)
        if outcome.encoder is not None:
            (out_dir / "checkpoints" / "encoder.params").write_bytes(outcome.encoder)
        if outcome.decoder is not None:
            (out_dir / "checkpoints" / "decoder.params").write_bytes(outcome.decoder)
        pooled = outcome.report.final_test.get("pooled", {})
        log.info("seed %d done: %s", seed, pooled)
        print(f"run: strategy={run_cfg.strategy} seed={seed} test={pooled} "
              f"best_round={outcome.report.best_round} -> {report_path}")
        written.append(str(report_path))
    return written


def cmd_compare(report_a: str, report_b: str) -> dict:
    """Side-by-side comparison of two reports plus a paired Wilcoxon test."""
    a = RunReport.load_json(report_a)
    b = RunReport.load_json(report_b)
    if a.task != b.task:
        raise ConfigError(f"cannot compare different tasks: {a.task!r} vs {b.task!r}")
    sites_a = set(a.per_image_test)
    sites_b = set(b.per_image_test)
    if sites_a != sites_b:
        raise ConfigError(f"site mismatch: {sorted(sites_a ^ sites_b)}")
    paired_a, paired_b = [], []
    for site in sorted(sites_a):
        va, vb = a.per_image_test[site], b.per_image_test[site]
        if len(va) != len(vb):
            raise ConfigError(f"site {site!r} has {len(va)} vs {len(vb)} test images; "
                              "reports are not from the same benchmark")
        paired_a.extend(va)
        paired_b.extend(vb)
    try:
        w, p = wilcoxon_signed_rank(paired_a, paired_b)
    except InvalidInputError as exc:
        log.info("wilcoxon degenerate: %s", exc)
        w, p = None, None
    metric = "dice" if a.task == "segmentation" else "aupr"
    rows = []
    for site in sorted(sites_a) + ["pooled"]:
        ma = a.final_test.get(site, {}).get(metric)
        mb = b.final_test.get(site, {}).get(metric)
        rows.append((site, ma, mb))
    mean_diff = float(np.mean(np.asarray(paired_a) - np.asarray(paired_b)))
    result = {
        "task": a.task,
        "metric": metric,
        "strategy_a": a.strategy,
        "strategy_b": b.strategy,
        "per_site": {s: {"a": ma, "b": mb} for s, ma, mb in rows},
        "mean_paired_diff": mean_diff,
        "wilcoxon_w": w,
        "p_value": p,
        "n_pairs": len(paired_a),
    }
    header = f"{'site':>8} {a.strategy:>24} {b.strategy:>24}"
    print(header)
    for site, ma, mb in rows:
        fa = "-" if ma is None else f"{ma:.4f}"
        fb = "-" if mb is None else f"{mb:.4f}"
        print(f"{site:>8} {fa:>24} {fb:>24}")
    print(f"paired mean diff ({a.strategy} - {b.strategy}): {mean_diff:+.4f} "
          f"over {len(paired_a)} pairs")
    if p is None:
        print("wilcoxon: not enough nonzero differences for a meaningful test")
    else:
        print(f"wilcoxon: W={w:.1f}  p={p:.4g}")
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fettl",
        description="Federated template and task learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen-data", help="materialize the synthetic multi-site dataset")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--output", required=True)
    p_gen.add_argument("--force", action="store_true")

    p_pre = sub.add_parser("pretrain", help="train encoder + federated decoder checkpoints")
    p_pre.add_argument("--config", required=True)
    p_pre.add_argument("--output", required=True)
    p_pre.add_argument("--rounds", type=int, default=None)
    p_pre.add_argument("--force", action="store_true")

    p_run = sub.add_parser("run", help="execute a federated strategy end to end")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--strategy", default=None)
    p_run.add_argument("--seeds", default=None, help="comma-separated seed list")
    p_run.add_argument("--rounds", type=int, default=None)
    p_run.add_argument("--output", default=None)
    p_run.add_argument("--force", action="store_true")
    p_run.add_argument("--parallel-clients", type=int, default=None)

    p_cmp = sub.add_parser("compare", help="compare two run reports")
    p_cmp.add_argument("report_a")
    p_cmp.add_argument("report_b")
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            cmd_gen_data(args.config, args.output, args.force)
        elif args.command == "pretrain":
            cmd_pretrain(args.config, args.output, args.force, args.rounds)
        elif args.command == "run":
            cmd_run(args.config, args.strategy, args.seeds, args.rounds,
                    args.output, args.force, args.parallel_clients)
        elif args.command == "compare":
            cmd_compare(args.report_a, args.report_b)
        return 0
    except ConfigError as exc:
        log.error("config error: %s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        log.error("I/O error: %s", exc)
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4
    except FettlError as exc:
        log.error("runtime error: %s", exc)
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
