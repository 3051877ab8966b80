#!/usr/bin/env python3
"""
Experiment driver for BP-free optical PINN training

Usage:
    python -m photonic_pinn train configs/toy.json
    python -m photonic_pinn eval runs/chip_final.json --n-val 1000 --seed 0
    python -m photonic_pinn cost configs/hjb20.json
    python -m photonic_pinn mesh-demo 8 --seed 0
    python -m photonic_pinn baseline configs/baseline_toy.json

Global flags (before the subcommand): --threads, --out-dir, --log-level.
Exit codes: 0 success, 2 invalid config, 3 training aborted, 4 corrupt checkpoint.
"""

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime
from typing import List, Optional

import numpy as np
import pandas as pd

from .baseline_bp import (dense_network, dense_param_count, init_mlp, map_and_degrade,
                          mlp_from_json, offchip_train, save_mlp)
from .config import BaselineConfig, RunConfig, Settings, load_config, save_config
from .cost_model import (ONN, TONN_1, TrainingBudget, cost_report, cumulative_cost,
                         format_cost_table, run_cost)
from .errors import CheckpointError, ConfigError, EpochAbortedError, TrainingDivergedError
from .photonic_mesh import (NoiseConfig, chip_from_json, clements_decompose, compose_orthogonal,
                            orthogonality_defect, save_chip)
from .pinn import FDConfig, hjb_problem, residual_loss, sample_collocation, validation_mse
from .zo_trainer import EpochRecord, NetworkConfig, chip_network, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORTED = 3
EXIT_CHECKPOINT = 4

# bump whenever METRICS_COLUMNS changes
METRICS_SCHEMA_VERSION = 1
METRICS_COLUMNS = ["epoch", "train_loss", "val_mse", "cum_inferences", "cum_energy_j", "cum_modeled_time_s"]
BANNER = "=" * 70


def _resolve_out_dir(cli_out_dir: Optional[str], config: Optional[RunConfig], settings: Settings) -> str:
    out_dir = cli_out_dir or (config.out_dir if config is not None else None) or settings.out_dir
    os.makedirs(out_dir, exist_ok=True)
    return out_dir


def _write_json(data: dict, path: str):
    with open(path, "w") as f:
        json.dump(data, f, indent=2)


def _metrics_frame(records: List[EpochRecord], config: RunConfig) -> pd.DataFrame:
    train_cfg = config.train
    column = "cum_inferences" if config.accounting == "true" else "cum_inferences_perturbed"
    cum = np.array([getattr(r, column) for r in records], dtype=np.int64)
    arch = TONN_1 if train_cfg.network.arch == "tonn" else ONN
    energy, modeled = cumulative_cost(cum, train_cfg.batch_size, arch, config.device)
    return pd.DataFrame({
        "epoch": [r.epoch for r in records],
        "train_loss": [r.train_loss for r in records],
        "val_mse": [r.val_mse for r in records],
        "cum_inferences": cum,
        "cum_energy_j": energy,
        "cum_modeled_time_s": modeled,
    }, columns=METRICS_COLUMNS)


def _write_run_artifacts(records: List[EpochRecord], config: RunConfig, out_dir: str):
    _metrics_frame(records, config).to_csv(os.path.join(out_dir, "metrics.csv"), index=False, lineterminator="\n")
    pd.DataFrame({
        "epoch": [r.epoch for r in records],
        "wall_time_s": [r.wall_time_s for r in records],
    }).to_csv(os.path.join(out_dir, "timing.csv"), index=False, lineterminator="\n")


# =========================================
# ========= SUBCOMMANDS ===================
# =========================================

def cmd_train(config_path: str, threads: int, out_dir: Optional[str], settings: Settings) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as e:
        print(f"[ERROR] Invalid config: {e}")
        return EXIT_CONFIG

    run_dir = _resolve_out_dir(out_dir, config, settings)
    save_config(config, os.path.join(run_dir, "config.json"))
    train_cfg = config.train

    print(BANNER)
    print("ON-CHIP ZO TRAINING")
    print(BANNER)
    print(f"Config:   {config_path}")
    print(f"Run dir:  {run_dir}")
    print(f"Problem:  {train_cfg.problem.name} (D={train_cfg.problem.dim})")
    print(f"Network:  {train_cfg.network.arch}, hidden {train_cfg.network.hidden}")
    print(f"Epochs:   {train_cfg.epochs}, threads: {threads}")
    print(BANNER)

    records: List[EpochRecord] = []
    checkpoint_dir = os.path.join(run_dir, "checkpoints") if config.checkpoint_every else None
    started = time.perf_counter()
    try:
        run = train(train_cfg, n_jobs=threads, checkpoint_dir=checkpoint_dir,
                    checkpoint_every=config.checkpoint_every, on_record=records.append)
    except EpochAbortedError as e:
        _write_run_artifacts(records, config, run_dir)
        print(f"[ERROR] Training aborted after {len(records)} epochs: {e}")
        return EXIT_ABORTED
    wall_clock = time.perf_counter() - started

    _write_run_artifacts(run.records, config, run_dir)
    chip_path = os.path.join(run_dir, "chip_final.json")
    save_chip(run.final_chip, chip_path)

    metrics = _metrics_frame(run.records, config)
    last = run.records[-1] if run.records else None
    input_dim = train_cfg.problem.dim + 1
    budget = TrainingBudget.for_training(train_cfg.problem.dim, train_cfg.spsa.num_perturbations,
                                         train_cfg.batch_size, train_cfg.epochs, config.accounting)
    arch = TONN_1 if train_cfg.network.arch == "tonn" else ONN
    modeled = run_cost(budget, arch, config.device)
    summary = {
        "timestamp": datetime.now().isoformat(),
        "metrics_schema_version": METRICS_SCHEMA_VERSION,
        "metrics_columns": METRICS_COLUMNS,
        "final_val_mse": last.val_mse if last else None,
        "final_train_loss": last.train_loss if last else None,
        "epochs": len(run.records),
        "accounting": config.accounting,
        "total_inferences": int(metrics["cum_inferences"].iloc[-1]) if last else 0,
        "total_inferences_true": last.cum_inferences if last else 0,
        "total_inferences_perturbed": last.cum_inferences_perturbed if last else 0,
        "modeled_architecture": arch.name,
        "modeled_energy_j": modeled.energy_j,
        "modeled_time_s": modeled.time_s,
        "wall_clock_s": wall_clock,
        "chip": {
            "n_params": run.final_chip.n_params,
            "n_mzis": run.final_chip.n_mzis,
            "network_params": train_cfg.network.param_count(input_dim),
            "checkpoint": chip_path,
        },
        "seeds": config.to_dict()["train"]["seeds"],
        "config": config.to_dict(),
    }
    _write_json(summary, os.path.join(run_dir, "summary.json"))

    print()
    print(BANNER)
    print("[OK] TRAINING COMPLETE")
    print(BANNER)
    if last is not None:
        print(f"Final validation MSE: {last.val_mse:.4e}")
        print(f"Total inferences:     {summary['total_inferences']} ({config.accounting} accounting)")
    energy = "unavailable" if modeled.energy_j is None else f"{modeled.energy_j:.4g} J"
    print(f"Modeled cost ({arch.name}): {energy}, {modeled.time_s:.4g} s")
    print(f"Wall clock:           {wall_clock:.1f} s")
    return EXIT_OK


def _load_network(path: str):
    """(network, input_dim) from a chip or dense MLP checkpoint"""
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if not isinstance(data, dict):
        raise CheckpointError(f"{path}: not a checkpoint object")
    if data.get("kind") == "dense_mlp":
        mlp = mlp_from_json(data)
        return dense_network(mlp), mlp.input_dim
    chip = chip_from_json(data)
    return chip_network(chip), chip.input_dim


def cmd_eval(checkpoint: str, n_val: int, seed: int) -> int:
    try:
        net, input_dim = _load_network(checkpoint)
    except CheckpointError as e:
        print(f"[ERROR] Corrupt checkpoint: {e}")
        return EXIT_CHECKPOINT

    problem = hjb_problem(input_dim - 1)
    fd = FDConfig()
    mse = validation_mse(net, n_val, seed, problem)
    batch = sample_collocation(n_val, fd, seed, problem.dim, problem.horizon)
    residual, n_inferences = residual_loss(net, batch, fd, problem)

    print(BANNER)
    print("CHECKPOINT EVALUATION")
    print(BANNER)
    print(f"Checkpoint:       {checkpoint}")
    print(f"Problem:          HJB, D={problem.dim}")
    print(f"Validation MSE:   {mse:.6e}  ({n_val} points, seed {seed})")
    print(f"Residual loss:    {residual:.6e}  ({n_inferences} inferences)")
    print(BANNER)
    return EXIT_OK


def cmd_cost(config_path: Optional[str], out_dir: Optional[str], settings: Settings) -> int:
    if config_path is None:
        config = RunConfig(accounting="perturbed")
    else:
        try:
            config = load_config(config_path)
        except ConfigError as e:
            print(f"[ERROR] Invalid config: {e}")
            return EXIT_CONFIG

    train_cfg = config.train
    budget = TrainingBudget.for_training(train_cfg.problem.dim, train_cfg.spsa.num_perturbations,
                                         train_cfg.batch_size, train_cfg.epochs, config.accounting)
    param_counts = None
    train_arch = ONN
    if train_cfg.network.arch == "tonn":
        train_arch = TONN_1
        input_dim = train_cfg.problem.dim + 1
        dense = NetworkConfig(arch="onn-dense", hidden=train_cfg.network.hidden).param_count(input_dim)
        param_counts = (dense, train_cfg.network.param_count(input_dim))

    report = cost_report(consts=config.device, budget=budget, train_arch=train_arch,
                         param_counts=param_counts)
    table = format_cost_table(report)

    print(BANNER)
    print("HARDWARE COST REPORT")
    print(BANNER)
    print(table)
    print(BANNER)

    run_dir = _resolve_out_dir(out_dir, config if config_path else None, settings)
    _write_json(report, os.path.join(run_dir, "cost_report.json"))
    with open(os.path.join(run_dir, "cost_table.txt"), "w") as f:
        f.write(table + "\n")
    return EXIT_OK


def cmd_mesh_demo(n: int, seed: int) -> int:
    if n < 2:
        print(f"[ERROR] Mesh size must be at least 2, got {n}")
        return EXIT_CONFIG
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q = q * np.sign(np.diag(r))[None, :]

    program = clements_decompose(q)
    recon = compose_orthogonal(program)
    error = float(np.max(np.abs(recon - q)))

    print(BANNER)
    print("CLEMENTS MESH DEMO")
    print(BANNER)
    print(f"Random {n}x{n} orthogonal matrix (seed {seed})")
    print(f"{program.topology.n_mzis} MZIs in {len(program.topology.layers)} columns")
    print(f"Max reconstruction error: {error:.3e}")
    print(f"Orthogonality defect:     {orthogonality_defect(recon):.3e}")
    print(BANNER)
    return EXIT_OK


def cmd_baseline(config_path: str, out_dir: Optional[str], settings: Settings) -> int:
    try:
        config = load_config(config_path)
    except ConfigError as e:
        print(f"[ERROR] Invalid config: {e}")
        return EXIT_CONFIG

    run_dir = _resolve_out_dir(out_dir, config, settings)
    baseline = config.baseline or BaselineConfig()
    train_cfg = config.train
    problem = train_cfg.problem.build()
    mlp = init_mlp(problem.dim + 1, baseline.hidden, train_cfg.seeds.init)

    print(BANNER)
    print("OFF-CHIP BASELINE")
    print(BANNER)
    print(f"Problem: {train_cfg.problem.name} (D={problem.dim}), dense hidden {baseline.hidden}")
    print(f"Hardware-aware: {baseline.offchip.hardware_aware}, epochs: {baseline.offchip.epochs}")
    print(BANNER)

    try:
        result = offchip_train(mlp, baseline.offchip, problem)
    except TrainingDivergedError as e:
        pd.DataFrame({"train_loss": e.history}).to_csv(
            os.path.join(run_dir, "baseline_history.csv"), index_label="epoch", lineterminator="\n")
        print(f"[ERROR] Off-chip training diverged: {e}")
        return EXIT_ABORTED

    pd.DataFrame({"train_loss": result.history}).to_csv(
        os.path.join(run_dir, "baseline_history.csv"), index_label="epoch", lineterminator="\n")
    mlp_path = os.path.join(run_dir, "dense_final.json")
    save_mlp(result.mlp, mlp_path)

    noise = train_cfg.noise or NoiseConfig()
    pre_mapping = validation_mse(dense_network(result.mlp), train_cfg.n_val, train_cfg.seeds.validation, problem)
    degradation = map_and_degrade(result.mlp, noise, baseline.n_noise_seeds, problem, n_val=train_cfg.n_val,
                                  val_seed=train_cfg.seeds.validation, noise_seed=train_cfg.seeds.noise)
    summary = {
        "timestamp": datetime.now().isoformat(),
        "dense_params": dense_param_count(result.mlp),
        "final_train_loss": result.history[-1] if result.history else None,
        "pre_mapping_val_mse": pre_mapping,
        "mapped_clean_val_mse": degradation.clean_mse,
        "mapped_noisy_val_mse": degradation.noisy_mses,
        "median_noisy_val_mse": degradation.median_noisy,
        "checkpoint": mlp_path,
        "config": config.to_dict(),
    }
    _write_json(summary, os.path.join(run_dir, "baseline_summary.json"))

    print()
    print(f"Pre-mapping validation MSE:  {pre_mapping:.4e}")
    print(f"Mapped, noise-free:          {degradation.clean_mse:.4e}")
    print(f"Mapped, noisy (median of {baseline.n_noise_seeds}): {degradation.median_noisy:.4e}")
    return EXIT_OK


# =========================================
# ========= ENTRY POINT ===================
# =========================================

def build_parser(settings: Settings) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="photonic_pinn",
                                     description="BP-free TT-compressed optical PINN simulator")
    parser.add_argument("--threads", type=int, default=settings.threads,
                        help=f"Threads for loss evaluations (default: {settings.threads})")
    parser.add_argument("--out-dir", type=str, default=None,
                        help=f"Output directory (default: config out_dir, else {settings.out_dir})")
    parser.add_argument("--log-level", type=str, default=settings.log_level,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help=f"Logging level (default: {settings.log_level})")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="Train a chip on-chip with SPSA + sign-SGD")
    p_train.add_argument("config", type=str, help="Run config JSON")

    p_eval = sub.add_parser("eval", help="Evaluate a chip or dense checkpoint")
    p_eval.add_argument("checkpoint", type=str, help="Checkpoint JSON")
    p_eval.add_argument("--n-val", type=int, default=1000, help="Validation points (default: 1000)")
    p_eval.add_argument("--seed", type=int, default=0, help="Sampling seed (default: 0)")

    p_cost = sub.add_parser("cost", help="Hardware cost report")
    p_cost.add_argument("config", type=str, nargs="?", default=None,
                        help="Run config JSON (default: full-scale hjb20 settings)")

    p_mesh = sub.add_parser("mesh-demo", help="Decompose and rebuild a random orthogonal matrix")
    p_mesh.add_argument("n", type=int, help="Matrix size")
    p_mesh.add_argument("--seed", type=int, default=0, help="Random seed (default: 0)")

    p_base = sub.add_parser("baseline", help="Off-chip dense baseline and mapping degradation")
    p_base.add_argument("config", type=str, help="Run config JSON")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    try:
        settings = Settings.from_env()
    except ConfigError as e:
        print(f"[ERROR] {e}")
        return EXIT_CONFIG
    args = build_parser(settings).parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print(f"[ERROR] --threads must be >= 1, got {args.threads}")
        return EXIT_CONFIG

    if args.command == "train":
        return cmd_train(args.config, args.threads, args.out_dir, settings)
    if args.command == "eval":
        return cmd_eval(args.checkpoint, args.n_val, args.seed)
    if args.command == "cost":
        return cmd_cost(args.config, args.out_dir, settings)
    if args.command == "mesh-demo":
        return cmd_mesh_demo(args.n, args.seed)
    if args.command == "baseline":
        return cmd_baseline(args.config, args.out_dir, settings)
    return EXIT_CONFIG


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n[INFO] Interrupted by user")
        sys.exit(1)
