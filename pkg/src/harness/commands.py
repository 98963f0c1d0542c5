#!/usr/bin/env python3
"""
One driver per CLI subcommand. Each takes the validated experiment config, a
RunWriter for its output directory and the worker count, writes its tables and
summary, and returns the process exit code.
"""
import logging

import numpy as np

from core.accounting import FLOPS_METHODS, closed_form_params, flops_forward, get_preset
from core.errors import InvalidInput
from core.routing import GateConfig, estimate_moments, gaussian_logits, theoretical_moments
from harness.experiments import (
    CONVERGENCE_ORDER,
    DENSE_SUFFIX,
    FORGETTING_ORDER,
    ROUTED_SUFFIX,
    build_task,
    convergence_comparison,
    derive_seed,
    expert_sweep,
    forgetting_experiment,
    median_by_method,
    ordering_holds,
    routing_ablation,
    scale_sweep,
)
from harness.synthetic_tasks import make_sequential_tasks
from harness.training import TrainConfig
from harness.verification import run_verification
from utils.console import status

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

# accounting method name -> FLOPs method name
FLOPS_NAMES = {"full-ft-moe": "full-ft-moe", "moe-lora": "lora-moe"}


def cmd_verify(config, writer, jobs=1):
    report = run_verification(config.verify, config.seed, jobs=jobs)
    writer.table("checks.csv", (c.row() for c in report.checks))
    writer.summary("verify", config.seed, {
        "passed": report.passed,
        "gated": report.gated,
        "failures": [c.name for c in report.failures],
        "checks": {c.name: {"status": c.status, "measured": c.measured} for c in report.checks},
    })
    for check in report.failures:
        status("Verify", f"FAILED {check.name}: measured {check.measured:.6g}, tolerance {check.tolerance}")
    status("Verify", f"{report.passed}/{report.gated} checks passed")
    return EXIT_CHECK_FAILED if report.failures else EXIT_OK


def cmd_train(config, writer, jobs=1):
    methods = list(config.experiment.methods)
    seeds = [derive_seed(config.seed, s) for s in config.experiment.seeds]
    labels = dict(zip(seeds, config.experiment.seeds))
    train_config = TrainConfig.from_settings(config.train, seed=seeds[0])
    report = convergence_comparison(methods, config.task, config.layer, train_config, seeds)

    log_rows, summary_rows = [], []
    for (method, seed), log in report.logs.items():
        log_rows.extend(log.rows(method=method, seed=labels[seed]))
        summary_rows.append({
            "method": method, "seed": labels[seed],
            "final_loss": log.final_loss, "final_accuracy": log.final_accuracy,
        })
    writer.table("train_log.csv", log_rows)
    writer.table("train_summary.csv", summary_rows)
    results = {"median_final_loss": report.medians, "ordering_holds": report.holds,
               "expected_order": list(CONVERGENCE_ORDER)}

    if config.experiment.scales:
        sweep_rows = []
        for label, seed in zip(config.experiment.seeds, seeds):
            task = build_task(config.task, config.layer, seed)
            runs = scale_sweep(config.experiment.scales, task, TrainConfig.from_settings(config.train, seed=seed),
                               config.layer, seed=seed)
            sweep_rows.extend({**run.row(), "seed": label} for run in runs)
        writer.table("scale_sweep.csv", sweep_rows)
        results["scales"] = list(config.experiment.scales)

    writer.summary("train", config.seed, results)
    best = min(report.medians, key=report.medians.get)
    status("Train", f"{len(methods)} methods x {len(seeds)} seeds, lowest median loss: {best}")
    return EXIT_OK


def cmd_forget(config, writer, jobs=1):
    settings = config.task
    retention_rows, degradation_rows = [], []
    degradation = {}
    ablate = config.experiment.include_dense_routing and "spectral-moe" in config.experiment.methods
    for label in config.experiment.seeds:
        seed = derive_seed(config.seed, label)
        tasks = make_sequential_tasks(
            settings.count, settings.m, settings.n, seed, band_width=settings.band_width,
            noise_std=settings.noise_std, shift_scale=settings.shift_scale,
            input_shift=settings.input_shift, eval_size=settings.eval_size,
        )
        train_config = TrainConfig.from_settings(config.train, seed=seed)
        reports = [forgetting_experiment(method, tasks, train_config, config.layer, seed=seed)
                   for method in config.experiment.methods]
        if ablate:
            reports.extend(routing_ablation(settings, config.layer, train_config, seed))
        for report in reports:
            retention_rows.extend(report.retention_rows(seed=label))
            degradation_rows.extend(report.degradation_rows(seed=label))
            degradation.setdefault(report.method, []).append(report.mean_degradation)

    writer.table("retention.csv", retention_rows)
    writer.table("degradation.csv", degradation_rows)
    medians = median_by_method(degradation)
    results = {
        "median_degradation": medians,
        "ordering_holds": ordering_holds(medians, FORGETTING_ORDER),
        "expected_order": list(FORGETTING_ORDER),
    }
    sparse = "spectral-moe" + ROUTED_SUFFIX
    if ablate:
        results["dense_routing_degrades_more"] = medians[sparse + DENSE_SUFFIX] > medians[sparse]
    writer.summary("forget", config.seed, results)
    status("Forget", ", ".join(f"{m}: {v:.4g}" for m, v in medians.items()))
    return EXIT_OK


def cmd_sweep(config, writer, jobs=1):
    task = build_task(config.task, config.layer, config.seed)
    train_config = TrainConfig.from_settings(config.train, seed=config.seed)
    cells = expert_sweep(
        config.sweep.n_experts_grid, config.sweep.top_k_grid, config.sweep.total_rank,
        task, train_config, config.layer, seed=config.seed, jobs=jobs,
    )
    writer.table("sweep.csv", (cell.row() for cell in cells))
    completed = [c for c in cells if c.status == "ok"]
    results = {
        "cells": len(cells),
        "completed": len(completed),
        "skipped": [f"N={c.n_experts} k={c.top_k}: {c.reason}" for c in cells if c.status != "ok"],
    }
    if completed:
        best = min(completed, key=lambda c: c.final_loss)
        results["best"] = {"n_experts": best.n_experts, "top_k": best.top_k, "final_loss": best.final_loss}
    writer.summary("sweep", config.seed, results)
    status("Sweep", f"{len(completed)}/{len(cells)} cells completed")
    return EXIT_OK


def cmd_moments(config, writer, jobs=1):
    settings = config.moments
    gate = GateConfig(settings.n_experts, settings.top_k)
    mean, variance = theoretical_moments(settings.n_experts, settings.top_k)
    rows = []
    results = {"theoretical_mean": mean, "theoretical_variance": variance, "scales": {}}
    for index, scale in enumerate(settings.logit_scales):
        estimate = estimate_moments(gate, gaussian_logits(scale), settings.samples, [config.seed, index],
                                    shards=settings.shards, jobs=jobs)
        for expert in range(settings.n_experts):
            rows.append({
                "logit_scale": scale, "expert": expert, "samples": estimate.samples,
                "theoretical_mean": mean, "empirical_mean": estimate.mean[expert],
                "theoretical_variance": variance, "empirical_variance": estimate.variance[expert],
            })
        results["scales"][str(scale)] = {
            "max_mean_error": float(np.max(np.abs(estimate.mean - mean))),
            "min_variance": float(np.min(estimate.variance)),
            "max_variance": float(np.max(estimate.variance)),
        }
    writer.table("moments.csv", rows)
    writer.summary("moments", config.seed, results)
    status("Moments", f"N={settings.n_experts} k={settings.top_k}: mean {mean:.6g}, variance {variance:.6g}")
    return EXIT_OK


def cmd_account(config, writer, jobs=1):
    settings = config.account
    rows = []
    results = {}
    for name in settings.presets:
        preset = get_preset(name)
        for method in settings.methods:
            try:
                count = closed_form_params(preset, method)
            except InvalidInput as e:
                logger.info("skipping %s: %s", name, e)
                continue
            flops = None
            flops_name = FLOPS_NAMES.get(method)
            if flops_name in FLOPS_METHODS and preset.vocab is not None:
                flops = flops_forward(preset, flops_name, settings.flops_batch, settings.flops_seq)
            rows.append({
                "preset": name, "method": method, "params": count.count,
                "proportion": count.proportion, "flops": flops,
            })
            results.setdefault(name, {})[method] = count.proportion
    writer.table("accounting.csv", rows)
    writer.summary("account", config.seed, {"proportions": results})
    headline = results.get("vit-clip", {}).get("moe-lora")
    status("Account", f"{len(rows)} rows" + (f", vit-clip moe-lora {headline:.2f}%" if headline is not None else ""))
    return EXIT_OK


COMMANDS = {
    "verify": cmd_verify,
    "train": cmd_train,
    "forget": cmd_forget,
    "sweep": cmd_sweep,
    "moments": cmd_moments,
    "account": cmd_account,
}
