#!/usr/bin/env python3
"""
Desk-scale experiments built on the training loop: paired-seed convergence
comparisons, scale sweeps, sequential-task forgetting, expert-count sweeps and
the zero-init alignment comparison.

Directional claims are reported with a ``holds`` flag; they never raise.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from config.experiment_config import LayerSettings, TaskSettings
from core.errors import InvalidInput, TrainingDiverged
from core.moe_layer import optimal_scale
from core.reference_oracles import UpcycledMoeModel, averaged_alignment_trace
from core.routing import RouterState
from harness.synthetic_tasks import SpectrumProfile, make_mixed_segment_task, make_routed_tasks, make_teacher_task
from harness.training import build_model, train

logger = logging.getLogger(__name__)

CONVERGENCE_ORDER = ("spectral-moe", "zero-init-moe", "single-lora")
FORGETTING_ORDER = ("spectral-moe", "zero-init-moe", "single-lora")
DENSE_SUFFIX = "-dense"
ROUTED_SUFFIX = "-routed"
ROUTER_STREAM = 104729


def derive_seed(seed, *stream):
    """Independent 32-bit seed for a labelled sub-run of a seeded experiment."""
    return int(np.random.SeedSequence([int(seed), *map(int, stream)]).generate_state(1)[0])


def cell_seeds(seed, count):
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


def ordering_holds(medians, order):
    """True when the medians of the methods present are non-decreasing in ``order``."""
    values = [medians[m] for m in order if m in medians]
    return all(a <= b for a, b in zip(values, values[1:]))


def median_by_method(values):
    return {method: float(np.median(v)) for method, v in values.items() if v}


def task_router(layer_settings, n, seed):
    """The fixed router a routed task is built around, drawn from its own stream."""
    rng = np.random.default_rng([int(seed), ROUTER_STREAM])
    return RouterState.initialize(n, layer_settings.n_experts, rng,
                                  mode=layer_settings.router_init, std=layer_settings.router_std)


def build_task(task_settings, layer_settings, seed):
    """One regression task from config sections; mixed-segment tasks route with the layer's gate shape."""
    if task_settings.profile == SpectrumProfile.MIXED_SEGMENT.value:
        return make_mixed_segment_task(
            task_settings.m, task_settings.n, seed,
            router=task_router(layer_settings, task_settings.n, seed),
            top_k=layer_settings.top_k,
            width=layer_settings.total_rank // layer_settings.n_experts,
            gain=task_settings.segment_gain, noise_std=task_settings.noise_std,
            eval_size=task_settings.eval_size,
        )
    return make_teacher_task(
        task_settings.m, task_settings.n, task_settings.profile, task_settings.noise_std, seed,
        band=(task_settings.band_start, task_settings.band_width),
        shift_scale=task_settings.shift_scale, eval_size=task_settings.eval_size,
    )


def model_for_task(method, task, layer_settings, seed, train_config, **overrides):
    """
    Build ``method`` for ``task`` and the train config to run it with. Tasks
    that carry a router hand it to the model and keep it frozen.
    """
    model = build_model(method, task.w_base, layer_settings, seed=seed,
                        balance_coefficient=train_config.balance_coefficient,
                        router=task.router, **overrides)
    if task.router is not None:
        train_config = replace(train_config, freeze_router=True)
    return model, train_config


# ---------- convergence ----------
@dataclass
class ConvergenceReport:
    final_losses: dict
    logs: dict = field(default_factory=dict)

    @property
    def medians(self):
        return median_by_method(self.final_losses)

    @property
    def holds(self):
        return ordering_holds(self.medians, CONVERGENCE_ORDER)


def convergence_comparison(methods, task_settings, layer_settings, train_config, seeds):
    """
    Train every method on the same task and data stream per seed. Returns final
    eval losses per method and the logs keyed by (method, seed).
    """
    if not seeds:
        raise InvalidInput("convergence comparison needs at least one seed")
    settings = layer_settings or LayerSettings()
    task_settings = task_settings or TaskSettings()
    report = ConvergenceReport(final_losses={m: [] for m in methods})
    for seed in seeds:
        task = build_task(task_settings, settings, seed)
        for method in methods:
            model, config = model_for_task(method, task, settings, seed, replace(train_config, seed=seed))
            log = train(model, task, config)
            report.final_losses[method].append(log.final_loss)
            report.logs[(method, seed)] = log
    logger.info("convergence medians: %s", report.medians)
    return report


# ---------- scale sweep ----------
@dataclass(frozen=True)
class ScaleRun:
    scale: float
    seed: int
    final_loss: float
    initial_grad_norm: float
    mean_grad_norm: float

    def row(self):
        return {
            "scale": self.scale, "seed": self.seed, "final_loss": self.final_loss,
            "initial_grad_norm": self.initial_grad_norm, "mean_grad_norm": self.mean_grad_norm,
        }


def scale_sweep(scales, task, train_config, layer_settings=None, seed=0):
    """Single SVD-LoRA runs that differ only in the scaling factor."""
    runs = []
    for scale in scales:
        model = build_model("single-lora", task.w_base, layer_settings, seed=seed, scale=float(scale))
        log = train(model, task, train_config)
        runs.append(ScaleRun(
            scale=float(scale),
            seed=seed,
            final_loss=log.final_loss,
            initial_grad_norm=log.grad_norm[0],
            mean_grad_norm=float(np.mean(log.grad_norm)),
        ))
        logger.debug("scale %.6g: final loss %.6g", scale, log.final_loss)
    return runs


# ---------- forgetting ----------
@dataclass
class RetentionReport:
    """``accuracy[p][j]`` is task j's accuracy after training phase p."""
    method: str
    accuracy: np.ndarray

    @property
    def degradation(self):
        """(acc_jj − acc_final_j)/|acc_jj| for every task but the last one trained."""
        last = self.accuracy.shape[0] - 1
        values = []
        for j in range(last):
            learned = self.accuracy[j, j]
            values.append(math.nan if learned == 0 else (learned - self.accuracy[last, j]) / abs(learned))
        return np.array(values)

    @property
    def mean_degradation(self):
        values = self.degradation
        return float(np.nanmean(values)) if values.size and not np.all(np.isnan(values)) else math.nan

    def retention_rows(self, **labels):
        phases, tasks = self.accuracy.shape
        for p in range(phases):
            for j in range(tasks):
                yield {**labels, "method": self.method, "phase": p, "task": j, "accuracy": self.accuracy[p, j]}

    def degradation_rows(self, **labels):
        for j, value in enumerate(self.degradation):
            yield {**labels, "method": self.method, "task": j, "degradation": value}


def forgetting_experiment(method, tasks, train_config, layer_settings=None, seed=0, dense_routing=False):
    """
    Train one model on the tasks in order, re-evaluating every task after each
    phase. ``dense_routing`` switches routing off (k = N). Routed tasks hand
    their shared router to the model, which then keeps it frozen.
    """
    if len(tasks) < 2:
        raise InvalidInput(f"forgetting needs at least two tasks, got {len(tasks)}")
    settings = layer_settings or LayerSettings()
    overrides = {"top_k": settings.n_experts} if dense_routing else {}
    model, config = model_for_task(method, tasks[0], settings, seed, train_config, **overrides)
    accuracy = np.zeros((len(tasks), len(tasks)))
    for phase, task in enumerate(tasks):
        train(model, task, replace(config, seed=derive_seed(config.seed, phase)))
        accuracy[phase] = [t.accuracy(model) for t in tasks]
        logger.debug("%s phase %d accuracies: %s", method, phase, accuracy[phase])
    label = (method + ROUTED_SUFFIX if tasks[0].router is not None else method) + (DENSE_SUFFIX if dense_routing else "")
    report = RetentionReport(method=label, accuracy=accuracy)
    logger.info("%s mean degradation %.4g", label, report.mean_degradation)
    return report


def build_routed_tasks(task_settings, layer_settings, seed):
    return make_routed_tasks(
        task_settings.count, task_settings.m, task_settings.n, seed,
        router=task_router(layer_settings, task_settings.n, seed),
        top_k=layer_settings.top_k,
        width=layer_settings.total_rank // layer_settings.n_experts,
        gain=task_settings.segment_gain, input_shift=task_settings.input_shift,
        noise_std=task_settings.noise_std, eval_size=task_settings.eval_size,
    )


def routing_ablation(task_settings, layer_settings, train_config, seed):
    """
    Spectral MoE on routed tasks with top-k routing and with routing switched
    off. Returns the (sparse, dense) retention reports.
    """
    tasks = build_routed_tasks(task_settings, layer_settings, seed)
    config = replace(train_config, seed=seed)
    sparse, dense = (
        forgetting_experiment("spectral-moe", tasks, config, layer_settings, seed=seed, dense_routing=flag)
        for flag in (False, True)
    )
    return sparse, dense


# ---------- expert sweep ----------
@dataclass(frozen=True)
class SweepCell:
    n_experts: int
    top_k: int
    total_rank: int
    status: str
    reason: str = ""
    final_loss: float = math.nan
    final_accuracy: float = math.nan
    min_load: float = math.nan

    def row(self):
        return {
            "n_experts": self.n_experts, "top_k": self.top_k, "total_rank": self.total_rank,
            "status": self.status, "reason": self.reason or None,
            "final_loss": None if self.status != "ok" else self.final_loss,
            "final_accuracy": None if self.status != "ok" else self.final_accuracy,
            "min_load": None if self.status != "ok" else self.min_load,
        }


def _invalid_reason(n_experts, top_k, total_rank, h):
    if top_k > n_experts:
        return f"top_k {top_k} exceeds n_experts {n_experts}"
    if total_rank % n_experts:
        return f"total rank {total_rank} not divisible by {n_experts} experts"
    if total_rank > h:
        return f"total rank {total_rank} exceeds min(m, n) = {h}"
    return None


def _run_cell(args):
    n_experts, top_k, total_rank, task, train_config, layer_settings, seed = args
    try:
        model = build_model("spectral-moe", task.w_base, layer_settings, seed=seed,
                            balance_coefficient=train_config.balance_coefficient,
                            n_experts=n_experts, top_k=top_k, total_rank=total_rank)
        log = train(model, task, replace(train_config, seed=seed))
    except TrainingDiverged as e:
        return SweepCell(n_experts, top_k, total_rank, "diverged", str(e))
    except (InvalidInput, ValueError) as e:
        return SweepCell(n_experts, top_k, total_rank, "skipped", str(e).splitlines()[0])
    return SweepCell(
        n_experts, top_k, total_rank, "ok",
        final_loss=log.final_loss, final_accuracy=log.final_accuracy, min_load=log.min_load(),
    )


def expert_sweep(n_experts_grid, top_k_grid, total_rank, task, train_config, layer_settings=None, seed=0, jobs=1):
    """
    One spectral-MoE run per (N, k) cell at a fixed total rank. Invalid cells
    are reported as skipped. Cells run in worker processes when ``jobs`` > 1;
    each cell owns a seed spawned from ``seed`` and results keep grid order.
    """
    settings = layer_settings or LayerSettings()
    grid = [(n, k) for n in n_experts_grid for k in top_k_grid]
    seeds = cell_seeds(seed, len(grid))
    h = min(task.m, task.n)

    cells = [None] * len(grid)
    pending = []
    for index, ((n_experts, top_k), cell_seed) in enumerate(zip(grid, seeds)):
        reason = _invalid_reason(n_experts, top_k, total_rank, h)
        if reason:
            cells[index] = SweepCell(n_experts, top_k, total_rank, "skipped", reason)
        else:
            pending.append((index, (n_experts, top_k, total_rank, task, train_config, settings, cell_seed)))

    if jobs > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, [args for _, args in pending]))
    else:
        results = [_run_cell(args) for _, args in pending]
    for (index, _), cell in zip(pending, results):
        cells[index] = cell

    done = sum(c.status == "ok" for c in cells)
    logger.info("expert sweep: %d/%d cells completed", done, len(cells))
    return cells


# ---------- alignment ----------
@dataclass(frozen=True)
class AlignmentComparison:
    """Final divergences per seed at s* and at each reference scale."""
    aligned_scale: float
    aligned: list
    references: dict

    @property
    def aligned_median(self):
        return float(np.median(self.aligned))

    @property
    def reference_medians(self):
        return {scale: float(np.median(values)) for scale, values in self.references.items()}

    @property
    def holds(self):
        return all(self.aligned_median < median for median in self.reference_medians.values())


def _final_divergence(task, settings, scale, seed, steps, lr, batch_size, draws):
    first = build_model("zero-init-moe", task.w_base, settings, seed=seed, scale=scale, balance_coefficient=0.0)
    loras = [first] + [
        build_model("zero-init-moe", task.w_base, settings, seed=derive_seed(seed, draw), scale=scale,
                    balance_coefficient=0.0, router=first.router)
        for draw in range(1, draws)
    ]
    ft = UpcycledMoeModel.upcycle(first.original_weight(), first.gate_config, first.router)
    trace = averaged_alignment_trace(loras, ft, task, steps, lr, lr * settings.eta, batch_size=batch_size, seed=seed)
    return float(np.mean(trace.final))


def alignment_comparison(task, layer_settings=None, seeds=(0, 1, 2, 3, 4), steps=100, lr=1e-3,
                         reference_scales=(2.0,), draws=64, batch_size=16):
    """
    Final mean expert divergence between zero-init low-rank MoEs and their
    upcycled full-rank twin, at s* for the expert rank versus reference scales.
    The low-rank side is averaged over ``draws`` initializations of the
    down-projections that share the router and the batches, which is the
    quantity s* aligns.
    """
    settings = layer_settings or LayerSettings()
    if not seeds or draws < 1:
        raise InvalidInput("alignment comparison needs at least one seed and one draw")
    expert_rank = settings.total_rank // settings.n_experts
    aligned_scale = optimal_scale(task.n, expert_rank, settings.eta)
    aligned = [_final_divergence(task, settings, aligned_scale, seed, steps, lr, batch_size, draws) for seed in seeds]
    references = {
        float(scale): [_final_divergence(task, settings, scale, seed, steps, lr, batch_size, draws) for seed in seeds]
        for scale in reference_scales
    }
    result = AlignmentComparison(aligned_scale, aligned, references)
    logger.info(
        "alignment divergence median: s*=%.4g → %.4g, references %s",
        aligned_scale, result.aligned_median, result.reference_medians,
    )
    return result
