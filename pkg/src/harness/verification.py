#!/usr/bin/env python3
"""
The property suite behind ``verify``.

Each check measures one quantity, compares it with a tolerance and records a
``pass``/``fail`` status. Checks whose outcome is only directional, or whose
preconditions the config deliberately breaks, are recorded as ``info``.
"""
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from config.experiment_config import LayerSettings
from core.accounting import (
    DECODER_7B,
    LINEAR_STACK_METHODS,
    VIT_CLIP,
    adapter_to_projection_ratio,
    build_linear_stack,
    closed_form_params,
    empirical_params,
    linear_stack_params,
    projection_k_ratio,
)
from core.moe_layer import (
    LayerConfig,
    empirical_residual,
    equivalent_gradient_surrogate,
    first_order_update_check,
    init_layer,
    init_mismatch,
    optimal_scale,
    scaling_alignment_check,
)
from core.objectives import LossKind, loss_and_grad
from core.reference_oracles import (
    FullFtModel,
    UpcycledMoeModel,
    finite_diff_gradient,
    full_ft_gradient,
    upcycled_forward_backward,
)
from core.routing import GateConfig, RouterState, estimate_moments, gaussian_logits, theoretical_moments, topk_weights
from core.spectral_core import (
    SchemeVariant,
    SegmentScheme,
    build_expert,
    extract_segment,
    segment_starts,
    single_lora_init,
    svd_decompose,
)
from harness.experiments import alignment_comparison
from harness.synthetic_tasks import make_teacher_task

logger = logging.getLogger(__name__)

PASS, FAIL, INFO = "pass", "fail", "info"


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str
    measured: float
    tolerance: float | None = None
    detail: str = ""

    @property
    def failed(self):
        return self.status == FAIL

    def row(self):
        return {
            "check": self.name, "status": self.status, "measured": self.measured,
            "tolerance": self.tolerance, "detail": self.detail or None,
        }


@dataclass(frozen=True)
class VerificationReport:
    checks: list

    @property
    def failures(self):
        return [c for c in self.checks if c.failed]

    @property
    def passed(self):
        return sum(c.status == PASS for c in self.checks)

    @property
    def gated(self):
        return sum(c.status != INFO for c in self.checks)


def _at_most(name, measured, tolerance, detail=""):
    return CheckResult(name, PASS if measured <= tolerance else FAIL, float(measured), tolerance, detail)


def _info(name, measured, detail=""):
    return CheckResult(name, INFO, float(measured), None, detail)


def _rng(seed, stream):
    return np.random.default_rng([seed, stream])


def _relative(a, b):
    denominator = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denominator == 0.0 else float(np.linalg.norm(a - b) / denominator)


def _unit(rng, n):
    x = rng.standard_normal(n)
    return x / np.linalg.norm(x)


# ---------- spectral core ----------
def check_svd(seed):
    rng = _rng(seed, 1)
    worst = 0.0
    monotone = True
    for shape in ((40, 24), (24, 40)):
        w = rng.standard_normal(shape)
        f = svd_decompose(w)
        eye = np.eye(f.h)
        worst = max(
            worst,
            np.linalg.norm(f.reconstruct() - w) / np.linalg.norm(w),
            np.max(np.abs(f.u.T @ f.u - eye)),
            np.max(np.abs(f.v.T @ f.v - eye)),
        )
        monotone &= bool(np.all(np.diff(f.s) <= 0) and np.all(f.s >= 0))
    result = _at_most("svd_reconstruction", worst, 1e-10)
    if not monotone:
        result = replace(result, status=FAIL, detail="singular values not non-increasing")
    return [result]


def check_segments(seed):
    h, n_experts, d = 32, 4, 4
    overlaps = 0
    for variant in SchemeVariant:
        scheme = SegmentScheme(variant, seed if variant is SchemeVariant.RANDOM else None)
        starts = segment_starts(scheme, h, n_experts, d)
        used = np.zeros(h, dtype=int)
        for start in starts:
            if start < 0 or start + d > h:
                overlaps += 1
                continue
            used[start:start + d] += 1
        overlaps += int(np.sum(np.maximum(used - 1, 0)))
    return [_at_most("segment_disjointness", overlaps, 0, "all four schemes, h=32 N=4 d=4")]


def check_damping(seed):
    rng = _rng(seed, 2)
    factors = svd_decompose(rng.standard_normal((20, 16)))
    worst = 0.0
    for start, s, rho in ((0, 3.0, 10.0), (4, 0.5, 1.0), (12, 7.0, 4.0)):
        segment = extract_segment(factors, start, 4)
        expert = build_expert(segment, s, rho)
        worst = max(worst, _relative(s * rho * expert.product(), segment.product()))
    return [_at_most("damped_expert_factors", worst, 1e-12)]


def check_scale_invariance(seed):
    rng = _rng(seed, 3)
    w0 = rng.standard_normal((24, 16)) / 4.0
    inputs = rng.standard_normal((64, 16))
    outputs = []
    for s in (1.0, 4.0, 16.0):
        config = LayerConfig(m=24, n=16, total_rank=8, n_experts=4, top_k=2, scale=s)
        outputs.append(init_layer(w0, config, seed).predict(inputs))
    spread = max(np.max(np.abs(y - outputs[0])) for y in outputs) / np.max(np.abs(outputs[0]))

    config = LayerConfig(m=24, n=16, total_rank=8, n_experts=4, top_k=2, per_expert_scaling=True)
    layer = init_layer(w0, config, seed)
    masses = np.array([e.segment.spectral_mass for e in layer.experts])
    products = layer.scales ** 2 * masses
    identity = np.max(np.abs(products - products[0])) / products[0]
    expectation = _relative(layer.expected_equivalent_weight(), w0)
    return [
        _at_most("init_scale_invariance", spread, 1e-10, "s in {1, 4, 16}"),
        _at_most("expert_scale_identity", identity, 1e-12),
        _at_most("per_expert_residual_expectation", expectation, 1e-12),
    ]


# ---------- routing ----------
def check_router_moments(settings, seed, jobs):
    config = GateConfig(8, 2)
    mean, variance = theoretical_moments(8, 2)
    spread = estimate_moments(config, gaussian_logits(1.0), settings.moment_samples, [seed, 10],
                              shards=settings.moment_shards, jobs=jobs)
    exact = estimate_moments(config, gaussian_logits(1e-6), settings.moment_samples, [seed, 11],
                             shards=settings.moment_shards, jobs=jobs)
    bound = variance - 2e-3
    lowest = float(np.min(spread.variance))
    return [
        _at_most("router_mean", np.max(np.abs(spread.mean - mean)), 1e-3, f"N=8 k=2, {settings.moment_samples} samples"),
        _at_most("router_variance_exact", np.max(np.abs(exact.variance - variance)), 2e-3, "logit scale 1e-6"),
        CheckResult("router_variance_bound", PASS if lowest >= bound else FAIL, lowest, bound, "unit logits, lower bound"),
    ]


# ---------- residual compensation ----------
def check_residual(settings, seed):
    rng = _rng(seed, 4)
    n = settings.residual_dim
    w0 = rng.standard_normal((n, n)) / math.sqrt(n)
    config = LayerConfig(m=n, n=n, total_rank=32, n_experts=8, top_k=2, router_init="symmetric")
    layer = init_layer(w0, config, seed)
    inputs = rng.standard_normal((settings.residual_samples, n))

    deviation = empirical_residual(layer, inputs) - layer.residual
    _, weights = topk_weights(layer.router.logits(inputs), config.top_k)
    covariance = np.atleast_2d(np.cov(weights, rowvar=False))
    deltas = layer.expert_deltas()
    sigma = np.sqrt(np.maximum(np.einsum("iab,ij,jab->ab", deltas, covariance, deltas), 0.0))
    standard_error = sigma / math.sqrt(settings.residual_samples)
    zero = standard_error == 0.0
    if np.any(np.abs(deviation[zero]) > 1e-12):
        worst = math.inf
    else:
        worst = float(np.max(np.abs(deviation[~zero]) / standard_error[~zero])) if np.any(~zero) else 0.0

    single = LayerConfig(m=n, n=n, total_rank=4, n_experts=1, top_k=1)
    single_layer = init_layer(w0, single, seed)
    exact = max(_relative(single_layer.equivalent_weight(x), w0) for x in inputs[:8])
    return [
        _at_most("residual_matching", worst, 4.0, f"N=8 k=2 r=32, max |deviation| in standard errors, {settings.residual_samples} inputs"),
        _at_most("residual_single_expert", exact, 1e-12),
    ]


def check_damping_mismatch(seed):
    rng = _rng(seed, 5)
    w0 = rng.standard_normal((32, 32)) / math.sqrt(32)
    inputs = rng.standard_normal((2000, 32))
    medians = {}
    for rho in (1.0, 10.0):
        config = LayerConfig(m=32, n=32, total_rank=16, n_experts=8, top_k=2, rho=rho, router_init="gaussian", router_std=0.5)
        medians[rho] = init_mismatch(init_layer(w0, config, seed), inputs).median
    return [_info("init_mismatch_damping", medians[10.0], f"median mismatch rho=1: {medians[1.0]:.6g}, rho=10: {medians[10.0]:.6g}")]


# ---------- gradients ----------
def _parameter_objective(model, name, evaluate):
    def objective(theta):
        probe = model.copy()
        probe.parameters()[name][...] = theta
        return evaluate(probe)
    return objective


def _random_gradient_layer(rng, index):
    m = int(rng.integers(6, 17))
    n = int(rng.integers(6, 13))
    n_experts = (1, 2, 4)[index % 3]
    top_k = min(n_experts, 1 + index % 2)
    d = 1 if 2 * n_experts > min(m, n) else int(rng.integers(1, 3))
    config = LayerConfig(
        m=m, n=n, total_rank=n_experts * d, n_experts=n_experts, top_k=top_k,
        scheme=SegmentScheme(SchemeVariant.PRINCIPAL), router_init="gaussian", router_std=0.5,
        balance_coefficient=0.1,
    )
    layer = init_layer(rng.standard_normal((m, n)) / math.sqrt(n), config, int(rng.integers(2 ** 32)))
    for expert in layer.experts:
        expert.b += 0.1 * rng.standard_normal(expert.b.shape)
        expert.a += 0.1 * rng.standard_normal(expert.a.shape)
    return layer


def check_layer_gradients(settings, seed):
    rng = _rng(seed, 6)
    worst = 0.0
    leaked = 0.0
    for index in range(settings.gradient_layers):
        layer = _random_gradient_layer(rng, index)
        x = _unit(rng, layer.config.n)
        target = rng.standard_normal(layer.config.m)
        y, gate = layer.forward(x)
        _, upstream = loss_and_grad(y, target)
        grads = layer.backward(x, upstream, include_balance=True)

        analytic = {}
        for i in range(layer.n_experts):
            analytic[f"expert.{i}.b"] = grads.b[i]
            analytic[f"expert.{i}.a"] = grads.a[i]
            if i not in gate.selected:
                leaked = max(leaked, np.max(np.abs(grads.b[i])), np.max(np.abs(grads.a[i])))
        if layer.n_experts > 1:
            analytic["router"] = grads.router

        params = layer.parameters()
        for name, grad in analytic.items():
            objective = _parameter_objective(layer, name, lambda probe: probe.sample_objective(x, target))
            numeric = finite_diff_gradient(objective, params[name])
            worst = max(worst, _relative(grad, numeric))
    return [
        _at_most("layer_gradient_fd", worst, 1e-5, f"{settings.gradient_layers} random layers"),
        _at_most("unselected_gradient_zero", leaked, 0.0),
    ]


def check_oracles(seed):
    rng = _rng(seed, 7)
    full_worst = 0.0
    for kind in LossKind:
        for _ in range(3):
            model = FullFtModel(rng.standard_normal((7, 5)))
            x = _unit(rng, 5)
            target = rng.standard_normal(7)
            if kind is LossKind.SOFTMAX_CROSS_ENTROPY:
                target = np.exp(target) / np.sum(np.exp(target))
            analytic = full_ft_gradient(model, x, target, kind)
            numeric = finite_diff_gradient(lambda w: loss_and_grad(w @ x, target, kind)[0], model.w)
            full_worst = max(full_worst, _relative(analytic, numeric))

    upcycled_worst = 0.0
    identity = 0.0
    for top_k in (1, 2, 4):
        w0 = rng.standard_normal((6, 8)) / math.sqrt(8)
        router = RouterState.initialize(8, 4, rng, mode="gaussian", std=0.5)
        fresh = UpcycledMoeModel.upcycle(w0, GateConfig(4, top_k), router)
        inputs = rng.standard_normal((16, 8))
        identity = max(identity, _relative(fresh.predict(inputs), inputs @ w0.T))

        model = fresh.copy()
        for w in model.experts:
            w += 0.1 * rng.standard_normal(w.shape)
        x = _unit(rng, 8)
        target = rng.standard_normal(6)
        step = upcycled_forward_backward(model, x, target)
        analytic = {f"expert.{i}.w": g for i, g in enumerate(step.expert_grads)}
        analytic["router"] = step.router_grad

        def evaluate(probe):
            return loss_and_grad(probe.predict(x[None, :])[0], target)[0]

        params = model.parameters()
        for name, grad in analytic.items():
            numeric = finite_diff_gradient(_parameter_objective(model, name, evaluate), params[name])
            upcycled_worst = max(upcycled_worst, _relative(grad, numeric))
    return [
        _at_most("full_ft_gradient_fd", full_worst, 1e-6),
        _at_most("upcycled_gradient_fd", upcycled_worst, 1e-5),
        _at_most("upcycled_identity", identity, 1e-12),
    ]


def check_surrogate(settings, seed):
    rng = _rng(seed, 8)
    worst = 0.0
    for _ in range(settings.surrogate_instances):
        m, n = (int(v) for v in rng.integers(8, 25, size=2))
        factors = svd_decompose(rng.standard_normal((m, n)))
        r = int(rng.integers(1, factors.h + 1))
        s = float(rng.uniform(0.5, 8.0))
        adapter = single_lora_init(factors, 0, r, s)
        g = rng.standard_normal((m, n))
        u, sigma, v = factors.u[:, :r], factors.s[:r], factors.v[:, :r]
        closed = s * ((u * sigma) @ (u.T @ g) + (g @ v * sigma) @ v.T)
        worst = max(worst, _relative(equivalent_gradient_surrogate(adapter.b, adapter.a, g, s), closed))
    return [_at_most("surrogate_closed_form", worst, 1e-12, f"{settings.surrogate_instances} instances")]


def check_first_order(settings, seed):
    rng = _rng(seed, 9)
    lrs = np.array([1e-4, 1e-5, 1e-6])
    worst_error = 0.0
    worst_slope = 0.0
    slopes = []
    for index in range(settings.first_order_layers):
        n_experts = (1, 2, 4)[index % 3]
        config = LayerConfig(m=16, n=12, total_rank=2 * n_experts, n_experts=n_experts, top_k=min(2, n_experts))
        layer = init_layer(rng.standard_normal((16, 12)) / math.sqrt(12), config, int(rng.integers(2 ** 32)))
        x = _unit(rng, 12)
        target = rng.standard_normal(16)
        errors = np.array([first_order_update_check(layer, x, target, lr) for lr in lrs])
        worst_error = max(worst_error, errors[1])
        if np.all(errors > 0):
            slope = float(np.polyfit(np.log(lrs), np.log(errors), 1)[0])
            slopes.append(slope)
            worst_slope = max(worst_slope, abs(slope - 1.0))
    slope_detail = f"slopes in [{min(slopes):.4f}, {max(slopes):.4f}]" if slopes else "no slope measured"
    return [
        _at_most("first_order_update", worst_error, 1e-3, "lr=1e-5"),
        _at_most("first_order_slope", worst_slope, 0.2, slope_detail),
    ]


def check_scaling_alignment(settings, seed):
    n, r = settings.alignment_n, settings.alignment_rank
    forced = settings.alignment_scale != "auto"
    scale = None if not forced else float(settings.alignment_scale)
    eta = 1.0
    runs = [
        scaling_alignment_check(n, r, eta, settings.alignment_draws, [seed, 20, repeat], scale=scale)
        for repeat in range(settings.alignment_repeats)
    ]
    coarse = [
        scaling_alignment_check(n, r, eta, 100, [seed, 21, repeat], scale=scale).relative_error
        for repeat in range(settings.alignment_repeats)
    ]
    main = runs[0]
    fine_median = float(np.median([run.relative_error for run in runs]))
    coarse_median = float(np.median(coarse))
    detail = f"s={main.scale:.6g}, n={n}, r={r}, {settings.alignment_draws} draws"
    results = [
        _at_most("scaling_coefficient", main.coefficient_error, 0.05, detail),
        _at_most("scaling_frobenius", main.relative_error, 1.5 * main.noise_floor,
                 f"noise floor {main.noise_floor:.6g}"),
        _at_most("scaling_convergence", fine_median - coarse_median, 0.0,
                 f"median error {coarse_median:.6g} at 100 draws, {fine_median:.6g} at {settings.alignment_draws}"),
    ]
    if forced:
        results = [replace(c, status=INFO, detail=c.detail + "; scale forced by config") for c in results]
    return results


# ---------- accounting ----------
def check_accounting(seed):
    vit = closed_form_params(VIT_CLIP, "moe-lora")
    decoder = closed_form_params(DECODER_7B, "moe-lora")
    full_moe = closed_form_params(VIT_CLIP, "full-ft-moe")

    small = replace(VIT_CLIP, hidden=32, layers=2)
    mismatch = 0
    for method in LINEAR_STACK_METHODS:
        mismatch = max(mismatch, abs(empirical_params(build_linear_stack(small, method, seed)) - linear_stack_params(small, method)))

    eight = replace(DECODER_7B, experts=8)
    return [
        CheckResult("params_vit_moe_lora", PASS if vit.proportion == 2.24 else FAIL, vit.proportion, 2.24, "percent of full-ft"),
        CheckResult("params_decoder_moe_lora", PASS if decoder.proportion == 0.81 else FAIL, decoder.proportion, 0.81, "percent of full-ft"),
        _info("params_vit_full_ft_moe", full_moe.proportion, "percent of full-ft, not gated"),
        _at_most("params_empirical_stack", mismatch, 0, "linear stack, H=32 L=2"),
        _at_most("flops_adapter_share", adapter_to_projection_ratio(eight), 0.01, "decoder preset, 2-of-8 routing"),
        _info("flops_adapter_share_preset", adapter_to_projection_ratio(DECODER_7B), "decoder preset, 2-of-2 routing"),
        _at_most("flops_projection_k_ratio", abs(projection_k_ratio(DECODER_7B) - 2.0), 0.05, "full-ft-moe, k=2 vs k=1"),
    ]


def check_alignment_divergence(settings, seed):
    """
    Draw-averaged 100-step divergence from the upcycled full-rank twin with
    rank-8 experts on 32 inputs: s* against s = 2, and s* against scales 8×
    off in either direction.
    """
    task = make_teacher_task(32, 32, "power-law", 0.0, seed)
    layer = LayerSettings(total_rank=32, n_experts=4, top_k=2)
    aligned = optimal_scale(32, 8, layer.eta)
    off = (aligned / 8, aligned * 8)
    result = alignment_comparison(
        task, layer, seeds=[seed + i for i in range(settings.divergence_seeds)], steps=100, lr=1e-3,
        reference_scales=(2.0, *off), draws=settings.divergence_draws,
    )
    medians = result.reference_medians
    detail = f"s*={aligned:.4g} median {result.aligned_median:.6g} over {settings.divergence_draws} draws"
    return [
        _at_most("alignment_divergence", result.aligned_median / medians[2.0], 1.0,
                 f"{detail}; s=2 median {medians[2.0]:.6g}"),
        _at_most("alignment_scale_mismatch", result.aligned_median / min(medians[s] for s in off), 1.0,
                 f"{detail}; s*/8 median {medians[off[0]]:.6g}, 8s* median {medians[off[1]]:.6g}"),
    ]


def run_verification(settings, seed, jobs=1):
    """Run every check in a fixed order; the report never raises on a failed check."""
    suites = [
        ("svd", lambda: check_svd(seed)),
        ("segments", lambda: check_segments(seed)),
        ("damping", lambda: check_damping(seed)),
        ("scale invariance", lambda: check_scale_invariance(seed)),
        ("router moments", lambda: check_router_moments(settings, seed, jobs)),
        ("residual", lambda: check_residual(settings, seed)),
        ("mismatch", lambda: check_damping_mismatch(seed)),
        ("layer gradients", lambda: check_layer_gradients(settings, seed)),
        ("oracles", lambda: check_oracles(seed)),
        ("surrogate", lambda: check_surrogate(settings, seed)),
        ("first order", lambda: check_first_order(settings, seed)),
        ("scaling alignment", lambda: check_scaling_alignment(settings, seed)),
        ("accounting", lambda: check_accounting(seed)),
        ("alignment divergence", lambda: check_alignment_divergence(settings, seed)),
    ]
    checks = []
    for label, suite in suites:
        logger.info("running %s checks", label)
        results = suite()
        for result in results:
            logger.debug("%s: %s (measured %.6g)", result.name, result.status, result.measured)
        checks.extend(results)
    return VerificationReport(checks)
