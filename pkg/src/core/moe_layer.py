#!/usr/bin/env python3
"""
The spectral LoRA mixture-of-experts layer.

    y = W̃⁰·x + Σ_{i∈S_k(x)} R(x)ᵢ · sᵢ · bᵢ(aᵢx)

with the frozen base W̃⁰ = W⁰ − W_res. Forward and backward passes are
written out analytically and vectorised over the batch.
"""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from core.errors import DegenerateSegment, InsufficientRank, InvalidInput
from core.objectives import BatchGradients, LossKind, loss_and_grad, mean_loss_and_grad
from core.routing import (
    DEFAULT_BALANCE_COEFFICIENT,
    DEFAULT_ROUTER_STD,
    GateConfig,
    RouterState,
    balance_backward,
    gate_backward,
    load_fractions,
    topk_gate,
    topk_weights,
)
from core.spectral_core import (
    SegmentScheme,
    SchemeVariant,
    as_matrix,
    build_expert,
    extract_segment,
    kaiming_uniform_bound,
    residual_compensation,
    segment_starts,
    svd_decompose,
    zero_init_expert,
)

logger = logging.getLogger(__name__)

EXPERT_INITS = ("spectral", "zero")
ROUTER_INITS = ("symmetric", "gaussian")


def optimal_scale(n, r, eta=1.0):
    """s* = √(3nη/r), the scale that aligns a zero-init LoRA gradient with full fine-tuning."""
    if n <= 0 or r <= 0 or eta <= 0:
        raise InvalidInput(f"n, r and eta must be positive (n={n}, r={r}, eta={eta})")
    return math.sqrt(3.0 * n * eta / r)


def expert_aligned_scales(spectral_masses, s1):
    """sᵢ = s₁·√(σ₀/σᵢ), so that sᵢ²σᵢ = s₁²σ₀ for every expert."""
    masses = np.asarray(spectral_masses, dtype=np.float64)
    if masses.size == 0:
        raise InvalidInput("no spectral masses given")
    if np.any(masses <= 0):
        raise DegenerateSegment(f"spectral masses must be positive, got {masses.tolist()}")
    return [float(s1 * math.sqrt(masses[0] / sigma)) for sigma in masses]


@dataclass(frozen=True)
class LayerConfig:
    m: int
    n: int
    total_rank: int
    n_experts: int
    top_k: int
    scale: float | str = "auto"
    rho: float = 10.0
    eta: float = 1.0
    scheme: SegmentScheme = field(default_factory=SegmentScheme)
    per_expert_scaling: bool = False
    expert_init: str = "spectral"
    router_init: str = "symmetric"
    router_std: float = DEFAULT_ROUTER_STD
    balance_coefficient: float = DEFAULT_BALANCE_COEFFICIENT

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise InvalidInput(f"layer dimensions must be positive, got {self.m}×{self.n}")
        if self.total_rank < 1 or self.n_experts < 1 or self.total_rank % self.n_experts != 0:
            raise InvalidInput(f"total rank {self.total_rank} must be a positive multiple of n_experts {self.n_experts}")
        GateConfig(self.n_experts, self.top_k, self.balance_coefficient)
        if self.rho <= 0 or self.eta <= 0:
            raise InvalidInput(f"rho and eta must be positive (rho={self.rho}, eta={self.eta})")
        if self.scale != "auto" and not (isinstance(self.scale, (int, float)) and self.scale > 0):
            raise InvalidInput(f"scale must be 'auto' or a positive number, got {self.scale!r}")
        if self.expert_init not in EXPERT_INITS:
            raise InvalidInput(f"expert_init must be one of {EXPERT_INITS}, got {self.expert_init!r}")
        if self.router_init not in ROUTER_INITS:
            raise InvalidInput(f"router_init must be one of {ROUTER_INITS}, got {self.router_init!r}")
        if self.per_expert_scaling and self.expert_init == "zero":
            raise InvalidInput("per-expert scaling needs spectral segments; zero-init experts have none")
        if isinstance(self.scheme, dict):
            object.__setattr__(self, "scheme", SegmentScheme(**self.scheme))

    @property
    def expert_width(self):
        return self.total_rank // self.n_experts

    @property
    def gate_config(self):
        return GateConfig(self.n_experts, self.top_k, self.balance_coefficient)

    def resolved_scale(self):
        if self.scale == "auto":
            return optimal_scale(self.n, self.total_rank, self.eta)
        return float(self.scale)

    def to_dict(self):
        data = asdict(self)
        data["scheme"] = {"variant": self.scheme.variant.value, "seed": self.scheme.seed}
        return data

    @classmethod
    def from_dict(cls, data):
        return cls(**data)


@dataclass(frozen=True)
class EquivalentState:
    weight: np.ndarray
    gradient: np.ndarray


@dataclass
class LayerGradients:
    """Per-sample gradients. Lists hold one entry per expert; unselected ones are exact zeros."""
    b: list
    a: list
    router: np.ndarray
    balance_loss: float
    selected: np.ndarray


@dataclass
class SpectralMoeLayer:
    base: np.ndarray
    residual: np.ndarray
    experts: list
    router: RouterState
    config: LayerConfig

    @property
    def gate_config(self):
        return self.config.gate_config

    @property
    def n_experts(self):
        return len(self.experts)

    @property
    def scales(self):
        return np.array([e.scale for e in self.experts])

    def original_weight(self):
        return self.base + self.residual

    def copy(self):
        return SpectralMoeLayer(
            base=self.base.copy(),
            residual=self.residual.copy(),
            experts=[e.copy() for e in self.experts],
            router=self.router.copy(),
            config=self.config,
        )

    def parameters(self):
        """Trainable arrays by name. A single-expert router is constant and not listed."""
        params = {}
        for i, expert in enumerate(self.experts):
            params[f"expert.{i}.b"] = expert.b
            params[f"expert.{i}.a"] = expert.a
        if self.n_experts > 1:
            params["router"] = self.router.w_z
        return params

    # ---------- forward ----------
    def _check_vector(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.config.n,):
            raise InvalidInput(f"expected input of shape ({self.config.n},), got {x.shape}")
        return x

    def _check_batch(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.ndim != 2 or x.shape[1] != self.config.n:
            raise InvalidInput(f"expected inputs of shape (T, {self.config.n}), got {x.shape}")
        return x

    def gate(self, x):
        return topk_gate(self.router, self._check_vector(x), self.gate_config)

    def forward(self, x):
        x = self._check_vector(x)
        gate = topk_gate(self.router, x, self.gate_config)
        y = self.base @ x
        for i in gate.selected:
            expert = self.experts[i]
            y = y + gate.weights[i] * expert.scale * (expert.b @ (expert.a @ x))
        return y, gate

    def _forward_parts(self, x):
        logits = self.router.logits(x)
        selected, weights = topk_weights(logits, self.config.top_k)
        hidden = [x @ e.a.T for e in self.experts]
        y = x @ self.base.T
        for i, expert in enumerate(self.experts):
            y += (weights[:, i:i + 1] * expert.scale) * (hidden[i] @ expert.b.T)
        return y, logits, selected, weights, hidden

    def forward_batch(self, x):
        """Outputs for a (T, n) batch and the (T, k) selected expert indices."""
        x = self._check_batch(x)
        y, _, selected, _, _ = self._forward_parts(x)
        return y, selected

    def predict(self, x):
        return self.forward_batch(x)[0]

    # ---------- backward ----------
    def _backprop(self, x, upstream, logits, selected, weights, hidden, balance_coefficient):
        grads_b, grads_a = [], []
        contributions = np.zeros_like(weights)
        for i, expert in enumerate(self.experts):
            rows = np.flatnonzero(np.any(selected == i, axis=1))
            if rows.size == 0:
                grads_b.append(np.zeros_like(expert.b))
                grads_a.append(np.zeros_like(expert.a))
                continue
            g_rows = upstream[rows]
            weighted = g_rows * weights[rows, i:i + 1]
            h_rows = hidden[i][rows]
            grads_b.append(expert.scale * (weighted.T @ h_rows))
            grads_a.append(expert.scale * ((weighted @ expert.b).T @ x[rows]))
            contributions[rows, i] = expert.scale * np.sum((g_rows @ expert.b) * h_rows, axis=1)

        logit_grad = gate_backward(weights, contributions)
        balance, balance_grad = balance_backward(logits, selected, self.gate_config)
        if balance_coefficient > 0:
            logit_grad = logit_grad + balance_coefficient * balance_grad
        return grads_b, grads_a, x.T @ logit_grad, balance

    def backward(self, x, upstream, include_balance=True):
        """
        Gradients of one sample's loss given ∂L/∂y, through the renormalized
        gate into w_z. With ``include_balance`` the balance term (T=1) is added
        with the layer's coefficient.
        """
        x = self._check_vector(x)[None, :]
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (self.config.m,):
            raise InvalidInput(f"expected upstream gradient of shape ({self.config.m},), got {upstream.shape}")
        _, logits, selected, weights, hidden = self._forward_parts(x)
        coefficient = self.config.balance_coefficient if include_balance else 0.0
        grads_b, grads_a, router, balance = self._backprop(
            x, upstream[None, :], logits, selected, weights, hidden, coefficient
        )
        return LayerGradients(b=grads_b, a=grads_a, router=router, balance_loss=balance, selected=selected[0])

    def sample_objective(self, x, target, loss_kind=LossKind.SQUARED_ERROR, include_balance=True):
        """The scalar that ``backward`` differentiates, for finite-difference checks."""
        y, gate = self.forward(x)
        loss, _ = loss_and_grad(y, target, loss_kind)
        if include_balance and self.config.balance_coefficient > 0:
            balance, _ = balance_backward(gate.logits[None, :], gate.selected[None, :], self.gate_config)
            loss += self.config.balance_coefficient * balance
        return loss

    def batch_gradients(self, x, targets, loss_kind=LossKind.SQUARED_ERROR, balance_coefficient=None):
        x = self._check_batch(x)
        y, logits, selected, weights, hidden = self._forward_parts(x)
        task_loss, upstream = mean_loss_and_grad(y, targets, loss_kind)
        if balance_coefficient is None:
            balance_coefficient = self.config.balance_coefficient
        grads_b, grads_a, router, balance = self._backprop(
            x, upstream, logits, selected, weights, hidden, balance_coefficient
        )
        grads = {}
        for i in range(self.n_experts):
            grads[f"expert.{i}.b"] = grads_b[i]
            grads[f"expert.{i}.a"] = grads_a[i]
        if self.n_experts > 1:
            grads["router"] = router
        return BatchGradients(
            task_loss=task_loss,
            balance_loss=balance,
            grads=grads,
            load=load_fractions(selected, self.n_experts),
        )

    # ---------- equivalent weights ----------
    def expert_deltas(self):
        return np.stack([e.delta() for e in self.experts])

    def equivalent_weight(self, x):
        """W̃(x) = base + Σ R(x)ᵢ·sᵢ·bᵢ·aᵢ for one input."""
        gate = self.gate(x)
        weight = self.base.copy()
        for i in gate.selected:
            weight += gate.weights[i] * self.experts[i].delta()
        return weight

    def expected_equivalent_weight(self):
        """Expectation form under exchangeable routing, E[R(x)ᵢ] = 1/N."""
        return self.base + self.expert_deltas().mean(axis=0)


def init_layer(w0, config, seed):
    """
    Build a layer from a pretrained weight: SVD, segment choice, damped expert
    factors, residual compensation and router initialization.
    """
    w0 = as_matrix(w0, "w0")
    if w0.shape != (config.m, config.n):
        raise InvalidInput(f"w0 has shape {w0.shape}, config expects {(config.m, config.n)}")
    rng = np.random.default_rng(seed)
    n_experts = config.n_experts
    d = config.expert_width
    s = config.resolved_scale()

    if config.expert_init == "spectral":
        factors = svd_decompose(w0)
        scheme = config.scheme
        if scheme.variant is SchemeVariant.RANDOM and scheme.seed is None:
            scheme = SegmentScheme(SchemeVariant.RANDOM, seed=seed)
        starts = segment_starts(scheme, factors.h, n_experts, d)
        experts = [build_expert(extract_segment(factors, start, d), s, config.rho) for start in starts]
        if config.per_expert_scaling:
            scales = expert_aligned_scales([e.segment.spectral_mass for e in experts], s)
            for expert, scale in zip(experts, scales):
                expert.scale = scale
    else:
        if n_experts * d > min(config.m, config.n):
            raise InsufficientRank(f"total rank {config.total_rank} exceeds min(m, n) = {min(config.m, config.n)}")
        experts = [zero_init_expert(config.m, config.n, d, s, rng) for _ in range(n_experts)]

    residual = residual_compensation(experts, [e.scale for e in experts], n_experts)
    router = RouterState.initialize(config.n, n_experts, rng, mode=config.router_init, std=config.router_std)
    logger.debug(
        "initialized %s layer %dx%d: N=%d k=%d d=%d s=%.6g",
        config.expert_init, config.m, config.n, n_experts, config.top_k, d, s,
    )
    return SpectralMoeLayer(base=w0 - residual, residual=residual, experts=experts, router=router, config=config)


def equivalent_gradient_surrogate(b, a, g, s):
    """g̃ = s²(b·bᵀ·g + g·aᵀ·a)."""
    b, a, g = (np.asarray(v, dtype=np.float64) for v in (b, a, g))
    if b.ndim != 2 or a.ndim != 2 or b.shape[1] != a.shape[0] or g.shape != (b.shape[0], a.shape[1]):
        raise InvalidInput(f"shapes do not compose: b {b.shape}, a {a.shape}, g {g.shape}")
    return s * s * (b @ (b.T @ g) + (g @ a.T) @ a)


def equivalent_state(layer, x, target, loss_kind=LossKind.SQUARED_ERROR):
    """Per-input equivalent weight and the gate-weighted sum of expert surrogates."""
    y, gate = layer.forward(x)
    _, upstream = loss_and_grad(y, target, loss_kind)
    full_gradient = np.outer(upstream, x)
    gradient = np.zeros_like(full_gradient)
    for i in gate.selected:
        e = layer.experts[i]
        gradient += gate.weights[i] * equivalent_gradient_surrogate(e.b, e.a, gate.weights[i] * full_gradient, e.scale)
    return EquivalentState(weight=layer.equivalent_weight(x), gradient=gradient)


def first_order_update_check(layer, x, target, lr):
    """
    One SGD step on every selected expert with the router frozen. Returns the
    worst ‖ΔW̃ᵢ + lr·g̃ᵢ‖/‖lr·g̃ᵢ‖ over the selected experts, where g̃ᵢ is the
    surrogate built from expert i's full-rank gradient R(x)ᵢ·g·xᵀ. The layer is
    left untouched.
    """
    x = layer._check_vector(x)
    y, gate = layer.forward(x)
    _, upstream = loss_and_grad(y, target)
    grads = layer.backward(x, upstream, include_balance=False)
    full_gradient = np.outer(upstream, x)

    worst = 0.0
    for i in gate.selected:
        expert = layer.experts[i]
        step_b = -lr * grads.b[i]
        step_a = -lr * grads.a[i]
        delta = expert.scale * (step_b @ expert.a + expert.b @ step_a + step_b @ step_a)
        predicted = lr * equivalent_gradient_surrogate(
            expert.b, expert.a, gate.weights[i] * full_gradient, expert.scale
        )
        denominator = np.linalg.norm(predicted)
        numerator = np.linalg.norm(delta + predicted)
        if denominator == 0.0:
            if numerator > 0.0:
                return math.inf
            continue
        worst = max(worst, float(numerator / denominator))
    return worst


@dataclass(frozen=True)
class ScalingAlignment:
    relative_error: float
    coefficient_error: float
    noise_floor: float
    scale: float
    draws: int


def scaling_alignment_check(n, r, eta, draws, seed, scale=None, chunk=256):
    """
    Compare s²·mean(A₀ᵀA₀) with η·I for zero-initialized A₀ (r×n, uniform
    with bound 1/√n). Besides the Frobenius error the result carries the
    error of the mean diagonal coefficient, and the Monte Carlo noise level
    the Frobenius error would have if the scale were exactly aligned.
    """
    if draws < 1:
        raise InvalidInput(f"draws must be ≥ 1, got {draws}")
    s = optimal_scale(n, r, eta) if scale is None else float(scale)
    rng = np.random.default_rng(seed)
    bound = kaiming_uniform_bound(n)
    gram = np.zeros((n, n))
    remaining = draws
    while remaining > 0:
        count = min(chunk, remaining)
        a0 = rng.uniform(-bound, bound, size=(count * r, n))
        gram += a0.T @ a0
        remaining -= count
    scaled = (s * s / draws) * gram

    relative_error = float(np.linalg.norm(scaled - eta * np.eye(n)) / (eta * math.sqrt(n)))
    coefficient_error = abs(np.trace(scaled) / n - eta) / eta
    expected_coefficient = s * s * r / (3.0 * n * eta)
    noise_floor = expected_coefficient * math.sqrt((n - 0.2) / (r * draws))
    return ScalingAlignment(
        relative_error=relative_error,
        coefficient_error=float(coefficient_error),
        noise_floor=noise_floor,
        scale=s,
        draws=draws,
    )


def empirical_residual(layer, inputs):
    """Monte Carlo residual Σ mean_x[R(x)ᵢ]·sᵢ·bᵢ·aᵢ over a batch of inputs."""
    inputs = layer._check_batch(inputs)
    _, weights = topk_weights(layer.router.logits(inputs), layer.config.top_k)
    return np.tensordot(weights.mean(axis=0), layer.expert_deltas(), axes=1)


@dataclass(frozen=True)
class MismatchSummary:
    mean: float
    median: float
    p95: float
    max: float


def init_mismatch(layer, inputs):
    """Distribution of ‖W̃(x) − W⁰‖_F / ‖W⁰‖_F over inputs."""
    inputs = layer._check_batch(inputs)
    _, weights = topk_weights(layer.router.logits(inputs), layer.config.top_k)
    deltas = layer.expert_deltas().reshape(layer.n_experts, -1)
    deviation = (weights - 1.0 / layer.n_experts) @ deltas
    reference = np.linalg.norm(layer.original_weight())
    ratios = np.linalg.norm(deviation, axis=1) / reference
    return MismatchSummary(
        mean=float(ratios.mean()),
        median=float(np.median(ratios)),
        p95=float(np.percentile(ratios, 95)),
        max=float(ratios.max()),
    )
