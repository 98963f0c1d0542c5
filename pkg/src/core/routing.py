#!/usr/bin/env python3
"""
Softmax and top-k gating, the load-balance loss, and router moment estimates.

Ties between equal logits go to the lower expert index.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np

from core.errors import InvalidInput

logger = logging.getLogger(__name__)

DEFAULT_ROUTER_STD = 0.02
DEFAULT_BALANCE_COEFFICIENT = 1e-3


@dataclass(frozen=True)
class GateConfig:
    n_experts: int
    top_k: int
    balance_coefficient: float = DEFAULT_BALANCE_COEFFICIENT

    def __post_init__(self):
        if self.n_experts < 1:
            raise InvalidInput(f"n_experts must be ≥ 1, got {self.n_experts}")
        if not 1 <= self.top_k <= self.n_experts:
            raise InvalidInput(f"top_k must lie in [1, {self.n_experts}], got {self.top_k}")
        if self.balance_coefficient < 0:
            raise InvalidInput(f"balance_coefficient must be ≥ 0, got {self.balance_coefficient}")


@dataclass
class RouterState:
    """Gating weights w_z of shape (input_dim, n_experts); logits are w_zᵀx."""
    w_z: np.ndarray

    @property
    def input_dim(self):
        return self.w_z.shape[0]

    @property
    def n_experts(self):
        return self.w_z.shape[1]

    def copy(self):
        return RouterState(self.w_z.copy())

    def logits(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise InvalidInput(f"input dimension {x.shape[-1]} does not match router rows {self.input_dim}")
        return x @ self.w_z

    @classmethod
    def initialize(cls, input_dim, n_experts, rng, mode="symmetric", std=DEFAULT_ROUTER_STD):
        """
        ``symmetric`` draws orthogonal columns of equal norm std·√input_dim, so for
        isotropic inputs the logits are i.i.d. across experts. ``gaussian`` draws
        i.i.d. N(0, std²) entries. Symmetric falls back to gaussian when the
        input dimension is smaller than the expert count.
        """
        if mode not in ("symmetric", "gaussian"):
            raise InvalidInput(f"unknown router init mode {mode!r}")
        gaussian = rng.normal(0.0, std, size=(input_dim, n_experts))
        if mode == "gaussian" or input_dim < n_experts:
            if mode == "symmetric":
                logger.warning("router input dim %d < %d experts, using gaussian init", input_dim, n_experts)
            return cls(gaussian)
        q, r = np.linalg.qr(gaussian)
        q = q * np.sign(np.diag(r))
        return cls(q * (std * np.sqrt(input_dim)))


@dataclass(frozen=True)
class GateOutput:
    selected: np.ndarray
    weights: np.ndarray
    dense_probs: np.ndarray
    logits: np.ndarray


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    shifted = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return shifted / np.sum(shifted, axis=axis, keepdims=True)


def select_top_k(logits, k):
    """Indices of the k largest logits along the last axis, largest first."""
    order = np.argsort(-np.asarray(logits, dtype=np.float64), axis=-1, kind="stable")
    return order[..., :k]


def topk_weights(logits, k):
    """
    Batched top-k gate. Returns (selected, weights) where ``weights`` has the
    logits' shape and holds the softmax renormalized over the selected set.
    """
    logits = np.asarray(logits, dtype=np.float64)
    selected = select_top_k(logits, k)
    chosen = np.take_along_axis(logits, selected, axis=-1)
    # first selected logit is the maximum
    mass = np.exp(chosen - chosen[..., :1])
    mass /= np.sum(mass, axis=-1, keepdims=True)
    weights = np.zeros_like(logits)
    np.put_along_axis(weights, selected, mass, axis=-1)
    return selected, weights


def dense_gate(state, x):
    return softmax(state.logits(x))


def topk_gate(state, x, config):
    if config.n_experts != state.n_experts:
        raise InvalidInput(f"gate config has {config.n_experts} experts, router has {state.n_experts}")
    logits = state.logits(x)
    if logits.ndim != 1:
        raise InvalidInput("topk_gate expects a single input vector")
    selected, weights = topk_weights(logits, config.top_k)
    return GateOutput(selected=selected, weights=weights, dense_probs=softmax(logits), logits=logits)


def balance_loss(assignment_counts, dense_probs_mean, config, token_count):
    """L_b = Σ fᵢ·Pᵢ with fᵢ = N/(k·T)·countᵢ. Equals 1 under perfect balance."""
    if token_count <= 0:
        raise InvalidInput("balance loss needs at least one token")
    counts = np.asarray(assignment_counts, dtype=np.float64)
    probs = np.asarray(dense_probs_mean, dtype=np.float64)
    if counts.shape != (config.n_experts,) or probs.shape != (config.n_experts,):
        raise InvalidInput(f"counts and probabilities must have length {config.n_experts}")
    if not np.isclose(counts.sum(), config.top_k * token_count):
        raise InvalidInput(f"assignment counts sum to {counts.sum()}, expected k·T = {config.top_k * token_count}")
    fractions = config.n_experts / (config.top_k * token_count) * counts
    return float(fractions @ probs)


def load_fractions(selected, n_experts):
    """Share of all k·T assignments each expert received (sums to 1)."""
    counts = np.bincount(np.ravel(selected), minlength=n_experts).astype(np.float64)
    return counts / counts.sum()


def balance_loss_from_batch(logits, config):
    """Evaluate L_b from a (T, N) batch of logits. Returns (loss, counts, mean probs)."""
    logits = np.atleast_2d(logits)
    selected = select_top_k(logits, config.top_k)
    counts = np.bincount(selected.ravel(), minlength=config.n_experts).astype(np.float64)
    probs_mean = softmax(logits).mean(axis=0)
    return balance_loss(counts, probs_mean, config, logits.shape[0]), counts, probs_mean


def theoretical_moments(n_experts, top_k):
    """Mean 1/N and variance (N−k)/(k·N²) of one expert's gate weight."""
    GateConfig(n_experts, top_k)
    mean = 1.0 / n_experts
    variance = (n_experts - top_k) / (top_k * n_experts ** 2)
    return mean, variance


@dataclass(frozen=True)
class GaussianLogits:
    """Sampler of i.i.d. N(0, scale²) logits, picklable for worker processes."""
    scale: float = 1.0

    def __call__(self, rng, count, n_experts):
        return self.scale * rng.standard_normal((count, n_experts))


def gaussian_logits(scale=1.0):
    """The default exchangeable logit distribution."""
    return GaussianLogits(float(scale))


@dataclass(frozen=True)
class MomentEstimate:
    mean: np.ndarray
    variance: np.ndarray
    samples: int

    @property
    def std(self):
        return np.sqrt(np.maximum(self.variance, 0.0))


def _moment_shard(config, logit_sampler, count, seed_seq, chunk_size):
    rng = np.random.default_rng(seed_seq)
    total = np.zeros(config.n_experts)
    total_sq = np.zeros(config.n_experts)
    remaining = count
    while remaining > 0:
        batch = min(chunk_size, remaining)
        logits = logit_sampler(rng, batch, config.n_experts)
        _, weights = topk_weights(logits, config.top_k)
        total += weights.sum(axis=0)
        total_sq += np.square(weights).sum(axis=0)
        remaining -= batch
    return total, total_sq


def estimate_moments(config, logit_sampler, samples, seed, shards=1, jobs=1, chunk_size=100_000):
    """
    Monte Carlo estimate of E[R(x)ᵢ] and Var(R(x)ᵢ) per expert.

    Samples are split into ``shards`` independent streams spawned from ``seed``.
    Per-shard sums are merged exactly, so the result depends on
    (seed, samples, shards) and never on ``jobs``.
    """
    if samples < 1:
        raise InvalidInput(f"samples must be ≥ 1, got {samples}")
    shards = max(1, min(shards, samples))
    counts = [samples // shards + (1 if i < samples % shards else 0) for i in range(shards)]
    children = np.random.SeedSequence(seed).spawn(shards)

    if jobs > 1 and shards > 1:
        shard = partial(_moment_shard, config, logit_sampler, chunk_size=chunk_size)
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(shard, counts, children))
    else:
        parts = [_moment_shard(config, logit_sampler, c, s, chunk_size) for c, s in zip(counts, children)]

    total = sum(p[0] for p in parts)
    total_sq = sum(p[1] for p in parts)
    mean = total / samples
    variance = np.maximum(total_sq / samples - np.square(mean), 0.0)
    logger.debug("router moments over %d samples: mean=%s", samples, mean)
    return MomentEstimate(mean=mean, variance=variance, samples=samples)


def gate_backward(weights, contributions):
    """
    ∂L/∂z through the renormalized top-k softmax, given cᵢ = ∂L/∂Rᵢ.
    Unselected experts have zero weight and so receive zero gradient.
    """
    return weights * (contributions - np.sum(weights * contributions, axis=-1, keepdims=True))


def balance_backward(logits, selected, config):
    """
    L_b of a (T, N) batch and ∂L_b/∂z, with the load fractions f treated as
    constants (they are piecewise constant in the logits).
    """
    logits = np.atleast_2d(logits)
    token_count = logits.shape[0]
    probs = softmax(logits)
    counts = np.bincount(np.ravel(selected), minlength=config.n_experts).astype(np.float64)
    fractions = config.n_experts / (config.top_k * token_count) * counts
    loss = float(fractions @ probs.mean(axis=0))
    grad = probs * (fractions[None, :] - (probs @ fractions)[:, None]) / token_count
    return loss, grad
