#!/usr/bin/env python3
"""
Brute-force references for the low-rank layer: full fine-tuning, an upcycled
full-rank MoE, central finite differences, and paired alignment traces.
"""
import logging
from dataclasses import dataclass

import numpy as np

from core.errors import InvalidInput, NumericalFailure
from core.objectives import BatchGradients, LossKind, loss_and_grad, mean_loss_and_grad
from core.routing import (
    GateConfig,
    RouterState,
    balance_backward,
    gate_backward,
    load_fractions,
    topk_weights,
)
from core.spectral_core import as_matrix

logger = logging.getLogger(__name__)


def _check_batch(x, n):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != n:
        raise InvalidInput(f"expected inputs of shape (T, {n}), got {x.shape}")
    return x


@dataclass
class FullFtModel:
    w: np.ndarray

    def __post_init__(self):
        self.w = as_matrix(self.w).copy()

    def copy(self):
        return FullFtModel(self.w)

    def parameters(self):
        return {"w": self.w}

    def predict(self, x):
        return _check_batch(x, self.w.shape[1]) @ self.w.T

    def batch_gradients(self, x, targets, loss_kind=LossKind.SQUARED_ERROR, balance_coefficient=None):
        x = _check_batch(x, self.w.shape[1])
        task_loss, upstream = mean_loss_and_grad(x @ self.w.T, targets, loss_kind)
        return BatchGradients(task_loss=task_loss, grads={"w": upstream.T @ x})


def full_ft_gradient(model, x, target, loss_kind=LossKind.SQUARED_ERROR):
    """∂L/∂W for one sample; for squared error this is (Wx − t)·xᵀ."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.w.shape[1],):
        raise InvalidInput(f"expected input of shape ({model.w.shape[1]},), got {x.shape}")
    _, upstream = loss_and_grad(model.w @ x, target, loss_kind)
    return np.outer(upstream, x)


@dataclass
class UpcycledMoeModel:
    """Full-rank MoE whose experts all start as copies of one pretrained weight."""
    experts: list
    router: RouterState
    config: GateConfig

    @classmethod
    def upcycle(cls, w0, config, router):
        w0 = as_matrix(w0, "w0")
        if router.n_experts != config.n_experts or router.input_dim != w0.shape[1]:
            raise InvalidInput(
                f"router of shape {router.w_z.shape} does not fit {config.n_experts} experts on {w0.shape[1]} inputs"
            )
        return cls(experts=[w0.copy() for _ in range(config.n_experts)], router=router.copy(), config=config)

    @property
    def n(self):
        return self.experts[0].shape[1]

    def copy(self):
        return UpcycledMoeModel([w.copy() for w in self.experts], self.router.copy(), self.config)

    def parameters(self):
        params = {f"expert.{i}.w": w for i, w in enumerate(self.experts)}
        if self.config.n_experts > 1:
            params["router"] = self.router.w_z
        return params

    def _forward_parts(self, x):
        logits = self.router.logits(x)
        selected, weights = topk_weights(logits, self.config.top_k)
        outputs = [x @ w.T for w in self.experts]
        y = np.zeros((x.shape[0], self.experts[0].shape[0]))
        for i, out in enumerate(outputs):
            y += weights[:, i:i + 1] * out
        return y, logits, selected, weights, outputs

    def predict(self, x):
        return self._forward_parts(_check_batch(x, self.n))[0]

    def _backprop(self, x, upstream, logits, selected, weights, outputs, balance_coefficient):
        expert_grads = []
        contributions = np.zeros_like(weights)
        for i, out in enumerate(outputs):
            chosen = np.any(selected == i, axis=1)
            weighted = upstream * (weights[:, i:i + 1] * chosen[:, None])
            expert_grads.append(weighted.T @ x)
            contributions[:, i] = np.where(chosen, np.sum(upstream * out, axis=1), 0.0)
        logit_grad = gate_backward(weights, contributions)
        balance, balance_grad = balance_backward(logits, selected, self.config)
        if balance_coefficient > 0:
            logit_grad = logit_grad + balance_coefficient * balance_grad
        return expert_grads, x.T @ logit_grad, balance

    def batch_gradients(self, x, targets, loss_kind=LossKind.SQUARED_ERROR, balance_coefficient=None):
        x = _check_batch(x, self.n)
        y, logits, selected, weights, outputs = self._forward_parts(x)
        task_loss, upstream = mean_loss_and_grad(y, targets, loss_kind)
        if balance_coefficient is None:
            balance_coefficient = self.config.balance_coefficient
        expert_grads, router_grad, balance = self._backprop(
            x, upstream, logits, selected, weights, outputs, balance_coefficient
        )
        grads = {f"expert.{i}.w": g for i, g in enumerate(expert_grads)}
        if self.config.n_experts > 1:
            grads["router"] = router_grad
        return BatchGradients(
            task_loss=task_loss,
            balance_loss=balance,
            grads=grads,
            load=load_fractions(selected, self.config.n_experts),
        )


@dataclass(frozen=True)
class UpcycledStep:
    output: np.ndarray
    expert_grads: list
    router_grad: np.ndarray


def upcycled_forward_backward(model, x, target, loss_kind=LossKind.SQUARED_ERROR):
    """Single-sample forward and analytic backward without the balance term."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n,):
        raise InvalidInput(f"expected input of shape ({model.n},), got {x.shape}")
    batch = x[None, :]
    y, logits, selected, weights, outputs = model._forward_parts(batch)
    _, upstream = loss_and_grad(y[0], target, loss_kind)
    expert_grads, router_grad, _ = model._backprop(
        batch, upstream[None, :], logits, selected, weights, outputs, 0.0
    )
    return UpcycledStep(output=y[0], expert_grads=expert_grads, router_grad=router_grad)


def finite_diff_gradient(f, theta, step=1e-6):
    """Central differences (f(θ+εE) − f(θ−εE)) / 2ε, one entry at a time."""
    if step <= 0:
        raise InvalidInput(f"finite-difference step must be positive, got {step}")
    theta = np.array(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for index in np.ndindex(theta.shape):
        original = theta[index]
        theta[index] = original + step
        upper = f(theta.copy())
        theta[index] = original - step
        lower = f(theta.copy())
        theta[index] = original
        if not (np.isfinite(upper) and np.isfinite(lower)):
            raise NumericalFailure(f"objective is not finite around entry {index}")
        grad[index] = (upper - lower) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class AlignmentTrace:
    """Row t holds the per-expert values after t SGD steps (row 0 is the initial state)."""
    divergence: np.ndarray
    displacement: np.ndarray

    @property
    def final(self):
        return self.divergence[-1]


def _expert_equivalents(layer):
    return [layer.base + e.delta() for e in layer.experts]


def _check_alignment_pair(lora_model, ft_model, lr_lora, lr_ft):
    if not all(e.is_zero_init for e in lora_model.experts):
        raise InvalidInput("alignment traces need zero-initialized experts")
    if lora_model.n_experts != ft_model.config.n_experts or lora_model.config.top_k != ft_model.config.top_k:
        raise InvalidInput("low-rank and full-rank models disagree on the gate configuration")
    if not np.array_equal(lora_model.router.w_z, ft_model.router.w_z):
        raise InvalidInput("low-rank and full-rank models must share the router weights")
    w0 = lora_model.original_weight()
    if any(not np.allclose(w, w0, rtol=1e-12, atol=0.0) for w in ft_model.experts):
        raise InvalidInput("full-rank experts must all start at the low-rank model's pretrained weight")
    if lr_lora > 0 and not np.isclose(lr_ft / lr_lora, lora_model.config.eta):
        logger.warning("learning-rate ratio %.6g differs from eta=%.6g", lr_ft / lr_lora, lora_model.config.eta)


def alignment_trace(lora_model, ft_model, task, steps, lr_lora, lr_ft, batch_size=16, seed=0):
    """
    Train copies of a zero-init low-rank MoE and an upcycled full-rank MoE on
    the same batches with both routers frozen, tracking ‖(base + sᵢbᵢaᵢ) − Wᵢ‖_F.
    """
    return averaged_alignment_trace([lora_model], ft_model, task, steps, lr_lora, lr_ft, batch_size, seed)


def averaged_alignment_trace(lora_models, ft_model, task, steps, lr_lora, lr_ft, batch_size=16, seed=0):
    """
    ``alignment_trace`` over several zero-init draws of the same low-rank MoE.
    Every draw sees the same batches as the full-rank twin, and the divergence
    is taken between the draw-averaged equivalent weights and Wᵢ.
    """
    if not lora_models:
        raise InvalidInput("averaged alignment trace needs at least one low-rank model")
    for lora_model in lora_models:
        _check_alignment_pair(lora_model, ft_model, lr_lora, lr_ft)
    w0 = lora_models[0].original_weight()
    if any(not np.allclose(m.original_weight(), w0) for m in lora_models[1:]):
        raise InvalidInput("low-rank draws must share the pretrained weight")

    loras = [m.copy() for m in lora_models]
    ft = ft_model.copy()
    lora_params = [{k: v for k, v in lora.parameters().items() if k != "router"} for lora in loras]
    ft_params = {k: v for k, v in ft.parameters().items() if k != "router"}
    rng = np.random.default_rng(seed)

    def measure():
        equivalents = np.mean([_expert_equivalents(lora) for lora in loras], axis=0)
        return (
            [np.linalg.norm(eq - w) for eq, w in zip(equivalents, ft.experts)],
            [np.linalg.norm(w - w0) for w in ft.experts],
        )

    divergence, displacement = [], []
    row_div, row_disp = measure()
    divergence.append(row_div)
    displacement.append(row_disp)
    for _ in range(steps):
        x, targets = task.sample(rng, batch_size)
        for lora, params in zip(loras, lora_params):
            grads = lora.batch_gradients(x, targets, balance_coefficient=0.0).grads
            for name, param in params.items():
                param -= lr_lora * grads[name]
        ft_grads = ft.batch_gradients(x, targets, balance_coefficient=0.0).grads
        for name, param in ft_params.items():
            param -= lr_ft * ft_grads[name]
        row_div, row_disp = measure()
        divergence.append(row_div)
        displacement.append(row_disp)
    return AlignmentTrace(divergence=np.array(divergence), displacement=np.array(displacement))
