#!/usr/bin/env python3
"""
Training loops for the low-rank layer and its full-rank references.

Every model exposes ``parameters()``, ``predict()`` and ``batch_gradients()``,
so one loop drives them all. Plain SGD is the optimizer the alignment theory
speaks about; momentum is offered for realism only.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from config.experiment_config import LayerSettings
from core.errors import InvalidInput, TrainingDiverged
from core.moe_layer import LayerConfig, init_layer
from core.objectives import LossKind
from core.reference_oracles import FullFtModel, UpcycledMoeModel
from core.routing import GateConfig, RouterState
from core.spectral_core import SegmentScheme, SchemeVariant

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "sgd-momentum")
METHODS = ("spectral-moe", "zero-init-moe", "single-lora", "full-ft", "upcycled-moe")
LOAD_WINDOW = 50


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    steps: int
    batch_size: int
    seed: int
    optimizer: str = "sgd"
    balance_coefficient: float = 1e-3
    eval_every: int = 50
    momentum: float = 0.9
    freeze_router: bool = False
    loss_kind: LossKind = LossKind.SQUARED_ERROR

    def __post_init__(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise InvalidInput(f"lr must be a finite non-negative number, got {self.lr}")
        if self.steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise InvalidInput("steps, batch_size and eval_every must be ≥ 1")
        if self.optimizer not in OPTIMIZERS:
            raise InvalidInput(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.balance_coefficient < 0:
            raise InvalidInput(f"balance_coefficient must be ≥ 0, got {self.balance_coefficient}")

    @classmethod
    def from_settings(cls, settings, seed, **overrides):
        values = dict(
            lr=settings.lr,
            steps=settings.steps,
            batch_size=settings.batch_size,
            seed=seed,
            optimizer=settings.optimizer,
            balance_coefficient=settings.balance_coefficient,
            eval_every=settings.eval_every,
            momentum=settings.momentum,
        )
        values.update(overrides)
        return cls(**values)


@dataclass
class TrainLog:
    task_loss: list = field(default_factory=list)
    balance_loss: list = field(default_factory=list)
    load: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    eval_steps: list = field(default_factory=list)
    eval_loss: list = field(default_factory=list)
    final_loss: float = math.nan
    final_accuracy: float = math.nan

    @property
    def steps(self):
        return len(self.task_loss)

    def min_load(self, window=LOAD_WINDOW):
        """
        Smallest per-expert share of the routed assignments, pooled over
        consecutive windows of about ``window`` steps (None pools the whole run).
        """
        loads = [l for l in self.load if l is not None]
        if not loads:
            return math.nan
        loads = np.stack(loads)
        chunks = 1 if window is None else max(1, len(loads) // window)
        return float(min(chunk.mean(axis=0).min() for chunk in np.array_split(loads, chunks)))

    def rows(self, **labels):
        for step in range(self.steps):
            load = self.load[step]
            yield {
                **labels,
                "step": step,
                "task_loss": self.task_loss[step],
                "balance_loss": self.balance_loss[step],
                "grad_norm": self.grad_norm[step],
                "min_load": None if load is None else float(load.min()),
                "max_load": None if load is None else float(load.max()),
            }


class SgdOptimizer:
    """SGD, optionally with heavy-ball momentum, updating arrays in place."""

    def __init__(self, params, lr, momentum=0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.buffers = {name: np.zeros_like(p) for name, p in params.items()} if momentum else {}

    def step(self, grads):
        for name, param in self.params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            if self.momentum:
                buffer = self.buffers[name]
                buffer *= self.momentum
                buffer += grad
                grad = buffer
            param -= self.lr * grad


def build_model(method, w_base, settings=None, seed=0, balance_coefficient=1e-3, router=None, **overrides):
    """
    Instantiate one of the compared methods on a pretrained weight.
    ``overrides`` replace fields of the layer settings (e.g. top_k for the
    routing-disabled variant). A given ``router`` replaces the freshly drawn
    one of every multi-expert method.
    """
    if method not in METHODS:
        raise InvalidInput(f"unknown method {method!r}; expected one of {METHODS}")
    settings = settings or LayerSettings()
    if overrides:
        settings = LayerSettings.model_validate({**settings.model_dump(), **overrides})
    m, n = w_base.shape

    if method == "full-ft":
        return FullFtModel(w_base)
    if method == "upcycled-moe":
        rng = np.random.default_rng(seed)
        gate = GateConfig(settings.n_experts, settings.top_k, balance_coefficient)
        drawn = RouterState.initialize(n, settings.n_experts, rng, mode=settings.router_init, std=settings.router_std)
        return UpcycledMoeModel.upcycle(w_base, gate, drawn if router is None else router)

    common = dict(
        m=m, n=n, total_rank=settings.total_rank, scale=settings.scale, eta=settings.eta,
        router_init=settings.router_init, router_std=settings.router_std,
        balance_coefficient=balance_coefficient,
    )
    if method == "single-lora":
        config = LayerConfig(
            n_experts=1, top_k=1, rho=1.0,
            scheme=SegmentScheme(SchemeVariant.PRINCIPAL), **common,
        )
    else:
        config = LayerConfig(
            n_experts=settings.n_experts, top_k=settings.top_k, rho=settings.rho,
            scheme=SegmentScheme(settings.scheme, settings.scheme_seed),
            per_expert_scaling=settings.per_expert_scaling and method == "spectral-moe",
            expert_init="spectral" if method == "spectral-moe" else "zero",
            **common,
        )
    layer = init_layer(w_base, config, seed)
    if router is not None and method != "single-lora":
        if router.w_z.shape != layer.router.w_z.shape:
            raise InvalidInput(f"router of shape {router.w_z.shape} does not fit a layer routing {layer.router.w_z.shape}")
        layer.router = router.copy()
    return layer


def train(model, task, config):
    """
    Run the optimizer on minibatches drawn from the task. The data stream
    depends only on ``config.seed``.

    Raises:
        TrainingDiverged: the loss or a gradient became non-finite.
    """
    x_eval, y_eval = task.eval_set
    probe = model.predict(x_eval[:1])
    if probe.shape != (1, task.m):
        raise InvalidInput(f"model produces {probe.shape[1]} outputs, task expects {task.m}")

    params = model.parameters()
    if config.freeze_router:
        params = {k: v for k, v in params.items() if k != "router"}
    momentum = config.momentum if config.optimizer == "sgd-momentum" else 0.0
    optimizer = SgdOptimizer(params, config.lr, momentum)
    rng = np.random.default_rng(config.seed)
    log = TrainLog()

    for step in range(config.steps):
        x, y = task.sample(rng, config.batch_size)
        result = model.batch_gradients(x, y, config.loss_kind, balance_coefficient=config.balance_coefficient)
        total = result.task_loss + config.balance_coefficient * result.balance_loss
        grad_norm = result.norm()
        if not (math.isfinite(total) and math.isfinite(grad_norm)):
            raise TrainingDiverged(step, total)
        log.task_loss.append(result.task_loss)
        log.balance_loss.append(result.balance_loss)
        log.load.append(result.load)
        log.grad_norm.append(grad_norm)
        optimizer.step(result.grads)

        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            eval_loss = task.loss(model)
            if not math.isfinite(eval_loss):
                raise TrainingDiverged(step, eval_loss)
            log.eval_steps.append(step + 1)
            log.eval_loss.append(eval_loss)
            logger.debug("step %d: eval loss %.6g", step + 1, eval_loss)

    log.final_loss = log.eval_loss[-1]
    log.final_accuracy = 1.0 - log.final_loss / task.reference_loss
    logger.info("trained %d steps: final loss %.6g", config.steps, log.final_loss)
    return log
