#!/usr/bin/env python3
"""
Loss functions and the gradient container shared by every trainable model.

Squared error is ½‖y−t‖², so its gradient is y−t with no factor of 2.
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from core.errors import InvalidInput


class LossKind(str, Enum):
    SQUARED_ERROR = "squared-error"
    SOFTMAX_CROSS_ENTROPY = "softmax-cross-entropy"


def _log_softmax(y):
    shifted = y - np.max(y, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def loss_and_grad(y, target, loss_kind=LossKind.SQUARED_ERROR):
    """
    Per-sample loss summed over a batch (rows) and its gradient w.r.t. y.
    Works on a single vector or on a (T, m) batch.
    """
    try:
        kind = LossKind(loss_kind)
    except ValueError:
        raise InvalidInput(f"unsupported loss {loss_kind!r}") from None
    y = np.asarray(y, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if y.shape != target.shape:
        raise InvalidInput(f"output shape {y.shape} does not match target shape {target.shape}")

    if kind is LossKind.SQUARED_ERROR:
        residual = y - target
        return 0.5 * float(np.sum(np.square(residual))), residual
    log_probs = _log_softmax(y)
    loss = -float(np.sum(target * log_probs))
    grad = np.exp(log_probs) * np.sum(target, axis=-1, keepdims=True) - target
    return loss, grad


def mean_loss_and_grad(y, target, loss_kind=LossKind.SQUARED_ERROR):
    """Batch-mean loss of a (T, m) batch and the matching upstream gradient."""
    y = np.atleast_2d(y)
    loss, grad = loss_and_grad(y, np.atleast_2d(target), loss_kind)
    count = y.shape[0]
    return loss / count, grad / count


@dataclass
class BatchGradients:
    """
    Gradients of one batch, keyed like the model's ``parameters()``.
    ``balance_loss`` is the unweighted L_b; its gradient enters with the coefficient.
    """
    task_loss: float
    balance_loss: float = 0.0
    grads: dict = field(default_factory=dict)
    load: np.ndarray | None = None

    def norm(self):
        return float(np.sqrt(sum(np.sum(np.square(g)) for g in self.grads.values())))
