#!/usr/bin/env python3
"""
Synthetic teacher-student regression tasks.

Every task starts from a "pretrained" weight w_base and asks the model to
learn w_star = w_base + Δ, where Δ is drawn in w_base's singular basis with a
chosen energy profile over the spectrum. Accuracy is loss retention
1 − L/L_ref, with L_ref the loss of w_base itself.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property

import numpy as np

from core.errors import InvalidInput
from core.objectives import LossKind, mean_loss_and_grad
from core.routing import RouterState, topk_weights
from core.spectral_core import SchemeVariant, SegmentScheme, extract_segment, segment_starts, svd_decompose

logger = logging.getLogger(__name__)

DEFAULT_BAND_WIDTH = 8
EVAL_STREAM = 7919


class SpectrumProfile(str, Enum):
    FLAT = "flat"
    POWER_LAW = "power-law"
    SEGMENT = "segment"
    MIXED_SEGMENT = "mixed-segment"


def random_orthonormal(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q * np.sign(np.diag(r))


def make_pretrained_weight(m, n, seed, decay=0.5):
    """Random singular vectors with singular values (i+1)^(-decay)."""
    if m < 1 or n < 1:
        raise InvalidInput(f"dimensions must be positive, got {m}×{n}")
    rng = np.random.default_rng(seed)
    h = min(m, n)
    u = random_orthonormal(rng, m, h)
    v = random_orthonormal(rng, n, h)
    s = (np.arange(h) + 1.0) ** -decay
    return (u * s) @ v.T


@dataclass(frozen=True, eq=False)
class TeacherTask:
    w_star: np.ndarray
    w_base: np.ndarray
    noise_std: float
    seed: int
    band: tuple | None = None
    input_shift: np.ndarray | None = None
    eval_size: int = 512
    loss_kind: LossKind = field(default=LossKind.SQUARED_ERROR)
    router: RouterState | None = None
    noise_projection: np.ndarray | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.w_star)):
            raise InvalidInput("w_star must be finite")
        if self.noise_std < 0:
            raise InvalidInput(f"noise_std must be ≥ 0, got {self.noise_std}")

    @property
    def m(self):
        return self.w_star.shape[0]

    @property
    def n(self):
        return self.w_star.shape[1]

    @property
    def delta(self):
        return self.w_star - self.w_base

    def _inputs(self, rng, count):
        x = rng.standard_normal((count, self.n))
        if self.noise_projection is not None:
            x = x @ self.noise_projection
        if self.input_shift is not None:
            x += self.input_shift
        return x

    def targets(self, x):
        return x @ self.w_star.T

    def sample(self, rng, batch_size):
        x = self._inputs(rng, batch_size)
        y = self.targets(x)
        if self.noise_std > 0:
            y = y + self.noise_std * rng.standard_normal(y.shape)
        return x, y

    @cached_property
    def eval_set(self):
        """Fixed held-out inputs with noiseless targets."""
        rng = np.random.default_rng([self.seed, EVAL_STREAM])
        x = self._inputs(rng, self.eval_size)
        return x, self.targets(x)

    def loss(self, model):
        x, y = self.eval_set
        return mean_loss_and_grad(model.predict(x), y, self.loss_kind)[0]

    @cached_property
    def reference_loss(self):
        x, y = self.eval_set
        return mean_loss_and_grad(x @ self.w_base.T, y, self.loss_kind)[0]

    def accuracy(self, model):
        return 1.0 - self.loss(model) / self.reference_loss


@dataclass(frozen=True, eq=False)
class GatedTeacherTask(TeacherTask):
    """
    Targets y = w_base·x + Σᵢ Rᵢ(x)·Tᵢ·x, where R is the top-k gate of the
    task's router. ``w_star`` holds w_base plus the mean slot shift, the
    weight an input-blind model would aim for.
    """
    slot_shifts: np.ndarray | None = None
    top_k: int = 1

    def targets(self, x):
        _, weights = topk_weights(self.router.logits(x), self.top_k)
        return x @ self.w_base.T + np.einsum("ti,imn,tn->tm", weights, self.slot_shifts, x)


def _profile_weights(profile, h, band):
    profile = SpectrumProfile(profile)
    if profile is SpectrumProfile.FLAT:
        return np.ones(h)
    if profile is SpectrumProfile.POWER_LAW:
        return 1.0 / (np.arange(h) + 1.0)
    if profile is SpectrumProfile.MIXED_SEGMENT:
        raise InvalidInput("mixed-segment tasks are routed, build them with make_mixed_segment_task")
    start, width = band
    weights = np.zeros(h)
    weights[start:start + width] = 1.0
    return weights


def make_teacher_task(m, n, spectrum_profile, noise_std, seed, w_base=None, band=None,
                      shift_scale=0.5, input_shift=None, eval_size=512):
    """
    Build a task whose shift Δ = w_star − w_base has the requested energy
    profile over w_base's singular directions. ``band`` = (start, width)
    selects the directions of the segment profile; ‖Δ‖ = shift_scale·‖w_base‖.
    """
    if m < 1 or n < 1:
        raise InvalidInput(f"dimensions must be positive, got {m}×{n}")
    rng = np.random.default_rng(seed)
    if w_base is None:
        w_base = make_pretrained_weight(m, n, rng.integers(2 ** 32))
    elif w_base.shape != (m, n):
        raise InvalidInput(f"w_base has shape {w_base.shape}, expected {(m, n)}")
    factors = svd_decompose(w_base)
    h = factors.h
    if band is None:
        band = (0, min(DEFAULT_BAND_WIDTH, h))
    start, width = band
    if start < 0 or width < 1 or start + width > h:
        raise InvalidInput(f"band {band} outside spectrum of size {h}")

    weights = _profile_weights(spectrum_profile, h, band)
    coefficients = rng.standard_normal((h, h)) * np.sqrt(np.outer(weights, weights))
    delta = factors.u @ coefficients @ factors.v.T
    delta *= shift_scale * np.linalg.norm(w_base) / np.linalg.norm(delta)
    return TeacherTask(
        w_star=w_base + delta,
        w_base=np.array(w_base, dtype=np.float64),
        noise_std=float(noise_std),
        seed=int(seed),
        band=(int(start), int(width)),
        input_shift=input_shift,
        eval_size=eval_size,
    )


def band_energy_fraction(task, band=None):
    """Share of ‖Δ‖² inside the given band of w_base's singular directions."""
    start, width = band if band is not None else task.band
    factors = svd_decompose(task.w_base)
    u_band = factors.u[:, start:start + width]
    v_band = factors.v[:, start:start + width]
    inside = np.linalg.norm(u_band.T @ task.delta @ v_band) ** 2
    return float(inside / np.linalg.norm(task.delta) ** 2)


def subspace_overlap(first, second, rank):
    """Largest principal-angle cosine between the top-``rank`` column spaces."""
    u1 = np.linalg.svd(first, full_matrices=False)[0][:, :rank]
    u2 = np.linalg.svd(second, full_matrices=False)[0][:, :rank]
    return float(np.linalg.svd(u1.T @ u2, compute_uv=False)[0])


def make_sequential_tasks(count, m, n, seed, band_width=None, noise_std=0.0, shift_scale=0.5,
                          input_shift=2.0, eval_size=512):
    """
    Tasks that share one pretrained weight but shift it in disjoint singular
    bands, with inputs displaced toward each task's band. A single task
    degenerates to ``make_teacher_task``.
    """
    if count < 1:
        raise InvalidInput(f"count must be ≥ 1, got {count}")
    if count == 1:
        return [make_teacher_task(m, n, SpectrumProfile.SEGMENT, noise_std, seed,
                                  shift_scale=shift_scale, eval_size=eval_size)]

    w_base = make_pretrained_weight(m, n, seed)
    factors = svd_decompose(w_base)
    h = factors.h
    width = band_width or min(DEFAULT_BAND_WIDTH, h // count)
    if width < 1 or count * width > h:
        raise InvalidInput(f"{count} disjoint bands of width {width} do not fit in a spectrum of size {h}")

    tasks = []
    for j, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        start = j * width
        direction = factors.v[:, start:start + width].sum(axis=1) / np.sqrt(width)
        tasks.append(make_teacher_task(
            m, n, SpectrumProfile.SEGMENT, noise_std, int(child.generate_state(1)[0]),
            w_base=w_base, band=(start, width), shift_scale=shift_scale,
            input_shift=input_shift * direction if input_shift > 0 else None,
            eval_size=eval_size,
        ))
    logger.debug("built %d sequential tasks with band width %d", count, width)
    return tasks


def _slot_segments(w_base, n_experts, width):
    factors = svd_decompose(w_base)
    starts = segment_starts(SegmentScheme(SchemeVariant.ORIGINAL), factors.h, n_experts, width)
    return [extract_segment(factors, start, width).product() for start in starts]


def _check_router(router, n):
    if router.input_dim != n:
        raise InvalidInput(f"router reads {router.input_dim} inputs, task has {n}")


def make_mixed_segment_task(m, n, seed, router, top_k, width, gain=8.0, noise_std=0.0, eval_size=512):
    """
    A gated teacher over isotropic inputs. Slot i owns the i-th evenly spaced
    width-``width`` singular segment of w_base and shifts it by
    ``gain``·U′S′V′ᵀ; the router picks ``top_k`` slots per input. Inputs that
    pick different slots need different parts of the spectrum moved, so no
    single matrix fits every input.
    """
    _check_router(router, n)
    if not 1 <= top_k <= router.n_experts:
        raise InvalidInput(f"top_k must lie in [1, {router.n_experts}], got {top_k}")
    rng = np.random.default_rng(seed)
    w_base = make_pretrained_weight(m, n, rng.integers(2 ** 32))
    shifts = gain * np.stack(_slot_segments(w_base, router.n_experts, width))
    logger.debug("mixed-segment task: %d slots of width %d, top-%d, gain %.3g",
                 router.n_experts, width, top_k, gain)
    return GatedTeacherTask(
        w_star=w_base + shifts.mean(axis=0),
        w_base=w_base,
        noise_std=float(noise_std),
        seed=int(seed),
        eval_size=eval_size,
        router=router.copy(),
        slot_shifts=shifts,
        top_k=int(top_k),
    )


def make_routed_tasks(count, m, n, seed, router, top_k, width, gain=4.0, input_shift=2.0,
                      noise_std=0.0, eval_size=512):
    """
    Sequential tasks that each own a disjoint group of ``top_k`` experts under a
    fixed router with orthogonal columns. Task j moves the evenly spaced
    singular segments of its experts jk..jk+k−1 by ``gain``·U′S′V′ᵀ. Its
    inputs carry a mean of norm ``input_shift`` along the group's router
    columns and isotropic noise orthogonal to every router column, so top-k
    routing sends each task to its own group and nowhere else.
    """
    _check_router(router, n)
    n_experts = router.n_experts
    if count < 1:
        raise InvalidInput(f"count must be ≥ 1, got {count}")
    if count * top_k > n_experts:
        raise InvalidInput(f"{count} tasks of {top_k} experts need {count * top_k}, router has {n_experts}")
    if n <= n_experts:
        raise InvalidInput(f"routed tasks need more inputs than experts (n={n}, N={n_experts})")
    if input_shift <= 0:
        raise InvalidInput(f"input_shift must be positive, got {input_shift}")

    w_base = make_pretrained_weight(m, n, seed)
    segments = _slot_segments(w_base, n_experts, width)
    q = np.linalg.qr(router.w_z)[0]
    projection = np.eye(n) - q @ q.T
    columns = router.w_z / np.linalg.norm(router.w_z, axis=0)

    tasks = []
    for j, child in enumerate(np.random.SeedSequence(seed).spawn(count)):
        group = list(range(j * top_k, (j + 1) * top_k))
        direction = columns[:, group].sum(axis=1)
        tasks.append(TeacherTask(
            w_star=w_base + gain * sum(segments[i] for i in group),
            w_base=w_base,
            noise_std=float(noise_std),
            seed=int(child.generate_state(1)[0]),
            input_shift=input_shift * direction / np.linalg.norm(direction),
            eval_size=eval_size,
            router=router.copy(),
            noise_projection=projection,
        ))
    logger.debug("built %d routed tasks over %d experts", count, n_experts)
    return tasks
