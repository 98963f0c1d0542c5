#!/usr/bin/env python3
"""
Spectral decomposition of pretrained weights and construction of expert adapters.

A pretrained weight W⁰ (m×n) is split into contiguous blocks of singular
triples. Each expert is seeded from one block:

    b = √(1/(s·ρ)) · U′ S′^½        a = √(1/(s·ρ)) · S′^½ V′ᵀ

so that s·b·a = (1/ρ)·U′S′V′ᵀ regardless of s. The base layer is then
compensated by W_res = (1/N)·Σ sᵢ·bᵢ·aᵢ so the expected initial weight under
uniform routing is exactly W⁰.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from core.errors import InsufficientRank, InvalidInput, NumericalFailure

logger = logging.getLogger(__name__)


def as_matrix(w, name="w"):
    arr = np.asarray(w, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise InvalidInput(f"{name} must be a non-empty 2D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInput(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD W = u·diag(s)·vᵀ with h = min(m, n)."""
    u: np.ndarray
    s: np.ndarray
    v: np.ndarray

    @property
    def m(self):
        return self.u.shape[0]

    @property
    def n(self):
        return self.v.shape[0]

    @property
    def h(self):
        return self.s.shape[0]

    def reconstruct(self):
        return (self.u * self.s) @ self.v.T


class SchemeVariant(str, Enum):
    ORIGINAL = "original"
    PRINCIPAL = "principal"
    MINOR = "minor"
    RANDOM = "random"


@dataclass(frozen=True)
class SegmentScheme:
    variant: SchemeVariant = SchemeVariant.ORIGINAL
    seed: int | None = None

    def __post_init__(self):
        # accept plain strings from configs
        object.__setattr__(self, "variant", SchemeVariant(self.variant))


@dataclass(frozen=True)
class SpectralSegment:
    start: int
    width: int
    u_seg: np.ndarray
    s_seg: np.ndarray
    v_seg: np.ndarray
    spectral_mass: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "spectral_mass", float(np.sum(self.s_seg)))

    def product(self):
        return (self.u_seg * self.s_seg) @ self.v_seg.T


@dataclass
class ExpertAdapter:
    """
    One expert's low-rank pair. ``segment`` is None for zero-initialized experts.
    The arrays are updated in place by the owning layer's optimizer.
    """
    b: np.ndarray
    a: np.ndarray
    scale: float
    segment: SpectralSegment | None = None

    @property
    def width(self):
        return self.b.shape[1]

    @property
    def is_zero_init(self):
        return self.segment is None

    def product(self):
        return self.b @ self.a

    def delta(self):
        return self.scale * (self.b @ self.a)

    def copy(self):
        return ExpertAdapter(self.b.copy(), self.a.copy(), self.scale, self.segment)


def svd_decompose(w):
    """
    Thin SVD through LAPACK's divide-and-conquer driver.

    Raises:
        InvalidInput: empty, non-2D or non-finite input.
        NumericalFailure: LAPACK did not converge.
    """
    w = as_matrix(w)
    try:
        u, s, vt = np.linalg.svd(w, full_matrices=False)
    except np.linalg.LinAlgError as e:
        raise NumericalFailure(f"SVD did not converge for {w.shape} matrix: {e}") from e
    logger.debug("svd of %s matrix, top singular value %.6g", w.shape, s[0])
    return SvdFactors(u=u, s=s, v=vt.T)


def segment_starts(scheme, h, n_experts, d):
    """
    Start index of each expert's segment, in expert order.

    Original spreads experts evenly (stride h/N), Principal packs them at the
    top of the spectrum, Minor packs them at the bottom and Random picks
    distinct width-d blocks with a seeded generator.
    """
    if h < 1 or n_experts < 1 or d < 1:
        raise InvalidInput(f"h, n_experts and d must be positive (got h={h}, N={n_experts}, d={d})")
    if n_experts * d > h:
        raise InsufficientRank(f"{n_experts} experts of width {d} need {n_experts * d} singular triples, only {h} available")

    variant = scheme.variant
    if variant is SchemeVariant.ORIGINAL:
        if h % n_experts != 0:
            raise InvalidInput(f"original scheme requires h divisible by N (h={h}, N={n_experts})")
        stride = h // n_experts
        return [j * stride for j in range(n_experts)]
    if variant is SchemeVariant.PRINCIPAL:
        return [j * d for j in range(n_experts)]
    if variant is SchemeVariant.MINOR:
        return [h - (j + 1) * d for j in range(n_experts)]
    if variant is SchemeVariant.RANDOM:
        rng = np.random.default_rng(scheme.seed)
        blocks = rng.choice(h // d, size=n_experts, replace=False)
        return [int(t) * d for t in blocks]
    raise InvalidInput(f"unknown segment scheme {variant!r}")


def extract_segment(factors, start, width):
    if width < 1 or start < 0 or start + width > factors.h:
        raise InvalidInput(f"segment [{start}, {start + width}) outside spectrum of size {factors.h}")
    stop = start + width
    return SpectralSegment(
        start=start,
        width=width,
        u_seg=factors.u[:, start:stop].copy(),
        s_seg=factors.s[start:stop].copy(),
        v_seg=factors.v[:, start:stop].copy(),
    )


def _split_factors(segment, coefficient):
    root = np.sqrt(segment.s_seg)
    b = coefficient * (segment.u_seg * root)
    a = coefficient * (root[:, None] * segment.v_seg.T)
    return b, a


def build_expert(segment, s, rho):
    """Damped spectral expert: s·b·a = (1/ρ)·U′S′V′ᵀ."""
    if s <= 0 or rho <= 0:
        raise InvalidInput(f"scale and damping must be positive (s={s}, rho={rho})")
    b, a = _split_factors(segment, math.sqrt(1.0 / (s * rho)))
    return ExpertAdapter(b=b, a=a, scale=float(s), segment=segment)


def single_lora_init(factors, start, width, s):
    """
    Undamped SVD initialization of one LoRA pair on a single segment.
    start=0 gives the principal-component variant, start=h−r the minor one.
    """
    if s <= 0:
        raise InvalidInput(f"scale must be positive (s={s})")
    segment = extract_segment(factors, start, width)
    b, a = _split_factors(segment, math.sqrt(1.0 / s))
    return ExpertAdapter(b=b, a=a, scale=float(s), segment=segment)


def kaiming_uniform_bound(fan_in, negative_slope=math.sqrt(5.0)):
    gain = math.sqrt(2.0 / (1.0 + negative_slope ** 2))
    return gain * math.sqrt(3.0 / fan_in)


def zero_init_expert(m, n, d, s, rng):
    """b = 0 and a ~ U(±1/√n), the usual zero-initialized LoRA pair."""
    if s <= 0:
        raise InvalidInput(f"scale must be positive (s={s})")
    bound = kaiming_uniform_bound(n)
    a = rng.uniform(-bound, bound, size=(d, n))
    return ExpertAdapter(b=np.zeros((m, d)), a=a, scale=float(s), segment=None)


def residual_compensation(experts, s, n_experts):
    """
    W_res = (1/N)·Σ sᵢ·bᵢ·aᵢ.

    ``s`` is either one shared scale or one scale per expert.
    """
    if not experts:
        raise InvalidInput("residual compensation needs at least one expert")
    if n_experts < 1:
        raise InvalidInput(f"n_experts must be positive, got {n_experts}")
    scales = np.broadcast_to(np.asarray(s, dtype=np.float64), (len(experts),))
    m, n = experts[0].b.shape[0], experts[0].a.shape[1]
    residual = np.zeros((m, n))
    for expert, scale in zip(experts, scales):
        if expert.b.shape[0] != m or expert.a.shape[1] != n:
            raise InvalidInput("experts disagree on the composed m×n shape")
        residual += scale * (expert.b @ expert.a)
    return residual / n_experts

