#!/usr/bin/env python3
"""
Closed-form trainable-parameter counts and forward FLOPs for full-rank and
low-rank mixture-of-experts fine-tuning, plus empirical counts of models that
are actually constructed.

The closed forms keep their printed decimal coefficients (11.58, 6.66, ...)
and the GQA/SwiGLU factors even though attention is never built here. Only
the linear-stack subset of a ViT-shaped block can be constructed and counted.
"""
import logging
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum

import numpy as np

from core.errors import InvalidInput
from core.moe_layer import LayerConfig, init_layer
from core.reference_oracles import FullFtModel, UpcycledMoeModel
from core.routing import GateConfig, RouterState
from core.spectral_core import SegmentScheme, SchemeVariant

logger = logging.getLogger(__name__)


class ArchFamily(str, Enum):
    DECODER = "decoder-7B-shape"
    VIT = "vit-clip-shape"


class Method(str, Enum):
    FULL_FT = "full-ft"
    FULL_FT_MOE = "full-ft-moe"
    LORA = "lora"
    MOE_LORA = "moe-lora"
    HYDRA_LORA = "hydra-lora"
    ADAMOLE = "adamole"
    DORA = "dora"


FLOPS_METHODS = ("full-ft-moe", "lora-moe")


@dataclass(frozen=True)
class ArchPreset:
    """
    Architecture shape. ``embedding_copies`` is how many H×V vocabulary
    matrices the full fine-tuning total counts.
    """
    name: str
    family: ArchFamily
    hidden: int
    layers: int
    rank: int
    experts: int
    top_k: int = 2
    vocab: int | None = None
    patch: int | None = None
    channels: int | None = None
    embedding_copies: int = 2

    def __post_init__(self):
        object.__setattr__(self, "family", ArchFamily(self.family))
        for name in ("hidden", "layers", "rank", "experts", "top_k", "vocab", "patch", "channels"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise InvalidInput(f"preset field {name} must be positive, got {value}")
        if self.embedding_copies not in (1, 2):
            raise InvalidInput(f"embedding_copies must be 1 or 2, got {self.embedding_copies}")

    @property
    def expert_width(self):
        return self.rank / self.experts


DECODER_7B = ArchPreset(
    name="decoder-7B", family=ArchFamily.DECODER, hidden=4096, layers=28, rank=32, experts=2,
    top_k=2, vocab=151646, embedding_copies=1,
)
VIT_CLIP = ArchPreset(
    name="vit-clip", family=ArchFamily.VIT, hidden=768, layers=12, rank=8, experts=8,
    top_k=2, patch=32, channels=3,
)
PRESETS = {preset.name: preset for preset in (DECODER_7B, VIT_CLIP)}


def get_preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidInput(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None


def _require(preset, *fields):
    missing = [f for f in fields if getattr(preset, f) is None]
    if missing:
        raise InvalidInput(f"preset {preset.name} lacks {', '.join(missing)}")


def _unsupported(preset, method):
    return InvalidInput(f"no closed form for {method} on the {preset.family.value} preset")


def round_half_up(value, places=2):
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def _decoder_params(p, method):
    H, L, r, e = p.hidden, p.layers, p.rank, p.experts
    if method is Method.FULL_FT:
        _require(p, "vocab")
        return (10.25 * H * H + 2 * H) * L + H + p.embedding_copies * H * p.vocab
    if method is Method.LORA:
        return 11.58 * H * L * r
    if method is Method.DORA:
        return (11.58 * H * r + 5) * L
    if method is Method.HYDRA_LORA:
        return (4.91 * H * r + 6.66 * H * r / e + 6.66 * H * e) * L
    if method is Method.ADAMOLE:
        return (11.58 * H * r + 6.66 * H * e + 6.66 * H) * L
    if method is Method.MOE_LORA:
        return (11.58 * H * r + 6.66 * H * e) * L
    raise _unsupported(p, method.value)


def _vit_params(p, method):
    H, L, r, e = p.hidden, p.layers, p.rank, p.experts
    if method in (Method.FULL_FT, Method.FULL_FT_MOE):
        _require(p, "patch", "channels")
        P, C = p.patch, p.channels
        if method is Method.FULL_FT:
            return (C + 1) * H * P * P + (12 * H * H + 2 * H) * L + H * H + 3 * H + P * H
        return (C + 1) * P * P * H + (12 * e * H * H + 2 * H + 9 * H * e) * L + 3 * H + P * H + H * H
    if method is Method.LORA:
        return 18 * H * L * r
    if method is Method.HYDRA_LORA:
        return (9 * H * r + 9 * H * e + 9 * H * r / e) * L
    if method is Method.ADAMOLE:
        return (18 * H * r + 9 * H * e + 9 * H) * L
    if method is Method.MOE_LORA:
        return (18 * H * r + 9 * H * e) * L
    raise _unsupported(p, method.value)


@dataclass(frozen=True)
class ParamCount:
    count: float
    proportion: float
    exact_proportion: float


def _params(preset, method):
    method = Method(method)
    if preset.family is ArchFamily.DECODER:
        return _decoder_params(preset, method)
    return _vit_params(preset, method)


def closed_form_params(preset, method):
    """Trainable count and its percentage of full fine-tuning (two decimals, half-up)."""
    try:
        method = Method(method)
    except ValueError:
        raise InvalidInput(f"unknown method {method!r}") from None
    count = _params(preset, method)
    exact = 100.0 * count / _params(preset, Method.FULL_FT)
    if float(count).is_integer():
        count = int(count)
    return ParamCount(count=count, proportion=round_half_up(exact), exact_proportion=exact)


# ---------- constructible linear stack ----------
def vit_block_shapes(hidden):
    """(name, out, in) of the adapted projections in one ViT block."""
    H = hidden
    return [("q", H, H), ("k", H, H), ("v", H, H), ("o", H, H), ("fc1", 4 * H, H), ("fc2", H, 4 * H)]


LINEAR_STACK_METHODS = (Method.FULL_FT, Method.FULL_FT_MOE, Method.LORA, Method.MOE_LORA)


def linear_stack_params(preset, method):
    """Trainable count of the q/k/v/o/fc1/fc2 projections alone."""
    method = Method(method)
    if preset.family is not ArchFamily.VIT or method not in LINEAR_STACK_METHODS:
        raise _unsupported(preset, f"{method.value} (linear stack)")
    H, L, r, e = preset.hidden, preset.layers, preset.rank, preset.experts
    if method is Method.FULL_FT:
        return 12 * H * H * L
    if method is Method.FULL_FT_MOE:
        return (12 * e * H * H + 9 * H * e) * L
    if method is Method.LORA:
        return 18 * H * L * r
    return (18 * H * r + 9 * H * e) * L


def build_linear_stack(preset, method, seed=0):
    """Construct the adapted projections of every block as trainable models."""
    method = Method(method)
    if preset.family is not ArchFamily.VIT or method not in LINEAR_STACK_METHODS:
        raise _unsupported(preset, f"{method.value} (linear stack)")
    rng = np.random.default_rng(seed)
    stack = []
    for _ in range(preset.layers):
        for _, m, n in vit_block_shapes(preset.hidden):
            w0 = rng.standard_normal((m, n)) / np.sqrt(n)
            layer_seed = int(rng.integers(2 ** 32))
            if method is Method.FULL_FT:
                stack.append(FullFtModel(w0))
            elif method is Method.FULL_FT_MOE:
                gate = GateConfig(preset.experts, min(preset.top_k, preset.experts))
                router = RouterState.initialize(n, preset.experts, rng)
                stack.append(UpcycledMoeModel.upcycle(w0, gate, router))
            elif method is Method.LORA:
                config = LayerConfig(
                    m=m, n=n, total_rank=preset.rank, n_experts=1, top_k=1, rho=1.0,
                    scheme=SegmentScheme(SchemeVariant.PRINCIPAL),
                )
                stack.append(init_layer(w0, config, layer_seed))
            else:
                config = LayerConfig(
                    m=m, n=n, total_rank=preset.rank, n_experts=preset.experts,
                    top_k=min(preset.top_k, preset.experts),
                )
                stack.append(init_layer(w0, config, layer_seed))
    return stack


def empirical_params(layer_stack):
    """Sum of element counts over every trainable array of one model or a stack."""
    models = layer_stack if isinstance(layer_stack, (list, tuple)) else [layer_stack]
    return int(sum(param.size for model in models for param in model.parameters().values()))


# ---------- FLOPs ----------
def flops_terms(preset, method, batch, seq):
    """The named summands of the forward FLOP count."""
    if method not in FLOPS_METHODS:
        raise InvalidInput(f"unknown FLOPs method {method!r}; expected one of {FLOPS_METHODS}")
    if batch < 0 or seq < 0:
        raise InvalidInput(f"batch and sequence length must be non-negative (B={batch}, s={seq})")
    _require(preset, "vocab")
    B, s = batch, seq
    H, L, e, k, V = preset.hidden, preset.layers, preset.experts, preset.top_k, preset.vocab
    terms = {
        "expert_gating": B * L * (52 / 3) * e * s * H,
        "attention": B * L * 4 * s * s * H,
        "vocabulary": 2 * B * s * H * V,
    }
    if method == "full-ft-moe":
        terms["projection"] = B * L * (41 / 2) * k * s * H * H
    else:
        terms["projection"] = B * L * (41 / 2) * s * H * H
        terms["adapter"] = B * L * (69 / 2) * k * s * H * preset.expert_width
    return terms


def flops_forward(preset, method, batch, seq):
    return float(sum(flops_terms(preset, method, batch, seq).values()))


def adapter_to_projection_ratio(preset, batch=1, seq=1):
    """Share of the k-dependent adapter term relative to the frozen H² projections."""
    terms = flops_terms(preset, "lora-moe", batch, seq)
    return terms["adapter"] / terms["projection"]


def projection_k_ratio(preset, batch=1, seq=1, k_high=2, k_low=1):
    high = flops_terms(replace(preset, top_k=k_high), "full-ft-moe", batch, seq)["projection"]
    low = flops_terms(replace(preset, top_k=k_low), "full-ft-moe", batch, seq)["projection"]
    return high / low
