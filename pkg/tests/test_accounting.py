from dataclasses import replace

import pytest

from core.accounting import (
    DECODER_7B,
    LINEAR_STACK_METHODS,
    VIT_CLIP,
    ArchPreset,
    Method,
    adapter_to_projection_ratio,
    build_linear_stack,
    closed_form_params,
    empirical_params,
    flops_forward,
    flops_terms,
    get_preset,
    linear_stack_params,
    projection_k_ratio,
    round_half_up,
)
from core.errors import InvalidInput


def test_vit_moe_lora_proportion():
    result = closed_form_params(VIT_CLIP, "moe-lora")
    assert result.count == 1_990_656
    assert result.proportion == 2.24


def test_vit_full_ft_total():
    assert closed_form_params(VIT_CLIP, "full-ft").count == 88_715_520
    assert closed_form_params(VIT_CLIP, "full-ft").proportion == 100.0


def test_vit_full_ft_moe_proportion():
    assert closed_form_params(VIT_CLIP, "full-ft-moe").proportion == 770.92


def test_vit_lora_proportion():
    assert closed_form_params(VIT_CLIP, "lora").proportion == 1.5


def test_decoder_moe_lora_proportion():
    result = closed_form_params(DECODER_7B, "moe-lora")
    assert result.proportion == 0.81
    assert result.exact_proportion == pytest.approx(0.8098, abs=1e-4)


def test_lora_grows_linearly_with_rank():
    one = closed_form_params(replace(VIT_CLIP, rank=1), "lora").count
    assert closed_form_params(replace(VIT_CLIP, rank=16), "lora").count == 16 * one


def test_single_expert_moe_lora_is_lora_plus_router():
    preset = replace(VIT_CLIP, experts=1)
    lora = closed_form_params(preset, "lora").count
    moe = closed_form_params(preset, "moe-lora").count
    assert moe - lora == 9 * preset.hidden * preset.layers


@pytest.mark.parametrize("preset, method", [(DECODER_7B, "full-ft-moe"), (VIT_CLIP, "dora")])
def test_unsupported_pairs_raise(preset, method):
    with pytest.raises(InvalidInput):
        closed_form_params(preset, method)


def test_unknown_method_and_preset():
    with pytest.raises(InvalidInput):
        closed_form_params(VIT_CLIP, "prefix-tuning")
    with pytest.raises(InvalidInput):
        get_preset("gpt-2")


def test_preset_validation():
    with pytest.raises(InvalidInput):
        ArchPreset(name="bad", family="vit-clip-shape", hidden=0, layers=1, rank=1, experts=1)


def test_round_half_up():
    assert round_half_up(2.245) == 2.25
    assert round_half_up(0.805) == 0.81
    assert round_half_up(1.004) == 1.0


@pytest.mark.parametrize("method", LINEAR_STACK_METHODS)
def test_empirical_count_equals_closed_form(method):
    preset = replace(VIT_CLIP, hidden=16, layers=2, rank=8, experts=4)
    stack = build_linear_stack(preset, method, seed=0)
    assert len(stack) == 12
    assert empirical_params(stack) == linear_stack_params(preset, method)


def test_linear_stack_lora_parts_match_closed_form():
    assert linear_stack_params(VIT_CLIP, Method.LORA) == closed_form_params(VIT_CLIP, "lora").count
    assert linear_stack_params(VIT_CLIP, Method.MOE_LORA) == closed_form_params(VIT_CLIP, "moe-lora").count


def test_linear_stack_needs_vit_shape():
    with pytest.raises(InvalidInput):
        build_linear_stack(DECODER_7B, "lora")


def test_adapter_term_is_negligible_for_two_of_eight():
    assert adapter_to_projection_ratio(replace(DECODER_7B, experts=8)) < 0.01
    assert adapter_to_projection_ratio(replace(DECODER_7B, experts=8)) == pytest.approx(69 * 2 * 4 / (41 * 4096))


def test_adapter_term_at_preset():
    assert adapter_to_projection_ratio(DECODER_7B) == pytest.approx(0.01315, abs=1e-5)


def test_full_ft_moe_projection_is_linear_in_k():
    assert projection_k_ratio(DECODER_7B) == pytest.approx(2.0)


def test_flops_are_additive_and_validated():
    terms = flops_terms(DECODER_7B, "lora-moe", 1, 2048)
    assert set(terms) == {"expert_gating", "attention", "vocabulary", "projection", "adapter"}
    assert flops_forward(DECODER_7B, "lora-moe", 1, 2048) == pytest.approx(sum(terms.values()))
    assert flops_forward(DECODER_7B, "full-ft-moe", 0, 2048) == 0.0
    with pytest.raises(InvalidInput):
        flops_forward(DECODER_7B, "dense", 1, 1)
    with pytest.raises(InvalidInput):
        flops_forward(DECODER_7B, "lora-moe", -1, 1)
    with pytest.raises(InvalidInput):
        flops_forward(VIT_CLIP, "lora-moe", 1, 1)
