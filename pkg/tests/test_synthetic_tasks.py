import numpy as np
import pytest

from core.errors import InvalidInput
from core.reference_oracles import FullFtModel, UpcycledMoeModel
from core.routing import GateConfig, RouterState, select_top_k
from core.spectral_core import svd_decompose
from harness.synthetic_tasks import (
    band_energy_fraction,
    make_mixed_segment_task,
    make_pretrained_weight,
    make_routed_tasks,
    make_sequential_tasks,
    make_teacher_task,
    subspace_overlap,
)


def test_pretrained_weight_spectrum():
    w = make_pretrained_weight(20, 10, seed=0)
    s = np.linalg.svd(w, compute_uv=False)
    assert np.allclose(s, (np.arange(10) + 1.0) ** -0.5)


def test_noiseless_task_is_solved_by_its_target():
    task = make_teacher_task(8, 6, "flat", 0.0, seed=1)
    assert task.loss(FullFtModel(task.w_star)) == pytest.approx(0.0, abs=1e-24)
    assert task.accuracy(FullFtModel(task.w_star)) == pytest.approx(1.0)
    assert task.accuracy(FullFtModel(task.w_base)) == pytest.approx(0.0)


def test_segment_profile_concentrates_energy():
    task = make_teacher_task(32, 32, "segment", 0.0, seed=2, band=(8, 8))
    assert band_energy_fraction(task) >= 0.9
    assert band_energy_fraction(task, band=(0, 8)) < 1e-20


@pytest.mark.parametrize("profile", ["flat", "power-law"])
def test_other_profiles_spread_energy(profile):
    task = make_teacher_task(32, 32, profile, 0.0, seed=3, band=(0, 8))
    assert band_energy_fraction(task) < 0.9


def test_different_seeds_give_different_targets():
    first = make_teacher_task(8, 8, "flat", 0.0, seed=4)
    second = make_teacher_task(8, 8, "flat", 0.0, seed=5)
    assert not np.allclose(first.w_star, second.w_star)


def test_shift_scale_sets_relative_norm():
    task = make_teacher_task(16, 16, "power-law", 0.0, seed=6, shift_scale=0.25)
    assert np.linalg.norm(task.delta) == pytest.approx(0.25 * np.linalg.norm(task.w_base))


def test_task_validation():
    with pytest.raises(InvalidInput):
        make_teacher_task(0, 4, "flat", 0.0, seed=0)
    with pytest.raises(InvalidInput):
        make_teacher_task(4, 4, "flat", -1.0, seed=0)
    with pytest.raises(InvalidInput):
        make_teacher_task(8, 8, "segment", 0.0, seed=0, band=(6, 4))
    with pytest.raises(ValueError):
        make_teacher_task(8, 8, "spiky", 0.0, seed=0)


def test_noisy_samples_differ_from_targets(rng):
    task = make_teacher_task(6, 6, "flat", 0.5, seed=7)
    x, y = task.sample(rng, 200)
    residual = y - x @ task.w_star.T
    assert residual.std() == pytest.approx(0.5, rel=0.1)


def test_sequential_tasks_are_near_orthogonal():
    tasks = make_sequential_tasks(2, 32, 32, seed=8)
    assert len(tasks) == 2
    assert tasks[0].band == (0, 8) and tasks[1].band == (8, 8)
    assert np.array_equal(tasks[0].w_base, tasks[1].w_base)
    assert subspace_overlap(tasks[0].delta, tasks[1].delta, 8) <= 0.2


def test_sequential_tasks_are_reproducible():
    first = make_sequential_tasks(3, 24, 24, seed=9)
    second = make_sequential_tasks(3, 24, 24, seed=9)
    for a, b in zip(first, second):
        assert np.array_equal(a.w_star, b.w_star)
        assert np.array_equal(a.input_shift, b.input_shift)


def test_single_sequential_task_is_a_teacher_task():
    [task] = make_sequential_tasks(1, 8, 8, seed=10)
    expected = make_teacher_task(8, 8, "segment", 0.0, seed=10)
    assert np.array_equal(task.w_star, expected.w_star)


def test_sequential_tasks_need_room():
    with pytest.raises(InvalidInput):
        make_sequential_tasks(5, 8, 8, seed=0, band_width=2)
    with pytest.raises(InvalidInput):
        make_sequential_tasks(0, 8, 8, seed=0)


def _router(n, n_experts, seed):
    return RouterState.initialize(n, n_experts, np.random.default_rng(seed))


@pytest.fixture
def mixed_task():
    return make_mixed_segment_task(32, 32, seed=4, router=_router(32, 8, 0), top_k=2, width=2, gain=8.0, eval_size=512)


def test_mixed_segment_targets_follow_the_gate(mixed_task):
    model = UpcycledMoeModel.upcycle(mixed_task.w_base, GateConfig(8, 2), mixed_task.router)
    for i, shift in enumerate(mixed_task.slot_shifts):
        model.experts[i] = mixed_task.w_base + shift
    assert mixed_task.loss(model) == pytest.approx(0.0, abs=1e-20)
    assert mixed_task.accuracy(model) == pytest.approx(1.0)


def test_mixed_segment_defeats_every_single_matrix(mixed_task):
    x, y = mixed_task.eval_set
    fit = np.linalg.lstsq(x, y, rcond=None)[0].T
    assert mixed_task.accuracy(FullFtModel(fit)) < 0.5
    assert mixed_task.reference_loss > 1.0


def test_mixed_segment_slots_own_evenly_spaced_segments(mixed_task):
    factors = svd_decompose(mixed_task.w_base)
    for i, shift in enumerate(mixed_task.slot_shifts):
        start = 4 * i
        u, v = factors.u[:, start:start + 2], factors.v[:, start:start + 2]
        assert np.allclose(u @ (u.T @ shift @ v) @ v.T, shift)
        assert np.allclose(u.T @ shift @ v, 8.0 * np.diag(factors.s[start:start + 2]))
    assert np.allclose(mixed_task.delta, mixed_task.slot_shifts.mean(axis=0))


def test_mixed_segment_is_not_a_plain_profile():
    with pytest.raises(InvalidInput):
        make_teacher_task(16, 16, "mixed-segment", 0.0, seed=0)
    with pytest.raises(InvalidInput):
        make_mixed_segment_task(16, 16, seed=0, router=_router(12, 4, 0), top_k=2, width=2)
    with pytest.raises(InvalidInput):
        make_mixed_segment_task(16, 16, seed=0, router=_router(16, 4, 0), top_k=5, width=2)


def test_routed_tasks_reach_only_their_own_experts():
    router = _router(32, 8, 1)
    tasks = make_routed_tasks(3, 32, 32, seed=5, router=router, top_k=2, width=2, gain=4.0)
    for j, task in enumerate(tasks):
        x, _ = task.sample(np.random.default_rng(j), 200)
        selected = np.sort(select_top_k(router.logits(x), 2), axis=1)
        assert np.all(selected == [2 * j, 2 * j + 1])
        eval_selected = np.sort(select_top_k(router.logits(task.eval_set[0]), 2), axis=1)
        assert np.all(eval_selected == [2 * j, 2 * j + 1])
    assert all(np.array_equal(t.w_base, tasks[0].w_base) for t in tasks)


def test_routed_task_noise_avoids_the_router():
    router = _router(16, 4, 2)
    [task, _] = make_routed_tasks(2, 16, 16, seed=6, router=router, top_k=2, width=2, input_shift=2.0)
    x, _ = task.sample(np.random.default_rng(0), 50)
    assert np.allclose((x - task.input_shift) @ router.w_z, 0.0, atol=1e-12)
    assert np.linalg.norm(task.input_shift) == pytest.approx(2.0)


def test_routed_tasks_validation():
    router = _router(16, 4, 3)
    with pytest.raises(InvalidInput):
        make_routed_tasks(3, 16, 16, seed=0, router=router, top_k=2, width=2)
    with pytest.raises(InvalidInput):
        make_routed_tasks(2, 16, 16, seed=0, router=router, top_k=2, width=2, input_shift=0.0)
    with pytest.raises(InvalidInput):
        make_routed_tasks(2, 16, 12, seed=0, router=router, top_k=2, width=2)
