import numpy as np
import pytest

import diadesk.tensor as T
from diadesk.errors import DimensionError, UsageError
from diadesk.tsai import AdapterBank, add_task, adapter_forward, integrate, relevance_scalar
from oracles import integrate_tokenwise


def _bank(tasks, d=8, depth=2, rank=3, seed=0):
    bank = AdapterBank(d, depth, rank, seed)
    rng = np.random.default_rng(seed + 100)
    for t in range(1, tasks + 1):
        bank.add_task(t)
        for a, _ in (be[-1] for be in bank.entries):
            a.w_up.data = rng.normal(size=a.w_up.shape)
    return bank


def _triples(bank, block):
    return [(a.w_down.data, a.w_up.data, s.tau.data) for a, s in bank.entries[block]]


def test_initialization():
    bank = AdapterBank(16, 2, rank=4, seed=1).add_task(1)
    a, s = bank.entries[0][0]
    assert a.w_down.shape == (16, 4) and a.w_up.shape == (4, 16) and s.tau.shape == (16,)
    assert np.all(a.w_up.data == 0)
    assert np.abs(a.w_down.data).max() <= 1 / np.sqrt(16)


@pytest.mark.parametrize("tasks", [1, 2, 4])
def test_integrate_matches_tokenwise_oracle(tasks):
    bank = _bank(tasks)
    p = np.random.default_rng(3).normal(size=(6, 8))
    out = integrate(p, bank.entries[1]).data
    np.testing.assert_allclose(out, integrate_tokenwise(p, _triples(bank, 1)), atol=1e-13)


def test_single_task_scales_by_raw_cosine():
    bank = _bank(1)
    a, s = bank.entries[0][0]
    p = np.random.default_rng(4).normal(size=(5, 8))
    cos = (p @ s.tau.data) / (np.linalg.norm(p, axis=1) * np.linalg.norm(s.tau.data))
    np.testing.assert_allclose(relevance_scalar(p, s).data, cos, atol=1e-14)
    np.testing.assert_allclose(integrate(p, [(a, s)]).data, cos[:, None] * adapter_forward(p, a).data, atol=1e-14)


def test_relevance_is_scale_invariant():
    bank = _bank(1)
    _, s = bank.entries[0][0]
    p = np.random.default_rng(5).normal(size=(4, 8))
    np.testing.assert_allclose(relevance_scalar(3.7 * p, s).data, relevance_scalar(p, s).data, atol=1e-14)


def test_one_pass_evaluates_each_adapter_once_per_token():
    bank = _bank(3)
    bank.reset_counters()
    integrate(np.ones((2, 5, 8)), bank.entries[0])
    counts = bank.call_counts()
    assert [counts[(t, 0)] for t in (1, 2, 3)] == [10, 10, 10]
    assert all(counts[(t, 1)] == 0 for t in (1, 2, 3))


def test_task_count_limits_the_mixture():
    bank = _bank(3)
    p = T.Tensor(np.random.default_rng(6).normal(size=(1, 4, 8)))
    np.testing.assert_allclose(
        bank.hook(2)(p, 0).data, integrate(p, bank.entries[0][:2]).data, atol=0
    )
    with pytest.raises(UsageError):
        bank.hook(4)


def test_add_task_freezes_earlier_entries():
    bank = AdapterBank(8, 2, 3)
    add_task(bank, 1)
    add_task(bank, 2)
    trainable = bank.parameters()
    assert len(trainable) == 2 * 3
    assert all(a.task == 2 for be in bank.entries for a, _ in be if a.w_down.requires_grad)
    with pytest.raises(UsageError):
        bank.add_task(2)
    with pytest.raises(UsageError):
        bank.add_task(1)


def test_invalid_rank_and_width():
    with pytest.raises(UsageError):
        AdapterBank(8, 1, rank=8)
    bank = _bank(1)
    with pytest.raises(DimensionError):
        adapter_forward(np.ones((2, 5)), bank.entries[0][0][0])


def test_empty_entries_give_zero_residual():
    assert np.all(integrate(np.ones((3, 8)), []).data == 0)


def test_state_round_trip_and_copy():
    bank = _bank(2)
    clone = bank.copy()
    p = np.random.default_rng(7).normal(size=(3, 8))
    np.testing.assert_array_equal(integrate(p, clone.entries[1]).data, integrate(p, bank.entries[1]).data)
    clone.entries[0][0][0].w_down.data[0, 0] += 1
    assert bank.entries[0][0][0].w_down.data[0, 0] != clone.entries[0][0][0].w_down.data[0, 0]
    assert set(bank.state_dict()) == {f"bank.task{t}.block{b}.{n}" for t in (1, 2) for b in (0, 1) for n in ("w_down", "w_up", "tau")}
