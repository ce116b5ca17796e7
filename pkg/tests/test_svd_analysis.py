import numpy as np
import pytest

from diadesk.errors import UsageError
from diadesk.svd_analysis import (
    PROBE_COUNT,
    analyze_bank,
    make_probes,
    subspace_residual,
    verify_linear_identity,
    verify_nonlinear_identity,
)
from diadesk.tsai import AdapterBank


def _adapter(rng, d, r):
    return rng.normal(size=(d, r)), rng.normal(size=(r, d))


def test_probes_are_unit_and_seeded():
    p = make_probes(12)
    assert p.shape == (PROBE_COUNT, 12)
    np.testing.assert_allclose(np.linalg.norm(p, axis=1), 1.0, atol=1e-14)
    np.testing.assert_array_equal(p, make_probes(12))


@pytest.mark.parametrize("fn", [verify_linear_identity, verify_nonlinear_identity])
def test_identities_hold_for_random_adapters(fn):
    rng = np.random.default_rng(0)
    for _ in range(10):
        d = int(rng.integers(4, 33))
        r = int(rng.integers(1, min(8, d - 1) + 1))
        rep = fn(*_adapter(rng, d, r), make_probes(d, 32, seed=1))
        assert rep.passed, rep
        assert rep.effective_rank == r


def test_linear_outputs_stay_in_row_space():
    rng = np.random.default_rng(2)
    wd, wu = _adapter(rng, 16, 3)
    rep = verify_linear_identity(wd, wu, make_probes(16))
    # the rank-3 map cannot reach most of R^16; a generic vector has a large residual
    from diadesk.linalg import svd

    _, _, v = svd(wd @ wu)
    assert v.shape == (3, 16)
    assert subspace_residual(rng.normal(size=16), v) > 0.1
    assert rep.subspace_residual < 1e-10


def test_subspace_residual_of_empty_basis_is_norm():
    assert subspace_residual(np.array([3.0, 4.0]), np.zeros((0, 2))) == 5.0


def test_identity_check_is_not_vacuous(monkeypatch):
    import diadesk.svd_analysis as sa

    real = sa.svd

    def swapped(w):
        u, s, v = real(w)
        return u, s[::-1].copy(), v  # singular values paired with the wrong vectors

    rng = np.random.default_rng(3)
    wd, wu = _adapter(rng, 8, 2)
    monkeypatch.setattr(sa, "svd", swapped)
    rep = verify_nonlinear_identity(wd, wu, make_probes(8))
    assert not rep.passed and rep.identity_residual > 1e-3


def test_zero_adapter_is_rank_zero():
    rep = verify_linear_identity(np.zeros((8, 2)), np.zeros((2, 8)), make_probes(8))
    assert rep.effective_rank == 0 and rep.passed


def test_empty_probe_set_rejected():
    with pytest.raises(UsageError):
        verify_linear_identity(np.ones((4, 1)), np.ones((1, 4)), np.zeros((0, 4)))


def test_analyze_bank_reports_every_task_and_block():
    bank = AdapterBank(8, 2, 2).add_task(1).add_task(2)
    for be in bank.entries:
        for a, _ in be:
            a.w_up.data = np.random.default_rng(a.task).normal(size=a.w_up.shape)
    reps = analyze_bank(bank)
    assert sorted((r.task, r.block, r.kind) for r in reps) == sorted(
        (t, b, k) for t in (1, 2) for b in (0, 1) for k in ("linear", "nonlinear")
    )
    assert all(r.passed for r in reps)
    assert set(reps[0].to_dict()) >= {"singular_values", "identity_residual", "subspace_residual", "passed"}
