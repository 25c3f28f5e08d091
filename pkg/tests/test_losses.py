import numpy as np
import pytest

from switchkd import autodiff as ad
from switchkd.errors import ContractError, NumericError, ShapeError
from switchkd.knee import knee_index
from switchkd.losses import (LossStrategy, StrategyName, baseline_loss, build_distribution,
                             dbild_loss, difference_distribution, fkl, pairwise_differences, rkl,
                             select_led_cor, sequence_loss, strategy_loss_fn, student_guided_loss,
                             teacher_guided_loss)
from switchkd.oracles import dbild_reference, full_kl_reference


# -- selection and differences -----------------------------------------------------------------
def test_select_led_cor_examples():
    pair = select_led_cor([1, 5, 3], [10, 20, 30], 2)
    np.testing.assert_array_equal(pair.indices, [1, 2])
    np.testing.assert_array_equal(pair.led, [5, 3])
    np.testing.assert_array_equal(pair.cor, [20, 30])
    np.testing.assert_array_equal(select_led_cor([4, 4, 1], [0, 0, 0], 2).indices, [0, 1])


def test_self_selection_identity(rng):
    z = rng.normal(size=9)
    for k in range(2, 10):
        pair = select_led_cor(z, z, k)
        np.testing.assert_array_equal(pair.led, pair.cor)
        assert np.all(np.diff(pair.led) <= 0)


def test_select_errors():
    with pytest.raises(ShapeError):
        select_led_cor([1, 2, 3], [1, 2], 2)
    with pytest.raises(ContractError):
        select_led_cor([1, 2, 3], [1, 2, 3], 4)


def test_pairwise_differences_examples():
    np.testing.assert_array_equal(pairwise_differences([3, 2, 1]), [1, 2, 1])
    np.testing.assert_array_equal(pairwise_differences([7.5, 2.0]), [5.5])
    with pytest.raises(ContractError):
        pairwise_differences([1.0])


def test_sorted_input_gives_nonnegative_differences(rng):
    for k in range(2, 30):
        v = np.sort(rng.normal(size=k))[::-1]
        d = pairwise_differences(v)
        assert d.size == k * (k - 1) // 2 and np.all(d >= 0)


def test_difference_distribution_examples():
    np.testing.assert_allclose(difference_distribution([1, 2, 1], 1.0).data, [0.2120, 0.5761, 0.2120], atol=1e-3)
    for tau in (0.3, 1.0, 3.0):
        np.testing.assert_array_equal(difference_distribution([0, 0], tau).data, [0.5, 0.5])
    with pytest.raises(NumericError):
        difference_distribution([1.0, np.inf])
    dist = build_distribution([4.0, 1.0, 0.5, -2.0])
    assert dist.differences.size == 6
    assert abs(dist.probabilities.sum() - 1) < 1e-12 and np.all(dist.probabilities > 0)


def test_rkl_examples():
    assert rkl([0.3, 0.7], [0.3, 0.7]).item() == 0.0
    assert rkl([0.75, 0.25], [0.5, 0.5]).item() == pytest.approx(0.1438, abs=1e-3)
    with pytest.raises(ShapeError):
        rkl([0.5, 0.5], [1.0])


def test_rkl_and_fkl_mirror(rng):
    for _ in range(50):
        p = ad.softmax(rng.normal(size=5)).data
        q = ad.softmax(rng.normal(size=5)).data
        assert rkl(p, q).item() >= 0
        assert rkl(p, q).item() == pytest.approx(fkl(q, p).item(), rel=1e-12)


# -- branch losses ----------------------------------------------------------------------------
def test_branches_vanish_at_equality_and_under_shift(rng):
    z = rng.normal(size=16)
    for fn in (teacher_guided_loss, student_guided_loss, dbild_loss):
        assert fn(z, z).item() == 0.0
        assert abs(fn(z, z + 2.5).item()) < 1e-12


def test_branches_match_step_by_step_oracle(rng):
    for _ in range(20):
        zt, zs = rng.normal(size=16) * 2, rng.normal(size=16) * 2
        lt, ls = teacher_guided_loss(zt, zs).item(), student_guided_loss(zt, zs).item()
        assert lt + ls == pytest.approx(dbild_reference(zt, zs), abs=1e-10)
        assert dbild_loss(zt, zs).item() == pytest.approx(lt + ls, abs=1e-14)


def test_teacher_branch_alone_matches_oracle(rng):
    zt, zs = rng.normal(size=16), rng.normal(size=16)
    lt = teacher_guided_loss(zt, zs).item()
    # reference: recompute the teacher branch by hand
    idx = knee_index(zt).top
    p_led = ad.softmax(pairwise_differences(zt[idx]), 3.0).data
    p_cor = ad.softmax(pairwise_differences(zs[idx]), 3.0).data
    assert lt == pytest.approx(float(np.sum(p_cor * np.log(p_cor / p_led))), abs=1e-12)


def test_role_swap_symmetry(rng):
    for _ in range(20):
        a, b = rng.normal(size=12), rng.normal(size=12)
        mirrored = teacher_guided_loss(b, a, divergence=lambda p, q: rkl(q, p))
        assert student_guided_loss(a, b).item() == pytest.approx(mirrored.item(), rel=1e-12)


def test_dbild_random_n32_equals_sum_of_branches(rng):
    zt, zs = rng.normal(size=32), rng.normal(size=32)
    assert dbild_loss(zt, zs).item() == pytest.approx(
        teacher_guided_loss(zt, zs).item() + student_guided_loss(zt, zs).item(), abs=1e-14)


def test_dbild_shift_invariance_on_500_triples():
    rng = np.random.default_rng(21)
    for _ in range(500):
        n = int(rng.choice([8, 16, 32]))
        zt = np.round(rng.normal(size=n) * 1024) / 1024
        zs = np.round(rng.normal(size=n) * 1024) / 1024
        c = np.round(rng.uniform(-8, 8) * 1024) / 1024
        base = dbild_loss(zt, zs).item()
        assert dbild_loss(zt, zs + c).item() == base
        assert dbild_loss(zt + c, zs).item() == base


def test_teacher_side_receives_no_gradient(rng):
    zt = ad.parameter(rng.normal(size=8))
    zs = ad.parameter(rng.normal(size=8))
    ad.backward(dbild_loss(zt, zs))
    assert zt.grad is None or not np.any(zt.grad)
    assert np.any(zs.grad)


def test_dbild_gradient_matches_finite_differences(rng):
    for n in (8, 32, 128):
        zt, zs = rng.normal(size=n), rng.normal(size=n)
        s = ad.parameter(zs)
        ad.backward(dbild_loss(zt, s))
        coords = rng.choice(n, size=min(n, 16), replace=False)
        numeric = ad.finite_diff_gradient(lambda v: dbild_loss(zt, v).item(), zs, coords=coords)
        assert ad.gradients_close(s.grad[coords], numeric)[0]


# -- baselines --------------------------------------------------------------------------------
def test_every_strategy_zero_at_equality(rng):
    z = rng.normal(size=20)
    for name in StrategyName:
        assert abs(baseline_loss(LossStrategy(name), z, z).item()) < 1e-10
    assert baseline_loss(LossStrategy("fkl"), [0.0, 0.0], [0.0, 0.0]).item() == 0.0


def test_full_vocabulary_baselines_match_reference(rng):
    zt, zs = rng.normal(size=10), rng.normal(size=10)
    assert baseline_loss(LossStrategy("fkl"), zt, zs).item() == pytest.approx(full_kl_reference(zt, zs), rel=1e-10)
    assert baseline_loss(LossStrategy("rkl"), zt, zs).item() == pytest.approx(
        full_kl_reference(zt, zs, reverse=True), rel=1e-10)


def test_bild_baselines_match_reference(rng):
    zt, zs = rng.normal(size=24), rng.normal(size=24)
    for name, reverse in (("bild-rkl", True), ("bild-fkl", False)):
        got = baseline_loss(LossStrategy(name, fixed_k=5), zt, zs).item()
        assert got == pytest.approx(dbild_reference(zt, zs, reverse=reverse, fixed_k=5), abs=1e-10)
    got = baseline_loss(LossStrategy("dbild-fkl"), zt, zs).item()
    assert got == pytest.approx(dbild_reference(zt, zs, reverse=False), abs=1e-10)


def test_bild_rkl_with_knee_k_equals_dbild():
    zt = np.array([10, 9, 1, 0.9, 0.8, 0.1])
    zs = np.array([8, 9.5, 1.2, 0.2, 0.3, 0.0])
    k = knee_index(zt).k
    assert knee_index(zs).k == k
    got = baseline_loss(LossStrategy("bild-rkl", fixed_k=k), zt, zs).item()
    assert got == pytest.approx(dbild_loss(zt, zs).item(), abs=1e-15)


def test_all_strategies_nonnegative(rng):
    for _ in range(30):
        zt, zs = rng.normal(size=16) * 3, rng.normal(size=16) * 3
        for name in StrategyName:
            assert strategy_loss_fn(LossStrategy(name))(zt, zs).item() >= -1e-12


def test_strategy_parsing():
    assert StrategyName.parse("DBiLD_RKL") is StrategyName.DBILD_RKL
    assert StrategyName.parse(StrategyName.FKL) is StrategyName.FKL
    with pytest.raises(ValueError, match="valid values: fkl, rkl"):
        StrategyName.parse("kl")
    with pytest.raises(ContractError):
        LossStrategy("bild-rkl", fixed_k=1)


# -- sequence reduction -----------------------------------------------------------------------
def test_sequence_loss_examples(rng):
    t = rng.normal(size=(4, 10))
    s = rng.normal(size=(4, 10))
    assert sequence_loss(dbild_loss, t, t, [True] * 4).item() == 0.0
    only = sequence_loss(dbild_loss, t, s, [False, False, True, False]).item()
    assert only == dbild_loss(t[2], s[2]).item()
    a, b = dbild_loss(t[0], s[0]).item(), dbild_loss(t[3], s[3]).item()
    assert sequence_loss(dbild_loss, t, s, [True, False, False, True]).item() == pytest.approx((a + b) / 2, rel=1e-14)


def test_sequence_loss_errors(rng):
    t = rng.normal(size=(3, 5))
    with pytest.raises(ContractError):
        sequence_loss(dbild_loss, t, t, [False] * 3)
    with pytest.raises(ShapeError):
        sequence_loss(dbild_loss, t, t[:2], [True] * 3)
