"""Logit-difference distillation losses.

All functions accept the teacher row as anything array-like (it is always
treated as a constant) and the student row as a :class:`DiffArray` when a
gradient is wanted. Divergences take the reference distribution first and
the moving distribution second.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .errors import ContractError, NumericError, ShapeError
from .knee import DEFAULT_K_CAP, MIN_K, knee_index

PROB_FLOOR = 1e-12
DEFAULT_TAU = 3.0
DEFAULT_FIXED_K = 8


class StrategyName(str, Enum):
    FKL = "fkl"
    RKL = "rkl"
    BILD_FKL = "bild-fkl"
    BILD_RKL = "bild-rkl"
    DBILD_FKL = "dbild-fkl"
    DBILD_RKL = "dbild-rkl"

    @classmethod
    def parse(cls, text: str) -> "StrategyName":
        if isinstance(text, cls):
            return text
        key = str(text).strip().lower().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        valid = ", ".join(m.value for m in cls)
        raise ValueError(f"unknown strategy {text!r}; valid values: {valid}")


@dataclass(frozen=True)
class LossStrategy:
    name: StrategyName = StrategyName.DBILD_RKL
    fixed_k: int = DEFAULT_FIXED_K

    def __post_init__(self):
        object.__setattr__(self, "name", StrategyName.parse(self.name))
        if self.fixed_k < MIN_K:
            raise ContractError(f"fixed_k must be >= {MIN_K}")

    @property
    def uses_differences(self) -> bool:
        return self.name not in (StrategyName.FKL, StrategyName.RKL)

    @property
    def dynamic(self) -> bool:
        return self.name in (StrategyName.DBILD_FKL, StrategyName.DBILD_RKL)

    @property
    def divergence(self) -> Callable:
        return rkl if self.name.value.endswith("rkl") else fkl


@dataclass(frozen=True)
class SelectedPair:
    indices: np.ndarray
    led: np.ndarray
    cor: np.ndarray


@dataclass(frozen=True)
class DifferenceDistribution:
    differences: np.ndarray
    probabilities: np.ndarray


def _values(z) -> np.ndarray:
    v = z.data if isinstance(z, DiffArray) else np.asarray(z, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"expected a logits row, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise NumericError("logits contain non-finite values")
    return v


def _check_rows(z_t: np.ndarray, z_s) -> None:
    n_s = z_s.shape[-1] if isinstance(z_s, DiffArray) else np.shape(z_s)[-1]
    if z_t.shape[-1] != n_s:
        raise ShapeError(f"teacher and student rows differ in length: {z_t.shape[-1]} vs {n_s}")
    if z_t.shape[-1] < 2:
        raise ContractError("logits rows need at least two entries")


def select_led_cor(leader, follower, k: int) -> SelectedPair:
    """Leader's top-``k`` positions (descending, stable) and both rows' values there."""
    lv, fv = _values(leader), _values(follower)
    if lv.size != fv.size:
        raise ShapeError(f"leader and follower differ in length: {lv.size} vs {fv.size}")
    if not MIN_K <= k <= lv.size:
        raise ContractError(f"k must lie in [{MIN_K}, {lv.size}], got {k}")
    idx = ad.sort_descending_indices(lv)[:k]
    return SelectedPair(indices=idx, led=lv[idx], cor=fv[idx])


def pairwise_differences(v):
    """v[m] - v[n] for every m < n in lexicographic pair order.

    Differentiable when ``v`` is a :class:`DiffArray`.
    """
    k = v.shape[-1] if isinstance(v, DiffArray) else np.shape(v)[-1]
    if k < 2:
        raise ContractError("pairwise differences need at least two values")
    m, n = ad.pair_indices(k)
    if isinstance(v, DiffArray):
        return ad.gather(v, m) - ad.gather(v, n)
    v = np.asarray(v, dtype=np.float64)
    return v[m] - v[n]


def difference_distribution(d, tau: float = DEFAULT_TAU) -> DiffArray:
    return ad.softmax(d, temperature=tau)


def build_distribution(v, tau: float = DEFAULT_TAU) -> DifferenceDistribution:
    d = pairwise_differences(np.asarray(v, dtype=np.float64))
    return DifferenceDistribution(differences=d, probabilities=difference_distribution(d, tau).data)


def _check_dists(p, q) -> tuple[DiffArray, DiffArray]:
    p, q = ad.as_array(p), ad.as_array(q)
    if p.shape != q.shape:
        raise ShapeError(f"distributions differ in shape: {p.shape} vs {q.shape}")
    return p, q


def rkl(p_ref, q) -> DiffArray:
    """Reverse KL: sum_i q_i log(q_i / p_ref_i). ``q`` is the distribution being moved."""
    p_ref, q = _check_dists(p_ref, q)
    log_q = ad.log(ad.clip_min(q, PROB_FLOOR))
    log_p = ad.log(ad.clip_min(p_ref, PROB_FLOOR))
    return ad.sum_(q * (log_q - log_p))


def fkl(p_ref, q) -> DiffArray:
    """Forward KL: sum_i p_ref_i log(p_ref_i / q_i)."""
    p_ref, q = _check_dists(p_ref, q)
    log_q = ad.log(ad.clip_min(q, PROB_FLOOR))
    log_p = ad.log(ad.clip_min(p_ref, PROB_FLOOR))
    return ad.sum_(p_ref * (log_p - log_q))


def _cutoff(leader_values: np.ndarray, k_cap: int, fixed_k: int | None) -> np.ndarray:
    if fixed_k is None:
        return knee_index(leader_values, k_cap).top
    k = max(MIN_K, min(fixed_k, leader_values.size))
    return ad.sort_descending_indices(leader_values)[:k]


def teacher_guided_loss(z_t, z_s, tau: float = DEFAULT_TAU, k_cap: int = DEFAULT_K_CAP, *,
                        divergence: Callable = rkl, fixed_k: int | None = None) -> DiffArray:
    """Align the student's differences on the teacher's head with the teacher's own."""
    zt = _values(z_t)
    _check_rows(zt, z_s)
    idx = _cutoff(zt, k_cap, fixed_k)
    p_led = ad.softmax(pairwise_differences(zt[idx]), temperature=tau)
    p_cor = ad.softmax(pairwise_differences(ad.gather(ad.as_array(z_s), idx)), temperature=tau)
    return divergence(p_led, p_cor)


def student_guided_loss(z_t, z_s, tau: float = DEFAULT_TAU, k_cap: int = DEFAULT_K_CAP, *,
                        divergence: Callable = rkl, fixed_k: int | None = None) -> DiffArray:
    """Same alignment, with the student's own head choosing the positions."""
    zt = _values(z_t)
    _check_rows(zt, z_s)
    zs = ad.as_array(z_s)
    idx = _cutoff(_values(zs), k_cap, fixed_k)
    p_led = ad.softmax(pairwise_differences(ad.gather(zs, idx)), temperature=tau)
    p_cor = ad.softmax(pairwise_differences(zt[idx]), temperature=tau)
    return divergence(p_cor, p_led)


def dbild_loss(z_t, z_s, tau: float = DEFAULT_TAU, k_cap: int = DEFAULT_K_CAP) -> DiffArray:
    return teacher_guided_loss(z_t, z_s, tau, k_cap) + student_guided_loss(z_t, z_s, tau, k_cap)


def baseline_loss(strategy: LossStrategy, z_t, z_s, tau: float = DEFAULT_TAU,
                  k_cap: int = DEFAULT_K_CAP) -> DiffArray:
    """Loss for any of the six ablation strategies on a single logits row."""
    if not isinstance(strategy, LossStrategy):
        strategy = LossStrategy(strategy)
    zt = _values(z_t)
    _check_rows(zt, z_s)
    if not strategy.uses_differences:
        log_pt = ad.log_softmax(zt, temperature=tau)
        log_ps = ad.log_softmax(z_s, temperature=tau)
        if strategy.name is StrategyName.FKL:
            return ad.sum_(ad.exp(log_pt) * (log_pt - log_ps))
        return ad.sum_(ad.exp(log_ps) * (log_ps - log_pt))
    fixed_k = None if strategy.dynamic else strategy.fixed_k
    kw = dict(divergence=strategy.divergence, fixed_k=fixed_k)
    return (teacher_guided_loss(zt, z_s, tau, k_cap, **kw)
            + student_guided_loss(zt, z_s, tau, k_cap, **kw))


def strategy_loss_fn(strategy: LossStrategy) -> Callable:
    """Per-row loss callable ``f(z_t, z_s, tau, k_cap)`` for ``strategy``."""
    if not isinstance(strategy, LossStrategy):
        strategy = LossStrategy(strategy)
    if strategy.name is StrategyName.DBILD_RKL:
        return dbild_loss

    def fn(z_t, z_s, tau=DEFAULT_TAU, k_cap=DEFAULT_K_CAP):
        return baseline_loss(strategy, z_t, z_s, tau, k_cap)

    return fn


def sequence_loss(loss_fn: Callable, teacher_logits, student_logits, mask,
                  tau: float = DEFAULT_TAU, k_cap: int = DEFAULT_K_CAP) -> DiffArray:
    """Mean of ``loss_fn`` over the rows selected by ``mask``."""
    t_vals = teacher_logits.data if isinstance(teacher_logits, DiffArray) else np.asarray(
        teacher_logits, dtype=np.float64)
    s = ad.as_array(student_logits)
    mask = np.asarray(mask, dtype=bool)
    if t_vals.shape != s.shape or t_vals.ndim != 2 or mask.shape != (t_vals.shape[0],):
        raise ShapeError(
            f"expected [T x N] logits and a [T] mask, got {t_vals.shape}, {s.shape}, {mask.shape}")
    rows = np.flatnonzero(mask)
    if rows.size == 0:
        raise ContractError("mask selects no positions")
    total = None
    for r in rows:
        term = loss_fn(t_vals[r], s[int(r)], tau, k_cap)
        total = term if total is None else total + term
    return total / rows.size
