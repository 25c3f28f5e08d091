"""Straight-line reference implementations used as test oracles.

Plain Python lists and ``math`` only, so nothing here shares a code path
with the numpy/autodiff implementation it is checked against.
"""

from __future__ import annotations

import math


def _as_integers(values) -> list[int]:
    """Floats are dyadic rationals; put them over one power-of-two denominator."""
    ratios = [float(v).as_integer_ratio() for v in values]
    den = max(d for _, d in ratios)
    return [num * (den // d) for num, d in ratios]


def brute_force_knee(z, k_cap: int = 64) -> int:
    """Cutoff rank in exact integer arithmetic, so ties really are ties.

    The score (1 - i/n) - (v_i - lo)/(hi - lo) is compared after scaling by
    n * (hi - lo) > 0, which keeps the order and avoids division.
    """
    srt = sorted(_as_integers(z), reverse=True)
    n = len(srt)
    hi, lo = srt[0], srt[-1]
    if hi == lo:
        return 2
    span = hi - lo
    best_i, best_d = None, None
    for i in range(1, n + 1):
        d = (n - i) * span - n * (srt[i - 1] - lo)
        if best_d is None or d > best_d:
            best_i, best_d = i, d
    return max(2, min(best_i, n, k_cap))


def _top(vals, k):
    return sorted(range(len(vals)), key=lambda i: (-vals[i], i))[:k]


def _diffs(v):
    out = []
    for m in range(len(v)):
        for n in range(m + 1, len(v)):
            out.append(v[m] - v[n])
    return out


def _softmax(v, tau):
    hi = max(v)
    e = [math.exp((x - hi) / tau) for x in v]
    s = sum(e)
    return [x / s for x in e]


def _kl(p, q, floor=1e-12):
    # sum p log(p / q)
    return sum(pi * (math.log(max(pi, floor)) - math.log(max(qi, floor))) for pi, qi in zip(p, q))


def dbild_reference(z_t, z_s, tau: float = 3.0, k_cap: int = 64, reverse: bool = True,
                    fixed_k: int | None = None) -> float:
    """Both branches of the bidirectional difference loss, written out step by step."""
    zt = [float(v) for v in z_t]
    zs = [float(v) for v in z_s]
    n = len(zt)

    def cut(vals):
        if fixed_k is not None:
            return max(2, min(fixed_k, n))
        return brute_force_knee(vals, k_cap)

    # teacher-led branch
    kt = cut(zt)
    idx = _top(zt, kt)
    p_led_t = _softmax(_diffs([zt[i] for i in idx]), tau)
    p_cor_s = _softmax(_diffs([zs[i] for i in idx]), tau)
    loss_t = _kl(p_cor_s, p_led_t) if reverse else _kl(p_led_t, p_cor_s)

    # student-led branch
    ks = cut(zs)
    idx = _top(zs, ks)
    p_led_s = _softmax(_diffs([zs[i] for i in idx]), tau)
    p_cor_t = _softmax(_diffs([zt[i] for i in idx]), tau)
    loss_s = _kl(p_led_s, p_cor_t) if reverse else _kl(p_cor_t, p_led_s)
    return loss_t + loss_s


def full_kl_reference(z_t, z_s, tau: float = 3.0, reverse: bool = False) -> float:
    pt = _softmax([float(v) for v in z_t], tau)
    ps = _softmax([float(v) for v in z_s], tau)
    return _kl(ps, pt) if reverse else _kl(pt, ps)


def cross_entropy_reference(rows, targets) -> float:
    total = 0.0
    for row, y in zip(rows, targets):
        hi = max(row)
        lse = hi + math.log(sum(math.exp(v - hi) for v in row))
        total += lse - row[y]
    return total / len(targets)
