"""Property checks behind ``switchkd verify``.

Each check draws its own instances from a seeded generator, so a given seed
always produces the same report. Failures are counted, never raised.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import oracles
from .data import DatasetSpec, collate, generate
from .engine import DFT, DistillConfig, ce_loss, total_loss
from .knee import knee_index
from .losses import (StrategyName, LossStrategy, _cutoff, baseline_loss, dbild_loss,
                     pairwise_differences)
from .model import ModelConfig, ToyVLM, switch_forward, vlm_forward

RTOL, ATOL, FD_EPS = 1e-4, 1e-6, 1e-6


@dataclass
class CheckResult:
    name: str
    count: int = 0
    failures: int = 0
    max_error: float = 0.0
    seconds: float = 0.0
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.count > 0 and self.failures == 0

    def record(self, ok: bool, error: float = 0.0) -> None:
        self.count += 1
        self.failures += 0 if ok else 1
        if np.isfinite(error):
            self.max_error = max(self.max_error, float(error))


def _timed(fn: Callable[..., CheckResult]) -> Callable[..., CheckResult]:
    def run(*args, **kwargs) -> CheckResult:
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


# -- random inputs ------------------------------------------------------------------------
def random_logits(rng: np.random.Generator, n: int) -> np.ndarray:
    """Logit rows of varied shape: gaussian, peaked head, heavy tail, or tied integers."""
    kind = rng.integers(4)
    if kind == 0:
        return rng.normal(0.0, rng.uniform(0.5, 5.0), n)
    if kind == 1:
        z = rng.normal(0.0, 1.0, n)
        head = rng.integers(1, min(n, 10) + 1)
        z[rng.permutation(n)[:head]] += rng.uniform(3.0, 12.0, head)
        return z
    if kind == 2:
        return -rng.exponential(rng.uniform(0.5, 3.0), n) * rng.uniform(1.0, 4.0)
    return rng.integers(-5, 6, n).astype(np.float64)


def dyadic(z: np.ndarray) -> np.ndarray:
    """Snap onto the 1/1024 grid so that small shifts are exact in floating point."""
    return np.round(z * 1024.0) / 1024.0


# -- knee ---------------------------------------------------------------------------------
@_timed
def check_knee_oracle(rng: np.random.Generator, count: int = 1000) -> CheckResult:
    res = CheckResult("knee matches brute force")
    for _ in range(count):
        z = random_logits(rng, int(rng.integers(4, 513)))
        k_cap = int(rng.choice([64, int(rng.integers(2, 600))]))
        got = knee_index(z, k_cap).k
        want = oracles.brute_force_knee(z, k_cap)
        res.record(got == want, abs(got - want))
    return res


@_timed
def check_knee_affine(rng: np.random.Generator, count: int = 1000) -> CheckResult:
    res = CheckResult("knee affine invariance")
    for _ in range(count):
        z = random_logits(rng, int(rng.integers(4, 513)))
        a = float(np.exp(rng.uniform(np.log(1e-2), np.log(1e2))))
        b = float(rng.uniform(-100.0, 100.0))
        base, moved = knee_index(z), knee_index(a * z + b)
        res.record(base.k == moved.k, abs(base.k - moved.k))
    return res


# -- losses -------------------------------------------------------------------------------
@_timed
def check_dbild_oracle(rng: np.random.Generator, count: int = 200) -> CheckResult:
    res = CheckResult("dbild matches reference")
    for _ in range(count):
        n = int(rng.choice([8, 32, 128]))
        z_t = random_logits(rng, n)
        z_s = z_t + rng.normal(0.0, rng.uniform(0.1, 3.0), n) if rng.random() < 0.5 \
            else random_logits(rng, n)
        err = abs(dbild_loss(z_t, z_s).item() - oracles.dbild_reference(z_t, z_s))
        res.record(err <= 1e-10, err)
    return res


@_timed
def check_dbild_invariants(rng: np.random.Generator, count: int = 200) -> CheckResult:
    """Zero at equality, shift invariance, non-negativity, pair count."""
    res = CheckResult("dbild invariants")
    for _ in range(count):
        n = int(rng.choice([8, 32, 128]))
        z_t, z_s = random_logits(rng, n), random_logits(rng, n)
        self_loss = abs(dbild_loss(z_t, z_t).item())
        res.record(self_loss < 1e-10, self_loss)

        # exact on the dyadic grid, where the shift introduces no rounding
        zt_d, zs_d = dyadic(z_t), dyadic(z_s)
        c = float(rng.integers(-4096, 4097)) / 1024.0
        base = dbild_loss(zt_d, zs_d).item()
        res.record(dbild_loss(zt_d + c, zs_d).item() == base)
        res.record(dbild_loss(zt_d, zs_d + c).item() == base)
        c = float(rng.uniform(-50.0, 50.0))
        base = dbild_loss(z_t, z_s).item()
        for moved in (dbild_loss(z_t + c, z_s).item(), dbild_loss(z_t, z_s + c).item()):
            err = abs(moved - base)
            res.record(err <= 1e-12 * max(1.0, abs(base)), err)

        for name in StrategyName:
            value = baseline_loss(LossStrategy(name), z_t, z_s).item()
            res.record(value >= -1e-12, max(0.0, -value))
        k = int(rng.integers(2, n + 1))
        res.record(pairwise_differences(z_t[:k]).shape == (k * (k - 1) // 2,))
    return res


# -- gradients ----------------------------------------------------------------------------
def _selection(row: np.ndarray, k_cap: int = 64) -> bytes:
    return _cutoff(row, k_cap, None).tobytes()


@_timed
def check_dbild_gradient(rng: np.random.Generator, count: int = 50) -> CheckResult:
    res = CheckResult("dbild gradient vs finite differences")
    while res.count < count:
        n = int(rng.choice([8, 32, 128]))
        z_t, z_s = random_logits(rng, n), rng.normal(0.0, 2.0, n)
        sel = _selection(z_s)
        # the loss is only piecewise smooth; redraw if a probe crosses a selection boundary
        probes = [z_s + s * FD_EPS * e for e in np.eye(n) for s in (1.0, -1.0)]
        if any(_selection(p) != sel for p in probes):
            continue
        x = ad.parameter(z_s)
        ad.backward(dbild_loss(z_t, x))
        numeric = ad.finite_diff_gradient(lambda v: dbild_loss(z_t, v).item(), z_s, FD_EPS)
        ok, worst = ad.gradients_close(x.grad, numeric, RTOL, ATOL)
        res.record(ok, worst)
    return res


@_timed
def check_ce_gradient(rng: np.random.Generator, count: int = 50) -> CheckResult:
    res = CheckResult("ce gradient vs finite differences")
    for _ in range(count):
        t, n = int(rng.integers(1, 5)), int(rng.choice([8, 64]))
        z = rng.normal(0.0, 2.0, (t, n))
        targets = rng.integers(0, n, t)
        mask = rng.random(t) < 0.6
        mask[rng.integers(t)] = True
        x = ad.parameter(z)
        ad.backward(ce_loss(x, targets, mask))
        numeric = ad.finite_diff_gradient(
            lambda v: ce_loss(v.reshape(t, n), targets, mask).item(), z, FD_EPS)
        ok, worst = ad.gradients_close(x.grad, numeric, RTOL, ATOL)
        res.record(ok, worst)
    return res


TINY_TEACHER = ModelConfig(vision_dim=8, lm_dim=8, lm_layers=1, lm_heads=2)
TINY_STUDENT = ModelConfig(vision_dim=8, lm_dim=4, lm_layers=1, lm_heads=1)


def _flat_params(model: ToyVLM) -> tuple[list[str], np.ndarray]:
    names = list(model.params)
    return names, np.concatenate([model.params[n].data.reshape(-1) for n in names])


def _assign(model: ToyVLM, names: list[str], flat: np.ndarray) -> None:
    offset = 0
    for n in names:
        p = model.params[n]
        p.data = flat[offset: offset + p.data.size].reshape(p.shape).copy()
        offset += p.data.size


@_timed
def check_total_gradient(rng: np.random.Generator, count: int = 50,
                         coords_per_group: int = 2) -> CheckResult:
    """Whole-model gradient on sampled coordinates plus one random direction."""
    res = CheckResult("total_loss gradient vs finite differences")
    while res.count < count:
        seed = int(rng.integers(2**32))
        teacher, student = ToyVLM(TINY_TEACHER, seed=seed), ToyVLM(TINY_STUDENT, seed=seed + 1)
        teacher.freeze()
        samples, _ = generate(DatasetSpec(n_train=2, n_val=1, seed=seed))
        batch = collate(samples)
        cfg = DistillConfig(
            lambda1=float(rng.uniform(0.0, 2.0)), lambda2=float(rng.uniform(0.0, 2.0)),
            distill_positions=str(rng.choice(["answer", "all"])))
        mask = batch.mask if cfg.distill_positions == "answer" else np.ones_like(batch.mask)
        names, theta = _flat_params(student)

        def evaluate(flat):
            _assign(student, names, flat)
            with ad.no_grad():
                value = total_loss(teacher, student, batch, cfg, DFT)[0].item()
                rows = [vlm_forward(student, batch.images, batch.text).data[mask],
                        switch_forward(student, teacher, batch.images, batch.text).data[mask]]
            return value, b"".join(_selection(r) for part in rows for r in part)

        base_value, base_sel = evaluate(theta)
        sizes = np.cumsum([0] + [student.params[n].data.size for n in names])
        coords = []
        for group in ("V", "P", "L"):
            members = [i for i, n in enumerate(names) if student.group_of(n) == group]
            for _ in range(coords_per_group):
                j = members[int(rng.integers(len(members)))]
                coords.append(int(rng.integers(sizes[j], sizes[j + 1])))
        direction = rng.normal(size=theta.size)
        direction /= np.linalg.norm(direction)
        steps = [np.eye(1, theta.size, c).reshape(-1) for c in coords] + [direction]

        numeric, stable = [], True
        for step in steps:
            (fp, sp), (fm, sm) = evaluate(theta + FD_EPS * step), evaluate(theta - FD_EPS * step)
            stable &= sp == base_sel and sm == base_sel
            numeric.append((fp - fm) / (2 * FD_EPS))
        _assign(student, names, theta)
        if not stable:
            continue
        student.zero_grad()
        loss, _ = total_loss(teacher, student, batch, cfg, DFT)
        ad.backward(loss)
        grad = np.concatenate([student.params[n].grad.reshape(-1) for n in names])
        analytic = [grad[c] for c in coords] + [float(grad @ direction)]
        ok, worst = ad.gradients_close(analytic, numeric, RTOL, ATOL)
        teacher_quiet = all(p.grad is None or not np.any(p.grad) for p in teacher.params.values())
        res.record(ok and teacher_quiet and abs(loss.item() - base_value) == 0.0, worst)
    return res


# -- driver -------------------------------------------------------------------------------
CHECKS = {
    "knee-oracle": check_knee_oracle,
    "knee-affine": check_knee_affine,
    "dbild-oracle": check_dbild_oracle,
    "dbild-invariants": check_dbild_invariants,
    "grad-dbild": check_dbild_gradient,
    "grad-ce": check_ce_gradient,
    "grad-total": check_total_gradient,
}


def run_checks(seed: int = 0, names: list[str] | None = None) -> list[CheckResult]:
    out = []
    for i, name in enumerate(names or list(CHECKS)):
        rng = np.random.default_rng([int(seed), i])
        out.append(CHECKS[name](rng))
    return out


def format_report(results: list[CheckResult]) -> str:
    header = f"{'check':<44}{'count':>7}{'fail':>6}{'max_err':>12}{'secs':>8}  status"
    lines = [header, "-" * len(header)]
    for r in results:
        lines.append(f"{r.name:<44}{r.count:>7}{r.failures:>6}{r.max_error:>12.3g}"
                     f"{r.seconds:>8.2f}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
