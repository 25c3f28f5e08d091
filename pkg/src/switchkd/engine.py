"""Training stages, the composite distillation objective, and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import autodiff as ad
from .autodiff import DiffArray
from .data import Batch, SyntheticSample, batch_iterate, collate
from .errors import ContractError, NumericError, ShapeError, TrainingDiverged
from .losses import LossStrategy, StrategyName, sequence_loss, strategy_loss_fn
from .model import ToyVLM, check_switch_compatible, save_checkpoint, switch_forward, vlm_forward

log = logging.getLogger(__name__)


class Scheme(str, Enum):
    PT_SFT = "PT-SFT"
    DPT_SFT = "DPT-SFT"
    PT_DFT = "PT-DFT"
    DPT_DFT = "DPT-DFT"

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        if isinstance(text, cls):
            return text
        key = str(text).strip().upper().replace("_", "-")
        for member in cls:
            if member.value == key:
                return member
        raise ValueError(f"unknown scheme {text!r}; valid values: {', '.join(m.value for m in cls)}")


class StageHyper(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(ge=0.0)
    batch_size: int = Field(gt=0)
    epochs: int = Field(1, gt=0)
    warmup_ratio: float = Field(0.03, ge=0.0, lt=1.0)
    schedule: Literal["cosine", "constant"] = "cosine"
    weight_decay: float = Field(0.0, ge=0.0)


def _pt_default() -> StageHyper:
    return StageHyper(learning_rate=1e-3, batch_size=32)


def _ft_default() -> StageHyper:
    return StageHyper(learning_rate=2e-5, batch_size=16)


class DistillConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    tau: float = Field(3.0, gt=0.0)
    lambda1: float = Field(1.0, ge=0.0)
    lambda2: float = Field(1.0, ge=0.0)
    ce_weight: float = Field(1.0, ge=0.0)
    strategy: StrategyName = StrategyName.DBILD_RKL
    fixed_k: int = Field(8, ge=2)
    switch_enabled: bool = True
    scheme: Scheme = Scheme.PT_DFT
    k_cap: int = Field(64, ge=2)
    # Alg.-literal variant: divide student logits by tau inside the CE softmax
    ce_use_tau: bool = False
    distill_positions: Literal["answer", "all"] = "answer"
    clip_norm: float | None = Field(1.0, gt=0.0)
    student_encoder_init: Literal["own", "teacher"] = "own"
    pt: StageHyper = Field(default_factory=_pt_default)
    ft: StageHyper = Field(default_factory=_ft_default)
    eval_every: int = Field(0, ge=0)

    @property
    def loss_strategy(self) -> LossStrategy:
        return LossStrategy(self.strategy, self.fixed_k)


@dataclass(frozen=True)
class StageSpec:
    name: str
    trainable: dict
    distill: bool

    @property
    def hyper_key(self) -> str:
        return "pt" if self.name in ("PT", "DPT") else "ft"


PT = StageSpec("PT", {"V": False, "P": True, "L": False}, distill=False)
DPT = StageSpec("DPT", {"V": False, "P": True, "L": False}, distill=True)
SFT = StageSpec("SFT", {"V": True, "P": True, "L": True}, distill=False)
DFT = StageSpec("DFT", {"V": True, "P": True, "L": True}, distill=True)
STAGES = {s.name: s for s in (PT, DPT, SFT, DFT)}


def scheme_stages(scheme: Scheme) -> tuple[StageSpec, StageSpec]:
    first, second = Scheme.parse(scheme).value.split("-")
    return STAGES[first], STAGES[second]


@dataclass
class TrainState:
    stage: str
    step: int = 0
    moments: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    evals: list = field(default_factory=list)


# -- optimisation ------------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay over a fixed set of named parameters."""

    def __init__(self, params: dict[str, DiffArray], moments: dict, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.moments = moments
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        for name, p in params.items():
            moments.setdefault(name, (np.zeros_like(p.data), np.zeros_like(p.data)))

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.moments[name]
            m = self.b1 * m + (1.0 - self.b1) * p.grad
            v = self.b2 * v + (1.0 - self.b2) * p.grad * p.grad
            self.moments[name] = (m, v)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update


def lr_at(step: int, total: int, hyper: StageHyper) -> float:
    base = hyper.learning_rate
    if hyper.schedule == "constant":
        return base
    warm = math.ceil(hyper.warmup_ratio * total)
    if step < warm:
        return base * (step + 1) / warm
    span = max(1, total - warm)
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


def clip_grad_norm(params: dict[str, DiffArray], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
    return norm


# -- losses ---------------------------------------------------------------------------
def ce_loss(student_logits, targets, mask, temperature: float = 1.0) -> DiffArray:
    """Mean next-token negative log-likelihood over masked positions."""
    z = ad.as_array(student_logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if targets.shape != z.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(f"logits {z.shape} do not match targets {targets.shape} / mask {mask.shape}")
    pos = np.nonzero(mask)
    if pos[0].size == 0:
        raise ContractError("mask selects no positions")
    logp = ad.log_softmax(z, temperature=temperature)
    picked = logp[pos + (targets[pos],)]
    return -ad.mean(picked)


def _distill_mask(batch: Batch, cfg: DistillConfig) -> np.ndarray:
    return batch.mask if cfg.distill_positions == "answer" else np.ones_like(batch.mask)


def stage_terms(stage: StageSpec, cfg: DistillConfig) -> tuple[bool, bool]:
    """Which of (alignment, visual-switch) terms a stage optimises."""
    align = stage.distill
    vsd = stage.distill and cfg.switch_enabled and stage.trainable["V"]
    return align, vsd


def total_loss(teacher: ToyVLM | None, student: ToyVLM, batch: Batch, cfg: DistillConfig,
               stage: StageSpec = DFT) -> tuple[DiffArray, dict]:
    """Weighted objective and its per-component values for one batch."""
    use_align, use_vsd = stage_terms(stage, cfg)
    if (use_align or use_vsd) and teacher is None:
        raise ContractError(f"stage {stage.name} needs a teacher")
    z_s = vlm_forward(student, batch.images, batch.text)
    ce = ce_loss(z_s, batch.targets, batch.mask, cfg.tau if cfg.ce_use_tau else 1.0)
    parts = {"L_CE": ce.item()}
    terms = [(cfg.ce_weight, ce)]
    if use_align or use_vsd:
        check_switch_compatible(teacher.cfg, student.cfg)
        n = student.cfg.vocab_size
        with ad.no_grad():
            z_t = vlm_forward(teacher, batch.images, batch.text).data.reshape(-1, n)
        mask = _distill_mask(batch, cfg).reshape(-1)
        loss_fn = strategy_loss_fn(cfg.loss_strategy)
        if use_align:
            align = sequence_loss(loss_fn, z_t, ad.reshape(z_s, (-1, n)), mask, cfg.tau, cfg.k_cap)
            parts["L_Align"] = align.item()
            terms.append((cfg.lambda1, align))
        if use_vsd:
            z_sw = switch_forward(student, teacher, batch.images, batch.text)
            vsd = sequence_loss(loss_fn, z_t, ad.reshape(z_sw, (-1, n)), mask, cfg.tau, cfg.k_cap)
            parts["L_VSD"] = vsd.item()
            terms.append((cfg.lambda2, vsd))
    total = None
    value = 0.0
    for weight, term in terms:
        value += weight * term.item()
        if weight == 0.0:
            continue
        scaled = ad.scale(term, weight)
        total = scaled if total is None else total + scaled
    if total is None:
        total = DiffArray(0.0)
    parts["total"] = value
    return total, parts


# -- training -------------------------------------------------------------------------
def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0])


def _grad_magnitude(model: ToyVLM) -> float:
    return float(sum(np.abs(p.grad).sum() for p in model.params.values() if p.grad is not None))


def _dump_batch(path: Path, batch: Batch, parts: dict, stage: str, step: int) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"stage": stage, "step": step, "parts": parts, "ids": batch.ids,
              "prompts": [list(p) for p in batch.prompts],
              "answers": [list(a) for a in batch.answers]}
    path.write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")


def train_stage(student: ToyVLM, teacher: ToyVLM | None, train: Sequence[SyntheticSample],
                stage: StageSpec, cfg: DistillConfig, *, seed: int = 0,
                val: Sequence[SyntheticSample] | None = None,
                log_path: str | Path | None = None,
                checkpoint_path: str | Path | None = None,
                hyper: StageHyper | None = None) -> TrainState:
    """Optimise ``student`` for one stage and return its state and metrics log."""
    if stage.distill != (teacher is not None):
        raise ContractError(f"stage {stage.name} {'requires' if stage.distill else 'takes no'} teacher")
    hyper = hyper or getattr(cfg, stage.hyper_key)
    student.set_trainable(**stage.trainable)
    if teacher is not None:
        teacher.freeze()
    params = {n: p for n, p in student.params.items() if student.trainable[student.group_of(n)]}
    state = TrainState(stage=stage.name)
    opt = AdamW(params, state.moments, weight_decay=hyper.weight_decay)
    steps_per_epoch = math.ceil(len(train) / hyper.batch_size)
    total_steps = steps_per_epoch * hyper.epochs
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(hyper.epochs):
            # keyed on the stage slot, so SFT and DFT (or PT and DPT) see the same batches
            order_seed = derive_seed(seed, 0 if stage.hyper_key == "pt" else 3, epoch)
            for samples in batch_iterate(train, hyper.batch_size, order_seed):
                batch = collate(samples)
                student.zero_grad()
                if teacher is not None:
                    teacher.zero_grad()
                try:
                    loss, parts = total_loss(teacher, student, batch, cfg, stage)
                except NumericError as exc:
                    loss, parts = None, {"error": str(exc)}
                if loss is None or not all(math.isfinite(v) for v in parts.values()):
                    if log_path:
                        _dump_batch(Path(log_path).with_name("nan_dump.json"), batch, parts,
                                    stage.name, state.step)
                    raise TrainingDiverged(
                        f"non-finite loss at {stage.name} step {state.step}: {parts}")
                if loss.requires_grad:
                    ad.backward(loss)
                if teacher is not None and _grad_magnitude(teacher) != 0.0:
                    raise RuntimeError("frozen teacher received a gradient")
                if cfg.clip_norm is not None:
                    clip_grad_norm(params, cfg.clip_norm)
                lr = lr_at(state.step, total_steps, hyper)
                opt.step(lr)
                record = {"stage": stage.name, "step": state.step, "epoch": epoch, **parts, "lr": lr}
                state.metrics.append(record)
                if log_fh:
                    log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                state.step += 1
                if val is not None and cfg.eval_every and state.step % cfg.eval_every == 0:
                    state.evals.append({"step": state.step, **evaluate(student, val).as_dict()})
    finally:
        if log_fh:
            log_fh.close()
    if val is not None:
        state.evals.append({"step": state.step, **evaluate(student, val, teacher).as_dict()})
    if checkpoint_path:
        save_checkpoint(student, checkpoint_path, extra={"stage": stage.name, "steps": state.step})
    return state


@dataclass
class EvalResult:
    accuracy: float
    agreement: float | None = None
    n: int = 0

    def as_dict(self) -> dict:
        out = {"val_accuracy": self.accuracy, "n": self.n}
        if self.agreement is not None:
            out["agreement"] = self.agreement
        return out


def greedy_decode(model: ToyVLM, batch: Batch) -> np.ndarray:
    n_answer = len(batch.answers[0])
    text = np.asarray([list(p) for p in batch.prompts], dtype=np.int64)
    with ad.no_grad():
        for _ in range(n_answer):
            logits = vlm_forward(model, batch.images, text).data[:, -1, :]
            text = np.concatenate([text, logits.argmax(axis=-1)[:, None]], axis=1)
    return text[:, -n_answer:]


def evaluate(model: ToyVLM, samples: Sequence[SyntheticSample], reference: ToyVLM | None = None,
             batch_size: int = 128) -> EvalResult:
    """Exact-match accuracy of greedy answers, plus top-1 agreement with ``reference``."""
    if len(samples) == 0:
        raise ContractError("evaluation needs at least one sample")
    correct = agree = positions = 0
    for chunk in batch_iterate(samples, batch_size):
        batch = collate(chunk)
        decoded = greedy_decode(model, batch)
        correct += int(np.all(decoded == np.asarray(batch.answers), axis=1).sum())
        if reference is not None:
            with ad.no_grad():
                mine = vlm_forward(model, batch.images, batch.text).data.argmax(-1)
                theirs = vlm_forward(reference, batch.images, batch.text).data.argmax(-1)
            agree += int((mine == theirs)[batch.mask].sum())
            positions += int(batch.mask.sum())
    agreement = agree / positions if reference is not None else None
    return EvalResult(accuracy=correct / len(samples), agreement=agreement, n=len(samples))


# -- schemes ---------------------------------------------------------------------------
@dataclass
class RunResult:
    scheme: str
    val_accuracy: float
    teacher_agreement: float | None
    states: list[TrainState]

    @property
    def trace(self) -> list[dict]:
        return [r for s in self.states for r in s.metrics]

    def final_components(self) -> dict:
        last = self.states[-1].metrics[-1] if self.states[-1].metrics else {}
        return {k: last[k] for k in ("L_CE", "L_Align", "L_VSD", "total") if k in last}


def run_scheme(scheme: Scheme, teacher: ToyVLM, student: ToyVLM,
               train: Sequence[SyntheticSample], val: Sequence[SyntheticSample],
               cfg: DistillConfig, *, seed: int = 0, out_dir: str | Path | None = None) -> RunResult:
    """Run both stages of ``scheme`` on ``student`` and evaluate it on ``val``."""
    scheme = Scheme.parse(scheme)
    check_switch_compatible(teacher.cfg, student.cfg)
    teacher.freeze()
    if cfg.student_encoder_init == "teacher":
        student.copy_group_from(teacher, "V")
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    log_path = out / "run_log.jsonl" if out else None
    if log_path and log_path.exists():
        log_path.unlink()
    states = []
    for stage in scheme_stages(scheme):
        log.info("stage %s (%s)", stage.name, scheme.value)
        states.append(train_stage(
            student, teacher if stage.distill else None, train, stage, cfg, seed=seed,
            log_path=log_path,
            checkpoint_path=(out / f"student_{stage.name}") if out else None,
        ))
    result = evaluate(student, val, teacher)
    return RunResult(scheme=scheme.value, val_accuracy=result.accuracy,
                     teacher_agreement=result.agreement, states=states)
