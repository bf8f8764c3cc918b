"""Losses and growth schedules for training morphable networks.

Everything here is plain numpy. The losses accept a single logit vector or a
batch of them (rows) and return the batch mean. Schedules describe what an
external trainer should do; no training happens in this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._validation import check_fraction, check_positive_int
from .exceptions import DimMismatch, EmptyBlocks
from .netgraph import NetworkGraph


def _as_logits(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise DimMismatch(f"{name} must be a non-empty vector or batch of vectors")
    if not np.all(np.isfinite(arr)):
        raise DimMismatch(f"{name} contains non-finite values")
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")


def log_softmax(logits, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=float) / tau
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits, tau: float = 1.0) -> np.ndarray:
    return np.exp(log_softmax(logits, tau))


def cross_entropy(labels, logits) -> float:
    """Mean of -sum(y * log softmax(logits)); ``labels`` one-hot or soft."""
    y = _as_logits(labels, "labels")
    z = _as_logits(logits, "logits")
    _same_shape(y, z, "cross_entropy")
    per_row = -(y * log_softmax(z)).sum(axis=-1)
    return float(np.mean(per_row))


def kd_loss(teacher, student, tau: float) -> float:
    """tau^2 * KL(softmax(teacher/tau) || softmax(student/tau))."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    t = _as_logits(teacher, "teacher")
    s = _as_logits(student, "student")
    _same_shape(t, s, "kd_loss")
    log_p = log_softmax(t, tau)
    log_q = log_softmax(s, tau)
    kl = (np.exp(log_p) * (log_p - log_q)).sum(axis=-1)
    # KL is non-negative; clip rounding noise
    return float(tau * tau * np.mean(np.maximum(kl, 0.0)))


def kd_grad(teacher, student, tau: float) -> np.ndarray:
    """Gradient of :func:`kd_loss` with respect to the student logits."""
    t = _as_logits(teacher, "teacher")
    s = _as_logits(student, "student")
    _same_shape(t, s, "kd_grad")
    g = tau * (softmax(s, tau) - softmax(t, tau))
    return g / (len(s) if s.ndim == 2 else 1)


def total_loss(l_gt: float, l_kd: float, lam: float) -> float:
    lam = check_fraction(lam, "lambda")
    return lam * l_gt + (1.0 - lam) * l_kd


def lr_decay(alpha0: float, gamma: float, t: int) -> float:
    """alpha0 * gamma**t."""
    if not 0 < gamma < 1:
        raise ValueError(f"gamma must lie in (0, 1), got {gamma}")
    return alpha0 * gamma ** t


def global_objective(stage_losses: Sequence[tuple[float, float]]) -> float:
    """Sum over stages of (L_GT + L_total), taken literally.

    L_total already contains lambda * L_GT, so the ground-truth term carries
    weight 1 + lambda in each stage.
    """
    return float(sum(gt + tot for gt, tot in stage_losses))


@dataclass(frozen=True)
class DistillParams:
    lam: float = 0.5
    tau: float = 4.0
    alpha0: float = 0.1
    gamma: float = 0.9
    epochs: int = 10

    def __post_init__(self):
        check_fraction(self.lam, "lambda")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.alpha0 > 0:
            raise ValueError("alpha0 must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        check_positive_int(self.epochs, "epochs")


@dataclass(frozen=True)
class ScheduleStage:
    active_blocks: tuple[str, ...]
    active_widths: tuple[int, ...]
    teacher_epochs: int
    student_epochs: int
    lam: float
    tau: float
    lr_plan: tuple[dict, ...]
    # layers whose learning rate follows the gamma decay instead of alpha
    decayed_blocks: tuple[str, ...] = ()
    merge_after: bool = True
    objective_terms: tuple[str, ...] = ("L_GT", "L_total")

    def to_dict(self) -> dict:
        return {
            "active_blocks": list(self.active_blocks),
            "active_widths": list(self.active_widths),
            "teacher_epochs": self.teacher_epochs,
            "student_epochs": self.student_epochs,
            "lambda": self.lam,
            "tau": self.tau,
            "lr_plan": [dict(p) for p in self.lr_plan],
            "decayed_blocks": list(self.decayed_blocks),
            "merge_after": self.merge_after,
            "objective_terms": list(self.objective_terms),
        }


@dataclass(frozen=True)
class MorphingSchedule:
    kind: str
    stages: tuple[ScheduleStage, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "stages": [s.to_dict() for s in self.stages]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _lr_plan(p: DistillParams) -> tuple[dict, ...]:
    # the student rate drops tenfold per epoch; earlier blocks decay by gamma
    return tuple({"epoch": e,
                  "alpha": p.alpha0 / 10 ** (e - 1),
                  "decay": p.gamma ** e,
                  "earlier_block_lr": lr_decay(p.alpha0, p.gamma, e)}
                 for e in range(1, p.epochs + 1))


def build_schedule(g: NetworkGraph, blocks: Sequence, kind: str = "depth",
                   params: DistillParams | None = None,
                   fractions: Sequence[float] = (0.5, 1.0)) -> MorphingSchedule:
    """Stage plan for growing a morphable network.

    Depth schedules activate block prefixes A, AB, ABC, ...; width schedules
    walk ``fractions`` (strictly increasing, ending at 1.0) at full depth.
    Every stage alternates a teacher epoch on the full network with a student
    epoch on the stage's subnetwork. A stage whose subnetwork is the full
    network has no student phase.
    """
    from .morph import width_assignment

    if not blocks:
        raise EmptyBlocks("cannot build a schedule without layer blocks")
    params = params or DistillParams()
    kind = kind.lower()
    block_ids = tuple(b.block_id for b in blocks)
    convs = g.conv_layers
    plan = _lr_plan(params)
    stages = []
    if kind == "depth":
        for i in range(1, len(blocks) + 1):
            active = set().union(*(b.layer_ids for b in blocks[:i]))
            full = i == len(blocks)
            stages.append(ScheduleStage(
                active_blocks=block_ids[:i],
                active_widths=tuple(l.filters for l in convs if l.id in active),
                teacher_epochs=params.epochs,
                student_epochs=0 if full else params.epochs,
                lam=params.lam, tau=params.tau, lr_plan=plan,
                decayed_blocks=block_ids[: i - 1]))
    elif kind == "width":
        fr = [check_fraction(f, "fraction", open_low=True) for f in fractions]
        if not fr or fr[-1] != 1.0 or any(a >= b for a, b in zip(fr, fr[1:])):
            raise ValueError(f"width fractions must increase strictly up to 1.0, got {list(fractions)}")
        for n, f in enumerate(fr):
            widths = tuple(width_assignment(l.filters, l.filters, f)[0] for l in convs)
            stages.append(ScheduleStage(
                active_blocks=block_ids,
                active_widths=widths,
                teacher_epochs=params.epochs,
                student_epochs=0 if f == 1.0 else params.epochs,
                lam=params.lam, tau=params.tau, lr_plan=plan,
                decayed_blocks=()))
    else:
        raise ValueError(f"schedule kind must be 'depth' or 'width', got {kind!r}")
    return MorphingSchedule(kind=kind, stages=tuple(stages))
