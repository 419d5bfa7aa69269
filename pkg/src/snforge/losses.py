"""Distillation objectives on top of the autodiff engine.

Teacher logits are always treated as constants: gradients reach the student
only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, LossError, ParameterError


def _teacher_array(logits) -> np.ndarray:
    return logits.data if isinstance(logits, Tensor) else np.asarray(logits)


def _check(teacher: np.ndarray, student: Tensor, temperature: float) -> None:
    if teacher.shape != student.shape:
        raise DimensionError(f"teacher logits {teacher.shape} vs student {student.shape}")
    if not temperature > 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")
    if not (np.all(np.isfinite(teacher)) and np.all(np.isfinite(student.data))):
        raise LossError("non-finite logits")


def _kl_rows(p_t: np.ndarray, logp_t: np.ndarray, student: Tensor, temperature: float) -> Tensor:
    """Mean over rows of sum_i p_t * (log p_t - log p_s)."""
    logp_s = ad.log_softmax(student, temperature)
    const = float((p_t * logp_t).sum())
    cross = ad.sum_(ad.mul(logp_s, p_t.astype(student.dtype)))
    n_rows = int(np.prod(student.shape[:-1]))
    return ad.scale(ad.add(ad.scale(cross, -1.0), np.asarray(const, dtype=student.dtype)), 1.0 / n_rows)


def forward_kl(teacher_logits, student_logits: Tensor, temperature: float = 1.0) -> Tensor:
    """KL(p_teacher^T || p_student^T) per position, averaged over positions."""
    zt = _teacher_array(teacher_logits)
    _check(zt, student_logits, temperature)
    logp_t = ad.log_softmax_np(zt.astype(np.float64), temperature)
    return _kl_rows(np.exp(logp_t), logp_t, student_logits, temperature)


def topk_indices(logits: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries per row; ties go to the lower index."""
    order = np.argsort(-logits, axis=-1, kind="stable")
    return order[..., :k]


def topk_kl(teacher_logits, student_logits: Tensor, temperature: float, k: int,
            select_from: str = "teacher") -> Tensor:
    """Forward KL between both distributions restricted to a top-k index set.

    The set comes from the teacher's largest logits by default
    (``select_from="student"`` uses the student's). Both restricted logit
    vectors are re-normalised with a temperature softmax.
    """
    zt = _teacher_array(teacher_logits)
    _check(zt, student_logits, temperature)
    C = zt.shape[-1]
    if not 1 <= k <= C:
        raise ParameterError(f"k must be in [1, {C}], got {k}")
    if select_from == "teacher":
        idx = topk_indices(zt, k)
    elif select_from == "student":
        idx = topk_indices(student_logits.data, k)
    else:
        raise ParameterError(f"select_from must be 'teacher' or 'student', got {select_from!r}")
    zt_k = np.take_along_axis(zt, idx, axis=-1).astype(np.float64)
    zs_k = ad.take_along_last(student_logits, idx)
    logp_t = ad.log_softmax_np(zt_k, temperature)
    return _kl_rows(np.exp(logp_t), logp_t, zs_k, temperature)


@dataclass(frozen=True)
class DistillSpec:
    alpha: float = 0.2
    beta: float = 0.8
    temperature: float = 0.9
    logit_mode: str = "topk"
    k: int = 1024
    select_from: str = "teacher"

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0 and 0.0 <= self.beta <= 1.0):
            raise ParameterError("alpha and beta must lie in [0, 1]")
        if self.alpha + self.beta <= 0:
            raise ParameterError("alpha + beta must be > 0")
        if not self.temperature > 0:
            raise ParameterError("temperature must be > 0")
        if self.logit_mode not in ("full", "topk"):
            raise ParameterError(f"logit_mode must be 'full' or 'topk', got {self.logit_mode!r}")
        if self.logit_mode == "topk" and self.k < 1:
            raise ParameterError("k must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "DistillSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParameterError(f"unknown distill fields: {sorted(unknown)}")
        return cls(**d)

    def effective_k(self, vocab: int) -> int:
        return min(self.k, vocab)


def distill_component(logits_s: Tensor, logits_t, spec: DistillSpec) -> Tensor:
    if spec.logit_mode == "full":
        return forward_kl(logits_t, logits_s, spec.temperature)
    C = logits_s.shape[-1]
    if spec.k > C:
        raise ParameterError(f"k={spec.k} exceeds vocabulary {C}")
    return topk_kl(logits_t, logits_s, spec.temperature, spec.k, spec.select_from)


def combined_loss(logits_s: Tensor, logits_t, targets, spec: DistillSpec,
                  ignore_index: int = -100) -> tuple[Tensor, float, float]:
    """``alpha * CE + beta * KL``; also returns the two raw components.

    A zero weight skips its term entirely, so ``alpha=1, beta=0`` is exactly
    the cross-entropy.
    """
    terms = []
    ce_val = kl_val = float("nan")
    if spec.alpha > 0:
        ce = ad.cross_entropy(logits_s, targets, ignore_index)
        ce_val = ce.item()
        terms.append(ce if spec.alpha == 1.0 else ad.scale(ce, spec.alpha))
    if spec.beta > 0:
        kl = distill_component(logits_s, logits_t, spec)
        kl_val = kl.item()
        terms.append(kl if spec.beta == 1.0 else ad.scale(kl, spec.beta))
    loss = terms[0] if len(terms) == 1 else ad.add(terms[0], terms[1])
    return loss, ce_val, kl_val
