"""Teacher-student losses of the two refinement stages.

Teacher quantities are constants: callers produce them under
``torch.no_grad`` and they are detached here again for safety.
"""

from __future__ import annotations

import logging

import torch

log = logging.getLogger(__name__)

EPS = 1e-7
LOSS_TERMS = ("mse", "bce", "cls")


def soft_bce(target: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    """Elementwise binary cross entropy between probabilities, ``pred`` clamped to ``[eps, 1 - eps]``."""
    p = pred.clamp(EPS, 1 - EPS)
    t = target.detach()
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p))


def feature_mse(f_teacher: torch.Tensor, f_student: torch.Tensor) -> torch.Tensor:
    return torch.mean((f_student - f_teacher.detach()) ** 2)


def certainty_weighted_cls_loss(s_teacher: torch.Tensor, s_student: torch.Tensor,
                                p_student: torch.Tensor) -> torch.Tensor:
    """Objectness-weighted class BCE.

    ``-(1/N) sum_i p_i * (1/n_c) sum_c [t ln s + (1 - t) ln(1 - s)]`` with
    teacher scores ``t`` and student scores ``s``.  ``p`` acts as a
    per-proposal weight and receives no gradient.
    """
    if s_student.shape[0] == 0:
        log.warning("certainty-weighted class loss called with no proposals")
        return s_student.sum() * 0.0
    per_prop = soft_bce(s_teacher, s_student).mean(dim=1)
    return (p_student.detach() * per_prop).mean()


def _bce_term(y_teacher, y_student):
    if y_student.numel() == 0:
        log.warning("no teacher proposal falls on a student-visible frame; BCE term skipped")
        return y_student.sum() * 0.0
    return soft_bce(y_teacher, y_student).mean()


def trs_loss(f_teacher, f_student, y_teacher, y_student, terms=LOSS_TERMS) -> dict[str, torch.Tensor]:
    """Feature MSE plus soft-label BCE on post-aggregation class scores.

    ``f_teacher`` must already be restricted to the frames the student saw.
    """
    zero = f_student.sum() * 0.0
    mse = feature_mse(f_teacher, f_student) if "mse" in terms else zero
    bce = _bce_term(y_teacher, y_student) if "bce" in terms else zero
    return {"total": mse + bce, "mse": mse, "bce": bce, "cls": zero}


def srs_loss(f_teacher, f_student, y_teacher, s_student, p_student, gamma: float = 0.2,
             terms=LOSS_TERMS) -> dict[str, torch.Tensor]:
    """:func:`trs_loss` on single-frame student scores plus ``gamma`` times the weighted class loss."""
    out = trs_loss(f_teacher, f_student, y_teacher, s_student, terms)
    if "cls" in terms and gamma != 0:
        cls = certainty_weighted_cls_loss(y_teacher, s_student, p_student)
        out["cls"] = cls
        out["total"] = out["total"] + gamma * cls
    return out
