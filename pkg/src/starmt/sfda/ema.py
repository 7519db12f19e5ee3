from __future__ import annotations

import copy
from dataclasses import dataclass

import torch

from ..detector.model import TinyVOD

EMA_SCOPES = ("all", "backbone_only")


@dataclass
class TeacherStudent:
    teacher: TinyVOD
    student: TinyVOD
    alpha: float = 0.9995
    t: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.teacher.fingerprint() != self.student.fingerprint():
            raise ValueError("teacher and student architectures differ")

    @classmethod
    def from_source(cls, source: TinyVOD, alpha: float = 0.9995) -> "TeacherStudent":
        """Teacher and student both start as copies of ``source``; the teacher never takes gradients."""
        teacher = copy.deepcopy(source)
        student = copy.deepcopy(source)
        for p in teacher.parameters():
            p.requires_grad_(False)
        teacher.eval()
        student.train()
        return cls(teacher, student, alpha)


@torch.no_grad()
def ema_update(ts: TeacherStudent, scope: str = "all") -> TeacherStudent:
    """``teacher <- alpha * teacher + (1 - alpha) * student`` over the tensors in ``scope``.

    ``scope="backbone_only"`` leaves every TAM tensor of the teacher untouched.
    """
    if scope not in EMA_SCOPES:
        raise ValueError(f"unknown EMA scope {scope!r}")
    a = ts.alpha
    student = dict(ts.student.named_parameters())
    for name, pt in ts.teacher.named_parameters():
        if scope == "backbone_only" and ts.teacher.scope_of(name) != "backbone":
            continue
        pt.mul_(a).add_(student[name].detach(), alpha=1 - a)
    # normalisation statistics follow the same rule; integer counters are copied
    student_buf = dict(ts.student.named_buffers())
    for name, bt in ts.teacher.named_buffers():
        if scope == "backbone_only" and ts.teacher.scope_of(name) != "backbone":
            continue
        if bt.is_floating_point():
            bt.mul_(a).add_(student_buf[name], alpha=1 - a)
        else:
            bt.copy_(student_buf[name])
    ts.t += 1
    return ts
