"""Pseudo-labels from teacher inference on the unlabeled pool.

The teacher's post-NMS detections become training targets for the student.
Three confidence strategies are provided:

- "aleatoric": soft weighting, c = clamp(1 - u_al, 0, 1) * p, where u_al is
  the summed location sigma of the detection. Nothing is dropped; bad
  detections simply stop contributing to the loss.
- "uniform": every detection kept at c = 1 (the no-confidence baseline).
- "hard_threshold": keep only detections with class probability >= tau_p,
  at c = 1 (classification-confidence filtering).

The (1 - u_al) factor is clamped at zero because summed sigmas can exceed
one on noisy objects, and a negative loss weight is meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from monolig.detectors import Detection, TeacherModel, aleatoric_box_score, teacher_infer
from monolig.geometry import Box3D

STRATEGIES = ("aleatoric", "uniform", "hard_threshold")

# default classification threshold for the hard filtering baseline
DEFAULT_TAU_P = 0.7


@dataclass
class PseudoLabel:
    scene_id: int
    box: Box3D
    category: int
    confidence: float
    proposal_index: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


def confidence(det: Detection, sigma_mode: str = "std") -> float:
    """Pseudo-label confidence: clamp(1 - u_al, 0, 1) times class probability."""
    u_al = aleatoric_box_score(det, mode=sigma_mode)
    loc_conf = min(max(1.0 - u_al, 0.0), 1.0)
    return loc_conf * det.p


def generate(
    teacher: TeacherModel,
    unlabeled_scenes,
    strategy: str = "aleatoric",
    tau_p: float = DEFAULT_TAU_P,
    sigma_mode: str = "std",
    normalize_ual: bool = False,
) -> dict:
    """Pseudo-labels for every unlabeled scene, keyed by scene id.

    The aleatoric strategy requires a teacher trained with the uncertainty
    head; the other strategies work with either teacher. With
    normalize_ual the summed sigmas are divided by their maximum over the
    pool before entering the confidence, which keeps the weighting
    meaningful when a data-poor teacher predicts sigmas above 1 m across
    the board (the raw weight would clamp to zero everywhere).
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if strategy == "aleatoric" and not teacher.aleatoric:
        raise ValueError("aleatoric strategy needs a teacher with the uncertainty head")

    dets_by_scene = {s.id: teacher_infer(teacher, s) for s in unlabeled_scenes}

    u_scale = 1.0
    if strategy == "aleatoric" and normalize_ual:
        all_u = [
            aleatoric_box_score(d, sigma_mode)
            for dets in dets_by_scene.values()
            for d in dets
        ]
        if all_u:
            u_scale = max(max(all_u), 1e-12)

    out = {}
    for scene in unlabeled_scenes:
        labels = []
        for det in dets_by_scene[scene.id]:
            if strategy == "aleatoric":
                u_al = aleatoric_box_score(det, sigma_mode) / u_scale
                c = min(max(1.0 - u_al, 0.0), 1.0) * det.p
            elif strategy == "uniform":
                c = 1.0
            else:  # hard_threshold
                if det.p < tau_p:
                    continue
                c = 1.0
            labels.append(
                PseudoLabel(
                    scene_id=scene.id,
                    box=det.box,
                    category=det.category,
                    confidence=c,
                    proposal_index=det.proposal_index,
                )
            )
        out[scene.id] = labels
    return out
