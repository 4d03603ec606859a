"""Acquisition scores for selecting which scenes to label next.

The combined selection score multiplies two ingredients that the labeled
pool cannot provide on its own:

- disagreement among ensemble members (total variance of box parameters
  across matched member predictions) plus the squared gap between the
  ensemble-mean box and the teacher's box (teacher-student inconsistency);
- the teacher's summed location sigma for that object, which concentrates
  the budget where pseudo-labels are least trustworthy.

Per-object scores aggregate to a scene score by taking the maximum.
Objects are anchored on teacher detections: each ensemble member is
matched against the teacher's detections with one-to-one greedy IoU
matching, so a teacher detection that no member reproduces is treated as
maximal inconsistency (a configurable ceiling, by default the 99th
percentile of matched inconsistencies in the pool).

Baselines: random order, max classification entropy, k-center greedy over
scene embeddings, and an oracle that ranks by the true per-scene loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from monolig.detectors import (
    StudentEnsemble,
    StudentModel,
    TeacherModel,
    scene_feature,
    student_infer,
    teacher_infer,
    true_scene_loss,
)
from monolig.geometry import Box3D, ScoredBox, match_sets, wrap_angle

BASELINES = ("random", "entropy", "coreset", "loss_oracle")

# fallback i_ts percentile for teacher detections no member matched
UNMATCHED_ITS_PERCENTILE = 99.0


@dataclass
class ObjectScore:
    u_tv: float
    i_ts: float
    u_al_t: float
    combined: float


@dataclass
class ScoreBreakdown:
    scene_id: int
    objects: list = field(default_factory=list)
    sample_score: float = 0.0


def _param_matrix(boxes) -> np.ndarray:
    return np.stack([b.to_array() for b in boxes])


def _circular_mean(angles: np.ndarray) -> float:
    return math.atan2(np.sin(angles).sum(), np.cos(angles).sum())


def ensemble_mean_box(boxes) -> Box3D:
    """Per-parameter mean box; yaw uses the circular mean."""
    m = _param_matrix(boxes)
    mean = m[:, :6].mean(axis=0)
    yaw = _circular_mean(m[:, 6])
    return Box3D(
        cx=float(mean[0]), cy=float(mean[1]), cz=float(mean[2]),
        w=float(mean[3]), h=float(mean[4]), l=float(mean[5]), yaw=yaw,
    )


def total_variance(boxes, params: str = "all7") -> float:
    """Sum over regression parameters of the population variance across
    ensemble predictions for one object.

    Yaw deviations are wrapped about the circular mean. params="loc3"
    restricts to the three location parameters.
    """
    if len(boxes) < 2:
        raise ValueError("total variance needs at least 2 member predictions")
    m = _param_matrix(boxes)
    if params == "loc3":
        return float(m[:, :3].var(axis=0).sum())
    if params != "all7":
        raise ValueError(f"unknown params selector {params!r}")
    linear = float(m[:, :6].var(axis=0).sum())
    yaw_bar = _circular_mean(m[:, 6])
    dev = wrap_angle(m[:, 6] - yaw_bar)
    return linear + float((dev**2).mean())


def ts_inconsistency(mean_box: Box3D, teacher_box: Box3D, params: str = "all7") -> float:
    """Sum of squared parameter differences between the ensemble-mean box
    and the teacher's box (yaw wrapped)."""
    a = mean_box.to_array()
    b = teacher_box.to_array()
    if params == "loc3":
        return float(((a[:3] - b[:3]) ** 2).sum())
    if params != "all7":
        raise ValueError(f"unknown params selector {params!r}")
    dyaw = float(wrap_angle(a[6] - b[6]))
    return float(((a[:6] - b[:6]) ** 2).sum()) + dyaw * dyaw


def monolig_score(u_tv: float, i_ts: float, u_al_t: float) -> float:
    """Combined per-object selection score: (u_tv + i_ts) * u_al_t."""
    if u_tv < 0 or i_ts < 0 or u_al_t < 0:
        raise ValueError("score components must be non-negative")
    return (u_tv + i_ts) * u_al_t


def score_frames(
    teacher_dets: dict,
    member_dets: dict,
    tau_match: float = 0.5,
    params: str = "all7",
    component: str = "combined",
) -> list:
    """Score frames given detections only (shared by live and import paths).

    teacher_dets maps frame id -> teacher Detection list (with sigmas);
    member_dets maps frame id -> list of per-member Detection lists.
    component selects what the per-object score is: "combined" (default),
    or one of "u_tv", "i_ts", "u_al", "tv_plus_its" for ablations.
    """
    if component not in ("combined", "u_tv", "i_ts", "u_al", "tv_plus_its"):
        raise ValueError(f"unknown score component {component!r}")

    staged = []  # (frame_id, u_al, u_tv, i_ts or None)
    for fid in teacher_dets:
        tdets = teacher_dets[fid]
        members = member_dets[fid]
        t_scored = [ScoredBox(d.box, d.p, d.category) for d in tdets]
        matched_boxes = [[] for _ in tdets]
        for mdets in members:
            m_scored = [ScoredBox(d.box, d.p, d.category) for d in mdets]
            res = match_sets(t_scored, m_scored, tau_match)
            for i, j, _ in res.pairs:
                matched_boxes[i].append(mdets[j].box)
        frame_entries = []
        for i, tdet in enumerate(tdets):
            if tdet.sigma_xyz is None:
                raise ValueError("teacher detections must carry location sigmas")
            u_al = float(sum(tdet.sigma_xyz))
            boxes = matched_boxes[i]
            if boxes:
                u_tv = total_variance(boxes, params) if len(boxes) >= 2 else 0.0
                i_ts = ts_inconsistency(ensemble_mean_box(boxes), tdet.box, params)
            else:
                u_tv = 0.0
                i_ts = None  # filled with the pool ceiling afterwards
            frame_entries.append((u_al, u_tv, i_ts))
        staged.append((fid, frame_entries))

    matched_its = [
        e[2] for _, entries in staged for e in entries if e[2] is not None
    ]
    ceiling = (
        float(np.percentile(matched_its, UNMATCHED_ITS_PERCENTILE))
        if matched_its
        else 0.0
    )

    out = []
    for fid, entries in staged:
        objs = []
        for u_al, u_tv, i_ts in entries:
            if i_ts is None:
                i_ts = ceiling
            if component == "combined":
                value = monolig_score(u_tv, i_ts, u_al)
            elif component == "u_tv":
                value = u_tv
            elif component == "i_ts":
                value = i_ts
            elif component == "u_al":
                value = u_al
            else:
                value = u_tv + i_ts
            objs.append(ObjectScore(u_tv=u_tv, i_ts=i_ts, u_al_t=u_al, combined=value))
        sample = max((o.combined for o in objs), default=0.0)
        out.append(ScoreBreakdown(scene_id=fid, objects=objs, sample_score=sample))
    return out


def score_pool(
    ensemble: StudentEnsemble,
    teacher: TeacherModel,
    scenes,
    tau_match: float = 0.5,
    params: str = "all7",
    component: str = "combined",
) -> list:
    """Run teacher and ensemble inference over the pool and score each scene."""
    teacher_dets = {s.id: teacher_infer(teacher, s) for s in scenes}
    member_dets = {
        s.id: [student_infer(m, s) for m in ensemble.members] for s in scenes
    }
    return score_frames(teacher_dets, member_dets, tau_match, params, component)


def rank_scenes(breakdowns, seed=None) -> list:
    """Scene ids by descending sample score.

    Ties (notably all-zero scores) break by a seeded permutation so
    zero-evidence scenes are picked in random-but-reproducible order; with
    no seed, ties fall back to ascending scene id.
    """
    ids = sorted(b.scene_id for b in breakdowns)
    if seed is None:
        pos = {sid: sid for sid in ids}
    else:
        rng = np.random.default_rng(seed)
        pos = {sid: k for sid, k in zip(ids, rng.permutation(len(ids)))}
    return [
        b.scene_id
        for b in sorted(breakdowns, key=lambda b: (-b.sample_score, pos[b.scene_id]))
    ]


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def shannon_entropy(probs) -> float:
    p = np.asarray(probs, dtype=float)
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _rank_by_value(values: dict, seed) -> list:
    ids = sorted(values)
    rng = np.random.default_rng(seed)
    pos = {sid: k for sid, k in zip(ids, rng.permutation(len(ids)))}
    return sorted(ids, key=lambda sid: (-values[sid], pos[sid]))


def k_center_greedy(candidate_feats: np.ndarray, center_feats: np.ndarray) -> list:
    """Farthest-point ordering of candidates given existing centers.

    Each round picks the candidate with the largest distance to its nearest
    center (ties by lower index), then adds it as a center. Returns the
    full pick order.
    """
    n = len(candidate_feats)
    if n == 0:
        return []
    if len(center_feats):
        diff = candidate_feats[:, None, :] - center_feats[None, :, :]
        min_dist = np.sqrt((diff**2).sum(axis=2)).min(axis=1)
    else:
        min_dist = np.full(n, np.inf)
    order = []
    remaining = np.ones(n, dtype=bool)
    for _ in range(n):
        masked = np.where(remaining, min_dist, -np.inf)
        pick = int(np.argmax(masked))
        order.append(pick)
        remaining[pick] = False
        d = np.sqrt(((candidate_feats - candidate_feats[pick]) ** 2).sum(axis=1))
        min_dist = np.minimum(min_dist, d)
    return order


def baseline_scores(
    kind: str,
    scenes,
    student: StudentModel = None,
    labeled_scenes=None,
    seed: int = 0,
) -> list:
    """Ranked scene ids for one of the baseline acquisition methods.

    random needs only a seed; entropy and loss_oracle need the trained
    student; coreset additionally needs the labeled scenes whose embeddings
    act as initial centers.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    scenes = sorted(scenes, key=lambda s: s.id)
    ids = [s.id for s in scenes]

    if kind == "random":
        rng = np.random.default_rng(seed)
        return [ids[i] for i in rng.permutation(len(ids))]

    if kind == "entropy":
        if student is None:
            raise ValueError("entropy baseline needs a trained student")
        values = {}
        for s in scenes:
            dets = student_infer(student, s)
            values[s.id] = max(
                (shannon_entropy(d.class_probs) for d in dets), default=0.0
            )
        return _rank_by_value(values, seed)

    if kind == "loss_oracle":
        if student is None:
            raise ValueError("loss_oracle baseline needs a trained student")
        values = {s.id: true_scene_loss(student, s) for s in scenes}
        return _rank_by_value(values, seed)

    # coreset
    if student is None or labeled_scenes is None:
        raise ValueError("coreset baseline needs a student and the labeled scenes")
    cand = np.stack([scene_feature(student, s) for s in scenes])
    centers = (
        np.stack([scene_feature(student, s) for s in labeled_scenes])
        if labeled_scenes
        else np.empty((0, cand.shape[1]))
    )
    order = k_center_greedy(cand, centers)
    return [ids[i] for i in order]
