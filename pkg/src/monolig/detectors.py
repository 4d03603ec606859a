"""Surrogate detectors: range-sensor teacher and camera-like students.

The teacher regresses the 7 box parameters per proposal, classifies the
proposal, and carries a Gaussian uncertainty head over the three location
parameters trained with negative log-likelihood; the predicted per-axis
standard deviations feed pseudo-label confidences and selection scores.
Students regress and classify without the uncertainty head; their per-box
loss can be scaled by a confidence weight, which is how pseudo-labels of
differing quality enter training. Ensembles are students differing only in
init/shuffle seed.

Both heads regress offsets from the proposal's observed box encoding (the
first 7 feature components act as the anchor), so network outputs stay at
noise scale instead of absolute-position scale. Location losses are
computed in meters (the encoded positions are scaled back up), so predicted
sigmas are in meters as well.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from monolig.geometry import Box3D, ScoredBox, nms_indices, wrap_angle
from monolig.nnet import (
    Mlp,
    backward_from_cache,
    forward,
    forward_cached,
    init_adam,
    init_mlp,
    adam_step,
    penultimate,
)
from monolig.synthworld import N_CATEGORIES, POS_SCALE, Scene, decode_box, encode_box

# log-variance outputs are clamped to this window before exponentiation
LOGVAR_MIN = -6.0
LOGVAR_MAX = 4.0

# the output layer starts near zero so initial predictions sit on the
# anchor box
FINAL_LAYER_INIT_SCALE = 0.05

# initial log-variance bias: the uncertainty head opens at sigma ~ 0.6 m,
# between the clean near-object and noisy far-object regimes
SIGMA_BIAS_INIT = -1.0

N_BOX_PARAMS = 7
N_SIGMA = 3  # uncertainty head covers cx, cy, cz only


@dataclass
class TrainConfig:
    """Shared training hyperparameters for both surrogates."""

    hidden_dim: int = 32
    epochs: int = 150
    batch_size: int = 64
    lr: float = 3e-3
    weight_decay: float = 0.0
    activation: str = "tanh"
    detect_threshold: float = 0.3
    nms_iou: float = 0.5
    cls_weight: float = 5.0
    teacher_aleatoric: bool = True
    sigma_mode: str = "std"  # "std" sums sigmas, "var" sums variances


@dataclass
class Detection:
    """One predicted object: box, category, class probability, and (for the
    teacher) per-axis location standard deviations in meters."""

    box: Box3D
    category: int
    p: float
    sigma_xyz: Optional[tuple] = None
    class_probs: Optional[np.ndarray] = None
    proposal_index: Optional[int] = None


@dataclass
class TeacherModel:
    net: Mlp
    n_categories: int = N_CATEGORIES
    aleatoric: bool = True
    cfg: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class StudentModel:
    net: Mlp
    n_categories: int = N_CATEGORIES
    cfg: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class StudentEnsemble:
    members: list


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def gaussian_nll(y, mu, sigma2):
    """Negative log-likelihood of y under N(mu, sigma2), dropping constants:
    (y - mu)^2 / (2 sigma2) + log(sigma2) / 2."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    out = (y - mu) ** 2 / (2.0 * sigma2) + np.log(sigma2) / 2.0
    return float(out) if out.ndim == 0 else out


def gaussian_nll_grads(y, mu, sigma2):
    """Gradients of gaussian_nll with respect to mu and to log(sigma2)."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    d_mu = (mu - y) / sigma2
    d_logvar = 0.5 * (1.0 - (y - mu) ** 2 / sigma2)
    return d_mu, d_logvar


def aleatoric_box_score(det: Detection, mode: str = "std") -> float:
    """Scalar box uncertainty: sum of the three location sigmas.

    mode="var" sums variances instead, kept as the alternative reading of
    the combining rule.
    """
    if det.sigma_xyz is None:
        raise ValueError("detection carries no location sigmas")
    s = np.asarray(det.sigma_xyz, dtype=float)
    if np.any(s <= 0):
        raise ValueError("sigmas must be positive")
    if mode == "std":
        return float(s.sum())
    if mode == "var":
        return float((s**2).sum())
    raise ValueError(f"unknown sigma mode {mode!r}")


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def box_regression_loss(pred_box: Box3D, target_box: Box3D) -> float:
    """Squared error over the 7 box parameters in natural units, with the
    yaw residual wrapped to the smallest signed angle."""
    pa = pred_box.to_array()
    ta = target_box.to_array()
    reg = float(np.sum((pa[:6] - ta[:6]) ** 2))
    dyaw = float(wrap_angle(pa[6] - ta[6]))
    return reg + dyaw * dyaw


def cross_entropy(class_logits, target_category: int) -> float:
    p = _softmax(np.asarray(class_logits, dtype=float))
    return float(-np.log(max(p[target_category], 1e-300)))


def weighted_student_loss(
    pred_box: Box3D,
    class_logits,
    target_box: Box3D,
    target_category: int,
    c: float,
) -> float:
    """Confidence-scaled per-box student loss: c * (regression + cross-entropy)."""
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"confidence must be in [0, 1], got {c}")
    return c * (
        box_regression_loss(pred_box, target_box)
        + cross_entropy(class_logits, target_category)
    )


def joint_loss(labeled_items, pseudo_items, lambda_u: float) -> float:
    """Combined objective: mean labeled loss at confidence 1 plus lambda_u
    times the mean confidence-weighted pseudo-label loss.

    Each labeled item is (pred_box, class_logits, target_box, target_category);
    pseudo items additionally carry their confidence.
    """
    if lambda_u < 0:
        raise ValueError("lambda_u must be >= 0")
    total = 0.0
    if labeled_items:
        total += float(
            np.mean([weighted_student_loss(*item, c=1.0) for item in labeled_items])
        )
    if pseudo_items and lambda_u > 0:
        total += lambda_u * float(
            np.mean([weighted_student_loss(*item[:4], c=item[4]) for item in pseudo_items])
        )
    return total


# ---------------------------------------------------------------------------
# batches and vectorized loss gradients
# ---------------------------------------------------------------------------

@dataclass
class _Rows:
    """Flat per-proposal training arrays."""

    x: np.ndarray          # (n, feature_dim)
    has_box: np.ndarray    # (n,) bool
    y_enc: np.ndarray      # (n, 7) encoded targets, zeros where has_box is False
    cat: np.ndarray        # (n,) int class target (background = n_categories)
    conf: np.ndarray       # (n,) per-row confidence weight
    is_pseudo: np.ndarray  # (n,) bool

    def take(self, idx):
        return _Rows(
            self.x[idx],
            self.has_box[idx],
            self.y_enc[idx],
            self.cat[idx],
            self.conf[idx],
            self.is_pseudo[idx],
        )

    def __len__(self):
        return len(self.x)


def _rows_from_labeled(scenes, feature_key: str) -> list:
    rows = []
    for s in scenes:
        for p in s.proposals:
            feats = getattr(p, feature_key)
            if p.gt is not None:
                box, cat = p.gt
                rows.append((feats, True, encode_box(box), cat, 1.0, False))
            else:
                rows.append((feats, False, np.zeros(N_BOX_PARAMS), N_CATEGORIES, 1.0, False))
    return rows


def _rows_from_pseudo(pseudo_scenes) -> list:
    rows = []
    for scene, labels in pseudo_scenes:
        for pl in labels:
            if pl.proposal_index is None:
                continue
            feats = scene.proposals[pl.proposal_index].student_features
            rows.append(
                (feats, True, encode_box(pl.box), pl.category, float(pl.confidence), True)
            )
    return rows


def _pack_rows(rows) -> _Rows:
    return _Rows(
        x=np.array([r[0] for r in rows], dtype=float),
        has_box=np.array([r[1] for r in rows], dtype=bool),
        y_enc=np.array([r[2] for r in rows], dtype=float),
        cat=np.array([r[3] for r in rows], dtype=int),
        conf=np.array([r[4] for r in rows], dtype=float),
        is_pseudo=np.array([r[5] for r in rows], dtype=bool),
    )


def _regression_terms(out, batch: _Rows, aleatoric: bool):
    """Per-row regression loss and d(loss)/d(out) for box-carrying rows.

    The network output is an offset added to the anchor (the observed box
    encoding in the row's first 7 feature components). Location residuals
    are measured in meters; with the uncertainty head active the three
    location axes use the Gaussian NLL with the log-variance outputs
    clamped to [LOGVAR_MIN, LOGVAR_MAX].
    """
    n = len(batch)
    loss_rows = np.zeros(n)
    grad = np.zeros_like(out)
    idx = np.flatnonzero(batch.has_box)
    if idx.size == 0:
        return loss_rows, grad
    anchors = batch.x[idx, :N_BOX_PARAMS]
    mu = anchors + out[idx, :N_BOX_PARAMS]
    y = batch.y_enc[idx]

    rm = (mu[:, :3] - y[:, :3]) * POS_SCALE  # meters
    if aleatoric:
        s_raw = out[idx, N_BOX_PARAMS : N_BOX_PARAMS + N_SIGMA]
        s = np.clip(s_raw, LOGVAR_MIN, LOGVAR_MAX)
        var = np.exp(s)
        # the residual rm plays the role of (prediction - target) in meters
        loc = gaussian_nll(0.0, rm, var).sum(axis=1)
        d_mu_m, ds = gaussian_nll_grads(0.0, rm, var)
        dmu_loc = d_mu_m * POS_SCALE
        # outside the clamp window, block only gradients that would push the
        # raw output further out; inward gradients must pass or the head
        # sticks at the boundary
        ds[(s_raw <= LOGVAR_MIN) & (ds > 0)] = 0.0
        ds[(s_raw >= LOGVAR_MAX) & (ds < 0)] = 0.0
        grad[idx[:, None], np.arange(N_BOX_PARAMS, N_BOX_PARAMS + N_SIGMA)] = ds
    else:
        loc = (rm**2).sum(axis=1)
        dmu_loc = 2.0 * rm * POS_SCALE

    rd = mu[:, 3:6] - y[:, 3:6]
    dyaw = wrap_angle(mu[:, 6] - y[:, 6])
    loss_rows[idx] = loc + (rd**2).sum(axis=1) + dyaw**2
    grad[idx[:, None], np.arange(3)] = dmu_loc
    grad[idx[:, None], np.arange(3, 6)] = 2.0 * rd
    grad[idx, 6] = 2.0 * dyaw
    return loss_rows, grad


def _classification_terms(out, batch: _Rows, class_offset: int, n_classes: int):
    logits = out[:, class_offset : class_offset + n_classes]
    probs = _softmax(logits)
    n = len(batch)
    picked = probs[np.arange(n), batch.cat]
    loss_rows = -np.log(np.maximum(picked, 1e-300))
    dlogits = probs.copy()
    dlogits[np.arange(n), batch.cat] -= 1.0
    grad = np.zeros_like(out)
    grad[:, class_offset : class_offset + n_classes] = dlogits
    return loss_rows, grad


def teacher_loss_and_grad(net: Mlp, batch: _Rows, aleatoric: bool,
                          cls_weight: float = 1.0):
    """Mean per-proposal teacher loss and its parameter gradients.

    cls_weight rebalances classification against the location NLL, whose
    gradients grow like 1/sigma as the uncertainty head converges and would
    otherwise dominate the shared trunk.
    """
    out, cache = forward_cached(net, batch.x)
    class_offset = N_BOX_PARAMS + (N_SIGMA if aleatoric else 0)
    n_classes = net.layer_dims[-1] - class_offset
    reg_loss, reg_grad = _regression_terms(out, batch, aleatoric)
    cls_loss, cls_grad = _classification_terms(out, batch, class_offset, n_classes)
    n = len(batch)
    loss = float((reg_loss + cls_weight * cls_loss).sum() / n)
    w_grads, b_grads, _ = backward_from_cache(
        net, cache, (reg_grad + cls_weight * cls_grad) / n
    )
    return loss, (w_grads, b_grads)


def student_loss_and_grad(net: Mlp, batch: _Rows, lambda_u: float,
                          cls_weight: float = 1.0):
    """Confidence-weighted joint loss over a mixed labeled/pseudo batch.

    Labeled rows (confidence fixed at 1) are averaged separately from the
    lambda_u-weighted pseudo rows, so the two pools keep their intended
    relative weight whatever the batch composition.
    """
    out, cache = forward_cached(net, batch.x)
    n_classes = net.layer_dims[-1] - N_BOX_PARAMS
    reg_loss, reg_grad = _regression_terms(out, batch, aleatoric=False)
    cls_loss, cls_grad = _classification_terms(out, batch, N_BOX_PARAMS, n_classes)
    rows = batch.conf * (reg_loss + cls_weight * cls_loss)
    cls_grad = cls_weight * cls_grad
    row_grad_scale = batch.conf.copy()

    n_lab = int(np.count_nonzero(~batch.is_pseudo))
    n_ps = int(np.count_nonzero(batch.is_pseudo))
    weights = np.zeros(len(batch))
    if n_lab:
        weights[~batch.is_pseudo] = 1.0 / n_lab
    if n_ps and lambda_u > 0:
        weights[batch.is_pseudo] = lambda_u / n_ps
    loss = float((weights * rows).sum())
    scale = (weights * row_grad_scale)[:, None]
    w_grads, b_grads, _ = backward_from_cache(
        net, cache, (reg_grad + cls_grad) * scale
    )
    return loss, (w_grads, b_grads)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _seed_sequence(seed):
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def _train(net: Mlp, rows: _Rows, loss_fn, cfg: TrainConfig, shuffle_rng):
    state = init_adam(net, lr=cfg.lr, weight_decay=cfg.weight_decay)
    order = np.arange(len(rows))
    for _ in range(cfg.epochs):
        shuffle_rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            sub = rows.take(order[start : start + cfg.batch_size])
            _, grads = loss_fn(net, sub)
            adam_step(net, grads, state)
    return net


def train_teacher(scenes, cfg: TrainConfig, seed=0) -> TeacherModel:
    """Fit the teacher on labeled scenes; deterministic given the seed."""
    rows = _rows_from_labeled(scenes, "teacher_features")
    if not rows:
        raise ValueError("teacher training requires at least one labeled proposal")
    batch = _pack_rows(rows)
    feature_dim = batch.x.shape[1]
    out_dim = N_BOX_PARAMS + (N_SIGMA if cfg.teacher_aleatoric else 0) + N_CATEGORIES + 1
    ss = _seed_sequence(seed)
    init_ss, shuffle_ss = ss.spawn(2)
    net = init_mlp(
        [feature_dim, cfg.hidden_dim, out_dim],
        cfg.activation,
        np.random.default_rng(init_ss),
    )
    net.weights[-1] *= FINAL_LAYER_INIT_SCALE
    if cfg.teacher_aleatoric:
        net.biases[-1][N_BOX_PARAMS : N_BOX_PARAMS + N_SIGMA] = SIGMA_BIAS_INIT
    _train(
        net,
        batch,
        lambda n, b: teacher_loss_and_grad(n, b, cfg.teacher_aleatoric,
                                           cfg.cls_weight),
        cfg,
        np.random.default_rng(shuffle_ss),
    )
    return TeacherModel(net=net, aleatoric=cfg.teacher_aleatoric, cfg=cfg)


def train_student(
    labeled_scenes,
    pseudo_scenes,
    cfg: TrainConfig,
    lambda_u: float = 0.5,
    seed=0,
) -> StudentModel:
    """Fit one student on labeled scenes plus confidence-weighted pseudo-labels.

    pseudo_scenes is a list of (scene, pseudo_label_list) pairs; pass an
    empty list for purely supervised training.
    """
    lab_rows = _rows_from_labeled(labeled_scenes, "student_features")
    if not lab_rows:
        raise ValueError("student training requires a non-empty labeled set")
    rows = lab_rows + _rows_from_pseudo(pseudo_scenes or [])
    batch = _pack_rows(rows)
    feature_dim = batch.x.shape[1]
    out_dim = N_BOX_PARAMS + N_CATEGORIES + 1
    ss = _seed_sequence(seed)
    init_ss, shuffle_ss = ss.spawn(2)
    net = init_mlp(
        [feature_dim, cfg.hidden_dim, out_dim],
        cfg.activation,
        np.random.default_rng(init_ss),
    )
    net.weights[-1] *= FINAL_LAYER_INIT_SCALE
    _train(
        net,
        batch,
        lambda n, b: student_loss_and_grad(n, b, lambda_u, cfg.cls_weight),
        cfg,
        np.random.default_rng(shuffle_ss),
    )
    return StudentModel(net=net, cfg=cfg)


def train_ensemble(
    labeled_scenes,
    pseudo_scenes,
    cfg: TrainConfig,
    lambda_u: float = 0.5,
    n_members: int = 5,
    seed=0,
) -> StudentEnsemble:
    """Train n_members students that differ only in init/shuffle streams."""
    if n_members < 2:
        raise ValueError("an ensemble needs at least 2 members")
    ss = _seed_sequence(seed)
    member_seeds = ss.spawn(n_members)
    members = [
        train_student(labeled_scenes, pseudo_scenes, cfg, lambda_u, seed=ms)
        for ms in member_seeds
    ]
    return StudentEnsemble(members=members)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

def _detections_from_outputs(x, out, aleatoric: bool, cfg: TrainConfig):
    class_offset = N_BOX_PARAMS + (N_SIGMA if aleatoric else 0)
    probs = _softmax(out[:, class_offset:])
    dets = []
    for i in range(out.shape[0]):
        obj_probs = probs[i, :N_CATEGORIES]
        category = int(np.argmax(obj_probs))
        p = float(obj_probs[category])
        if p <= cfg.detect_threshold:
            continue
        box = decode_box(x[i, :N_BOX_PARAMS] + out[i, :N_BOX_PARAMS])
        sigma = None
        if aleatoric:
            # log-variances live in meters^2 already (the NLL residual is
            # scaled to meters), so no further unit conversion
            s = np.clip(out[i, N_BOX_PARAMS : N_BOX_PARAMS + N_SIGMA],
                        LOGVAR_MIN, LOGVAR_MAX)
            sigma = tuple(float(v) for v in np.exp(s / 2.0))
        dets.append(
            Detection(
                box=box,
                category=category,
                p=p,
                sigma_xyz=sigma,
                class_probs=probs[i].copy(),
                proposal_index=i,
            )
        )
    return dets


def _nms_filter(dets, iou_thresh):
    scored = [ScoredBox(d.box, d.p, d.category) for d in dets]
    return [dets[i] for i in nms_indices(scored, iou_thresh)]


def teacher_infer(model: TeacherModel, scene: Scene) -> list:
    """Teacher detections for one scene: per-proposal candidates above the
    probability threshold, NMS-deduplicated, with location sigmas."""
    if not scene.proposals:
        return []
    x = np.array([p.teacher_features for p in scene.proposals], dtype=float)
    out = forward(model.net, x)
    dets = _detections_from_outputs(x, out, model.aleatoric, model.cfg)
    return _nms_filter(dets, model.cfg.nms_iou)


def student_infer(model: StudentModel, scene: Scene) -> list:
    """Student detections for one scene (no uncertainty head)."""
    if not scene.proposals:
        return []
    x = np.array([p.student_features for p in scene.proposals], dtype=float)
    out = forward(model.net, x)
    dets = _detections_from_outputs(x, out, False, model.cfg)
    return _nms_filter(dets, model.cfg.nms_iou)


def scene_feature(model: StudentModel, scene: Scene) -> np.ndarray:
    """Mean-pooled last-hidden-layer activation over a scene's proposals,
    used as the scene embedding for diversity-based selection."""
    if not scene.proposals:
        return np.zeros(model.cfg.hidden_dim)
    x = np.array([p.student_features for p in scene.proposals], dtype=float)
    return penultimate(model.net, x).mean(axis=0)


def true_scene_loss(model: StudentModel, scene: Scene) -> float:
    """Ground-truth per-scene student loss (oracle; needs annotations)."""
    for p in scene.proposals:
        if not p.is_clutter and p.gt is None:
            raise ValueError("scene lacks ground truth; oracle loss undefined")
    rows = _rows_from_labeled([scene], "student_features")
    if not rows:
        return 0.0
    batch = _pack_rows(rows)
    loss, _ = student_loss_and_grad(model.net, batch, lambda_u=0.0)
    return loss
