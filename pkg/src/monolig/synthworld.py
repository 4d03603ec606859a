"""Reproducible synthetic driving scenes with two sensor modalities.

Each scene holds ground-truth objects and per-object proposals carrying two
feature vectors: a range-sensor view whose noise grows as point density
drops (distant or occluded objects), and a camera-like view whose depth
components are corrupted proportionally to distance. Clutter proposals
drawn from a wide background distribution give the category head a real
object-vs-background task.

All generation is a pure function of the config; each scene gets its own
RNG stream derived from (seed, scene index), so scenes can be produced in
any order without changing the output.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from monolig.geometry import Box3D

# positions are stored in the feature encoding divided by this scale so all
# encoded components stay O(1)
POS_SCALE = 10.0

# objects never spawn closer than this standoff (meters)
MIN_RANGE_Z = 5.0

# canonical (w, h, l) per category; per-object sizes jitter around these.
# class gaps are clean at +-5% jitter but blur under far-range sensor
# noise, so classification confidence degrades where it should
CATEGORY_SIZES = np.array(
    [
        [1.8, 1.5, 4.3],  # car-like
        [2.1, 1.8, 5.1],  # van-like
        [2.5, 2.6, 6.5],  # truck-like
    ]
)
SIZE_JITTER = (0.95, 1.05)
N_CATEGORIES = len(CATEGORY_SIZES)

# background feature draws use this std (wide compared to object encodings)
CLUTTER_STD = 2.0

# latent layout: 7 box components, 1 density cue, rest distractors
N_BOX_COMPONENTS = 7
DENSITY_CUE_INDEX = 7
MIN_FEATURE_DIM = 8

# extent estimates decay faster than centroids as returns get sparse, so
# the range sensor's dims/yaw components carry amplified noise
DIMS_NOISE_FACTOR = 5.0


def encode_box(box: Box3D) -> np.ndarray:
    """7-component encoding: positions scaled by 1/POS_SCALE, dims and yaw raw."""
    return np.array(
        [
            box.cx / POS_SCALE,
            box.cy / POS_SCALE,
            box.cz / POS_SCALE,
            box.w,
            box.h,
            box.l,
            box.yaw,
        ]
    )


def decode_box(vec: np.ndarray) -> Box3D:
    """Inverse of encode_box; dims are floored at 5 cm so the box stays valid."""
    vec = np.asarray(vec, dtype=float)
    return Box3D(
        cx=float(vec[0]) * POS_SCALE,
        cy=float(vec[1]) * POS_SCALE,
        cz=float(vec[2]) * POS_SCALE,
        w=max(float(vec[3]), 0.05),
        h=max(float(vec[4]), 0.05),
        l=max(float(vec[5]), 0.05),
        yaw=float(vec[6]),
    )


@dataclass
class WorldConfig:
    """Knobs of the synthetic world.

    range_x is the half-extent of lateral object positions (|cx| <= range_x);
    range_z the far limit of forward positions (MIN_RANGE_Z <= cz <= range_z).
    objects_per_scene / clutter_proposals_per_scene are inclusive (lo, hi)
    ranges. density_at_10m anchors the point-density law; the two noise
    scales control how feature corruption grows with distance for each
    modality.
    """

    n_scenes: int = 200
    objects_per_scene: tuple = (1, 4)
    clutter_proposals_per_scene: tuple = (2, 5)
    range_x: float = 25.0
    range_z: float = 60.0
    density_at_10m: float = 225.0
    occlusion_prob: float = 0.2
    teacher_noise_scale: float = 0.1
    teacher_depth_bias: float = 0.15
    student_noise_scale: float = 0.02
    student_depth_bias: float = 0.05
    feature_dim: int = 16
    seed: int = 0

    def validate(self):
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be >= 0")
        lo, hi = self.objects_per_scene
        if not (0 <= lo <= hi):
            raise ValueError(f"bad objects_per_scene range {self.objects_per_scene}")
        lo, hi = self.clutter_proposals_per_scene
        if not (0 <= lo <= hi):
            raise ValueError(
                f"bad clutter_proposals_per_scene range {self.clutter_proposals_per_scene}"
            )
        if self.range_x <= 0 or self.range_z <= MIN_RANGE_Z:
            raise ValueError("spatial extents must be positive (range_z > 5)")
        if self.density_at_10m <= 0:
            raise ValueError("density_at_10m must be positive")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")
        if self.feature_dim < MIN_FEATURE_DIM:
            raise ValueError(f"feature_dim must be >= {MIN_FEATURE_DIM}")
        return self


@dataclass
class GroundTruthObject:
    box: Box3D
    category: int
    point_density: float
    occluded: bool
    latent: np.ndarray


@dataclass
class Proposal:
    teacher_features: np.ndarray
    student_features: np.ndarray
    gt: Optional[tuple] = None  # (Box3D, category) for object proposals
    is_clutter: bool = False
    object_index: Optional[int] = None


@dataclass
class Scene:
    id: int
    objects: list = field(default_factory=list)
    proposals: list = field(default_factory=list)


def point_density(distance: float, occluded: bool, cfg: WorldConfig) -> float:
    """Points/m^2 hitting an object: inverse-square falloff anchored at 10 m,
    with a 0.25x penalty when occluded."""
    if distance <= 0:
        raise ValueError("distance must be positive")
    rho = cfg.density_at_10m * (10.0 / distance) ** 2
    if occluded:
        rho *= 0.25
    return rho


def teacher_noise_std(density: float, cfg: WorldConfig) -> float:
    """Per-component feature noise std of the range-sensor view."""
    return cfg.teacher_noise_scale / math.sqrt(density)


def _scene_rng(seed: int, scene_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, scene_index]))


def _generate_scene(cfg: WorldConfig, scene_index: int, scene_id: int) -> Scene:
    rng = _scene_rng(cfg.seed, scene_index)
    objects = []
    proposals = []

    n_obj = int(rng.integers(cfg.objects_per_scene[0], cfg.objects_per_scene[1] + 1))
    for k in range(n_obj):
        category = int(rng.integers(0, N_CATEGORIES))
        w, h, l = CATEGORY_SIZES[category] * rng.uniform(*SIZE_JITTER, size=3)
        cx = float(rng.uniform(-cfg.range_x, cfg.range_x))
        cz = float(rng.uniform(MIN_RANGE_Z, cfg.range_z))
        yaw = float(rng.uniform(-math.pi, math.pi))
        box = Box3D(cx=cx, cy=h / 2.0, cz=cz, w=w, h=h, l=l, yaw=yaw)
        occluded = bool(rng.random() < cfg.occlusion_prob)
        rho = point_density(box.ground_distance(), occluded, cfg)

        latent = np.zeros(cfg.feature_dim)
        latent[:N_BOX_COMPONENTS] = encode_box(box)
        latent[DENSITY_CUE_INDEX] = math.sqrt(rho / cfg.density_at_10m)
        n_distract = cfg.feature_dim - MIN_FEATURE_DIM
        if n_distract:
            latent[MIN_FEATURE_DIM:] = rng.normal(0.0, 1.0, size=n_distract)

        objects.append(
            GroundTruthObject(
                box=box,
                category=category,
                point_density=rho,
                occluded=occluded,
                latent=latent,
            )
        )

        sigma_t = teacher_noise_std(rho, cfg)
        scale = np.full(cfg.feature_dim, sigma_t)
        scale[3:N_BOX_COMPONENTS] *= DIMS_NOISE_FACTOR
        teacher_features = latent + rng.normal(0.0, 1.0, size=cfg.feature_dim) * scale
        # sparse returns shift the perceived box systematically, not just
        # noisily: low-density objects appear closer than they are
        teacher_features[2] -= (
            cfg.teacher_depth_bias * 10.0 / math.sqrt(rho)
        ) / POS_SCALE

        d = box.ground_distance()
        # monocular-style depth corruption, in meters: a systematic
        # distortion growing quadratically with depth (learnable from
        # labels) plus random noise growing linearly with distance
        depth_std_m = cfg.student_noise_scale * d
        depth_bias_m = cfg.student_depth_bias * box.cz**2 / 100.0
        student_features = latent.copy()
        student_features[2] += (depth_bias_m + rng.normal(0.0, depth_std_m)) / POS_SCALE
        student_features[0] += rng.normal(0.0, 0.25 * depth_std_m) / POS_SCALE

        proposals.append(
            Proposal(
                teacher_features=teacher_features,
                student_features=student_features,
                gt=(box, category),
                is_clutter=False,
                object_index=k,
            )
        )

    n_clutter = int(
        rng.integers(
            cfg.clutter_proposals_per_scene[0],
            cfg.clutter_proposals_per_scene[1] + 1,
        )
    )
    bg_noise = teacher_noise_std(cfg.density_at_10m, cfg)
    for _ in range(n_clutter):
        base = rng.normal(0.0, CLUTTER_STD, size=cfg.feature_dim)
        proposals.append(
            Proposal(
                teacher_features=base + rng.normal(0.0, bg_noise, size=cfg.feature_dim),
                student_features=base + rng.normal(0.0, bg_noise, size=cfg.feature_dim),
                gt=None,
                is_clutter=True,
                object_index=None,
            )
        )

    return Scene(id=scene_id, objects=objects, proposals=proposals)


def generate_dataset(cfg: WorldConfig, index_offset: int = 0) -> list:
    """Generate cfg.n_scenes scenes, deterministic given cfg.seed.

    index_offset shifts the per-scene RNG streams (and ids), which is how
    a held-out split is produced without overlapping the training streams.
    """
    cfg.validate()
    return [
        _generate_scene(cfg, index_offset + i, index_offset + i)
        for i in range(cfg.n_scenes)
    ]


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    """Stable serialization: sorted keys, 2-space indent, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _box_to_list(box: Box3D) -> list:
    return [box.cx, box.cy, box.cz, box.w, box.h, box.l, box.yaw]


def scene_to_dict(scene: Scene) -> dict:
    return {
        "id": scene.id,
        "objects": [
            {
                "box": _box_to_list(o.box),
                "category": o.category,
                "point_density": o.point_density,
                "occluded": o.occluded,
                "latent": o.latent.tolist(),
            }
            for o in scene.objects
        ],
        "proposals": [
            {
                "teacher_features": p.teacher_features.tolist(),
                "student_features": p.student_features.tolist(),
                "is_clutter": p.is_clutter,
                "object_index": p.object_index,
            }
            for p in scene.proposals
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    objects = [
        GroundTruthObject(
            box=Box3D.from_array(o["box"]),
            category=int(o["category"]),
            point_density=float(o["point_density"]),
            occluded=bool(o["occluded"]),
            latent=np.asarray(o["latent"], dtype=float),
        )
        for o in d["objects"]
    ]
    proposals = []
    for p in d["proposals"]:
        idx = p["object_index"]
        gt = None
        if idx is not None:
            obj = objects[int(idx)]
            gt = (obj.box, obj.category)
        proposals.append(
            Proposal(
                teacher_features=np.asarray(p["teacher_features"], dtype=float),
                student_features=np.asarray(p["student_features"], dtype=float),
                gt=gt,
                is_clutter=bool(p["is_clutter"]),
                object_index=None if idx is None else int(idx),
            )
        )
    return Scene(id=int(d["id"]), objects=objects, proposals=proposals)


def dataset_to_json(cfg: WorldConfig, scenes: list) -> str:
    payload = {
        "config": asdict(cfg),
        "scenes": [scene_to_dict(s) for s in scenes],
    }
    # tuples do not survive a JSON round trip; store ranges as lists
    payload["config"]["objects_per_scene"] = list(cfg.objects_per_scene)
    payload["config"]["clutter_proposals_per_scene"] = list(
        cfg.clutter_proposals_per_scene
    )
    return canonical_json(payload)


def dataset_from_json(text: str) -> tuple:
    payload = json.loads(text)
    raw = dict(payload["config"])
    raw["objects_per_scene"] = tuple(raw["objects_per_scene"])
    raw["clutter_proposals_per_scene"] = tuple(raw["clutter_proposals_per_scene"])
    cfg = WorldConfig(**raw).validate()
    scenes = [scene_from_dict(s) for s in payload["scenes"]]
    return cfg, scenes


def save_dataset(path, cfg: WorldConfig, scenes: list):
    with open(path, "w") as f:
        f.write(dataset_to_json(cfg, scenes))


def load_dataset(path) -> tuple:
    with open(path) as f:
        return dataset_from_json(f.read())
