"""The label-select-retrain cycle and the multi-seed experiment runner.

Each cycle retrains everything from scratch on the current labeled pool:
teacher first, then (optionally) pseudo-labels over the unlabeled pool,
then the student (or student ensemble) on the joint objective. The
held-out evaluation split is generated separately from the pools and is
never selectable. Scores are computed on the unlabeled pool and the top-B
scenes move to the labeled pool.

All randomness derives from (experiment seed, cycle index), so a cycle's
outcome depends only on the pools entering it and the seed; interrupted
experiments replay bit-identically from a serialized pool state. Methods
share training streams: with identical pools, every method trains the
identical model, which keeps learning curves comparable.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from monolig.detectors import (
    StudentEnsemble,
    TrainConfig,
    student_infer,
    train_student,
    train_teacher,
)
from monolig.evaluation import ap40_by_difficulty
from monolig.pseudolabel import generate as generate_pseudo_labels
from monolig.scoring import BASELINES, baseline_scores, rank_scenes, score_pool
from monolig.synthworld import WorldConfig, generate_dataset

# selection methods built on the combined score / its components
SCORE_METHODS = {
    "monolig": "combined",
    "tv_only": "u_tv",
    "its_only": "i_ts",
    "ual_only": "u_al",
    "tv_plus_its": "tv_plus_its",
}

METHODS = tuple(SCORE_METHODS) + BASELINES

CURVE_METRICS = ("easy", "mod", "hard", "mean3")

# seed-stream tag for the fully-trained reference model (cycle indices
# stay far below this)
_FULL_TRAIN_STREAM = 2**20


@dataclass
class PoolState:
    labeled: list
    unlabeled: list
    cycle: int = 0

    def validate(self):
        if set(self.labeled) & set(self.unlabeled):
            raise ValueError("labeled and unlabeled pools overlap")
        return self

    def to_dict(self) -> dict:
        return {
            "labeled": list(self.labeled),
            "unlabeled": list(self.unlabeled),
            "cycle": self.cycle,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoolState":
        return cls(
            labeled=sorted(int(i) for i in d["labeled"]),
            unlabeled=sorted(int(i) for i in d["unlabeled"]),
            cycle=int(d["cycle"]),
        ).validate()


@dataclass
class StopCondition:
    max_cycles: int = None
    target_ap: float = None
    window: int = None
    epsilon: float = None

    def validate(self):
        if self.max_cycles is None and self.target_ap is None and self.window is None:
            raise ValueError("a stop condition needs at least one criterion")
        if self.window is not None and self.epsilon is None:
            raise ValueError("a convergence window needs an epsilon")
        return self

    def satisfied(self, metric_values) -> bool:
        if self.target_ap is not None and metric_values:
            if metric_values[-1] is not None and metric_values[-1] >= self.target_ap:
                return True
        if self.window is not None and len(metric_values) >= self.window:
            tail = [v for v in metric_values[-self.window :] if v is not None]
            if len(tail) == self.window and max(tail) - min(tail) <= self.epsilon:
                return True
        return False


@dataclass
class CycleReport:
    cycle: int
    labeled_fraction: float
    ap_easy: float
    ap_mod: float
    ap_hard: float
    method: str
    seed: int
    wall_ms: float = 0.0


@dataclass
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    n_eval_scenes: int = 100
    eval_iou: float = 0.5
    curve_metric: str = "mod"
    ensemble_size: int = 5
    lambda_u: float = 0.5
    pseudo_strategy: str = "aleatoric"  # or "uniform", "hard_threshold", "none"
    pseudo_normalize: bool = False  # divide summed sigmas by their pool max
    tau_p: float = 0.7
    tau_match: float = 0.5
    sigma_mode: str = "std"
    variance_params: str = "all7"
    methods: tuple = ("monolig", "random")
    initial_fraction: float = 0.3
    budget_fraction: float = 0.1
    stop: StopCondition = field(default_factory=lambda: StopCondition(max_cycles=7))
    seeds: tuple = (1, 2, 3)
    include_fully_trained: bool = True
    out_dir: str = None

    def validate(self):
        self.world.validate()
        self.stop.validate()
        if self.lambda_u < 0:
            raise ValueError("lambda_u must be >= 0")
        if not 0.0 < self.initial_fraction < 1.0:
            raise ValueError("initial_fraction must be in (0, 1)")
        if not 0.0 < self.budget_fraction <= 1.0:
            raise ValueError("budget_fraction must be in (0, 1]")
        if self.curve_metric not in CURVE_METRICS:
            raise ValueError(f"curve_metric must be one of {CURVE_METRICS}")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown selection method {m!r}")
        if any(m in SCORE_METHODS for m in self.methods) and self.ensemble_size < 2:
            raise ValueError("score-based selection needs ensemble_size >= 2")
        if self.pseudo_strategy not in ("aleatoric", "uniform", "hard_threshold", "none"):
            raise ValueError(f"unknown pseudo_strategy {self.pseudo_strategy!r}")
        return self


def metric_value(report: CycleReport, metric: str):
    if metric == "mean3":
        vals = [v for v in (report.ap_easy, report.ap_mod, report.ap_hard)
                if v is not None]
        return float(np.mean(vals)) if vals else None
    return getattr(report, f"ap_{metric}")


def init_pools(scenes, initial_fraction: float, seed: int) -> PoolState:
    """Seeded uniform split of scene ids into labeled / unlabeled pools."""
    if not 0.0 < initial_fraction < 1.0:
        raise ValueError("initial_fraction must be in (0, 1)")
    ids = sorted(s.id for s in scenes)
    n_labeled = int(math.floor(initial_fraction * len(ids)))
    if n_labeled < 1 or n_labeled >= len(ids):
        raise ValueError(
            f"initial fraction {initial_fraction} leaves an empty pool "
            f"for {len(ids)} scenes"
        )
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(ids), size=n_labeled, replace=False)
    labeled = sorted(ids[i] for i in picked)
    unlabeled = sorted(set(ids) - set(labeled))
    return PoolState(labeled=labeled, unlabeled=unlabeled, cycle=0).validate()


def _ssl_active(cfg: ExperimentConfig) -> bool:
    return cfg.lambda_u > 0 and cfg.pseudo_strategy != "none"


def train_models_for_cycle(labeled_scenes, unlabeled_scenes, cfg, n_members, seed_seq):
    """Teacher, pseudo-labels, and the student members for one cycle.

    Member index k gets the k-th spawned stream, so member 0 is identical
    whether or not extra ensemble members are trained.
    """
    teacher_ss, members_ss = seed_seq.spawn(2)
    teacher = train_teacher(labeled_scenes, cfg.train, seed=teacher_ss)

    pseudo_scenes = []
    if _ssl_active(cfg) and unlabeled_scenes:
        labels = generate_pseudo_labels(
            teacher,
            unlabeled_scenes,
            strategy=cfg.pseudo_strategy,
            tau_p=cfg.tau_p,
            sigma_mode=cfg.sigma_mode,
            normalize_ual=cfg.pseudo_normalize,
        )
        pseudo_scenes = [(s, labels[s.id]) for s in unlabeled_scenes]

    member_seeds = members_ss.spawn(n_members)
    members = [
        train_student(labeled_scenes, pseudo_scenes, cfg.train, cfg.lambda_u, seed=ms)
        for ms in member_seeds
    ]
    return teacher, members


def evaluate_student(student, eval_scenes, iou_thresh) -> dict:
    dets = [student_infer(student, s) for s in eval_scenes]
    gts = [[(o.box, o.category) for o in s.objects] for s in eval_scenes]
    return ap40_by_difficulty(dets, gts, iou_thresh)


def _rank_pool(method, cfg, teacher, members, labeled_scenes, pool_scenes, rank_ss):
    if method in SCORE_METHODS:
        breakdowns = score_pool(
            StudentEnsemble(members=members),
            teacher,
            pool_scenes,
            tau_match=cfg.tau_match,
            params=cfg.variance_params,
            component=SCORE_METHODS[method],
        )
        return rank_scenes(breakdowns, seed=rank_ss)
    return baseline_scores(
        method,
        pool_scenes,
        student=members[0],
        labeled_scenes=labeled_scenes,
        seed=rank_ss,
    )


def run_cycle(
    scenes_by_id: dict,
    eval_scenes,
    state: PoolState,
    cfg: ExperimentConfig,
    method: str,
    budget: int,
    exp_seed: int,
    select: bool = True,
):
    """One cycle: retrain from scratch, evaluate, optionally move top-B.

    Returns (new_state, report). With select=True exactly budget scenes
    move from unlabeled to labeled; the report always reflects the pools
    the models were trained on.
    """
    if select:
        if budget <= 0:
            raise ValueError("budget must be positive")
        if budget > len(state.unlabeled):
            raise ValueError(
                f"budget {budget} exceeds unlabeled pool of {len(state.unlabeled)}"
            )
    t0 = time.perf_counter()
    labeled_scenes = [scenes_by_id[i] for i in state.labeled]
    pool_scenes = [scenes_by_id[i] for i in state.unlabeled]

    seed_seq = np.random.SeedSequence([exp_seed, state.cycle])
    model_ss, rank_ss = seed_seq.spawn(2)
    n_members = cfg.ensemble_size if method in SCORE_METHODS else 1
    teacher, members = train_models_for_cycle(
        labeled_scenes, pool_scenes, cfg, n_members, model_ss
    )

    aps = evaluate_student(members[0], eval_scenes, cfg.eval_iou)
    n_total = len(state.labeled) + len(state.unlabeled)
    report = CycleReport(
        cycle=state.cycle,
        labeled_fraction=len(state.labeled) / n_total,
        ap_easy=aps["easy"],
        ap_mod=aps["mod"],
        ap_hard=aps["hard"],
        method=method,
        seed=exp_seed,
        wall_ms=0.0,
    )

    if select:
        ranked = _rank_pool(
            method, cfg, teacher, members, labeled_scenes, pool_scenes, rank_ss
        )
        chosen = set(ranked[:budget])
        new_state = PoolState(
            labeled=sorted(set(state.labeled) | chosen),
            unlabeled=sorted(set(state.unlabeled) - chosen),
            cycle=state.cycle + 1,
        ).validate()
    else:
        new_state = PoolState(
            labeled=list(state.labeled),
            unlabeled=list(state.unlabeled),
            cycle=state.cycle + 1,
        )
    report.wall_ms = (time.perf_counter() - t0) * 1e3
    return new_state, report


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    curves: dict = field(default_factory=dict)  # (method, seed) -> [CycleReport]
    fully_trained: dict = field(default_factory=dict)  # seed -> metric value
    fully_trained_models: dict = field(default_factory=dict)  # seed -> StudentModel

    def metric_curve(self, method, seed):
        return [
            (r.labeled_fraction, metric_value(r, self.config.curve_metric))
            for r in self.curves[(method, seed)]
        ]

    def mean_curve(self, method):
        """Seed-averaged learning curve; cycles missing a metric are skipped."""
        per_seed = [
            self.metric_curve(method, seed)
            for seed in self.config.seeds
            if (method, seed) in self.curves
        ]
        n_cycles = min(len(c) for c in per_seed)
        out = []
        for k in range(n_cycles):
            vals = [c[k][1] for c in per_seed if c[k][1] is not None]
            if vals:
                out.append((per_seed[0][k][0], float(np.mean(vals))))
        return out

    def mean_fully_trained(self):
        vals = [v for v in self.fully_trained.values() if v is not None]
        return float(np.mean(vals)) if vals else None


def fully_trained_reference(scenes, eval_scenes, cfg: ExperimentConfig, exp_seed: int):
    """Metric (and the model) of a student trained on every available label."""
    ss = np.random.SeedSequence([exp_seed, _FULL_TRAIN_STREAM])
    student = train_student(scenes, [], cfg.train, lambda_u=0.0, seed=ss)
    aps = evaluate_student(student, eval_scenes, cfg.eval_iou)
    report = CycleReport(
        cycle=-1, labeled_fraction=1.0, ap_easy=aps["easy"], ap_mod=aps["mod"],
        ap_hard=aps["hard"], method="fully_trained", seed=exp_seed,
    )
    return metric_value(report, cfg.curve_metric), student


def run_experiment(cfg: ExperimentConfig, scenes=None, eval_scenes=None,
                   on_cycle=None, preloaded=None) -> ExperimentResult:
    """Full protocol: every method x seed, cycles until the stop condition.

    scenes/eval_scenes may be passed in (e.g., loaded from a dataset file);
    otherwise they are generated from the world config, with the evaluation
    split drawn from disjoint per-scene streams. on_cycle(method, seed,
    report, state_after) is invoked after every completed cycle; preloaded
    maps (method, seed) to (reports, PoolState) to resume mid-experiment.
    """
    cfg.validate()
    if scenes is None:
        scenes = generate_dataset(cfg.world)
    if eval_scenes is None:
        eval_cfg = replace(cfg.world, n_scenes=cfg.n_eval_scenes)
        eval_scenes = generate_dataset(eval_cfg, index_offset=cfg.world.n_scenes)
    scenes_by_id = {s.id: s for s in scenes}

    n_total = len(scenes)
    budget = max(1, int(math.floor(cfg.budget_fraction * n_total)))
    max_cycles = cfg.stop.max_cycles if cfg.stop.max_cycles is not None else 10**6

    result = ExperimentResult(config=cfg)
    for seed in cfg.seeds:
        if cfg.include_fully_trained and seed not in result.fully_trained:
            value, model = fully_trained_reference(scenes, eval_scenes, cfg, seed)
            result.fully_trained[seed] = value
            result.fully_trained_models[seed] = model
        for method in cfg.methods:
            key = (method, seed)
            if preloaded and key in preloaded:
                reports, state = preloaded[key]
                reports = list(reports)
            else:
                reports = []
                state = init_pools(scenes, cfg.initial_fraction, seed)
            result.curves[key] = reports
            metric_values = [metric_value(r, cfg.curve_metric) for r in reports]
            while len(reports) < max_cycles:
                if cfg.stop.satisfied(metric_values):
                    break
                may_select = (
                    len(reports) < max_cycles - 1
                    and len(state.unlabeled) >= budget
                )
                state, report = run_cycle(
                    scenes_by_id, eval_scenes, state, cfg, method, budget,
                    exp_seed=seed, select=may_select,
                )
                reports.append(report)
                metric_values.append(metric_value(report, cfg.curve_metric))
                if on_cycle is not None:
                    on_cycle(method, seed, report, state)
                if not may_select:
                    break
    return result
