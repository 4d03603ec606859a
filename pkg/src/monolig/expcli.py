"""Config-driven command line: dataset generation, experiment runs with
resume, scoring of externally produced detection dumps, and standalone AP.

Subcommands:

- generate: write a deterministic dataset.json from a config
- run: execute the full experiment protocol into a results directory
  (per-cycle CSV rows, pool-state checkpoints, aggregate.json); re-running
  over a partially filled directory resumes from the last completed cycle
- score-file: rank the frames of a detection dump by the selection score
- eval: AP of a dump's detections against a dataset's ground truth

All interchange is JSON (datasets, dumps, pool states, aggregates) plus
CSV for tabular results. Config fields can be overridden on the command
line with --dotted.path=value flags. Exit codes: 0 success, 1 usage,
2 data/schema, 3 runtime.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np

from monolig.alloop import (
    CycleReport,
    ExperimentConfig,
    PoolState,
    StopCondition,
    metric_value,
    run_experiment,
)
from monolig.detectors import Detection, TrainConfig
from monolig.evaluation import ap40, ap40_by_difficulty
from monolig.geometry import Box3D
from monolig.nnet import save_mlp
from monolig.scoring import rank_scenes, score_frames
from monolig.synthworld import (
    WorldConfig,
    canonical_json,
    generate_dataset,
    load_dataset,
    save_dataset,
)

OUT_ROOT_ENV = "MONOLIG_OUT"

CSV_COLUMNS = (
    "seed", "cycle", "labeled_fraction", "method",
    "ap_easy", "ap_mod", "ap_hard", "wall_ms",
)

RANKED_COLUMNS = ("scene_id", "u_tv", "i_ts", "u_al_t", "combined", "rank")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _typed_section(raw, cls, path):
    if not isinstance(raw, dict):
        raise DataError(f"config field {path} must be an object")
    known = {f.name for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise DataError(f"unknown config field {path}.{key}")
    return raw


def experiment_config_from_dict(raw: dict) -> ExperimentConfig:
    """Build the full experiment config, reporting problems by field path."""
    if not isinstance(raw, dict):
        raise DataError("config root must be a JSON object")
    known = {f.name for f in fields(ExperimentConfig)}
    for key in raw:
        if key not in known:
            raise DataError(f"unknown config field {key}")

    world_raw = raw.get("world")
    if world_raw is None:
        raise DataError("missing config section world")
    world_raw = dict(_typed_section(world_raw, WorldConfig, "world"))
    if "seed" not in world_raw:
        raise DataError("missing config field world.seed")
    for key in ("objects_per_scene", "clutter_proposals_per_scene"):
        if key in world_raw:
            world_raw[key] = tuple(world_raw[key])
    world = WorldConfig(**world_raw)

    train = TrainConfig(**_typed_section(raw.get("train", {}), TrainConfig, "train"))
    stop = StopCondition(
        **_typed_section(raw.get("stop", {"max_cycles": 7}), StopCondition, "stop")
    )

    kwargs = {}
    for key, value in raw.items():
        if key in ("world", "train", "stop"):
            continue
        if key in ("methods", "seeds"):
            value = tuple(value)
        kwargs[key] = value
    try:
        cfg = ExperimentConfig(world=world, train=train, stop=stop, **kwargs)
        cfg.validate()
    except (TypeError, ValueError) as e:
        raise DataError(f"invalid config: {e}") from e
    return cfg


def resolved_config_dict(cfg: ExperimentConfig) -> dict:
    d = asdict(cfg)
    d["world"]["objects_per_scene"] = list(cfg.world.objects_per_scene)
    d["world"]["clutter_proposals_per_scene"] = list(
        cfg.world.clutter_proposals_per_scene
    )
    d["methods"] = list(cfg.methods)
    d["seeds"] = list(cfg.seeds)
    return d


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply --dotted.path=value flags onto the raw config dict."""
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise UsageError(f"expected --key=value override, got {item!r}")
        path, _, text = item[2:].partition("=")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"override path {path} crosses a non-object field")
        node[parts[-1]] = value
    return raw


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"config is not valid JSON: {e}")
    return experiment_config_from_dict(apply_overrides(raw, overrides))


# ---------------------------------------------------------------------------
# atomic files, checkpoints
# ---------------------------------------------------------------------------

def atomic_write(path, text: str):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _sha256(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def write_pool_checkpoint(path, state: PoolState):
    payload = state.to_dict()
    body = json.dumps(payload, sort_keys=True)
    atomic_write(path, canonical_json({"state": payload, "sha256": _sha256(body)}))


def read_pool_checkpoint(path) -> PoolState:
    with open(path) as f:
        wrapper = json.load(f)
    body = json.dumps(wrapper.get("state"), sort_keys=True)
    if _sha256(body) != wrapper.get("sha256"):
        raise DataError(f"corrupt pool checkpoint: {path}")
    return PoolState.from_dict(wrapper["state"])


def _csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def report_to_row(report: CycleReport):
    def fmt(v):
        return "" if v is None else repr(v)

    return [
        report.seed,
        report.cycle,
        repr(report.labeled_fraction),
        report.method,
        fmt(report.ap_easy),
        fmt(report.ap_mod),
        fmt(report.ap_hard),
        repr(report.wall_ms),
    ]


def report_from_row(row) -> CycleReport:
    def parse(v):
        return None if v == "" else float(v)

    return CycleReport(
        cycle=int(row["cycle"]),
        labeled_fraction=float(row["labeled_fraction"]),
        ap_easy=parse(row["ap_easy"]),
        ap_mod=parse(row["ap_mod"]),
        ap_hard=parse(row["ap_hard"]),
        method=row["method"],
        seed=int(row["seed"]),
        wall_ms=float(row["wall_ms"]),
    )


def write_cycle_csv(path, report: CycleReport):
    atomic_write(path, _csv_text([report_to_row(report)]))


def read_cycle_csv(path) -> CycleReport:
    with open(path) as f:
        rows = list(csv.DictReader(f))
    if len(rows) != 1:
        raise DataError(f"cycle file {path} must hold exactly one row")
    return report_from_row(rows[0])


# ---------------------------------------------------------------------------
# detection dumps
# ---------------------------------------------------------------------------

_TEACHER_DET_FIELDS = {"box", "category", "p", "sigma"}
_STUDENT_DET_FIELDS = {"box", "category", "p"}


def _det_from_dict(d, path, with_sigma):
    known = _TEACHER_DET_FIELDS if with_sigma else _STUDENT_DET_FIELDS
    extra = set(d) - known
    if extra:
        print(f"warning: ignoring unknown fields {sorted(extra)} at {path}",
              file=sys.stderr)
    try:
        box = Box3D.from_array(d["box"])
    except (KeyError, ValueError) as e:
        raise DataError(f"bad box at {path}: {e}")
    p = float(d.get("p", 0.0))
    if not 0.0 <= p <= 1.0:
        raise DataError(f"probability out of range at {path}: {p}")
    sigma = None
    if with_sigma:
        raw = d.get("sigma")
        if raw is None or len(raw) != 3:
            raise DataError(f"teacher detection at {path} needs a 3-component sigma")
        sigma = tuple(float(v) for v in raw)
        if any(v <= 0 for v in sigma):
            raise DataError(f"sigmas must be positive at {path}")
    return Detection(box=box, category=int(d.get("category", 0)), p=p,
                     sigma_xyz=sigma)


def load_detection_dump(path):
    """Parse and validate a detection dump; returns (teacher_dets, member_dets)
    keyed by frame id."""
    try:
        with open(path) as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise DataError(f"dump file not found: {path}")
    except json.JSONDecodeError as e:
        raise DataError(f"dump is not valid JSON: {e}")
    frames = payload.get("frames")
    if not isinstance(frames, list):
        raise DataError("dump must hold a frames array")

    teacher_dets, member_dets = {}, {}
    n_members = None
    for fi, frame in enumerate(frames):
        fid = frame.get("id")
        if fid is None:
            raise DataError(f"frame {fi} lacks an id")
        if fid in teacher_dets:
            raise DataError(f"duplicate frame id {fid!r}")
        students = frame.get("students", [])
        if n_members is None:
            n_members = len(students)
        elif len(students) != n_members:
            raise DataError(
                f"frame {fid!r} has {len(students)} student members, "
                f"expected {n_members}"
            )
        teacher_dets[fid] = [
            _det_from_dict(d, f"frames[{fi}].teacher[{di}]", with_sigma=True)
            for di, d in enumerate(frame.get("teacher", []))
        ]
        member_dets[fid] = [
            [
                _det_from_dict(d, f"frames[{fi}].students[{mi}][{di}]",
                               with_sigma=False)
                for di, d in enumerate(member)
            ]
            for mi, member in enumerate(students)
        ]
    return teacher_dets, member_dets


def ranked_csv_text(breakdowns) -> str:
    ranked = rank_scenes(breakdowns)
    by_id = {b.scene_id: b for b in breakdowns}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RANKED_COLUMNS)
    for rank, sid in enumerate(ranked, start=1):
        b = by_id[sid]
        if b.objects:
            top = max(b.objects, key=lambda o: o.combined)
            row = [sid, repr(top.u_tv), repr(top.i_ts), repr(top.u_al_t),
                   repr(b.sample_score), rank]
        else:
            row = [sid, repr(0.0), repr(0.0), repr(0.0), repr(0.0), rank]
        writer.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args, overrides):
    cfg = load_config(args.config, overrides)
    scenes = generate_dataset(cfg.world)
    save_dataset(args.out, cfg.world, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def _results_root(args, cfg):
    if args.out:
        return args.out
    if cfg.out_dir:
        return cfg.out_dir
    return os.environ.get(OUT_ROOT_ENV, "results")


def _seed_dir(root, method, seed):
    return os.path.join(root, method, str(seed))


def _preload_seed_dir(directory):
    """Recover (reports, state) from a partially written seed directory."""
    n = 0
    while os.path.exists(os.path.join(directory, f"cycle_{n:03d}.csv")):
        n += 1
    if n == 0:
        return None
    pool_path = os.path.join(directory, f"pool_{n:03d}.json")
    if not os.path.exists(pool_path):
        # died between the csv and the pool write: redo the last cycle
        n -= 1
        if n == 0:
            return None
        pool_path = os.path.join(directory, f"pool_{n:03d}.json")
    reports = [
        read_cycle_csv(os.path.join(directory, f"cycle_{k:03d}.csv"))
        for k in range(n)
    ]
    return reports, read_pool_checkpoint(pool_path)


def cmd_run(args, overrides):
    cfg = load_config(args.config, overrides)
    if args.dataset:
        world_cfg, scenes = load_dataset(args.dataset)
        cfg = replace(cfg, world=world_cfg)
    else:
        scenes = generate_dataset(cfg.world)

    root = _results_root(args, cfg)
    os.makedirs(root, exist_ok=True)

    resolved = canonical_json(resolved_config_dict(cfg))
    resolved_path = os.path.join(root, "config_resolved.json")
    if os.path.exists(resolved_path):
        with open(resolved_path) as f:
            if f.read() != resolved:
                raise DataError(
                    f"results directory {root} was produced by a different "
                    "config; refusing to mix"
                )
    else:
        atomic_write(resolved_path, resolved)

    preloaded = {}
    for method in cfg.methods:
        for seed in cfg.seeds:
            directory = _seed_dir(root, method, seed)
            os.makedirs(directory, exist_ok=True)
            got = _preload_seed_dir(directory)
            if got is not None:
                preloaded[(method, seed)] = got

    def persist(method, seed, report, state):
        directory = _seed_dir(root, method, seed)
        write_cycle_csv(
            os.path.join(directory, f"cycle_{report.cycle:03d}.csv"), report
        )
        write_pool_checkpoint(
            os.path.join(directory, f"pool_{report.cycle + 1:03d}.json"), state
        )

    result = run_experiment(cfg, scenes=scenes, on_cycle=persist,
                            preloaded=preloaded)

    ckpt_dir = os.path.join(root, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    for seed, model in result.fully_trained_models.items():
        save_mlp(os.path.join(ckpt_dir, f"fully_trained_seed{seed}.json"), model.net)

    aggregate = {
        "metric": cfg.curve_metric,
        "fully_trained": {str(s): v for s, v in result.fully_trained.items()},
        "methods": {},
    }
    for method in cfg.methods:
        per_cycle = {}
        for seed in cfg.seeds:
            for r in result.curves.get((method, seed), []):
                per_cycle.setdefault(r.cycle, []).append(
                    (r.labeled_fraction, metric_value(r, cfg.curve_metric))
                )
        rows = []
        for cycle in sorted(per_cycle):
            entries = per_cycle[cycle]
            vals = [v for _, v in entries if v is not None]
            rows.append(
                {
                    "cycle": cycle,
                    "labeled_fraction": entries[0][0],
                    "mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None,
                    "n_seeds": len(entries),
                }
            )
        aggregate["methods"][method] = rows
    atomic_write(os.path.join(root, "aggregate.json"), canonical_json(aggregate))
    print(f"results in {root}")
    return EXIT_OK


def cmd_score_file(args, overrides):
    teacher_dets, member_dets = load_detection_dump(args.dump)
    breakdowns = score_frames(
        teacher_dets, member_dets, tau_match=args.tau_match, params=args.params
    )
    text = ranked_csv_text(breakdowns)
    if args.out:
        atomic_write(args.out, text)
        print(f"wrote ranking for {len(breakdowns)} frames to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_eval(args, overrides):
    teacher_dets, member_dets = load_detection_dump(args.dump)
    _, scenes = load_dataset(args.dataset)
    scenes_by_id = {s.id: s for s in scenes}

    if args.which == "teacher":
        dets_by_frame = teacher_dets
    else:
        try:
            member = int(args.which.split(":", 1)[1])
        except (IndexError, ValueError):
            raise UsageError("--which must be 'teacher' or 'student:<index>'")
        dets_by_frame = {}
        for fid, members in member_dets.items():
            if member >= len(members):
                raise DataError(f"dump has no student member {member}")
            dets_by_frame[fid] = members[member]

    unknown = [fid for fid in dets_by_frame if fid not in scenes_by_id]
    if unknown:
        raise DataError(f"dump frames missing from dataset: {unknown[:5]}")

    dets, gts = [], []
    for fid, frame_dets in sorted(dets_by_frame.items()):
        dets.append(frame_dets)
        gts.append(
            [(o.box, o.category) for o in scenes_by_id[fid].objects]
        )
    by_difficulty = ap40_by_difficulty(dets, gts, args.iou)
    payload = {f"ap_{k}": v for k, v in by_difficulty.items()}
    payload["ap_all"] = ap40(dets, gts, args.iou)
    sys.stdout.write(canonical_json(payload))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="monolig", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a dataset.json from a config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", default="dataset.json")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run the experiment protocol")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None,
                   help=f"results directory (default: config out_dir, then "
                        f"${OUT_ROOT_ENV}, then ./results)")
    r.add_argument("--dataset", default=None,
                   help="use an existing dataset.json instead of generating")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("score-file", help="rank a detection dump")
    s.add_argument("--dump", required=True)
    s.add_argument("--tau-match", type=float, default=0.5, dest="tau_match")
    s.add_argument("--params", default="all7", choices=("all7", "loc3"))
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_score_file)

    e = sub.add_parser("eval", help="AP of a dump against a dataset")
    e.add_argument("--dump", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--iou", type=float, default=0.7)
    e.add_argument("--which", default="teacher",
                   help="'teacher' or 'student:<index>'")
    e.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    known, overrides = [], []
    for tok in argv:
        # dotted flags are config overrides, everything else goes to argparse
        if tok.startswith("--") and "=" in tok and "." in tok.split("=", 1)[0]:
            overrides.append(tok)
        else:
            known.append(tok)
    parser = build_parser()
    try:
        args = parser.parse_args(known)
        return args.func(args, overrides)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # pragma: no cover - defensive
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
