from dataclasses import asdict, replace

import numpy as np
import pytest

from monolig.alloop import (
    CycleReport,
    ExperimentConfig,
    PoolState,
    StopCondition,
    init_pools,
    metric_value,
    run_cycle,
    run_experiment,
)
from monolig.detectors import TrainConfig
from monolig.synthworld import Scene, WorldConfig, generate_dataset


def tiny_config(**kw):
    base = dict(
        world=WorldConfig(
            n_scenes=30,
            objects_per_scene=(1, 2),
            clutter_proposals_per_scene=(1, 2),
            feature_dim=10,
            seed=3,
        ),
        train=TrainConfig(hidden_dim=12, epochs=30, lr=5e-3),
        n_eval_scenes=15,
        ensemble_size=2,
        methods=("random",),
        seeds=(1,),
        initial_fraction=0.3,
        budget_fraction=0.2,
        stop=StopCondition(max_cycles=3),
        include_fully_trained=False,
        curve_metric="mean3",
    )
    base.update(kw)
    return ExperimentConfig(**base)


def dummy_scenes(n):
    return [Scene(id=i) for i in range(n)]


def report_rows(result):
    rows = []
    for key, reports in result.curves.items():
        for r in reports:
            d = asdict(r)
            d.pop("wall_ms")
            rows.append(d)
    return rows


class TestInitPools:
    def test_thirty_percent_of_hundred(self):
        state = init_pools(dummy_scenes(100), 0.3, seed=1)
        assert len(state.labeled) == 30
        assert len(state.unlabeled) == 70

    def test_five_percent_of_thousand(self):
        state = init_pools(dummy_scenes(1000), 0.05, seed=1)
        assert len(state.labeled) == 50

    def test_same_seed_same_split(self):
        a = init_pools(dummy_scenes(50), 0.3, seed=7)
        b = init_pools(dummy_scenes(50), 0.3, seed=7)
        c = init_pools(dummy_scenes(50), 0.3, seed=8)
        assert a.labeled == b.labeled
        assert a.labeled != c.labeled

    def test_disjoint_and_conserving(self):
        state = init_pools(dummy_scenes(40), 0.25, seed=2)
        assert not set(state.labeled) & set(state.unlabeled)
        assert sorted(state.labeled + state.unlabeled) == list(range(40))

    def test_degenerate_fraction_rejected(self):
        # floor(0.01 * 10) leaves an empty labeled pool
        with pytest.raises(ValueError):
            init_pools(dummy_scenes(10), 0.01, seed=1)
        with pytest.raises(ValueError):
            init_pools(dummy_scenes(10), 1.0, seed=1)


class TestStopCondition:
    def test_needs_a_criterion(self):
        with pytest.raises(ValueError):
            StopCondition().validate()

    def test_target_ap(self):
        sc = StopCondition(target_ap=0.5)
        assert not sc.satisfied([0.2, 0.4])
        assert sc.satisfied([0.2, 0.6])

    def test_convergence_window(self):
        sc = StopCondition(window=3, epsilon=0.01)
        assert not sc.satisfied([0.5, 0.505])
        assert sc.satisfied([0.5, 0.505, 0.507])
        assert not sc.satisfied([0.4, 0.5, 0.6])


class TestPoolState:
    def test_round_trip(self):
        state = PoolState(labeled=[1, 3], unlabeled=[0, 2], cycle=4)
        again = PoolState.from_dict(state.to_dict())
        assert again == state

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            PoolState(labeled=[1], unlabeled=[1, 2]).validate()


@pytest.fixture(scope="module")
def small_world():
    cfg = tiny_config()
    scenes = generate_dataset(cfg.world)
    eval_scenes = generate_dataset(
        replace(cfg.world, n_scenes=cfg.n_eval_scenes),
        index_offset=cfg.world.n_scenes,
    )
    return cfg, scenes, eval_scenes


class TestRunCycle:
    def test_moves_exactly_budget(self, small_world):
        cfg, scenes, eval_scenes = small_world
        by_id = {s.id: s for s in scenes}
        state = init_pools(scenes, 0.3, seed=1)
        new_state, report = run_cycle(
            by_id, eval_scenes, state, cfg, "random", budget=5, exp_seed=1
        )
        assert len(new_state.labeled) == len(state.labeled) + 5
        assert len(new_state.unlabeled) == len(state.unlabeled) - 5
        assert set(state.labeled) <= set(new_state.labeled)
        assert not set(new_state.labeled) & set(new_state.unlabeled)
        assert report.labeled_fraction == pytest.approx(len(state.labeled) / 30)

    def test_budget_can_empty_pool(self, small_world):
        cfg, scenes, eval_scenes = small_world
        by_id = {s.id: s for s in scenes}
        state = init_pools(scenes, 0.3, seed=1)
        new_state, _ = run_cycle(
            by_id, eval_scenes, state, cfg, "random",
            budget=len(state.unlabeled), exp_seed=1,
        )
        assert new_state.unlabeled == []

    def test_budget_validation(self, small_world):
        cfg, scenes, eval_scenes = small_world
        by_id = {s.id: s for s in scenes}
        state = init_pools(scenes, 0.3, seed=1)
        with pytest.raises(ValueError):
            run_cycle(by_id, eval_scenes, state, cfg, "random", budget=0, exp_seed=1)
        with pytest.raises(ValueError):
            run_cycle(by_id, eval_scenes, state, cfg, "random",
                      budget=len(state.unlabeled) + 1, exp_seed=1)

    def test_replay_from_serialized_state(self, small_world):
        # a cycle's outcome depends only on (pools, seed, cycle index)
        cfg, scenes, eval_scenes = small_world
        by_id = {s.id: s for s in scenes}
        state0 = init_pools(scenes, 0.3, seed=5)
        state1, _ = run_cycle(by_id, eval_scenes, state0, cfg, "random", 5, exp_seed=5)
        state2a, report_a = run_cycle(
            by_id, eval_scenes, state1, cfg, "random", 5, exp_seed=5
        )
        replayed = PoolState.from_dict(state1.to_dict())
        state2b, report_b = run_cycle(
            by_id, eval_scenes, replayed, cfg, "random", 5, exp_seed=5
        )
        assert state2a == state2b
        assert report_a.ap_easy == report_b.ap_easy
        assert report_a.ap_mod == report_b.ap_mod
        assert report_a.ap_hard == report_b.ap_hard


class TestRunExperiment:
    def test_deterministic_and_shaped(self):
        cfg = tiny_config(methods=("random",), seeds=(1, 2))
        a = run_experiment(cfg)
        b = run_experiment(tiny_config(methods=("random",), seeds=(1, 2)))
        assert report_rows(a) == report_rows(b)
        for key, reports in a.curves.items():
            assert len(reports) == 3
            fractions = [r.labeled_fraction for r in reports]
            assert fractions == sorted(fractions)

    def test_score_method_runs(self):
        cfg = tiny_config(methods=("monolig",), stop=StopCondition(max_cycles=2))
        result = run_experiment(cfg)
        reports = result.curves[("monolig", 1)]
        assert len(reports) == 2
        assert reports[1].labeled_fraction > reports[0].labeled_fraction

    def test_supervised_only_mode(self):
        cfg = tiny_config(pseudo_strategy="none", stop=StopCondition(max_cycles=2))
        result = run_experiment(cfg)
        assert len(result.curves[("random", 1)]) == 2

    def test_target_ap_stops_early(self):
        cfg = tiny_config(stop=StopCondition(max_cycles=5, target_ap=0.0))
        result = run_experiment(cfg)
        # target 0 is met by the very first report
        assert len(result.curves[("random", 1)]) == 1

    def test_resume_matches_uninterrupted(self):
        cfg = tiny_config(seeds=(1, 2))
        full = run_experiment(cfg)

        partial_states = {}
        partial_reports = {}

        class Killed(RuntimeError):
            pass

        def capture_then_die(method, seed, report, state):
            partial_reports.setdefault((method, seed), []).append(report)
            partial_states[(method, seed)] = state
            if seed == 1 and len(partial_reports[(method, seed)]) == 2:
                raise Killed()

        with pytest.raises(Killed):
            run_experiment(tiny_config(seeds=(1, 2)), on_cycle=capture_then_die)
        preloaded = {
            key: (partial_reports[key], partial_states[key])
            for key in partial_states
        }
        resumed = run_experiment(tiny_config(seeds=(1, 2)), preloaded=preloaded)
        assert report_rows(resumed) == report_rows(full)

    def test_fully_trained_reference(self):
        cfg = tiny_config(include_fully_trained=True,
                          stop=StopCondition(max_cycles=1))
        result = run_experiment(cfg)
        assert 1 in result.fully_trained
        val = result.fully_trained[1]
        assert val is None or 0.0 <= val <= 1.0

    def test_validation(self):
        with pytest.raises(ValueError):
            tiny_config(methods=("bogus",)).validate()
        with pytest.raises(ValueError):
            tiny_config(methods=("monolig",), ensemble_size=1).validate()
        with pytest.raises(ValueError):
            tiny_config(lambda_u=-0.5).validate()

    def test_metric_value_mean3(self):
        r = CycleReport(0, 0.3, 0.6, 0.4, None, "random", 1)
        assert metric_value(r, "mean3") == pytest.approx(0.5)
        assert metric_value(r, "easy") == 0.6
        assert metric_value(r, "hard") is None
