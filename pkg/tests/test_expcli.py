import csv
import json
import math
import os
import shutil

import numpy as np
import pytest

from monolig.expcli import main
from monolig.synthworld import canonical_json


def write_config(path, **kw):
    cfg = {
        "world": {
            "n_scenes": 24,
            "objects_per_scene": [1, 2],
            "clutter_proposals_per_scene": [1, 2],
            "feature_dim": 10,
            "seed": 5,
        },
        "train": {"hidden_dim": 12, "epochs": 25, "lr": 0.005},
        "n_eval_scenes": 10,
        "ensemble_size": 2,
        "methods": ["random"],
        "seeds": [1],
        "initial_fraction": 0.3,
        "budget_fraction": 0.25,
        "stop": {"max_cycles": 3},
        "include_fully_trained": False,
        "curve_metric": "mean3",
    }
    cfg.update(kw)
    path.write_text(json.dumps(cfg))
    return path


def teacher_det(cx, cz, sigma, p=0.9, category=0):
    return {
        "box": [cx, 0.75, cz, 1.8, 1.5, 4.2, 0.0],
        "category": category,
        "p": p,
        "sigma": list(sigma),
    }


def student_det(cx, cz, p=0.8, category=0):
    return {"box": [cx, 0.75, cz, 1.8, 1.5, 4.2, 0.0], "category": category, "p": p}


def write_dump(path, frames):
    path.write_text(canonical_json({"frames": frames}))
    return path


class TestGenerate:
    def test_writes_deterministic_dataset(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        out1 = tmp_path / "a.json"
        out2 = tmp_path / "b.json"
        assert main(["generate", "--config", str(cfg), "--out", str(out1)]) == 0
        assert main(["generate", "--config", str(cfg), "--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_round_trip_byte_identical(self, tmp_path):
        from monolig.synthworld import load_dataset, save_dataset

        cfg = write_config(tmp_path / "cfg.json")
        out = tmp_path / "dataset.json"
        main(["generate", "--config", str(cfg), "--out", str(out)])
        world, scenes = load_dataset(out)
        again = tmp_path / "again.json"
        save_dataset(again, world, scenes)
        assert out.read_bytes() == again.read_bytes()

    def test_missing_seed_named(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        raw = json.loads(write_config(tmp_path / "base.json").read_text())
        del raw["world"]["seed"]
        cfg.write_text(json.dumps(raw))
        code = main(["generate", "--config", str(cfg), "--out", str(tmp_path / "d.json")])
        assert code == 2
        assert "world.seed" in capsys.readouterr().err

    def test_unknown_field_named(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        raw = json.loads(write_config(tmp_path / "base.json").read_text())
        raw["world"]["densty"] = 3
        cfg.write_text(json.dumps(raw))
        assert main(["generate", "--config", str(cfg)]) == 2
        assert "world.densty" in capsys.readouterr().err

    def test_override_flag(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        out1 = tmp_path / "a.json"
        out2 = tmp_path / "b.json"
        main(["generate", "--config", str(cfg), "--out", str(out1),
              "--world.seed=9"])
        main(["generate", "--config", str(cfg), "--out", str(out2)])
        assert out1.read_bytes() != out2.read_bytes()
        assert json.loads(out1.read_text())["config"]["seed"] == 9


class TestRun:
    def _mask_wall(self, root):
        """All result files with the wall_ms column blanked."""
        out = {}
        for dirpath, _, files in os.walk(root):
            for name in sorted(files):
                p = os.path.join(dirpath, name)
                rel = os.path.relpath(p, root)
                if name.endswith(".csv"):
                    with open(p) as f:
                        rows = list(csv.reader(f))
                    for row in rows[1:]:
                        row[-1] = "X"
                    out[rel] = rows
                else:
                    with open(p) as f:
                        out[rel] = f.read()
        return out

    def test_layout_and_determinism(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        a, b = tmp_path / "ra", tmp_path / "rb"
        assert main(["run", "--config", str(cfg), "--out", str(a)]) == 0
        assert main(["run", "--config", str(cfg), "--out", str(b)]) == 0
        assert os.path.exists(a / "random" / "1" / "cycle_000.csv")
        assert os.path.exists(a / "random" / "1" / "pool_001.json")
        assert os.path.exists(a / "aggregate.json")
        assert os.path.exists(a / "config_resolved.json")
        assert self._mask_wall(a) == self._mask_wall(b)

    def test_resume_after_kill(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path / "cfg.json")
        full = tmp_path / "full"
        main(["run", "--config", str(cfg), "--out", str(full)])

        # simulate a kill after the second completed cycle
        import monolig.expcli as cli

        killed = tmp_path / "killed"
        calls = {"n": 0}
        real = cli.write_pool_checkpoint

        def dying(path, state):
            real(path, state)
            calls["n"] += 1
            if calls["n"] == 2:
                raise KeyboardInterrupt

        monkeypatch.setattr(cli, "write_pool_checkpoint", dying)
        with pytest.raises(KeyboardInterrupt):
            main(["run", "--config", str(cfg), "--out", str(killed)])
        monkeypatch.setattr(cli, "write_pool_checkpoint", real)

        assert not os.path.exists(killed / "aggregate.json")
        assert main(["run", "--config", str(cfg), "--out", str(killed)]) == 0
        assert self._mask_wall(full) == self._mask_wall(killed)

    def test_config_mismatch_refused(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        root = tmp_path / "r"
        main(["run", "--config", str(cfg), "--out", str(root)])
        assert main(["run", "--config", str(cfg), "--out", str(root),
                     "--world.seed=9"]) == 2
        assert "different" in capsys.readouterr().err

    def test_corrupt_checkpoint_detected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        root = tmp_path / "r"
        main(["run", "--config", str(cfg), "--out", str(root)])
        pool = root / "random" / "1" / "pool_001.json"
        wrapper = json.loads(pool.read_text())
        wrapper["state"]["labeled"] = wrapper["state"]["labeled"][:-1]
        pool.write_text(json.dumps(wrapper))
        # force a resume read by removing later artifacts
        os.remove(root / "random" / "1" / "cycle_001.csv")
        os.remove(root / "random" / "1" / "cycle_002.csv")
        assert main(["run", "--config", str(cfg), "--out", str(root)]) == 2
        assert "corrupt" in capsys.readouterr().err.lower()

    def test_stop_at_target(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json", stop={"max_cycles": 5,
                                                        "target_ap": 0.0})
        root = tmp_path / "r"
        main(["run", "--config", str(cfg), "--out", str(root)])
        assert os.path.exists(root / "random" / "1" / "cycle_000.csv")
        assert not os.path.exists(root / "random" / "1" / "cycle_001.csv")

    def test_run_from_dataset_file(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        data = tmp_path / "dataset.json"
        main(["generate", "--config", str(cfg), "--out", str(data)])
        root = tmp_path / "r"
        assert main(["run", "--config", str(cfg), "--out", str(root),
                     "--dataset", str(data)]) == 0
        assert os.path.exists(root / "aggregate.json")


class TestScoreFile:
    def test_agreeing_members_score_near_zero(self, tmp_path, capsys):
        frames = [
            {
                "id": 0,
                "teacher": [teacher_det(0.0, 10.0, (1e-6, 1e-6, 1e-6))],
                "students": [[student_det(0.0, 10.0)], [student_det(0.0, 10.0)]],
            }
        ]
        dump = write_dump(tmp_path / "dump.json", frames)
        assert main(["score-file", "--dump", str(dump)]) == 0
        out = capsys.readouterr().out
        rows = list(csv.DictReader(out.splitlines()))
        assert float(rows[0]["combined"]) == pytest.approx(0.0, abs=1e-9)

    def test_hand_built_ranking(self, tmp_path):
        # frame 7: members disagree (cx 1 vs 3), teacher at 0, sigma sum 0.5
        #   u_tv = 1, i_ts = 4, combined = 2.5
        # frame 3: members agree with teacher, tiny sigma -> combined ~ 0
        frames = [
            {
                "id": 7,
                "teacher": [teacher_det(0.0, 10.0, (0.2, 0.2, 0.1))],
                "students": [
                    [dict(student_det(1.0, 10.0), box=[1.0, 0.75, 10.0, 8.0, 1.5, 4.2, 0.0])],
                    [dict(student_det(3.0, 10.0), box=[3.0, 0.75, 10.0, 8.0, 1.5, 4.2, 0.0])],
                ],
            },
            {
                "id": 3,
                "teacher": [
                    dict(teacher_det(0.0, 10.0, (0.01, 0.01, 0.01)),
                         box=[0.0, 0.75, 10.0, 8.0, 1.5, 4.2, 0.0])
                ],
                "students": [
                    [dict(student_det(0.0, 10.0), box=[0.0, 0.75, 10.0, 8.0, 1.5, 4.2, 0.0])],
                    [dict(student_det(0.0, 10.0), box=[0.0, 0.75, 10.0, 8.0, 1.5, 4.2, 0.0])],
                ],
            },
        ]
        # widen the teacher box in frame 7 so both members match it
        frames[0]["teacher"][0]["box"] = [0.0, 0.75, 10.0, 8.0, 1.5, 4.2, 0.0]
        dump = write_dump(tmp_path / "dump.json", frames)
        out_csv = tmp_path / "ranked.csv"
        assert main(["score-file", "--dump", str(dump), "--out", str(out_csv),
                     "--tau-match", "0.2"]) == 0
        rows = list(csv.DictReader(out_csv.read_text().splitlines()))
        assert [r["scene_id"] for r in rows] == ["7", "3"]
        top = rows[0]
        assert float(top["u_tv"]) == pytest.approx(1.0, abs=1e-12)
        assert float(top["i_ts"]) == pytest.approx(4.0, abs=1e-12)
        assert float(top["u_al_t"]) == pytest.approx(0.5, abs=1e-12)
        assert float(top["combined"]) == pytest.approx(2.5, abs=1e-12)
        assert [r["rank"] for r in rows] == ["1", "2"]

    def test_golden_byte_identical(self, tmp_path):
        frames = [
            {
                "id": i,
                "teacher": [teacher_det(0.5 * i, 10.0 + i, (0.1, 0.1, 0.2))],
                "students": [
                    [student_det(0.5 * i + 0.2, 10.0 + i)],
                    [student_det(0.5 * i - 0.1, 10.0 + i)],
                ],
            }
            for i in range(4)
        ]
        dump = write_dump(tmp_path / "dump.json", frames)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["score-file", "--dump", str(dump), "--out", str(a)])
        main(["score-file", "--dump", str(dump), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_member_count_mismatch(self, tmp_path, capsys):
        frames = [
            {"id": 0, "teacher": [], "students": [[], []]},
            {"id": 1, "teacher": [], "students": [[]]},
        ]
        dump = write_dump(tmp_path / "dump.json", frames)
        assert main(["score-file", "--dump", str(dump)]) == 2
        assert "member" in capsys.readouterr().err

    def test_unknown_fields_warn_but_pass(self, tmp_path, capsys):
        d = teacher_det(0.0, 10.0, (0.1, 0.1, 0.1))
        d["velocity"] = [1.0, 0.0]
        frames = [{"id": 0, "teacher": [d], "students": [[student_det(0.0, 10.0)]]}]
        dump = write_dump(tmp_path / "dump.json", frames)
        assert main(["score-file", "--dump", str(dump)]) == 0
        assert "velocity" in capsys.readouterr().err

    def test_bad_probability_rejected(self, tmp_path):
        d = teacher_det(0.0, 10.0, (0.1, 0.1, 0.1), p=1.5)
        frames = [{"id": 0, "teacher": [d], "students": [[]]}]
        dump = write_dump(tmp_path / "dump.json", frames)
        assert main(["score-file", "--dump", str(dump)]) == 2


class TestEval:
    def test_perfect_dump_scores_one(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        data = tmp_path / "dataset.json"
        main(["generate", "--config", str(cfg), "--out", str(data)])
        payload = json.loads(data.read_text())
        frames = []
        for scene in payload["scenes"]:
            frames.append(
                {
                    "id": scene["id"],
                    "teacher": [
                        {
                            "box": obj["box"],
                            "category": obj["category"],
                            "p": 0.9,
                            "sigma": [0.1, 0.1, 0.1],
                        }
                        for obj in scene["objects"]
                    ],
                    "students": [[]],
                }
            )
        dump = write_dump(tmp_path / "dump.json", frames)
        capsys.readouterr()  # flush the generate command's message
        assert main(["eval", "--dump", str(dump), "--dataset", str(data),
                     "--iou", "0.7"]) == 0
        result = json.loads(capsys.readouterr().out)
        assert result["ap_all"] == pytest.approx(1.0)

    def test_unknown_frame_rejected(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "cfg.json")
        data = tmp_path / "dataset.json"
        main(["generate", "--config", str(cfg), "--out", str(data)])
        frames = [{"id": 10**6, "teacher": [], "students": [[]]}]
        dump = write_dump(tmp_path / "dump.json", frames)
        assert main(["eval", "--dump", str(dump), "--dataset", str(data)]) == 2


class TestCliBasics:
    def test_usage_error_exit_code(self, capsys):
        assert main(["run"]) == 1
        assert main(["frobnicate"]) == 1

    def test_missing_file_is_data_error(self, tmp_path):
        assert main(["generate", "--config", str(tmp_path / "nope.json")]) == 2

    def test_env_var_out_root(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path / "cfg.json")
        monkeypatch.setenv("MONOLIG_OUT", str(tmp_path / "envroot"))
        monkeypatch.chdir(tmp_path)
        assert main(["run", "--config", str(cfg)]) == 0
        assert os.path.exists(tmp_path / "envroot" / "aggregate.json")
