import json

import pytest

from bridgesim.cli import main
from bridgesim.config import ConfigError, SimConfig, merge
from bridgesim.experiments import EXPERIMENTS, experiment_config, run_experiment, tracking_trajectory


class TestConfig:
    def test_defaults(self):
        cfg = SimConfig.from_dict()
        assert cfg.clock_mode == "virtual" and cfg.dof == 7
        assert cfg.rt_params().substeps == 5
        assert cfg.jitter().base_ms == 22.0
        assert cfg.client_phase_ns == 3_000_000

    def test_deep_merge(self):
        cfg = SimConfig.from_dict({"jitter": {"tail_prob": 0.3}})
        assert cfg.jitter().tail_prob == 0.3 and cfg.jitter().base_ms == 22.0

    @pytest.mark.parametrize(
        "override",
        [{"bogus": 1}, {"jitter": {"bogus": 1}}, {"jitter": 3}, {"clock_mode": "sundial"}, {"seed": -1}, {"servo": {"omega_n": 0}}, {"periods": {"control_ms": 5.5}}],
    )
    def test_rejects_bad_config(self, override):
        with pytest.raises(ConfigError):
            SimConfig.from_dict(override)

    def test_experiment_section_is_free_form(self):
        assert merge({"experiment": {}}, {"experiment": {"anything": 1}})["experiment"] == {"anything": 1}

    def test_load_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"seed": 4, "servo": {"zeta": 1.2}}))
        cfg = SimConfig.load(p)
        assert cfg.seed == 4 and cfg.servo().zeta == 1.2


class TestExperiments:
    def test_presets_cover_all(self):
        for name in EXPERIMENTS:
            assert experiment_config(name).raw["experiment"]

    @pytest.mark.parametrize("name", ["transport", "success_rate", "end_to_end"])
    def test_deterministic_csv(self, tmp_path, name):
        a = run_experiment(name, tmp_path / "a", seed=3)
        b = run_experiment(name, tmp_path / "b", seed=3)
        assert a == b
        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert "report.json" in files and "summary.md" in files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_report_is_self_describing(self, tmp_path):
        run_experiment("transport", tmp_path, seed=9, overrides={"experiment": {"n_packets": 50}})
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["seed"] == 9
        assert report["config"]["experiment"]["n_packets"] == 50
        assert report["results"]["n_packets"] == 50

    def test_success_rate_shape(self, tmp_path):
        res = run_experiment("success_rate", tmp_path, seed=0)["results"]
        assert res["monotone"] and res["oracle_agrees"]
        assert set(res["topic_delivery"].values()) == {1.0}

    def test_tracking_trajectory(self):
        traj = tracking_trajectory()
        assert len(traj) == 41 and traj.dof == 7 and traj.duration == 4.0
        assert not traj.positions[0].any() and not traj.positions[-1].any()


class TestMain:
    def test_run(self, tmp_path, capsys):
        assert main(["run", "--experiment", "transport", "--seed", "1", "--out", str(tmp_path)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["experiment"] == "transport"
        assert (tmp_path / "latency.csv").exists()

    def test_run_with_config(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"experiment": {"n_packets": 10}}))
        assert main(["run", "--experiment", "transport", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        assert json.loads(capsys.readouterr().out)["results"]["n_packets"] == 10

    def _error(self, capsys):
        return json.loads(capsys.readouterr().err.strip())

    def test_unknown_experiment(self, tmp_path, capsys):
        assert main(["run", "--experiment", "nope", "--out", str(tmp_path)]) != 0
        assert self._error(capsys)["error"] == "ExperimentError"

    def test_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["run", "--experiment", "transport", "--out", str(blocker / "sub")]) != 0
        assert "not writable" in self._error(capsys)["message"]

    def test_bad_config_file(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        assert main(["run", "--experiment", "transport", "--config", str(cfg), "--out", str(tmp_path)]) != 0
        assert self._error(capsys)["error"] == "ConfigError"

    def test_usage_error(self, capsys):
        assert main([]) == 2
        assert self._error(capsys)["error"] == "usage"

    def test_gen_scene(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"objects": [{"category": "milk_carton", "x": 0.0, "y": 0.8, "yaw": 0.2}]}))
        assert main(["gen-scene", "--spec", str(spec), "--seed", "5", "--out", str(tmp_path / "s")]) == 0
        names = {p.name for p in (tmp_path / "s").iterdir()}
        assert names == {"cloud.ply", "cloud.csv", "rois.json", "catalog.json", "ground_truth.json"}
        truth = json.loads((tmp_path / "s" / "ground_truth.json").read_text())
        assert truth["seed"] == 5 and len(truth["boxes"][0]["corners"]) == 8

    def test_gen_scene_overlap(self, tmp_path, capsys):
        spec = tmp_path / "spec.json"
        objs = [{"category": "snack_box", "x": 0.0, "y": 0.8}, {"category": "snack_box", "x": 0.01, "y": 0.8}]
        spec.write_text(json.dumps({"objects": objs}))
        assert main(["gen-scene", "--spec", str(spec), "--out", str(tmp_path / "s")]) != 0
        assert self._error(capsys)["error"] == "SceneError"
