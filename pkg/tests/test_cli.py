"""End-to-end pipeline runs through the command-line entry point."""

import json

import numpy as np
import pytest

from crowdflow.cli import main

pytestmark = pytest.mark.filterwarnings("ignore::RuntimeWarning")


def make_dataset(tmp_path, n=2, frames=4):
    config = {
        "sequences": [
            {"name": f"s{i}", "width": 32, "height": 32,
             "frame_count": frames, "count_min": 3, "count_max": 5}
            for i in range(n)
        ]
    }
    cfg_path = tmp_path / "scenes.json"
    cfg_path.write_text(json.dumps(config))
    data = tmp_path / "data"
    rc = main(["generate", "--out", str(data), "--config", str(cfg_path),
               "--seed", "5"])
    assert rc == 0
    return data


MODEL = {"model": {"channels": [4, 6, 8, 10], "embed_dim": 4},
         "schedule": {"epochs": 2, "early_epochs": 0,
                      "lr_early": 1e-3, "lr_late": 1e-3},
         "train": {"pairs_per_sequence": 1}}


class TestGenerate:
    def test_default_suite(self, tmp_path):
        rc = main(["generate", "--out", str(tmp_path / "d"), "--seed", "1",
                   "--frames", "2"])
        assert rc == 0
        seq_dirs = [p for p in (tmp_path / "d").iterdir() if p.is_dir()]
        assert len(seq_dirs) == 6
        for d in seq_dirs:
            assert (d / "frames" / "000000.png").exists()
            assert (d / "annotations.csv").exists()
            assert (d / "meta.json").exists()
        assert (tmp_path / "d" / "run_manifest_generate.json").exists()

    def test_custom_config(self, tmp_path):
        data = make_dataset(tmp_path)
        assert sorted(p.name for p in data.iterdir() if p.is_dir()) == \
               ["s0", "s1"]

    def test_bad_config_reports_single_line(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"sequences": [{"illumination": "lava"}]}))
        rc = main(["generate", "--out", str(tmp_path / "d"),
                   "--config", str(cfg)])
        assert rc != 0
        err = capsys.readouterr().err.strip()
        assert err.startswith("error: ") and "\n" not in err


class TestGtmaps:
    def test_outputs(self, tmp_path):
        data = make_dataset(tmp_path, n=1)
        rc = main(["gtmaps", "--data", str(data)])
        assert rc == 0
        seq = data / "s0"
        with np.load(seq / "maps.npz") as maps:
            assert "den_000000" in maps and "loc_000000" in maps
            assert maps["den_000000"].shape == (32, 32)
        assert (seq / "detections.csv").exists()
        assert (seq / "tracklets.csv").exists()

    def test_density_matches_count(self, tmp_path):
        data = make_dataset(tmp_path, n=1)
        main(["gtmaps", "--data", str(data)])
        ann = (data / "s0" / "annotations.csv").read_text().splitlines()[1:]
        frame0 = sum(1 for line in ann if line.startswith("0,"))
        with np.load(data / "s0" / "maps.npz") as maps:
            assert abs(maps["den_000000"].sum() - frame0) < 1e-9


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp_path = tmp_path_factory.mktemp("pipe")
    data = make_dataset(tmp_path, n=2)
    cfg = tmp_path / "model.json"
    cfg.write_text(json.dumps(MODEL))
    run = tmp_path / "run"
    rc = main(["train", "--data", str(data), "--out", str(run),
               "--config", str(cfg), "--seed", "7"])
    assert rc == 0
    pred = tmp_path / "pred"
    rc = main(["infer", "--data", str(data), "--checkpoint",
               str(run / "checkpoint.npz"), "--out", str(pred),
               "--theta", "0.5"])
    assert rc == 0
    rc = main(["track", "--pred", str(pred)])
    assert rc == 0
    ev = tmp_path / "eval"
    rc = main(["evaluate", "--data", str(data), "--pred", str(pred),
               "--out", str(ev)])
    assert rc == 0
    return tmp_path


class TestTrainInferTrackEvaluate:
    def test_train_artifacts(self, pipeline):
        run = pipeline / "run"
        assert (run / "checkpoint.npz").exists()
        log = (run / "train_log.csv").read_text().splitlines()
        assert len(log) == 3

    def test_infer_artifacts(self, pipeline):
        for name in ("s0", "s1"):
            seq = pipeline / "pred" / name
            with np.load(seq / "maps.npz") as maps:
                assert maps["den_000000"].shape == (32, 32)
                assert maps["loc_000000"].min() >= 0.0
                assert maps["loc_000000"].max() <= 1.0
            assert (seq / "detections.csv").exists()

    def test_track_artifacts(self, pipeline):
        assert (pipeline / "pred" / "s0" / "tracklets.csv").exists()

    def test_evaluate_schema(self, pipeline):
        doc = json.loads((pipeline / "eval" / "results.json").read_text())
        for key in ("mae", "mse", "l_map", "l_ap10", "l_ap15", "l_ap20",
                    "t_map", "t_ap10", "t_ap15", "t_ap20"):
            assert key in doc["overall"]
        assert "by_illumination" in doc
        pr = (pipeline / "eval" / "pr_curves.csv").read_text().splitlines()
        assert pr[0] == "distance,rank,recall,precision"

    def test_manifest_stages_coexist(self, pipeline):
        assert (pipeline / "pred" / "run_manifest_infer.json").exists()
        assert (pipeline / "pred" / "run_manifest_track.json").exists()


class TestGtAsPrediction:
    def test_perfect_scores_through_files(self, tmp_path):
        data = make_dataset(tmp_path, n=2)
        pred = tmp_path / "pred"
        rc = main(["gtmaps", "--data", str(data), "--out", str(pred)])
        assert rc == 0
        ev = tmp_path / "eval"
        rc = main(["evaluate", "--data", str(data), "--pred", str(pred),
                   "--out", str(ev)])
        assert rc == 0
        doc = json.loads((ev / "results.json").read_text())
        overall = doc["overall"]
        assert overall["mae"] <= 1e-9
        assert overall["mse"] <= 1e-9
        assert overall["l_map"] == 1.0
        assert overall["t_map"] == 1.0


class TestVariantFlags:
    def test_no_ms_and_no_heads(self, tmp_path):
        data = make_dataset(tmp_path, n=1)
        cfg = tmp_path / "model.json"
        cfg.write_text(json.dumps(MODEL))
        run = tmp_path / "run_noms"
        rc = main(["train", "--data", str(data), "--out", str(run),
                   "--config", str(cfg), "--seed", "7", "--no-ms",
                   "--no-ass"])
        assert rc == 0
        from crowdflow.tensorcore import load_checkpoint
        arrays, meta = load_checkpoint(run / "checkpoint.npz")
        assert meta["model"]["use_multiscale"] is False
        assert meta["model"]["use_association_head"] is False
        assert "fuse.s2.w" not in arrays
        assert "assoc.embed.w" not in arrays

    def test_no_loc_skips_detections_content(self, tmp_path):
        data = make_dataset(tmp_path, n=1)
        cfg = tmp_path / "model.json"
        cfg.write_text(json.dumps(MODEL))
        run = tmp_path / "run_noloc"
        rc = main(["train", "--data", str(data), "--out", str(run),
                   "--config", str(cfg), "--seed", "7", "--no-loc"])
        assert rc == 0
        pred = tmp_path / "pred_noloc"
        rc = main(["infer", "--data", str(data), "--checkpoint",
                   str(run / "checkpoint.npz"), "--out", str(pred)])
        assert rc == 0
        dets = (pred / "s0" / "detections.csv").read_text().splitlines()
        assert len(dets) == 1  # header only


class TestErrors:
    def test_missing_data_dir(self, tmp_path, capsys):
        rc = main(["train", "--data", str(tmp_path / "nope"),
                   "--out", str(tmp_path / "o")])
        assert rc != 0
        assert capsys.readouterr().err.startswith("error: ")

    def test_missing_checkpoint(self, tmp_path, capsys):
        data = make_dataset(tmp_path, n=1)
        rc = main(["infer", "--data", str(data), "--checkpoint",
                   str(tmp_path / "no.npz"), "--out", str(tmp_path / "p")])
        assert rc != 0
        assert "checkpoint" in capsys.readouterr().err

    def test_thread_cap_validated(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("CROWDFLOW_THREADS", "zero")
        rc = main(["generate", "--out", str(tmp_path / "d"), "--frames", "2"])
        assert rc != 0
        assert "CROWDFLOW_THREADS" in capsys.readouterr().err

    def test_thread_cap_of_one_serializes(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CROWDFLOW_THREADS", "1")
        data = make_dataset(tmp_path, n=2)
        assert sorted(p.name for p in data.iterdir() if p.is_dir()) == \
               ["s0", "s1"]


class TestDeterminism:
    def test_identical_seeds_identical_results_bytes(self, tmp_path):
        outputs = []
        for tag in ("a", "b"):
            base = tmp_path / tag
            base.mkdir()
            data = make_dataset(base, n=1, frames=3)
            cfg = base / "model.json"
            cfg.write_text(json.dumps(MODEL))
            run = base / "run"
            assert main(["train", "--data", str(data), "--out", str(run),
                         "--config", str(cfg), "--seed", "11"]) == 0
            pred = base / "pred"
            assert main(["infer", "--data", str(data), "--checkpoint",
                         str(run / "checkpoint.npz"), "--out", str(pred),
                         "--theta", "0.5"]) == 0
            assert main(["track", "--pred", str(pred)]) == 0
            ev = base / "eval"
            assert main(["evaluate", "--data", str(data), "--pred",
                         str(pred), "--out", str(ev)]) == 0
            outputs.append((ev / "results.json").read_bytes())
        assert outputs[0] == outputs[1]
