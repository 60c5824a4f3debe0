import json

import numpy as np
import pytest

import pointseg.cli as cli
from pointseg.cli import main
from pointseg.cloud import load_cloud

TINY_NET = dict(
    num_classes=2, feature_width=3, k_neighbors=2, enrich_radius=10.0,
    layer_scales=[8, 4], layer_radii=[0.6, 1.2], group_sizes=[4, 4],
    channel_widths=[8, 8], decoder_widths=[8, 8],
    gpm_enabled=[True, False], block_points=16)

TINY_TRAIN = dict(epochs=2, batch_size=2, learning_rate=5e-3,
                  optimizer="adam", seed=0)

TWO_PLANES = {"primitives": [
    {"kind": "hplane", "class": 0, "count": 60,
     "params": {"z": 0.1, "size": [1.0, 1.0]}, "jitter": 0.0},
    {"kind": "hplane", "class": 1, "count": 60,
     "params": {"z": 0.8, "size": [1.0, 1.0]}, "jitter": 0.0},
]}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "scene.json").write_text(json.dumps(TWO_PLANES))
    (tmp_path / "config.json").write_text(
        json.dumps({"network": TINY_NET, "train": TINY_TRAIN}))
    return tmp_path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def gen(capsys, workdir, name="scene.pcld", **extra):
    args = ["gen-data", "--spec", workdir / "scene.json",
            "--out", workdir / name]
    for k, v in extra.items():
        args += [f"--{k}", v]
    code, out, err = run(capsys, *args)
    assert code == 0, err
    return workdir / name


def trained(capsys, workdir, **flags):
    data = gen(capsys, workdir)
    args = ["train", "--config", workdir / "config.json",
            "--data", data, "--out", workdir / "model.elgs"]
    for k, v in flags.items():
        args += [f"--{k}", v]
    code, out, err = run(capsys, *args)
    assert code == 0, err
    return data, workdir / "model.elgs", json.loads(out)


class TestGenData:
    def test_writes_loadable_labeled_cloud(self, capsys, workdir):
        path = gen(capsys, workdir)
        cloud = load_cloud(path)
        assert cloud.n == 120
        assert sorted(np.unique(cloud.labels)) == [0, 1]

    def test_ascii_format(self, capsys, workdir):
        path = gen(capsys, workdir, name="scene.txt", format="ascii")
        header = path.read_text().splitlines()[0]
        assert header.split() == ["x", "y", "z", "label"]
        assert load_cloud(path).n == 120

    def test_seed_flag_and_env_fallback(self, capsys, workdir, monkeypatch):
        a = gen(capsys, workdir, name="a.pcld", seed="7")
        monkeypatch.setenv("ELGS_SEED", "7")
        b = gen(capsys, workdir, name="b.pcld")
        monkeypatch.setenv("ELGS_SEED", "8")
        c = gen(capsys, workdir, name="c.pcld")
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_bad_env_seed_is_a_config_error(self, capsys, workdir, monkeypatch):
        monkeypatch.setenv("ELGS_SEED", "lots")
        code, _, err = run(capsys, "gen-data", "--spec", workdir / "scene.json",
                           "--out", workdir / "x.pcld")
        assert code == 1
        assert "ELGS_SEED" in err

    def test_missing_spec_is_exit_1(self, capsys, workdir):
        code, _, err = run(capsys, "gen-data", "--spec", workdir / "nope.json",
                           "--out", workdir / "x.pcld")
        assert code == 1
        assert err.startswith("error:")


class TestTrain:
    def test_writes_checkpoint_log_and_summary(self, capsys, workdir):
        data, model, summary = trained(capsys, workdir)
        assert model.exists()
        log = workdir / "model.elgs.log.jsonl"
        assert log.exists()
        records = [json.loads(l) for l in log.read_text().splitlines()]
        assert len(records) == TINY_TRAIN["epochs"]
        assert {"checkpoint", "log", "epochs", "loss", "oa", "miou"} <= set(summary)

    def test_reruns_are_bit_identical(self, capsys, workdir):
        data = gen(capsys, workdir)
        for name in ("m1.elgs", "m2.elgs"):
            code, _, err = run(capsys, "train", "--config", workdir / "config.json",
                               "--data", data, "--out", workdir / name)
            assert code == 0, err
        assert (workdir / "m1.elgs").read_bytes() == (workdir / "m2.elgs").read_bytes()

    def test_epoch_and_optimizer_overrides(self, capsys, workdir):
        data = gen(capsys, workdir)
        code, out, err = run(capsys, "train", "--config", workdir / "config.json",
                             "--data", data, "--out", workdir / "m.elgs",
                             "--epochs", "3", "--train.optimizer=sgd")
        assert code == 0, err
        log = (workdir / "m.elgs.log.jsonl").read_text().splitlines()
        assert len(log) == 3

    def test_report_dir_gets_csv_and_figure(self, capsys, workdir):
        data = gen(capsys, workdir)
        report = workdir / "report"
        code, _, err = run(capsys, "train", "--config", workdir / "config.json",
                           "--data", data, "--out", workdir / "m.elgs",
                           "--report-dir", report)
        assert code == 0, err
        assert (report / "training_log.csv").exists()
        assert (report / "training_curves.png").exists()
        header = (report / "training_log.csv").read_text().splitlines()[0]
        assert header == "epoch,loss,oa,miou,wall_ms"

    def test_unlabeled_data_is_exit_1(self, capsys, workdir, tmp_path):
        from pointseg.cloud import PointCloud, save_cloud
        bare = tmp_path / "bare.pcld"
        save_cloud(PointCloud(np.random.default_rng(0).uniform(size=(40, 3))),
                   bare, format="binary")
        code, _, err = run(capsys, "train", "--config", workdir / "config.json",
                           "--data", bare, "--out", workdir / "m.elgs")
        assert code == 1
        assert "labels" in err


class TestEvalPredict:
    def test_eval_prints_metrics_json(self, capsys, workdir):
        data, model, _ = trained(capsys, workdir)
        code, out, err = run(capsys, "eval", "--config", workdir / "config.json",
                             "--model", model, "--data", data)
        assert code == 0, err
        payload = json.loads(out)
        assert 0.0 <= payload["oa"] <= 1.0
        assert len(payload["per_class_iou"]) == 2
        assert np.asarray(payload["confusion"]).sum() == TINY_NET["block_points"]

    def test_zero_lr_train_equals_untrained_checkpoint(self, capsys, workdir):
        data = gen(capsys, workdir)
        outs = []
        for name, lr_flags in (("frozen.elgs", ["--lr", "0", "--epochs", "1"]),
                               ("frozen2.elgs", ["--lr", "0", "--epochs", "5"])):
            code, _, err = run(capsys, "train", "--config", workdir / "config.json",
                               "--data", data, "--out", workdir / name, *lr_flags)
            assert code == 0, err
            code, out, err = run(capsys, "eval", "--config", workdir / "config.json",
                                 "--model", workdir / name, "--data", data)
            assert code == 0, err
            outs.append(out)
        # frozen training never moves the params, so both evals agree exactly
        assert outs[0] == outs[1]

    def test_eval_robustness_payload(self, capsys, workdir):
        data, model, _ = trained(capsys, workdir)
        code, out, err = run(capsys, "eval", "--config", workdir / "config.json",
                             "--model", model, "--data", data, "--robustness")
        assert code == 0, err
        rob = json.loads(out)["robustness"]
        assert len(rob["perturbations"]) == 5
        identity = [r for r in rob["perturbations"]
                    if r["kind"] == "scale" and r["value"] == 1.0]
        assert identity[0]["delta"] == 0.0

    def test_predict_round_trips_and_matches_eval_truth(self, capsys, workdir):
        data, model, _ = trained(capsys, workdir)
        out_path = workdir / "pred.pcld"
        code, out, err = run(capsys, "predict", "--config", workdir / "config.json",
                             "--model", model, "--cloud", data, "--out", out_path)
        assert code == 0, err
        summary = json.loads(out)
        assert sum(summary["classes"]) == 120
        pred_cloud = load_cloud(out_path)
        assert pred_cloud.labels is not None
        assert pred_cloud.n == 120
        # the model's own labels evaluate to a perfect score
        code, out, err = run(capsys, "eval", "--config", workdir / "config.json",
                             "--model", model, "--data", out_path)
        assert code == 0, err
        assert json.loads(out)["oa"] == 1.0

    def test_wrong_architecture_checkpoint_is_exit_1(self, capsys, workdir):
        data, model, _ = trained(capsys, workdir)
        code, _, err = run(capsys, "eval", "--config", workdir / "config.json",
                           "--model", model, "--data", data,
                           "--network.channel_widths=[6,6]")
        assert code == 1
        assert "does not match" in err


class TestGradcheckCommand:
    SMALL = ["--network.layer_scales=[6,3]", "--network.block_points=12",
             "--network.channel_widths=[6,6]", "--network.decoder_widths=[6,6]",
             "--network.group_sizes=[4,4]", "--network.layer_radii=[0.6,1.2]",
             "--network.k_neighbors=2", "--network.enrich_radius=2.0",
             "--network.num_classes=3", "--network.gpm_enabled=[true,true]"]

    def test_passes_on_small_config(self, capsys):
        code, out, _ = run(capsys, "gradcheck", *self.SMALL)
        assert code == 0
        assert "gradcheck PASS" in out
        assert "max relative error" in out

    def test_failure_exits_2(self, capsys, monkeypatch):
        monkeypatch.setattr(cli, "GRADCHECK_TOLERANCE", 1e-18)
        code, out, _ = run(capsys, "gradcheck", *self.SMALL)
        assert code == 2
        assert "gradcheck FAIL" in out


class TestAblateBench:
    def test_ablate_table_and_report(self, capsys, workdir):
        data = gen(capsys, workdir)
        report = workdir / "ablate"
        code, out, err = run(capsys, "ablate", "--config", workdir / "config.json",
                             "--data", data, "--variants", "full,no_gpm",
                             "--report-dir", report, "--train.epochs=1")
        assert code == 0, err
        table = json.loads(out)
        assert set(table) == {"full", "no_gpm"}
        assert (report / "ablation.csv").exists()
        assert (report / "ablation.png").exists()
        assert (report / "train_full.jsonl").exists()

    def test_unknown_variant_is_exit_1(self, capsys, workdir):
        data = gen(capsys, workdir)
        code, _, err = run(capsys, "ablate", "--config", workdir / "config.json",
                           "--data", data, "--variants", "full,bogus")
        assert code == 1
        assert "unknown ablation variant" in err

    def test_bench_reports_stage_timings(self, capsys, workdir):
        code, out, err = run(capsys, "bench", "--config", workdir / "config.json",
                             "--points", "16")
        assert code == 0, err
        payload = json.loads(out)
        stages = [r["stage"] for r in payload["stages"]]
        assert stages == ["plan", "enrich", "encode", "decode",
                          "spatial_attention", "channel_attention",
                          "classify", "total"]
        assert all(r["ms"] >= 0 for r in payload["stages"])


class TestConfigHandling:
    def test_unknown_section_rejected(self, capsys, workdir):
        (workdir / "bad.json").write_text(json.dumps({"model": {}}))
        code, _, err = run(capsys, "bench", "--config", workdir / "bad.json",
                           "--points", "16")
        assert code == 1
        assert "unknown config sections" in err

    def test_unknown_dotted_key_rejected(self, capsys, workdir):
        code, _, err = run(capsys, "bench", "--config", workdir / "config.json",
                           "--points", "16", "--network.blocky=4")
        assert code == 1
        assert "unknown network config keys" in err

    def test_malformed_override_rejected(self, capsys):
        code, _, err = run(capsys, "gradcheck", "--fast")
        assert code == 1
        assert "unrecognized argument" in err

    def test_malformed_json_config(self, capsys, workdir):
        (workdir / "broken.json").write_text("{not json")
        code, _, err = run(capsys, "bench", "--config", workdir / "broken.json")
        assert code == 1
        assert err.startswith("error:")

    def test_invalid_config_value_rejected(self, capsys, workdir):
        code, _, err = run(capsys, "bench", "--config", workdir / "config.json",
                           "--points", "16", "--train.optimizer=rmsprop")
        assert code == 1
        assert "optimizer" in err
