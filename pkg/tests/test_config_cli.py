"""Config document semantics and the command-line pipeline end to end."""

import json
import subprocess
import sys

import numpy as np
import pytest

from peerdistill.cli import main
from peerdistill.config import RunConfig, check_no_nan_defaults
from peerdistill.data import load_dataset, SplitPlan
from peerdistill.errors import ConfigError, FormatError
from peerdistill.metrics import load_embeddings
from peerdistill.models import load_peer

# tiny geometry shared by every CLI run in this file
PIPELINE_CONFIG = {
    "synth": {"n_subjects": 4, "trials_per_class_per_subject": 3,
              "n": 3, "t": 40, "class_separation": 2.0, "noise_std": 0.3,
              "subject_shift": 0.05, "seed": 1},
    "split": {"n_folds": 1, "train_fraction": 0.75, "seed": 0},
    "peer": {"n_channels": 3, "n_samples": 40, "embed_region_dim": 6,
             "embed_channel_dim": 6, "contrastive_dim": 4,
             "conv_channels": [3, 2], "conv_kernels": [8, 4],
             "conv_strides": [4, 2]},
    "train": {"peer_count": 2, "epochs": 2, "base_lr": 1e-3,
              "weight_decay": 0.0, "per_class": 3, "seed": 0},
}


class TestRunConfig:
    def test_defaults_cover_every_section(self):
        cfg = RunConfig.load()
        assert set(cfg.sections) == {"synth", "split", "peer", "train",
                                     "loss", "paths"}
        assert cfg.sections["train"]["per_class"] == 16
        assert cfg.sections["peer"]["kind"] == "cnn_lstm"
        check_no_nan_defaults()

    def test_unknown_section_rejected(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"trian": {}}))
        with pytest.raises(ConfigError, match="trian"):
            RunConfig.load(p)

    def test_unknown_key_is_named_with_its_path(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"eopchs": 3}}))
        with pytest.raises(ConfigError, match=r"train\.eopchs"):
            RunConfig.load(p)

    def test_file_values_override_defaults(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"epochs": 5}}))
        cfg = RunConfig.load(p)
        assert cfg.sections["train"]["epochs"] == 5
        assert cfg.sections["train"]["peer_count"] == 3  # untouched default

    def test_dotted_overrides_beat_the_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"epochs": 5, "seed": 3}}))
        cfg = RunConfig.load(p, {"train.epochs": 9, "train.seed": None})
        assert cfg.sections["train"]["epochs"] == 9
        assert cfg.sections["train"]["seed"] == 3   # None override = unset

    def test_override_with_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="paths.output"):
            RunConfig.load(None, {"paths.output": "x"})

    def test_malformed_documents_rejected(self, tmp_path):
        bad_json = tmp_path / "bad.json"
        bad_json.write_text("{not json")
        with pytest.raises(FormatError):
            RunConfig.load(bad_json)
        listdoc = tmp_path / "list.json"
        listdoc.write_text("[1, 2]")
        with pytest.raises(FormatError):
            RunConfig.load(listdoc)
        strsec = tmp_path / "str.json"
        strsec.write_text(json.dumps({"train": "fast"}))
        with pytest.raises(ConfigError, match="object"):
            RunConfig.load(strsec)

    def test_validation_runs_on_load(self):
        with pytest.raises(ConfigError, match="train_fraction"):
            RunConfig.load(None, {"split.train_fraction": 1.5})
        with pytest.raises(ConfigError, match="distill_temperature"):
            RunConfig.load(None, {"loss.distill_temperature": -1.0})

    def test_typed_views(self):
        cfg = RunConfig.load()
        peer = cfg.peer_config()
        assert peer.conv_channels == (32, 16)   # lists become tuples
        assert cfg.synth_config().n_subjects == 10
        train = cfg.train_config("Empe")
        assert train.weights.distill_temperature == 2.0
        assert cfg.train_config("Afim").weights.distill_temperature == 5.0
        assert cfg.train_config(None).weights.distill_temperature == 2.0
        with pytest.raises(ConfigError, match="task"):
            cfg.train_config("Arithmetic")

    def test_explicit_temperature_beats_task_default(self):
        cfg = RunConfig.load(None, {"loss.distill_temperature": 3.5})
        assert cfg.train_config("Afim").weights.distill_temperature == 3.5

    def test_echo_is_byte_stable_and_parses_back(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"train": {"epochs": 4}}))
        a = RunConfig.load(p, {"train.seed": 5}).echo()
        b = RunConfig.load(p, {"train.seed": 5}).echo()
        assert a == b
        assert json.loads(a) == RunConfig.load(p, {"train.seed": 5}).sections


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One full CLI pass: synth -> split -> train; later tests reuse it."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(PIPELINE_CONFIG))
    paths = {"root": root, "config": cfg_path, "data": root / "ds.bin",
             "plan": root / "plan.json", "run": root / "run"}
    assert main(["synth", "--config", str(cfg_path),
                 "--out", str(paths["data"])]) == 0
    assert main(["split", "--config", str(cfg_path),
                 "--data", str(paths["data"]),
                 "--out", str(paths["plan"])]) == 0
    assert main(["train", "--config", str(cfg_path),
                 "--data", str(paths["data"]), "--split", str(paths["plan"]),
                 "--run-dir", str(paths["run"])]) == 0
    return paths


class TestPipeline:
    def test_synth_output_loads(self, pipeline):
        ds = load_dataset(pipeline["data"])
        assert len(ds) == 4 * 4 * 3
        assert ds.signals.shape == (48, 2, 3, 40)

    def test_split_output_parses(self, pipeline):
        plan = SplitPlan.from_json(pipeline["plan"].read_text())
        assert len(plan.folds) == 1
        assert len(plan.folds[0].test_subjects) == 1

    def test_run_dir_artifacts(self, pipeline):
        run = pipeline["run"]
        for name in ("config.json", "split.json", "results.json",
                     "report.txt", "report.json"):
            assert (run / name).exists(), name
        fold = run / "folds" / "fold1"
        for name in ("epochs.jsonl", "checkpoint.bin", "best_peer.model",
                     "result.json"):
            assert (fold / name).exists(), name

    def test_config_echo_reproduces_run_settings(self, pipeline):
        stored = json.loads((pipeline["run"] / "config.json").read_text())
        assert stored["train"]["epochs"] == 2
        assert stored["paths"]["dataset"] == str(pipeline["data"])
        assert stored["peer"]["n_channels"] == 3

    def test_results_document(self, pipeline):
        doc = json.loads((pipeline["run"] / "results.json").read_text())
        assert len(doc["protocol"]["folds"]) == 1
        fold = doc["protocol"]["folds"][0]
        assert fold["selected_accuracy"] == max(fold["peer_accuracies"])
        comp = doc["compression"]
        # 2-peer cohort, so the ratio sits near 1 - 1/(2·overhead) ~ 0.5
        assert comp["compression_ratio"] == \
            1.0 - comp["infer_params"] / comp["train_params"]
        assert 0.0 < comp["compression_ratio"] < 1.0
        assert doc["summary"]["mean_accuracy"] == \
            doc["protocol"]["mean_accuracy"]

    def test_eval_json_output(self, pipeline, capsys):
        model = pipeline["run"] / "folds" / "fold1" / "best_peer.model"
        assert main(["eval", "--model", str(model),
                     "--data", str(pipeline["data"]), "--json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert 0.0 <= doc["overall"] <= 1.0
        assert set(doc["per_class"]) == set(load_dataset(
            pipeline["data"]).class_names)

    def test_export_then_eval_round_trip(self, pipeline, capsys, tmp_path):
        ck = pipeline["run"] / "folds" / "fold1" / "checkpoint.bin"
        out = tmp_path / "peer0.model"
        assert main(["export", "--checkpoint", str(ck), "--peer", "0",
                     "--out", str(out)]) == 0
        capsys.readouterr()
        peer = load_peer(out)
        assert peer.config.n_channels == 3
        assert main(["eval", "--model", str(out),
                     "--data", str(pipeline["data"])]) == 0
        assert "overall accuracy" in capsys.readouterr().out

    def test_export_peer_out_of_range(self, pipeline, capsys):
        ck = pipeline["run"] / "folds" / "fold1" / "checkpoint.bin"
        assert main(["export", "--checkpoint", str(ck), "--peer", "5",
                     "--out", "/dev/null"]) == 1
        assert "out of range" in capsys.readouterr().err

    def test_embed_full_and_filtered(self, pipeline, capsys, tmp_path):
        model = pipeline["run"] / "folds" / "fold1" / "best_peer.model"
        full = tmp_path / "all.emb"
        assert main(["embed", "--model", str(model),
                     "--data", str(pipeline["data"]),
                     "--out", str(full)]) == 0
        header, e_rg, e_ch = load_embeddings(full)
        assert header["row_count"] == 48
        assert e_rg.shape[1] == 6 and e_ch.shape[1] == 6

        some = tmp_path / "some.emb"
        assert main(["embed", "--model", str(model),
                     "--data", str(pipeline["data"]),
                     "--out", str(some), "--subjects", "s00,s02"]) == 0
        header, _, _ = load_embeddings(some)
        assert set(header["subjects"]) == {"s00", "s02"}
        assert header["row_count"] == 24

    def test_embed_unknown_subject(self, pipeline, capsys):
        model = pipeline["run"] / "folds" / "fold1" / "best_peer.model"
        assert main(["embed", "--model", str(model),
                     "--data", str(pipeline["data"]),
                     "--out", "/dev/null", "--subjects", "s99"]) == 1
        assert "s99" in capsys.readouterr().err

    def test_report_rerenders_from_results(self, pipeline, capsys):
        assert main(["report", "--run-dir", str(pipeline["run"])]) == 0
        out = capsys.readouterr().out
        assert "Cross-subject evaluation" in out
        assert "parameter compression" in out
        stored = (pipeline["run"] / "report.txt").read_text()
        assert stored == out

    def test_train_rerun_is_deterministic(self, pipeline, capsys, tmp_path):
        """Same config, fresh run dir: every numeric artifact matches."""
        rerun = tmp_path / "rerun"
        assert main(["train", "--config", str(pipeline["config"]),
                     "--data", str(pipeline["data"]),
                     "--split", str(pipeline["plan"]),
                     "--run-dir", str(rerun)]) == 0
        capsys.readouterr()
        for name in ("results.json", "report.txt", "report.json"):
            assert (rerun / name).read_bytes() == \
                (pipeline["run"] / name).read_bytes(), name


class TestExitCodes:
    def test_no_arguments_is_usage_error(self, capsys):
        assert main([]) == 1
        capsys.readouterr()

    def test_unknown_flag_is_usage_error(self, capsys):
        assert main(["synth", "--out", "x", "--frobnicate"]) == 1
        capsys.readouterr()

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "synth" in capsys.readouterr().out

    def test_missing_input_file(self, capsys, tmp_path):
        assert main(["eval", "--model", str(tmp_path / "no.model"),
                     "--data", str(tmp_path / "no.bin")]) == 1
        capsys.readouterr()

    def test_train_without_paths_is_config_error(self, capsys):
        assert main(["train"]) == 1
        assert "paths.dataset" in capsys.readouterr().err

    def test_corrupt_dataset_is_format_error(self, capsys, tmp_path):
        bad = tmp_path / "bad.bin"
        bad.write_bytes(b"not a dataset at all")
        assert main(["eval", "--model", "x", "--data", str(bad)]) == 1
        capsys.readouterr()

    def test_bad_config_value_is_config_error(self, capsys, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"split": {"train_fraction": 2.0}}))
        assert main(["synth", "--config", str(cfg),
                     "--out", str(tmp_path / "x.bin")]) == 1
        assert "train_fraction" in capsys.readouterr().err

    def test_divergent_run_exits_two(self, capsys, tmp_path):
        cfg_doc = json.loads(json.dumps(PIPELINE_CONFIG))
        cfg_doc["train"]["base_lr"] = 1e18
        cfg_doc["train"]["epochs"] = 1
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps(cfg_doc))
        data = tmp_path / "ds.bin"
        assert main(["synth", "--config", str(cfg), "--out", str(data)]) == 0
        assert main(["train", "--config", str(cfg), "--data", str(data),
                     "--run-dir", str(tmp_path / "run")]) == 2
        err = capsys.readouterr().err
        assert "runtime failure" in err and "batch" in err


def test_module_entrypoint_runs_in_subprocess(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(PIPELINE_CONFIG))
    out = tmp_path / "ds.bin"
    proc = subprocess.run(
        [sys.executable, "-m", "peerdistill.cli", "synth",
         "--config", str(cfg), "--out", str(out)],
        capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "fingerprint" in proc.stdout
    assert load_dataset(out).signals.dtype == np.float32
