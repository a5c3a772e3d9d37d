import json

import pytest

from sensireg.cli import main

TINY = {
    "dataset_kind": "blobs",
    "dataset_n": 200,
    "dataset_classes": 2,
    "dataset_noise": 0.04,
    "epochs": 12,
    "batch_size": 32,
    "learning_rate": 0.01,
}

EVAL_FAST = {
    "dataset_kind": "blobs",
    "dataset_n": 200,
    "dataset_classes": 2,
    "dataset_noise": 0.04,
    "attack_kind": "cw",
    "steps": 60,
    "binary_search_steps": 3,
    "step_size": 0.05,
    "budgets": [0.2, 1.0],
    "n_samples": 6,
}


def write_config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture(scope="module")
def pretrained_model(tmp_path_factory):
    out = tmp_path_factory.mktemp("pretrain")
    cfg = write_config(out, "cfg.json", TINY)
    code = main(["pretrain", "--config", cfg, "--out-dir", str(out)])
    assert code == 0
    return str(out / "pretrained.sreg")


class TestValidation:
    def test_missing_model_path_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "cfg.json", dict(EVAL_FAST))
        code = main(["evaluate", "--config", cfg, "--out-dir", str(tmp_path)])
        assert code == 2
        assert "model_in" in capsys.readouterr().err

    def test_nonexistent_model_file_exits_2(self, tmp_path, capsys):
        payload = dict(EVAL_FAST, model_in=str(tmp_path / "missing.sreg"))
        cfg = write_config(tmp_path, "cfg.json", payload)
        code = main(["evaluate", "--config", cfg, "--out-dir", str(tmp_path)])
        assert code == 2
        err = capsys.readouterr().err
        assert "model_in" in err and "not found" in err

    def test_unknown_field_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "cfg.json", dict(TINY, bogus_field=1))
        code = main(["pretrain", "--config", cfg, "--out-dir", str(tmp_path)])
        assert code == 2
        assert "bogus_field" in capsys.readouterr().err

    def test_bad_override_exits_2(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "cfg.json", TINY)
        code = main(["pretrain", "--config", cfg, "--out-dir", str(tmp_path),
                     "epochs=notanumber"])
        assert code == 2
        assert "epochs" in capsys.readouterr().err

    def test_corrupt_model_file_exits_1(self, tmp_path, capsys):
        junk = tmp_path / "junk.sreg"
        junk.write_bytes(b"NOPE" + b"\x00" * 20)
        payload = dict(EVAL_FAST, model_in=str(junk))
        cfg = write_config(tmp_path, "cfg.json", payload)
        code = main(["evaluate", "--config", cfg, "--out-dir", str(tmp_path)])
        assert code == 1
        assert "error" in capsys.readouterr().err


class TestWorkflow:
    def test_pretrain_outputs(self, pretrained_model, tmp_path):
        import pathlib
        out = pathlib.Path(pretrained_model).parent
        assert (out / "pretrained.sreg").exists()
        assert (out / "pretrain_log.csv").exists()
        assert (out / "resolved_config.json").exists()
        resolved = json.loads((out / "resolved_config.json").read_text())
        assert resolved["command"] == "pretrain"
        assert resolved["seed"] == 42

    def test_robustify_and_lambda_search(self, pretrained_model, tmp_path):
        payload = dict(TINY, model_in=pretrained_model, epochs=2,
                       learning_rate=0.001, lambda_ns=0.5, lambda_jacob=0.0,
                       ns_eps=0.25, ns_samples=2)
        cfg = write_config(tmp_path, "rob.json", payload)
        assert main(["robustify", "--config", cfg,
                     "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "robust.sreg").exists()
        assert (tmp_path / "robustify_log.csv").exists()

        search_payload = {k: v for k, v in TINY.items() if k != "epochs"}
        search_payload.update(model_in=pretrained_model, regularizer="ns",
                              ns_eps=0.25, ns_samples=2, learning_rate=0.001)
        cfg2 = write_config(tmp_path, "search.json", search_payload)
        assert main(["lambda-search", "--config", cfg2,
                     "--out-dir", str(tmp_path)]) == 0
        result = json.loads((tmp_path / "lambda_search.json").read_text())
        assert result["recommended"] > 0
        assert len(result["probes"]) >= 7

    def test_attack_command(self, pretrained_model, tmp_path):
        payload = dict(EVAL_FAST, model_in=pretrained_model, n_samples=4,
                       attack_kind="pgd", n_iter=30, eps=0.5)
        payload.pop("budgets")
        payload.pop("steps"), payload.pop("binary_search_steps")
        payload.pop("step_size")
        cfg = write_config(tmp_path, "atk.json", payload)
        assert main(["attack", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
        lines = (tmp_path / "attack_outcomes.csv").read_text().strip().split("\n")
        assert lines[0] == "index,label,target,success,distance,queries"
        assert len(lines) == 5

    def test_evaluate_and_report_conversion(self, pretrained_model, tmp_path):
        payload = dict(EVAL_FAST, model_in=pretrained_model, model_id="tiny")
        cfg = write_config(tmp_path, "ev.json", payload)
        assert main(["evaluate", "--config", cfg,
                     "--out-dir", str(tmp_path)]) == 0
        csv_path = tmp_path / "tiny_cw_untargeted.csv"
        json_path = tmp_path / "tiny_cw_untargeted.json"
        assert csv_path.exists() and json_path.exists()

        conv = write_config(tmp_path, "conv.json",
                            {"input": str(json_path), "output": "again.csv",
                             "format": "csv"})
        assert main(["report", "--config", conv,
                     "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "again.csv").read_text() == csv_path.read_text()

    def test_transfer_command(self, pretrained_model, tmp_path):
        payload = dict(EVAL_FAST, source_model=pretrained_model,
                       target_model=pretrained_model, model_id="self")
        payload.pop("n_samples")
        payload["n_samples"] = 5
        cfg = write_config(tmp_path, "tr.json", payload)
        assert main(["transfer", "--config", cfg,
                     "--out-dir", str(tmp_path)]) == 0
        assert (tmp_path / "self_cw_untargeted.csv").exists()

    def test_seed_flag_overrides_config(self, pretrained_model, tmp_path):
        payload = dict(EVAL_FAST, model_in=pretrained_model, n_samples=4)
        cfg = write_config(tmp_path, "s.json", payload)
        assert main(["evaluate", "--config", cfg, "--seed", "7",
                     "--out-dir", str(tmp_path)]) == 0
        resolved = json.loads((tmp_path / "resolved_config.json").read_text())
        assert resolved["seed"] == 7


class TestReproducibility:
    def test_repeat_runs_byte_identical(self, pretrained_model, tmp_path):
        payload = dict(EVAL_FAST, model_in=pretrained_model, model_id="rep")
        cfg = write_config(tmp_path, "cfg.json", payload)
        out1, out2 = tmp_path / "run1", tmp_path / "run2"
        assert main(["evaluate", "--config", cfg, "--out-dir", str(out1)]) == 0
        assert main(["evaluate", "--config", cfg, "--out-dir", str(out2)]) == 0
        for name in ("rep_cw_untargeted.csv", "rep_cw_untargeted.json",
                     "resolved_config.json"):
            assert (out1 / name).read_bytes() == (out2 / name).read_bytes()

    def test_rerun_from_resolved_config_reproduces(self, pretrained_model,
                                                   tmp_path):
        payload = dict(EVAL_FAST, model_in=pretrained_model, model_id="rep")
        cfg = write_config(tmp_path, "cfg.json", payload)
        out1 = tmp_path / "a"
        assert main(["evaluate", "--config", cfg, "--out-dir", str(out1)]) == 0
        resolved = json.loads((out1 / "resolved_config.json").read_text())
        resolved.pop("command")
        resolved.pop("workers")
        cfg2 = write_config(tmp_path, "resolved.json", resolved)
        out2 = tmp_path / "b"
        assert main(["evaluate", "--config", cfg2, "--out-dir", str(out2)]) == 0
        assert ((out1 / "rep_cw_untargeted.csv").read_bytes()
                == (out2 / "rep_cw_untargeted.csv").read_bytes())
