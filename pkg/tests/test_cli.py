"""End-to-end command-line behaviour: exit codes, artifacts, precedence."""

import hashlib
import json
from pathlib import Path

import pytest
import torch

from ranfup import bundle as bundle_mod
from ranfup import cli, model as model_mod, training


def dir_hashes(path):
    path = Path(path)
    return {
        p.relative_to(path).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(path.rglob("*"))
        if p.is_file()
    }


def make_bundle(tmp_path, name="bundle", subjects=6, seed=1):
    out = tmp_path / name
    code = cli.main([
        "synth-gen", "--out", str(out), "--subjects", str(subjects),
        "--grid", "octahedron", "--length", "128", "--seed", str(seed),
    ])
    assert code == 0
    return out


# -- exit codes -------------------------------------------------------------------


def test_no_arguments_is_usage_error():
    with pytest.raises(SystemExit) as info:
        cli.main([])
    assert info.value.code == 1


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as info:
        cli.main(["validate", "--bundle", "x", "--frobnicate"])
    assert info.value.code == 1


def test_bad_criterion_choice_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as info:
        cli.main([
            "retrieve", "--bundle", str(tmp_path), "--target", "S000",
            "--criterion", "loudness",
        ])
    assert info.value.code == 1


def test_version_flag():
    with pytest.raises(SystemExit) as info:
        cli.main(["--version"])
    assert info.value.code == 0


def test_missing_bundle_is_data_error(tmp_path):
    assert cli.main(["validate", "--bundle", str(tmp_path / "nope")]) == 2


def test_corrupted_bundle_is_data_error(tmp_path, capsys):
    out = make_bundle(tmp_path)
    payloads = [p for p in out.iterdir() if p.name != "manifest.json"
                and p.name != "synth_manifest.json"]
    victim = sorted(payloads)[0]
    victim.write_bytes(victim.read_bytes()[:-16])
    assert cli.main(["validate", "--bundle", str(out)]) == 2
    err = capsys.readouterr().err
    record = json.loads(err.strip().splitlines()[-1])
    assert record["kind"] == "data"
    assert record["message"]


def test_numerical_error_exit_code(tmp_path, monkeypatch):
    out = make_bundle(tmp_path)
    monkeypatch.setattr(
        training, "sample_loss",
        lambda *a, **k: torch.tensor(float("nan"), requires_grad=True),
    )
    code = cli.main([
        "pretrain", "--bundle", str(out), "--out", str(tmp_path / "run"),
        "--split-sizes", "4,1,1", "--epochs", "1", "--k", "2",
        "--exclude", "", "--batch-size", "8",
        "--config", str(write_small_net_config(tmp_path)),
    ])
    assert code == 3


# -- synthesis and validation -------------------------------------------------------


def test_synth_gen_validate_round_trip(tmp_path, capsys):
    out = make_bundle(tmp_path, subjects=4)
    capsys.readouterr()
    assert cli.main(["validate", "--bundle", str(out)]) == 0
    info = json.loads(capsys.readouterr().out.strip())
    assert info == {
        "subjects": 4,
        "directions": 6,
        "sample_rate_hz": 48000,
        "hrir_length": 128,
    }
    manifest = json.loads((out / "synth_manifest.json").read_text())
    assert manifest["grid"] == "octahedron"
    assert manifest["seed"] == 1


def test_synth_gen_deterministic_across_runs(tmp_path):
    a = make_bundle(tmp_path, name="a", seed=9)
    b = make_bundle(tmp_path, name="b", seed=9)
    c = make_bundle(tmp_path, name="c", seed=10)
    assert dir_hashes(a) == dir_hashes(b)
    assert dir_hashes(a) != dir_hashes(c)


def test_data_dir_resolution(tmp_path, monkeypatch):
    out = make_bundle(tmp_path, name="stored")
    monkeypatch.setenv("RANFUP_DATA_DIR", str(tmp_path))
    assert cli.main(["validate", "--bundle", "stored"]) == 0


# -- subset and retrieve --------------------------------------------------------------


def test_subset_writes_indices(tmp_path, capsys):
    out = make_bundle(tmp_path)
    capsys.readouterr()
    subset_file = tmp_path / "subset.json"
    assert cli.main([
        "subset", "--bundle", str(out), "--n", "3", "--out", str(subset_file),
    ]) == 0
    printed = capsys.readouterr().out.strip()
    assert printed == subset_file.read_text()
    indices = json.loads(printed)
    assert len(indices) == 3
    assert sorted(indices) == indices


def test_retrieve_ranks_pool(tmp_path, capsys):
    out = make_bundle(tmp_path)
    capsys.readouterr()
    record_file = tmp_path / "retrieval.json"
    assert cli.main([
        "retrieve", "--bundle", str(out), "--target", "S000", "--k", "2",
        "--criterion", "lsd", "--out", str(record_file),
    ]) == 0
    record = json.loads(capsys.readouterr().out.strip())
    assert record == json.loads(record_file.read_text())
    assert record["target"] == "S000"
    assert record["criterion"] == "lsd"
    assert record["k"] == 2
    assert "S000" not in record["subjects"]
    assert len(record["subjects"]) == 2


def test_retrieve_unknown_target_is_data_error(tmp_path):
    out = make_bundle(tmp_path)
    assert cli.main([
        "retrieve", "--bundle", str(out), "--target", "GHOST",
    ]) == 2


# -- configuration file precedence -----------------------------------------------------


def write_small_net_config(tmp_path):
    cfg = tmp_path / "small.toml"
    if not cfg.is_file():
        cfg.write_text(
            "\n".join([
                "[ranf]",
                "channels = 8",
                "n_blocks = 1",
                "lstm_hidden = 4",
                "conv_channels = [2, 4, 4]",
                "k_retrieved = 2",
                "tac_hidden = 4",
                "rff_features = 8",
                "itd_head_hidden = 8",
                "",
                "[train]",
                "pretrain_epochs = 1",
                "adapt_epochs = 1",
                "batch_size = 8",
            ])
        )
    return cfg


def test_config_file_supplies_defaults(tmp_path, capsys):
    out = make_bundle(tmp_path)
    cfg = tmp_path / "conf.toml"
    cfg.write_text('n_measured = 4\ncriterion = "lsd"\n')
    capsys.readouterr()
    assert cli.main(["subset", "--bundle", str(out), "--config", str(cfg)]) == 0
    assert len(json.loads(capsys.readouterr().out.strip())) == 4
    assert cli.main([
        "subset", "--bundle", str(out), "--config", str(cfg), "--n", "2",
    ]) == 0
    assert len(json.loads(capsys.readouterr().out.strip())) == 2
    assert cli.main([
        "retrieve", "--bundle", str(out), "--target", "S000",
        "--config", str(cfg), "--k", "1",
    ]) == 0
    assert json.loads(capsys.readouterr().out.strip())["criterion"] == "lsd"
    assert cli.main([
        "retrieve", "--bundle", str(out), "--target", "S000",
        "--config", str(cfg), "--k", "1", "--criterion", "itd",
    ]) == 0
    assert json.loads(capsys.readouterr().out.strip())["criterion"] == "itd_mae"


def test_config_file_missing_is_data_error(tmp_path):
    out = make_bundle(tmp_path)
    assert cli.main([
        "subset", "--bundle", str(out), "--config", str(tmp_path / "nope.toml"),
    ]) == 2


def test_config_file_bad_toml_is_data_error(tmp_path):
    out = make_bundle(tmp_path)
    bad = tmp_path / "bad.toml"
    bad.write_text("[ranf\nchannels = ")
    assert cli.main(["subset", "--bundle", str(out), "--config", str(bad)]) == 2


# -- training pipeline -------------------------------------------------------------------


def test_pipeline_pretrain_adapt_upsample_evaluate(tmp_path, capsys):
    out = make_bundle(tmp_path)
    cfg = write_small_net_config(tmp_path)
    run = tmp_path / "run"
    assert cli.main([
        "pretrain", "--bundle", str(out), "--out", str(run),
        "--config", str(cfg), "--split-sizes", "4,1,1", "--exclude", "",
    ]) == 0
    best = capsys.readouterr().out.strip().splitlines()[-1]
    assert Path(best).is_file()
    sidecar = json.loads(Path(best + ".json").read_text())
    assert sidecar["train_config"]["pretrain_epochs"] == 1
    assert sidecar["config"]["channels"] == 8

    adapted = tmp_path / "adapted.ckpt"
    assert cli.main([
        "adapt", "--bundle", str(out), "--checkpoint", best,
        "--target", "S004", "--out", str(adapted), "--config", str(cfg),
    ]) == 0
    capsys.readouterr()
    net, adapted_sidecar = model_mod.load_model(adapted)
    assert "S004" in net.subject_index
    assert "S004" in adapted_sidecar["retrievals"]

    pred_dir = tmp_path / "pred"
    assert cli.main([
        "upsample", "--bundle", str(out), "--checkpoint", str(adapted),
        "--target", "S004", "--out", str(pred_dir),
    ]) == 0
    capsys.readouterr()
    pred = bundle_mod.load_bundle(pred_dir)
    assert sorted(pred.subjects) == ["S004"]
    assert pred.num_directions == 6

    subset_file = tmp_path / "subset.json"
    cli.main(["subset", "--bundle", str(out), "--n", "3", "--out", str(subset_file)])
    capsys.readouterr()
    assert cli.main([
        "evaluate", "--bundle", str(out), "--pred", str(pred_dir),
        "--target", "S004", "--subset", str(subset_file),
    ]) == 0
    report = json.loads(capsys.readouterr().out.strip())
    assert set(report) >= {"direction_indices", "itd_error_us", "ild_error_db", "lsd_db"}
    measured_indices = set(json.loads(subset_file.read_text()))
    assert measured_indices.isdisjoint(report["direction_indices"])


def test_upsample_without_retrieval_record_is_data_error(tmp_path, capsys):
    out = make_bundle(tmp_path)
    cfg = write_small_net_config(tmp_path)
    run = tmp_path / "run"
    cli.main([
        "pretrain", "--bundle", str(out), "--out", str(run),
        "--config", str(cfg), "--split-sizes", "4,1,1", "--exclude", "",
    ])
    capsys.readouterr()
    assert cli.main([
        "upsample", "--bundle", str(out),
        "--checkpoint", str(run / training.BEST_NAME),
        "--target", "S004", "--out", str(tmp_path / "pred"),
    ]) == 2


def test_experiment_and_report(tmp_path, capsys):
    out = make_bundle(tmp_path)
    cfg = write_small_net_config(tmp_path)
    run = tmp_path / "exp"
    assert cli.main([
        "experiment", "--bundle", str(out), "--out", str(run),
        "--config", str(cfg), "--split-sizes", "4,1,1", "--exclude", "",
        "--n", "3", "--no-baselines",
    ]) == 0
    mean = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(mean) == {"itd_error_us", "ild_error_db", "lsd_db"}
    assert (run / "summary.json").is_file()

    table = tmp_path / "table.csv"
    assert cli.main(["report", "--runs", str(run), "--out", str(table)]) == 0
    lines = table.read_text().splitlines()
    assert lines[0] == "method,itd_us_n3,ild_db_n3,lsd_db_n3"
    assert lines[1].startswith("ranf,")


def test_report_without_summary_is_data_error(tmp_path):
    assert cli.main(["report", "--runs", str(tmp_path)]) == 2
