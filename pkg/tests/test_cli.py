import csv
import json

import numpy as np
import pytest

from lspreg.attack import AttackConfig, evaluate_robust_accuracy
from lspreg.cli import main, sha256_file
from lspreg.data import load_csv
from lspreg.model import init_model, load_model, save_model
from lspreg.train import LOG_COLUMNS, TrainLog

FAST = ["--epochs", "3", "--batch-size", "32", "--hidden", "8", "--m", "4"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--kind", "moons", "--n", "120", "--seed", "2", "--out", str(d / "train.csv")]) == 0
    assert main(["gen", "--kind", "moons", "--n", "60", "--seed", "3", "--out", str(d / "test.csv")]) == 0
    assert main(["train", "--data", str(d / "train.csv"), "--out", str(d / "lsp"), "--name", "LSP",
                 "--lambda", "1", *FAST]) == 0
    assert main(["train", "--data", str(d / "train.csv"), "--out", str(d / "vanilla"),
                 "--name", "vanilla", "--lambda", "0", *FAST]) == 0
    return d


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_writes_manifest(work):
    m = json.loads((work / "train.csv.manifest.json").read_text())
    assert m["command"] == "gen" and m["config"]["n"] == 120 and m["seed"] == 2
    assert m["outputs"]["data"]["sha256"] == sha256_file(work / "train.csv")


def test_train_outputs(work):
    m = json.loads((work / "lsp" / "manifest.json").read_text())
    assert set(m["outputs"]) == {"model", "trainlog"}
    assert m["inputs"]["data"]["fingerprint"] == load_csv(work / "train.csv").fingerprint()
    assert m["config"]["lam"] == 1.0 and m["config"]["attack"]["epsilon"] == 8 / 255
    for key in ("version", "started", "finished", "seed"):
        assert key in m
    header = (work / "lsp" / "trainlog.csv").read_text().splitlines()[0]
    assert header == "epoch,ce,lsp,total,clean_acc,robust_acc,purity,lr"


def test_missing_dataset_exit_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "r")]) == 2
    assert "nope.csv" in capsys.readouterr().err
    assert not (tmp_path / "r").exists()


def test_vanilla_structure_off_completes(work, tmp_path):
    out = tmp_path / "van"
    assert main(["train", "--data", str(work / "train.csv"), "--out", str(out), "--lambda", "0",
                 "--structure", "off", *FAST]) == 0
    assert (out / "model.bin").is_file()


def test_replay_reproduces_checkpoint_hash(work, tmp_path):
    assert main(["replay", str(work / "lsp" / "manifest.json"), "--out", str(tmp_path / "again")]) == 0
    assert sha256_file(tmp_path / "again" / "model.bin") == sha256_file(work / "lsp" / "model.bin")


def test_manifest_as_config_reproduces(work, tmp_path):
    assert main(["train", "--data", str(work / "train.csv"), "--config", str(work / "lsp" / "manifest.json"),
                 "--out", str(tmp_path / "c")]) == 0
    assert sha256_file(tmp_path / "c" / "model.bin") == sha256_file(work / "lsp" / "model.bin")


def test_config_precedence(work, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 2, "hidden": [4], "lam": 0.5, "attack": {"epsilon": 0.05}}))
    assert main(["train", "--data", str(work / "train.csv"), "--config", str(cfg), "--out",
                 str(tmp_path / "a"), "--epochs", "1", "--m", "3"]) == 0
    got = json.loads((tmp_path / "a" / "manifest.json").read_text())["config"]
    assert got["epochs"] == 1 and got["hidden"] == [4] and got["lam"] == 0.5 and got["m"] == 3
    assert got["attack"]["epsilon"] == 0.05 and got["batch_size"] == 128


@pytest.mark.parametrize("argv,cfg", [
    (["train"], {"adversarial": True}),
    (["train"], {"bogus": 1}),
    (["train-adv"], {"mixup_alpha": 0.2}),
    (["train", "--m", "1"], {}),
])
def test_config_conflicts_exit_2(work, tmp_path, argv, cfg):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    out = tmp_path / "o"
    assert main([*argv, "--data", str(work / "train.csv"), "--config", str(p), "--out", str(out)]) == 2
    assert not out.exists()


def test_train_adv_rejects_encoder(work, tmp_path):
    assert main(["train-adv", "--data", str(work / "train.csv"), "--out", str(tmp_path / "o"),
                 "--encoder", str(work / "lsp" / "model.bin")]) == 2


def test_numeric_failure_exit_4(work, tmp_path):
    assert main(["train", "--data", str(work / "train.csv"), "--out", str(tmp_path / "o"),
                 "--lr", "1e300", "--lr-schedule", "", *FAST]) == 4


def test_pretext_then_encoder_training(work, tmp_path):
    assert main(["pretext", "--data", str(work / "train.csv"), "--out", str(tmp_path / "p"),
                 "--epochs", "2", "--pretext-dim", "4"]) == 0
    enc = tmp_path / "p" / "encoder.bin"
    assert main(["train", "--data", str(work / "train.csv"), "--encoder", str(enc),
                 "--out", str(tmp_path / "t"), *FAST]) == 0
    m = json.loads((tmp_path / "t" / "manifest.json").read_text())
    assert m["inputs"]["encoder"]["sha256"] == sha256_file(enc)
    assert main(["replay", str(tmp_path / "t" / "manifest.json"), "--out", str(tmp_path / "t2")]) == 0


def test_train_adv_and_replay(work, tmp_path):
    assert main(["train-adv", "--data", str(work / "train.csv"), "--out", str(tmp_path / "a"),
                 "--epsilon", "0.05", "--step-size", "0.02", "--steps", "3", *FAST]) == 0
    assert (tmp_path / "a" / "nat_bank.bin").is_file()
    assert main(["replay", str(tmp_path / "a" / "manifest.json"), "--out", str(tmp_path / "b")]) == 0


ATTACK = ["--epsilon", "0.1", "--steps", "5", "--step-size", "0.03", "--seed", "4"]


def test_attack_zero_budget(work, tmp_path):
    out = tmp_path / "r.csv"
    assert main(["attack", "--model", str(work / "lsp" / "model.bin"), "--data", str(work / "test.csv"),
                 "--epsilon", "0", "--out", str(out)]) == 0
    (row,) = rows(out)
    assert row["clean_acc"] == row["robust_acc"]


def test_attack_rows_deterministic_and_match_api(work, tmp_path):
    out = tmp_path / "r.csv"
    argv = ["attack", "--model", str(work / "lsp" / "model.bin"), "--data", str(work / "test.csv"),
            "--attack", "pgd", *ATTACK, "--out", str(out)]
    assert main(argv) == 0 and main(argv) == 0
    a, b = rows(out)
    assert a == b
    cfg = AttackConfig(epsilon=0.1, steps=5, step_size=0.03, seed=4)
    clean, robust = evaluate_robust_accuracy(load_model(work / "lsp" / "model.bin"),
                                             load_csv(work / "test.csv"), cfg, "pgd")
    assert float(a["clean_acc"]) == clean and float(a["robust_acc"]) == robust
    assert a["manifest"].endswith("manifest.json") and a["name"] == "LSP"


def test_attack_version_mismatch_exit_3(work, tmp_path):
    blob = bytearray((work / "lsp" / "model.bin").read_bytes())
    blob[4] = 9
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(blob))
    assert main(["attack", "--model", str(bad), "--data", str(work / "test.csv"),
                 "--out", str(tmp_path / "r.csv")]) == 3


def test_attack_fgsm_l2_is_config_error(work, tmp_path):
    assert main(["attack", "--model", str(work / "lsp" / "model.bin"), "--data", str(work / "test.csv"),
                 "--attack", "fgsm", "--norm", "l2", "--out", str(tmp_path / "r.csv")]) == 2


def test_certify_linear_model_analytic(work, tmp_path):
    model = init_model([2, 2], 5)
    save_model(model, tmp_path / "lin.bin")
    out = tmp_path / "cert.csv"
    assert main(["certify", "--model", str(tmp_path / "lin.bin"), "--data", str(work / "test.csv"),
                 "--mode", "analytic", "--radius-probes", "500", "--out", str(out)]) == 0
    got = rows(out)
    assert len(got) == 60 and all(r["falsified"] == "False" for r in got)
    assert all(r["sound"] == "True" and r["norm"] == "l2" for r in got)
    assert (tmp_path / "cert.csv.manifest.json").is_file()


def test_certify_zero_probes_exit_2(work, tmp_path):
    assert main(["certify", "--model", str(work / "lsp" / "model.bin"), "--data", str(work / "test.csv"),
                 "--radius-probes", "0", "--out", str(tmp_path / "c.csv")]) == 2


def test_certify_empirical_radius_dominates(work, tmp_path):
    base = ["certify", "--model", str(work / "lsp" / "model.bin"), "--data", str(work / "test.csv"),
            "--limit", "10", "--radius-probes", "50"]
    assert main([*base, "--mode", "analytic", "--out", str(tmp_path / "a.csv")]) == 0
    assert main([*base, "--mode", "empirical", "--out", str(tmp_path / "e.csv")]) == 0
    for a, e in zip(rows(tmp_path / "a.csv"), rows(tmp_path / "e.csv")):
        assert float(e["certified_radius"]) >= float(a["certified_radius"])


def test_report_single_run(work, tmp_path, capsys):
    assert main(["report", str(work / "vanilla"), "--out", str(tmp_path / "rep")]) == 0
    lines = (tmp_path / "rep" / "report.md").read_text().splitlines()
    assert lines[0] == "| Method | Clean | FGSM | PGD | CW |" and len(lines) == 3


def test_report_two_runs_and_curves(work, tmp_path):
    for attack in ("fgsm", "pgd", "cw"):
        for run in ("vanilla", "lsp"):
            assert main(["attack", "--model", str(work / run / "model.bin"), "--data", str(work / "test.csv"),
                         "--attack", attack, *ATTACK, "--out", str(work / run)]) == 0
    rep = tmp_path / "rep"
    assert main(["report", str(work / "vanilla"), str(work / "lsp"), "--out", str(rep)]) == 0
    lines = (rep / "report.md").read_text().splitlines()
    assert [l.split("|")[1].strip() for l in lines[2:]] == ["vanilla", "LSP"]
    assert "-" not in lines[2].split("|")[2:6]
    raw = TrainLog.from_csv(work / "vanilla" / "trainlog.csv").column("lsp")
    curve = TrainLog.from_csv(rep / "vanilla" / "curves.csv").column("lsp")
    assert curve.tobytes() == raw.tobytes()
    assert (rep / "vanilla" / "curves.csv").read_text().splitlines()[0] == ",".join(LOG_COLUMNS)
    for name in ("lsp", "ce", "purity", "robust_acc"):
        assert (rep / f"{name}_curves.png").read_bytes()[:4] == b"\x89PNG"


def test_report_refuses_missing_and_orphaned_logs(work, tmp_path, capsys):
    empty = tmp_path / "empty_run"
    empty.mkdir()
    assert main(["report", str(empty), "--out", str(tmp_path / "r1")]) == 3
    assert "empty_run" in capsys.readouterr().err
    orphan = tmp_path / "orphan"
    orphan.mkdir()
    (orphan / "trainlog.csv").write_bytes((work / "lsp" / "trainlog.csv").read_bytes())
    assert main(["report", str(orphan), "--out", str(tmp_path / "r2")]) == 3


def test_argparse_errors_exit_2():
    assert main(["attack", "--attack", "deepfool"]) == 2
