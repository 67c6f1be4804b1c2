from __future__ import annotations

import json
from dataclasses import replace

import pytest
from conftest import tiny_config

from tilt.cli import ConfigMismatchError, cmd_eval, cmd_finetune, cmd_pretrain, main, per_example_scores
from tilt.layout import load_dataset, save_dataset
from tilt.metrics import aggregate
from tilt.synth import synth_corpus
from tilt.training import RunConfig


@pytest.fixture
def workspace(tmp_path):
    save_dataset(synth_corpus("form", 4, 0), tmp_path / "train.jsonl")
    cfg = RunConfig(
        model=tiny_config(), steps=4, batch_size=2, lr=1e-3, train_paths=["train.jsonl"], eval_paths=["train.jsonl"]
    )
    (tmp_path / "run.json").write_text(json.dumps(cfg.to_dict()))
    return tmp_path


def test_pretrain_same_seed_same_bytes(workspace):
    cfg = RunConfig.from_file(workspace / "run.json")
    cmd_pretrain(cfg, workspace / "a.ckpt")
    cmd_pretrain(cfg, workspace / "b.ckpt")
    assert (workspace / "a.ckpt").read_bytes() == (workspace / "b.ckpt").read_bytes()
    cmd_pretrain(replace(cfg, seed=1), workspace / "c.ckpt")
    assert (workspace / "c.ckpt").read_bytes() != (workspace / "a.ckpt").read_bytes()


def test_empty_pretraining_corpus(workspace):
    save_dataset([], workspace / "empty.jsonl")
    cfg = replace(RunConfig.from_file(workspace / "run.json"), train_paths=[str(workspace / "empty.jsonl")])
    with pytest.raises(ValueError, match="empty"):
        cmd_pretrain(cfg, workspace / "x.ckpt")


def test_finetune_rejects_mismatched_init(workspace):
    cfg = RunConfig.from_file(workspace / "run.json")
    cmd_pretrain(cfg, workspace / "base.ckpt")
    other = replace(cfg, model=tiny_config(d_ff=48, num_heads=4), init_checkpoint=str(workspace / "base.ckpt"))
    with pytest.raises(ConfigMismatchError, match="d_ff, num_heads"):
        cmd_finetune(other, workspace / "ft.ckpt")
    cmd_finetune(replace(cfg, init_checkpoint=str(workspace / "base.ckpt")), workspace / "ft.ckpt")


def test_eval_unknown_metric(workspace):
    with pytest.raises(ValueError, match="bleu"):
        cmd_eval(workspace / "nothing.ckpt", [str(workspace / "train.jsonl")], "bleu")


def test_eval_report_matches_reaggregation(workspace):
    cfg = RunConfig.from_file(workspace / "run.json")
    cmd_finetune(cfg, workspace / "ft.ckpt")
    for metric in ("anls", "accuracy", "f1"):
        report = cmd_eval(workspace / "ft.ckpt", cfg.eval_paths, metric)
        assert report.value == aggregate(metric, report.records)
        assert len(per_example_scores(report)) == len(report.records) == 16


def test_main_end_to_end(workspace, capsys):
    cfg = str(workspace / "run.json")
    ckpt = str(workspace / "m.ckpt")
    assert main(["synth", "--kind", "layout-qa", "-n", "3", "--out", str(workspace / "s.jsonl")]) == 0
    assert len(list(load_dataset(workspace / "s.jsonl"))) == 3
    assert main(["pretrain", "--config", cfg, "--out", ckpt, "--scale", "0.5"]) == 0
    steps = [json.loads(line)["step"] for line in open(ckpt + ".log.jsonl")]
    assert steps == [1, 2]
    assert (workspace / "m.loss.png").stat().st_size > 0
    assert main(["finetune", "--config", cfg, "--init", ckpt, "--out", ckpt, "--seed", "3"]) == 0
    report = str(workspace / "rep.json")
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt, "--metric", "anls", "--out", report]) == 0
    for suffix in (".json", ".tsv", ".png"):
        assert (workspace / ("rep" + suffix)).stat().st_size > 0
    header = (workspace / "rep.tsv").read_text().splitlines()[0]
    assert header == "doc\tfield\tpred\tgolds"
    capsys.readouterr()
    assert main(["predict", "--config", cfg, "--checkpoint", ckpt]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "doc\ttask\tprompt\tpred" and len(rows) == 17


def test_main_reports_errors(workspace, capsys):
    rc = main(["eval", "--config", str(workspace / "run.json"), "--checkpoint", "x", "--metric", "bleu"])
    assert rc == 2
    assert "unknown metric" in capsys.readouterr().err
    assert main(["pretrain", "--config", str(workspace / "missing.json")]) == 2
