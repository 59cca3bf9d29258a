"""Config file handling and the train/embed/eval/gradcheck subcommands."""

import dataclasses
import json
import os

import numpy as np
import pytest

import grle.config as C
import grle.data as D
from grle.cli import run_cli
from grle.model import LoraConfig


# ---------------------------------------------------------------------------
# Config parsing and echo


def test_default_config_round_trips(tmp_path):
    cfg = C.RunConfig()
    path = str(tmp_path / "run.ini")
    C.write_config(cfg, path)
    assert C.load_config(path) == cfg


def test_modified_config_round_trips(tmp_path):
    cfg = C.RunConfig(
        lora=LoraConfig(r=4, alpha=8.0, dropout=0.25, targets=("q_proj", "v_proj")),
        train=dataclasses.replace(
            C.RunConfig().train,
            strategy="cl_dpo",
            learning_rate=3e-3,
            micro_batch_size=4,
            cross_batch_negatives=True,
        ),
        data=C.DataConfig(n_train=12, n_eval=3, n_keys=6),
        output_dir="elsewhere",
    )
    path = str(tmp_path / "run.ini")
    C.write_config(cfg, path)
    assert C.load_config(path) == cfg


def test_json_config_accepted(tmp_path):
    path = str(tmp_path / "run.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "train": {"strategy": "cl", "learning_rate": 0.008},
                "lora": {"enabled": True, "r": 2, "targets": ["q_proj"]},
            },
            fh,
        )
    cfg = C.load_config(path)
    assert cfg.train.strategy == "cl"
    assert cfg.train.learning_rate == 0.008
    assert cfg.lora == LoraConfig(r=2, targets=("q_proj",))


def test_json_detected_by_content(tmp_path):
    path = str(tmp_path / "run.cfg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write('{"train": {"seed": 9}}')
    assert C.load_config(path).train.seed == 9


def test_partial_ini_uses_defaults(tmp_path):
    path = str(tmp_path / "run.ini")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("[train]\nseed = 3\n")
    cfg = C.load_config(path)
    assert cfg.train.seed == 3
    assert cfg.model == C.RunConfig().model
    assert cfg.lora is None


@pytest.mark.parametrize(
    "mapping, fragment",
    [
        ({"trian": {}}, "unknown config section"),
        ({"train": {"lr": "1"}}, "unknown config key train.lr"),
        ({"train": {"batch_size": "many"}}, "train.batch_size"),
        ({"model": {"d_model": "4.5"}}, "model.d_model"),
        ({"train": {"stop_gen_grad": "sometimes"}}, "train.stop_gen_grad"),
    ],
)
def test_bad_mappings_name_the_key(mapping, fragment):
    with pytest.raises(ValueError, match=fragment.replace("[", "\\[")):
        C.config_from_mapping(mapping)


def test_bool_spellings():
    cfg = C.config_from_mapping({"train": {"stop_gen_grad": "Yes"}})
    assert cfg.train.stop_gen_grad is True
    cfg = C.config_from_mapping({"train": {"stop_gen_grad": "off"}})
    assert cfg.train.stop_gen_grad is False


def test_optional_none_fields():
    cfg = C.config_from_mapping(
        {"train": {"micro_batch_size": "none"}, "data": {"train_path": "none"}}
    )
    assert cfg.train.micro_batch_size is None
    assert cfg.data.train_path is None


def test_validate_checks_referenced_paths(tmp_path):
    cfg = C.RunConfig(
        data=C.DataConfig(train_path=str(tmp_path / "absent.jsonl")),
        output_dir=str(tmp_path / "out"),
    )
    with pytest.raises(ValueError, match="train_path"):
        cfg.validate()


def test_validate_checks_corpus_files(tmp_path):
    corpus_dir = tmp_path / "corpus"
    corpus_dir.mkdir()
    (corpus_dir / "documents.jsonl").write_text("")
    cfg = C.RunConfig(
        data=C.DataConfig(eval_corpus=str(corpus_dir)),
        output_dir=str(tmp_path / "out"),
    )
    with pytest.raises(ValueError, match="queries.jsonl"):
        cfg.validate()


def test_validate_creates_output_dir(tmp_path):
    out = tmp_path / "a" / "b"
    C.RunConfig(output_dir=str(out)).validate()
    assert out.is_dir()


# ---------------------------------------------------------------------------
# CLI plumbing


def write_tiny_config(tmp_path, **train_overrides):
    train = {
        "strategy": "cl",
        "learning_rate": 0.008,
        "batch_size": 8,
        "epochs": 1,
        "seed": 0,
        "weight_decay": 0.0,
    }
    train.update(train_overrides)
    mapping = {
        "model": {"d_model": 32, "n_layers": 1, "n_heads": 4, "d_ff": 64},
        "train": train,
        "data": {"n_train": 32, "n_eval": 6, "n_keys": 8},
        "run": {"output_dir": str(tmp_path / "out")},
    }
    path = str(tmp_path / "run.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(mapping, fh)
    return path


def test_train_writes_artifacts(tmp_path, capsys):
    path = write_tiny_config(tmp_path)
    assert run_cli(["train", "--config", path]) == 0
    out_dir = tmp_path / "out"
    assert (out_dir / "metrics.jsonl").is_file()
    assert (out_dir / "checkpoint" / "manifest.json").is_file()
    echoed = C.load_config(str(out_dir / "config.ini"))
    assert echoed.train.strategy == "cl"
    assert "final loss" in capsys.readouterr().out


def test_train_flag_overrides_are_echoed(tmp_path):
    path = write_tiny_config(tmp_path)
    assert run_cli(["train", "--config", path, "--strategy", "cl_sft", "--seed", "5"]) == 0
    echoed = C.load_config(str(tmp_path / "out" / "config.ini"))
    assert echoed.train.strategy == "cl_sft"
    assert echoed.train.seed == 5


def test_train_twice_byte_identical_metrics(tmp_path):
    path = write_tiny_config(tmp_path)
    assert run_cli(["train", "--config", path, "--output-dir", str(tmp_path / "r1")]) == 0
    assert run_cli(["train", "--config", path, "--output-dir", str(tmp_path / "r2")]) == 0
    a = (tmp_path / "r1" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "r2" / "metrics.jsonl").read_bytes()
    assert a == b


def test_embed_writes_one_line_per_input(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path)
    assert run_cli(["train", "--config", cfg]) == 0
    ckpt = str(tmp_path / "out" / "checkpoint")
    inp = tmp_path / "texts.jsonl"
    with open(inp, "w", encoding="utf-8") as fh:
        for i in range(3):
            fh.write(json.dumps({"id": f"t{i}", "text": f"p abc {i}"}) + "\n")
    out = tmp_path / "embs.jsonl"
    assert run_cli(["embed", "--checkpoint", ckpt, "--input", str(inp), "--output", str(out)]) == 0
    rows = [json.loads(line) for line in open(out, encoding="utf-8")]
    assert [r["id"] for r in rows] == ["t0", "t1", "t2"]
    assert all(len(r["embedding"]) == 32 for r in rows)
    assert all(isinstance(x, float) for x in rows[0]["embedding"])


def test_eval_prints_main_score_and_writes_report(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path)
    assert run_cli(["train", "--config", cfg]) == 0
    ckpt = str(tmp_path / "out" / "checkpoint")
    _, corpus = D.make_synthetic_task(seed=0, n_train=32, n_eval=6, n_keys=8)
    corpus_dir = str(tmp_path / "corpus")
    D.write_corpus(corpus, corpus_dir)
    assert run_cli(["eval", "--checkpoint", ckpt, "--corpus", corpus_dir]) == 0
    printed = capsys.readouterr().out.strip().splitlines()[-1]
    score = float(printed)
    report = json.loads((tmp_path / "out" / "checkpoint" / "eval-report.json").read_text())
    assert report["metrics"]["ndcg@10"] == score
    assert report["main_metric"] == "ndcg@10"


def test_eval_repeats_identically(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path)
    assert run_cli(["train", "--config", cfg]) == 0
    ckpt = str(tmp_path / "out" / "checkpoint")
    _, corpus = D.make_synthetic_task(seed=0, n_train=32, n_eval=6, n_keys=8)
    corpus_dir = str(tmp_path / "corpus")
    D.write_corpus(corpus, corpus_dir)
    argv = ["eval", "--checkpoint", ckpt, "--corpus", corpus_dir]
    assert run_cli(argv) == 0
    first = capsys.readouterr().out.strip().splitlines()[-1]
    assert run_cli(argv) == 0
    second = capsys.readouterr().out.strip().splitlines()[-1]
    assert first == second


def test_gradcheck_passes_on_tiny_config(tmp_path, capsys):
    path = write_tiny_config(tmp_path)
    assert run_cli(["gradcheck", "--config", path]) == 0
    out = capsys.readouterr().out
    assert "fd grl" in out
    assert "all gradient checks passed" in out


# ---------------------------------------------------------------------------
# Error paths and exit codes


def test_unknown_subcommand_exits_2(capsys):
    assert run_cli(["frobnicate"]) == 2


def test_missing_command_exits_2(capsys):
    assert run_cli([]) == 2


def test_missing_config_file_exits_2(tmp_path, capsys):
    assert run_cli(["train", "--config", str(tmp_path / "absent.ini")]) == 2


def test_bad_config_key_named_in_error(tmp_path, capsys):
    path = str(tmp_path / "bad.ini")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("[train]\nlearning_rat = 0.1\n")
    assert run_cli(["train", "--config", path]) == 2
    assert "train.learning_rat" in capsys.readouterr().err


def test_malformed_embed_input_exits_2(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path)
    assert run_cli(["train", "--config", cfg]) == 0
    ckpt = str(tmp_path / "out" / "checkpoint")
    inp = tmp_path / "texts.jsonl"
    inp.write_text('{"id": "a"}\n')
    assert run_cli(["embed", "--checkpoint", ckpt, "--input", str(inp), "--output", str(tmp_path / "e.jsonl")]) == 2
    assert '"id" and "text"' in capsys.readouterr().err


def test_unknown_metric_exits_2(tmp_path, capsys):
    cfg = write_tiny_config(tmp_path)
    assert run_cli(["train", "--config", cfg]) == 0
    ckpt = str(tmp_path / "out" / "checkpoint")
    _, corpus = D.make_synthetic_task(seed=0, n_train=32, n_eval=6, n_keys=8)
    corpus_dir = str(tmp_path / "corpus")
    D.write_corpus(corpus, corpus_dir)
    assert run_cli(["eval", "--checkpoint", ckpt, "--corpus", corpus_dir, "--metrics", "frobnitz"]) == 2
    assert "unknown metric" in capsys.readouterr().err
