import json
import logging

import pytest
import torch
from click.testing import CliRunner

from asem import checkpoint as ckpt_io
from asem.cli import ChatSession, main
from asem.config import DecodeConfig
from asem.corpus import synthetic_raw_rows
from asem.evaluation import REPORT_KEYS, predict
from asem.training import restore


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


CONFIG = """\
dataset_tag: ED
paths:
  corpus: mapped.jsonl
  embeddings: {embeddings}
  out_dir: out
model: {{embed_dim: 16, d_model: 16, n_layers: 1, n_heads: 2, ffn_dim: 32, dropout: 0.0}}
train: {{learning_rate: 0.001, max_steps: {steps}, batch_size: 8, eval_every: 3}}
decoding: {{width: 2, max_new_tokens: 5}}
"""


@pytest.fixture
def workdir(tmp_path):
    write_jsonl(tmp_path / "raw.jsonl", synthetic_raw_rows(24, seed=2))
    res = CliRunner().invoke(main, ["prep", str(tmp_path / "raw.jsonl"), str(tmp_path / "mapped.jsonl")])
    assert res.exit_code == 0, res.output
    (tmp_path / "run.yaml").write_text(CONFIG.format(embeddings="none", steps=6))
    return tmp_path


@pytest.fixture
def trained_dir(workdir):
    res = CliRunner().invoke(main, ["train", "--config", str(workdir / "run.yaml")])
    assert res.exit_code == 0, res.output
    return workdir


def test_prep_maps_and_counts(tmp_path):
    write_jsonl(tmp_path / "raw.jsonl", [
        {"conversation_id": "c1", "turn_index": 0, "speaker": "a", "text": "I was terrified.",
         "fine_emotion": "terrified"},
        {"conversation_id": "c1", "turn_index": 1, "speaker": "b", "text": "Oh no!", "fine_emotion": "terrified"},
    ])
    out = tmp_path / "m.jsonl"
    res = CliRunner().invoke(main, ["prep", str(tmp_path / "raw.jsonl"), str(out)])
    assert res.exit_code == 0, res.output
    rec = json.loads(out.read_text())
    assert rec["emotion"] == "fear" and rec["sentiment"] == "negative"
    assert "fear" in res.output and "wrote 1 examples" in res.output


def test_prep_deterministic(workdir):
    first = (workdir / "mapped.jsonl").read_bytes()
    res = CliRunner().invoke(main, ["prep", str(workdir / "raw.jsonl"), str(workdir / "again.jsonl")])
    assert res.exit_code == 0
    assert (workdir / "again.jsonl").read_bytes() == first


def test_prep_rejects_empty_and_unknown(tmp_path):
    (tmp_path / "empty.jsonl").write_text("")
    out = tmp_path / "out.jsonl"
    res = CliRunner().invoke(main, ["prep", str(tmp_path / "empty.jsonl"), str(out)])
    assert res.exit_code != 0 and "empty" in res.output
    assert not out.exists()
    write_jsonl(tmp_path / "bad.jsonl", [
        {"conversation_id": "c", "turn_index": i, "speaker": "ab"[i], "text": "hi", "fine_emotion": "bewildered"}
        for i in range(2)])
    res = CliRunner().invoke(main, ["prep", str(tmp_path / "bad.jsonl"), str(out)])
    assert res.exit_code != 0 and "bewildered" in res.output
    assert not out.exists()


def test_train_outputs_and_random_init_logged(workdir, caplog):
    with caplog.at_level(logging.INFO, logger="asem"):
        res = CliRunner().invoke(main, ["train", "--config", str(workdir / "run.yaml")])
    assert res.exit_code == 0, res.output
    assert "random initialisation" in caplog.text
    out = workdir / "out"
    assert {p.name for p in out.iterdir()} >= {"best.ckpt", "last.ckpt", "train_log.jsonl", "config.json"}
    log = [json.loads(l) for l in (out / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(7))
    assert ckpt_io.load(out / "last.ckpt").step == 6


def test_train_seed_override_and_determinism(workdir):
    runner = CliRunner()
    for name in ("a", "b"):
        assert runner.invoke(main, ["train", "--config", str(workdir / "run.yaml"), "--seed", "4",
                                    "--out", str(workdir / name)]).exit_code == 0
    a = (workdir / "a" / "last.ckpt").read_bytes()
    assert a == (workdir / "b" / "last.ckpt").read_bytes()
    assert ckpt_io.from_bytes(a).train_config.seed == 4


def test_train_resume_continues_step(trained_dir):
    (trained_dir / "run.yaml").write_text(CONFIG.format(embeddings="none", steps=9))
    res = CliRunner().invoke(main, ["train", "--config", str(trained_dir / "run.yaml"),
                                    "--resume", str(trained_dir / "out" / "last.ckpt")])
    assert res.exit_code == 0, res.output
    assert ckpt_io.load(trained_dir / "out" / "last.ckpt").step == 9
    steps = [json.loads(l)["step"] for l in (trained_dir / "out" / "train_log.jsonl").read_text().splitlines()]
    assert steps == list(range(10))


def test_train_bad_config_has_no_side_effects(workdir):
    (workdir / "bad.yaml").write_text(CONFIG.format(embeddings="none", steps=6) + "surprise_key: 1\n")
    res = CliRunner().invoke(main, ["train", "--config", str(workdir / "bad.yaml")])
    assert res.exit_code != 0 and "surprise_key" in res.output
    (workdir / "missing.yaml").write_text(CONFIG.format(embeddings="vectors.txt", steps=6))
    res = CliRunner().invoke(main, ["train", "--config", str(workdir / "missing.yaml")])
    assert res.exit_code != 0 and "vectors.txt" in res.output
    assert not (workdir / "out").exists()


def test_eval_report_schema_and_determinism(trained_dir):
    runner = CliRunner()
    args = ["eval", "--checkpoint", str(trained_dir / "out" / "best.ckpt"), "--data", str(trained_dir / "mapped.jsonl")]
    assert runner.invoke(main, args + ["--out", str(trained_dir / "r1.json")]).exit_code == 0
    assert runner.invoke(main, args + ["--out", str(trained_dir / "r2.json")]).exit_code == 0
    r1 = (trained_dir / "r1.json").read_text()
    assert r1 == (trained_dir / "r2.json").read_text()
    report = json.loads(r1)
    assert tuple(report) == REPORT_KEYS
    assert report["ppl"] >= 1 and 0 <= report["bleu"] <= 1
    cm = report["confusion"]
    assert [sum(r) for r in cm] == [row["support"] for row in report["per_class"]]


def test_generate(trained_dir):
    res = CliRunner().invoke(main, ["generate", "--checkpoint", str(trained_dir / "out" / "best.ckpt"),
                                    "--turn", "hello there", "--turn", "i feel awful", "--n-best", "2"])
    assert res.exit_code == 0, res.output
    rec = json.loads(res.output)
    assert len(rec["responses"]) == 2 and rec["emotion"]
    res = CliRunner().invoke(main, ["generate", "--checkpoint", str(trained_dir / "out" / "best.ckpt")])
    assert res.exit_code != 0


def test_ablate_writes_report(workdir):
    res = CliRunner().invoke(main, ["ablate", "--config", str(workdir / "run.yaml"), "no_sae", "one_enc_dec",
                                    "--out", str(workdir / "abl.jsonl")])
    assert res.exit_code == 0, res.output
    recs = [json.loads(l) for l in (workdir / "abl.jsonl").read_text().splitlines()]
    assert [r["variant"] for r in recs] == ["full", "no_sae", "one_enc_dec"]
    assert recs[2]["n_params"] < recs[0]["n_params"]
    res = CliRunner().invoke(main, ["ablate", "--config", str(workdir / "run.yaml"), "bogus"])
    assert res.exit_code != 0


def test_chat_quit_immediately(trained_dir):
    res = CliRunner().invoke(main, ["chat", "--checkpoint", str(trained_dir / "out" / "best.ckpt")], input="/quit\n")
    assert res.exit_code == 0


def test_chat_session_flow(trained_dir):
    res = CliRunner().invoke(main, ["chat", "--checkpoint", str(trained_dir / "out" / "best.ckpt"),
                                    "--max-new-tokens", "4"], input="i am sad\n/reset\nhi\n/quit\n")
    assert res.exit_code == 0, res.output
    assert res.output.count("bot> ") == 2 and "top-3" in res.output and "context cleared" in res.output


def test_chat_context_growth_and_consistency(trained_dir):
    ckpt = ckpt_io.load(trained_dir / "out" / "best.ckpt")
    model, _ = restore(ckpt)
    session = ChatSession(model, ckpt.vocab, ckpt.schema, DecodeConfig(width=2, max_new_tokens=4))
    for i, text in enumerate(["i am sad", "my dog died", "thanks"]):
        batch = session.batch_for(text.split())
        (expected,) = predict(model, batch)
        out = session.respond(text)
        assert len(session.turns) == 2 * (i + 1)
        assert session.turns[-2] == text.split()
        assert out["emotion"] == ckpt.schema.emotions[expected.emotion]
        assert out["top3"][0][0] == out["emotion"]
    session.reset()
    assert session.turns == []
    with pytest.raises(ValueError):
        session.respond("   ")


@pytest.mark.parametrize("name", ["desk.yaml", "full.yaml"])
def test_shipped_configs_validate(name):
    import yaml
    from pathlib import Path
    from asem.config import RunConfig
    path = Path(__file__).parents[1] / "configs" / name
    cfg = RunConfig.model_validate(yaml.safe_load(path.read_text()))
    assert cfg.model.d_model % cfg.model.n_heads == 0
