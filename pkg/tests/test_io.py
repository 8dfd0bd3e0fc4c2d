import json
import subprocess
import sys

import numpy as np
import pytest

from dynapath.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dynapath.cli import main
from dynapath.config import ConfigError, RunConfig, load_config, save_config
from dynapath.model import ModelConfig
from dynapath.runner import MetricsWriter, read_metrics, run_training, train_steps
from dynapath.tasks import TaskSpec
from dynapath.trainer import RewardSpec, TrainerConfig, TrainState

SMALL = ModelConfig(vocab_size=16, e=16, d_ff=32, L_enc=2, L_dec=2, n_heads=2, max_len=12)


def cfg_small(**kw):
    tr = TrainerConfig(reward=RewardSpec(), steps=8, batch_size=4, warmup_steps=2, eval_every=4, eval_size=16, checkpoint_every=4)
    base = RunConfig(model=SMALL, task=TaskSpec(kind="copy", n_min=3, n_max=6), trainer=tr, seed=1)
    return base.with_overrides(**kw) if kw else base


@pytest.fixture()
def config_file(tmp_path):
    path = tmp_path / "cfg.json"
    save_config(cfg_small(), path)
    return path


# ---------------------------------------------------------------- config


def test_config_round_trip(config_file):
    cfg = load_config(config_file)
    assert cfg == cfg_small()
    assert cfg.digest() == cfg_small().digest()
    assert cfg.digest() != cfg_small(seed=2).digest()


@pytest.mark.parametrize(
    "patch,field",
    [
        ({"model": {"e": "big"}}, "model.e"),
        ({"model": {"e": 10, "n_heads": 4}}, "model"),
        ({"task": {"kind": "sort"}}, "task"),
        ({"trainer": {"reward": {"lambda_mode": "magic"}}}, "trainer.reward.lambda_mode"),
        ({"trainer": {"steps": 0}}, "trainer.steps"),
        ({"trainer": {"bogus": 1}}, "trainer.bogus"),
        ({"decision_space": "everything"}, "decision_space"),
        ({"task": {"vocab_size": 20}}, "task.vocab_size"),
        ({"task": {"n_max": 40}}, "model.max_len"),
    ],
)
def test_config_errors_name_the_field(patch, field):
    d = cfg_small().to_dict()
    for k, v in patch.items():
        if isinstance(v, dict):
            for k2, v2 in v.items():
                if isinstance(v2, dict):
                    d[k][k2].update(v2)
                else:
                    d[k][k2] = v2
        else:
            d[k] = v
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        RunConfig.from_dict(d)


# ---------------------------------------------------------------- checkpoint


def _state(cfg):
    return TrainState.create(cfg.model, cfg.trainer, cfg.decision_space, cfg.seed, cfg.task.seed)


def test_checkpoint_round_trip_continues_bit_identically(tmp_path):
    cfg = cfg_small()
    a = _state(cfg)
    train_steps(a, cfg, 5)
    save_checkpoint(a, cfg, tmp_path / "mid.sdck")
    cont = train_steps(a, cfg, 10)
    b, cfg_b = load_checkpoint(tmp_path / "mid.sdck", cfg)
    assert cfg_b == cfg and b.step == 5
    assert train_steps(b, cfg, 10) == cont
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)


def test_checkpoint_header(tmp_path):
    cfg = cfg_small()
    save_checkpoint(_state(cfg), cfg, tmp_path / "c.sdck")
    raw = (tmp_path / "c.sdck").read_bytes()
    assert raw[:4] == b"SDCK"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert raw[8:40] == cfg.digest()


def test_corrupted_header_refused(tmp_path):
    cfg = cfg_small()
    path = tmp_path / "c.sdck"
    save_checkpoint(_state(cfg), cfg, path)
    raw = bytearray(path.read_bytes())
    for pos, what in [(0, "magic"), (20, "header checksum"), (len(raw) - 100, "checksum")]:
        bad = bytearray(raw)
        bad[pos] ^= 0xFF
        path.write_bytes(bytes(bad))
        with pytest.raises(CheckpointError, match=what):
            load_checkpoint(path)


def test_truncated_and_mismatched_refused(tmp_path):
    cfg = cfg_small()
    path = tmp_path / "c.sdck"
    save_checkpoint(_state(cfg), cfg, path)
    raw = path.read_bytes()
    (tmp_path / "t.sdck").write_bytes(raw[:-10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "t.sdck")
    (tmp_path / "h.sdck").write_bytes(raw[:10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "h.sdck")
    with pytest.raises(CheckpointError, match="digest"):
        load_checkpoint(path, cfg_small(seed=9))


# ---------------------------------------------------------------- metrics / run dir


def test_metrics_stream(tmp_path):
    w = MetricsWriter(tmp_path / "m.jsonl")
    w.write({"step": 1, "loss": 0.5})
    with pytest.raises(ValueError):
        w.write({"step": 1})
    w.close()
    with open(tmp_path / "m.jsonl", "a") as fh:
        fh.write('{"step": 2, "lo')
    recs = read_metrics(tmp_path / "m.jsonl")
    assert len(recs) == 1 and recs[0]["loss"] == 0.5 and recs[0]["lambda"] is None


def test_run_directory_contents_and_determinism(tmp_path):
    cfg = cfg_small()
    run_training(cfg, tmp_path / "a")
    run_training(cfg, tmp_path / "b")
    names = {p.name for p in (tmp_path / "a").iterdir()}
    assert {"config.json", "metrics.jsonl", "summary.json", "final.sdck", "ckpt-4.sdck", "ckpt-8.sdck"} <= names
    ma, mb = (tmp_path / "a" / "metrics.jsonl").read_bytes(), (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert ma == mb
    recs = read_metrics(tmp_path / "a" / "metrics.jsonl")
    assert [r["step"] for r in recs] == list(range(1, 9))
    assert recs[3]["eval_accuracy"] is not None and recs[2]["eval_accuracy"] is None
    assert load_config(tmp_path / "a" / "config.json") == cfg
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert {"greedy", "all_keep", "c"} <= set(summary)


def test_resume_from_periodic_checkpoint_matches_uninterrupted(tmp_path):
    cfg = cfg_small()
    run_training(cfg, tmp_path / "full")
    state, _ = load_checkpoint(tmp_path / "full" / "ckpt-4.sdck")
    part = tmp_path / "part"
    part.mkdir()
    lines = (tmp_path / "full" / "metrics.jsonl").read_text().splitlines(keepends=True)
    (part / "metrics.jsonl").write_text("".join(lines[:4]))
    run_training(cfg, part, state=state)
    assert (part / "metrics.jsonl").read_bytes() == (tmp_path / "full" / "metrics.jsonl").read_bytes()


# ---------------------------------------------------------------- CLI


def test_cli_train_eval(tmp_path, config_file, capsys):
    assert main(["train", str(config_file), "--out-dir", str(tmp_path / "run")]) == 0
    capsys.readouterr()
    ckpt = tmp_path / "run" / "final.sdck"
    assert main(["eval", str(ckpt)]) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(["eval", str(ckpt)]) == 0
    assert json.loads(capsys.readouterr().out) == first
    assert {"token_accuracy", "exact_match", "fraction", "att", "ffn", "token"} <= set(first)
    assert main(["eval", str(ckpt), "--task", "reverse", "--decisions", "all-keep"]) == 0
    rev = json.loads(capsys.readouterr().out)
    assert rev["task"]["kind"] == "reverse" and rev["fraction"] == 1.0


def test_cli_train_token_only_space(tmp_path, capsys):
    path = tmp_path / "t.json"
    save_config(cfg_small(decision_space="token_only"), path)
    assert main(["train", str(path), "--out-dir", str(tmp_path / "r")]) == 0
    recs = read_metrics(tmp_path / "r" / "metrics.jsonl")
    assert all(r["att"] == 0 and r["ffn"] == 0 for r in recs)


def test_cli_profile(config_file, capsys):
    assert main(["profile", str(config_file), "--decisions", "all-keep"]) == 0
    assert json.loads(capsys.readouterr().out)["fraction"] == 1.0
    assert main(["profile", str(config_file), "--decisions", "enumerate", "--verify", "--n-src", "6", "--n-tgt", "4"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["paths"] == 448 and len(out["rows"]) == 448
    fr = [r["fraction"] for r in out["rows"]]
    assert fr == sorted(fr) and all(0 < f <= 1 for f in fr)
    assert all(r["verified"] for r in out["rows"])
    assert main(["profile", str(config_file), "--decisions", "101100|4"]) == 0
    assert json.loads(capsys.readouterr().out)["decisions"] == "101100|4"


def test_cli_errors(tmp_path, config_file, capsys):
    assert main(["profile", str(config_file), "--decisions", "10a100|4"]) == 2
    assert "position 2" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"model": {"e": -3}}))
    assert main(["train", str(bad)]) == 2
    assert "model" in capsys.readouterr().err
    junk = tmp_path / "junk.sdck"
    junk.write_bytes(b"nope" * 20)
    assert main(["eval", str(junk)]) == 2
    assert "magic" in capsys.readouterr().err
    big = tmp_path / "big.json"
    save_config(cfg_small(model=ModelConfig(vocab_size=16, e=16, d_ff=32, L_enc=4, L_dec=4, n_heads=2, max_len=12)), big)
    assert main(["oracle", str(big)]) == 2
    assert "limit" in capsys.readouterr().err


def test_cli_divergence_exit_code(tmp_path, monkeypatch, capsys):
    import dynapath.cli as cli
    from dynapath.trainer import TrainingDiverged

    def boom(cfg, out):
        raise TrainingDiverged("non-finite loss at step 3", {"step": 3, "lambda": 0.1, "decisions": ["111111|0"]})

    monkeypatch.setattr(cli, "run_training", boom)
    path = tmp_path / "c.json"
    save_config(cfg_small(), path)
    assert main(["train", str(path), "--out-dir", str(tmp_path / "d")]) == 3
    assert json.loads((tmp_path / "d" / "diverged.json").read_text())["step"] == 3
    assert "non-finite" in capsys.readouterr().err


def test_cli_oracle_small(tmp_path, capsys):
    path = tmp_path / "o.json"
    cfg = cfg_small(model=ModelConfig(vocab_size=16, e=16, d_ff=64, L_enc=2, L_dec=2, n_heads=2, max_len=12))
    save_config(cfg, path)
    assert main(["oracle", str(path), "--samples", "2000"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["paths"] == 448 and len(rep["monte_carlo"]) == 1


def test_module_entry_point(config_file):
    out = subprocess.run(
        [sys.executable, "-m", "dynapath", "profile", str(config_file), "--decisions", "all-keep"], capture_output=True, text=True
    )
    assert out.returncode == 0 and json.loads(out.stdout)["fraction"] == 1.0
