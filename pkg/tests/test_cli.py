import wave

import numpy as np
import pytest

from rawlm import audio, cli
from rawlm.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rawlm.config import RunConfig, load_config, parse_config
from rawlm.errors import ConfigError
from rawlm.model import init_params

from conftest import tiny_config

TINY_KEYS = """\
chunk_len = 20
conv_channels = 8, 8, 8, 8, 8
embed_dim = 16
n_layers = 1
n_heads = 2
ff_dim = 16
head_dims = 16, 256
context_len = 60
"""


class TestConfig:
    def test_empty_is_full_size(self):
        cfg = parse_config("")
        assert cfg == RunConfig()
        assert cfg.n_tokens == 64 and cfg.batch_size == 40

    def test_long_context(self):
        assert parse_config("context_len = 500000").n_tokens == 250

    def test_ragged_context_names_key_and_line(self):
        with pytest.raises(ConfigError, match=r"line 2: context_len"):
            parse_config("# comment\ncontext_len = 1999\n")

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key 'lerning_rate'"):
            parse_config("lerning_rate = 3")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="line 1: batch_size"):
            parse_config("batch_size = forty")

    def test_precedence(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("batch_size = 8\nseed = 3  # trailing comment\n")
        cfg = load_config(str(p), ["batch_size=16"])
        assert (cfg.batch_size, cfg.seed, cfg.lr_initial) == (16, 3, 1e-4)

    def test_lists_and_bools(self):
        cfg = parse_config("conv_channels = [64, 64, 32, 32, 16]\nearly_stop = no")
        assert cfg.conv_channels == [64, 64, 32, 32, 16] and cfg.early_stop is False

    def test_text_roundtrip(self):
        cfg = parse_config(TINY_KEYS + "greedy = true\ntrain_manifest = data/train.txt\n")
        assert parse_config(cfg.to_text()) == cfg

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_config(str(tmp_path / "none.cfg"))


class TestInspect:
    def test_default_output(self, capsys):
        assert cli.main(["inspect"]) == 0
        out = capsys.readouterr().out
        assert "tokens: 64" in out
        assert "conv lengths: [1000, 334, 167, 56, 28]" in out
        assert "flatten dim: 896" in out
        assert "parameters: 1740832" in out
        assert "conv0      (64, 256, 1000)" in out

    def test_output_is_stable(self, capsys):
        cli.main(["inspect"])
        first = capsys.readouterr().out
        cli.main(["inspect"])
        assert capsys.readouterr().out == first

    def test_override(self, capsys):
        assert cli.main(["inspect", "--set", "context_len=500000"]) == 0
        assert "tokens: 250" in capsys.readouterr().out

    def test_bad_config_exit_code(self, tmp_path, capsys):
        p = tmp_path / "bad.cfg"
        p.write_text("context_len = 1999\n")
        assert cli.main(["inspect", "--config", str(p)]) == 1
        assert "context_len" in capsys.readouterr().err


@pytest.fixture
def corpus(tmp_path):
    t = np.arange(1200)
    paths = []
    for i, period in enumerate((25, 40)):
        p = tmp_path / f"clip{i}.wav"
        audio.write_wav(p, 0.6 * np.sin(2 * np.pi * t / period), 16000)
        paths.append(p.name)
    (tmp_path / "train.txt").write_text("\n".join(paths) + "\n")
    (tmp_path / "valid.txt").write_text(paths[0] + "\n")
    return tmp_path


@pytest.fixture
def tiny_ckpt(tmp_path):
    cfg = tiny_config()
    p = tmp_path / "fresh.ckpt"
    save_checkpoint(p, Checkpoint(cfg, init_params(cfg, np.random.default_rng(0)).arrays()))
    return p


class TestEval:
    def test_fresh_model_is_eight_bits(self, corpus, tiny_ckpt, capsys):
        rc = cli.main(["eval", "--ckpt", str(tiny_ckpt), "--manifest", str(corpus / "valid.txt"),
                       "--positions", "100"])
        assert rc == 0
        assert "bits/sample: 8.0000" in capsys.readouterr().out

    def test_missing_checkpoint(self, corpus, capsys):
        assert cli.main(["eval", "--ckpt", str(corpus / "nope.ckpt"), "--manifest", str(corpus / "valid.txt")]) == 1
        assert "nope.ckpt" in capsys.readouterr().err

    def test_missing_manifest(self, tiny_ckpt, tmp_path):
        assert cli.main(["eval", "--ckpt", str(tiny_ckpt), "--manifest", str(tmp_path / "x.txt")]) == 1


class TestGenerate:
    def test_one_second(self, corpus, tiny_ckpt, tmp_path, capsys):
        out = tmp_path / "gen.wav"
        rc = cli.main(["generate", "--ckpt", str(tiny_ckpt), "--seed-wav", str(corpus / "clip0.wav"),
                       "--n-samples", "16000", "--cache-mode", "stale-chunk", "--out", str(out)])
        assert rc == 0
        with wave.open(str(out)) as w:
            assert (w.getnframes(), w.getframerate(), w.getnchannels()) == (16000, 16000, 1)
        assert "1.000 s" in capsys.readouterr().out

    def test_greedy_reproducible(self, corpus, tiny_ckpt, tmp_path):
        paths = [tmp_path / "a.wav", tmp_path / "b.wav"]
        for p, seed in zip(paths, (1, 2)):
            assert cli.main(["generate", "--ckpt", str(tiny_ckpt), "--seed-wav", str(corpus / "clip1.wav"),
                             "--n-samples", "50", "--greedy", "--seed", str(seed), "--out", str(p)]) == 0
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_rate_mismatch(self, corpus, tiny_ckpt, tmp_path, capsys):
        rc = cli.main(["generate", "--ckpt", str(tiny_ckpt), "--seed-wav", str(corpus / "clip0.wav"),
                       "--n-samples", "5", "--sample-rate", "8000", "--out", str(tmp_path / "x.wav")])
        assert rc == 1
        assert "8000" in capsys.readouterr().err


class TestTrain:
    def test_end_to_end(self, corpus, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
        cfg = corpus / "run.cfg"
        cfg.write_text(TINY_KEYS + "train_manifest = {0}/train.txt\nvalid_manifest = {0}/valid.txt\n"
                       "batch_size = 8\nmax_steps = 6\neval_every = 3\neval_positions = 32\n"
                       "checkpoint_every = 3\nlr_initial = 1e-3\nlr_final = 1e-4\noutput_dir = run1\n"
                       .format(corpus))
        assert cli.main(["train", "--config", str(cfg)]) == 0
        run = tmp_path / "run1"
        assert (run / "resolved_config.txt").read_text() == load_config(str(cfg)).to_text()
        ckpt = load_checkpoint(run / "latest.ckpt")
        assert ckpt.step == 6 and ckpt.config == tiny_config()
        assert len((run / "metrics.tsv").read_text().splitlines()) == 8
        assert "bits/sample" in capsys.readouterr().out

        # resume two more steps
        assert cli.main(["train", "--config", str(cfg), "--resume", str(run / "latest.ckpt"),
                         "--set", "max_steps=8"]) == 0
        assert load_checkpoint(run / "latest.ckpt").step == 8

        assert cli.main(["eval", "--ckpt", str(run / "latest.ckpt"), "--manifest", str(corpus / "valid.txt")]) == 0

    def test_missing_manifest_setting(self, capsys):
        assert cli.main(["train", "--set", "context_len=60", "--set", "chunk_len=20"]) == 1
        assert "train_manifest" in capsys.readouterr().err

    def test_missing_manifest_file(self, tmp_path, capsys):
        rc = cli.main(["train", "--out", str(tmp_path / "o"), "--set", f"train_manifest={tmp_path}/none.txt"])
        assert rc == 1
        assert "none.txt" in capsys.readouterr().err
