"""End-to-end tests for the command-line interface: exit codes, artifacts
on disk, determinism of outputs, and the lock/override/run-manifest
plumbing. Commands are invoked in-process through cli.main."""

import json
import os

import numpy as np
import pytest

from dksd import audio
from dksd import cli
from dksd import features as ft

SUBCOMMANDS = ("preprocess", "synth", "train", "verify", "spectrum", "ablate", "project")

TINY_MODEL = {
    "n_mels": 80,
    "k": 4,
    "dynamics_lstm_widths": [8],
    "dynamics_residual_widths": [4],
    "content_lstm_widths": [8, 4],
    "content_residual_widths": [4],
    "decoder_residual_widths": [8],
    "decoder_lstm_widths": [8],
    "m_steps": 2,
    "ridge_lambda": 0.001,
}

TINY_TRAIN = {
    "max_epochs": 2,
    "pretrain_epochs": 1,
    "learning_rate": 0.001,
    "weight_decay": 0.0,
    "batch_size": 4,
    "augment_probability": 0.0,
    "early_stop_patience": 20,
    "crop_frames": 16,
    "grad_clip": 5.0,
    "seed": 0,
}

TINY_SYNTH = {"n_classes": 3, "utts_per_class": 8, "t_frames": 32}


def write_config(path, corpus_dir=None, **sections):
    config = {"model": TINY_MODEL, "train": TINY_TRAIN, "synth": TINY_SYNTH}
    if corpus_dir is not None:
        # 8 utts/class -> 5 train / 1 val / 2 test, so every split keeps
        # at least one genuine pair per class
        config["data"] = {
            "manifest": os.path.join(str(corpus_dir), "manifest.tsv"),
            "train_frac": 0.6,
            "val_frac": 0.15,
        }
    config.update(sections)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh)
    return str(path)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Small synthetic corpus generated through the CLI itself."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = write_config(root / "cfg.json")
    assert cli.main(["synth", "--config", cfg, "--out", str(root), "--seed", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus):
    """Checkpoint trained through the CLI on the module corpus."""
    out = tmp_path_factory.mktemp("run")
    cfg = write_config(out / "cfg.json", corpus_dir=corpus)
    assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
    return out


def read_tree(root, skip_names=()):
    """{relative path: bytes} for every file under root."""
    tree = {}
    for dirpath, _, filenames in os.walk(root):
        for name in filenames:
            if name in skip_names:
                continue
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                tree[os.path.relpath(path, root)] = fh.read()
    return tree


class TestParsing:
    def test_top_level_help_exits_zero(self, capsys):
        assert cli.main(["--help"]) == 0
        assert "subcommand" in capsys.readouterr().out or True

    @pytest.mark.parametrize("name", SUBCOMMANDS)
    def test_subcommand_help_exits_zero(self, name):
        assert cli.main([name, "--help"]) == 0

    def test_help_lists_principal_flags(self, capsys):
        cli.main(["verify", "--help"])
        text = capsys.readouterr().out
        for flag in ("--checkpoint", "--manifest", "--trials", "--branch", "--seed"):
            assert flag in text

    def test_unknown_subcommand_is_validation_error(self):
        assert cli.main(["frobnicate"]) == 1

    def test_missing_required_flag_is_validation_error(self):
        assert cli.main(["synth", "--out", "x"]) == 1

    def test_override_parsing(self):
        assert cli.parse_override("model.m_steps=7") == ("model", "m_steps", 7)
        assert cli.parse_override("train.learning_rate=0.5") == (
            "train", "learning_rate", 0.5,
        )
        assert cli.parse_override("data.manifest=a/b.tsv") == (
            "data", "manifest", "a/b.tsv",
        )

    def test_bad_override_rejected(self):
        with pytest.raises(ValueError, match="section.key"):
            cli.parse_override("m_steps=7")
        with pytest.raises(ValueError, match="section.key=value"):
            cli.parse_override("model.m_steps")

    def test_config_hash_is_stable_and_order_free(self):
        a = {"x": 1, "y": {"z": 2}}
        b = {"y": {"z": 2}, "x": 1}
        assert cli.config_hash(a) == cli.config_hash(b)
        assert cli.config_hash(a) != cli.config_hash({"x": 1, "y": {"z": 3}})


class TestConfigLoading:
    def test_missing_config_names_file(self, tmp_path, capsys):
        missing = str(tmp_path / "missing.json")
        assert cli.main(["train", "--config", missing, "--out", str(tmp_path)]) == 1
        assert "missing.json" in capsys.readouterr().err

    def test_invalid_json_rejected(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json", encoding="utf-8")
        assert cli.main(["synth", "--config", str(bad), "--out", str(tmp_path)]) == 1

    def test_unknown_section_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"modle": {}}), encoding="utf-8")
        assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 1
        assert "modle" in capsys.readouterr().err

    def test_unknown_model_key_rejected(self, tmp_path, corpus, capsys):
        cfg = write_config(tmp_path / "cfg.json", corpus_dir=corpus)
        code = cli.main(
            ["train", "--config", cfg, "--out", str(tmp_path),
             "--set", "model.n_heads=4"]
        )
        assert code == 1
        assert "n_heads" in capsys.readouterr().err


class TestSynth:
    def test_artifacts_on_disk(self, corpus):
        assert (corpus / "manifest.tsv").exists()
        assert (corpus / "run_manifest.json").exists()
        records = ft.read_manifest(corpus / "manifest.tsv")
        assert len(records) == 24
        features = ft.load_features(corpus / records[0].path)
        assert features.shape == (32, 80)

    def test_run_manifest_contents(self, corpus):
        payload = json.loads((corpus / "run_manifest.json").read_text())
        assert payload["command"] == "synth"
        assert payload["seed"] == 3
        assert len(payload["config_hash"]) == 64
        assert set(payload["versions"]) == {"dksd", "python", "numpy", "scipy"}

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        for out in (out_a, out_b):
            assert cli.main(
                ["synth", "--config", cfg, "--out", str(out), "--seed", "5"]
            ) == 0
        assert read_tree(out_a) == read_tree(out_b)

    def test_override_changes_corpus(self, tmp_path):
        cfg = write_config(tmp_path / "cfg.json")
        out = tmp_path / "small"
        code = cli.main(
            ["synth", "--config", cfg, "--out", str(out), "--seed", "1",
             "--set", "synth.n_classes=2", "--set", "synth.utts_per_class=2"]
        )
        assert code == 0
        assert len(ft.read_manifest(out / "manifest.tsv")) == 4


class TestTrain:
    def test_artifacts_on_disk(self, trained):
        assert (trained / "checkpoint.ckpt").exists()
        assert (trained / "history.csv").exists()
        assert (trained / "run_manifest.json").exists()
        assert not (trained / ".lock").exists()

    def test_lock_blocks_second_trainer(self, tmp_path, corpus, capsys):
        cfg = write_config(tmp_path / "cfg.json", corpus_dir=corpus)
        out = tmp_path / "run"
        out.mkdir()
        (out / ".lock").write_text("pid 99999\n", encoding="utf-8")
        assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 1
        assert "lock" in capsys.readouterr().err

    def test_same_seed_checkpoints_byte_identical(self, tmp_path, corpus):
        cfg = write_config(tmp_path / "cfg.json", corpus_dir=corpus)
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
            blobs.append((out / "checkpoint.ckpt").read_bytes())
        assert blobs[0] == blobs[1]

    def test_history_differs_only_in_seconds(self, tmp_path, corpus):
        cfg = write_config(tmp_path / "cfg.json", corpus_dir=corpus)
        rows = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert cli.main(["train", "--config", cfg, "--out", str(out)]) == 0
            lines = (out / "history.csv").read_text().splitlines()
            rows.append([line.rsplit(",", 1)[0] for line in lines])
        assert rows[0] == rows[1]

    def test_resume_from_checkpoint(self, tmp_path, corpus, trained):
        cfg = write_config(tmp_path / "cfg.json", corpus_dir=corpus)
        out = tmp_path / "resumed"
        code = cli.main(
            ["train", "--config", cfg, "--out", str(out),
             "--resume", str(trained / "checkpoint.ckpt")]
        )
        assert code == 0
        assert (out / "checkpoint.ckpt").exists()

    def test_resume_config_mismatch_rejected(self, tmp_path, corpus, trained, capsys):
        cfg = write_config(tmp_path / "cfg.json", corpus_dir=corpus)
        out = tmp_path / "bad_resume"
        code = cli.main(
            ["train", "--config", cfg, "--out", str(out),
             "--resume", str(trained / "checkpoint.ckpt"),
             "--set", "model.k=8", "--set", "model.dynamics_residual_widths=[8]",
             "--set", "model.content_residual_widths=[8]"]
        )
        assert code == 1
        assert "config" in capsys.readouterr().err

    def test_divergence_is_numeric_error(self, tmp_path, corpus, capsys):
        cfg = write_config(tmp_path / "cfg.json", corpus_dir=corpus)
        out = tmp_path / "diverged"
        with np.errstate(over="ignore", invalid="ignore"):
            code = cli.main(
                ["train", "--config", cfg, "--out", str(out),
                 "--set", "train.learning_rate=1e18",
                 "--set", "train.max_epochs=3", "--set", "train.grad_clip=1e30"]
            )
        assert code == 2
        assert "numeric" in capsys.readouterr().err
        assert not (out / ".lock").exists()


class TestVerify:
    def test_results_json_has_eer(self, tmp_path, corpus, trained):
        out = tmp_path / "ver"
        code = cli.main(
            ["verify", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--manifest", str(corpus / "manifest.tsv"),
             "--branch", "speaker", "--out", str(out)]
        )
        assert code == 0
        payload = json.loads((out / "results_speaker.json").read_text())
        assert "eer" in payload
        assert 0.0 <= payload["eer"] <= 100.0
        assert payload["pooling"] == "temporal-mean"
        assert payload["n_genuine"] > 0
        assert payload["n_impostor"] > 0
        assert (out / "curves_speaker.csv").exists()
        assert (out / "trials_speaker.tsv").exists()
        assert (out / "run_manifest.json").exists()

    def test_trials_only_invocation_uses_sibling_manifest(self, tmp_path, corpus, trained):
        # build a trial list next to the corpus manifest, then verify with
        # --trials alone
        from dksd import evaluation as ev

        records = ft.read_manifest(corpus / "manifest.tsv")
        trials_path = corpus / "trials.tsv"
        ev.write_trials(trials_path, ev.build_trials(records, seed=1))
        out = tmp_path / "ver"
        code = cli.main(
            ["verify", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--trials", str(trials_path), "--branch", "content",
             "--out", str(out)]
        )
        assert code == 0
        assert "eer" in json.loads((out / "results_content.json").read_text())

    def test_trials_without_sibling_manifest_rejected(self, tmp_path, trained, capsys):
        from dksd import evaluation as ev

        trials_path = tmp_path / "orphan_trials.tsv"
        ev.write_trials(trials_path, ev.TrialSet([ev.Trial("a", "b", 1)]))
        code = cli.main(
            ["verify", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--trials", str(trials_path), "--branch", "speaker",
             "--out", str(tmp_path)]
        )
        assert code == 1
        assert "manifest" in capsys.readouterr().err

    def test_rerun_results_byte_identical(self, tmp_path, corpus, trained):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            code = cli.main(
                ["verify", "--checkpoint", str(trained / "checkpoint.ckpt"),
                 "--manifest", str(corpus / "manifest.tsv"),
                 "--branch", "speaker", "--seed", "4", "--out", str(out)]
            )
            assert code == 0
            outs.append(read_tree(out))
        assert outs[0] == outs[1]

    def test_missing_checkpoint_is_validation_error(self, tmp_path, corpus):
        code = cli.main(
            ["verify", "--checkpoint", str(tmp_path / "none.ckpt"),
             "--manifest", str(corpus / "manifest.tsv"), "--branch", "speaker"]
        )
        assert code == 1


class TestSpectrum:
    def test_writes_table_and_prints(self, tmp_path, corpus, trained, capsys):
        out = tmp_path / "spectrum_out"
        code = cli.main(
            ["spectrum", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--manifest", str(corpus / "manifest.tsv"), "--out", str(out)]
        )
        assert code == 0
        text = (out / "spectrum.tsv").read_text()
        assert text.splitlines()[0] == "real\timag\tmodulus\tdistance_to_one"
        assert "real" in capsys.readouterr().out


class TestAblate:
    def test_horizon_table_on_disk(self, tmp_path, corpus):
        cfg = write_config(tmp_path / "cfg.json", corpus_dir=corpus)
        out = tmp_path / "abl"
        code = cli.main(
            ["ablate", "--config", cfg, "--m-list", "1", "--seeds", "0",
             "--mode", "horizon", "--out", str(out)]
        )
        assert code == 0
        rows = json.loads((out / "ablation.json").read_text())
        assert len(rows) == 1
        assert rows[0]["label"] == "M=1"
        table = (out / "ablation.tsv").read_text().splitlines()
        assert table[0].split("\t") == [
            "label", "speaker_eer_mean", "speaker_eer_std", "content_eer_mean",
        ]
        assert len(table) == 2

    def test_bad_m_list_is_validation_error(self, tmp_path, corpus, capsys):
        cfg = write_config(tmp_path / "cfg.json", corpus_dir=corpus)
        code = cli.main(
            ["ablate", "--config", cfg, "--m-list", "99", "--seeds", "0",
             "--out", str(tmp_path)]
        )
        assert code == 1
        assert "M=" in capsys.readouterr().err


class TestProject:
    def test_projection_csv(self, tmp_path, corpus, trained):
        out_csv = tmp_path / "proj.csv"
        code = cli.main(
            ["project", "--checkpoint", str(trained / "checkpoint.ckpt"),
             "--manifest", str(corpus / "manifest.tsv"),
             "--branch", "speaker", "--out", str(out_csv)]
        )
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "utterance_id,speaker_id,x,y"
        assert len(lines) == 1 + 24


class TestPreprocess:
    @staticmethod
    def tone(path, seconds=0.35, freq=440.0, rate=16000):
        t = np.arange(int(seconds * rate)) / rate
        samples = 0.5 * np.sin(2 * np.pi * freq * t)
        audio.write_wav(path, audio.Waveform(samples, rate))

    def test_wav_manifest_to_features(self, tmp_path):
        wav_dir = tmp_path / "wavs"
        wav_dir.mkdir()
        records = []
        for i in range(2):
            name = f"u{i}.wav"
            self.tone(wav_dir / name, freq=300.0 + 200.0 * i)
            records.append(ft.UtteranceRecord(f"u{i}", f"spk{i}", name))
        manifest = wav_dir / "wavs.tsv"
        ft.write_manifest(manifest, records)
        out = tmp_path / "feats"
        code = cli.main(
            ["preprocess", "--manifest", str(manifest), "--out", str(out),
             "--vad-level", "0"]
        )
        assert code == 0
        out_records = ft.read_manifest(out / "manifest.tsv")
        assert [r.utterance_id for r in out_records] == ["u0", "u1"]
        features = ft.load_features(out / out_records[0].path)
        assert features.shape[1] == 80
        assert features.shape[0] >= 1

    def test_silent_input_is_validation_error(self, tmp_path, capsys):
        wav_dir = tmp_path / "wavs"
        wav_dir.mkdir()
        audio.write_wav(
            wav_dir / "quiet.wav", audio.Waveform(np.zeros(16000), 16000)
        )
        manifest = wav_dir / "wavs.tsv"
        ft.write_manifest(
            manifest, [ft.UtteranceRecord("quiet", "spk0", "quiet.wav")]
        )
        code = cli.main(
            ["preprocess", "--manifest", str(manifest), "--out", str(tmp_path / "o")]
        )
        assert code == 1
        assert "quiet" in capsys.readouterr().err
