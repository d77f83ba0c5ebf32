"""CLI verbs end to end against a synthetic miniature dataset, plus exit
codes and the config override surface."""

import numpy as np
import pytest

from stemsep import dsp
from stemsep import tensor as T
from stemsep.audio_io import SOURCES, AudioClip, read_wav, write_wav
from stemsep.checkpoint import load_checkpoint, make_checkpoint, save_checkpoint
from stemsep.cli import main
from stemsep.config import load_config_file, resolve
from stemsep.errors import EXIT_CONFIG, EXIT_DATA, EXIT_OK, ConfigError
from stemsep.evaluate import read_spectrogram_dump
from stemsep.models import ModelBundle, build_separator, separator_config

from test_audio_io import make_dataset

TINY_MODEL_ARGS = [
    "--model.channels", "8,6,4",
    "--model.kernels", "3,3,2",
    "--model.strides", "2,2,2",
    "--model.skip_kind", "identity",
]


def small_checkpoint(tmp_path, sources=SOURCES, seed=0):
    with T.using_dtype(np.float32):
        cfg = separator_config(source_count=len(sources), freq_bins=dsp.FREQ_BINS,
                               channels=(8, 6, 4), kernels=(3, 3, 2), strides=(2, 2, 2),
                               skip_kind="identity")
        bundle = ModelBundle("separator", build_separator(cfg, rng=seed),
                             sources=tuple(sources))
    path = tmp_path / "model.ssck"
    save_checkpoint(path, make_checkpoint(bundle, meta={"seed": seed, "step": 0}))
    return path


def test_train_verb_end_to_end(tmp_path):
    make_dataset(tmp_path / "data", split="train", tracks=("one", "two"), seconds=0.35)
    out = tmp_path / "trained.ssck"
    code = main([
        "train", "--dataset", str(tmp_path / "data"), "--out", str(out),
        *TINY_MODEL_ARGS,
        "--data.clip_seconds", "0.15",
        "--data.val_ratio", "0.5",
        "--train.batch_size", "2",
        "--train.max_epochs", "2",
        "--train.epoch_batches", "2",
        "--train.patience", "1",
    ])
    assert code == EXIT_OK
    ckpt = load_checkpoint(out)
    assert ckpt.mode == "separator"
    assert ckpt.sources == SOURCES
    assert ckpt.meta["step"] >= 2


def test_separate_verb_writes_stems(tmp_path):
    ckpt_path = small_checkpoint(tmp_path)
    song = AudioClip(0.1 * np.random.default_rng(0).normal(size=(2, 22050)), 44100)
    write_wav(tmp_path / "song.wav", song, fmt="float32")
    out_dir = tmp_path / "stems"
    code = main(["separate", "--checkpoint", str(ckpt_path),
                 "--input", str(tmp_path / "song.wav"), "--out-dir", str(out_dir)])
    assert code == EXIT_OK
    for name in list(SOURCES) + ["accompaniment"]:
        clip = read_wav(out_dir / f"{name}.wav")
        assert clip.num_samples == song.num_samples
        assert clip.channels == 2


def test_separate_mode_mismatch_exit_code(tmp_path):
    ckpt_path = small_checkpoint(tmp_path)
    song_path = tmp_path / "song.wav"
    write_wav(song_path, AudioClip.silence(22050), fmt="float32")
    code = main(["separate", "--checkpoint", str(ckpt_path), "--input", str(song_path),
                 "--out-dir", str(tmp_path / "o"), "--mode", "residual"])
    assert code == EXIT_CONFIG


def test_evaluate_verb_oracle_and_determinism(tmp_path):
    make_dataset(tmp_path / "data", split="test", seconds=0.3)
    out_a = tmp_path / "a.csv"
    out_b = tmp_path / "b.csv"
    base = ["evaluate", "--dataset", str(tmp_path / "data"),
            "--estimates-dir", str(tmp_path / "data" / "test")]
    assert main(base + ["--out", str(out_a)]) == EXIT_OK
    assert main(base + ["--out", str(out_b)]) == EXIT_OK
    text = out_a.read_text()
    assert text.splitlines()[0] == "track,source,sdr_db"
    assert "100.000000" in text
    assert out_a.read_bytes() == out_b.read_bytes()


def test_evaluate_with_checkpoint(tmp_path):
    make_dataset(tmp_path / "data", split="test", tracks=("alpha",), seconds=0.3)
    ckpt_path = small_checkpoint(tmp_path)
    out = tmp_path / "r.csv"
    code = main(["evaluate", "--dataset", str(tmp_path / "data"),
                 "--checkpoint", str(ckpt_path), "--out", str(out)])
    assert code == EXIT_OK
    assert len(out.read_text().splitlines()) == 1 + 5  # header + 4 stems + accomp


def test_evaluate_missing_dataset_is_data_error(tmp_path):
    code = main(["evaluate", "--dataset", str(tmp_path / "nowhere"),
                 "--estimates-dir", str(tmp_path)])
    assert code == EXIT_DATA


def test_unknown_override_is_config_error(tmp_path):
    make_dataset(tmp_path / "data", split="train", seconds=0.3)
    code = main(["train", "--dataset", str(tmp_path / "data"),
                 "--out", str(tmp_path / "x.ssck"), "--train.warp_speed", "9"])
    assert code == EXIT_CONFIG


def test_dump_spec_verb(tmp_path):
    n = 3 * dsp.WINDOW_SIZE
    write_wav(tmp_path / "clip.wav", AudioClip(np.zeros(n)), fmt="float32")
    out = tmp_path / "spec.txt"
    assert main(["dump-spec", "--input", str(tmp_path / "clip.wav"),
                 "--out", str(out)]) == EXIT_OK
    matrix = read_spectrogram_dump(out)
    assert matrix.shape == (dsp.FREQ_BINS, 1 + n // dsp.HOP_SIZE)
    assert np.all(matrix == 0)


def test_dump_spec_track_grid(tmp_path):
    make_dataset(tmp_path / "data", split="test", tracks=("alpha",), seconds=0.2)
    ckpt_path = small_checkpoint(tmp_path)
    out_dir = tmp_path / "grid"
    code = main(["dump-spec", "--track-dir", str(tmp_path / "data" / "test" / "alpha"),
                 "--out-dir", str(out_dir), "--checkpoint", str(ckpt_path)])
    assert code == EXIT_OK
    assert (out_dir / "groundtruth_vocals.txt").exists()
    assert (out_dir / "estimate_vocals.txt").exists()


def test_inspect_checkpoint(tmp_path, capsys):
    ckpt_path = small_checkpoint(tmp_path)
    assert main(["inspect-checkpoint", "--checkpoint", str(ckpt_path)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "mode: separator" in printed
    assert "drums" in printed


def test_inspect_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ssck"
    bad.write_bytes(b"not a checkpoint at all")
    assert main(["inspect-checkpoint", "--checkpoint", str(bad)]) == EXIT_DATA


# ---------------------------------------------------------------------------
# config parsing


def test_config_file_roundtrip(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# experiment\n"
        "model.skip_kind = conv\n"
        "train.lr_conv = 0.0005\n"
        "data.sources = noise,tone\n")
    values = load_config_file(cfg)
    assert values["model.skip_kind"] == "conv"
    assert values["train.lr_conv"] == 0.0005
    merged = resolve(cfg, [("train.lr_conv", "0.001")])
    assert merged["train.lr_conv"] == 0.001
    assert merged["model.skip_kind"] == "conv"


def test_config_rejects_unknown_key(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.flux_capacitor = 1\n")
    with pytest.raises(ConfigError):
        load_config_file(cfg)


def test_config_rejects_bad_choice(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("model.skip_kind = teleport\n")
    with pytest.raises(ConfigError):
        load_config_file(cfg)
