import json
from pathlib import Path

import numpy as np
import pytest

from streamasr.cli import main
from streamasr.config import (
    ConfigError,
    apply_overrides,
    load_dataset,
    load_wav,
    parse_config_text,
    save_wav,
    write_synthetic_descriptor,
)
from streamasr.frontend import AudioUtterance
from streamasr.synthetic import gen_synthetic_dataset


class TestConfigParsing:
    def test_basic_file(self):
        cfg = parse_config_text("# comment\ntrain.epochs = 3\nmodel.width = 24  # inline\n")
        assert cfg == {"train.epochs": "3", "model.width": "24"}

    def test_unknown_key_is_hard_error(self):
        with pytest.raises(ConfigError, match="unknown config key: train.eppochs"):
            parse_config_text("train.eppochs = 3\n")

    def test_missing_equals(self):
        with pytest.raises(ConfigError, match="expected 'key = value'"):
            parse_config_text("just some words\n")

    def test_overrides(self):
        cfg = apply_overrides({"train.epochs": "3"}, ["train.epochs=5", "train.lr=0.01"])
        assert cfg["train.epochs"] == "5"
        with pytest.raises(ConfigError, match="unknown config key"):
            apply_overrides({}, ["nope=1"])


class TestWavAndManifests:
    def test_wav_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        utt = AudioUtterance(rng.uniform(-0.8, 0.8, 500), 4000, "hi")
        path = tmp_path / "x.wav"
        save_wav(path, utt)
        back = load_wav(path, "hi")
        assert back.sample_rate == 4000
        assert np.max(np.abs(back.samples - utt.samples)) < 1e-4

    def test_synthetic_descriptor_round_trip(self, tmp_path):
        ds = gen_synthetic_dataset(seed=5, n=10, alphabet="abc", min_label_len=3, max_label_len=9)
        path = tmp_path / "d.synth"
        write_synthetic_descriptor(path, ds.descriptor)
        loaded = load_dataset(path)
        assert len(loaded.utterances) == 10
        for a, b in zip(ds.utterances, loaded.utterances):
            assert a.transcript == b.transcript
            assert np.array_equal(a.samples, b.samples)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A synth-data run plus a quick training run shared by CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    rc = main(
        [
            "synth-data",
            "--out",
            str(root / "data"),
            "--set",
            "data.synthetic.n=10",
            "--set",
            "data.synthetic.alphabet=abc",
            "--set",
            "data.synthetic.min_label_len=3",
            "--set",
            "data.synthetic.max_label_len=8",
        ]
    )
    assert rc == 0
    rc = main(
        [
            "train",
            "--out",
            str(root / "run"),
            "--set",
            "data.synthetic.n=10",
            "--set",
            "data.synthetic.alphabet=abc",
            "--set",
            "data.synthetic.min_label_len=3",
            "--set",
            "data.synthetic.max_label_len=8",
            "--set",
            "train.epochs=1",
            "--set",
            "train.batch_size=4",
            "--set",
            "train.noise_prob=0",
            "--set",
            "train.rir_prob=0",
            "--set",
            "model.width=8",
        ]
    )
    assert rc == 0
    return root


class TestCliCommands:
    def test_synth_data_outputs(self, workdir):
        data = workdir / "data"
        manifest = (data / "manifest.tsv").read_text().splitlines()
        assert len(manifest) == 10
        assert (data / "config.snapshot").exists()
        assert (data / "descriptor.synth").exists()
        name, transcript = manifest[0].split("\t")
        load_wav(data / name, transcript)

    def test_train_outputs(self, workdir):
        run = workdir / "run"
        assert (run / "checkpoint.ckpt").exists()
        records = [json.loads(l) for l in (run / "run.jsonl").read_text().splitlines()]
        assert records[0]["epoch"] == 0
        snapshot = (run / "config.snapshot").read_text()
        assert "train.epochs = 1" in snapshot

    def test_eval_identical_manifests_zero(self, workdir, capsys):
        manifest = workdir / "data" / "manifest.tsv"
        rc = main(["eval", "--manifest", str(manifest), "--hyp", str(manifest)])
        assert rc == 0
        out = capsys.readouterr().out
        assert json.loads(out.splitlines()[0])["cer"] == 0.0

    def test_eval_with_model(self, workdir, capsys):
        rc = main(
            [
                "eval",
                "--manifest",
                str(workdir / "data" / "manifest.tsv"),
                "--ckpt",
                str(workdir / "run" / "checkpoint.ckpt"),
            ]
        )
        assert rc == 0
        rec = json.loads(capsys.readouterr().out.splitlines()[0])
        assert 0.0 <= rec["cer"]

    def test_decode_runs(self, workdir, capsys):
        manifest = (workdir / "data" / "manifest.tsv").read_text().splitlines()
        name = manifest[0].split("\t")[0]
        rc = main(
            [
                "decode",
                "--ckpt",
                str(workdir / "run" / "checkpoint.ckpt"),
                "--audio",
                str(workdir / "data" / name),
            ]
        )
        assert rc == 0

    def test_align_and_xcorr(self, workdir, capsys):
        ckpt = str(workdir / "run" / "checkpoint.ckpt")
        manifest = str(workdir / "data" / "manifest.tsv")
        out = workdir / "aligns.jsonl"
        rc = main(["align", "--ckpt", ckpt, "--manifest", manifest, "--out", str(out)])
        assert rc == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 10
        capsys.readouterr()
        rc = main(["xcorr", "--a", str(out), "--b", str(out), "--max-lag", "5"])
        assert rc == 0
        result = json.loads(capsys.readouterr().out)
        assert result["median_peak"] == 0.0

    def test_unknown_config_key_exit_2(self, workdir, capsys):
        rc = main(["train", "--out", str(workdir / "x"), "--set", "train.epoc=1"])
        assert rc == 2
        assert "train.epoc" in capsys.readouterr().err

    def test_unknown_flag_exit_2(self):
        assert main(["train", "--wat"]) == 2

    def test_gradcheck_single(self, capsys):
        assert main(["gradcheck", "--component", "linear"]) == 0
        assert "linear" in capsys.readouterr().out

    def test_lm_train(self, tmp_path, capsys):
        corpus = tmp_path / "corpus.txt"
        corpus.write_text("abc ab\ncab ba\n")
        out = tmp_path / "lm.tsv"
        rc = main(["lm-train", "--corpus", str(corpus), "--order", "3", "--out", str(out)])
        assert rc == 0
        assert out.exists()

    def test_bench_cli(self, workdir, capsys):
        rc = main(
            [
                "bench",
                "--ckpt",
                str(workdir / "run" / "checkpoint.ckpt"),
                "--set",
                "bench.streams=2",
                "--set",
                "bench.packet_ms=50",
                "--set",
                "data.synthetic.n=4",
                "--set",
                "data.synthetic.alphabet=abc",
                "--set",
                "data.synthetic.min_label_len=3",
                "--set",
                "data.synthetic.max_label_len=8",
            ]
        )
        assert rc == 0
        lines = capsys.readouterr().out.splitlines()
        summary = json.loads(lines[-1])
        assert summary["kind"] == "summary"
        assert summary["rtf"] is not None
