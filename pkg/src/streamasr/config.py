"""Experiment configuration, dataset manifests and WAV I/O.

Config files are plain ``key = value`` lines with ``#`` comments. Keys
are validated against the canonical list below; an unknown key is a hard
error (silent typos corrupt experiments).
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .frontend import AudioUtterance
from .synthetic import SyntheticDataset, gen_synthetic_dataset


class ConfigError(ValueError):
    pass


CANONICAL_KEYS = {
    # synthetic dataset
    "data.synthetic.seed": "seed for the synthetic dataset",
    "data.synthetic.n": "number of utterances",
    "data.synthetic.alphabet": "characters (word separator added automatically)",
    "data.synthetic.min_label_len": "minimum transcript length",
    "data.synthetic.max_label_len": "maximum transcript length",
    "data.synthetic.sample_rate": "synthetic audio sample rate (Hz)",
    "data.synthetic.n_words": "vocabulary size",
    "data.manifest": "path to a TSV manifest or synthetic descriptor",
    # model
    "model.preset": "baseline | proposed | bidirectional",
    "model.width": "recurrent hidden size",
    "model.time_resolution": "overall conv time stride: 2 or 4",
    "model.grams": "gram inventory file path, or 'auto' to mine the dataset",
    "model.gram_max_len": "max gram length for 'auto'",
    # training
    "train.epochs": "number of epochs",
    "train.batch_size": "utterances per step",
    "train.lr": "learning rate",
    "train.momentum": "Nesterov momentum",
    "train.clip_norm": "global gradient norm clip (0 disables)",
    "train.seed": "training seed",
    "train.loss": "ctc | gramctc | pretrain | joint",
    "train.ce_epochs": "frame-CE epochs before the ctc phase (pretrain)",
    "train.ce_weight": "joint CE weight",
    "train.ctc_weight": "joint CTC weight",
    "train.gram_weight": "joint gram-loss weight",
    "train.align_ref": "checkpoint path providing reference alignments",
    "train.align_delay": "frames to delay reference alignments",
    "train.noise_prob": "per-utterance noise augmentation probability",
    "train.rir_prob": "per-utterance reverberation probability",
    # decoding
    "decode.beam_width": "prefix beam width (1 = greedy)",
    "decode.alpha": "LM weight",
    "decode.beta": "per-character insertion bonus",
    "decode.lm": "character LM file path",
    # benchmark
    "bench.streams": "concurrent streams",
    "bench.packet_ms": "packet size in milliseconds",
    "bench.mode": "inprocess | socket",
}


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CANONICAL_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def apply_overrides(config: dict[str, str], overrides) -> dict[str, str]:
    merged = dict(config)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in CANONICAL_KEYS:
            raise ConfigError(f"unknown config key: {key}")
        merged[key] = value
    return merged


def write_snapshot(config: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(config):
            fh.write(f"{key} = {config[key]}\n")


def get(config, key, default=None, cast=str):
    if key not in config:
        return default
    value = config[key]
    try:
        if cast is bool:
            return value.lower() in ("1", "true", "yes")
        return cast(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}")


# ---------------------------------------------------------------------------
# WAV files and manifests
# ---------------------------------------------------------------------------


def save_wav(path, utt: AudioUtterance) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(utt.sample_rate)
        fh.writeframes((np.clip(utt.samples, -1, 1) * 32767.0).astype("<i2").tobytes())


def load_wav(path, transcript=None) -> AudioUtterance:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return AudioUtterance(samples, rate, transcript)


SYNTHETIC_MARKER = "#synthetic-dataset"


def write_synthetic_descriptor(path, descriptor: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SYNTHETIC_MARKER + "\n")
        for key in sorted(descriptor):
            fh.write(f"{key} = {descriptor[key]}\n")


def write_manifest(path, entries) -> None:
    """TSV lines ``audio_path<TAB>transcript``."""
    with open(path, "w", encoding="utf-8") as fh:
        for audio_path, transcript in entries:
            fh.write(f"{audio_path}\t{transcript}\n")


def load_dataset(path) -> SyntheticDataset:
    """Load either manifest flavor into an in-memory dataset.

    A file starting with the synthetic marker is a descriptor and the
    dataset is regenerated from it; otherwise each line is
    ``audio_path<TAB>transcript`` with paths relative to the manifest.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if text.startswith(SYNTHETIC_MARKER):
        kv = {}
        for line in text.splitlines()[1:]:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, value = (p.strip() for p in line.split("=", 1))
            kv[key] = value
        return gen_synthetic_dataset(
            seed=int(kv["seed"]),
            n=int(kv["n"]),
            alphabet=kv["alphabet"],
            min_label_len=int(kv.get("min_label_len", 6)),
            max_label_len=int(kv.get("max_label_len", 16)),
            sample_rate=int(kv.get("sample_rate", 4000)),
            n_words=int(kv.get("n_words", 12)),
            noise_std=float(kv.get("noise_std", 0.004)),
            holdout_every=int(kv.get("holdout_every", 5)),
            homophone_pairs=int(kv.get("homophone_pairs", 0)),
        )
    utterances = []
    alphabet_chars = set()
    rate = None
    for line in text.splitlines():
        if not line.strip():
            continue
        audio_path, transcript = line.split("\t", 1)
        utt = load_wav(path.parent / audio_path, transcript)
        rate = utt.sample_rate if rate is None else rate
        if utt.sample_rate != rate:
            raise ValueError("mixed sample rates in manifest")
        alphabet_chars.update(transcript)
        utterances.append(utt)
    if not utterances:
        raise ValueError("empty manifest")
    alphabet_chars.discard(" ")
    alphabet = "".join(sorted(alphabet_chars))
    holdout_every = 5
    train = [u for i, u in enumerate(utterances) if i % holdout_every != holdout_every - 1]
    holdout = [u for i, u in enumerate(utterances) if i % holdout_every == holdout_every - 1]
    return SyntheticDataset(
        train=train,
        holdout=holdout,
        alphabet=alphabet + " ",
        sample_rate=rate,
        descriptor={"manifest": str(path)},
    )
