"""Deterministic synthetic speech-like data.

Each character of the alphabet is assigned a fixed spectral signature of
two or three active frequency bins; an utterance renders its transcript
as a sequence of short multi-tone segments (duration-jittered per
utterance) separated by silence at word boundaries, over a low noise
floor. The mapping from characters to bins is deterministic in the seed,
so any two runs with the same descriptor produce identical datasets.

Desk-scale stand-in for a real corpus: small, fast, and fully learnable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .frontend import AudioUtterance

WORD_SEP = " "


@dataclass
class SyntheticDataset:
    train: list
    holdout: list
    alphabet: str  # includes the word separator
    sample_rate: int
    descriptor: dict

    @property
    def utterances(self):
        return self.train + self.holdout


def _make_words(rng, alphabet: str, n_words: int, sound_of: dict) -> list[str]:
    """Fixed vocabulary with distinct sound patterns.

    With homophone characters present, two spellings can share a sound;
    words are rejected unless their character-sound sequence is unique,
    so every word remains acoustically identifiable as a whole even when
    its letters are not individually."""
    words: list[str] = []
    seen_spellings = set()
    seen_sounds = set()
    while len(words) < n_words:
        length = int(rng.integers(2, 5))
        w = "".join(rng.choice(list(alphabet), size=length))
        sound = tuple(sound_of[c] for c in w)
        if w not in seen_spellings and sound not in seen_sounds:
            seen_spellings.add(w)
            seen_sounds.add(sound)
            words.append(w)
    return words


def _char_signatures(rng, alphabet: str, n_bins: int, homophone_pairs: int):
    """Per-character spectral signatures, disjoint across characters while
    bins last. The first `homophone_pairs` consecutive character pairs
    share one signature: distinct spellings, identical sound."""
    usable = list(rng.permutation(np.arange(3, n_bins - 3)))
    sigs = {}
    sound_of = {}
    next_sound = 0
    for i, ch in enumerate(alphabet):
        if i % 2 == 1 and i // 2 < homophone_pairs:
            partner = alphabet[i - 1]
            sigs[ch] = sigs[partner]
            sound_of[ch] = sound_of[partner]
            continue
        k = int(rng.integers(2, 4))
        if len(usable) < k:
            usable = list(rng.permutation(np.arange(3, n_bins - 3)))
        bins = np.array([usable.pop() for _ in range(k)])
        amps = rng.uniform(0.2, 0.35, size=k)
        sigs[ch] = (bins, amps)
        sound_of[ch] = next_sound
        next_sound += 1
    sound_of[WORD_SEP] = -1
    return sigs, sound_of


def _render(rng, transcript, sigs, sample_rate, n_fft, noise_std):
    bin_hz = sample_rate / n_fft
    pieces = [np.zeros(int(0.03 * sample_rate))]
    for ch in transcript:
        if ch == WORD_SEP:
            dur = rng.uniform(0.06, 0.09)
            pieces.append(np.zeros(int(dur * sample_rate)))
            continue
        bins, amps = sigs[ch]
        dur = rng.uniform(0.07, 0.11)
        n = int(dur * sample_rate)
        t = np.arange(n) / sample_rate
        seg = np.zeros(n)
        for b, a in zip(bins, amps):
            seg += a * np.sin(2 * np.pi * (b * bin_hz) * t + rng.uniform(0, 2 * np.pi))
        ramp = min(80, n // 4)
        env = np.ones(n)
        env[:ramp] = np.linspace(0, 1, ramp)
        env[-ramp:] = np.linspace(1, 0, ramp)
        pieces.append(seg * env)
    pieces.append(np.zeros(int(0.03 * sample_rate)))
    samples = np.concatenate(pieces)
    samples = samples + noise_std * rng.standard_normal(samples.size)
    peak = np.max(np.abs(samples))
    if peak > 0.95:
        samples = samples * (0.95 / peak)
    return samples


def gen_synthetic_dataset(
    seed: int,
    n: int,
    alphabet: str,
    min_label_len: int = 6,
    max_label_len: int = 16,
    sample_rate: int = 4000,
    n_words: int = 12,
    noise_std: float = 0.004,
    holdout_every: int = 5,
    homophone_pairs: int = 0,
) -> SyntheticDataset:
    """Deterministic dataset of `n` utterances over `alphabet` plus spaces.

    Transcripts are sequences of words drawn from a fixed small
    seed-derived vocabulary, constrained to [min_label_len,
    max_label_len] characters. Every `holdout_every`-th utterance goes to
    the holdout split. With `homophone_pairs` > 0, pairs of characters
    share a sound and only whole-word context determines the spelling.
    """
    if len(set(alphabet)) < 2:
        raise ValueError("alphabet needs at least 2 distinct symbols")
    if WORD_SEP in alphabet:
        raise ValueError("the word separator is added automatically")
    if homophone_pairs > len(alphabet) // 2:
        raise ValueError("not enough characters for that many homophone pairs")
    master = np.random.default_rng([seed, 0])
    n_fft = int(round(0.02 * sample_rate))
    sigs, sound_of = _char_signatures(master, alphabet, n_fft // 2 + 1, homophone_pairs)
    words = _make_words(master, alphabet, n_words, sound_of)

    train, holdout = [], []
    for i in range(n):
        rng = np.random.default_rng([seed, 1, i])
        while True:
            k = int(rng.integers(1, 5))
            transcript = WORD_SEP.join(words[j] for j in rng.integers(0, len(words), size=k))
            if min_label_len <= len(transcript) <= max_label_len:
                break
        samples = _render(rng, transcript, sigs, sample_rate, n_fft, noise_std)
        utt = AudioUtterance(samples, sample_rate, transcript)
        (holdout if i % holdout_every == holdout_every - 1 else train).append(utt)
    descriptor = {
        "seed": seed,
        "n": n,
        "alphabet": alphabet,
        "min_label_len": min_label_len,
        "max_label_len": max_label_len,
        "sample_rate": sample_rate,
        "n_words": n_words,
        "noise_std": noise_std,
        "holdout_every": holdout_every,
        "homophone_pairs": homophone_pairs,
    }
    return SyntheticDataset(
        train=train,
        holdout=holdout,
        alphabet=alphabet + WORD_SEP,
        sample_rate=sample_rate,
        descriptor=descriptor,
    )


def dataset_grams(ds: SyntheticDataset, max_len: int = 3) -> list[str]:
    """All unigrams plus the word-internal bi/tri-grams occurring in the
    dataset's vocabulary; covers every transcript by construction."""
    grams = list(ds.alphabet)
    seen = set(grams)
    for utt in ds.utterances:
        for word in utt.transcript.split(WORD_SEP):
            for ln in range(2, max_len + 1):
                for i in range(len(word) - ln + 1):
                    g = word[i : i + ln]
                    if g not in seen:
                        seen.add(g)
                        grams.append(g)
    return grams
