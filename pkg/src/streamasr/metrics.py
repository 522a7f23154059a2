"""Edit-distance based evaluation: CER and WER."""

from __future__ import annotations

from dataclasses import dataclass, field


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs between two token sequences."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ai in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, bj in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ai != bj))
        prev = cur
    return prev[-1]


def cer(ref: str, hyp: str) -> float:
    """Character error rate: edit distance over characters / reference length."""
    if len(ref) == 0:
        raise ValueError("undefined rate")
    return edit_distance(ref, hyp) / len(ref)


def wer(ref: str, hyp: str) -> float:
    """Word error rate over whitespace-split tokens, no punctuation normalization."""
    ref_words = ref.split()
    if not ref_words:
        raise ValueError("undefined rate")
    return edit_distance(ref_words, hyp.split()) / len(ref_words)


@dataclass
class MetricsReport:
    """Aggregate error rates over a set of (reference, hypothesis) pairs."""

    cer: float
    wer: float
    utterances: int
    slices: dict = field(default_factory=dict)

    @classmethod
    def from_pairs(cls, pairs) -> "MetricsReport":
        pairs = list(pairs)
        char_err = char_tot = word_err = word_tot = 0
        for ref, hyp in pairs:
            char_err += edit_distance(ref, hyp)
            char_tot += len(ref)
            word_err += edit_distance(ref.split(), hyp.split())
            word_tot += len(ref.split())
        if char_tot == 0 or word_tot == 0:
            raise ValueError("undefined rate")
        return cls(cer=char_err / char_tot, wer=word_err / word_tot, utterances=len(pairs))

    def as_record(self) -> dict:
        return {"cer": self.cer, "wer": self.wer, "utterances": self.utterances}
