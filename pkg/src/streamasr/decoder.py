"""Greedy max decoding and prefix beam search with character LM fusion."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .losses import BLANK

# context padding / sentence boundary marker for the character LM
BOUNDARY = "\x02"


def collapse(indices) -> list[int]:
    """Remove consecutive repeats, then blanks."""
    out, prev = [], None
    for v in indices:
        if v != prev and v != BLANK:
            out.append(int(v))
        prev = v
    return out


def greedy_decode(log_probs: np.ndarray, symbols) -> str:
    """Most likely symbol per frame (ties to the lowest index), collapsed.

    `symbols` maps output index to string, blank at 0; works for single
    characters and for multi-character inventory entries alike.
    """
    best = np.argmax(log_probs, axis=1)
    return "".join(symbols[i] for i in collapse(best))


# ---------------------------------------------------------------------------
# Character n-gram language model
# ---------------------------------------------------------------------------


@dataclass
class CharLm:
    """Add-k smoothed character n-gram model.

    p(c | ctx) = (count(ctx, c) + k) / (count(ctx) + k * V) with contexts
    of exactly order-1 characters, padded with the boundary marker.
    Unseen contexts therefore fall back to the uniform 1/V.
    """

    order: int
    k: float = 0.01
    counts: dict = field(default_factory=dict)
    vocab: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _context(self, text: str) -> str:
        padded = BOUNDARY * (self.order - 1) + text
        return padded[len(padded) - (self.order - 1) :] if self.order > 1 else ""

    def log_prob(self, char: str, context: str) -> float:
        ctx = self._context(context)
        table = self.counts.get(ctx, {})
        total = sum(table.values())
        v = self.vocab_size
        return math.log((table.get(char, 0) + self.k) / (total + self.k * v))

    def sequence_log_prob(self, text: str) -> float:
        return sum(self.log_prob(c, text[:i]) for i, c in enumerate(text))

    def save(self, path) -> None:
        """Sorted ``context<TAB>char<TAB>count`` lines."""
        lines = []
        for ctx, table in self.counts.items():
            for ch, n in table.items():
                lines.append(f"{ctx}\t{ch}\t{n}")
        with open(path, "w", encoding="utf-8") as fh:
            for line in sorted(lines):
                fh.write(line + "\n")

    @classmethod
    def load(cls, path, order: int | None = None, k: float = 0.01) -> "CharLm":
        counts: dict[str, dict[str, int]] = {}
        vocab = set()
        ctx_len = None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                ctx, ch, n = line.split("\t")
                if ctx_len is None:
                    ctx_len = len(ctx)
                elif len(ctx) != ctx_len:
                    raise ValueError("inconsistent context lengths in LM file")
                counts.setdefault(ctx, {})[ch] = int(n)
                vocab.add(ch)
                vocab.update(c for c in ctx)
        if ctx_len is None:
            raise ValueError("empty LM file")
        lm = cls(order=order or ctx_len + 1, k=k)
        lm.counts = counts
        lm.vocab = sorted(vocab)
        return lm


def train_char_lm(corpus_lines, order: int, k: float = 0.01) -> CharLm:
    """Accumulate context counts over a line-per-utterance corpus."""
    lm = CharLm(order=order, k=k)
    vocab = {BOUNDARY}
    lines = list(corpus_lines)
    if not lines:
        raise ValueError("empty corpus")
    for line in lines:
        line = line.rstrip("\n")
        vocab.update(line)
        padded = BOUNDARY * (order - 1) + line + BOUNDARY
        for i in range(order - 1, len(padded)):
            ctx = padded[i - (order - 1) : i] if order > 1 else ""
            lm.counts.setdefault(ctx, {})
            lm.counts[ctx][padded[i]] = lm.counts[ctx].get(padded[i], 0) + 1
    lm.vocab = sorted(vocab)
    return lm


# ---------------------------------------------------------------------------
# Prefix beam search
# ---------------------------------------------------------------------------

NEG = -math.inf


@dataclass
class BeamHypothesis:
    """One prefix with its blank/non-blank mass split and LM score."""

    prefix: str
    log_p_blank: float
    log_p_nonblank: float
    lm_log_prob: float

    def log_p_total(self) -> float:
        return np.logaddexp(self.log_p_blank, self.log_p_nonblank)

    def score(self, alpha: float, beta: float) -> float:
        return float(self.log_p_total() + alpha * self.lm_log_prob + beta * len(self.prefix))


def _beam_run(log_probs, symbols, lm, width, alpha, beta):
    """One prefix-beam pass at a fixed width.

    Both the kept prefixes and the candidate symbols per frame are capped
    at `width`, so width 1 follows exactly the per-frame argmax (greedy)
    trajectory. Returns (best final prefix, whether pruning ever bit).
    """
    T, V = log_probs.shape

    def score(entry, prefix):
        return np.logaddexp(entry[0], entry[1]) + alpha * entry[2] + beta * len(prefix)

    # prefix -> [log_p_blank, log_p_nonblank, lm_log_prob]
    beams: dict[str, list[float]] = {"": [0.0, NEG, 0.0]}
    pruned = False
    for t in range(T):
        lp = log_probs[t]
        # argsort on negated values keeps ties at the lowest index
        allowed = np.argsort(-lp, kind="stable")[:width]
        if width < V:
            pruned = True
        nxt: dict[str, list[float]] = defaultdict(lambda: [NEG, NEG, 0.0])
        for prefix, (pb, pnb, lm_lp) in beams.items():
            total = np.logaddexp(pb, pnb)
            last = prefix[-1] if prefix else ""
            for v in allowed:
                p_sym = lp[v]
                if v == BLANK:
                    entry = nxt[prefix]
                    entry[0] = np.logaddexp(entry[0], total + p_sym)
                    entry[2] = lm_lp
                    continue
                sym = symbols[v]
                if sym == last:
                    # repeat collapses into the same prefix...
                    entry = nxt[prefix]
                    entry[1] = np.logaddexp(entry[1], pnb + p_sym)
                    entry[2] = lm_lp
                    # ...only post-blank mass starts a fresh symbol
                    ext_mass = pb + p_sym
                else:
                    ext_mass = total + p_sym
                if ext_mass == NEG:
                    continue
                new_prefix = prefix + sym
                ext = nxt[new_prefix]
                ext[1] = np.logaddexp(ext[1], ext_mass)
                if ext[2] == 0.0:
                    ext[2] = lm_lp + (lm.log_prob(sym, prefix) if lm is not None else 0.0)
        if len(nxt) > width:
            pruned = True
        scored = sorted(nxt.items(), key=lambda kv: (-score(kv[1], kv[0]), kv[0]))
        beams = dict(scored[:width])
    return max(beams.items(), key=lambda kv: (score(kv[1], kv[0]), kv[0]))[0], pruned


def beam_search_decode(
    log_probs: np.ndarray,
    symbols,
    lm: CharLm | None = None,
    beam_width: int = 8,
    alpha: float = 0.0,
    beta: float = 0.0,
) -> str:
    """Prefix beam search over frame posteriors with shallow LM fusion.

    Prefixes are merged exactly via their blank/non-blank mass split; on
    each character extension the pruning score adds
    ``alpha * log p_lm(c | ctx) + beta``, and ties break lexicographically.

    The search widens iteratively: single passes run at widths
    1, 2, ..., `beam_width` (stopping early once pruning no longer bites)
    and the candidate with the best exact combined score
    ``log p_ctc + alpha * log p_lm + beta * |prefix|`` wins. Width 1 is
    exactly greedy decoding, and the returned score is monotone in
    `beam_width` by construction.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if any(len(s) != 1 for s in symbols[1:]):
        raise ValueError("beam search requires single-character symbols")

    candidates = []
    for width in range(1, beam_width + 1):
        prefix, pruned = _beam_run(log_probs, symbols, lm, width, alpha, beta)
        candidates.append(prefix)
        if not pruned:
            break

    def exact_score(prefix):
        mass = prefix_total_mass(log_probs, symbols, prefix)
        lm_lp = lm.sequence_log_prob(prefix) if lm is not None else 0.0
        return mass + alpha * lm_lp + beta * len(prefix)

    return max(sorted(set(candidates)), key=exact_score)


def prefix_total_mass(log_probs: np.ndarray, symbols, prefix: str) -> float:
    """Exact total posterior mass of all paths collapsing to `prefix`.

    Direct forward pass over the prefix's blank/non-blank split; used as
    an oracle-friendly scoring utility for small inventories.
    """
    T, V = log_probs.shape
    sym_to_idx = {symbols[v]: v for v in range(1, V)}
    chars = list(prefix)
    if any(c not in sym_to_idx for c in chars):
        raise ValueError("prefix contains symbols outside the inventory")
    n = len(chars)
    pb = np.full(n + 1, NEG)
    pnb = np.full(n + 1, NEG)
    pb[0] = 0.0
    for t in range(T):
        lp = log_probs[t]
        new_pb = np.full(n + 1, NEG)
        new_pnb = np.full(n + 1, NEG)
        for i in range(n + 1):
            total = np.logaddexp(pb[i], pnb[i])
            if total == NEG:
                continue
            new_pb[i] = np.logaddexp(new_pb[i], total + lp[BLANK])
            if i < n:
                idx = sym_to_idx[chars[i]]
                mass = pb[i] + lp[idx] if (i > 0 and chars[i] == chars[i - 1]) else total + lp[idx]
                new_pnb[i + 1] = np.logaddexp(new_pnb[i + 1], mass)
            if i > 0:
                new_pnb[i] = np.logaddexp(new_pnb[i], pnb[i] + lp[sym_to_idx[chars[i - 1]]])
        pb, pnb = new_pb, new_pnb
    return float(np.logaddexp(pb[n], pnb[n]))
