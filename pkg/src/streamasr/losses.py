"""Sequence losses over frame-level log-probabilities.

Contains the blank-interleaved forward-backward loss over characters, its
generalization to a fixed n-gram inventory (one lattice state may consume
several label characters), best-path alignment extraction, the frame-wise
cross-entropy loss against a fixed alignment, weighted loss combination,
and alignment cross-correlation analysis.

All dynamic programs run in natural-log space with log-sum-exp; absent
probability mass is represented by the large negative sentinel
``NEG_INF`` rather than IEEE infinity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

NEG_INF = -1.0e30

BLANK = 0


def _logsumexp_rows(*rows):
    acc = rows[0]
    for r in rows[1:]:
        acc = np.logaddexp(acc, r)
    return acc


@dataclass
class Alphabet:
    """Ordered output characters; index 0 is reserved for the blank."""

    chars: str

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("duplicate characters in alphabet")

    @property
    def size(self) -> int:
        return len(self.chars) + 1

    def encode(self, text: str) -> list[int]:
        try:
            return [self.chars.index(c) + 1 for c in text]
        except ValueError:
            raise ValueError(f"text contains characters outside the alphabet: {text!r}")

    def decode(self, indices) -> str:
        return "".join(self.chars[i - 1] for i in indices if i != BLANK)

    @property
    def symbols(self) -> list[str]:
        """Index-to-string table including the blank at 0."""
        return [""] + list(self.chars)


# ---------------------------------------------------------------------------
# Character-level forward-backward loss
# ---------------------------------------------------------------------------


def _extend_with_blanks(label):
    ext = [BLANK]
    for v in label:
        ext.extend((v, BLANK))
    return np.asarray(ext, dtype=np.intp)


def ctc_min_frames(label) -> int:
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats


def ctc_forward_backward(log_probs: np.ndarray, label):
    """Forward/backward tables over the blank-interleaved state sequence.

    Returns (ext_states, alpha, beta, total_log_prob); alpha includes the
    emission at its own frame, beta excludes it, so alpha + beta is the
    log-mass of all paths through a (frame, state) cell.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T = lp.shape[0]
    label = list(label)
    if T < ctc_min_frames(label):
        raise ValueError("label too long for input")
    ext = _extend_with_blanks(label)
    S = ext.size
    can_skip = np.zeros(S, dtype=bool)
    if S > 2:
        can_skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp[0, ext[0]]
    if S > 1:
        alpha[0, 1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay = prev
        step = np.full(S, NEG_INF)
        step[1:] = prev[:-1]
        skip = np.full(S, NEG_INF)
        skip[2:] = np.where(can_skip[2:], prev[:-2], NEG_INF)
        alpha[t] = _logsumexp_rows(stay, step, skip) + lp[t, ext]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, ext]
        stay = nxt
        step = np.full(S, NEG_INF)
        step[:-1] = nxt[1:]
        skip = np.full(S, NEG_INF)
        if S > 2:
            skip[:-2] = np.where(can_skip[2:], nxt[2:], NEG_INF)
        beta[t] = _logsumexp_rows(stay, step, skip)

    total = alpha[T - 1, S - 1]
    if S > 1:
        total = np.logaddexp(total, alpha[T - 1, S - 2])
    return ext, alpha, beta, float(total)


def ctc_loss(log_probs: np.ndarray, label) -> tuple[float, np.ndarray]:
    """Negative log-likelihood of `label` plus gradient w.r.t. `log_probs`.

    The gradient is the negated posterior state-occupancy marginal per
    output index; composed through a log-softmax it gives the usual
    "probabilities minus occupancy" form whose rows sum to zero.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    ext, alpha, beta, total = ctc_forward_backward(lp, label)
    if total < NEG_INF / 2:
        raise ValueError("label too long for input")
    occupancy = np.exp(alpha + beta - total)
    grad = np.zeros_like(lp)
    np.add.at(grad, (slice(None), ext), -occupancy)
    return -total, grad


# ---------------------------------------------------------------------------
# N-gram inventory and lattice
# ---------------------------------------------------------------------------


@dataclass
class GramSet:
    """Ordered n-gram inventory; output index of gram i is i + 1 (blank = 0).

    Must be self-covering: every character used by any gram also appears
    as a unigram, so any label over the inventory's characters admits at
    least the all-unigram decomposition.
    """

    grams: list[str]

    def __post_init__(self):
        if len(set(self.grams)) != len(self.grams):
            raise ValueError("duplicate gram")
        if any(g == "" for g in self.grams):
            raise ValueError("empty gram")
        unigrams = {g for g in self.grams if len(g) == 1}
        for g in self.grams:
            for ch in g:
                if ch not in unigrams:
                    raise ValueError(f"gram set must include all uni-grams; missing {ch!r}")

    @property
    def size(self) -> int:
        return len(self.grams)

    @property
    def max_len(self) -> int:
        return max(len(g) for g in self.grams)

    def index(self, gram: str) -> int:
        return self.grams.index(gram) + 1

    @property
    def symbols(self) -> list[str]:
        return [""] + list(self.grams)

    @classmethod
    def unigrams(cls, alphabet: Alphabet) -> "GramSet":
        return cls(list(alphabet.chars))

    @classmethod
    def from_file(cls, path) -> "GramSet":
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines = lines[:-1]  # trailing newline
        if any(line == "" for line in lines):
            raise ValueError("blank line in gram set file")
        return cls(lines)

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for g in self.grams:
                fh.write(g + "\n")


@dataclass
class GramLattice:
    """States and transitions of the n-gram forward-backward graph.

    A state is either the blank after label position i, or "arrived at
    position i through gram g". All states carry a self-loop. Only states
    on some initial-to-final path are kept.
    """

    label: str
    states: list[tuple]
    emission: np.ndarray
    in_edges: list[list[int]]
    out_edges: list[list[int]]
    initial: list[int]
    final: list[int]

    @property
    def n_states(self) -> int:
        return len(self.states)


def build_gram_lattice(label: str, grams: GramSet) -> GramLattice:
    """Construct the decomposition-and-alignment graph for one label.

    Transitions: every state self-loops; blank_i starts any gram matching
    the label at position i+1; a gram state returns to its blank or chains
    directly into the next gram only when the boundary characters differ
    (the generalization of the repeated-character rule; with a
    unigram-only inventory this is exactly the character-level graph).
    """
    unigrams = {g for g in grams.grams if len(g) == 1}
    for ch in label:
        if ch not in unigrams:
            raise ValueError("uncoverable label")
    L = len(label)
    states: list[tuple] = [("blank", i) for i in range(L + 1)]
    gram_id: dict[tuple[int, str], int] = {}
    for i in range(1, L + 1):
        for g in grams.grams:
            if len(g) <= i and label[i - len(g) : i] == g:
                gram_id[(i, g)] = len(states)
                states.append(("gram", i, g))

    n = len(states)
    out = [set() for _ in range(n)]
    for s in range(n):
        out[s].add(s)  # self-loop
    for (i, g), sid in gram_id.items():
        out[sid].add(i)  # gram -> blank at its own position (blank ids are 0..L)
    for i in range(L + 1):
        for (j, g), sid in gram_id.items():
            if j - len(g) == i:
                out[i].add(sid)  # blank_i starts gram g at position i+1
    for (i, g), sid in gram_id.items():
        for (j, g2), sid2 in gram_id.items():
            if j - len(g2) == i and g2[0] != g[-1]:
                out[sid].add(sid2)

    initial = [0] + [sid for (i, g), sid in gram_id.items() if i == len(g)]
    final = [L] + [sid for (i, g), sid in gram_id.items() if i == L]

    # keep only states reachable from an initial state and co-reachable to a
    # final one
    fwd_reach = _closure(initial, out)
    in_ = [set() for _ in range(n)]
    for s in range(n):
        for d in out[s]:
            in_[d].add(s)
    bwd_reach = _closure(final, in_)
    keep = sorted(fwd_reach & bwd_reach)
    if not keep:
        raise ValueError("label too long for input")
    remap = {old: new for new, old in enumerate(keep)}

    kept_states = [states[old] for old in keep]
    emission = np.zeros(len(keep), dtype=np.intp)
    for new, old in enumerate(keep):
        st = states[old]
        emission[new] = BLANK if st[0] == "blank" else grams.index(st[2])
    out_edges = [[remap[d] for d in sorted(out[old]) if d in remap] for old in keep]
    in_edges = [[] for _ in keep]
    for s, dsts in enumerate(out_edges):
        for d in dsts:
            in_edges[d].append(s)
    return GramLattice(
        label=label,
        states=kept_states,
        emission=emission,
        in_edges=in_edges,
        out_edges=out_edges,
        initial=sorted(remap[s] for s in initial if s in remap),
        final=sorted(remap[s] for s in final if s in remap),
    )


def _closure(seeds, edges):
    seen = set(seeds)
    stack = list(seeds)
    while stack:
        s = stack.pop()
        for d in edges[s]:
            if d not in seen:
                seen.add(d)
                stack.append(d)
    return seen


def gramctc_loss(log_probs: np.ndarray, label: str, lattice: GramLattice) -> tuple[float, np.ndarray]:
    """Forward-backward loss over an n-gram lattice.

    `log_probs` has one column per inventory entry plus the blank at 0.
    The loss marginalizes over every (decomposition, alignment) pair; the
    gradient is the negated posterior marginal per emission index.
    """
    if lattice.label != label:
        raise ValueError("lattice was built for a different label")
    lp = np.asarray(log_probs, dtype=np.float64)
    T = lp.shape[0]
    n = lattice.n_states
    em = lattice.emission

    alpha = np.full((T, n), NEG_INF)
    alpha[0, lattice.initial] = lp[0, em[lattice.initial]]
    for t in range(1, T):
        prev = alpha[t - 1]
        cur = np.full(n, NEG_INF)
        for s in range(n):
            acc = NEG_INF
            for src in lattice.in_edges[s]:
                acc = np.logaddexp(acc, prev[src])
            cur[s] = acc + lp[t, em[s]]
        alpha[t] = cur

    total = NEG_INF
    for s in lattice.final:
        total = np.logaddexp(total, alpha[T - 1, s])
    total = float(total)
    if total < NEG_INF / 2:
        raise ValueError("label too long for input")

    beta = np.full((T, n), NEG_INF)
    beta[T - 1, lattice.final] = 0.0
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1, em]
        for s in range(n):
            acc = NEG_INF
            for dst in lattice.out_edges[s]:
                acc = np.logaddexp(acc, nxt[dst])
            beta[t, s] = acc

    occupancy = np.exp(alpha + beta - total)
    grad = np.zeros_like(lp)
    np.add.at(grad, (slice(None), em), -occupancy)
    return -total, grad


# ---------------------------------------------------------------------------
# Best-path alignment and frame-wise cross-entropy
# ---------------------------------------------------------------------------


@dataclass
class Alignment:
    """Per-frame emission indices (0 = blank); collapses back to its label."""

    emissions: np.ndarray

    def __post_init__(self):
        self.emissions = np.asarray(self.emissions, dtype=np.intp)

    def __len__(self) -> int:
        return self.emissions.size

    def collapse(self) -> list[int]:
        out = []
        prev = None
        for e in self.emissions:
            if e != prev and e != BLANK:
                out.append(int(e))
            prev = e
        return out

    def indicator(self) -> np.ndarray:
        return (self.emissions != BLANK).astype(np.float64)

    def shifted(self, delay: int) -> "Alignment":
        """Alignment delayed by `delay` frames (blank-filled at the start)."""
        if delay == 0:
            return Alignment(self.emissions.copy())
        out = np.full_like(self.emissions, BLANK)
        if delay > 0:
            out[delay:] = self.emissions[: self.emissions.size - delay]
        else:
            out[:delay] = self.emissions[-delay:]
        return Alignment(out)


def viterbi_align(log_probs: np.ndarray, label) -> Alignment:
    """Single most probable path through the blank-interleaved lattice.

    Ties prefer remaining in the current lattice state, and the final
    blank over the final symbol, which keeps the result deterministic.
    """
    lp = np.asarray(log_probs, dtype=np.float64)
    T = lp.shape[0]
    label = list(label)
    if T < ctc_min_frames(label):
        raise ValueError("label too long for input")
    ext = _extend_with_blanks(label)
    S = ext.size
    delta = np.full((T, S), NEG_INF)
    back = np.zeros((T, S), dtype=np.intp)
    delta[0, 0] = lp[0, ext[0]]
    back[0, 0] = 0
    if S > 1:
        delta[0, 1] = lp[0, ext[1]]
        back[0, 1] = 1
    for t in range(1, T):
        for s in range(S):
            best, arg = delta[t - 1, s], s  # staying wins ties
            if s >= 1 and delta[t - 1, s - 1] > best:
                best, arg = delta[t - 1, s - 1], s - 1
            if s >= 2 and ext[s] != BLANK and ext[s] != ext[s - 2] and delta[t - 1, s - 2] > best:
                best, arg = delta[t - 1, s - 2], s - 2
            delta[t, s] = best + lp[t, ext[s]]
            back[t, s] = arg
    s = S - 1  # final blank wins ties
    if S > 1 and delta[T - 1, S - 2] > delta[T - 1, S - 1]:
        s = S - 2
    if delta[T - 1, s] < NEG_INF / 2:
        raise ValueError("label too long for input")
    path = np.empty(T, dtype=np.intp)
    for t in range(T - 1, -1, -1):
        path[t] = ext[s]
        s = back[t, s]
    return Alignment(path)


def ce_alignment_loss(log_probs: np.ndarray, alignment: Alignment) -> tuple[float, np.ndarray]:
    """Mean frame-wise negative log-probability of the aligned emissions."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T = lp.shape[0]
    if len(alignment) != T:
        raise ValueError("alignment mismatch")
    idx = alignment.emissions
    loss = float(-np.mean(lp[np.arange(T), idx]))
    grad = np.zeros_like(lp)
    grad[np.arange(T), idx] = -1.0 / T
    return loss, grad


def joint_loss(terms):
    """Weighted combination of (loss, gradient, weight) triples.

    Gradients may be arrays (summed directly; shapes must match) or dicts
    keyed by output head, which are merged so per-head losses can share a
    trunk.
    """
    terms = list(terms)
    if not terms:
        raise ValueError("no terms")
    weights = [w for _, _, w in terms]
    if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
        raise ValueError("weights must be >= 0 with at least one positive")
    total = sum(w * l for l, _, w in terms)
    if all(isinstance(g, dict) for _, g, _ in terms):
        grad: dict[str, np.ndarray] = {}
        for _, g, w in terms:
            for key, arr in g.items():
                if key in grad:
                    grad[key] = grad[key] + w * arr
                else:
                    grad[key] = w * arr
        return total, grad
    grad_arr = None
    for _, g, w in terms:
        contrib = w * np.asarray(g)
        grad_arr = contrib if grad_arr is None else grad_arr + contrib
    return total, grad_arr


# ---------------------------------------------------------------------------
# Alignment cross-correlation
# ---------------------------------------------------------------------------


def alignment_xcorr(a, b, max_lag: int):
    """Normalized cross-correlation of non-blank emission indicators.

    Returns (lags, correlations, peak_lag) over lags in
    [-max_lag, max_lag]; a positive peak lag means `b` trails `a`.
    """
    ia = a.indicator() if isinstance(a, Alignment) else np.asarray(a, dtype=np.float64)
    ib = b.indicator() if isinstance(b, Alignment) else np.asarray(b, dtype=np.float64)
    if ia.size != ib.size:
        raise ValueError("alignments must have equal lengths")
    if not np.any(ia) or not np.any(ib):
        raise ValueError("empty alignment")
    za = ia - ia.mean()
    zb = ib - ib.mean()
    norm = np.linalg.norm(za) * np.linalg.norm(zb)
    lags = np.arange(-max_lag, max_lag + 1)
    corr = np.zeros(lags.size)
    n = ia.size
    for k, lag in enumerate(lags):
        if lag >= 0:
            overlap = n - lag
            if overlap > 0:
                corr[k] = np.dot(za[:overlap], zb[lag:]) / norm
        else:
            overlap = n + lag
            if overlap > 0:
                corr[k] = np.dot(za[-lag:], zb[:overlap]) / norm
    peak = int(lags[int(np.argmax(corr))])
    return lags, corr, peak
