"""Training loop: Nesterov SGD with gradient clipping, duration curriculum
for the first epoch, waveform augmentation hooks, and the loss schedules
(pure sequence loss, frame-wise pre-training, or weighted joint losses)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .decoder import greedy_decode
from .frontend import (
    AudioUtterance,
    FeatureStats,
    compute_power_spectrogram,
    augment_noise,
    augment_rir,
    synth_rir,
    LOG_FLOOR,
)
from .losses import Alignment, GramSet, build_gram_lattice, ce_alignment_loss, ctc_loss, gramctc_loss, viterbi_align
from .metrics import MetricsReport
from .model import Model, ModelSpec, PRESETS, build_model, total_time_stride
from .synthetic import SyntheticDataset


@dataclass
class TrainConfig:
    epochs: int = 4
    batch_size: int = 16
    lr: float = 3e-4
    momentum: float = 0.9
    clip_norm: float = 400.0
    seed: int = 0
    # schedule: "ctc" | "gramctc" | "pretrain" (frame CE then ctc) | "joint"
    loss: str = "ctc"
    ce_epochs: int = 6
    ce_weight: float = 0.5
    ctc_weight: float = 0.5
    gram_weight: float = 0.0
    align_delay: int = 0
    noise_prob: float = 0.4
    rir_prob: float = 0.2
    snr_db_range: tuple[float, float] = (5.0, 30.0)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss not in ("ctc", "gramctc", "pretrain", "joint"):
            raise ValueError(f"unknown loss schedule {self.loss!r}")


def paper_train_config(**overrides) -> TrainConfig:
    """The full-scale hyperparameters; desk defaults are far smaller."""
    cfg = TrainConfig(batch_size=512, lr=7e-4, momentum=0.99)
    return replace(cfg, **overrides)


@dataclass
class RunLog:
    """Append-only per-epoch records plus the config snapshot."""

    config: dict
    records: list = field(default_factory=list)

    def append(self, **record):
        self.records.append(record)

    def write(self, path):
        import json

        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def sortagrad_order(durations, epoch: int, batch_size: int, seed: int) -> list[list[int]]:
    """Batch index lists: epoch 0 sorted ascending by duration (curriculum),
    later epochs a seeded shuffle."""
    n = len(durations)
    if n == 0:
        raise ValueError("empty dataset")
    if epoch == 0:
        order = sorted(range(n), key=lambda i: (durations[i], i))
    else:
        order = list(np.random.default_rng([seed, epoch]).permutation(n))
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def sgd_nesterov_step(params: dict, velocity: dict, grads: dict, lr: float, mu: float, clip_norm: float):
    """One update: clip the global gradient norm (rescale, preserving the
    direction), then v' = mu v + g and theta' = theta - lr (g + mu v').

    Returns (new params, new velocity); rejects non-finite gradients.
    """
    sq = 0.0
    for g in grads.values():
        s = float(np.sum(np.asarray(g) ** 2))
        if not math.isfinite(s):
            raise ValueError("divergence detected")
        sq += s
    norm = math.sqrt(sq)
    scale = clip_norm / norm if (clip_norm and norm > clip_norm) else 1.0
    new_params, new_velocity = {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k]) * scale if k in grads else np.zeros_like(p)
        v = velocity.get(k)
        v = mu * (v if v is not None else 0.0) + g
        new_velocity[k] = v
        new_params[k] = p - lr * (g + mu * v)
    return new_params, new_velocity


def _augment(utt: AudioUtterance, cfg: TrainConfig, seed_key) -> AudioUtterance:
    rng = np.random.default_rng(seed_key)
    out = utt
    if cfg.noise_prob > 0 and rng.random() < cfg.noise_prob:
        noise = AudioUtterance(
            np.clip(rng.standard_normal(out.samples.size) * 0.1, -1, 1), out.sample_rate
        )
        snr = rng.uniform(*cfg.snr_db_range)
        try:
            out = augment_noise(out, noise, snr)
        except ValueError:
            pass  # silent utterance: skip the mix
    if cfg.rir_prob > 0 and rng.random() < cfg.rir_prob:
        rir = synth_rir(int(rng.integers(2**31)), 40.0, 2e-3, out.sample_rate)
        out = augment_rir(out, rir)
    return AudioUtterance(out.samples, out.sample_rate, utt.transcript)


def _feature_stats(model: Model, utterances) -> FeatureStats:
    cfg = model.spec.spectrogram_config
    logs = []
    for utt in utterances:
        power = compute_power_spectrogram(utt, cfg)
        logs.append(np.log(power.values + LOG_FLOOR))
    stacked = np.concatenate(logs, axis=0)
    return FeatureStats(stacked.mean(axis=0), stacked.var(axis=0))


class Trainer:
    """Single-owner training loop over an in-memory dataset.

    Deterministic given (seed, config, dataset): batch order, augmentation
    draws and gradient reduction order are all fixed.
    """

    def __init__(
        self,
        config: TrainConfig,
        spec: ModelSpec,
        dataset: SyntheticDataset,
        align_ref: Model | None = None,
    ):
        self.config = config
        self.dataset = dataset
        self.model = build_model(spec, seed=config.seed)
        self.align_ref = align_ref
        if config.loss in ("pretrain", "joint") and config.ce_weight > 0 and align_ref is None:
            raise ValueError("CE schedules need a reference checkpoint for alignments")
        if config.loss == "gramctc" or config.gram_weight > 0:
            if not spec.grams:
                raise ValueError("gram inventory missing from the model spec")
        self.grams = GramSet(spec.grams) if spec.grams else None
        self._lattices: dict[str, object] = {}
        self._align_cache: dict[int, Alignment] = {}
        self.alphabet_index = {c: i + 1 for i, c in enumerate(spec.alphabet)}

    # -- loss plumbing ------------------------------------------------------

    def _encode(self, text: str) -> list[int]:
        return [self.alphabet_index[c] for c in text]

    def _lattice(self, text: str):
        if text not in self._lattices:
            self._lattices[text] = build_gram_lattice(text, self.grams)
        return self._lattices[text]

    def _reference_alignment(self, idx: int, features, T_out: int) -> Alignment:
        if idx in self._align_cache:
            return self._align_cache[idx]
        out = self.align_ref.forward(features, mode="eval")
        align = viterbi_align(out["char"], self._encode(self.dataset.train[idx].transcript))
        if self.config.align_delay:
            align = align.shifted(self.config.align_delay)
        if len(align) != T_out:
            raise ValueError("reference and trained models must share the total stride")
        if self.config.noise_prob == 0 and self.config.rir_prob == 0:
            self._align_cache[idx] = align
        return align

    def _utterance_loss(self, idx, features, outputs, epoch):
        """Returns (loss value, per-head gradient dict) for one utterance."""
        cfg = self.config
        text = self.dataset.train[idx].transcript
        label = self._encode(text)
        terms = []
        mode = cfg.loss
        if mode == "pretrain":
            mode = "ce_only" if epoch < cfg.ce_epochs else "ctc"
        if mode == "ctc":
            loss, grad = ctc_loss(outputs["char"], label)
            terms.append((loss, {"char": grad}, 1.0))
        elif mode == "gramctc":
            loss, grad = gramctc_loss(outputs["gram"], text, self._lattice(text))
            terms.append((loss, {"gram": grad}, 1.0))
        elif mode == "ce_only":
            align = self._reference_alignment(idx, features, outputs["char"].shape[0])
            loss, grad = ce_alignment_loss(outputs["char"], align)
            terms.append((loss, {"char": grad}, 1.0))
        else:  # joint
            if cfg.ce_weight > 0:
                align = self._reference_alignment(idx, features, outputs["char"].shape[0])
                l_ce, g_ce = ce_alignment_loss(outputs["char"], align)
                terms.append((l_ce, {"char": g_ce}, cfg.ce_weight))
            if cfg.ctc_weight > 0:
                l_ctc, g_ctc = ctc_loss(outputs["char"], label)
                terms.append((l_ctc, {"char": g_ctc}, cfg.ctc_weight))
            if cfg.gram_weight > 0:
                l_g, g_g = gramctc_loss(outputs["gram"], text, self._lattice(text))
                terms.append((l_g, {"gram": g_g}, cfg.gram_weight))
        from .losses import joint_loss

        return joint_loss(terms)

    # -- evaluation ---------------------------------------------------------

    def evaluate(self, utterances) -> MetricsReport:
        cfg_spec = self.model.spec.spectrogram_config
        head = "gram" if self.config.loss == "gramctc" else "char"
        symbols = self.model.gram_symbols if head == "gram" else self.model.alphabet_symbols
        pairs = []
        for utt in utterances:
            power = compute_power_spectrogram(utt, cfg_spec)
            out = self.model.forward(power.values, mode="eval")
            pairs.append((utt.transcript, greedy_decode(out[head], symbols)))
        return MetricsReport.from_pairs(pairs)

    # -- main loop ----------------------------------------------------------

    def train(self) -> RunLog:
        cfg = self.config
        log = RunLog(config={"train": cfg.__dict__ | {"snr_db_range": list(cfg.snr_db_range)}})
        if self.model.spec.frontend == "log":
            stats = _feature_stats(self.model, self.dataset.train)
            self.model.buffers["frontend.mean"][...] = stats.mean
            self.model.buffers["frontend.var"][...] = stats.var
        velocity: dict[str, np.ndarray] = {}
        durations = [u.duration_s for u in self.dataset.train]
        spec_cfg = self.model.spec.spectrogram_config
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            epoch_loss, n_items, rejected = 0.0, 0, 0
            for batch in sortagrad_order(durations, epoch, cfg.batch_size, cfg.seed):
                feats = []
                for idx in batch:
                    utt = _augment(self.dataset.train[idx], cfg, [cfg.seed, epoch, idx])
                    feats.append(compute_power_spectrogram(utt, spec_cfg).values)
                outs, cache = self.model.forward_batch(feats, mode="train")
                grad_outs, losses = [], []
                for idx, f, out in zip(batch, feats, outs):
                    loss, grad = self._utterance_loss(idx, f, out, epoch)
                    losses.append(loss)
                    grad_outs.append({k: v / len(batch) for k, v in grad.items()})
                grads = self.model.backward_batch(grad_outs, cache)
                try:
                    new_params, velocity = sgd_nesterov_step(
                        self.model.params, velocity, grads, cfg.lr, cfg.momentum, cfg.clip_norm
                    )
                except ValueError:
                    rejected += 1
                    continue
                for k in self.model.params:
                    self.model.params[k][...] = new_params[k]
                epoch_loss += float(np.sum(losses))
                n_items += len(batch)
            report = self.evaluate(self.dataset.holdout) if self.dataset.holdout else None
            log.append(
                epoch=epoch,
                loss=epoch_loss / max(n_items, 1),
                cer=report.cer if report else None,
                wer=report.wer if report else None,
                seconds=time.perf_counter() - t0,
                rejected_steps=rejected,
            )
        return log


def train(
    config: TrainConfig,
    dataset: SyntheticDataset,
    spec: ModelSpec | None = None,
    preset: str = "proposed",
    width: int = 96,
    align_ref: Model | None = None,
    grams: list[str] | None = None,
):
    """Build, train and return (model, run log) on an in-memory dataset."""
    if spec is None:
        spec = PRESETS[preset](dataset.alphabet, width=width, sample_rate=dataset.sample_rate, grams=grams)
    trainer = Trainer(config, spec, dataset, align_ref=align_ref)
    run_log = trainer.train()
    return trainer.model, run_log
