"""Desk-scale streaming speech recognition toolkit.

Numpy implementations of a trainable normalization frontend, 2-D
convolution and gated recurrent layers (including the chunked
low-latency bidirectional variant), character and n-gram sequence
losses, greedy/beam decoding with character LM fusion, a deterministic
trainer, and packetized streaming inference with a latency benchmark.
"""

from .frontend import (
    AudioUtterance,
    FeatureStats,
    ImpulseResponse,
    PcenParams,
    Spectrogram,
    SpectrogramConfig,
    augment_noise,
    augment_rir,
    compute_log_spectrogram,
    compute_power_spectrogram,
    feature_normalize,
    pcen_backward,
    pcen_forward,
    pcen_smoother,
    synth_rir,
)
from .losses import (
    Alignment,
    Alphabet,
    GramLattice,
    GramSet,
    alignment_xcorr,
    build_gram_lattice,
    ce_alignment_loss,
    ctc_loss,
    gramctc_loss,
    joint_loss,
    viterbi_align,
)
from .decoder import CharLm, beam_search_decode, greedy_decode, train_char_lm
from .metrics import MetricsReport, cer, edit_distance, wer
from .model import (
    Model,
    ModelSpec,
    RecurrentSpec,
    baseline_spec,
    bidirectional_spec,
    build_model,
    convert_bgru_to_lc,
    is_deployable,
    load_checkpoint,
    lookahead_frames,
    model_forward,
    proposed_spec,
    save_checkpoint,
)
from .streaming import Packet, StreamSession, StreamStats, bench, serve, session_open
from .synthetic import SyntheticDataset, dataset_grams, gen_synthetic_dataset
from .trainer import RunLog, TrainConfig, Trainer, sgd_nesterov_step, sortagrad_order, train

__version__ = "0.1.0"
