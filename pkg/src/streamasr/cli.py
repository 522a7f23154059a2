"""Command-line entry point.

Subcommands: train, eval, decode, align, xcorr, gradcheck, serve, bench,
synth-data, lm-train. Experiment settings come from a ``--config`` file
of ``key = value`` lines with ``--set key=value`` overrides; every run
that produces outputs writes its effective config snapshot next to them.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, apply_overrides, get, load_dataset, load_wav, save_wav, write_snapshot
from .decoder import CharLm, beam_search_decode, greedy_decode, train_char_lm
from .frontend import compute_power_spectrogram
from .gradcheck import BUILDERS, grad_check, grad_check_all
from .losses import Alignment, GramSet, alignment_xcorr, viterbi_align
from .metrics import MetricsReport
from .model import PRESETS, build_model, load_checkpoint, save_checkpoint
from .streaming import bench as run_bench
from .streaming import serve as make_server
from .synthetic import dataset_grams, gen_synthetic_dataset
from .trainer import TrainConfig, Trainer


def _load_effective_config(args) -> dict[str, str]:
    config = cfgmod.load_config(args.config) if getattr(args, "config", None) else {}
    return apply_overrides(config, getattr(args, "set", None))


def _resolve_grams(cfg, dataset):
    choice = get(cfg, "model.grams")
    if choice is None:
        return None
    if choice == "auto":
        return dataset_grams(dataset, max_len=get(cfg, "model.gram_max_len", 3, int))
    return GramSet.from_file(choice).grams


def _build_spec(cfg, dataset, grams):
    preset = get(cfg, "model.preset", "proposed")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset: {preset}")
    kwargs = {}
    if preset in ("baseline", "proposed"):
        kwargs["time_resolution"] = get(cfg, "model.time_resolution", 2, int)
    return PRESETS[preset](
        dataset.alphabet,
        width=get(cfg, "model.width", 96, int),
        sample_rate=dataset.sample_rate,
        grams=grams,
        **kwargs,
    )


def _train_config(cfg) -> TrainConfig:
    return TrainConfig(
        epochs=get(cfg, "train.epochs", 4, int),
        batch_size=get(cfg, "train.batch_size", 16, int),
        lr=get(cfg, "train.lr", 3e-4, float),
        momentum=get(cfg, "train.momentum", 0.9, float),
        clip_norm=get(cfg, "train.clip_norm", 400.0, float),
        seed=get(cfg, "train.seed", 0, int),
        loss=get(cfg, "train.loss", "ctc"),
        ce_epochs=get(cfg, "train.ce_epochs", 6, int),
        ce_weight=get(cfg, "train.ce_weight", 0.5, float),
        ctc_weight=get(cfg, "train.ctc_weight", 0.5, float),
        gram_weight=get(cfg, "train.gram_weight", 0.0, float),
        align_delay=get(cfg, "train.align_delay", 0, int),
        noise_prob=get(cfg, "train.noise_prob", 0.4, float),
        rir_prob=get(cfg, "train.rir_prob", 0.2, float),
    )


def _dataset_from_config(cfg):
    manifest = get(cfg, "data.manifest")
    if manifest:
        return load_dataset(manifest)
    return gen_synthetic_dataset(
        seed=get(cfg, "data.synthetic.seed", 0, int),
        n=get(cfg, "data.synthetic.n", 200, int),
        alphabet=get(cfg, "data.synthetic.alphabet", "abcdefgh"),
        min_label_len=get(cfg, "data.synthetic.min_label_len", 6, int),
        max_label_len=get(cfg, "data.synthetic.max_label_len", 16, int),
        sample_rate=get(cfg, "data.synthetic.sample_rate", 4000, int),
        n_words=get(cfg, "data.synthetic.n_words", 12, int),
    )


def cmd_train(args) -> int:
    cfg = _load_effective_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _dataset_from_config(cfg)
    grams = _resolve_grams(cfg, dataset)
    spec = _build_spec(cfg, dataset, grams)
    align_ref = None
    ref_path = get(cfg, "train.align_ref")
    if ref_path:
        align_ref, _ = load_checkpoint(ref_path)
    tcfg = _train_config(cfg)
    trainer = Trainer(tcfg, spec, dataset, align_ref=align_ref)
    log = trainer.train()
    save_checkpoint(
        trainer.model,
        out_dir / "checkpoint.ckpt",
        metadata={"epochs": tcfg.epochs, "seed": tcfg.seed, "loss": tcfg.loss},
    )
    log.write(out_dir / "run.jsonl")
    write_snapshot(cfg, out_dir / "config.snapshot")
    for rec in log.records:
        print(json.dumps(rec, sort_keys=True))
    return 0


def _decode_one(model, utt, cfg):
    power = compute_power_spectrogram(utt, model.spec.spectrogram_config)
    out = model.forward(power.values, mode="eval")
    beam_width = get(cfg, "decode.beam_width", 1, int)
    lm_path = get(cfg, "decode.lm")
    if beam_width <= 1 and lm_path is None:
        return greedy_decode(out["char"], model.alphabet_symbols)
    lm = CharLm.load(lm_path) if lm_path else None
    return beam_search_decode(
        out["char"],
        model.alphabet_symbols,
        lm=lm,
        beam_width=beam_width,
        alpha=get(cfg, "decode.alpha", 0.0, float),
        beta=get(cfg, "decode.beta", 0.0, float),
    )


def cmd_eval(args) -> int:
    cfg = _load_effective_config(args)
    if args.hyp:
        refs = [line.split("\t", 1)[1] for line in Path(args.manifest).read_text().splitlines() if line.strip()]
        hyps = [line.split("\t", 1)[1] for line in Path(args.hyp).read_text().splitlines() if line.strip()]
        if len(refs) != len(hyps):
            print("error: ref/hyp length mismatch", file=sys.stderr)
            return 1
        report = MetricsReport.from_pairs(zip(refs, hyps))
    else:
        if not args.ckpt:
            print("error: eval needs --ckpt or --hyp", file=sys.stderr)
            return 2
        model, _ = load_checkpoint(args.ckpt)
        dataset = load_dataset(args.manifest)
        pairs = []
        for utt in dataset.utterances:
            pairs.append((utt.transcript, _decode_one(model, utt, cfg)))
        report = MetricsReport.from_pairs(pairs)
    print(json.dumps(report.as_record(), sort_keys=True))
    print(f"CER {report.cer:.4f}  WER {report.wer:.4f}  ({report.utterances} utterances)")
    return 0


def cmd_decode(args) -> int:
    cfg = _load_effective_config(args)
    model, _ = load_checkpoint(args.ckpt)
    utt = load_wav(args.audio)
    if utt.sample_rate != model.spec.sample_rate:
        print("error: sample rate mismatch with model", file=sys.stderr)
        return 1
    print(_decode_one(model, utt, cfg))
    return 0


def cmd_align(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.manifest)
    index = {c: i + 1 for i, c in enumerate(model.spec.alphabet)}
    out_path = Path(args.out)
    with open(out_path, "w", encoding="utf-8") as fh:
        for utt in dataset.utterances:
            power = compute_power_spectrogram(utt, model.spec.spectrogram_config)
            lp = model.forward(power.values, mode="eval")["char"]
            align = viterbi_align(lp, [index[c] for c in utt.transcript])
            fh.write(json.dumps({"transcript": utt.transcript, "emissions": align.emissions.tolist()}) + "\n")
    print(f"wrote {out_path}")
    return 0


def cmd_xcorr(args) -> int:
    def read(path):
        return [Alignment(json.loads(line)["emissions"]) for line in Path(path).read_text().splitlines() if line.strip()]

    a_list, b_list = read(args.a), read(args.b)
    if len(a_list) != len(b_list):
        print("error: alignment files differ in length", file=sys.stderr)
        return 1
    peaks = []
    for a, b in zip(a_list, b_list):
        n = min(len(a), len(b))
        _, _, peak = alignment_xcorr(a.emissions[:n] != 0, b.emissions[:n] != 0, args.max_lag)
        peaks.append(peak)
    print(json.dumps({"peaks": peaks, "median_peak": float(np.median(peaks))}))
    return 0


def cmd_gradcheck(args) -> int:
    reports = grad_check_all(args.seed) if args.all else [grad_check(args.component, args.seed)]
    ok = True
    for rep in reports:
        status = "ok" if rep.passed else "FAIL"
        ok &= rep.passed
        print(f"{rep.component:<10} max_rel_err={rep.max_rel_err:.3e} worst={rep.worst_param or '-'} {status}")
    return 0 if ok else 1


def cmd_serve(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    server = make_server(model, args.host, args.port)
    print(f"listening on {server.server_address[0]}:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_bench(args) -> int:
    cfg = _load_effective_config(args)
    model, _ = load_checkpoint(args.ckpt)
    dataset = _dataset_from_config(cfg)
    stats = run_bench(
        model,
        dataset.holdout or dataset.train,
        n_streams=get(cfg, "bench.streams", 10, int),
        packet_ms=get(cfg, "bench.packet_ms", 100.0, float),
        mode=get(cfg, "bench.mode", "inprocess"),
    )
    for rec in stats.records():
        print(json.dumps(rec, sort_keys=True))
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "bench.jsonl", "w", encoding="utf-8") as fh:
            for rec in stats.records():
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        write_snapshot(cfg, out_dir / "config.snapshot")
    return 0


def cmd_synth_data(args) -> int:
    cfg = _load_effective_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = _dataset_from_config(cfg)
    entries = []
    for i, utt in enumerate(dataset.utterances):
        name = f"utt{i:05d}.wav"
        save_wav(out_dir / name, utt)
        entries.append((name, utt.transcript))
    cfgmod.write_manifest(out_dir / "manifest.tsv", entries)
    if "manifest" not in dataset.descriptor:
        cfgmod.write_synthetic_descriptor(out_dir / "descriptor.synth", dataset.descriptor)
    write_snapshot(cfg, out_dir / "config.snapshot")
    print(f"wrote {len(entries)} utterances to {out_dir}")
    return 0


def cmd_lm_train(args) -> int:
    lines = Path(args.corpus).read_text(encoding="utf-8").splitlines()
    lm = train_char_lm(lines, order=args.order, k=args.k)
    lm.save(args.out)
    print(f"trained order-{args.order} model on {len(lines)} lines -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamasr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a model or hypothesis manifest")
    common(p)
    p.add_argument("--manifest", required=True, help="reference manifest")
    p.add_argument("--ckpt", help="checkpoint to decode with")
    p.add_argument("--hyp", help="hypothesis manifest (skips decoding)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("decode", help="transcribe one WAV file")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--audio", required=True)
    p.set_defaults(fn=cmd_decode)

    p = sub.add_parser("align", help="write best-path alignments for a manifest")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("xcorr", help="cross-correlate two alignment files")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--max-lag", type=int, default=10)
    p.set_defaults(fn=cmd_xcorr)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--all", action="store_true")
    p.add_argument("--component", choices=sorted(BUILDERS) + ["selftest"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the streaming socket server")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8763)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("bench", help="last-packet-latency benchmark")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("synth-data", help="render a synthetic dataset to WAV + manifest")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("lm-train", help="train a character n-gram LM")
    p.add_argument("--corpus", required=True)
    p.add_argument("--order", type=int, default=5)
    p.add_argument("--k", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_lm_train)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors
        return int(exc.code or 0)
    if args.command == "gradcheck" and not args.all and not args.component:
        print("error: gradcheck needs --all or --component", file=sys.stderr)
        return 2
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
