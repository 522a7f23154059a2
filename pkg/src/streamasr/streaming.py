"""Packetized streaming inference and the last-packet-latency benchmark.

A session carries per-layer state (spectrogram sample buffer, smoother
state, convolution left-context, recurrent hidden states, pending chunk
frames) so that feeding audio in packets of any size emits exactly the
log-probabilities the offline forward pass would produce, frame for
frame. Emitted frames are never revised.

Wire protocol (socket mode), all integers little-endian:
``magic "SVA1" | type u8 | stream_id u32 | seq u32 | payload_len u32 |
payload``, with types 0=AUDIO (PCM16LE mono), 1=END, 2=PARTIAL, 3=FINAL
(transcript payloads UTF-8).
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .decoder import greedy_decode
from .frontend import LOG_FLOOR, NORM_EPS, PcenParams
from .layers import log_softmax, sigmoid
from .model import Model, _ConvStage, _FrontendStage, _HeadStage, _LaConvStage, _RecurrentStage, is_deployable, lookahead_frames
from . import layers


def pcm16_encode(samples: np.ndarray) -> bytes:
    clipped = np.clip(samples, -1.0, 1.0)
    return (clipped * 32767.0).astype("<i2").tobytes()


def pcm16_decode(payload: bytes) -> np.ndarray:
    return np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32767.0


@dataclass
class Packet:
    stream_id: int
    seq: int
    payload: bytes
    is_final: bool = False


# ---------------------------------------------------------------------------
# Incremental stage states
# ---------------------------------------------------------------------------


class _StreamFrontend:
    def __init__(self, model: Model):
        spec = model.spec
        cfg = spec.spectrogram_config
        self.win = cfg.window_samples(spec.sample_rate)
        self.hop = cfg.hop_samples(spec.sample_rate)
        self.window = np.hanning(self.win)
        self.buf = np.zeros(0)
        self.kind = spec.frontend
        if self.kind == "pcen":
            p = PcenParams(
                model.params["frontend.log_alpha"],
                model.params["frontend.log_delta"],
                model.params["frontend.log_r"],
                model.params["frontend.logit_s"],
            )
            self.alpha, self.delta, self.r, self.s = p.alpha, p.delta, p.r, p.s
            self.epsilon = p.epsilon
            self.m = None
        else:
            self.mean = model.buffers["frontend.mean"]
            self.std = np.sqrt(model.buffers["frontend.var"] + NORM_EPS)

    def feed(self, samples: np.ndarray) -> list[np.ndarray]:
        self.buf = np.concatenate([self.buf, samples])
        rows = []
        while self.buf.size >= self.win:
            frame = self.buf[: self.win] * self.window
            power = np.abs(np.fft.rfft(frame)) ** 2
            rows.append(self._featurize(power))
            self.buf = self.buf[self.hop :]
        return rows

    def _featurize(self, power: np.ndarray) -> np.ndarray:
        if self.kind == "log":
            return (np.log(power + LOG_FLOOR) - self.mean) / self.std
        self.m = power.copy() if self.m is None else (1.0 - self.s) * self.m + self.s * power
        gain = np.power(self.epsilon + self.m, -self.alpha)
        return np.power(power * gain + self.delta, self.r) - np.power(self.delta, self.r)


class _StreamConv:
    def __init__(self, stage: _ConvStage, model: Model):
        self.spec = stage.spec
        kf, kt = self.spec.kernel
        self.kt = kt
        self.sf, self.st = self.spec.stride
        w = model.params[f"{stage.name}.w"]
        self.wmat = w.transpose(3, 2, 1, 0).reshape(kt * kf * self.spec.in_channels, self.spec.filters)
        self.b = model.params[f"{stage.name}.b"]
        self.kf = kf
        self.use_bn = stage.use_bn
        if self.use_bn:
            gamma = model.params[f"{stage.name}.gamma"]
            beta = model.params[f"{stage.name}.beta"]
            mean = model.buffers[f"{stage.name}.mean"]
            var = model.buffers[f"{stage.name}.var"]
            self.bn_scale = gamma / np.sqrt(var + layers.BN_EPS)
            self.bn_shift = beta - mean * self.bn_scale
        self.rows: list[np.ndarray] = []  # frequency-padded, time order
        self.pad_ready = False
        self.next_out = 0
        self.base = 0  # padded time index of rows[0]
        self.out_f = None

    def _freq_pad(self, row: np.ndarray) -> np.ndarray:
        F = row.shape[0]
        out_f = -(-F // self.sf)
        if self.out_f is None:
            self.out_f = out_f
        pad_total = max((out_f - 1) * self.sf + self.kf - F, 0)
        p0 = pad_total // 2
        padded = np.zeros((F + pad_total, row.shape[1]))
        padded[p0 : p0 + F] = row
        return padded

    def feed(self, rows: list[np.ndarray]) -> list[np.ndarray]:
        outs = []
        for row in rows:
            if row.ndim == 1:
                row = row[:, None]
            row = self._freq_pad(row)
            if not self.pad_ready:  # left-only causal time padding
                self.rows = [np.zeros_like(row) for _ in range(self.kt - 1)]
                self.pad_ready = True
            self.rows.append(row)
            top = self.base + len(self.rows)
            while self.next_out * self.st + self.kt <= top:
                start = self.next_out * self.st - self.base
                window = self.rows[start : start + self.kt]
                cols = np.empty((self.out_f, self.wmat.shape[0]))
                c = self.spec.in_channels
                for dt in range(self.kt):
                    for df in range(self.kf):
                        block = window[dt][df : df + self.out_f * self.sf : self.sf, :]
                        cols[:, (dt * self.kf + df) * c : (dt * self.kf + df + 1) * c] = block
                y = cols @ self.wmat + self.b
                if self.use_bn:
                    y = y * self.bn_scale + self.bn_shift
                outs.append(np.maximum(y, 0.0))
                self.next_out += 1
                keep_from = self.next_out * self.st - self.base
                if keep_from > 0:
                    self.rows = self.rows[keep_from:]
                    self.base += keep_from
        return outs


class _StreamFlatten:
    def feed(self, rows):
        return [r.reshape(-1) for r in rows]


def _affine_bn(stage_prefix, model: Model, use_bn):
    w = model.params[f"{stage_prefix}.w"]
    b = model.params[f"{stage_prefix}.b"]
    if not use_bn:
        return lambda x: x @ w.T + b
    gamma = model.params[f"{stage_prefix}.gamma"]
    beta = model.params[f"{stage_prefix}.beta"]
    mean = model.buffers[f"{stage_prefix}.mean"]
    var = model.buffers[f"{stage_prefix}.var"]
    scale = gamma / np.sqrt(var + layers.BN_EPS)
    shift = beta - mean * scale
    return lambda x: (x @ w.T + b) * scale + shift


class _StreamFwdGru:
    def __init__(self, stage: _RecurrentStage, model: Model):
        self.affine = _affine_bn(stage.name, model, stage.use_bn)
        self.u = model.params[f"{stage.name}.u"]
        self.h = np.zeros(stage.hidden)

    def feed(self, rows):
        outs = []
        for x in rows:
            a = self.affine(x)
            self.h = layers.gru_step(a, self.h, self.u)
            outs.append(self.h)
        return outs


class _StreamChunkedBidir:
    """Chunked bidirectional slot: shared-affine trained layers and
    bidirectional checkpoints evaluated chunked both reduce to this."""

    def __init__(self, hidden, c_w, c_s, affine_f, affine_b, u_f, u_b):
        self.hidden = hidden
        self.c_w, self.c_s = c_w, c_s
        self.affine_f, self.affine_b = affine_f, affine_b
        self.u_f, self.u_b = u_f, u_b
        self.h_f = np.zeros(hidden)
        self.a_f: list[np.ndarray] = []
        self.a_b: list[np.ndarray] = []

    @property
    def pending(self) -> int:
        return len(self.a_f)

    def _emit_chunk(self) -> list[np.ndarray]:
        n = min(self.c_w, len(self.a_f))
        emit = min(self.c_s, n)
        outs = []
        h = np.zeros(self.hidden)
        back = [None] * n
        for i in range(n - 1, -1, -1):
            h = layers.gru_step(self.a_b[i], h, self.u_b)
            back[i] = h
        for i in range(emit):
            self.h_f = layers.gru_step(self.a_f[i], self.h_f, self.u_f)
            outs.append(np.concatenate([self.h_f, back[i]]))
        self.a_f = self.a_f[self.c_s :]
        self.a_b = self.a_b[self.c_s :]
        return outs

    def feed(self, rows):
        outs = []
        for x in rows:
            af = self.affine_f(x)
            self.a_f.append(af)
            self.a_b.append(af if self.affine_b is self.affine_f else self.affine_b(x))
            while len(self.a_f) >= self.c_w:
                outs.extend(self._emit_chunk())
        return outs

    def flush(self):
        outs = []
        while self.a_f:
            outs.extend(self._emit_chunk())
        return outs


def _make_chunked(stage: _RecurrentStage, model: Model, bgru_as_lc):
    if stage.rspec.kind == "lc":
        aff = _affine_bn(stage.name, model, stage.use_bn)
        return _StreamChunkedBidir(
            stage.hidden,
            stage.rspec.c_w,
            stage.rspec.c_s,
            aff,
            aff,
            model.params[f"{stage.name}.u_fwd"],
            model.params[f"{stage.name}.u_bwd"],
        )
    c_w, c_s = bgru_as_lc
    return _StreamChunkedBidir(
        stage.hidden,
        c_w,
        c_s,
        _affine_bn(f"{stage.name}.fwd", model, stage.use_bn),
        _affine_bn(f"{stage.name}.bwd", model, stage.use_bn),
        model.params[f"{stage.name}.fwd.u"],
        model.params[f"{stage.name}.bwd.u"],
    )


class _StreamLaConv:
    def __init__(self, stage: _LaConvStage, model: Model):
        self.w = model.params[f"{stage.name}.w"]
        self.context = stage.context
        self.rows: list[np.ndarray] = []
        self.base = 0
        self.next_out = 0

    @property
    def pending(self) -> int:
        return (self.base + len(self.rows)) - self.next_out

    def _output(self, t, limit):
        y = np.zeros_like(self.rows[0])
        for j in range(1, self.context + 1):
            idx = t + j
            if idx >= limit:
                break
            y += self.w[j - 1] * self.rows[idx - self.base]
        return y

    def feed(self, rows):
        self.rows.extend(rows)
        top = self.base + len(self.rows)
        outs = []
        while self.next_out + self.context <= top - 1:
            outs.append(self._output(self.next_out, top))
            self.next_out += 1
        keep_from = self.next_out + 1 - self.base  # y(t) only needs rows t+1..t+C
        if keep_from > 0:
            self.rows = self.rows[keep_from:]
            self.base += keep_from
        return outs

    def flush(self):
        top = self.base + len(self.rows)
        outs = []
        while self.next_out < top:
            outs.append(self._output(self.next_out, top))
            self.next_out += 1
        self.rows = []
        self.base = self.next_out
        return outs


class _StreamHead:
    def __init__(self, head: _HeadStage, model: Model):
        self.w = model.params[f"{head.name}.w"]
        self.b = model.params[f"{head.name}.b"]

    def feed(self, rows):
        return [log_softmax(x @ self.w.T + self.b) for x in rows]


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------


class StreamSession:
    """Single-owner incremental decoder over one audio stream.

    Emitted frames are append-only: once a log-probability row is
    produced it is never revised.
    """

    def __init__(self, model: Model):
        if not is_deployable(model.spec):
            raise ValueError("not streamable")
        self.model = model
        self.front = _StreamFrontend(model)
        self.stages = []
        for stage in model.stages:
            if isinstance(stage, _FrontendStage):
                continue  # handled by self.front
            if isinstance(stage, _ConvStage):
                self.stages.append(_StreamConv(stage, model))
            elif isinstance(stage, _RecurrentStage):
                if stage.rspec.kind == "fwd":
                    self.stages.append(_StreamFwdGru(stage, model))
                else:
                    self.stages.append(_make_chunked(stage, model, model.spec.bgru_as_lc))
            elif isinstance(stage, _LaConvStage):
                self.stages.append(_StreamLaConv(stage, model))
            else:  # flatten
                self.stages.append(_StreamFlatten())
        self.head = _StreamHead(model.heads[0], model)
        self.emitted: list[np.ndarray] = []
        self.next_seq = 0
        self.final_seen = False
        self.finalized = False
        self._worst_lookahead = lookahead_frames(model.spec)[1]

    @property
    def pending_frames(self) -> int:
        return sum(getattr(s, "pending", 0) for s in self.stages)

    def _run(self, rows, flush: bool = False):
        for stage in self.stages:
            rows = stage.feed(rows)
            if flush and hasattr(stage, "flush"):
                rows = rows + stage.flush()
        return self.head.feed(rows)

    def _partial(self) -> str:
        if not self.emitted:
            return ""
        return greedy_decode(np.stack(self.emitted), self.model.alphabet_symbols)

    def feed(self, packet: Packet):
        """Consume one packet; returns (new log-prob rows, partial transcript)."""
        if self.finalized:
            raise ValueError("stream finalized")
        if packet.seq != self.next_seq:
            raise ValueError("packet loss")
        self.next_seq += 1
        if self.final_seen:
            raise ValueError("audio after final packet")
        samples = pcm16_decode(packet.payload)
        new_rows = self._run(self.front.feed(samples))
        self.emitted.extend(new_rows)
        if packet.is_final:
            self.final_seen = True
        out = np.stack(new_rows) if new_rows else np.zeros((0, self.model.heads[0].out_dim))
        return out, self._partial()

    def finalize(self) -> str:
        """Flush pending chunk frames and return the final transcript."""
        if self.finalized:
            raise ValueError("already finalized")
        if not self.final_seen:
            raise ValueError("no final packet received")
        self.emitted.extend(self._run([], flush=True))
        self.finalized = True
        return self._partial()


def session_open(model: Model) -> StreamSession:
    return StreamSession(model)


# ---------------------------------------------------------------------------
# Framed wire protocol
# ---------------------------------------------------------------------------

MAGIC = b"SVA1"
TYPE_AUDIO, TYPE_END, TYPE_PARTIAL, TYPE_FINAL = 0, 1, 2, 3
_HEADER = struct.Struct("<4sBIII")


def write_frame(sock, ftype: int, stream_id: int, seq: int, payload: bytes = b"") -> None:
    sock.sendall(_HEADER.pack(MAGIC, ftype, stream_id, seq, len(payload)) + payload)


def _recv_exact(sock, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def read_frame(sock):
    """Returns (type, stream_id, seq, payload) or None at end of stream."""
    head = _recv_exact(sock, _HEADER.size)
    if head is None:
        return None
    magic, ftype, stream_id, seq, length = _HEADER.unpack(head)
    if magic != MAGIC:
        raise ValueError("bad frame magic")
    payload = _recv_exact(sock, length) if length else b""
    if payload is None:
        raise ValueError("truncated frame")
    return ftype, stream_id, seq, payload


class StreamServer(socketserver.ThreadingTCPServer):
    """One session per (connection, stream id); AUDIO frames are answered
    with PARTIAL transcripts, END with the FINAL transcript."""

    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address, model: Model):
        self.model = model
        super().__init__(address, _StreamHandler)


class _StreamHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sessions: dict[int, StreamSession] = {}
        while True:
            frame = read_frame(self.request)
            if frame is None:
                return
            ftype, stream_id, seq, payload = frame
            if ftype == TYPE_AUDIO:
                session = sessions.get(stream_id)
                if session is None:
                    session = sessions[stream_id] = StreamSession(self.server.model)
                _, partial = session.feed(Packet(stream_id, seq, payload))
                write_frame(self.request, TYPE_PARTIAL, stream_id, seq, partial.encode("utf-8"))
            elif ftype == TYPE_END:
                session = sessions.get(stream_id)
                if session is None:
                    write_frame(self.request, TYPE_FINAL, stream_id, seq, b"")
                    continue
                session.feed(Packet(stream_id, seq, b"", is_final=True))
                final = session.finalize()
                write_frame(self.request, TYPE_FINAL, stream_id, seq, final.encode("utf-8"))
                del sessions[stream_id]


def serve(model: Model, host: str = "127.0.0.1", port: int = 8763) -> StreamServer:
    """Bind and return a server (caller runs serve_forever, possibly in a
    thread)."""
    return StreamServer((host, port), model)


# ---------------------------------------------------------------------------
# Last-packet-latency benchmark
# ---------------------------------------------------------------------------


@dataclass
class StreamStats:
    """Per-stream last-packet latencies plus percentile/RTF summaries."""

    latencies_ms: list[float]
    rtf: float | None
    mode: str

    @property
    def p50(self) -> float:
        return float(np.percentile(self.latencies_ms, 50))

    @property
    def p98(self) -> float:
        return float(np.percentile(self.latencies_ms, 98))

    def records(self) -> list[dict]:
        recs = [
            {"kind": "stream", "index": i, "last_packet_latency_ms": round(v, 3)}
            for i, v in enumerate(self.latencies_ms)
        ]
        recs.append(
            {
                "kind": "summary",
                "p50_ms": round(self.p50, 3),
                "p98_ms": round(self.p98, 3),
                "rtf": None if self.rtf is None else round(self.rtf, 4),
                "mode": self.mode,
            }
        )
        return recs


def _packetize(samples: np.ndarray, sample_rate: int, packet_ms: float) -> list[bytes]:
    step = max(1, int(round(packet_ms * sample_rate / 1000.0)))
    return [pcm16_encode(samples[i : i + step]) for i in range(0, samples.size, step)]


def _bench_inprocess(model, utterances, n_streams, packet_ms, results):
    def worker(stream_idx, utt, out):
        session = StreamSession(model)
        payloads = _packetize(utt.samples, utt.sample_rate, packet_ms)
        start = time.perf_counter()
        busy = 0.0
        arrival_last = start
        for i, payload in enumerate(payloads):
            target = start + i * packet_ms / 1000.0
            now = time.perf_counter()
            if target > now:
                time.sleep(target - now)
            is_final = i == len(payloads) - 1
            arrival = time.perf_counter()
            session.feed(Packet(stream_idx, i, payload, is_final=is_final))
            busy += time.perf_counter() - arrival
            if is_final:
                arrival_last = arrival
        t0 = time.perf_counter()
        session.finalize()
        done = time.perf_counter()
        busy += done - t0
        out["latency_ms"] = (done - arrival_last) * 1000.0
        out["busy_s"] = busy
        out["audio_s"] = utt.duration_s

    threads, outs = [], []
    for s in range(n_streams):
        out = {}
        outs.append(out)
        t = threading.Thread(target=worker, args=(s, utterances[s % len(utterances)], out))
        threads.append(t)
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    results["latencies"] = [o["latency_ms"] for o in outs]
    results["rtf"] = sum(o["busy_s"] for o in outs) / sum(o["audio_s"] for o in outs)


def _bench_virtual(model, utterances, n_streams, packet_ms, costs, results):
    feed_ms, finalize_ms = costs
    latencies = []
    for s in range(n_streams):
        utt = utterances[s % len(utterances)]
        session = StreamSession(model)
        payloads = _packetize(utt.samples, utt.sample_rate, packet_ms)
        clock = 0.0
        arrival_last = 0.0
        for i, payload in enumerate(payloads):
            arrival = max(clock, i * packet_ms)
            clock = arrival
            session.feed(Packet(s, i, payload, is_final=i == len(payloads) - 1))
            clock += feed_ms
            arrival_last = arrival
        session.finalize()
        clock += finalize_ms
        latencies.append(clock - arrival_last)
    results["latencies"] = latencies
    results["rtf"] = None


def _bench_socket(model, utterances, n_streams, packet_ms, results):
    server = serve(model, "127.0.0.1", 0)
    port = server.server_address[1]
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    outs = [dict() for _ in range(n_streams)]

    def client(stream_idx, utt, out):
        sock = socket.create_connection(("127.0.0.1", port))
        try:
            payloads = _packetize(utt.samples, utt.sample_rate, packet_ms)
            start = time.perf_counter()
            for i, payload in enumerate(payloads):
                target = start + i * packet_ms / 1000.0
                now = time.perf_counter()
                if target > now:
                    time.sleep(target - now)
                write_frame(sock, TYPE_AUDIO, stream_idx, i, payload)
                read_frame(sock)  # PARTIAL
            arrival_last = time.perf_counter()
            write_frame(sock, TYPE_END, stream_idx, len(payloads), b"")
            frame = read_frame(sock)
            out["latency_ms"] = (time.perf_counter() - arrival_last) * 1000.0
            out["final"] = frame[3].decode("utf-8")
        finally:
            sock.close()

    threads = [
        threading.Thread(target=client, args=(s, utterances[s % len(utterances)], outs[s]))
        for s in range(n_streams)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    server.shutdown()
    server.server_close()
    results["latencies"] = [o["latency_ms"] for o in outs]
    results["rtf"] = None
    results["finals"] = [o.get("final") for o in outs]


def bench(
    model: Model,
    utterances,
    n_streams: int = 10,
    packet_ms: float = 100.0,
    mode: str = "inprocess",
    virtual_costs: tuple[float, float] | None = None,
) -> StreamStats:
    """Pace packets at real-time intervals over concurrent streams and
    measure wall-clock last-packet latency per stream.

    Latency accounting starts at the final packet's arrival timestamp.
    ``mode="inprocess"`` uses threads and the wall clock (and reports RTF
    as total processing time over total audio time); with `virtual_costs`
    =(feed_ms, finalize_ms) a deterministic virtual clock replaces
    measurement. ``mode="socket"`` drives a loopback server with the
    framed protocol.
    """
    if n_streams < 1:
        raise ValueError("n_streams must be >= 1")
    utterances = list(utterances)
    results: dict = {}
    if mode == "socket":
        _bench_socket(model, utterances, n_streams, packet_ms, results)
    elif virtual_costs is not None:
        _bench_virtual(model, utterances, n_streams, packet_ms, virtual_costs, results)
    elif mode == "inprocess":
        _bench_inprocess(model, utterances, n_streams, packet_ms, results)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return StreamStats(results["latencies"], results["rtf"], mode)
