"""Host side: preprocessing, transport, per-layer orchestration, reporting.

Host and device talk only through two :class:`TransactionChannel` objects.
Both endpoints are generators that ``yield`` whenever a channel blocks them,
so one code path serves two drivers: a cooperative single-thread interleave
and a two-thread mode where each endpoint owns a thread.
"""

from __future__ import annotations

import io
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fp16, oracle
from .engine import CycleStats, Engine
from .isa import (
    CompiledNetwork,
    EngineConfig,
    LayerDescriptor,
    LayerWeights,
    OpType,
    encode_stream,
)
from .layout import (
    Tensor,
    concat_channels,
    im2col_lines,
    pad_channels,
    pad_surface,
    pool_lines,
    serdes_pack,
)

DEFAULT_TIMEOUT = 10**7


class TransportTimeout(RuntimeError):
    pass


class ChannelClosed(RuntimeError):
    pass


class LayerError(RuntimeError):
    def __init__(self, layer: str, cause: BaseException):
        super().__init__(f"layer {layer}: {type(cause).__name__}: {cause}")
        self.layer = layer
        self.cause = cause


class TransactionChannel:
    """Bounded, ordered word pipe with a consumer-driven ready flag.

    ``gate`` optionally models external throttling of ready as a function of
    the channel's event clock. Every transfer is logged as ``(clock, words)``.
    """

    def __init__(self, name: str, direction: str = "in", depth: int = 1024,
                 timeout: int = DEFAULT_TIMEOUT, gate=None, cond=None):
        if direction not in ("in", "out"):
            raise ValueError("direction must be 'in' or 'out'")
        self.name = name
        self.direction = direction
        self.depth = depth
        self.word_width = 32
        self.timeout = timeout
        self.gate = gate
        self.cond = cond or threading.Condition()
        self._chunks: deque = deque()
        self._count = 0
        self.clock = 0
        self.log: list[tuple[int, int]] = []
        self.words_sent = 0
        self.words_received = 0
        self.closed = False

    @property
    def ready(self) -> bool:
        return self._count < self.depth and (self.gate is None or bool(self.gate(self.clock)))

    @property
    def occupancy(self) -> int:
        return self._count

    def close(self) -> None:
        with self.cond:
            self.closed = True
            self.cond.notify_all()

    def _check(self):
        if self.closed:
            raise ChannelClosed(f"{self.name} closed")

    def put(self, words):
        """Generator: send ``words`` in order, yielding while ready is low."""
        w = np.ascontiguousarray(np.asarray(words, np.uint32).reshape(-1))
        pos = waited = 0
        while pos < w.size:
            with self.cond:
                self._check()
                self.clock += 1
                if self.ready:
                    k = min(self.depth - self._count, w.size - pos)
                    self._chunks.append(w[pos : pos + k])
                    self._count += k
                    self.words_sent += k
                    self.log.append((self.clock, k))
                    pos += k
                    waited = 0
                    self.cond.notify_all()
                    continue
            waited += 1
            if waited > self.timeout:
                raise TransportTimeout(f"{self.name}: ready low for {waited} events")
            yield

    def get(self, n: int):
        """Generator: receive exactly ``n`` words."""
        parts = []
        got = waited = 0
        while got < n:
            with self.cond:
                if not self._chunks:
                    self._check()
                while self._chunks and got < n:
                    head = self._chunks[0]
                    take = min(head.size, n - got)
                    parts.append(head[:take])
                    if take == head.size:
                        self._chunks.popleft()
                    else:
                        self._chunks[0] = head[take:]
                    self._count -= take
                    got += take
                    waited = 0
                if parts:
                    self.cond.notify_all()
            if got < n:
                waited += 1
                if waited > self.timeout:
                    raise TransportTimeout(f"{self.name}: starved for {waited} events")
                yield
        self.words_received += n
        return np.concatenate(parts) if parts else np.zeros(0, np.uint32)


# --- wire protocol ---------------------------------------------------------------

MSG_CMD, MSG_NEXT, MSG_WEIGHT, MSG_BIAS, MSG_DATA, MSG_RUN, MSG_STOP, MSG_IRQ = range(1, 9)


def _half_words(a) -> np.ndarray:
    return np.asarray(a, np.float16).reshape(-1).view(np.uint16).astype(np.uint32)


def _words_half(w) -> np.ndarray:
    return (np.asarray(w, np.uint32) & 0xFFFF).astype(np.uint16).view(np.float16)


class Device:
    """Engine-side endpoint: SERDES into caches, dispatch, run, interrupt."""

    def __init__(self, engine: Engine, ch_in: TransactionChannel, ch_out: TransactionChannel):
        self.engine = engine
        self.ch_in = ch_in
        self.ch_out = ch_out
        self.layer_stats: list[CycleStats] = []
        self._data_lines = 0
        self._weight_lines = 0
        self._biases = np.zeros(0, np.float16)

    def _lines(self, payload) -> np.ndarray:
        p = self.engine.cfg.parallelism
        return serdes_pack((np.asarray(payload) & 0xFFFF).astype(np.uint16), p).view(np.float16)

    def serve(self):
        eng = self.engine
        p = eng.cfg.parallelism
        while True:
            kind, n = (yield from self.ch_in.get(2)).tolist()
            payload = (yield from self.ch_in.get(n)) if n else np.zeros(0, np.uint32)
            if kind == MSG_STOP:
                return
            if kind == MSG_CMD:
                eng.push_command_words(payload)
            elif kind == MSG_NEXT:
                eng.next_layer()
                self.layer_stats.append(CycleStats())
            elif kind == MSG_DATA:
                lines = self._lines(payload)
                eng.state.caches["data"].load(lines)
                self._data_lines = len(lines)
            elif kind == MSG_WEIGHT:
                lines = self._lines(payload)
                eng.state.caches["weight"].load(lines)
                self._weight_lines = len(lines)
            elif kind == MSG_BIAS:
                vals = _words_half(payload)
                pad = -len(vals) % p
                eng.state.caches["bias"].load(np.concatenate([vals, np.zeros(pad, np.float16)]).reshape(-1, p))
                self._biases = vals
            elif kind == MSG_RUN:
                out = self._run(payload.tolist())
                words = _half_words(out) if out is not None else np.zeros(0, np.uint32)
                header = np.array([MSG_IRQ, words.size], np.uint32)
                yield from self.ch_out.put(np.concatenate([header, words]))
            else:
                raise ValueError(f"unknown message kind {kind}")

    def _run(self, args):
        eng = self.engine
        caches = eng.state.caches
        op, pn, ks = args[:3]
        eng.restart()
        if op == OpType.CONV_RELU:
            f, first, last = args[3:6]
            x = caches["data"].read(0, self._data_lines).reshape(pn, -1, eng.cfg.parallelism)
            w = caches["weight"].read(0, self._weight_lines).reshape(f, x.shape[1], -1)
            out, stats = eng.run_conv_block(x, w, self._biases[:f], ks, bool(first), bool(last))
        elif op == OpType.MAXPOOL:
            x = caches["data"].read(0, self._data_lines).reshape(pn, ks, -1)
            out, stats = eng.run_maxpool_piece(x)
        elif op == OpType.AVGPOOL:
            x = caches["data"].read(0, self._data_lines).reshape(pn, ks, -1)
            out, stats = eng.run_avgpool_piece(x, args[3])
        else:
            raise ValueError(f"cannot run op {op}")
        if not self.layer_stats:
            self.layer_stats.append(CycleStats())
        self.layer_stats[-1].add(stats)
        return out


# --- drivers -----------------------------------------------------------------------


def drive(host_gen, device_gen, channels, threads: bool = False):
    """Run both endpoints to completion; returns the host generator's value."""
    if not threads:
        result = None
        dev_alive = True
        while True:
            try:
                next(host_gen)
            except StopIteration as stop:
                result = stop.value
                break
            if dev_alive:
                try:
                    next(device_gen)
                except StopIteration:
                    dev_alive = False
        for _ in device_gen:
            pass
        return result

    cond = channels[0].cond
    box: dict = {}
    errors: list[BaseException] = []

    def runner(gen, key):
        try:
            while True:
                try:
                    next(gen)
                except StopIteration as stop:
                    box[key] = stop.value
                    return
                with cond:
                    cond.wait(0.001)
        except BaseException as e:  # surfaced in the calling thread
            errors.append(e)
            for ch in channels:
                ch.close()

    ts = [
        threading.Thread(target=runner, args=(host_gen, "host"), daemon=True),
        threading.Thread(target=runner, args=(device_gen, "device"), daemon=True),
    ]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    real = [e for e in errors if not isinstance(e, ChannelClosed)]
    if real or errors:
        raise (real or errors)[0]
    return box.get("host")


# --- host side ---------------------------------------------------------------------


def preprocess_image(raw, means=(0.0, 0.0, 0.0), side: int | None = None,
                     flush_to_zero: bool = False) -> Tensor:
    """RGB bytes (h, w, 3) -> BGR FP16 tensor scaled to [0, 255] minus ``means``.

    ``means`` are given in BGR order, matching the output channels.
    """
    a = np.asarray(raw)
    if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square (side, side, 3) image, got {a.shape}")
    if side is not None and a.shape[0] != side:
        raise ValueError(f"image side {a.shape[0]} does not match network input {side}")
    unit = a[:, :, ::-1].astype(np.float64) / 255.0
    return Tensor(fp16.vround(unit * 255.0 - np.asarray(means, np.float64), flush_to_zero))


def load_raw_image(path, side: int) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), np.uint8)
    if raw.size != side * side * 3:
        raise ValueError(f"{path}: {raw.size} bytes, expected {side}x{side}x3")
    return raw.reshape(side, side, 3)


def argsort_desc(values) -> np.ndarray:
    v = np.asarray(values, np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("argsort_desc needs finite values")
    return np.argsort(-v, kind="stable")


class HostSession:
    """One host/device pair joined by two channels."""

    def __init__(self, cfg: EngineConfig | None = None, engine: Engine | None = None,
                 timeout: int = DEFAULT_TIMEOUT, gate=None, threads: bool = False):
        self.engine = engine or Engine(cfg)
        self.cfg = self.engine.cfg
        cond = threading.Condition()
        self.ch_in = TransactionChannel("ch_in", "in", 1024, timeout, gate, cond)
        self.ch_out = TransactionChannel("ch_out", "out", self.cfg.result_fifo_depth, timeout, None, cond)
        self.device = Device(self.engine, self.ch_in, self.ch_out)
        self.threads = threads
        self.current = "-"

    # transport helpers ------------------------------------------------------

    def _send(self, kind: int, words=()):
        words = np.asarray(words, np.uint32).reshape(-1)
        yield from self.ch_in.put(np.concatenate([np.array([kind, words.size], np.uint32), words]))

    def _send_lines(self, kind: int, lines):
        yield from self._send(kind, _half_words(lines))

    def _run(self, args, expect: int):
        yield from self._send(MSG_RUN, args)
        kind, n = (yield from self.ch_out.get(2)).tolist()
        if kind != MSG_IRQ or n != expect:
            raise RuntimeError(f"unexpected completion ({kind}, {n}), wanted {expect} words")
        words = (yield from self.ch_out.get(n)) if n else np.zeros(0, np.uint32)
        return _words_half(words)

    def execute(self, host_gen):
        dev = self.device.serve()

        def wrapped():
            value = yield from host_gen
            yield from self._send(MSG_STOP)
            return value

        try:
            return drive(wrapped(), dev, [self.ch_in, self.ch_out], self.threads)
        except LayerError:
            raise
        except Exception as e:
            if self.current != "-":
                raise LayerError(self.current, e) from e
            raise

    # layer programs -----------------------------------------------------------

    def load_commands_gen(self, stream: bytes):
        if len(stream) % 12:
            raise ValueError("command stream length must be a multiple of 12")
        if stream:
            words = np.frombuffer(stream, "<u4")
            yield from self._send(MSG_CMD, words)

    def layer_gen(self, d: LayerDescriptor, x: Tensor, lw: LayerWeights | None = None):
        yield from self._send(MSG_NEXT)
        if d.op_type == OpType.CONV_RELU:
            if lw is None:
                raise ValueError("conv layer needs weights")
            return (yield from self._conv(d, x, lw))
        return (yield from self._pool(d, x))

    def _check_input(self, d: LayerDescriptor, x: Tensor):
        if (x.side, x.channels) != (d.input_side, d.input_channel):
            raise ValueError(
                f"input {x.channels}x{x.side}x{x.side} does not match descriptor "
                f"{d.input_channel}x{d.input_side}x{d.input_side}"
            )

    def _conv(self, d, x, lw):
        self._check_input(d, x)
        cfg = self.cfg
        p = cfg.parallelism
        k, s, ks = d.kernel, d.stride, d.kernel_size
        if lw.weights.shape != (d.output_channel, k, k, d.input_channel):
            raise ValueError(f"weights {lw.weights.shape} do not match descriptor")
        xp = pad_channels(pad_surface(x, d.padding), p)
        g_all = xp.channels // p
        lines = im2col_lines(xp, k, s, p)
        oh, ow = lines.shape[:2]
        npts = oh * ow
        lines = lines.reshape(npts, g_all, ks, p)
        n = d.output_channel
        w = np.zeros((n, k, k, g_all * p), np.float16)
        w[..., : d.input_channel] = lw.weights
        w = w.reshape(n, ks, g_all, p).transpose(0, 2, 1, 3)

        depth = cfg.data_cache_depth
        gs = min(g_all, depth // ks)
        slices = -(-g_all // gs)
        chunk = min(cfg.max_o_side, depth // (gs * ks), npts)
        out = np.empty((npts, n), np.float16)
        for f0 in range(0, n, p):
            f = min(p, n - f0)
            yield from self._send(MSG_BIAS, _half_words(lw.biases[f0 : f0 + f]))
            for p0 in range(0, npts, chunk):
                pn = min(chunk, npts - p0)
                for si in range(slices):
                    g0, g1 = si * gs, min(g_all, (si + 1) * gs)
                    if slices > 1 or p0 == 0:
                        yield from self._send_lines(MSG_WEIGHT, w[f0 : f0 + f, g0:g1].reshape(-1, p))
                    yield from self._send_lines(MSG_DATA, lines[p0 : p0 + pn, g0:g1].reshape(-1, p))
                    last = si == slices - 1
                    res = yield from self._run(
                        [OpType.CONV_RELU, pn, ks, f, si == 0, last], pn * f if last else 0
                    )
                out[p0 : p0 + pn, f0 : f0 + f] = res.reshape(f, pn).T
        return Tensor(out.reshape(oh, ow, n))

    def _pool(self, d, x):
        self._check_input(d, x)
        cfg = self.cfg
        p = cfg.parallelism
        ks = d.kernel_size
        xp = pad_channels(pad_surface(x, d.padding), p)
        pl = pool_lines(xp, d.kernel, d.stride, p)
        oh, ow, g_all = pl.shape[:3]
        npts = oh * ow
        pl = pl.reshape(npts, g_all, ks, p)
        chunk = max(1, min(cfg.result_fifo_depth // p, cfg.data_cache_depth // ks, npts))
        out = np.empty((npts, g_all * p), np.float16)
        for g in range(g_all):
            for p0 in range(0, npts, chunk):
                pn = min(chunk, npts - p0)
                yield from self._send_lines(MSG_DATA, pl[p0 : p0 + pn, g].reshape(-1, p))
                extra = [d.kernel * d.kernel] if d.op_type == OpType.AVGPOOL else []
                res = yield from self._run([d.op_type, pn, ks] + extra, pn * p)
                out[p0 : p0 + pn, g * p : (g + 1) * p] = res.reshape(pn, p)
        return Tensor(out[:, : d.input_channel].reshape(oh, ow, d.input_channel))

    def network_gen(self, compiled: CompiledNetwork, blobs: dict, x: Tensor, trace: dict):
        yield from self.load_commands_gen(compiled.command_stream())
        group_in = None
        group_outs: list[Tensor] = []
        cur: Tensor | np.ndarray = x
        for e in compiled.plan:
            self.current = e.name
            inp = group_in if (e.group and e.op != "concat" and group_in is not None) else cur
            if e.group and e.op != "concat" and group_in is None:
                group_in = cur
                inp = cur
            if e.op == "concat":
                out = concat_channels(group_outs)
                inp = group_outs
                group_in, group_outs = None, []
            elif e.descriptor is not None:
                if any(e.prepad):
                    inp = pad_surface(inp, e.prepad)
                out = yield from self.layer_gen(e.descriptor, inp, blobs.get(e.name))
                if e.group:
                    group_outs.append(out)
            else:
                out = _host_op(e.op, inp, e.prepad)
            trace[e.name] = (inp, out)
            if e.group and e.op != "concat":
                continue
            cur = out
        self.current = "-"
        return cur


def _host_op(op: str, x, prepad=(0, 0, 0, 0)):
    if op == "pad":
        return pad_surface(x, prepad)
    if op in ("relu", "dropout"):
        # ReLU is fused into every conv write-out; the line is an annotation
        return x
    if op == "flatten":
        return np.asarray(x.array if isinstance(x, Tensor) else x, np.float16).reshape(-1)
    if op == "softmax":
        a = x.array if isinstance(x, Tensor) else x
        with np.errstate(invalid="ignore"):
            return oracle.softmax_ref(np.asarray(a, np.float64))
    raise ValueError(f"unknown host op {op}")


# --- oracle path -------------------------------------------------------------------


def oracle_layer(e, x, blobs: dict):
    """Binary64 evaluation of one plan entry; ``x`` as float64 (h, w, c) or a vector."""
    if e.op == "concat":
        return np.concatenate([np.asarray(p, np.float64) for p in x], axis=2)
    if e.descriptor is None:
        if e.op == "pad":
            return oracle._pad(np.asarray(x, np.float64), e.prepad)
        if e.op in ("relu", "dropout"):
            return np.asarray(x, np.float64)
        if e.op == "flatten":
            return np.asarray(x, np.float64).reshape(-1)
        return oracle.softmax_ref(x)
    d = e.descriptor
    a = np.asarray(x, np.float64)
    if any(e.prepad):
        a = oracle._pad(a, e.prepad)
    if d.op_type == OpType.CONV_RELU:
        lw = blobs[e.name]
        return oracle.relu_ref(oracle.conv_ref(a, lw.weights, lw.biases, d.kernel, d.stride, d.padding))
    if d.op_type == OpType.MAXPOOL:
        return oracle.maxpool_ref(a, d.kernel, d.stride, d.padding)
    return oracle.avgpool_ref(a, d.kernel, d.stride, d.padding)


def oracle_chain(compiled: CompiledNetwork, blobs: dict, x) -> dict:
    """Full binary64 forward pass; returns outputs per plan entry name."""
    outs = {}
    cur = np.asarray(x.array if isinstance(x, Tensor) else x, np.float64)
    group_in = None
    group_outs = []
    for e in compiled.plan:
        if e.group and e.op != "concat":
            if group_in is None:
                group_in = cur
            out = oracle_layer(e, group_in, blobs)
            group_outs.append(out)
            outs[e.name] = out
            continue
        if e.op == "concat":
            out = oracle_layer(e, group_outs, blobs)
            group_in, group_outs = None, []
        else:
            out = oracle_layer(e, cur, blobs)
        outs[e.name] = out
        cur = out
    return outs


# --- reports -----------------------------------------------------------------------


@dataclass
class LayerRecord:
    name: str
    op: str
    dims: str
    cycles: int = 0
    utilization: dict = field(default_factory=dict)
    fifo_high_water: dict = field(default_factory=dict)
    max_abs_err: float | None = None
    max_rel_err: float | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "op": self.op,
            "dims": self.dims,
            "cycles": self.cycles,
            "utilization": {k: round(v, 6) for k, v in self.utilization.items()},
            "fifo_high_water": dict(sorted(self.fifo_high_water.items())),
            "max_abs_err": self.max_abs_err,
            "max_rel_err": self.max_rel_err,
        }


@dataclass
class InferenceReport:
    layers: list[LayerRecord]
    top_k: list[tuple[int, float]]
    total_cycles: int
    bytes_sent: int
    bytes_received: int
    mode: str = "engine"
    top1_agree: bool | None = None
    reference_top_k: list[tuple[int, float]] | None = None
    rel_floor: float = 1e-2
    probabilities: np.ndarray | None = None

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "layers": [r.to_dict() for r in self.layers],
            "top_k": [[int(c), float(p)] for c, p in self.top_k],
            "total_cycles": self.total_cycles,
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
        }
        if self.top1_agree is not None:
            out["top1_agree"] = self.top1_agree
            out["reference_top_k"] = [[int(c), float(p)] for c, p in self.reference_top_k]
            out["rel_floor"] = self.rel_floor
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self, sep: str = "\t") -> str:
        cols = ["name", "op", "dims", "cycles", "mul_util", "max_abs_err", "max_rel_err"]
        buf = io.StringIO()
        buf.write(sep.join(cols) + "\n")
        for r in self.layers:
            util = r.utilization.get("mul")
            row = [
                r.name, r.op, r.dims, str(r.cycles),
                "" if util is None else f"{util:.4f}",
                "" if r.max_abs_err is None else f"{r.max_abs_err:.6g}",
                "" if r.max_rel_err is None else f"{r.max_rel_err:.6g}",
            ]
            buf.write(sep.join(row) + "\n")
        buf.write(f"# total_cycles{sep}{self.total_cycles}\n")
        buf.write(f"# bytes_sent{sep}{self.bytes_sent}{sep}bytes_received{sep}{self.bytes_received}\n")
        for c, p in self.top_k:
            buf.write(f"# top{sep}{c}{sep}{p:.6f}\n")
        return buf.getvalue()


def _dims(a) -> str:
    if isinstance(a, Tensor):
        return f"{a.channels}x{a.height}x{a.width}"
    a = np.asarray(a)
    if a.ndim == 3:
        return f"{a.shape[2]}x{a.shape[0]}x{a.shape[1]}"
    return str(a.size)


def _as64(v):
    if isinstance(v, Tensor):
        return v.array.astype(np.float64)
    if isinstance(v, list):
        return [_as64(p) for p in v]
    return np.asarray(v, np.float64)


def layer_errors(got, ref, floor: float = 1e-2) -> tuple[float, float]:
    g = np.asarray(got, np.float64).reshape(-1)
    r = np.asarray(ref, np.float64).reshape(-1)
    if g.shape != r.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {r.shape}")
    if not g.size:
        return 0.0, 0.0
    diff = np.abs(g - r)
    big = np.abs(r) >= floor
    rel = float((diff[big] / np.abs(r[big])).max()) if big.any() else 0.0
    return float(diff.max()), rel


def _top_k(probs, k: int = 5):
    p = np.asarray(probs, np.float64).reshape(-1)
    order = argsort_desc(p)[:k]
    return [(int(i), float(p[i])) for i in order]


def _final_vector(v) -> np.ndarray:
    return np.asarray(v.array if isinstance(v, Tensor) else v, np.float64).reshape(-1)


def run_network(compiled: CompiledNetwork, blobs: dict, image: Tensor,
                engine: Engine | None = None, threads: bool = False, top: int = 5,
                verify: bool = False, rel_floor: float = 1e-2) -> InferenceReport:
    """Run every layer through the engine and collect a report."""
    session = HostSession(compiled.config, engine, threads=threads)
    trace: dict = {}
    final = session.execute(session.network_gen(compiled, blobs, image, trace))
    for name, (_, out) in trace.items():
        if not np.all(np.isfinite(_as64(out))):
            raise LayerError(name, OverflowError("non-finite values (FP16 range exceeded)"))
    stats = iter(session.device.layer_stats)
    records = []
    total = 0
    for e in compiled.plan:
        inp, out = trace[e.name]
        rec = LayerRecord(e.name, e.op, _dims(out))
        if e.descriptor is not None:
            st = next(stats)
            rec.cycles = st.total_cycles
            rec.utilization = st.utilization()
            rec.fifo_high_water = st.fifo_high_water
            total += st.total_cycles
        if verify:
            ref = oracle_layer(e, _as64(inp), blobs)
            rec.max_abs_err, rec.max_rel_err = layer_errors(_as64(out), ref, rel_floor)
        records.append(rec)
    probs = _final_vector(final)
    report = InferenceReport(
        records, _top_k(probs, top), total,
        4 * session.ch_in.words_sent, 4 * session.ch_out.words_sent,
        mode="verify" if verify else "engine", rel_floor=rel_floor, probabilities=probs,
    )
    if verify:
        chain = oracle_chain(compiled, blobs, image)
        ref_probs = _final_vector(chain[compiled.plan[-1].name])
        report.reference_top_k = _top_k(ref_probs, top)
        report.top1_agree = report.top_k[0][0] == report.reference_top_k[0][0]
    return report


def verify_against_oracle(compiled, blobs, image, engine=None, threads=False,
                          rel_floor: float = 1e-2) -> InferenceReport:
    return run_network(compiled, blobs, image, engine, threads, verify=True, rel_floor=rel_floor)


def run_reference(compiled: CompiledNetwork, blobs: dict, image: Tensor, top: int = 5) -> InferenceReport:
    """Binary64 chain only; no engine, no transport."""
    outs = oracle_chain(compiled, blobs, image)
    records = [LayerRecord(e.name, e.op, _dims(outs[e.name])) for e in compiled.plan]
    probs = _final_vector(outs[compiled.plan[-1].name])
    return InferenceReport(records, _top_k(probs, top), 0, 0, 0, mode="reference", probabilities=probs)


def load_commands(stream: bytes, engine: Engine | None = None, cfg: EngineConfig | None = None,
                  gate=None, threads: bool = False) -> Engine:
    """Deliver a whole command stream into the engine's command FIFO."""
    session = HostSession(cfg, engine, gate=gate, threads=threads)
    session.execute(session.load_commands_gen(stream))
    return session.engine


def run_layer(d: LayerDescriptor, x: Tensor, weights=None, biases=None,
              engine: Engine | None = None, cfg: EngineConfig | None = None,
              threads: bool = False) -> Tensor:
    """Run one hardware layer end to end (command load, marshalling, read-back)."""
    session = HostSession(cfg, engine, threads=threads)
    lw = None
    if d.op_type == OpType.CONV_RELU:
        lw = LayerWeights("layer", np.asarray(weights, np.float16), np.asarray(biases, np.float16))

    def program():
        yield from session.load_commands_gen(encode_stream([d]))
        return (yield from session.layer_gen(d, x, lw))

    return session.execute(program())
