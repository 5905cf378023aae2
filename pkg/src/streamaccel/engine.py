"""Cycle-level model of the compute engine.

The engine is a single-clock state machine advanced by :meth:`Engine.advance_cycle`.
Each piece of work (one filter pass over a loaded conv block, or one pooling
block) instantiates a pipeline of units and FIFOs whose tokens are line
indices; the FP16 arithmetic for the same piece is evaluated in the fixed
hardware fold order with the array helpers in :mod:`streamaccel.fp16`.
Cycle counts depend only on geometry and configuration, never on data, so
finished timings are memoised per geometry.
"""

from __future__ import annotations

import copy
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import fp16
from .isa import (
    CommandError,
    EngineConfig,
    LayerDescriptor,
    OpType,
    decode_descriptor,
    validate_capacity,
)
from .layout import GemmTile


class EngineError(RuntimeError):
    pass


class FifoModel:
    """Bounded FIFO whose writes become visible ``write_latency`` cycles later."""

    def __init__(self, name: str, depth: int, width_bits: int = 128, write_latency: int = 6):
        self.name = name
        self.depth = depth
        self.width_bits = width_bits
        self.write_latency = write_latency
        self._q: deque = deque()
        self.reserved = 0
        self.high_water = 0

    @property
    def occupancy(self) -> int:
        return len(self._q)

    def space(self) -> int:
        return self.depth - len(self._q) - self.reserved

    def reserve(self) -> bool:
        if self.space() <= 0:
            return False
        self.reserved += 1
        return True

    def push(self, payload, now: int, reserved: bool = False) -> None:
        if reserved:
            self.reserved -= 1
        elif self.space() <= 0:
            raise EngineError(f"{self.name}: write to full FIFO")
        if len(self._q) >= self.depth:
            raise EngineError(f"{self.name}: overflow")
        self._q.append((now + self.write_latency, payload))
        self.high_water = max(self.high_water, len(self._q))

    def visible(self, now: int) -> bool:
        return bool(self._q) and self._q[0][0] <= now

    def pop(self, now: int):
        if not self.visible(now):
            raise EngineError(f"{self.name}: read while empty")
        return self._q.popleft()[1]

    def clear(self) -> None:
        self._q.clear()
        self.reserved = 0


@dataclass
class CacheModel:
    kind: str
    width_bits: int
    depth: int
    contents: np.ndarray = None
    used: int = 0
    reads: int = 0

    def __post_init__(self):
        lanes = max(1, self.width_bits // 16)
        if self.contents is None:
            self.contents = np.zeros((self.depth, lanes), np.float16)

    def load(self, lines: np.ndarray, offset: int = 0) -> None:
        lines = np.asarray(lines, np.float16)
        if lines.ndim == 1:
            lines = lines[:, None]
        if offset + len(lines) > self.depth:
            from .isa import CapacityError

            raise CapacityError(
                f"{self.kind} cache: {offset + len(lines)} lines > depth {self.depth}"
            )
        self.contents[offset : offset + len(lines), : lines.shape[1]] = lines
        self.used = max(self.used, offset + len(lines)) if offset else len(lines)

    def read(self, start: int, count: int) -> np.ndarray:
        self.reads += count
        return self.contents[start : start + count]


UNITS = ("mul", "psum_add", "fsum_add", "cmp", "div")


@dataclass
class CycleStats:
    total_cycles: int = 0
    busy: dict = field(default_factory=lambda: dict.fromkeys(UNITS, 0))
    fifo_high_water: dict = field(default_factory=dict)
    stall_cycles: int = 0
    mul_first_issue: int | None = None
    mul_last_issue: int | None = None
    mul_issues: int = 0
    mul_bubbles: int = 0
    pieces: int = 0

    def utilization(self) -> dict:
        t = self.total_cycles or 1
        return {u: self.busy[u] / t for u in UNITS}

    def add(self, other: "CycleStats") -> None:
        self.total_cycles += other.total_cycles
        for u in UNITS:
            self.busy[u] += other.busy[u]
        for k, v in other.fifo_high_water.items():
            self.fifo_high_water[k] = max(self.fifo_high_water.get(k, 0), v)
        self.stall_cycles += other.stall_cycles
        self.mul_issues += other.mul_issues
        self.mul_bubbles += other.mul_bubbles
        self.pieces += other.pieces

    def scaled(self, times: int) -> "CycleStats":
        out = copy.deepcopy(self)
        out.total_cycles *= times
        out.busy = {u: v * times for u, v in self.busy.items()}
        out.stall_cycles *= times
        out.mul_issues *= times
        out.mul_bubbles *= times
        out.pieces *= times
        return out

    def to_dict(self) -> dict:
        return {
            "total_cycles": self.total_cycles,
            "busy": dict(self.busy),
            "utilization": {u: round(v, 6) for u, v in self.utilization().items()},
            "fifo_high_water": dict(sorted(self.fifo_high_water.items())),
            "stall_cycles": self.stall_cycles,
            "mul_bubbles": self.mul_bubbles,
            "pieces": self.pieces,
        }


# --- pipelines -------------------------------------------------------------------


class _Pipeline:
    def __init__(self, cfg: EngineConfig):
        self.cfg = cfg
        self.lat = cfg.latency
        self.stats = CycleStats(pieces=1)
        self.done = False
        self.results_written = 0
        self.last_visible = 0
        self.result_fifo = FifoModel("result", cfg.result_fifo_depth, 32, self.lat.fifo_write)

    def _write_result(self, t: int, token) -> None:
        self.result_fifo.push(token, t)
        self.results_written += 1
        self.last_visible = t + self.result_fifo.write_latency

    def _finish(self, t: int, complete: bool) -> None:
        if complete and t + 1 >= self.last_visible:
            self.done = True
            self.stats.total_cycles = t + 1
            for f in self._fifos():
                self.stats.fifo_high_water[f.name] = f.high_water

    def _fifos(self):
        return [self.result_fifo]


class ConvPass(_Pipeline):
    """One filter pass: multipliers -> P_FIFO -> partial sums -> F_FIFO -> full sum."""

    def __init__(self, cfg, points: int, groups: int, ks: int, write_results: bool = True):
        super().__init__(cfg)
        self.points, self.groups, self.ks = points, groups, ks
        self.write_results = write_results
        self.total_lines = points * groups * ks
        self.next_line = 0
        self.mul_pipe: deque = deque()
        self.p_fifo = FifoModel("p_fifo", cfg.p_fifo_depth, 16 * cfg.parallelism, self.lat.fifo_write)
        self.f_fifo = FifoModel("f_fifo", cfg.f_fifo_depth, 16 * cfg.parallelism, self.lat.fifo_write)
        self.ps_busy_until = 0
        self.ps_count = 0
        self.ps_pending = None  # (ready_cycle, entry)
        self.fs_entry = None
        self.fs_lanes_left = 0
        self.fs_busy_until = 0
        self.fs_done = 0

    def _fifos(self):
        return [self.p_fifo, self.f_fifo, self.result_fifo]

    def mul_output_ready(self, t: int) -> list:
        """Products leaving the multipliers at cycle ``t``."""
        return [tok for ready, tok in self.mul_pipe if ready == t]

    def tick(self, t: int) -> None:
        st = self.stats
        add = self.lat.add
        while self.mul_pipe and self.mul_pipe[0][0] <= t:
            _, tok = self.mul_pipe.popleft()
            self.p_fifo.push(tok, t, reserved=True)

        # full-sum accumulator, initial value bias or previous fsum
        if self.fs_entry is not None and t >= self.fs_busy_until:
            if self.fs_lanes_left:
                self.fs_lanes_left -= 1
                self.fs_busy_until = t + add
                st.busy["fsum_add"] += add
            else:
                self.fs_done += 1
                if self.write_results and self.fs_done % self.groups == 0:
                    self._write_result(t, self.fs_done // self.groups - 1)
                self.fs_entry = None
        if self.fs_entry is None and self.f_fifo.visible(t):
            self.fs_entry = self.f_fifo.pop(t)
            self.fs_lanes_left = self.cfg.parallelism - 1
            self.fs_busy_until = t + add
            st.busy["fsum_add"] += add

        # partial-sum accumulators (all lanes in lockstep)
        if self.ps_pending is not None and t >= self.ps_pending[0]:
            if self.f_fifo.space() > 0:
                self.f_fifo.push(self.ps_pending[1], t)
                self.ps_pending = None
            else:
                st.stall_cycles += 1
        if self.ps_pending is None and t >= self.ps_busy_until and self.p_fifo.visible(t):
            tok = self.p_fifo.pop(t)
            self.ps_busy_until = t + add
            st.busy["psum_add"] += add
            self.ps_count += 1
            if self.ps_count == self.ks:
                self.ps_count = 0
                self.ps_pending = (self.ps_busy_until, tok // self.ks)

        # multipliers: one line per cycle while P_FIFO has room
        if self.next_line < self.total_lines:
            if self.p_fifo.reserve():
                self.mul_pipe.append((t + self.lat.mul, self.next_line))
                self.next_line += 1
                st.busy["mul"] += 1
                st.mul_issues += 1
                if st.mul_first_issue is None:
                    st.mul_first_issue = t
                st.mul_last_issue = t
            else:
                st.stall_cycles += 1

        entries = self.points * self.groups
        if self.write_results:
            complete = self.results_written == self.points
        else:
            complete = self.fs_done == entries
        if complete and st.mul_issues:
            st.mul_bubbles = st.mul_last_issue - st.mul_first_issue + 1 - st.mul_issues
        self._finish(t, complete)


class PoolPass(_Pipeline):
    """Max-pool (one stage) or average-pool (accumulate then divide) block."""

    def __init__(self, cfg, points: int, ks: int, kind: str):
        super().__init__(cfg)
        self.kind = kind
        self.points, self.ks = points, ks
        self.total_lines = points * ks
        self.next_line = 0
        name = "m_fifo" if kind == "max" else "s_fifo"
        depth = cfg.m_fifo_depth if kind == "max" else cfg.s_fifo_depth
        self.fifo = FifoModel(name, depth, 16 * cfg.parallelism, self.lat.fifo_write)
        self.busy_until = 0
        self.count = 0
        self.pending = None
        self.div_pipe: deque = deque()
        self.div_pulses: list[int] = []

    def _fifos(self):
        return [self.fifo, self.result_fifo]

    def tick(self, t: int) -> None:
        st = self.stats
        while self.div_pipe and self.div_pipe[0][0] <= t:
            _, tok = self.div_pipe.popleft()
            self._write_result(t, tok)

        if self.pending is not None and t >= self.pending[0]:
            if self.kind == "max":
                self._write_result(t, self.pending[1])
            else:
                # div_data_ready pulses for this one cycle
                self.div_pulses.append(t)
                self.div_pipe.append((t + self.lat.div, self.pending[1]))
                st.busy["div"] += self.lat.div
            self.pending = None
        if self.pending is None and t >= self.busy_until and self.fifo.visible(t):
            tok = self.fifo.pop(t)
            lat = self.lat.cmp if self.kind == "max" else self.lat.add
            self.busy_until = t + lat
            st.busy["cmp" if self.kind == "max" else "psum_add"] += lat
            self.count += 1
            if self.count == self.ks:
                self.count = 0
                self.pending = (self.busy_until, tok // self.ks)

        if self.next_line < self.total_lines:
            if self.fifo.space() > 0:
                self.fifo.push(self.next_line, t)
                self.next_line += 1
            else:
                st.stall_cycles += 1

        self._finish(t, self.results_written == self.points)


# --- engine ------------------------------------------------------------------------


@dataclass
class EngineState:
    cfg: EngineConfig
    enables: dict = field(
        default_factory=lambda: {"cmac_enable": False, "maxpool_enable": False, "avepool_enable": False}
    )
    descriptor: LayerDescriptor | None = None
    caches: dict = field(default_factory=dict)
    fsum: np.ndarray = None
    cmd_fifo: FifoModel = None
    cycle: int = 0

    def __post_init__(self):
        c = self.cfg
        w = 16 * c.parallelism
        if not self.caches:
            self.caches = {
                "data": CacheModel("data", w, c.data_cache_depth),
                "weight": CacheModel("weight", w, c.weight_cache_depth),
                "bias": CacheModel("bias", w, c.bias_cache_depth),
                "fsum": CacheModel("fsum", 16, c.max_o_side),
            }
        if self.fsum is None:
            # one fsum bank per output-channel lane of the loaded weight group
            self.fsum = np.zeros((c.parallelism, c.max_o_side), np.float16)
        if self.cmd_fifo is None:
            self.cmd_fifo = FifoModel("cmd_fifo", c.cmd_fifo_depth, 32, write_latency=0)


_ENABLE_FOR = {
    OpType.CONV_RELU: "cmac_enable",
    OpType.MAXPOOL: "maxpool_enable",
    OpType.AVGPOOL: "avepool_enable",
}


class Engine:
    def __init__(self, cfg: EngineConfig | None = None, reuse_timing: bool = True):
        self.cfg = cfg or EngineConfig()
        self.state = EngineState(self.cfg)
        self.reuse_timing = reuse_timing
        self._timings: dict = {}
        self._pipeline: _Pipeline | None = None
        self._local = 0

    # control ---------------------------------------------------------------

    @property
    def idle(self) -> bool:
        return self._pipeline is None

    def push_command_words(self, words) -> None:
        words = list(words)
        fifo = self.state.cmd_fifo
        if len(words) > fifo.space():
            from .isa import CapacityError

            raise CapacityError(
                f"command FIFO: {fifo.occupancy + len(words)} words > depth {fifo.depth}"
            )
        for w in words:
            fifo.push(int(w), self.state.cycle)

    def next_layer(self) -> LayerDescriptor:
        fifo = self.state.cmd_fifo
        n = self.cfg.cmd_burst_len
        if fifo.occupancy < n:
            raise EngineError("command FIFO underrun")
        words = [fifo.pop(self.state.cycle) for _ in range(n)]
        raw = b"".join(int(w).to_bytes(4, "little") for w in words)
        d = decode_descriptor(raw)
        self.csb_dispatch(d)
        return d

    def csb_dispatch(self, d: LayerDescriptor) -> EngineState:
        """Latch a descriptor into the layer registers and raise its enable."""
        if not self.idle:
            raise EngineError("dispatch while a piece is running")
        try:
            d.validate()
        except CommandError as e:
            raise CommandError(f"malformed command: {e}") from None
        validate_capacity(d, self.cfg)
        st = self.state
        st.descriptor = d
        for k in st.enables:
            st.enables[k] = False
        if d.op_type != OpType.IDLE:
            st.enables[_ENABLE_FOR[d.op_type]] = True
        st.fsum[:] = 0
        return st

    def restart(self) -> None:
        """Reset the compute units between pieces; caches and fsum are kept."""
        self._pipeline = None
        self._local = 0

    def advance_cycle(self) -> EngineState:
        if self._pipeline is not None and not self._pipeline.done:
            self._pipeline.tick(self._local)
            self._local += 1
        self.state.cycle += 1
        return self.state

    def _require(self, enable: str) -> None:
        if not self.state.enables[enable]:
            raise EngineError(f"{enable} is low")

    def _timed(self, key, factory) -> CycleStats:
        if self.reuse_timing and key in self._timings:
            stats = copy.deepcopy(self._timings[key])
            self.state.cycle += stats.total_cycles
            return stats
        self.restart()
        self._pipeline = factory()
        while not self._pipeline.done:
            self.advance_cycle()
        stats = self._pipeline.stats
        self._pipeline = None
        self._timings[key] = copy.deepcopy(stats)
        return stats

    def _timing_key(self, *parts):
        c = self.cfg
        return parts + (
            c.parallelism, c.latency, c.p_fifo_depth, c.f_fifo_depth,
            c.m_fifo_depth, c.s_fifo_depth, c.result_fifo_depth,
        )

    # compute pieces ---------------------------------------------------------

    def run_conv_block(self, lines, weights, biases, ks: int, first: bool = True,
                       last: bool = True):
        """Run every filter of a loaded weight group over one data block.

        ``lines`` is (N, L, P) with L = groups * ks in tile order, ``weights``
        is (F, L, P) and ``biases`` (F,). Each filter is one piece (engine
        restart in between). Returns ``(outputs (F, N) or None, stats)``;
        outputs appear only when ``last`` closes the channel traversal.
        """
        self._require("cmac_enable")
        x = np.asarray(lines, np.float16)
        w = np.asarray(weights, np.float16)
        n, L, p = x.shape
        f = w.shape[0]
        if p != self.cfg.parallelism or w.shape[1:] != (L, p) or L % ks:
            raise EngineError(f"lane mismatch: data {x.shape}, weights {w.shape}")
        if n > self.cfg.max_o_side or f > self.cfg.parallelism:
            raise EngineError("block exceeds fsum banks")
        if n * L > self.cfg.data_cache_depth:
            raise EngineError("block exceeds data cache")
        groups = L // ks
        ftz = self.cfg.flush_to_zero

        prod = fp16.vmul(x[None], w[:, None], ftz).reshape(f, n, groups, ks, p)
        psum = np.zeros((f, n, groups, p), np.float16)
        for j in range(ks):
            psum = fp16.vadd(psum, prod[:, :, :, j, :], ftz)
        if first:
            fs = np.repeat(np.asarray(biases, np.float16)[:, None], n, axis=1)
        else:
            fs = self.state.fsum[:f, :n].copy()
        for g in range(groups):
            for lane in range(p):
                fs = fp16.vadd(fs, psum[:, :, g, lane], ftz)
        self.state.fsum[:f, :n] = fs

        stats = CycleStats()
        key = self._timing_key("conv", n, groups, ks, last)
        for _ in range(f):
            stats.add(self._timed(key, lambda: ConvPass(self.cfg, n, groups, ks, last)))
        return (fp16.vrelu(fs) if last else None), stats

    def run_conv_piece(self, tiles, weights, bias):
        """Single-filter convenience form: ``tiles`` is a GemmTile list or (N, L, P)."""
        if isinstance(tiles, GemmTile):
            tiles = [tiles]
        if isinstance(tiles, (list, tuple)):
            ks = tiles[0].atoms
            x = np.stack([t.lines for t in tiles])
        else:
            x = np.asarray(tiles, np.float16)
            ks = self.state.descriptor.kernel_size
        w = np.asarray(weights, np.float16)[None]
        out, stats = self.run_conv_block(x, w, np.asarray([bias], np.float16), ks)
        return out[0], stats

    def run_maxpool_piece(self, lines):
        """``lines`` is (N, ks, P); returns ((N, P) maxima, stats)."""
        self._require("maxpool_enable")
        x = np.asarray(lines, np.float16)
        n, ks, p = x.shape
        init = np.float16(0.0) if self.cfg.maxpool_init == "zero" else np.float16(-np.inf)
        held = np.full((n, p), init, np.float16)
        for j in range(ks):
            new = x[:, j, :]
            held = np.where(fp16.vgt(new, held), new, held).astype(np.float16)
        key = self._timing_key("max", n, ks)
        return held, self._timed(key, lambda: PoolPass(self.cfg, n, ks, "max"))

    def run_avgpool_piece(self, lines, k_squared: int):
        """``lines`` is (N, ks, P); divides by the FP16 rendering of ``k_squared``."""
        self._require("avepool_enable")
        x = np.asarray(lines, np.float16)
        n, ks, p = x.shape
        ftz = self.cfg.flush_to_zero
        acc = np.zeros((n, p), np.float16)
        for j in range(ks):
            acc = fp16.vadd(acc, x[:, j, :], ftz)
        divisor = fp16.from_bits(np.uint16(fp16.real_to_half(float(k_squared))))
        out = fp16.vdiv(acc, divisor, ftz)
        key = self._timing_key("avg", n, ks)
        return out, self._timed(key, lambda: PoolPass(self.cfg, n, ks, "avg"))
