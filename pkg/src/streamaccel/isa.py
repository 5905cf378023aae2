"""Layer descriptors, engine configuration and the network compiler."""

from __future__ import annotations

import dataclasses
import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .fp16 import LatencyTable
from .layout import GeometryError, aligned, output_side, pads4

DESCRIPTOR_BYTES = 12


class OpType(enum.IntEnum):
    IDLE = 0
    CONV_RELU = 1
    MAXPOOL = 2
    AVGPOOL = 3


class CommandError(ValueError):
    """Malformed or out-of-range layer descriptor."""


class CapacityError(ValueError):
    """A layer or stream does not fit the engine's caches or FIFOs."""


class NetworkError(ValueError):
    pass


_LIMITS = {
    "stride": 15,
    "kernel": 15,
    "padding": 15,
    "kernel_size": 255,
    "stride2": 255,
    "input_side": 0xFFFF,
    "output_side": 0xFFFF,
    "input_channel": 0xFFF,
    "output_channel": 0xFFF,
    "slot": 15,
}


@dataclass(frozen=True)
class LayerDescriptor:
    op_type: OpType = OpType.IDLE
    stride: int = 0
    kernel: int = 0
    padding: int = 0
    kernel_size: int = 0
    stride2: int = 0
    input_side: int = 0
    output_side: int = 0
    input_channel: int = 0
    output_channel: int = 0
    slot: int = 0

    @classmethod
    def make(cls, op_type, kernel, stride, padding, input_side, input_channel,
             output_channel, slot=0) -> "LayerDescriptor":
        """Build a descriptor, filling the derived fields."""
        return cls(
            op_type=OpType(op_type),
            stride=stride,
            kernel=kernel,
            padding=padding,
            kernel_size=kernel * kernel,
            stride2=stride * kernel,
            input_side=input_side,
            output_side=output_side(input_side, kernel, padding, stride),
            input_channel=input_channel,
            output_channel=output_channel,
            slot=slot,
        )

    def validate(self) -> None:
        for name, hi in _LIMITS.items():
            v = getattr(self, name)
            if not 0 <= v <= hi:
                raise CommandError(f"{name}={v} outside 0..{hi}")
        if self.kernel_size != self.kernel * self.kernel:
            raise CommandError("kernel_size != kernel * kernel")
        if self.stride2 != self.stride * self.kernel:
            raise CommandError("stride2 != stride * kernel")
        if self.op_type == OpType.IDLE:
            return
        try:
            expect = output_side(self.input_side, self.kernel, self.padding, self.stride)
        except GeometryError as e:
            raise CommandError(str(e)) from None
        if self.kernel < 1 or expect != self.output_side:
            raise CommandError(f"output_side {self.output_side} != {expect}")
        if self.op_type in (OpType.MAXPOOL, OpType.AVGPOOL):
            if self.input_channel != self.output_channel:
                raise CommandError("pooling needs input_channel == output_channel")

    @property
    def slot_order(self) -> int:
        return self.slot & 0b11

    @property
    def slot_count(self) -> int:
        return self.slot >> 2


def encode_descriptor(d: LayerDescriptor) -> bytes:
    d.validate()
    w0 = (
        int(d.op_type)
        | d.stride << 4
        | d.kernel << 8
        | d.padding << 12
        | d.kernel_size << 16
        | d.stride2 << 24
    )
    w1 = d.input_side | d.output_side << 16
    w2 = d.input_channel | d.output_channel << 12 | d.slot << 24
    return struct.pack("<III", w0, w1, w2)


def decode_descriptor(raw: bytes) -> LayerDescriptor:
    if len(raw) != DESCRIPTOR_BYTES:
        raise CommandError(f"descriptor must be 12 bytes, got {len(raw)}")
    w0, w1, w2 = struct.unpack("<III", raw)
    op = w0 & 0xF
    if op > OpType.AVGPOOL:
        raise CommandError(f"unknown op_type {op}")
    if w2 >> 28:
        raise CommandError("reserved bits set")
    d = LayerDescriptor(
        op_type=OpType(op),
        stride=(w0 >> 4) & 0xF,
        kernel=(w0 >> 8) & 0xF,
        padding=(w0 >> 12) & 0xF,
        kernel_size=(w0 >> 16) & 0xFF,
        stride2=(w0 >> 24) & 0xFF,
        input_side=w1 & 0xFFFF,
        output_side=w1 >> 16,
        input_channel=w2 & 0xFFF,
        output_channel=(w2 >> 12) & 0xFFF,
        slot=(w2 >> 24) & 0xF,
    )
    d.validate()
    return d


def encode_stream(descs: Iterable[LayerDescriptor]) -> bytes:
    return b"".join(encode_descriptor(d) for d in descs)


def decode_stream(raw: bytes) -> list[LayerDescriptor]:
    if len(raw) % DESCRIPTOR_BYTES:
        raise CommandError("command stream length is not a multiple of 12")
    return [
        decode_descriptor(raw[i : i + DESCRIPTOR_BYTES])
        for i in range(0, len(raw), DESCRIPTOR_BYTES)
    ]


# --- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class EngineConfig:
    """Build-time parameters; names follow the hardware macro set."""

    precision_bits: int = 16
    parallelism: int = 8
    max_kernel: int = 15
    max_o_side: int = 128  # fsum depth
    cmd_burst_len: int = 3
    cmd_fifo_depth: int = 1024
    result_fifo_depth: int = 1024
    data_cache_depth: int = 1024
    weight_cache_depth: int = 8192
    bias_cache_depth: int = 1024
    p_fifo_depth: int = 1024
    f_fifo_depth: int = 1024
    m_fifo_depth: int = 1024
    s_fifo_depth: int = 1024
    latency: LatencyTable = field(default_factory=LatencyTable)
    maxpool_init: str = "zero"
    flush_to_zero: bool = False

    def __post_init__(self):
        p = self.parallelism
        if p < 1 or p & (p - 1):
            raise ValueError("parallelism must be a power of two")
        if self.precision_bits != 16:
            raise ValueError("only 16-bit precision is modelled")
        if self.cmd_burst_len * 4 != DESCRIPTOR_BYTES:
            raise ValueError("cmd_burst_len * 4 must equal the 12-byte descriptor")
        if self.maxpool_init not in ("zero", "neg_inf"):
            raise ValueError("maxpool_init must be 'zero' or 'neg_inf'")

    @property
    def max_layers(self) -> int:
        return self.cmd_fifo_depth // self.cmd_burst_len

    def replace(self, **overrides) -> "EngineConfig":
        if "latency" in overrides and isinstance(overrides["latency"], dict):
            overrides["latency"] = LatencyTable(**overrides["latency"])
        return dataclasses.replace(self, **overrides)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_file(cls, path) -> "EngineConfig":
        return cls().replace(**json.loads(Path(path).read_text()))


def validate_capacity(d: LayerDescriptor, cfg: EngineConfig | None = None) -> None:
    """Raise :class:`CapacityError` naming the first violated cache/FIFO rule."""
    cfg = cfg or EngineConfig()
    if d.op_type == OpType.IDLE:
        return
    if d.kernel > cfg.max_kernel:
        raise CapacityError(f"kernel {d.kernel} > max_kernel {cfg.max_kernel}")
    p = cfg.parallelism
    if d.op_type == OpType.CONV_RELU:
        # the weight cache holds one output-channel group of p filters,
        # each ceil(c/p)*k*k lines deep: p * c*k*k/p lines in all
        if d.input_channel * d.kernel_size > cfg.weight_cache_depth:
            raise CapacityError(
                f"weight cache: input_channel {d.input_channel} * kernel_size "
                f"{d.kernel_size} > {cfg.weight_cache_depth}"
            )
        if d.kernel_size > cfg.data_cache_depth:
            raise CapacityError("data cache: one kernel window does not fit")
        if d.output_side > cfg.max_o_side:
            raise CapacityError(f"fsum: output_side {d.output_side} > {cfg.max_o_side}")
        if d.output_side > cfg.result_fifo_depth:
            raise CapacityError("result FIFO: conv output row too long")
    else:
        if d.output_side * p > cfg.result_fifo_depth:
            raise CapacityError(
                f"result FIFO: pooling row {d.output_side} x {p} lanes > "
                f"{cfg.result_fifo_depth}"
            )
        if d.kernel_size > cfg.data_cache_depth:
            raise CapacityError("data cache: one pooling window does not fit")


# --- network description -------------------------------------------------------

HW_OPS = {"conv": OpType.CONV_RELU, "maxpool": OpType.MAXPOOL, "avgpool": OpType.AVGPOOL}
HOST_OPS = {"relu", "pad", "dropout", "flatten", "softmax"}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    op: str
    kernel: int = 1
    stride: int = 1
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)
    out_ch: int = 0
    slot: str = "-"

    def line(self) -> str:
        t, l, b, r = self.pad
        return (
            f"{self.name} {self.op} {self.kernel} {self.stride} {t} {l} {b} {r} "
            f"{self.out_ch} {self.slot}"
        )


@dataclass(frozen=True)
class NetworkDescription:
    input_side: int
    input_channels: int
    layers: tuple[LayerSpec, ...]

    def to_text(self) -> str:
        out = [f"input {self.input_side} {self.input_channels}"]
        out += [layer.line() for layer in self.layers]
        return "\n".join(out) + "\n"


def parse_network(text: str) -> NetworkDescription:
    """Parse the line-oriented network format.

    First non-comment line: ``input <side> <channels>``. Then one layer per
    line: ``name op k s pad_t pad_l pad_b pad_r out_ch slot_tag``.
    """
    header = None
    layers = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if header is None:
            if tok[0] != "input" or len(tok) != 3:
                raise NetworkError(f"line {lineno}: expected 'input <side> <channels>'")
            header = (int(tok[1]), int(tok[2]))
            continue
        if len(tok) != 10:
            raise NetworkError(f"line {lineno}: expected 10 fields, got {len(tok)}")
        name, op = tok[0], tok[1]
        if op not in HW_OPS and op not in HOST_OPS:
            raise NetworkError(f"line {lineno}: unknown op {op!r}")
        try:
            k, s, t, l, b, r, oc = (int(v) for v in tok[2:9])
        except ValueError:
            raise NetworkError(f"line {lineno}: non-integer field") from None
        layers.append(LayerSpec(name, op, k, s, (t, l, b, r), oc, tok[9]))
    if header is None:
        raise NetworkError("no input header")
    if not layers:
        raise NetworkError("no layers")
    return NetworkDescription(header[0], header[1], tuple(layers))


def load_network(path) -> NetworkDescription:
    return parse_network(Path(path).read_text())


@dataclass
class PlanEntry:
    name: str
    op: str  # a HW op name or a host op
    input_dims: tuple[int, int]  # (side, channels)
    output_dims: tuple[int, int]
    descriptor: LayerDescriptor | None = None
    command_index: int | None = None
    prepad: tuple[int, int, int, int] = (0, 0, 0, 0)
    group: str | None = None
    weight_elems: int = 0
    bias_elems: int = 0
    data_elems: int = 0
    result_elems: int = 0


@dataclass
class CompiledNetwork:
    network: NetworkDescription
    config: EngineConfig
    plan: list[PlanEntry]
    chain: list[tuple[str, str]]  # (name, "CxHxW" or "N") in Table order

    @property
    def descriptors(self) -> list[LayerDescriptor]:
        return [e.descriptor for e in self.plan if e.descriptor is not None]

    def command_stream(self) -> bytes:
        return encode_stream(self.descriptors)

    def dims_of(self, name: str) -> str:
        for n, d in self.chain:
            if n == name:
                return d
        raise KeyError(name)


def _fmt(side: int, c: int, vector: bool = False) -> str:
    return str(c) if vector else f"{c}x{side}x{side}"


def compile_network(net: NetworkDescription, cfg: EngineConfig | None = None) -> CompiledNetwork:
    cfg = cfg or EngineConfig()
    p = cfg.parallelism
    side, ch = net.input_side, net.input_channels
    vector = False
    plan: list[PlanEntry] = []
    chain = [("input", _fmt(side, ch))]
    ncmd = 0
    layers = list(net.layers)

    # group consecutive hardware layers sharing a slot tag
    i = 0
    while i < len(layers):
        spec = layers[i]
        if spec.slot != "-" and spec.op in HW_OPS:
            j = i
            while j < len(layers) and layers[j].slot == spec.slot:
                j += 1
            members = layers[i:j]
            if len(members) > 3:
                raise NetworkError(f"slot group {spec.slot}: at most 3 members fit slot bits")
            outs = []
            for order, m in enumerate(members):
                if m.op != "conv":
                    raise NetworkError(f"{m.name}: only conv layers may share a slot")
                entry = _hw_entry(m, side, ch, cfg, slot=(len(members) << 2) | order)
                entry.group = spec.slot
                entry.command_index = ncmd
                ncmd += 1
                plan.append(entry)
                chain.append((m.name, _fmt(*entry.output_dims)))
                outs.append(entry.output_dims)
            if len({o[0] for o in outs}) != 1:
                raise NetworkError(f"slot group {spec.slot}: surface mismatch")
            ch = sum(o[1] for o in outs)
            side = outs[0][0]
            plan.append(PlanEntry(spec.slot, "concat", (side, ch), (side, ch), group=spec.slot))
            chain.append((spec.slot, _fmt(side, ch)))
            i = j
            continue

        if spec.op in HW_OPS:
            if vector:
                raise NetworkError(f"{spec.name}: hardware layer after flatten")
            entry = _hw_entry(spec, side, ch, cfg, slot=0)
            entry.command_index = ncmd
            ncmd += 1
            plan.append(entry)
            side, ch = entry.output_dims
        elif spec.op == "relu":
            if not plan or plan[-1].op != "conv":
                raise NetworkError(f"{spec.name}: relu must follow a conv layer")
            plan.append(PlanEntry(spec.name, "relu", (side, ch), (side, ch)))
        elif spec.op == "pad":
            t, l, b, r = spec.pad
            if t + b != l + r:
                raise NetworkError(f"{spec.name}: padding must keep the surface square")
            new_side = side + t + b
            plan.append(PlanEntry(spec.name, "pad", (side, ch), (new_side, ch), prepad=spec.pad))
            side = new_side
        elif spec.op == "flatten":
            if side != 1:
                raise NetworkError(f"{spec.name}: flatten needs a 1x1 surface")
            plan.append(PlanEntry(spec.name, "flatten", (side, ch), (1, ch)))
            vector = True
        else:  # dropout, softmax
            plan.append(PlanEntry(spec.name, spec.op, (side, ch), (side, ch)))
            if spec.op == "softmax":
                vector = True
        chain.append((spec.name, _fmt(side, ch, vector or (side == 1 and spec.op != "conv"))))
        i += 1

    if ncmd > cfg.max_layers:
        raise CapacityError(
            f"{ncmd} layers exceed the command FIFO ({cfg.max_layers} layers)"
        )
    return CompiledNetwork(net, cfg, plan, chain)


def _hw_entry(spec: LayerSpec, side: int, ch: int, cfg: EngineConfig, slot: int) -> PlanEntry:
    t, l, b, r = spec.pad
    if t + b != l + r:
        raise NetworkError(f"{spec.name}: padding must keep the surface square")
    k = spec.kernel if spec.kernel > 0 else side + t + b  # k=0: global pooling
    if t == l == b == r:
        prepad, pad, in_side = (0, 0, 0, 0), t, side
    else:
        prepad, pad, in_side = (t, l, b, r), 0, side + t + b
    op = HW_OPS[spec.op]
    if op == OpType.CONV_RELU:
        if spec.out_ch < 1:
            raise NetworkError(f"{spec.name}: conv needs out_ch")
        oc = spec.out_ch
    else:
        if spec.out_ch not in (0, ch):
            raise NetworkError(f"{spec.name}: pooling keeps the channel count")
        oc = ch
    try:
        d = LayerDescriptor.make(op, k, spec.stride, pad, in_side, ch, oc, slot)
        d.validate()
    except (GeometryError, CommandError) as e:
        raise NetworkError(f"{spec.name}: {e}") from None
    validate_capacity(d, cfg)
    osd = d.output_side
    ca = aligned(ch, cfg.parallelism)
    entry = PlanEntry(spec.name, spec.op, (side, ch), (osd, oc), descriptor=d, prepad=prepad)
    if op == OpType.CONV_RELU:
        entry.weight_elems = oc * d.kernel_size * ca
        entry.bias_elems = oc
        entry.data_elems = osd * osd * d.kernel_size * ca * -(-oc // cfg.parallelism)
    else:
        entry.data_elems = osd * osd * d.kernel_size * ca
    entry.result_elems = osd * osd * oc
    return entry


# --- weight blobs ----------------------------------------------------------------


@dataclass
class LayerWeights:
    name: str
    weights: np.ndarray  # (n, k, k, ci) float16, channel lowest
    biases: np.ndarray  # (n,) float16

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def k(self) -> int:
        return self.weights.shape[1]

    @property
    def ci(self) -> int:
        return self.weights.shape[3]


def write_blobs(path, blobs: Iterable[LayerWeights]) -> None:
    parts = []
    for lw in blobs:
        name = lw.name.encode()
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<III", lw.n, lw.k, lw.ci))
        parts.append(np.asarray(lw.weights, np.float16).astype("<f2").tobytes())
        parts.append(np.asarray(lw.biases, np.float16).astype("<f2").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_blobs(path) -> dict[str, LayerWeights]:
    raw = Path(path).read_bytes()
    out = {}
    pos = 0
    while pos < len(raw):
        try:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2 : pos + 2 + nlen].decode()
            pos += 2 + nlen
            n, k, ci = struct.unpack_from("<III", raw, pos)
            pos += 12
            count = n * k * k * ci
            w = np.frombuffer(raw, "<f2", count, pos).astype(np.float16)
            pos += 2 * count
            b = np.frombuffer(raw, "<f2", n, pos).astype(np.float16)
            pos += 2 * n
        except (struct.error, ValueError, UnicodeDecodeError) as e:
            raise ValueError(f"{path}: truncated or corrupt weight blob ({e})") from None
        out[name] = LayerWeights(name, w.reshape(n, k, k, ci), b)
    return out


def random_blobs(compiled: CompiledNetwork, seed: int = 0, scale: float = 1.0,
                 nonnegative: bool = False) -> dict[str, LayerWeights]:
    """He-style random weights for every conv layer of a compiled network."""
    rng = np.random.default_rng(seed)
    out = {}
    for e in compiled.plan:
        d = e.descriptor
        if d is None or d.op_type != OpType.CONV_RELU:
            continue
        n, k, ci = d.output_channel, d.kernel, d.input_channel
        std = scale * np.sqrt(2.0 / (k * k * ci))
        w = rng.normal(0.0, std, (n, k, k, ci))
        b = rng.normal(0.0, 0.1 * scale, n)
        if nonnegative:
            w, b = np.abs(w), np.abs(b)
        out[e.name] = LayerWeights(e.name, w.astype(np.float16), b.astype(np.float16))
    return out
