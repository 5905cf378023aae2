"""Alternative hardware algorithms: MEC, bitonic networks, pipeline accumulation.

These were weighed against channel-first im2col and not adopted by the
engine; they are modelled as schedule generators with instrumentation so the
access-count and utilisation arguments can be checked numerically.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .layout import GeometryError, output_side
from .oracle import _pad, as_f64


# --- MEC ---------------------------------------------------------------------


@dataclass
class MecTrace:
    fetch_counts: np.ndarray  # (H, W, C) fetches of every padded input element
    column_uses: np.ndarray  # (W,) slots consuming each input column
    slot_masks: list[str]  # per input-column cycle, slot 0 leftmost
    slots: int  # slot bank size (sized for stride 1)
    used_slots: int  # kernel - stride + 1


def conv_mec(x, weights, biases, k: int, s: int, p=0):
    """Convolution by streaming each input column once through a slot bank.

    Every output column is bound to slot ``wo % (k - s + 1)``; an input
    column is fetched once and broadcast to every open slot whose window
    covers it. Returns ``(output, trace)`` with output as float64 (oh, ow, n).
    """
    a = _pad(as_f64(x), p)
    w = np.asarray(weights, np.float64)
    b = np.asarray(biases, np.float64)
    H, W, C = a.shape
    if w.ndim != 4 or w.shape[1:3] != (k, k) or w.shape[3] != C:
        raise GeometryError("weights do not match input")
    if s > k:
        raise GeometryError("MEC needs stride <= kernel")
    oh = output_side(H, k, 0, s)
    ow = output_side(W, k, 0, s)
    n = w.shape[0]
    used = k - s + 1
    acc = np.zeros((oh, ow, n)) + b
    fetch = np.zeros((H, W, C), dtype=np.int64)
    uses = np.zeros(W, dtype=np.int64)
    masks = []
    owner: list[int | None] = [None] * k
    for xc in range(W):
        column = a[:, xc, :]
        fetch[:, xc, :] += 1
        st = column.strides
        strips = np.lib.stride_tricks.as_strided(
            column, shape=(oh, k, C), strides=(st[0] * s, st[0], st[1])
        )
        lo = max(0, -(-(xc - k + 1) // s))
        hi = min(ow - 1, xc // s)
        active = [False] * k
        for wo in range(lo, hi + 1):
            slot = wo % used
            if owner[slot] not in (None, wo) and owner[slot] * s + k > xc:
                raise AssertionError("slot collision")  # k - s + 1 always suffices
            owner[slot] = wo
            active[slot] = True
            j = xc - wo * s
            acc[:, wo, :] += np.einsum("hic,nic->hn", strips, w[:, :, j, :])
        uses[xc] = sum(active)
        masks.append("".join("1" if f else "0" for f in active))
    return acc, MecTrace(fetch, uses, masks, k, used)


def im2col_fetch_counts(side: int, k: int, s: int) -> np.ndarray:
    """Fetches per element when each output column lowers its own k-wide strip.

    Element (y, x) is read once per output column whose strip covers ``x``;
    vertical reuse happens inside the strip pipeline in both schemes.
    """
    ow = output_side(side, k, 0, s)
    counts = np.zeros((side, side), dtype=np.int64)
    for wo in range(ow):
        counts[:, wo * s : wo * s + k] += 1
    return counts


def neighbor_overlap(k: int, s: int) -> int:
    """Elements shared by two horizontally adjacent k x k windows."""
    first = {(y, x) for y in range(k) for x in range(k)}
    second = {(y, x + s) for y in range(k) for x in range(k)}
    return len(first & second)


# --- bitonic sorting network ---------------------------------------------------


@dataclass(frozen=True)
class ComparatorStage:
    pairs: tuple[tuple[int, int, bool], ...]  # (i, j, ascending)

    def __post_init__(self):
        seen = [i for p in self.pairs for i in p[:2]]
        if len(seen) != len(set(seen)):
            raise ValueError("index used twice in one stage")


def bitonic_network(n: int) -> list[ComparatorStage]:
    if n < 2 or n & (n - 1):
        raise ValueError(f"bitonic network needs a power-of-two size, got {n}")
    stages = []
    size = 2
    while size <= n:
        step = size // 2
        while step >= 1:
            pairs = tuple(
                (i, i + step, (i & size) == 0) for i in range(n) if not i & step
            )
            stages.append(ComparatorStage(pairs))
            step //= 2
        size *= 2
    return stages


def apply_network(values: Sequence, stages: Sequence[ComparatorStage]) -> list:
    out = list(values)
    for stage in stages:
        for i, j, up in stage.pairs:
            if (out[i] > out[j]) == up:
                out[i], out[j] = out[j], out[i]
    return out


def bitonic_sort(values: Sequence, descending: bool = False) -> list:
    vals = list(values)
    if len(vals) <= 1:
        return vals
    out = apply_network(vals, bitonic_network(len(vals)))
    return out[::-1] if descending else out


# --- pipeline accumulation ------------------------------------------------------


@dataclass
class AccumulationSchedule:
    adders: int
    fetches: list[int] = field(default_factory=list)  # per cycle, incl. fold-only
    adds: list[int] = field(default_factory=list)  # adders busy per cycle

    @property
    def fetch_counts(self) -> list[int]:
        """Per-cycle fetch counts up to the last cycle that reads input."""
        last = max((i for i, f in enumerate(self.fetches) if f), default=-1)
        return self.fetches[: last + 1]

    @property
    def total_cycles(self) -> int:
        return len(self.fetches)


def _greatest_pow2_at_most(x: int) -> int:
    return 1 << (x.bit_length() - 1) if x >= 1 else 0


def pipeline_accumulate(values: Sequence, adders: int):
    """Sum ``values`` with a fixed adder budget; returns ``(sum, schedule)``.

    Input is consumed in levels. A level of ``a`` adders (a power of two,
    at most ``adders``, with ``3a`` not exceeding what is left) fetches
    ``2a`` operands in its first cycle and ``a`` per cycle while ``a`` remain,
    each adder folding new data into its own partial; afterwards its partials
    reduce pairwise, one tree level per cycle, alongside the next level's
    feed. Fewer than three leftovers are fetched once every level has a
    single partial, and a final pairwise merge combines everything.
    169 operands on 32 adders fetch 64, 32, 32, 32, 4, 2, 2, 0, 0, 1.
    """
    if adders < 1:
        raise ValueError("need at least one adder")
    vals = list(values)
    sched = AccumulationSchedule(adders)
    if not vals:
        return 0, sched

    events: dict[int, list] = {}  # cycle -> list of (fetch, adds)

    def log(cycle, fetch, adds):
        f, a = events.get(cycle, (0, 0))
        events[cycle] = (f + fetch, a + adds)

    pos = 0
    cycle = 1
    results = []  # (done_cycle, value)
    while True:
        left = len(vals) - pos
        a = _greatest_pow2_at_most(min(adders, left // 3))
        if a == 0:
            break
        partials = [vals[pos + 2 * i] + vals[pos + 2 * i + 1] for i in range(a)]
        pos += 2 * a
        log(cycle, 2 * a, a)
        c = cycle
        while len(vals) - pos >= a:
            c += 1
            partials = [partials[i] + vals[pos + i] for i in range(a)]
            pos += a
            log(c, a, a)
        cycle = c + 1  # next level starts feeding right after
        while len(partials) > 1:
            c += 1
            partials = [partials[i] + partials[i + 1] for i in range(0, len(partials), 2)]
            log(c, 0, len(partials))
        results.append((c, partials[0]))

    stragglers = vals[pos:]
    done = max((r[0] for r in results), default=0)
    if stragglers:
        c = done + 1
        log(c, len(stragglers), 0)
    else:
        c = done
    operands = [r[1] for r in results] + stragglers
    first = True
    while len(operands) > 1:
        if not first or not stragglers:
            c += 1
        first = False
        merged = [operands[i] + operands[i + 1] for i in range(0, len(operands) - 1, 2)]
        if len(operands) % 2:
            merged.append(operands[-1])
        log(c, 0, len(operands) // 2)
        operands = merged

    last = max(events)
    for cy in range(1, last + 1):
        f, ad = events.get(cy, (0, 0))
        if ad > adders:
            raise AssertionError(f"cycle {cy} uses {ad} adders > {adders}")
        sched.fetches.append(f)
        sched.adds.append(ad)
    return operands[0], sched
