"""The alternatives that lost to channel-first im2col, measured.

Memory-efficient convolution reads every pixel once; a bitonic network
sorts with a fixed comparator budget; pipeline accumulation sums a long
vector on few adders. All three are exact here, so the interesting output
is their cost.
"""

import numpy as np

from streamaccel import algorithms as alg
from streamaccel.oracle import conv_ref

print("== MEC against per-column im2col, 7x7 input, 3x3 kernel, stride 1 ==")
rng = np.random.default_rng(0)
x = rng.integers(-4, 5, (7, 7, 2)).astype(float)
w = rng.integers(-2, 3, (4, 3, 3, 2)).astype(float)
out, trace = alg.conv_mec(x, w, np.zeros(4), 3, 1)
print("equals the reference convolution:", np.array_equal(out, conv_ref(x, w, np.zeros(4), 3, 1)))
print("MEC fetches per pixel (row 0):   ", trace.fetch_counts[0, :, 0].tolist())
print("im2col fetches per pixel (row 0):", alg.im2col_fetch_counts(7, 3, 1)[0].tolist())
print("slots busy per input column:     ", trace.slot_masks)
print("two neighbouring 3x3 windows share", alg.neighbor_overlap(3, 1), "pixels")

print("\n== bitonic sorting network for 8 values ==")
for i, stage in enumerate(alg.bitonic_network(8)):
    print(f"stage {i}: " + " ".join(f"{a}{'<' if up else '>'}{b}" for a, b, up in stage.pairs))
v = rng.integers(0, 100, 8).tolist()
print(v, "->", alg.bitonic_sort(v))

print("\n== pipeline accumulation: 169 values on 32 adders ==")
total, sched = alg.pipeline_accumulate(list(range(169)), 32)
print("fetches per cycle:", sched.fetch_counts)
print("adders per cycle: ", sched.adds)
print(f"sum {total} (expected {sum(range(169))}) in {sched.total_cycles} cycles")
