"""A short walk through the engine's half-precision arithmetic.

Every value inside the accelerator is a 16-bit pattern. This script shows
how real numbers land on that grid, where rounding bites, and why the order
of a long sum matters.
"""

import numpy as np

from streamaccel import fp16

print("== rounding to the nearest half ==")
for x in (1.0, 0.1, 1 / 3, 65504.0, 65520.0, 2.0 ** -24, 2.0 ** -25, -0.0):
    h = fp16.real_to_half(x)
    print(f"{x!r:>24} -> 0x{h:04X} -> {fp16.half_to_real(h)!r}")

print("\n== ties go to even ==")
one = fp16.real_to_half(1.0)
half_ulp = fp16.real_to_half(2.0 ** -11)
print("1 + 2^-11 =", fp16.half_to_real(fp16.half_add(one, half_ulp)), "(ties down to 1.0)")

print("\n== subnormals, and what flushing them does ==")
tiny = fp16.real_to_half(2.0 ** -20)
print("2^-20 * 2^-2 kept      :", fp16.half_to_real(fp16.half_mul(tiny, fp16.real_to_half(0.25))))
print("2^-20 * 2^-2 flushed   :", fp16.half_to_real(fp16.half_mul(tiny, fp16.real_to_half(0.25), True)))

print("\n== the order of a sum matters ==")
rng = np.random.default_rng(0)
vals = rng.random(2000).astype(np.float16)
left = np.float16(0)
for v in vals:
    left = fp16.vadd(left, v)
exact = float(np.sum(vals.astype(np.float64)))
pairwise = vals.astype(np.float64).reshape(-1, 8).sum(1)
lanes = np.float16(0)
for v in fp16.vround(pairwise):
    lanes = fp16.vadd(lanes, v)
print(f"binary64 sum            {exact:.3f}")
print(f"one long fp16 fold      {float(left):.3f}  (rel err {abs(float(left) - exact) / exact:.1e})")
print(f"8-wide lanes, then fold {float(lanes):.3f}  (rel err {abs(float(lanes) - exact) / exact:.1e})")
print("Near 1000 halves are 0.5 apart, so each small addend to a long running")
print("sum is rounded hard. Summing in lanes first keeps partials small.")

print("\n== pipeline latencies used by the simulator ==")
for kind in ("mul", "add", "div", "cmp"):
    print(f"{kind:>4}: {fp16.latency_of(kind)} cycles")
