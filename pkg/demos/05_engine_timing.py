"""Cycle counts from the engine simulator for one convolution layer.

The same 3x3 layer is run at several channel-parallelism settings. Wider
lanes mean fewer cache lines per window, so the multipliers finish sooner;
the FIFO high-water marks show how far the data path runs ahead of the adders.
"""

import numpy as np

from streamaccel import EngineConfig, LayerDescriptor, OpType, Tensor
from streamaccel.host import HostSession
from streamaccel.isa import LayerWeights, encode_stream

rng = np.random.default_rng(0)
side, cin, cout = 14, 64, 16
x = Tensor(rng.random((side, side, cin)))
w = (rng.random((cout, 3, 3, cin)) * 0.1).astype(np.float16)
d = LayerDescriptor.make(OpType.CONV_RELU, 3, 1, 1, side, cin, cout)

print(f"conv 3x3, {cin}->{cout} channels, {side}x{side}\n")
print("lanes  cycles    mul busy  bubbles  fifo high water")
for par in (4, 8, 16):
    s = HostSession(EngineConfig().replace(parallelism=par))

    def program():
        yield from s.load_commands_gen(encode_stream([d]))
        return (yield from s.layer_gen(d, x, LayerWeights("c", w, np.zeros(cout, np.float16))))

    s.execute(program())
    st = s.device.layer_stats[0]
    hw = ", ".join(f"{k}={v}" for k, v in sorted(st.fifo_high_water.items()))
    print(f"{par:>5}  {st.total_cycles:>8}  {st.utilization()['mul']:8.3f}  {st.mul_bubbles:>7}  {hw}")

print("\nDoubling lanes from 4 to 8 halves the time. At 16 lanes the serial")
print("cross-lane adder, which folds one lane per add, becomes the bottleneck:")
print("the multipliers idle between pieces while the f_fifo backs up.")
