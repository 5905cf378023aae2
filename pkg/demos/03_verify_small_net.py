"""Run a small network on the simulated engine and compare it to binary64.

Each layer is computed twice: once through the FP16 engine and once by a
float64 reference fed the very same input. Two weight draws show when FP16
is trustworthy and when cancellation eats the digits.
"""

import numpy as np

from streamaccel import Tensor, verify_against_oracle
from streamaccel.isa import compile_network, parse_network, random_blobs

NET = """input 31 3
conv_a conv 3 1 1 1 1 1 16 -
relu_a relu 0 0 0 0 0 0 0 -
pool_a maxpool 3 2 0 0 0 0 0 -
conv_b conv 1 1 0 0 0 0 10 -
gap avgpool 0 1 0 0 0 0 0 -
prob softmax 0 0 0 0 0 0 0 -
"""

compiled = compile_network(parse_network(NET))
rng = np.random.default_rng(1)
image = Tensor(np.abs(rng.standard_normal((31, 31, 3))))

for label, nonneg in (("nonnegative weights", True), ("mixed-sign weights", False)):
    blobs = random_blobs(compiled, seed=1, nonnegative=nonneg)
    report = verify_against_oracle(compiled, blobs, image)
    print(f"== {label} ==")
    print(report.to_table())
    print("top-1 agrees:", report.top1_agree, "| total cycles:", report.total_cycles)
    print()

print("With nonnegative terms every partial sum grows, so each rounding costs at")
print("most half an ulp of a large number. Mixed signs let sums cancel toward")
print("zero while the rounding error stays sized to the big partials, so the")
print("relative error of small outputs can be large even though the class agrees.")
