"""Compile SqueezeNet v1.1 into engine descriptors and look at the result.

The compiler checks every layer against the on-chip cache sizes, packs the
hardware layers into 96-bit descriptors (three 32-bit command words) and predicts each tensor's shape.
Host-side steps (padding, flatten, softmax) never reach the engine.
"""

from collections import Counter
from importlib.resources import files

from streamaccel import OpType, compile_network, decode_descriptor, load_network
from streamaccel.isa import encode_stream

net = load_network(files("streamaccel") / "data" / "squeezenet_v1_1.net")
compiled = compile_network(net)

print(f"{len(net.layers)} layers in the description, "
      f"{len(compiled.descriptors)} of them run on the engine\n")

print("shape after each layer:")
for name, dims in compiled.chain:
    print(f"  {name:<22} {dims}")

ops = Counter(OpType(d.op_type).name for d in compiled.descriptors)
print("\nengine work by type:", dict(ops))

stream = encode_stream(compiled.descriptors)
print(f"command stream: {len(stream)} bytes")
first = decode_descriptor(stream[:12])
print("first 12 bytes decode back to:", first)
assert first == compiled.descriptors[0]

# the fire modules run their two expand convolutions as a slot group
groups = [d for d in compiled.descriptors if d.slot]
print(f"\n{len(groups)} descriptors carry a slot tag "
      "(parallel branches merged by channel concatenation)")
