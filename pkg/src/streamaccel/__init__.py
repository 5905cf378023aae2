"""Software model of a stream-architecture CNN accelerator.

Bit-faithful FP16 arithmetic, an NHWC marshalling layer, a layer-descriptor
compiler, a cycle-level engine simulator and the host runtime that drives it.
"""

from .engine import CycleStats, Engine, FifoModel
from .host import (
    InferenceReport,
    TransactionChannel,
    argsort_desc,
    load_commands,
    preprocess_image,
    run_layer,
    run_network,
    verify_against_oracle,
)
from .isa import (
    EngineConfig,
    LayerDescriptor,
    OpType,
    compile_network,
    decode_descriptor,
    encode_descriptor,
    load_network,
)
from .layout import Tensor

__version__ = "0.1.0"

__all__ = [
    "CycleStats", "Engine", "EngineConfig", "FifoModel", "InferenceReport",
    "LayerDescriptor", "OpType", "Tensor", "TransactionChannel", "argsort_desc",
    "compile_network", "decode_descriptor", "encode_descriptor", "load_commands",
    "load_network", "preprocess_image", "run_layer", "run_network",
    "verify_against_oracle",
]
