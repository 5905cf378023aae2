import json

import numpy as np
import pytest

from streamaccel import fp16, oracle
from streamaccel.host import (
    HostSession, LayerError, TransactionChannel, TransportTimeout, argsort_desc, drive,
    load_commands, preprocess_image, run_layer, run_network, verify_against_oracle,
)
from streamaccel.isa import (
    CapacityError, EngineConfig, LayerDescriptor, LayerWeights, OpType, compile_network,
    encode_stream, load_network, parse_network, random_blobs,
)
from streamaccel.layout import Tensor, concat_channels

U = 2.0**-11


def test_preprocess():
    z = preprocess_image(np.zeros((4, 4, 3), np.uint8), (0, 0, 0))
    assert z.dims == (3, 4, 4) and not z.array.any()
    v = preprocess_image(np.full((2, 2, 3), 200, np.uint8), (10.0, 20.0, 30.0))
    assert fp16.to_bits(v.array[0, 0]).tolist() == [
        fp16.real_to_half(200 / 255 * 255 - m) for m in (10.0, 20.0, 30.0)]
    px = np.zeros((1, 1, 3), np.uint8)
    px[0, 0] = (1, 2, 3)
    assert preprocess_image(px).array[0, 0].tolist() == [3.0, 2.0, 1.0]
    with pytest.raises(ValueError):
        preprocess_image(np.zeros((4, 5, 3), np.uint8))
    with pytest.raises(ValueError):
        preprocess_image(np.zeros((4, 4, 3), np.uint8), side=5)


def test_argsort_desc(rng):
    assert argsort_desc([0.1, 0.7, 0.2]).tolist() == [1, 2, 0]
    assert argsort_desc(np.full(6, 0.25)).tolist() == list(range(6))
    v = rng.integers(0, 5, 200).astype(float)
    want = sorted(range(200), key=lambda i: (-v[i], i))
    assert argsort_desc(v).tolist() == want
    with pytest.raises(ValueError):
        argsort_desc([1.0, np.nan])


def test_load_commands_capacity():
    d = LayerDescriptor.make(OpType.MAXPOOL, 1, 1, 0, 4, 8, 8)
    assert load_commands(b"").state.cmd_fifo.occupancy == 0
    eng = load_commands(encode_stream([d] * 341))
    assert eng.state.cmd_fifo.occupancy == 1023
    with pytest.raises(CapacityError):
        load_commands(encode_stream([d] * 342))
    with pytest.raises(ValueError):
        load_commands(bytes(13))


def _transfer(gate, words, depth=16, chunk=5):
    ch = TransactionChannel("t", depth=depth, timeout=10_000, gate=gate)
    got = []

    def producer():
        for i in range(0, len(words), chunk):
            yield from ch.put(words[i:i + chunk])

    def consumer():
        while len(got) < len(words):
            part = yield from ch.get(min(3, len(words) - len(got)))
            got.extend(part.tolist())

    drive(producer(), consumer(), [ch])
    return ch, got


def test_transport_under_random_ready(rng):
    for _ in range(100):
        pattern = rng.random(4096) < rng.uniform(0.2, 0.9)
        words = rng.integers(0, 2**32, int(rng.integers(1, 300)), dtype=np.uint64).astype(np.uint32)
        ch, got = _transfer(lambda c: pattern[c % 4096], words)
        assert got == words.tolist()
        assert sum(n for _, n in ch.log) == len(words) == ch.words_received
        assert all(pattern[c % 4096] for c, _ in ch.log)


def test_transport_timeout():
    ch = TransactionChannel("t", timeout=50, gate=lambda c: False)

    def producer():
        yield from ch.put([1, 2, 3])

    def idle():
        while True:
            yield

    with pytest.raises(TransportTimeout):
        drive(producer(), idle(), [ch])


def test_identity_conv_layer(rng):
    x = Tensor(np.abs(rng.standard_normal((6, 6, 8))))
    w = np.eye(8, dtype=np.float16).reshape(8, 1, 1, 8)
    d = LayerDescriptor.make(OpType.CONV_RELU, 1, 1, 0, 6, 8, 8)
    assert run_layer(d, x, w, np.zeros(8)) == x


def test_global_avgpool_of_constant():
    x = Tensor(np.full((14, 14, 16), 0.75))
    d = LayerDescriptor.make(OpType.AVGPOOL, 14, 1, 0, 14, 16, 16)
    y = run_layer(d, x)
    assert y.dims == (16, 1, 1) and np.all(y.array == 0.75)


def rounding_bound(x, w, k, s, p, cfg):
    """|fp16 - exact| <= gamma_n * sum|terms| for the longest fold path."""
    groups = -(-x.shape[2] // cfg.parallelism)
    n = 1 + k * k + groups * cfg.parallelism + 1
    gamma = n * U / (1 - n * U)
    mag = oracle.conv_ref(np.abs(x), np.abs(w), np.zeros(w.shape[0]), k, s, p)
    return gamma * mag + 2.0**-24 * n


def test_conv1_geometry_against_oracle(rng):
    cfg = EngineConfig()
    x = Tensor(rng.standard_normal((227, 227, 3)) * 30)
    w = (rng.standard_normal((64, 3, 3, 3)) * 0.2).astype(np.float16)
    b = (rng.standard_normal(64) * 0.1).astype(np.float16)
    d = LayerDescriptor.make(OpType.CONV_RELU, 3, 2, 0, 227, 3, 64)
    y = run_layer(d, x, w, b)
    assert y.dims == (64, 113, 113)
    xf = x.array.astype(np.float64)
    ref = oracle.relu_ref(oracle.conv_ref(xf, w, b, 3, 2))
    bound = rounding_bound(xf, w.astype(np.float64), 3, 2, 0, cfg) + np.abs(ref) * U
    assert np.all(np.abs(y.array - ref) <= bound)


def test_slicing_granularity_is_pure_marshalling(rng):
    x = Tensor(rng.standard_normal((7, 7, 40)))
    w = (rng.standard_normal((11, 3, 3, 40)) * 0.1).astype(np.float16)
    b = rng.standard_normal(11).astype(np.float16)
    d = LayerDescriptor.make(OpType.CONV_RELU, 3, 1, 1, 7, 40, 11)
    base = run_layer(d, x, w, b)
    for depth in (9, 20, 100):
        assert run_layer(d, x, w, b, cfg=EngineConfig(data_cache_depth=depth)) == base


def test_threaded_mode_matches_cooperative(rng):
    net = parse_network("input 9 5\na conv 3 1 1 1 1 1 12 -\nb maxpool 3 2 0 0 0 0 0 -\n"
                        "c avgpool 0 1 0 0 0 0 0 -\n")
    comp = compile_network(net)
    blobs = random_blobs(comp, 2)
    x = Tensor(rng.random((9, 9, 5)))
    one = run_network(comp, blobs, x)
    two = run_network(comp, blobs, x, threads=True)
    assert one.to_json() == two.to_json()


FIRE = """input 8 16
sq conv 1 1 0 0 0 0 8 -
e1 conv 1 1 0 0 0 0 12 f
e3 conv 3 1 1 1 1 1 12 f
"""


def test_slot_group_concat_order(rng):
    comp = compile_network(parse_network(FIRE))
    blobs = random_blobs(comp, 4)
    x = Tensor(rng.random((8, 8, 16)))
    trace = {}
    s = HostSession(comp.config)
    out = s.execute(s.network_gen(comp, blobs, x, trace))
    sq = trace["sq"][1]
    parts = {}
    for name in ("e3", "e1"):  # reverse order on purpose
        e = next(p for p in comp.plan if p.name == name)
        lw = blobs[name]
        parts[name] = run_layer(e.descriptor, sq, lw.weights, lw.biases)
    assert out == concat_channels([parts["e1"], parts["e3"]])
    assert out.dims == (24, 8, 8)


def test_report_shape_and_determinism(rng):
    comp = compile_network(parse_network("input 5 8\nonly conv 1 1 0 0 0 0 8 -\n"))
    blobs = random_blobs(comp, 0)
    x = Tensor(rng.random((5, 5, 8)))
    r1 = run_network(comp, blobs, x)
    r2 = run_network(comp, blobs, x)
    assert len(r1.layers) == 1
    assert r1.to_json() == r2.to_json()
    assert r1.total_cycles > 0 and r1.bytes_sent > 0 and r1.bytes_received == 4 * (2 + 25 * 8)
    probs = [p for _, p in r1.top_k]
    assert probs == sorted(probs, reverse=True)
    table = r1.to_table()
    assert table.splitlines()[0].split("\t")[:3] == ["name", "op", "dims"]
    assert json.loads(r1.to_json())["layers"][0]["name"] == "only"


def test_zero_weight_network_has_zero_error(rng):
    comp = compile_network(parse_network(
        "input 6 3\na conv 3 1 0 0 0 0 4 -\nb avgpool 0 1 0 0 0 0 0 -\ns softmax 0 0 0 0 0 0 0 -\n"))
    blobs = {"a": LayerWeights("a", np.zeros((4, 3, 3, 3), np.float16), np.zeros(4, np.float16))}
    rep = verify_against_oracle(comp, blobs, Tensor(rng.random((6, 6, 3))))
    assert all(r.max_abs_err == 0 for r in rep.layers)
    assert rep.top1_agree


def test_layer_failure_carries_context(rng):
    comp = compile_network(parse_network("input 4 8\nbroken conv 1 1 0 0 0 0 8 -\n"))
    with pytest.raises(LayerError, match="broken"):
        run_network(comp, {}, Tensor(rng.random((4, 4, 8))))


def test_overflow_is_reported_with_layer(rng):
    comp = compile_network(parse_network("input 4 8\ng avgpool 0 1 0 0 0 0 0 -\n"))
    with pytest.raises(LayerError, match="g"):
        run_network(comp, {}, Tensor(np.full((4, 4, 8), 60000.0)))


def test_squeezenet_chain_matches_compiler(rng):
    comp = compile_network(load_network("src/streamaccel/data/squeezenet_v1_1.net"))
    blobs = random_blobs(comp, 0)
    x = Tensor(rng.standard_normal((227, 227, 3)))
    trace = {}
    s = HostSession(comp.config)
    probs = s.execute(s.network_gen(comp, blobs, x, trace))
    for name, dims in comp.chain[1:]:
        out = trace[name][1]
        got = (f"{out.channels}x{out.height}x{out.width}" if isinstance(out, Tensor)
               and out.height > 1 else str(np.asarray(out.array if isinstance(out, Tensor)
                                                         else out).size))
        assert got == dims, name
    assert np.isclose(np.sum(probs), 1.0)
