"""``streamaccel`` command line."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import algorithms
from .isa import (
    CompiledNetwork,
    EngineConfig,
    LayerDescriptor,
    OpType,
    compile_network,
    decode_stream,
    load_network,
    random_blobs,
    read_blobs,
    write_blobs,
)
from .host import (
    LayerError,
    load_raw_image,
    preprocess_image,
    run_network,
    run_reference,
)

CONFIG_ENV = "STREAMACCEL_CONFIG"


class UsageError(Exception):
    pass


# --- helpers -----------------------------------------------------------------------


def descriptor_table(descs: list[LayerDescriptor]) -> str:
    cols = ["idx", "op", "k", "s", "pad", "ks", "s2", "in_side", "out_side", "in_ch", "out_ch", "slot"]
    rows = ["\t".join(cols)]
    for i, d in enumerate(descs):
        rows.append("\t".join(str(v) for v in (
            i, OpType(d.op_type).name.lower(), d.kernel, d.stride, d.padding, d.kernel_size,
            d.stride2, d.input_side, d.output_side, d.input_channel, d.output_channel, d.slot,
        )))
    return "\n".join(rows) + "\n"


def chain_table(c: CompiledNetwork) -> str:
    return "".join(f"{name}\t{dims}\n" for name, dims in c.chain)


def _config(args) -> EngineConfig:
    path = args.config or os.environ.get(CONFIG_ENV)
    cfg = EngineConfig()
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = EngineConfig.from_file(path)
    over = {}
    for key in ("parallelism", "max_kernel", "max_o_side", "cmd_burst_len", "maxpool_init"):
        v = getattr(args, key, None)
        if v is not None:
            over[key] = v
    if getattr(args, "flush_to_zero", False):
        over["flush_to_zero"] = True
    lat = {}
    for item in getattr(args, "latency", None) or []:
        k, _, v = item.partition("=")
        if not v:
            raise UsageError(f"--latency expects NAME=CYCLES, got {item!r}")
        lat[k] = int(v)
    if lat:
        over["latency"] = {**cfg.latency.__dict__, **lat}
    return cfg.replace(**over) if over else cfg


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("engine configuration")
    g.add_argument("--config", help=f"JSON config file (default: ${CONFIG_ENV})")
    g.add_argument("--parallelism", type=int)
    g.add_argument("--max-kernel", dest="max_kernel", type=int)
    g.add_argument("--max-o-side", dest="max_o_side", type=int)
    g.add_argument("--cmd-burst-len", dest="cmd_burst_len", type=int)
    g.add_argument("--maxpool-init", dest="maxpool_init", choices=["zero", "neg_inf"])
    g.add_argument("--latency", action="append", metavar="NAME=CYCLES",
                   help="override one latency (mul, add, cmp, div, fifo_write)")
    g.add_argument("--flush-to-zero", action="store_true")


def _add_manifest_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--net", required=True, help="network description file")
    b = p.add_mutually_exclusive_group(required=True)
    b.add_argument("--blobs", help="weight blob file")
    b.add_argument("--random-blobs", type=int, metavar="SEED", help="generate He-style weights")
    p.add_argument("--blob-scale", type=float, default=1.0, help="scale of --random-blobs weights")
    p.add_argument("--nonnegative-blobs", action="store_true",
                   help="draw --random-blobs weights from |N(0, s)|")
    i = p.add_mutually_exclusive_group(required=True)
    i.add_argument("--image", help="raw interleaved RGB bytes")
    i.add_argument("--random-image", type=int, metavar="SEED")
    p.add_argument("--side", type=int, help="image side (defaults to the network input)")
    p.add_argument("--means", type=float, nargs=3, default=[0.0, 0.0, 0.0], metavar=("B", "G", "R"))
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--threads", action="store_true", help="run host and engine on two threads")
    p.add_argument("--json", dest="json_out", help="write the structured report here")
    p.add_argument("--table", dest="table_out", help="write the delimited table here")
    _add_config_flags(p)


def _manifest(args):
    """Resolve and parse every input before any simulation starts."""
    cfg = _config(args)
    net = load_network(_need_file(args.net, "network file"))
    compiled = compile_network(net, cfg)
    if args.blobs:
        blobs = read_blobs(_need_file(args.blobs, "blob file"))
    else:
        blobs = random_blobs(compiled, args.random_blobs, args.blob_scale, args.nonnegative_blobs)
    for e in compiled.plan:
        d = e.descriptor
        if d is not None and d.op_type == OpType.CONV_RELU:
            if e.name not in blobs:
                raise UsageError(f"blob file has no weights for {e.name}")
            shape = blobs[e.name].weights.shape
            if shape != (d.output_channel, d.kernel, d.kernel, d.input_channel):
                raise UsageError(f"{e.name}: blob shape {shape} does not match the network")
    side = args.side or net.input_side
    if side != net.input_side:
        raise UsageError(f"image side {side} != network input {net.input_side}")
    if args.image:
        raw = load_raw_image(_need_file(args.image, "image file"), side)
    else:
        raw = np.random.default_rng(args.random_image).integers(0, 256, (side, side, 3), dtype=np.uint8)
    image = preprocess_image(raw, args.means, side, cfg.flush_to_zero)
    return compiled, blobs, image


def _emit(report, args) -> None:
    sys.stdout.write(report.to_table())
    if args.json_out:
        Path(args.json_out).write_text(report.to_json())
    if args.table_out:
        Path(args.table_out).write_text(report.to_table())


# --- verbs -------------------------------------------------------------------------


def cmd_compile(args) -> int:
    cfg = _config(args)
    compiled = compile_network(load_network(_need_file(args.net, "network file")), cfg)
    sys.stdout.write(descriptor_table(compiled.descriptors))
    sys.stdout.write("\n")
    sys.stdout.write(chain_table(compiled))
    if args.out:
        Path(args.out).write_bytes(compiled.command_stream())
    return 0


def cmd_decode(args) -> int:
    descs = decode_stream(_need_file(args.stream, "command stream").read_bytes())
    sys.stdout.write(descriptor_table(descs))
    return 0


def cmd_blobs(args) -> int:
    compiled = compile_network(load_network(_need_file(args.net, "network file")), _config(args))
    write_blobs(args.out, random_blobs(compiled, args.seed, args.scale).values())
    return 0


def cmd_run(args) -> int:
    compiled, blobs, image = _manifest(args)
    if args.reference:
        report = run_reference(compiled, blobs, image, args.top)
    else:
        report = run_network(compiled, blobs, image, threads=args.threads, top=args.top,
                             verify=args.verify, rel_floor=args.rel_floor)
    _emit(report, args)
    if report.mode == "verify":
        worst = max((r.max_rel_err or 0.0) for r in report.layers)
        ok = report.top1_agree and worst <= args.rel_tol
        print(f"# verify\t{'pass' if ok else 'fail'}\tworst_rel_err\t{worst:.6g}\ttop1_agree\t{report.top1_agree}")
        return 0 if ok else 1
    return 0


def cmd_stats(args) -> int:
    compiled, blobs, image = _manifest(args)
    report = run_network(compiled, blobs, image, threads=args.threads, top=args.top)
    units = ["mul", "psum_add", "fsum_add", "cmp", "div"]
    lines = ["\t".join(["name", "op", "cycles"] + [f"util_{u}" for u in units] + ["fifo_high_water"])]
    for r in report.layers:
        if not r.utilization:
            continue
        hw = ",".join(f"{k}={v}" for k, v in sorted(r.fifo_high_water.items()))
        lines.append("\t".join([r.name, r.op, str(r.cycles)]
                               + [f"{r.utilization[u]:.4f}" for u in units] + [hw]))
    lines.append(f"# total_cycles\t{report.total_cycles}")
    sys.stdout.write("\n".join(lines) + "\n")
    if args.json_out:
        recs = [r.to_dict() for r in report.layers if r.utilization]
        Path(args.json_out).write_text(json.dumps(
            {"layers": recs, "total_cycles": report.total_cycles}, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_alg(args) -> int:
    if args.alg == "bitonic":
        if args.n < 2 or args.n & (args.n - 1):
            raise UsageError("bitonic size must be a power of two >= 2")
        stages = algorithms.bitonic_network(args.n)
        print(f"{len(stages)} stages, {len(stages[0].pairs)} comparators")
        for i, st in enumerate(stages):
            print(f"stage {i}\t" + " ".join(f"{a}{'<' if up else '>'}{b}" for a, b, up in st.pairs))
    elif args.alg == "accumulate":
        if args.length < 1 or args.adders < 1:
            raise UsageError("length and adders must be positive")
        vals = np.random.default_rng(args.seed).integers(-100, 100, args.length)
        total, sched = algorithms.pipeline_accumulate([int(v) for v in vals], args.adders)
        print(" ".join(str(f) for f in sched.fetch_counts))
        print(f"# cycles\t{sched.total_cycles}\tsum\t{total}\tfold_left\t{int(vals.sum())}")
    else:
        side, k, s = args.side, args.k, args.s
        if min(side, k, s) < 1 or k > side or s > k:
            raise UsageError("need 1 <= s <= k <= side")
        x = np.ones((side, side, 1))
        w = np.ones((1, k, k, 1))
        _, trace = algorithms.conv_mec(x, w, np.zeros(1), k, s)
        mec = trace.fetch_counts[:, :, 0]
        im2col = algorithms.im2col_fetch_counts(side, k, s)
        print("mec fetches per element")
        for row in mec:
            print(" ".join(str(v) for v in row))
        print("im2col fetches per element")
        for row in im2col:
            print(" ".join(str(v) for v in row))
        inner = im2col[side // 2, side // 2]
        print(f"# mec_max\t{mec.max()}\tim2col_interior\t{inner}\t"
              f"overlap\t{algorithms.neighbor_overlap(k, s)}\tslots_used\t{trace.used_slots}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamaccel", description="Stream accelerator model")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("compile", help="compile a network to a command stream")
    p.add_argument("net")
    p.add_argument("--out", help="command stream output file")
    _add_config_flags(p)
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("decode", help="print the descriptors of a command stream")
    p.add_argument("stream")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("blobs", help="write random weights for a network")
    p.add_argument("net")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0)
    _add_config_flags(p)
    p.set_defaults(func=cmd_blobs)

    for name, helptext in (("run", "run inference"), ("verify", "run and compare with the oracle")):
        p = sub.add_parser(name, help=helptext)
        _add_manifest_flags(p)
        p.add_argument("--rel-tol", type=float, default=0.02)
        p.add_argument("--rel-floor", type=float, default=1e-2)
        if name == "run":
            m = p.add_mutually_exclusive_group()
            m.add_argument("--reference", action="store_true", help="binary64 oracle only")
            m.add_argument("--verify", action="store_true")
        else:
            p.set_defaults(verify=True, reference=False)
        p.set_defaults(func=cmd_run)

    p = sub.add_parser("stats", help="per-layer cycle statistics")
    _add_manifest_flags(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("alg", help="algorithm lab")
    asub = p.add_subparsers(dest="alg", required=True)
    a = asub.add_parser("bitonic")
    a.add_argument("n", type=int)
    a = asub.add_parser("accumulate")
    a.add_argument("length", type=int)
    a.add_argument("adders", type=int)
    a.add_argument("--seed", type=int, default=0)
    a = asub.add_parser("mec")
    a.add_argument("--side", type=int, required=True)
    a.add_argument("--k", type=int, required=True)
    a.add_argument("--s", type=int, required=True)
    p.set_defaults(func=cmd_alg)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, LayerError, ValueError, OSError) as e:
        print(f"streamaccel: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
