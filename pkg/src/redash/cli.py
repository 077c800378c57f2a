"""Command-line interface.

Exit codes: 0 success, 2 validation error, 3 protocol error, 4 I/O error.
A ``--config`` JSON file may supply any flag by its long name (dashes or
underscores); explicit command-line flags win.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench, costing
from .container import (deserialize_keys, deserialize_labels, deserialize_model, serialize_keys,
                        serialize_labels, serialize_model)
from .engine import GarblingContext
from .errors import CircuitMismatch, OutOfRange, RangeOverflow, ReDashError, TransportError
from .model import build_architecture, load_model, random_weights, save_model
from .nn import decode_output, encode_input, eval_model, garble_model, plaintext_infer
from .protocol import EVALUATOR, GARBLER, SocketTransport, run_evaluator, run_garbler
from .quant import (QuantizedModel, QuantParams, check_range, quantize_input, quantize_simple, scale_quant,
                    scale_quant_plus)
from .rns import parse_base, signed_range

log = logging.getLogger("redash")

EXIT_CODES = {"validation": 2, "protocol": 3, "io": 4}
SCHEMES = ("simple", "scale", "scale-plus")


# -- helpers ----------------------------------------------------------------------------

def _seed(args) -> bytes:
    return str(args.seed).encode()


def _rng(args) -> np.random.Generator:
    return np.random.default_rng(int.from_bytes(hashlib.sha256(_seed(args)).digest()[:8], "little"))


def _write(path, data: bytes):
    Path(path).write_bytes(data)
    log.info("wrote %s (%d bytes)", path, len(data))


def _load_quantized(path) -> QuantizedModel:
    model, quant = load_model(path)
    if not quant:
        raise OutOfRange(f"{path} is not a quantized model (run 'quantize' first)")
    return QuantizedModel(model.input_shape, model.layers, QuantParams.from_dict(quant))


def _load_tensor(path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False)
    return np.asarray(json.loads(path.read_text()))


def _input_tensor(args, model: QuantizedModel) -> np.ndarray:
    """Integer input: from ``--input`` (floats are quantized) or random within ``--input-bound``."""
    if getattr(args, "input", None):
        x = _load_tensor(args.input)
        if not np.issubdtype(x.dtype, np.integer):
            x = quantize_input(x, model.params)
        return x.astype(np.int64).reshape(model.input_shape)
    bound = args.input_bound
    return _rng(args).integers(-bound, bound + 1, model.input_shape)


def _emit_tensor(arr: np.ndarray, out):
    if out:
        out = Path(out)
        if out.suffix == ".npy":
            np.save(out, arr)
        else:
            out.write_text(json.dumps(arr.tolist()))
        log.info("wrote %s", out)
    else:
        print(json.dumps(arr.tolist()))


def _emit_text(text: str, out):
    if out:
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise OutOfRange(f"endpoint must be host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _transport(args):
    if args.listen:
        return SocketTransport.listen(*_endpoint(args.listen))
    if args.connect:
        return SocketTransport.connect(*_endpoint(args.connect))
    raise OutOfRange("one of --listen or --connect is required")


def _int_list(text: str) -> list[int]:
    """``"1,2,4"`` or a power-of-two range ``"2^7..2^14"`` / plain range ``"2..8"``."""
    if ".." in text:
        lo, hi = text.split("..")
        if "^" in lo:
            b, e0 = map(int, lo.split("^"))
            _, e1 = map(int, hi.split("^"))
            return [b ** e for e in range(e0, e1 + 1)]
        return list(range(int(lo), int(hi) + 1))
    return [int(v) for v in text.split(",") if v]


# -- commands ---------------------------------------------------------------------------

def cmd_arch(args):
    model = build_architecture(args.name, args.input_size)
    random_weights(model, _rng(args), args.std)
    save_model(model, args.out)
    print(f"{args.name}: input {model.input_shape}, output {model.output_shape}, {len(model.layers)} layers")


def quantize(model, args, base) -> QuantizedModel:
    if args.scheme == "simple":
        if args.alpha is None:
            raise OutOfRange("SimpleQuant needs --alpha")
        return quantize_simple(model, args.alpha, base)
    if args.scheme == "scale":
        if args.ell is None:
            raise OutOfRange("ScaleQuant needs --ell")
        return scale_quant(model, args.ell, base)
    if args.scale is None:
        raise OutOfRange("ScaleQuantPlus needs --scale")
    return scale_quant_plus(model, args.scale, base)


def cmd_quantize(args):
    base = parse_base(args.base)
    model, quant = load_model(args.model)
    if quant:
        raise OutOfRange(f"{args.model} is already quantized")
    qm = quantize(model, args, base)
    report = check_range(qm, args.input_bound)
    print("\n".join(report.lines()))
    if not report.ok and not args.force:
        raise RangeOverflow("range check failed; pick a larger base or a smaller input bound (or --force)")
    save_model(qm, args.out, qm.params.to_dict())


def cmd_garble(args):
    qm = _load_quantized(args.model)
    ctx = GarblingContext(_seed(args), args.lam, not args.no_row_reduction)
    gm, keys = garble_model(qm, ctx, args.input_bound if args.check_range else None)
    data = serialize_model(gm)
    _write(args.out, data)
    _write(args.keys, serialize_keys(keys))
    print(f"{gm.ciphertext_count} ciphertexts, sha256 {hashlib.sha256(data).hexdigest()}")


def cmd_encode(args):
    keys = deserialize_keys(Path(args.keys).read_bytes())
    x = _load_tensor(args.input)
    if not np.issubdtype(x.dtype, np.integer):
        if not args.model:
            raise OutOfRange("real-valued input needs --model to quantize it")
        x = quantize_input(x, _load_quantized(args.model).params)
    lo, hi = signed_range(keys.base.product)
    if x.size and (x.min() < lo or x.max() > hi):
        raise RangeOverflow("input outside the signed range")
    _write(args.out, serialize_labels(encode_input(keys, x)))


def cmd_evaluate(args):
    gm = deserialize_model(Path(args.garbled).read_bytes())
    labels = deserialize_labels(Path(args.labels).read_bytes())
    _write(args.out, serialize_labels(eval_model(gm, labels)))


def cmd_decode(args):
    keys = deserialize_keys(Path(args.keys).read_bytes())
    labels = deserialize_labels(Path(args.labels).read_bytes())
    _emit_tensor(decode_output(keys, labels), args.out)


def cmd_infer_local(args):
    qm = _load_quantized(args.model)
    x = _input_tensor(args, qm)
    expected = plaintext_infer(qm, x)
    gm, keys = garble_model(qm, GarblingContext(_seed(args), args.lam))
    out = decode_output(keys, eval_model(gm, encode_input(keys, x)))
    log.info("%d ciphertexts", gm.ciphertext_count)
    _emit_tensor(out, args.out)
    if not np.array_equal(out, expected):
        raise CircuitMismatch("garbled output differs from plaintext inference")


def cmd_run_garbler(args):
    qm = _load_quantized(args.model)
    x = _input_tensor(args, qm) if args.input_owner == GARBLER else None
    transport = _transport(args)
    try:
        result = run_garbler(qm, transport, x, _seed(args), args.lam, args.input_owner)
    finally:
        transport.close()
    log.info("transcript %s, offline %d bytes, online %d bytes",
             result.transcript, result.offline_bytes, result.online_bytes)
    _emit_tensor(result.output, args.out)


def cmd_run_evaluator(args):
    x = _load_tensor(args.input).astype(np.int64) if args.input else None
    transport = _transport(args)
    try:
        result = run_evaluator(transport, x)
    finally:
        transport.close()
    print(f"done: {result.info.get('ciphertexts')} ciphertexts evaluated, transcript {result.transcript}")


def cmd_bench_scaling(args):
    cfg = bench.BenchConfig(args.ell, args.k, args.lam, _seed(args), args.chunk, args.repeat)
    if args.sweep == "threads":
        values = _int_list(args.threads or "1,2,4,8,16")
        rows = bench.bench_scaling("threads", values, cfg, fixed_inputs=args.input_size or 128)
    else:
        values = _int_list(args.input_sizes or "2^7..2^14")
        rows = bench.bench_scaling("inputs", values, cfg, fixed_threads=int(args.threads or 1))
    _emit_text(costing.to_csv(rows, bench.BENCH_COLUMNS), args.out)


def cmd_cost(args):
    if args.base:
        report = costing.compare(parse_base(args.base), args.scale or 2 ** args.ell)
        _emit_text(json.dumps(report.to_dict(), indent=1) + "\n", args.out)
        return
    rows = costing.cpm_sweep(_int_list(args.ks), args.ell)
    _emit_text(costing.to_csv(rows, costing.CSV_COLUMNS), args.out)


# -- parser -----------------------------------------------------------------------------

def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with default flag values")
    common.add_argument("--seed", default="0", help="garbling / RNG seed (any string)")
    common.add_argument("--lambda", dest="lam", type=int, default=128, help="security parameter in bits")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")
    return common


def _quant() -> argparse.ArgumentParser:
    quant = argparse.ArgumentParser(add_help=False)
    quant.add_argument("--base", default="32,167,173", help="comma-separated moduli")
    quant.add_argument("--scheme", choices=SCHEMES, default="scale-plus")
    quant.add_argument("--alpha", type=float)
    quant.add_argument("--ell", type=int)
    quant.add_argument("--scale", type=int)
    return quant


def _inp() -> argparse.ArgumentParser:
    inp = argparse.ArgumentParser(add_help=False)
    inp.add_argument("--input", help="input tensor (.npy or JSON); floats are quantized")
    inp.add_argument("--input-bound", type=int, default=32, help="bound for random inputs / range checks")
    return inp


def _net() -> argparse.ArgumentParser:
    net = argparse.ArgumentParser(add_help=False)
    net.add_argument("--listen", metavar="HOST:PORT")
    net.add_argument("--connect", metavar="HOST:PORT")
    return net


def build_parser() -> argparse.ArgumentParser:
    # parent parsers are built per command: argparse shares parent actions, so
    # set_defaults on one subcommand would otherwise leak into the others
    p = argparse.ArgumentParser(prog="redash", description="Arithmetic garbled-circuit inference over RNS.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("arch", parents=[_common()], help="write model f/F with random weights")
    s.add_argument("name", choices=("f", "F"))
    s.add_argument("--input-size", type=int, default=8, help="square input resolution")
    s.add_argument("--std", type=float, help="weight std (default He)")
    s.set_defaults(func=cmd_arch, out="model.json")

    s = sub.add_parser("quantize", parents=[_common(), _quant()], help="quantize a real-valued model")
    s.add_argument("model")
    s.add_argument("--input-bound", type=int, default=32)
    s.add_argument("--force", action="store_true", help="write even if the range check fails")
    s.set_defaults(func=cmd_quantize, out="quantized.json")

    s = sub.add_parser("garble", parents=[_common()], help="garble a quantized model")
    s.add_argument("model")
    s.add_argument("--keys", default="keys.bin")
    s.add_argument("--no-row-reduction", action="store_true")
    s.add_argument("--check-range", action="store_true")
    s.add_argument("--input-bound", type=int, default=32)
    s.set_defaults(func=cmd_garble, out="garbled.bin")

    s = sub.add_parser("encode", parents=[_common()], help="encode an input into labels (garbler)")
    s.add_argument("--keys", default="keys.bin")
    s.add_argument("--input", required=True)
    s.add_argument("--model", help="quantized model, for real-valued inputs")
    s.set_defaults(func=cmd_encode, out="input_labels.bin")

    s = sub.add_parser("evaluate", parents=[_common()], help="evaluate a garbled model on input labels")
    s.add_argument("garbled")
    s.add_argument("--labels", default="input_labels.bin")
    s.set_defaults(func=cmd_evaluate, out="output_labels.bin")

    s = sub.add_parser("decode", parents=[_common()], help="decode output labels (garbler)")
    s.add_argument("--keys", default="keys.bin")
    s.add_argument("--labels", default="output_labels.bin")
    s.set_defaults(func=cmd_decode)

    s = sub.add_parser("infer-local", parents=[_common(), _inp()], help="garble, evaluate and decode in-process")
    s.add_argument("model")
    s.set_defaults(func=cmd_infer_local)

    s = sub.add_parser("run-garbler", parents=[_common(), _inp(), _net()], help="garbler side of a TCP session")
    s.add_argument("model")
    s.add_argument("--input-owner", choices=(GARBLER, EVALUATOR), default=GARBLER)
    s.set_defaults(func=cmd_run_garbler)

    s = sub.add_parser("run-evaluator", parents=[_common(), _net()], help="evaluator side of a TCP session")
    s.add_argument("--input", help="integer input when the evaluator owns it")
    s.set_defaults(func=cmd_run_evaluator)

    s = sub.add_parser("bench-scaling", parents=[_common()], help="fused vs chained scaling timings (CSV)")
    s.add_argument("--sweep", choices=("threads", "inputs"), default="inputs")
    s.add_argument("--ell", type=int, default=5)
    s.add_argument("--k", type=int, default=8, help="CPM base size")
    s.add_argument("--threads", help="thread counts (threads sweep) or fixed count")
    s.add_argument("--input-size", type=int, help="fixed input count for the threads sweep")
    s.add_argument("--input-sizes", help="input counts, e.g. 2^7..2^14")
    s.add_argument("--chunk", type=int, default=2048)
    s.add_argument("--repeat", type=int, default=1)
    s.set_defaults(func=cmd_bench_scaling, lam=16)

    s = sub.add_parser("cost", parents=[_common()], help="ciphertext counts (CSV over CPM bases)")
    s.add_argument("--ks", default="2..8")
    s.add_argument("--ell", type=int, default=5)
    s.add_argument("--base", help="single base for a JSON comparison report")
    s.add_argument("--scale", type=int)
    s.set_defaults(func=cmd_cost)
    return p


def _apply_config(parser: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not args.config:
        return args
    try:
        config = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise TransportError(f"cannot read config {args.config}: {exc}") from exc
    except ValueError as exc:
        raise OutOfRange(f"bad config {args.config}: {exc}") from exc
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, value in config.items():
        dest = {"lambda": "lam"}.get(key, key.replace("-", "_"))
        if dest not in known:
            raise OutOfRange(f"unknown config key {key!r} for '{args.command}'")
        defaults[dest] = ",".join(map(str, value)) if isinstance(value, list) else value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        args.func(args)
    except ReDashError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODES[exc.exit_class]
    except (OSError, EOFError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES["io"]
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CODES["validation"]
    return 0


if __name__ == "__main__":
    sys.exit(main())
