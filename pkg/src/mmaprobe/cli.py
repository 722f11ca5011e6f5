"""Command-line interface.

Subcommands: ``probe`` (full feature inference), ``eval`` (single MMA),
``gen-vectors`` (export probe vectors for offline harnesses), ``selftest``
(round-trip grid and golden-report checks), and ``serve`` (run the
simulator as a line-protocol child process).

Reports and vector records go to stdout; diagnostics go to stderr.  Exit
codes: 0 success, 1 operational error, 2 partial or undetermined-heavy
report (or selftest failure), 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

from .backend import (
    BackendError,
    TransportError,
    MmaRequest,
    open_backend,
    serve,
)
from .formats import FpFormat, lookup_format
from .inference import InferOptions, infer_features, render_report
from .presets import PRESET_NAMES, load_config
from .probes import (
    Probe,
    ProbeVector,
    gen_alignment_bits_probe,
    gen_alignment_cancel_probe,
    gen_normalisation_probe,
    gen_ordering_probe,
    gen_post_alignment_rounding_probe,
    gen_rm_bfma_probe,
    gen_rm_mbfma_probe,
    gen_subnormal_probes,
    width_test_vectors,
    width_test_expected,
    carry_test_vector,
)
from .formats import bits_to_hex, encode

EX_OK = 0
EX_ERROR = 1
EX_PARTIAL = 2
EX_USAGE = 64


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 64 on usage errors."""

    def error(self, message: str) -> None:  # noqa: D401
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EX_USAGE)


def _format_or_die(name: str) -> FpFormat:
    try:
        return lookup_format(name)
    except KeyError as e:
        print(f"error: {e.args[0]}", file=sys.stderr)
        raise SystemExit(EX_USAGE)


def _vec_to_obj(vec: ProbeVector, fin: FpFormat, fout: FpFormat) -> dict:
    return {
        "label": vec.label,
        "c": bits_to_hex(encode(vec.c, fout)[0], fout),
        "a": [bits_to_hex(encode(a, fin)[0], fin) for a, _ in vec.pairs],
        "b": [bits_to_hex(encode(b, fin)[0], fin) for _, b in vec.pairs],
        "k": vec.k,
    }


def _probe_to_record(name: str, probe: Probe, fin: FpFormat,
                     fout: FpFormat) -> dict:
    rows = []
    for expected, verdict in probe.rows:
        rows.append({
            "observed": [bits_to_hex(encode(e, fout)[0], fout)
                         for e in expected],
            "verdict": list(verdict) if isinstance(verdict, tuple) else verdict,
        })
    rec = {
        "probe": name,
        "feature": probe.feature,
        "fin": fin.name,
        "fout": fout.name,
        "vectors": [_vec_to_obj(v, fin, fout) for v in probe.vectors],
        "classifier": rows,
    }
    if probe.note:
        rec["note"] = probe.note
    return rec


def _algorithm1_record(fin: FpFormat, fout: FpFormat, k: int) -> dict:
    vecs = width_test_vectors(k, fin, fout)[:2]
    cvec = carry_test_vector(k, fin, fout)
    return {
        "probe": "algorithm1",
        "feature": "fma_width,n_ecb",
        "fin": fin.name,
        "fout": fout.name,
        "vectors": [_vec_to_obj(v, fin, fout) for v in vecs]
        + [_vec_to_obj(cvec, fin, fout)],
        "expected_exact": [
            bits_to_hex(encode(width_test_expected(v), fout)[0], fout)
            for v in vecs],
        "note": "iterate k upward; either polarity off the exact sum marks "
                "the block boundary at k-1; the carry vector matching "
                "exactly records floor(log2(k*(2-2^(1-p_in)))) carry bits",
    }


_WIDTH_FREE_PROBES = ("subnormal", "algorithm1", "post_alignment",
                      "rm_bfma", "alignment_bits", "alignment_cancel",
                      "normalisation")
_WIDTH_BOUND_PROBES = ("rm_mbfma", "ordering")
ALL_PROBES = _WIDTH_FREE_PROBES + _WIDTH_BOUND_PROBES


def _gen_records(name: str, fin: FpFormat, fout: FpFormat,
                 args) -> list[dict]:
    j, t = args.j, args.t
    if name == "subnormal":
        p_in, p_out = gen_subnormal_probes(fin, fout)
        return [_probe_to_record("subnormal", p, fin, fout)
                for p in (p_in, p_out)]
    if name == "algorithm1":
        return [_algorithm1_record(fin, fout, args.k)]
    if name == "post_alignment":
        return [_probe_to_record(
            "post_alignment",
            gen_post_alignment_rounding_probe(fin, fout, args.n_eab, j),
            fin, fout)]
    if name == "rm_bfma":
        return [_probe_to_record("rm_bfma", gen_rm_bfma_probe(fin, fout, j),
                                 fin, fout)]
    if name == "alignment_bits":
        return [_probe_to_record(
            "alignment_bits", gen_alignment_bits_probe(fin, fout, args.n, j),
            fin, fout)]
    if name == "alignment_cancel":
        return [_probe_to_record(
            "alignment_cancel",
            gen_alignment_cancel_probe(fin, fout, args.n, j), fin, fout)]
    if name == "normalisation":
        return [_probe_to_record(
            "normalisation",
            gen_normalisation_probe(fin, fout, args.norm_case, t), fin, fout)]
    if name == "rm_mbfma":
        if args.fma_width is None:
            raise _Dependency(
                "rm_mbfma places its live product one past the block "
                "boundary: pass --fma-width (from a prior width probe)")
        return [_probe_to_record(
            "rm_mbfma",
            gen_rm_mbfma_probe(fin, fout, args.fma_width, j=j,
                               n_eab=args.n_eab or None),
            fin, fout)]
    if name == "ordering":
        if args.fma_width is None:
            raise _Dependency(
                "ordering fills two whole blocks: pass --fma-width")
        return [_probe_to_record(
            "ordering", gen_ordering_probe(fin, fout, args.fma_width, j),
            fin, fout)]
    raise _Dependency(f"unknown probe {name!r} "
                      f"(choose from {', '.join(ALL_PROBES)} or all)")


class _Dependency(Exception):
    pass


def cmd_probe(args) -> int:
    fin = _format_or_die(args.infmt)
    fout = _format_or_die(args.outfmt)
    try:
        session = open_backend(args.backend, timeout=args.timeout)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_USAGE
    except BackendError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_ERROR
    j, t = args.seed_params
    opts = InferOptions(k_max=args.kmax, j=j, t=t)
    try:
        report = infer_features(session, fin.name, fout.name, opts)
    finally:
        session.close()
    if args.stamp:
        import datetime
        report.notes.append(
            "generated " + datetime.datetime.now().isoformat())
    sys.stdout.write(render_report(report, args.report))
    undet = sum(1 for f in report.field_map().values() if not f.determinate)
    if not report.complete:
        return EX_PARTIAL
    if undet * 2 >= len(report.field_map()):
        return EX_PARTIAL
    return EX_OK


def cmd_eval(args) -> int:
    fin = _format_or_die(args.infmt)
    fout = _format_or_die(args.outfmt)
    a = [s for s in args.a.split(",") if s] if args.a else []
    b = [s for s in args.b.split(",") if s] if args.b else []
    if len(a) != len(b):
        print("error: --a and --b must list the same number of operands",
              file=sys.stderr)
        return EX_USAGE
    try:
        session = open_backend(args.backend, timeout=args.timeout)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_USAGE
    try:
        req = MmaRequest(id=1, fin=fin.name, fout=fout.name, k=len(a),
                         a=tuple(a), b=tuple(b), c=args.c)
        reply = session.evaluate(req)
    except BackendError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_ERROR
    finally:
        session.close()
    if not reply.ok:
        print(f"error: {reply.error_code}: {reply.error_message}",
              file=sys.stderr)
        return EX_ERROR
    print(reply.d)
    return EX_OK


def cmd_gen_vectors(args) -> int:
    fin = _format_or_die(args.infmt)
    fout = _format_or_die(args.outfmt)
    names = list(ALL_PROBES) if args.probe == "all" else [args.probe]
    records = []
    for name in names:
        try:
            records.extend(_gen_records(name, fin, fout, args))
        except _Dependency as e:
            if args.probe == "all":
                records.append({"probe": name, "skipped": str(e)})
            else:
                print(f"error: {e}", file=sys.stderr)
                return EX_USAGE
    json.dump({"schema": "mmaprobe-vectors/1", "records": records},
              sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return EX_OK


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    ok = run_selftest(quick=args.quick, out=sys.stdout)
    return EX_OK if ok else EX_PARTIAL


def cmd_serve(args) -> int:
    try:
        cfg = load_config(args.config)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_USAGE
    return serve(cfg)


def _seed_params(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected j,t")
    return int(parts[0]), int(parts[1])


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="mmaprobe",
                  description="Probe numerical features of "
                              "matrix-multiply-accumulate units.")
    sub = top.add_subparsers(dest="command", required=True)

    def add_backend_opts(p):
        default_backend = os.environ.get("MMAPROBE_BACKEND")
        p.add_argument("--backend", required=default_backend is None,
                       default=default_backend,
                       help="sim:<config-file-or-preset> or exec:<command> "
                            "(default from MMAPROBE_BACKEND); presets: "
                            f"{', '.join(PRESET_NAMES)}")
        p.add_argument("--timeout", type=float, default=30.0,
                       help="per-request timeout for exec backends (s)")

    def add_formats(p):
        p.add_argument("--in", dest="infmt", required=True,
                       help="input format name")
        p.add_argument("--out", dest="outfmt", required=True,
                       help="output format name")

    p = sub.add_parser("probe", help="infer the full feature report")
    add_backend_opts(p)
    add_formats(p)
    p.add_argument("--report", choices=("table", "structured"),
                   default="table")
    p.add_argument("--kmax", type=int, default=64)
    p.add_argument("--seed-params", type=_seed_params, default=(0, 3),
                   metavar="j,t", help="scale exponent and gap parameter")
    p.add_argument("--stamp", action="store_true",
                   help="append a generation timestamp note (reports are "
                        "otherwise byte-identical across runs)")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("eval", help="evaluate one MMA (hex operands)")
    add_backend_opts(p)
    add_formats(p)
    p.add_argument("--c", required=True, help="addend bit pattern (hex)")
    p.add_argument("--a", default="", help="comma-separated a operands")
    p.add_argument("--b", default="", help="comma-separated b operands")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gen-vectors",
                       help="export probe vectors with classifier tables")
    add_formats(p)
    p.add_argument("--probe", default="all",
                   help=f"one of {', '.join(ALL_PROBES)} or all")
    p.add_argument("--fma-width", type=int, default=None)
    p.add_argument("--n-eab", type=int, default=0)
    p.add_argument("--n", type=int, default=1,
                   help="alignment depth under test")
    p.add_argument("--j", type=int, default=0)
    p.add_argument("--t", type=int, default=3)
    p.add_argument("--k", type=int, default=2,
                   help="shared dimension for the algorithm1 record")
    p.add_argument("--norm-case", choices=("carry_only", "carry_and_align"),
                   default="carry_and_align")
    p.set_defaults(fn=cmd_gen_vectors)

    p = sub.add_parser("selftest",
                       help="round-trip grid and golden-report checks")
    p.add_argument("--quick", action="store_true",
                   help="subsample the configuration grid")
    p.set_defaults(fn=cmd_selftest)

    p = sub.add_parser("serve",
                       help="run the simulator as a protocol child process")
    p.add_argument("--config", required=True,
                   help="simulator config file or preset name")
    p.set_defaults(fn=cmd_serve)
    return top


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EX_USAGE
    try:
        return args.fn(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EX_USAGE
    except TransportError as e:
        print(f"error: {e}", file=sys.stderr)
        return EX_ERROR
    except BrokenPipeError:
        return EX_ERROR


if __name__ == "__main__":
    sys.exit(main())
