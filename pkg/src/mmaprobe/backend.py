"""Evaluation backends: in-process simulator, external process, embedding.

Every backend answers one question: given input/output formats, a shared
dimension ``k``, ``k`` operand pairs and an accumulator input, what bit
pattern does the unit return for ``d = sum(a_l * b_l) + c``?

The external protocol is newline-delimited JSON records over the child
process's standard input/output, one request per line with strictly
in-order replies.  The first line the child writes is a handshake
advertising the protocol version, supported format pairs, and maximum
shared dimension:

    {"proto": 1, "pairs": [["binary16", "binary32"], ...], "kmax": 16}
    {"id": 1, "fin": "binary16", "fout": "binary32", "k": 2,
     "a": ["3c00", "0000"], "b": ["3c00", "0000"], "c": "3f800000"}
    {"id": 1, "d": "40000000"}

Error replies carry ``{"id": ..., "error": {"code": ..., "message": ...}}``
with codes ``Unsupported``, ``BadRequest``, or ``Internal``.  Bit patterns
are lowercase fixed-width hex, most-significant nibble first.
"""

from __future__ import annotations

import json
import os
import select
import shlex
import subprocess
import sys
from dataclasses import dataclass
from typing import Optional, Sequence

from .formats import (
    Dyadic,
    FpFormat,
    REGISTRY,
    RoundingMode,
    Special,
    Value,
    bits_to_hex,
    decode,
    encode,
    hex_to_bits,
)
from .probes import ProbeVector
from .simulator import (
    BlockFmaConfig,
    FormatContract,
    SizeContract,
    exact_products,
    mma_dot,
)

__all__ = [
    "PROTO_VERSION",
    "BackendError",
    "TransportError",
    "UnsupportedError",
    "BackendTimeout",
    "Handshake",
    "MmaRequest",
    "MmaReply",
    "SimBackend",
    "ExecBackend",
    "open_backend",
    "serve",
    "embed_scalar_test",
    "evaluate_tile",
]

PROTO_VERSION = 1


class BackendError(Exception):
    """Base class for backend failures."""


class TransportError(BackendError):
    """The child process died, closed its pipe, or spoke garbage."""


class UnsupportedError(BackendError):
    """The backend rejected the format pair or shared dimension."""


class BackendTimeout(BackendError):
    """No reply within the configured per-request timeout."""


@dataclass(frozen=True)
class Handshake:
    proto: int
    pairs: tuple[tuple[str, str], ...]
    kmax: int

    def supports(self, fin: str, fout: str) -> bool:
        return (fin, fout) in self.pairs

    def to_json(self) -> str:
        return json.dumps({
            "proto": self.proto,
            "pairs": [list(p) for p in self.pairs],
            "kmax": self.kmax,
        }, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "Handshake":
        obj = json.loads(line)
        return Handshake(
            proto=int(obj["proto"]),
            pairs=tuple((str(a), str(b)) for a, b in obj["pairs"]),
            kmax=int(obj["kmax"]),
        )


@dataclass(frozen=True)
class MmaRequest:
    """One scalar MMA evaluation in wire form (hex operands)."""

    id: int
    fin: str
    fout: str
    k: int
    a: tuple[str, ...]
    b: tuple[str, ...]
    c: str

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "fin": self.fin, "fout": self.fout, "k": self.k,
            "a": list(self.a), "b": list(self.b), "c": self.c,
        }, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "MmaRequest":
        obj = json.loads(line)
        req = MmaRequest(
            id=int(obj["id"]), fin=str(obj["fin"]), fout=str(obj["fout"]),
            k=int(obj["k"]), a=tuple(str(x) for x in obj["a"]),
            b=tuple(str(x) for x in obj["b"]), c=str(obj["c"]))
        if len(req.a) != req.k or len(req.b) != req.k:
            raise ValueError("operand list lengths do not match k")
        return req


@dataclass(frozen=True)
class MmaReply:
    id: int
    d: Optional[str] = None
    error_code: Optional[str] = None
    error_message: str = ""

    @property
    def ok(self) -> bool:
        return self.d is not None

    def to_json(self) -> str:
        if self.d is not None:
            return json.dumps({"id": self.id, "d": self.d}, sort_keys=True)
        return json.dumps({
            "id": self.id,
            "error": {"code": self.error_code, "message": self.error_message},
        }, sort_keys=True)

    @staticmethod
    def from_json(line: str) -> "MmaReply":
        obj = json.loads(line)
        if "d" in obj:
            return MmaReply(id=int(obj["id"]), d=str(obj["d"]))
        err = obj.get("error") or {}
        return MmaReply(id=int(obj["id"]),
                        error_code=str(err.get("code", "Internal")),
                        error_message=str(err.get("message", "")))


@dataclass
class EvidenceEntry:
    """Raw request/reply pair kept for audit."""

    label: str
    request: str
    reply: str


class _SessionBase:
    """Shared request-counter and Dyadic-level convenience layer."""

    handshake: Handshake

    def __init__(self) -> None:
        self._next_id = 0
        self.log: list[EvidenceEntry] = []

    def evaluate(self, req: MmaRequest) -> MmaReply:  # pragma: no cover
        raise NotImplementedError

    def close(self) -> None:
        pass

    def _take_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def run_vector(self, fin: FpFormat, fout: FpFormat,
                   vec: ProbeVector) -> Value:
        """Encode a probe vector, evaluate it, decode and log the exchange."""
        if not self.handshake.supports(fin.name, fout.name):
            raise UnsupportedError(
                f"backend does not support {fin.name}->{fout.name}")
        if vec.k > self.handshake.kmax:
            raise UnsupportedError(
                f"k={vec.k} exceeds backend kmax={self.handshake.kmax}")
        a_hex, b_hex = [], []
        for a, b in vec.pairs:
            bits_a, fl_a = encode(a, fin)
            bits_b, fl_b = encode(b, fin)
            if fl_a.inexact or fl_b.inexact:
                raise FormatContract(
                    f"operand of {vec.label} not exact in {fin.name}")
            a_hex.append(bits_to_hex(bits_a, fin))
            b_hex.append(bits_to_hex(bits_b, fin))
        c_bits, fl_c = encode(vec.c, fout)
        if fl_c.inexact:
            raise FormatContract(
                f"addend of {vec.label} not exact in {fout.name}")
        req = MmaRequest(id=self._take_id(), fin=fin.name, fout=fout.name,
                         k=vec.k, a=tuple(a_hex), b=tuple(b_hex),
                         c=bits_to_hex(c_bits, fout))
        reply = self.evaluate(req)
        self.log.append(EvidenceEntry(vec.label, req.to_json(),
                                      reply.to_json()))
        if not reply.ok:
            if reply.error_code == "Unsupported":
                raise UnsupportedError(reply.error_message)
            raise TransportError(
                f"{reply.error_code}: {reply.error_message}")
        return decode(hex_to_bits(reply.d, fout), fout)


def _sim_pairs(formats: dict[str, FpFormat]) -> tuple[tuple[str, str], ...]:
    names = list(formats)
    return tuple((fi, fo) for fi in names for fo in names
                 if formats[fi].precision <= formats[fo].precision)


def _evaluate_with_config(req: MmaRequest, cfg: BlockFmaConfig,
                          formats: dict[str, FpFormat]) -> MmaReply:
    try:
        fin = formats[req.fin]
        fout = formats[req.fout]
    except KeyError as e:
        return MmaReply(req.id, error_code="Unsupported",
                        error_message=f"unknown format {e.args[0]!r}")
    if req.k > cfg.max_k:
        return MmaReply(req.id, error_code="Unsupported",
                        error_message=f"k={req.k} exceeds kmax={cfg.max_k}")
    try:
        a = [decode(hex_to_bits(h, fin), fin) for h in req.a]
        b = [decode(hex_to_bits(h, fin), fin) for h in req.b]
        c = decode(hex_to_bits(req.c, fout), fout)
    except ValueError as e:
        return MmaReply(req.id, error_code="BadRequest", error_message=str(e))
    try:
        finite_pairs = [(x, y) for x, y in zip(a, b)
                        if not isinstance(x, Special)
                        and not isinstance(y, Special)]
        exact_products([x for x, _ in finite_pairs],
                       [y for _, y in finite_pairs], fin, fout)
        d = mma_dot(c, a, b, cfg, fout)
    except (FormatContract, SizeContract) as e:
        return MmaReply(req.id, error_code="Unsupported",
                        error_message=str(e))
    except ArithmeticError as e:
        return MmaReply(req.id, error_code="Internal", error_message=str(e))
    rm = cfg.rm_intra if isinstance(d, Dyadic) else RoundingMode.RNE
    bits, _ = encode(d, fout, rm)
    return MmaReply(req.id, d=bits_to_hex(bits, fout))


class SimBackend(_SessionBase):
    """In-process session evaluating against a block-FMA configuration."""

    def __init__(self, cfg: BlockFmaConfig,
                 formats: Optional[dict[str, FpFormat]] = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.formats = dict(formats or REGISTRY)
        self.handshake = Handshake(
            proto=PROTO_VERSION,
            pairs=_sim_pairs(self.formats),
            kmax=cfg.max_k,
        )

    def evaluate(self, req: MmaRequest) -> MmaReply:
        return _evaluate_with_config(req, self.cfg, self.formats)


class _LinePipe:
    """Unbuffered line I/O with a select-based timeout over a child pipe."""

    def __init__(self, proc: subprocess.Popen) -> None:
        self.proc = proc
        self._buf = b""

    def write_line(self, line: str) -> None:
        try:
            self.proc.stdin.write(line.encode() + b"\n")
            self.proc.stdin.flush()
        except (BrokenPipeError, OSError) as e:
            raise TransportError(f"child stdin closed: {e}") from e

    def read_line(self, timeout: float) -> str:
        import time
        deadline = time.monotonic() + timeout
        fd = self.proc.stdout.fileno()
        while b"\n" not in self._buf:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise BackendTimeout(f"no reply within {timeout:.1f}s")
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                continue
            chunk = os.read(fd, 65536)
            if not chunk:
                raise TransportError("child closed stdout")
            self._buf += chunk
        line, _, self._buf = self._buf.partition(b"\n")
        return line.decode()


class ExecBackend(_SessionBase):
    """Session over a child process speaking the line protocol.

    One in-flight request at a time; a transport failure triggers one
    restart-and-resend before giving up.
    """

    def __init__(self, command: str, timeout: float = 30.0) -> None:
        super().__init__()
        self.command = command
        self.timeout = timeout
        self._proc: Optional[subprocess.Popen] = None
        self._pipe: Optional[_LinePipe] = None
        self._start()

    def _start(self) -> None:
        try:
            self._proc = subprocess.Popen(
                shlex.split(self.command),
                stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                bufsize=0)
        except OSError as e:
            raise TransportError(f"cannot start backend: {e}") from e
        self._pipe = _LinePipe(self._proc)
        try:
            self.handshake = Handshake.from_json(
                self._pipe.read_line(self.timeout))
        except (ValueError, KeyError) as e:
            raise TransportError(f"bad handshake: {e}") from e
        if self.handshake.proto != PROTO_VERSION:
            raise TransportError(
                f"protocol {self.handshake.proto} not supported")

    def _round_trip(self, req: MmaRequest) -> MmaReply:
        self._pipe.write_line(req.to_json())
        line = self._pipe.read_line(self.timeout)
        try:
            reply = MmaReply.from_json(line)
        except (ValueError, KeyError) as e:
            raise TransportError(f"bad reply line {line!r}: {e}") from e
        if reply.id != req.id:
            raise TransportError(
                f"reply id {reply.id} does not match request {req.id}")
        return reply

    def evaluate(self, req: MmaRequest) -> MmaReply:
        try:
            return self._round_trip(req)
        except TransportError:
            self.close()
            self._start()
            return self._round_trip(req)

    def close(self) -> None:
        if self._proc is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            try:
                self._proc.terminate()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
            self._proc = None


def open_backend(spec: str, timeout: float = 30.0) -> _SessionBase:
    """Open ``sim:<config-file>`` or ``exec:<command>`` backend spec."""
    kind, _, rest = spec.partition(":")
    if kind == "sim":
        from .presets import load_config
        return SimBackend(load_config(rest))
    if kind == "exec":
        if not rest:
            raise ValueError("exec backend needs a command")
        return ExecBackend(rest, timeout=timeout)
    raise ValueError(f"unknown backend spec {spec!r} (use sim:... or exec:...)")


def serve(cfg: BlockFmaConfig, stdin=None, stdout=None,
          formats: Optional[dict[str, FpFormat]] = None) -> int:
    """Child-process loop: handshake, then one reply per request line.

    This is the loopback server used to exercise the external protocol and
    the reference implementation for GPU-side harnesses.
    """
    inp = stdin if stdin is not None else sys.stdin
    out = stdout if stdout is not None else sys.stdout
    fmts = dict(formats or REGISTRY)
    hs = Handshake(proto=PROTO_VERSION, pairs=_sim_pairs(fmts),
                   kmax=cfg.max_k)
    out.write(hs.to_json() + "\n")
    out.flush()
    for raw in inp:
        line = raw.strip()
        if not line:
            continue
        try:
            req = MmaRequest.from_json(line)
        except (ValueError, KeyError) as e:
            out.write(MmaReply(0, error_code="BadRequest",
                               error_message=str(e)).to_json() + "\n")
            out.flush()
            continue
        out.write(_evaluate_with_config(req, cfg, fmts).to_json() + "\n")
        out.flush()
    return 0


def embed_scalar_test(vec: ProbeVector, tile: tuple[int, int, int],
                      fin: FpFormat, fout: FpFormat,
                      ) -> tuple[list[list[str]], list[list[str]], list[list[str]]]:
    """Embed a scalar test at element (1,1) of an m x n x k0 tile.

    Row one of A holds the a-operands, column one of B the b-operands,
    C[1][1] the addend; all other entries are zero.  Zeros pad AFTER the
    live operands so the in-order block assignment is preserved.
    """
    m, n, k0 = tile
    if vec.k > k0:
        raise SizeContract(f"probe k={vec.k} exceeds tile k0={k0}")
    zero_in = bits_to_hex(encode(Dyadic(1, 0, 0), fin)[0], fin)
    zero_out = bits_to_hex(encode(Dyadic(1, 0, 0), fout)[0], fout)

    def in_hex(v: Dyadic) -> str:
        bits, fl = encode(v, fin)
        if fl.inexact:
            raise FormatContract(f"operand {v!r} not exact in {fin.name}")
        return bits_to_hex(bits, fin)

    A = [[zero_in] * k0 for _ in range(m)]
    B = [[zero_in] * n for _ in range(k0)]
    C = [[zero_out] * n for _ in range(m)]
    for idx, (a, b) in enumerate(vec.pairs):
        A[0][idx] = in_hex(a)
        B[idx][0] = in_hex(b)
    c_bits, fl = encode(vec.c, fout)
    if fl.inexact:
        raise FormatContract(f"addend {vec.c!r} not exact in {fout.name}")
    C[0][0] = bits_to_hex(c_bits, fout)
    return A, B, C


def evaluate_tile(A: Sequence[Sequence[str]], B: Sequence[Sequence[str]],
                  C: Sequence[Sequence[str]], cfg: BlockFmaConfig,
                  fin: FpFormat, fout: FpFormat) -> list[list[str]]:
    """Whole-tile simulator evaluation: every D element via the block model."""
    m = len(A)
    k0 = len(B)
    n = len(B[0]) if B else 0
    D: list[list[str]] = []
    for i in range(m):
        row = []
        for j in range(n):
            a = [decode(hex_to_bits(A[i][l], fin), fin) for l in range(k0)]
            b = [decode(hex_to_bits(B[l][j], fin), fin) for l in range(k0)]
            c = decode(hex_to_bits(C[i][j], fout), fout)
            d = mma_dot(c, a, b, cfg, fout)
            rm = cfg.rm_intra if isinstance(d, Dyadic) else RoundingMode.RNE
            bits, _ = encode(d, fout, rm)
            row.append(bits_to_hex(bits, fout))
        D.append(row)
    return D
