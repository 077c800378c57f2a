"""Two-party session: offline model transfer, online input exchange, evaluation.

Frames on the wire are ``u32 length | u8 type | u16 version | payload`` where
``length`` counts the bytes after the length field.  The garbler garbles and
ships the model in the offline phase; input labels go over either directly
(the garbler owns the input) or through an oblivious transfer (the evaluator
owns the input); the evaluator returns output labels and the garbler decodes.
"""

from __future__ import annotations

import hashlib
import json
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import errors
from .container import deserialize_labels, deserialize_model, serialize_labels, serialize_model
from .engine import GarblingContext
from .errors import (ChoiceOutOfRange, MalformedFrame, PhaseViolation, ProtocolError, ReDashError,
                     RemoteError, ShapeMismatch, TransportError, VersionMismatch)
from .nn import GarbledModel, GarblerKeys, decode_output, encode_input, eval_model, garble_model

PROTOCOL_VERSION = 1
HEADER = struct.Struct("<IBH")
MAX_FRAME = 1 << 34

HELLO, GARBLED_MODEL, OT_REQUEST, OT_RESPONSE, INPUT_LABELS, OUTPUT_LABELS, ERROR = range(1, 8)
MESSAGE_NAMES = {HELLO: "Hello", GARBLED_MODEL: "GarbledModel", OT_REQUEST: "OtRequest",
                 OT_RESPONSE: "OtResponse", INPUT_LABELS: "InputLabels", OUTPUT_LABELS: "OutputLabels",
                 ERROR: "Error"}

GARBLER, EVALUATOR = "garbler", "evaluator"
IDLE, HELLO_SENT, HELLO_RECEIVED, HELLO_DONE = "idle", "hello-sent", "hello-received", "hello"
OFFLINE, OT_PENDING, INPUTS, EVALUATED, DECODED = "offline", "ot-pending", "inputs", "evaluated", "decoded"
PHASES = (IDLE, HELLO_SENT, HELLO_RECEIVED, HELLO_DONE, OFFLINE, OT_PENDING, INPUTS, EVALUATED, DECODED)


# -- transports -----------------------------------------------------------------------

class Transport:
    """Ordered reliable byte stream."""

    def send(self, data: bytes):
        raise NotImplementedError

    def recv(self, n: int) -> bytes:
        raise NotImplementedError

    def close(self):
        pass


class LoopbackTransport(Transport):
    """In-process transport; ``pair()`` returns two connected ends."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float = 600.0):
        self.inbox, self.outbox = inbox, outbox
        self.timeout = timeout
        self.buf = bytearray()
        self.closed = False

    @classmethod
    def pair(cls, timeout: float = 600.0) -> tuple["LoopbackTransport", "LoopbackTransport"]:
        a, b = queue.Queue(), queue.Queue()
        return cls(a, b, timeout), cls(b, a, timeout)

    def send(self, data: bytes):
        if self.closed:
            raise TransportError("send on closed loopback transport")
        self.outbox.put(bytes(data))

    def recv(self, n: int) -> bytes:
        while len(self.buf) < n:
            try:
                chunk = self.inbox.get(timeout=self.timeout)
            except queue.Empty:
                raise TransportError("loopback receive timed out") from None
            if chunk is None:
                raise TransportError("peer closed the loopback transport")
            self.buf.extend(chunk)
        out = bytes(self.buf[:n])
        del self.buf[:n]
        return out

    def close(self):
        if not self.closed:
            self.closed = True
            self.outbox.put(None)


class SocketTransport(Transport):
    def __init__(self, sock: socket.socket):
        self.sock = sock

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0) -> "SocketTransport":
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc
        sock.settimeout(None)
        return cls(sock)

    @classmethod
    def listen(cls, host: str, port: int, timeout: float | None = None) -> "SocketTransport":
        """Accept exactly one connection on ``host:port``."""
        try:
            with socket.create_server((host, port)) as server:
                server.settimeout(timeout)
                conn, _ = server.accept()
        except OSError as exc:
            raise TransportError(f"cannot accept on {host}:{port}: {exc}") from exc
        return cls(conn)

    @classmethod
    def pair(cls) -> tuple["SocketTransport", "SocketTransport"]:
        a, b = socket.socketpair()
        return cls(a), cls(b)

    def send(self, data: bytes):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"socket send failed: {exc}") from exc

    def recv(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            except OSError as exc:
                raise TransportError(f"socket receive failed: {exc}") from exc
            if not chunk:
                raise TransportError("connection closed by peer")
            buf.extend(chunk)
        return bytes(buf)

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass


# -- framing --------------------------------------------------------------------------

def encode_frame(mtype: int, payload: bytes, version: int = PROTOCOL_VERSION) -> bytes:
    return HEADER.pack(len(payload) + 3, mtype, version) + payload


class Channel:
    """Framed messages over a transport, with a running transcript hash and byte counts."""

    def __init__(self, transport: Transport):
        self.transport = transport
        self.transcript = hashlib.sha256()
        self.bytes_by_type: dict[int, int] = {}

    def _account(self, frame: bytes, mtype: int):
        self.transcript.update(frame)
        self.bytes_by_type[mtype] = self.bytes_by_type.get(mtype, 0) + len(frame)

    def send(self, mtype: int, payload: bytes = b""):
        frame = encode_frame(mtype, payload)
        self._account(frame, mtype)
        self.transport.send(frame)

    def recv(self) -> tuple[int, bytes]:
        head = self.transport.recv(HEADER.size)
        length, mtype, version = HEADER.unpack(head)
        if length < 3 or length > MAX_FRAME:
            raise MalformedFrame(f"frame length {length} out of bounds")
        if version != PROTOCOL_VERSION:
            raise VersionMismatch(f"peer speaks protocol version {version}, expected {PROTOCOL_VERSION}")
        if mtype not in MESSAGE_NAMES:
            raise MalformedFrame(f"unknown message type {mtype}")
        payload = self.transport.recv(length - 3)
        self._account(head + payload, mtype)
        return mtype, payload

    @property
    def digest(self) -> str:
        return self.transcript.hexdigest()


# -- state machine --------------------------------------------------------------------

def _transitions(role: str, owner: str) -> dict[tuple[str, str, int], str]:
    """``(direction, phase, type) -> next phase`` for one role and input owner."""
    t = {}
    if role == GARBLER:
        t[("send", IDLE, HELLO)] = HELLO_SENT
        t[("recv", HELLO_SENT, HELLO)] = HELLO_DONE
        t[("send", HELLO_DONE, GARBLED_MODEL)] = OFFLINE
        if owner == GARBLER:
            t[("send", OFFLINE, INPUT_LABELS)] = INPUTS
        else:
            t[("recv", OFFLINE, OT_REQUEST)] = OT_PENDING
            t[("send", OT_PENDING, OT_RESPONSE)] = INPUTS
        t[("recv", INPUTS, OUTPUT_LABELS)] = EVALUATED
    else:
        t[("recv", IDLE, HELLO)] = HELLO_RECEIVED
        t[("send", HELLO_RECEIVED, HELLO)] = HELLO_DONE
        t[("recv", HELLO_DONE, GARBLED_MODEL)] = OFFLINE
        if owner == GARBLER:
            t[("recv", OFFLINE, INPUT_LABELS)] = INPUTS
        else:
            t[("send", OFFLINE, OT_REQUEST)] = OT_PENDING
            t[("recv", OT_PENDING, OT_RESPONSE)] = INPUTS
        t[("send", EVALUATED, OUTPUT_LABELS)] = DECODED
    return t


@dataclass
class SessionState:
    """Phase tracking for one side of a session.

    The garbler ends in ``decoded`` after decoding locally; the evaluator moves
    to ``evaluated`` after running the circuit and ``decoded`` once the output
    labels are sent back.
    """

    role: str
    input_owner: str = GARBLER
    phase: str = IDLE
    transcript: str = ""

    def __post_init__(self):
        if self.role not in (GARBLER, EVALUATOR) or self.input_owner not in (GARBLER, EVALUATOR):
            raise ValueError(f"bad role {self.role!r} or input owner {self.input_owner!r}")
        self.table = _transitions(self.role, self.input_owner)

    def _step(self, direction: str, mtype: int):
        if mtype == ERROR:
            return
        key = (direction, self.phase, mtype)
        if key not in self.table:
            raise PhaseViolation(f"{self.role} cannot {direction} {MESSAGE_NAMES.get(mtype, mtype)} "
                                 f"in phase {self.phase}")
        self.phase = self.table[key]

    def bind_owner(self, owner: str):
        """Evaluator learns the input owner from the garbler's Hello."""
        if owner not in (GARBLER, EVALUATOR):
            raise MalformedFrame(f"bad input owner {owner!r} in Hello")
        self.input_owner = owner
        self.table = _transitions(self.role, owner)

    def on_send(self, mtype: int):
        self._step("send", mtype)

    def on_recv(self, mtype: int):
        self._step("recv", mtype)

    def advance(self, phase: str):
        """Local transition not tied to a message (evaluation, decoding)."""
        allowed = {(GARBLER, EVALUATED): DECODED, (EVALUATOR, INPUTS): EVALUATED}
        if allowed.get((self.role, self.phase)) != phase:
            raise PhaseViolation(f"{self.role} cannot move from {self.phase} to {phase}")
        self.phase = phase


class Session:
    """A channel bound to a state machine; every message is phase-checked."""

    def __init__(self, channel: Channel, state: SessionState):
        self.channel = channel
        self.state = state

    def send(self, mtype: int, payload: bytes = b""):
        self.state.on_send(mtype)
        self.channel.send(mtype, payload)

    def recv(self, expect: int | None = None) -> bytes:
        mtype, payload = self.channel.recv()
        if mtype == ERROR:
            raise remote_error(payload)
        self.state.on_recv(mtype)
        if expect is not None and mtype != expect:
            raise PhaseViolation(f"expected {MESSAGE_NAMES[expect]}, got {MESSAGE_NAMES[mtype]}")
        return payload

    def fail(self, exc: BaseException):
        """Best-effort Error message to the peer."""
        try:
            self.channel.send(ERROR, error_payload(exc))
        except ReDashError:
            pass


def error_payload(exc: BaseException) -> bytes:
    code = type(exc).__name__ if isinstance(exc, ReDashError) else "InternalError"
    if isinstance(exc, RemoteError):
        code = exc.code
    return json.dumps({"code": code, "message": str(exc)}).encode()


def remote_error(payload: bytes) -> ReDashError:
    """Turn an Error payload into the matching local exception class."""
    try:
        d = json.loads(payload)
        code, message = str(d["code"]), str(d.get("message", ""))
    except (ValueError, KeyError, TypeError):
        return MalformedFrame("unparseable Error message")
    cls = getattr(errors, code, None)
    if isinstance(cls, type) and issubclass(cls, ReDashError) and cls is not RemoteError:
        exc = cls(f"peer reported: {message}")
        exc.remote = True
        return exc
    return RemoteError(code, message)


# -- oblivious transfer ---------------------------------------------------------------

@dataclass
class LabelCandidates:
    """Label sets of a batch of mod-``modulus`` wires: label of ``v`` is ``zero + v*offset``."""

    modulus: int
    zero: np.ndarray      # (wires, n)
    offset: np.ndarray    # (n,)

    def __len__(self):
        return len(self.zero)

    def label(self, wire: int, value: int) -> np.ndarray:
        return (self.zero[wire] + value * self.offset) % self.modulus

    def select(self, choices: np.ndarray) -> np.ndarray:
        return (self.zero + np.asarray(choices, dtype=np.int64)[:, None] * self.offset) % self.modulus


def _check_choices(choices, candidates: LabelCandidates) -> np.ndarray:
    c = np.asarray(choices, dtype=np.int64).reshape(-1)
    if c.shape[0] != len(candidates):
        raise ShapeMismatch(f"{c.shape[0]} choices for {len(candidates)} wires")
    if c.size and (c.min() < 0 or c.max() >= candidates.modulus):
        raise ChoiceOutOfRange(f"choice outside [0, {candidates.modulus}) for a mod-{candidates.modulus} wire")
    return c


def ot_transfer(choices, candidates: LabelCandidates) -> np.ndarray:
    """Functional 1-of-p transfer: the chosen label of every wire, in order."""
    return candidates.select(_check_choices(choices, candidates))


class ObliviousTransfer:
    """Three-message 1-of-p OT over whole residue planes.

    The receiver builds a request from its choices, the sender answers from its
    candidate label sets, the receiver extracts its labels.  Real OT protocols
    plug in by overriding these three methods.
    """

    secure = False

    def request(self, choices: Mapping[int, np.ndarray]) -> bytes:
        raise NotImplementedError

    def respond(self, request: bytes, candidates: Mapping[int, LabelCandidates]) -> bytes:
        raise NotImplementedError

    def finish(self, response: bytes) -> dict[int, np.ndarray]:
        raise NotImplementedError


class InsecureOT(ObliviousTransfer):
    """INSECURE test stand-in: choices travel in the clear, so the sender learns them."""

    secure = False

    def request(self, choices):
        return serialize_labels({m: np.asarray(c, dtype=np.int64).reshape(-1, 1) for m, c in choices.items()})

    def respond(self, request, candidates):
        choices = deserialize_labels(request)
        if set(choices) != set(candidates):
            raise ShapeMismatch(f"OT request moduli {sorted(choices)} != wire moduli {sorted(candidates)}")
        return serialize_labels({m: ot_transfer(choices[m][:, 0], candidates[m]) for m in candidates})

    def finish(self, response):
        return deserialize_labels(response)


# -- session drivers ------------------------------------------------------------------

@dataclass
class SessionResult:
    role: str
    phase: str
    transcript: str
    offline_bytes: int
    online_bytes: int
    output: np.ndarray | None = None
    info: dict = field(default_factory=dict)


def _result(session: Session, output=None, **info) -> SessionResult:
    counts = session.channel.bytes_by_type
    offline = sum(counts.get(t, 0) for t in (HELLO, GARBLED_MODEL))
    online = sum(v for t, v in counts.items() if t not in (HELLO, GARBLED_MODEL))
    session.state.transcript = session.channel.digest
    return SessionResult(session.state.role, session.state.phase, session.channel.digest,
                         offline, online, output, info)


def _hello(owner: str, lam: int) -> bytes:
    return json.dumps({"input_owner": owner, "lambda": lam}, sort_keys=True).encode()


def run_garbler(model, transport: Transport, x=None, seed: bytes = b"redash", lam: int = 128,
                input_owner: str = GARBLER, ot: ObliviousTransfer | None = None,
                garbled: tuple[GarbledModel, GarblerKeys] | None = None,
                input_bound: int | None = None) -> SessionResult:
    """Garbler side of one inference; returns the decoded output tensor.

    ``x`` is the integer input when the garbler owns it.  ``garbled`` skips
    garbling with an existing ``(GarbledModel, GarblerKeys)`` pair.
    """
    if input_owner == GARBLER and x is None:
        raise ShapeMismatch("garbler-owned input requires x")
    ot = ot or InsecureOT()
    session = Session(Channel(transport), SessionState(GARBLER, input_owner))
    try:
        if garbled is None:
            garbled = garble_model(model, GarblingContext(seed, lam), input_bound)
        gm, keys = garbled
        session.send(HELLO, _hello(input_owner, gm.lam))
        session.recv(HELLO)
        session.send(GARBLED_MODEL, serialize_model(gm))
        if input_owner == GARBLER:
            session.send(INPUT_LABELS, serialize_labels(encode_input(keys, x)))
        else:
            request = session.recv(OT_REQUEST)
            candidates = {m: LabelCandidates(m, keys.inputs[m], keys.offsets[m]) for m in keys.base.moduli}
            session.send(OT_RESPONSE, ot.respond(request, candidates))
        labels = deserialize_labels(session.recv(OUTPUT_LABELS))
        output = decode_output(keys, labels)
        session.state.advance(DECODED)
    except ProtocolError as exc:
        if not getattr(exc, "remote", False):
            session.fail(exc)
        raise
    except ReDashError as exc:
        session.fail(exc)
        raise
    return _result(session, output, ciphertexts=gm.ciphertext_count)


def run_evaluator(transport: Transport, x=None, ot: ObliviousTransfer | None = None) -> SessionResult:
    """Evaluator side; ``x`` is its integer input when it owns the input."""
    ot = ot or InsecureOT()
    session = Session(Channel(transport), SessionState(EVALUATOR))
    try:
        hello = json.loads(session.recv(HELLO))
        owner = hello.get("input_owner", GARBLER)
        session.state.bind_owner(owner)
        session.send(HELLO, _hello(owner, int(hello.get("lambda", 0))))
        gm = deserialize_model(session.recv(GARBLED_MODEL))
        if owner == GARBLER:
            labels = deserialize_labels(session.recv(INPUT_LABELS))
        else:
            if x is None:
                raise ShapeMismatch("evaluator-owned input requires x")
            xv = np.asarray(x, dtype=np.int64)
            if tuple(xv.shape) != tuple(gm.model.input_shape):
                raise ShapeMismatch(f"input shape {xv.shape} != model input {tuple(gm.model.input_shape)}")
            flat = xv.reshape(-1)
            session.send(OT_REQUEST, ot.request({m: flat % m for m in gm.base.moduli}))
            labels = ot.finish(session.recv(OT_RESPONSE))
        out = eval_model(gm, labels)
        session.state.advance(EVALUATED)
        session.send(OUTPUT_LABELS, serialize_labels(out))
    except ProtocolError as exc:
        if not getattr(exc, "remote", False):
            session.fail(exc)
        raise
    except (ReDashError, ValueError) as exc:
        session.fail(exc)
        raise
    return _result(session, None, ciphertexts=gm.ciphertext_count)


def run_loopback(model, x, seed: bytes = b"redash", lam: int = 128, input_owner: str = GARBLER,
                 transport: str = "loopback", garbled=None,
                 input_bound: int | None = None) -> tuple[SessionResult, SessionResult]:
    """Run both parties in one process (evaluator on a thread)."""
    a, b = LoopbackTransport.pair() if transport == "loopback" else SocketTransport.pair()
    box: dict = {}

    def evaluator():
        try:
            box["result"] = run_evaluator(b, x if input_owner == EVALUATOR else None)
        except BaseException as exc:   # surfaced to the caller below
            box["error"] = exc

    t = threading.Thread(target=evaluator, daemon=True)
    t.start()
    try:
        g = run_garbler(model, a, x if input_owner == GARBLER else None, seed, lam, input_owner,
                        garbled=garbled, input_bound=input_bound)
    finally:
        t.join()
        a.close()
        b.close()
    if "error" in box:
        raise box["error"]
    return g, box["result"]
