"""Frame streaming and robot command channel over TCP.

Wire formats (all integers little-endian):

    FrameMessage   "USF1" | seq u32 | timestamp_ms u64 | rows u16 | cols u16 |
                   spacing_um u16 | rows*cols bytes of row-major u8 pixels
    CommandMessage "USC1" | kind u8 | seq u32 | dx i32 | dy i32 | dz i32 |
                   crc32 u32 of all preceding bytes

Command displacements are micrometres in the end-effector frame.  A
``status`` message (server to client) carries the current world-frame probe
position in the same three fields.

One connection carries both directions: frames and status replies flow from
the server, commands flow to it.
"""

from __future__ import annotations

import enum
import logging
import os
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .renderer import USFrame

log = logging.getLogger(__name__)

FRAME_MAGIC = b"USF1"
COMMAND_MAGIC = b"USC1"
FRAME_HEADER = struct.Struct("<4sIQHHH")
COMMAND_BODY = struct.Struct("<4sBIiii")
COMMAND_SIZE = COMMAND_BODY.size + 4
MAX_FRAME_PIXELS = 4096 * 4096

DEFAULT_PORT = 5577
PORT_ENV = "VESSELSCAN_PORT"


def resolve_port(flag: int | None = None) -> int:
    """Command-line flag, else the environment variable, else the default."""
    if flag is not None:
        return flag
    env = os.environ.get(PORT_ENV)
    return int(env) if env else DEFAULT_PORT


# ---------------------------------------------------------------------------
# errors


class ProtocolError(ValueError):
    code = 0


class BadMagicError(ProtocolError):
    code = 1


class TruncatedError(ProtocolError):
    """Not enough bytes yet; recoverable by reading more or resynchronising."""

    code = 2


class ChecksumError(ProtocolError):
    code = 3


class FieldError(ProtocolError):
    code = 4


class StartupError(OSError):
    pass


# ---------------------------------------------------------------------------
# messages


@dataclass(frozen=True)
class FrameMessage:
    seq: int
    timestamp_ms: int
    rows: int
    cols: int
    spacing_um: int
    payload: bytes

    def __post_init__(self):
        if len(self.payload) != self.rows * self.cols:
            raise FieldError(f"payload holds {len(self.payload)} bytes, expected {self.rows * self.cols}")

    @classmethod
    def from_frame(cls, frame: USFrame, seq: int | None = None) -> "FrameMessage":
        return cls(
            frame.seq if seq is None else seq,
            int(frame.timestamp_ms),
            frame.rows,
            frame.cols,
            int(round(frame.spacing_mm * 1000.0)),
            np.ascontiguousarray(frame.pixels).tobytes(),
        )

    def to_frame(self) -> USFrame:
        pixels = np.frombuffer(self.payload, np.uint8).reshape(self.rows, self.cols).copy()
        return USFrame(pixels, self.spacing_um / 1000.0, self.seq, self.timestamp_ms)

    @property
    def encoded_size(self) -> int:
        return FRAME_HEADER.size + len(self.payload)


class CommandKind(enum.IntEnum):
    MOVE_DELTA = 1
    STOP = 2
    STATUS_REQUEST = 3
    STATUS = 4


@dataclass(frozen=True)
class CommandMessage:
    kind: CommandKind
    seq: int
    dx_um: int = 0
    dy_um: int = 0
    dz_um: int = 0

    @classmethod
    def move_delta(cls, seq: int, dx_mm: float, dy_mm: float, dz_mm: float = 0.0) -> "CommandMessage":
        return cls(CommandKind.MOVE_DELTA, seq, *(int(round(v * 1000.0)) for v in (dx_mm, dy_mm, dz_mm)))

    @property
    def delta_mm(self) -> tuple[float, float, float]:
        return self.dx_um / 1000.0, self.dy_um / 1000.0, self.dz_um / 1000.0


def encode_frame(msg: FrameMessage) -> bytes:
    return FRAME_HEADER.pack(FRAME_MAGIC, msg.seq, msg.timestamp_ms, msg.rows, msg.cols, msg.spacing_um) + msg.payload


def decode_frame(buf: bytes | memoryview) -> tuple[FrameMessage, int]:
    """Decode one frame from the start of ``buf``; returns (message, bytes consumed)."""
    if len(buf) < FRAME_HEADER.size:
        if bytes(buf[:4]) != FRAME_MAGIC[: len(buf[:4])]:
            raise BadMagicError("not a frame message")
        raise TruncatedError("short frame header")
    magic, seq, ts, rows, cols, spacing = FRAME_HEADER.unpack_from(buf)
    if magic != FRAME_MAGIC:
        raise BadMagicError(f"bad frame magic {magic!r}")
    n = rows * cols
    if n > MAX_FRAME_PIXELS or spacing == 0:
        raise FieldError(f"implausible frame header rows={rows} cols={cols} spacing_um={spacing}")
    end = FRAME_HEADER.size + n
    if len(buf) < end:
        raise TruncatedError(f"short frame payload: {len(buf) - FRAME_HEADER.size} of {n} bytes")
    return FrameMessage(seq, ts, rows, cols, spacing, bytes(buf[FRAME_HEADER.size : end])), end


def encode_command(msg: CommandMessage) -> bytes:
    body = COMMAND_BODY.pack(COMMAND_MAGIC, int(msg.kind), msg.seq, msg.dx_um, msg.dy_um, msg.dz_um)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_command(buf: bytes | memoryview) -> tuple[CommandMessage, int]:
    if bytes(buf[:4]) != COMMAND_MAGIC[: len(buf[:4])]:
        raise BadMagicError("not a command message")
    if len(buf) < COMMAND_SIZE:
        raise TruncatedError("short command message")
    magic, kind, seq, dx, dy, dz = COMMAND_BODY.unpack_from(buf)
    (crc,) = struct.unpack_from("<I", buf, COMMAND_BODY.size)
    if crc != zlib.crc32(bytes(buf[: COMMAND_BODY.size])):
        raise ChecksumError("command checksum mismatch")
    try:
        kind = CommandKind(kind)
    except ValueError:
        raise FieldError(f"unknown command kind {kind}") from None
    return CommandMessage(kind, seq, dx, dy, dz), COMMAND_SIZE


def encode(msg: FrameMessage | CommandMessage) -> bytes:
    return encode_frame(msg) if isinstance(msg, FrameMessage) else encode_command(msg)


def decode(buf: bytes | memoryview) -> tuple[FrameMessage | CommandMessage, int]:
    head = bytes(buf[:4])
    if FRAME_MAGIC.startswith(head) and len(head) < 4 or head == FRAME_MAGIC:
        if len(head) < 4:
            raise TruncatedError("short magic")
        return decode_frame(buf)
    if head == COMMAND_MAGIC or (len(head) < 4 and COMMAND_MAGIC.startswith(head)):
        return decode_command(buf)
    raise BadMagicError(f"unknown magic {head!r}")


class StreamDecoder:
    """Incremental decoder that skips garbage and resynchronises on the next magic."""

    def __init__(self):
        self._buf = bytearray()
        self.skipped_bytes = 0
        self.errors: list[ProtocolError] = []

    def feed(self, data: bytes) -> list[FrameMessage | CommandMessage]:
        self._buf += data
        out = []
        while self._buf:
            start = self._next_magic()
            if start < 0:
                keep = 3  # a magic may straddle the next read
                drop = max(0, len(self._buf) - keep)
                self.skipped_bytes += drop
                del self._buf[:drop]
                break
            if start:
                self.skipped_bytes += start
                del self._buf[:start]
            msg = None
            try:
                msg, used = decode(memoryview(self._buf))
            except TruncatedError:
                break
            except ProtocolError as exc:
                # the traceback pins a view of the buffer; drop it before resizing
                self.errors.append(exc.with_traceback(None))
            if msg is None:
                # false magic inside garbage, or a corrupted message
                self.skipped_bytes += 1
                del self._buf[:1]
                continue
            del self._buf[:used]
            out.append(msg)
        return out

    def _next_magic(self) -> int:
        hits = [i for i in (self._buf.find(FRAME_MAGIC), self._buf.find(COMMAND_MAGIC)) if i >= 0]
        return min(hits) if hits else -1


# ---------------------------------------------------------------------------
# server


class _LatestSlot:
    """Depth-1 handoff: a new item replaces an unconsumed one."""

    def __init__(self):
        self._cond = threading.Condition()
        self._item = None
        self._version = 0

    def put(self, item) -> None:
        with self._cond:
            self._item = item
            self._version += 1
            self._cond.notify_all()

    def clear(self) -> None:
        with self._cond:
            self._item = None

    def take(self, timeout: float):
        with self._cond:
            if self._item is None:
                self._cond.wait(timeout)
            item, self._item = self._item, None
            return item


class FrameServer:
    """Paced frame producer plus a single-client connection handler.

    ``source()`` returns the next USFrame; ``on_command(msg)`` handles an
    incoming command and may return a reply message.
    """

    def __init__(
        self,
        source: Callable[[], USFrame],
        rate_hz: float,
        host: str = "127.0.0.1",
        port: int = 0,
        on_command: Callable[[CommandMessage], CommandMessage | None] | None = None,
    ):
        if not rate_hz > 0:
            raise ValueError("rate_hz must be positive")
        self.source = source
        self.rate_hz = rate_hz
        self.host = host
        self.port = port
        self.on_command = on_command
        self.frames_sent = 0
        self.frames_produced = 0
        self.clients_served = 0
        self._slot = _LatestSlot()
        self._stop = threading.Event()
        self._sock: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._send_lock = threading.Lock()
        self._generation = 0
        # held while producing a frame; command handlers take it to change the scene atomically
        self.lock = threading.RLock()

    def start(self) -> "FrameServer":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.host, self.port))
            sock.listen(1)
        except OSError as exc:
            sock.close()
            raise StartupError(f"cannot listen on {self.host}:{self.port}: {exc}") from exc
        sock.settimeout(0.1)
        self._sock = sock
        self.port = sock.getsockname()[1]
        for target in (self._produce, self._serve):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2.0)
        if self._sock is not None:
            self._sock.close()

    def __enter__(self) -> "FrameServer":
        return self.start() if self._sock is None else self

    def __exit__(self, *exc) -> None:
        self.stop()

    def invalidate(self) -> None:
        """Discard frames produced so far; call under ``lock`` after changing the scene.

        Any frame the client receives after a later reply was produced after
        this call.
        """
        with self.lock:
            self._generation += 1
            self._slot.clear()

    def _produce(self) -> None:
        period = 1.0 / self.rate_hz
        t0 = time.monotonic()
        k = 0
        while not self._stop.is_set():
            delay = t0 + k * period - time.monotonic()
            if delay > 0 and self._stop.wait(delay):
                break
            with self.lock:
                try:
                    frame = self.source()
                except Exception:  # noqa: BLE001 - keep the service alive
                    log.exception("frame source failed")
                    frame = None
                if frame is not None:
                    self._slot.put((frame, self._generation))
                    self.frames_produced += 1
            k += 1

    def _serve(self) -> None:
        seq = 0
        while not self._stop.is_set():
            try:
                conn, addr = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            log.info("client connected from %s", addr)
            self.clients_served += 1
            conn.settimeout(0.1)
            alive = threading.Event()
            alive.set()
            reader = threading.Thread(target=self._read_commands, args=(conn, alive), daemon=True)
            reader.start()
            self._slot.clear()
            while alive.is_set() and not self._stop.is_set():
                item = self._slot.take(timeout=0.1)
                if item is None:
                    continue
                frame, generation = item
                data = encode_frame(FrameMessage.from_frame(frame, seq=seq))
                try:
                    with self._send_lock:
                        if generation != self._generation:
                            continue
                        conn.sendall(data)
                except OSError:
                    break
                seq = (seq + 1) & 0xFFFFFFFF
                self.frames_sent += 1
            alive.clear()
            reader.join(timeout=1.0)
            conn.close()
            log.info("client disconnected")

    def _read_commands(self, conn: socket.socket, alive: threading.Event) -> None:
        decoder = StreamDecoder()
        while alive.is_set() and not self._stop.is_set():
            try:
                data = conn.recv(4096)
            except socket.timeout:
                continue
            except OSError:
                break
            if not data:
                break
            for msg in decoder.feed(data):
                if not isinstance(msg, CommandMessage) or self.on_command is None:
                    continue
                reply = self.on_command(msg)
                if reply is not None:
                    try:
                        with self._send_lock:
                            conn.sendall(encode_command(reply))
                    except OSError:
                        alive.clear()
                        return
        alive.clear()


def serve_frames(
    source: Callable[[], USFrame],
    rate_hz: float,
    port: int = 0,
    host: str = "127.0.0.1",
    on_command: Callable[[CommandMessage], CommandMessage | None] | None = None,
) -> FrameServer:
    return FrameServer(source, rate_hz, host, port, on_command).start()


# ---------------------------------------------------------------------------
# client


class FrameClient:
    """Receives frames (latest one kept) and status replies; sends commands."""

    def __init__(self, host: str, port: int, timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.settimeout(0.1)
        self.frames_received = 0
        self.received_seqs: list[int] = []
        self._latest: FrameMessage | None = None
        self._cond = threading.Condition()
        self._replies: list[CommandMessage] = []
        self._frame_seq_at_reply: dict[int, int] = {}
        self.last_reply_frame_seq = -1
        self._closed = threading.Event()
        self._seq = 0
        self._reader = threading.Thread(target=self._read, daemon=True)
        self._reader.start()

    def _read(self) -> None:
        decoder = StreamDecoder()
        while not self._closed.is_set():
            try:
                data = self.sock.recv(1 << 16)
            except socket.timeout:
                continue
            except OSError:
                break
            if not data:
                break
            for msg in decoder.feed(data):
                with self._cond:
                    if isinstance(msg, FrameMessage):
                        self._latest = msg
                        self.frames_received += 1
                        self.received_seqs.append(msg.seq)
                    else:
                        self._replies.append(msg)
                        self._frame_seq_at_reply[msg.seq] = -1 if self._latest is None else self._latest.seq
                    self._cond.notify_all()
        self._closed.set()
        with self._cond:
            self._cond.notify_all()

    def latest_frame(self, after_seq: int = -1, timeout: float = 5.0) -> USFrame:
        """Newest frame with seq greater than ``after_seq``; waits (idles) until one arrives."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while self._latest is None or self._latest.seq <= after_seq:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._closed.is_set():
                    raise TimeoutError("no new frame from server")
                self._cond.wait(remaining)
            return self._latest.to_frame()

    def send(self, msg: CommandMessage) -> None:
        self.sock.sendall(encode_command(msg))

    def next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def request(self, msg: CommandMessage, timeout: float = 5.0) -> CommandMessage:
        """Send and wait for the reply carrying the same seq.

        Afterwards ``last_reply_frame_seq`` holds the newest frame seq seen
        before the reply; later frames reflect the state the reply reports.
        """
        self.send(msg)
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                for i, r in enumerate(self._replies):
                    if r.seq == msg.seq:
                        self.last_reply_frame_seq = self._frame_seq_at_reply.pop(r.seq, -1)
                        return self._replies.pop(i)
                remaining = deadline - time.monotonic()
                if remaining <= 0 or self._closed.is_set():
                    raise TimeoutError(f"no reply to command {msg.seq}")
                self._cond.wait(remaining)

    def frames(self, count: int, timeout: float = 5.0) -> Iterator[USFrame]:
        last = -1
        for _ in range(count):
            f = self.latest_frame(last, timeout)
            last = f.seq
            yield f

    def close(self) -> None:
        self._closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()
        self._reader.join(timeout=1.0)

    def __enter__(self) -> "FrameClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
