"""Rate-paced performance servers and clients.

A session opens with one ASCII header line::

    <direction> <duration_s> <rate_mbps> <msg_size>\\n

``direction`` is seen from the client: ``down`` means the server
transmits, ``up`` means the client does. The server answers ``OK``,
``ERR <reason>`` or ``BUSY``. Over TCP an upload ends with the client
half-closing its side, after which the server replies
``DONE <bytes> <seconds>``. Over UDP the header is the first datagram,
payload datagrams follow, and an empty datagram marks the end of a
stream.
"""

from __future__ import annotations

import logging
import random
import socket
import threading
import time
from dataclasses import dataclass
from typing import Callable

log = logging.getLogger(__name__)

TICK = 0.01
MAX_DURATION = 3600.0
MAX_MSG_TCP = 1 << 20
MAX_MSG_UDP = 65507
GRACE = 2.0
END_REPEATS = 3


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Header:
    direction: str
    duration: float
    rate_mbps: float
    msg_size: int

    def encode(self) -> bytes:
        return f"{self.direction} {self.duration:g} {self.rate_mbps:g} {self.msg_size}\n".encode("ascii")

    @property
    def bytes_per_second(self) -> float:
        return self.rate_mbps * 1e6 / 8


def parse_header(line: bytes | str, max_msg: int = MAX_MSG_TCP) -> Header:
    if isinstance(line, bytes):
        try:
            line = line.decode("ascii")
        except UnicodeDecodeError:
            raise ProtocolError("header is not ASCII") from None
    parts = line.strip().split()
    if len(parts) != 4:
        raise ProtocolError("expected 4 fields")
    direction, duration, rate, size = parts
    if direction not in ("up", "down"):
        raise ProtocolError(f"invalid direction {direction}")
    try:
        duration_f, rate_f, size_i = float(duration), float(rate), int(size)
    except ValueError:
        raise ProtocolError("non-numeric field") from None
    if not 0 < duration_f <= MAX_DURATION:
        raise ProtocolError("duration out of range")
    if not rate_f > 0 or rate_f != rate_f or rate_f == float("inf"):
        raise ProtocolError("rate must be positive")
    if not 1 <= size_i <= max_msg:
        raise ProtocolError("message size out of range")
    return Header(direction, duration_f, rate_f, size_i)


class TokenBucket:
    """Refills at ``rate`` bytes/s, checked every ``tick`` seconds.

    Capacity is one message plus one tick of traffic, so leftover tokens
    are not lost between ticks and bursts stay within a tick.
    """

    def __init__(self, rate: float, msg_size: int, tick: float = TICK,
                 clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep):
        self.rate = float(rate)
        self.capacity = float(msg_size) + self.rate * tick
        self.tick = tick
        self.clock = clock
        self.sleep = sleep
        self.tokens = float(msg_size)
        self.stamp = clock()

    def _refill(self) -> None:
        now = self.clock()
        self.tokens = min(self.capacity, self.tokens + (now - self.stamp) * self.rate)
        self.stamp = now

    def take(self, n: int, deadline: float) -> bool:
        """Block until ``n`` tokens are available; False once ``deadline`` passes."""
        while True:
            self._refill()
            if self.stamp >= deadline:
                return False
            if self.tokens >= n:
                self.tokens -= n
                return True
            self.sleep(min(self.tick, max(deadline - self.stamp, 0.0)))


def payload(size: int, seed: int = 0) -> bytes:
    return random.Random(seed).randbytes(size)


def paced_send(send: Callable[[bytes], object], header: Header, seed: int = 0,
               clock: Callable[[], float] = time.monotonic, sleep: Callable[[float], None] = time.sleep) -> int:
    """Send ``msg_size`` chunks at the header's rate for its duration; returns bytes sent."""
    msg = payload(header.msg_size, seed)
    bucket = TokenBucket(header.bytes_per_second, header.msg_size, clock=clock, sleep=sleep)
    deadline = clock() + header.duration
    sent = 0
    while bucket.take(len(msg), deadline):
        send(msg)
        sent += len(msg)
    return sent


def _readline(sock: socket.socket, limit: int = 256) -> bytes:
    buf = bytearray()
    while len(buf) < limit:
        ch = sock.recv(1)
        if not ch:
            break
        buf += ch
        if ch == b"\n":
            break
    return bytes(buf)


@dataclass
class SessionResult:
    direction: str
    transport: str
    bytes: int
    duration: float
    partial: bool = False
    error: str = ""

    @property
    def mbps(self) -> float:
        return self.bytes * 8 / self.duration / 1e6 if self.duration > 0 else 0.0


class PerfServer:
    """TCP and UDP perf endpoint on one port; serves a single stream at a time."""

    def __init__(self, host: str = "127.0.0.1", port: int = 0, seed: int = 0):
        self.seed = seed
        self._busy = threading.Lock()
        self._stop = threading.Event()
        self.tcp = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.tcp.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.tcp.bind((host, port))
        self.port = self.tcp.getsockname()[1]
        self.udp = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.udp.bind((host, self.port))
        self.udp.settimeout(0.2)
        self.tcp.listen(8)
        self.tcp.settimeout(0.2)
        self.log: list[SessionResult] = []
        self._threads: list[threading.Thread] = []

    def start(self) -> "PerfServer":
        for target, name in ((self._tcp_loop, "tcp"), (self._udp_loop, "udp")):
            t = threading.Thread(target=target, name=f"perf-{name}-{self.port}", daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def close(self) -> None:
        self._stop.set()
        for t in self._threads:
            t.join(timeout=2)
        self.tcp.close()
        self.udp.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()

    def _tcp_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self.tcp.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=self._tcp_session, args=(conn,), daemon=True).start()

    def _tcp_session(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(5.0)
            try:
                line = _readline(conn)
            except OSError:
                return
            try:
                header = parse_header(line)
            except ProtocolError as exc:
                _reply(conn.sendall, f"ERR {exc}\n".encode())
                return
            if not self._busy.acquire(blocking=False):
                _reply(conn.sendall, b"BUSY\n")
                return
            try:
                conn.sendall(b"OK\n")
                start = time.monotonic()
                if header.direction == "down":
                    try:
                        sent = paced_send(conn.sendall, header, self.seed)
                        self.log.append(SessionResult("down", "tcp", sent, time.monotonic() - start))
                    except OSError as exc:
                        self.log.append(SessionResult("down", "tcp", 0, time.monotonic() - start, True, str(exc)))
                else:
                    conn.settimeout(header.duration + GRACE)
                    got, partial = 0, False
                    try:
                        while chunk := conn.recv(65536):
                            got += len(chunk)
                    except OSError:
                        partial = True
                    elapsed = time.monotonic() - start
                    self.log.append(SessionResult("up", "tcp", got, elapsed, partial))
                    try:
                        conn.sendall(f"DONE {got} {elapsed:.6f}\n".encode())
                    except OSError:
                        pass
            except OSError:
                pass
            finally:
                self._busy.release()

    def _udp_loop(self) -> None:
        session = None  # (addr, header, deadline, bytes, start)
        while not self._stop.is_set():
            try:
                data, addr = self.udp.recvfrom(MAX_MSG_UDP)
            except socket.timeout:
                data, addr = None, None
            except OSError:
                return
            now = time.monotonic()
            if session is not None:
                s_addr, header, deadline, got, start = session
                if addr == s_addr and data:
                    session = (s_addr, header, deadline, got + len(data), start)
                    continue
                if (addr == s_addr and data == b"") or now > deadline:
                    self.log.append(SessionResult("up", "udp", got, now - start, now > deadline))
                    self.udp.sendto(f"DONE {got} {now - start:.6f}\n".encode(), s_addr)
                    session = None
                    self._busy.release()
                    continue
            if data is None or data == b"":
                continue
            try:
                header = parse_header(data, MAX_MSG_UDP)
            except ProtocolError as exc:
                self.udp.sendto(f"ERR {exc}\n".encode(), addr)
                continue
            if not self._busy.acquire(blocking=False):
                self.udp.sendto(b"BUSY\n", addr)
                continue
            self.udp.sendto(b"OK\n", addr)
            if header.direction == "up":
                session = (addr, header, now + header.duration + GRACE, 0, now)
            else:
                threading.Thread(target=self._udp_down, args=(addr, header), daemon=True).start()

    def _udp_down(self, addr, header: Header) -> None:
        start = time.monotonic()
        try:
            sent = paced_send(lambda m: self.udp.sendto(m, addr), header, self.seed)
            for _ in range(END_REPEATS):
                self.udp.sendto(b"", addr)
            self.log.append(SessionResult("down", "udp", sent, time.monotonic() - start))
        except OSError as exc:
            self.log.append(SessionResult("down", "udp", 0, time.monotonic() - start, True, str(exc)))
        finally:
            self._busy.release()


def _reply(send, msg: bytes) -> None:
    try:
        send(msg)
    except OSError:
        pass


def _parse_done(line: bytes) -> tuple[int, float]:
    parts = line.decode("ascii", "replace").split()
    if len(parts) != 3 or parts[0] != "DONE":
        raise ProtocolError(f"unexpected reply {line!r}")
    return int(parts[1]), float(parts[2])


def _check_reply(reply: bytes) -> None:
    if reply.strip() != b"OK":
        raise ProtocolError(reply.decode("ascii", "replace").strip() or "connection closed")


def tcp_session(host: str, port: int, header: Header, seed: int = 0, connect_timeout: float = 3.0) -> SessionResult:
    """Run one TCP session; throughput is measured over the requested duration."""
    d = header.direction
    try:
        sock = socket.create_connection((host, port), timeout=connect_timeout)
    except OSError as exc:
        return SessionResult(d, "tcp", 0, header.duration, False, f"connect: {exc}")
    with sock:
        try:
            sock.sendall(header.encode())
            _check_reply(_readline(sock))
        except (OSError, ProtocolError) as exc:
            return SessionResult(d, "tcp", 0, header.duration, False, str(exc))
        sock.settimeout(header.duration + GRACE)
        got = 0
        try:
            if d == "down":
                while chunk := sock.recv(65536):
                    got += len(chunk)
                return SessionResult(d, "tcp", got, header.duration)
            sent = paced_send(sock.sendall, header, seed)
            sock.shutdown(socket.SHUT_WR)
            received, _ = _parse_done(_readline(sock))
            return SessionResult(d, "tcp", received, header.duration, received != sent)
        except (OSError, ProtocolError) as exc:
            return SessionResult(d, "tcp", got, header.duration, True, str(exc))


def udp_session(host: str, port: int, header: Header, seed: int = 0, reply_timeout: float = 1.0) -> SessionResult:
    """Run one UDP session; throughput is the receiver-side byte count over the duration."""
    d = header.direction
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as sock:
        sock.settimeout(reply_timeout)
        try:
            sock.connect((host, port))
            sock.send(header.encode())
            _check_reply(sock.recv(MAX_MSG_UDP))
        except (OSError, ProtocolError) as exc:
            return SessionResult(d, "udp", 0, header.duration, False, str(exc))
        try:
            if d == "down":
                got = 0
                deadline = time.monotonic() + header.duration + GRACE
                while time.monotonic() < deadline:
                    try:
                        data = sock.recv(MAX_MSG_UDP)
                    except socket.timeout:
                        continue
                    if not data:
                        return SessionResult(d, "udp", got, header.duration)
                    got += len(data)
                return SessionResult(d, "udp", got, header.duration, True, "no end marker")
            paced_send(sock.send, header, seed)
            for _ in range(END_REPEATS):
                sock.send(b"")
            sock.settimeout(GRACE)
            received, _ = _parse_done(sock.recv(MAX_MSG_UDP))
            return SessionResult(d, "udp", received, header.duration)
        except (OSError, ProtocolError) as exc:
            return SessionResult(d, "udp", 0, header.duration, True, str(exc))
