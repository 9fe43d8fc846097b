"""Point-to-point message transport with two interchangeable backends.

The simulated backend runs logical processes as generators over a virtual
clock (integer microseconds) and delivers messages through a single global
event queue, so a run is a deterministic function of its inputs.  The socket
backend runs the same process bodies on OS threads over localhost TCP and is
used to demonstrate that nothing in the upper layers depends on simulation.

A logical process is a generator that yields command objects:

    Sleep(us)            suspend for a duration (virtual or wall time)
    Recv(pattern)        block until a message matching `pattern` arrives
    WaitRound(handle, t) block until `handle` has completed round >= t

Messages between one (src, dst, tag-stream) triple are delivered in FIFO
order; the simulated backend orders simultaneous events by (time, priority,
sequence) with process resumption ahead of message delivery, which keeps
zero-skew runs exactly synchronous.
"""

from __future__ import annotations

import heapq
import socket
import struct
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, NamedTuple

import numpy as np

# A rank is a plain int in [0, p).  Validated at the transport boundary.
Rank = int

# Tag phases used by the collective layer; applications may use any ints.
PHASE_ACT = 0
PHASE_RED = 1
PHASE_APP = 7


class Tag(NamedTuple):
    """Stream identifier: (collective id, round, phase, step)."""

    cid: int
    rnd: int
    phase: int
    step: int


@dataclass(frozen=True)
class Message:
    src: Rank
    dst: Rank
    tag: Tag
    payload: bytes


@dataclass
class Sleep:
    us: int


@dataclass
class Recv:
    pattern: object  # Tag, partial tuple with None wildcards, or predicate


@dataclass
class WaitRound:
    handle: object
    generation: int


class TransportClosed(RuntimeError):
    pass


class UnknownRank(ValueError):
    pass


class DeadlockError(RuntimeError):
    """Raised when the event queue drains while processes are still blocked."""


def match_tag(pattern, tag: Tag) -> bool:
    if callable(pattern):
        return bool(pattern(tag))
    # tuple with None wildcards (or a full Tag)
    return all(p is None or p == t for p, t in zip(pattern, tag))


# ---------------------------------------------------------------------------
# delay models


DELAY_KINDS = ("none", "constant", "linear_skew", "random_subset")


@dataclass(frozen=True)
class DelayModel:
    """Per-round injected computation delay.

    kind:
      none           no delay anywhere
      constant       every rank sleeps unit_ms each round
      linear_skew    rank r sleeps (r + 1) * unit_ms each round
      random_subset  k distinct ranks, drawn per round from `seed`, sleep
                     unit_ms; everyone else runs undelayed
    """

    kind: str = "none"
    unit_ms: float = 0.0
    k: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DELAY_KINDS:
            raise ValueError(f"unknown delay kind {self.kind!r}")
        if self.unit_ms < 0:
            raise ValueError("unit_ms must be >= 0")
        if self.k < 0:
            raise ValueError("k must be >= 0")


def delayed_ranks(model: DelayModel, rnd: int, p: int) -> tuple[int, ...]:
    """The set of ranks a random_subset model delays in round `rnd`.

    Pure function of (seed, rnd, p): replaying a round re-draws the same set.
    """
    k = min(model.k, p)
    rng = np.random.default_rng([model.seed, rnd])
    return tuple(int(r) for r in rng.choice(p, size=k, replace=False))


def inject_delay(rank: Rank, rnd: int, model: DelayModel, p: int) -> int:
    """Delay in microseconds for `rank` in round `rnd` under `model`."""
    if model.kind == "none":
        return 0
    if model.kind == "constant":
        return int(round(model.unit_ms * 1000))
    if model.kind == "linear_skew":
        return int(round((rank + 1) * model.unit_ms * 1000))
    if model.kind == "random_subset":
        if rank in delayed_ranks(model, rnd, p):
            return int(round(model.unit_ms * 1000))
        return 0
    raise ValueError(model.kind)


# ---------------------------------------------------------------------------
# simulated backend

_PRIO_RESUME = 0  # process resumptions run before message deliveries
_PRIO_DELIVER = 1


@dataclass
class SimClock:
    now_us: int = 0

    def advance_to(self, t: int) -> None:
        if t < self.now_us:
            raise ValueError("clock may not move backwards")
        self.now_us = t


class SimTransport:
    """Deterministic discrete-event transport.

    Every send is delivered after `link_latency_us`; there is no loss and no
    reordering within a (src, dst, tag-stream).  Engines registered per rank
    are pumped on each delivery so schedules make progress without any
    process being scheduled.
    """

    def __init__(self, p: int, link_latency_us: int = 0):
        if p < 1:
            raise ValueError("p must be >= 1")
        self.p = p
        self.link_latency_us = int(link_latency_us)
        self.clock = SimClock(0)
        self._heap: list = []
        self._seq = 0
        self._mail: list[list[Message]] = [[] for _ in range(p)]
        self._engines: list[list] = [[] for _ in range(p)]
        self._procs: dict[int, object] = {}
        self._parked_recv: dict[int, object] = {}
        self._parked_round: dict[int, tuple] = {}
        self._open = True
        self.events_processed = 0

    # -- time ---------------------------------------------------------------

    @property
    def now(self) -> int:
        return self.clock.now_us

    def now_us(self) -> int:
        return self.clock.now_us

    # -- wiring -------------------------------------------------------------

    def register_engine(self, rank: Rank, engine) -> None:
        self._check_rank(rank)
        self._engines[rank].append(engine)
        engine.mailbox = self._mail[rank]
        engine.defer_fn = self.defer

    def defer(self, fn) -> None:
        """Run fn at the current virtual time, after any pending same-time
        process resumes (delivery priority)."""
        self._push(self.now, _PRIO_DELIVER, ("call", fn))

    def spawn(self, rank: Rank, proc) -> None:
        self._check_rank(rank)
        if rank in self._procs:
            raise ValueError(f"rank {rank} already has a process")
        self._procs[rank] = proc
        self._push(self.now, _PRIO_RESUME, ("resume", rank, None))

    def _check_rank(self, rank: Rank) -> None:
        if not (0 <= rank < self.p):
            raise UnknownRank(f"rank {rank} outside [0, {self.p})")

    def _push(self, t: int, prio: int, item) -> None:
        heapq.heappush(self._heap, (t, prio, self._seq, item))
        self._seq += 1

    # -- sending ------------------------------------------------------------

    def send(self, msg: Message) -> None:
        if not self._open:
            raise TransportClosed("send on closed transport")
        self._check_rank(msg.src)
        self._check_rank(msg.dst)
        self._push(self.now + self.link_latency_us, _PRIO_DELIVER, ("deliver", msg))

    # -- event loop ---------------------------------------------------------

    def run(self, until_us: int | None = None, max_events: int = 50_000_000) -> None:
        """Drain the event queue (optionally up to a virtual time bound).

        Raises DeadlockError if the queue empties while processes are still
        blocked on Recv or WaitRound: with no pending events nothing can ever
        wake them.
        """
        while self._heap:
            t, prio, _, item = self._heap[0]
            if until_us is not None and t > until_us:
                return
            heapq.heappop(self._heap)
            self.clock.advance_to(t)
            self.events_processed += 1
            if self.events_processed > max_events:
                raise RuntimeError("event budget exceeded; likely livelock")
            if item[0] == "deliver":
                self._deliver(item[1])
            elif item[0] == "call":
                item[1]()
            else:
                self._step_proc(item[1], item[2])
        if self._procs and (self._parked_recv or self._parked_round):
            blocked = sorted(set(self._parked_recv) | set(self._parked_round))
            raise DeadlockError(f"ranks {blocked} blocked with no pending events")

    def _deliver(self, msg: Message) -> None:
        box = self._mail[msg.dst]
        box.append(msg)
        for eng in self._engines[msg.dst]:
            eng.pump(box)
        pat = self._parked_recv.get(msg.dst)
        if pat is not None:
            got = self._pull_match(msg.dst, pat)
            if got is not None:
                del self._parked_recv[msg.dst]
                self._push(self.now, _PRIO_RESUME, ("resume", msg.dst, got))

    def _pull_match(self, rank: Rank, pattern) -> Message | None:
        box = self._mail[rank]
        for i, m in enumerate(box):
            if match_tag(pattern, m.tag):
                return box.pop(i)
        return None

    def _step_proc(self, rank: Rank, value) -> None:
        proc = self._procs.get(rank)
        if proc is None:
            return
        try:
            cmd = proc.send(value)
        except StopIteration:
            del self._procs[rank]
            return
        if isinstance(cmd, Sleep):
            self._push(self.now + int(cmd.us), _PRIO_RESUME, ("resume", rank, None))
        elif isinstance(cmd, Recv):
            got = self._pull_match(rank, cmd.pattern)
            if got is not None:
                self._push(self.now, _PRIO_RESUME, ("resume", rank, got))
            else:
                self._parked_recv[rank] = cmd.pattern
        elif isinstance(cmd, WaitRound):
            h, g = cmd.handle, cmd.generation
            if h.done_generation >= g:
                self._push(self.now, _PRIO_RESUME, ("resume", rank, h.latest_result()))
            else:
                self._parked_round[rank] = (h, g)
                h.add_waiter(g, rank, self._wake_round)
        else:
            raise TypeError(f"process yielded {cmd!r}")

    def _wake_round(self, rank: Rank, result) -> None:
        if rank in self._parked_round:
            del self._parked_round[rank]
            self._push(self.now, _PRIO_RESUME, ("resume", rank, result))

    def close(self) -> None:
        self._open = False


# ---------------------------------------------------------------------------
# socket backend

_FRAME = struct.Struct("<iiiqiiI")  # src, dst, cid, rnd, phase, step, paylen


class SocketTransport:
    """Localhost TCP backend running the same process bodies on threads.

    Timing comes from the wall clock, so nothing here is deterministic; the
    point is that schedules, collectives and training only ever talk to the
    transport interface.
    """

    def __init__(self, p: int, host: str = "127.0.0.1"):
        if p < 1:
            raise ValueError("p must be >= 1")
        self.p = p
        self.host = host
        self._t0 = time.monotonic_ns()
        self._mail: list[list[Message]] = [[] for _ in range(p)]
        self._cond: list[threading.Condition] = [threading.Condition() for _ in range(p)]
        self._engines: list[list] = [[] for _ in range(p)]
        self._listeners: list[socket.socket] = []
        self.ports: list[int] = []
        self._conns: dict[tuple[int, int], socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._open = True
        for _ in range(p):
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            srv.bind((host, 0))
            srv.listen(p)
            self._listeners.append(srv)
            self.ports.append(srv.getsockname()[1])
        for rank in range(p):
            th = threading.Thread(target=self._accept_loop, args=(rank,), daemon=True)
            th.start()
            self._threads.append(th)

    def now_us(self) -> int:
        return (time.monotonic_ns() - self._t0) // 1000

    @property
    def now(self) -> int:
        return self.now_us()

    def register_engine(self, rank: Rank, engine) -> None:
        self._engines[rank].append(engine)
        engine.mailbox = self._mail[rank]

    def _accept_loop(self, rank: int) -> None:
        srv = self._listeners[rank]
        while self._open:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            th = threading.Thread(target=self._reader, args=(rank, conn), daemon=True)
            th.start()
            self._threads.append(th)

    def _reader(self, rank: int, conn: socket.socket) -> None:
        try:
            while True:
                hdr = self._read_exact(conn, _FRAME.size)
                if hdr is None:
                    return
                src, dst, cid, rnd, phase, step, n = _FRAME.unpack(hdr)
                payload = self._read_exact(conn, n) if n else b""
                if n and payload is None:
                    return
                msg = Message(src, dst, Tag(cid, rnd, phase, step), payload or b"")
                self._deliver(msg)
        except OSError:
            return

    @staticmethod
    def _read_exact(conn: socket.socket, n: int) -> bytes | None:
        buf = b""
        while len(buf) < n:
            chunk = conn.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def _deliver(self, msg: Message) -> None:
        cond = self._cond[msg.dst]
        with cond:
            self._mail[msg.dst].append(msg)
            for eng in self._engines[msg.dst]:
                eng.pump(self._mail[msg.dst])
            cond.notify_all()

    def send(self, msg: Message) -> None:
        if not self._open:
            raise TransportClosed("send on closed transport")
        if not (0 <= msg.dst < self.p):
            raise UnknownRank(str(msg.dst))
        key = (msg.src, msg.dst)
        with self._conn_lock:
            conn = self._conns.get(key)
            if conn is None:
                conn = socket.create_connection((self.host, self.ports[msg.dst]))
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._conns[key] = conn
        t = msg.tag
        frame = _FRAME.pack(msg.src, msg.dst, t.cid, t.rnd, t.phase, t.step, len(msg.payload))
        with self._conn_lock:
            conn.sendall(frame + msg.payload)

    def recv_match(self, rank: Rank, pattern, timeout: float = 30.0) -> Message:
        cond = self._cond[rank]
        deadline = time.monotonic() + timeout
        with cond:
            while True:
                box = self._mail[rank]
                for i, m in enumerate(box):
                    if match_tag(pattern, m.tag):
                        return box.pop(i)
                left = deadline - time.monotonic()
                if left <= 0:
                    raise TimeoutError(f"rank {rank} recv timed out on {pattern}")
                cond.wait(left)

    def run_processes(self, bodies: dict[int, object], timeout: float = 60.0) -> None:
        """Drive generator process bodies to completion, one thread per rank."""
        errors: list = []

        def driver(rank: int, proc) -> None:
            value = None
            try:
                while True:
                    try:
                        cmd = proc.send(value)
                    except StopIteration:
                        return
                    if isinstance(cmd, Sleep):
                        time.sleep(cmd.us / 1e6)
                        value = None
                    elif isinstance(cmd, Recv):
                        value = self.recv_match(rank, cmd.pattern, timeout)
                    elif isinstance(cmd, WaitRound):
                        value = cmd.handle.wait_blocking(cmd.generation, timeout)
                    else:
                        raise TypeError(f"process yielded {cmd!r}")
            except Exception as e:  # surfaced after join
                errors.append((rank, e))

        threads = [
            threading.Thread(target=driver, args=(rank, proc), daemon=True)
            for rank, proc in bodies.items()
        ]
        for th in threads:
            th.start()
        for th in threads:
            th.join(timeout)
            if th.is_alive():
                raise TimeoutError("process thread did not finish")
        if errors:
            rank, err = errors[0]
            raise RuntimeError(f"rank {rank} failed: {err!r}") from err

    def close(self) -> None:
        self._open = False
        for s in self._listeners:
            try:
                s.close()
            except OSError:
                pass
        with self._conn_lock:
            for c in self._conns.values():
                try:
                    c.close()
                except OSError:
                    pass
            self._conns.clear()


def delays_for_round(model: DelayModel, rnd: int, p: int) -> list[int]:
    """Convenience: per-rank injected delays (us) for one round."""
    return [inject_delay(r, rnd, model, p) for r in range(p)]
