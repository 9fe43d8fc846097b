"""Dependency-DAG communication schedules and the engine that executes them.

A schedule is a static DAG of consumable ops: send, recv, compute, nop.
Each op carries and/or dependency logic over its predecessors and fires at
most once per generation; firing an already-consumed op is a silent no-op,
which is what lets several concurrent initiators race on one schedule
without double-executing anything.

The engine is passive: it is driven by whoever owns the transport (the
simulator's delivery loop, a socket reader thread, or the interleaving
explorer), sends through an injected callable, and makes progress on every
pump.  A persistent schedule replicates itself on completion: the generation
counter bumps, op states and scratch buffers reset, and messages tagged with
a future generation wait in the mailbox until their generation is current.

Internal activation fires the entry NOP locally.  External activation is a
message arriving on an activation-phase recv.  A hold policy, when set,
defers matching of activation-phase messages for generations it rejects;
this is the hook the staleness guard uses to degrade a round to synchronous.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .transport import Message, Tag, PHASE_ACT

K_SEND, K_RECV, K_COMPUTE, K_NOP = "send", "recv", "compute", "nop"
_KINDS = (K_SEND, K_RECV, K_COMPUTE, K_NOP)

_DTYPES = {"f8": np.float64, "i8": np.int64, "i4": np.int32, "u8": np.uint64}
_INT_CODES = ("i8", "i4", "u8")


class ScheduleError(Exception):
    pass


class CycleError(ScheduleError):
    pass


class DuplicateOpError(ScheduleError):
    pass


class DepsUnsatisfied(ScheduleError):
    pass


class ReplicateError(ScheduleError):
    pass


@dataclass(frozen=True)
class BufView:
    """A typed element range inside a named byte buffer."""

    buf: str
    dtype: str
    offset: int  # bytes
    count: int   # elements

    def nbytes(self) -> int:
        return self.count * np.dtype(_DTYPES[self.dtype]).itemsize


@dataclass(frozen=True)
class OpSpec:
    oid: int
    kind: str
    logic: str = "and"             # "and" | "or"
    deps: tuple[int, ...] = ()
    label: str = ""
    # send/recv
    peer: int | None = None
    phase: int | None = None
    step: int | None = None
    send_buf: str | None = None    # None sends an empty payload
    recv_buf: str | None = None
    # compute
    fn: str | None = None          # "sum" | "max" | "bor"
    dst: BufView | None = None
    src: BufView | None = None
    # markers
    entry: bool = False
    publish: bool = False


@dataclass
class ScheduleTemplate:
    """Static description of one rank's schedule.

    preserve lists buffers whose contents survive replication (the
    contribution send buffer: it belongs to the application, not to any one
    generation).  Everything else zeroes when the schedule replicates.
    """

    ops: list[OpSpec]
    buffers: dict[str, int]              # name -> size in bytes
    entry_id: int
    publish_from: str | None = None
    snapshot_last: int | None = None     # op after which the send buffer is consumed
    snapshot_src: str | None = None      # the send buffer name
    persistent: bool = False
    require_activation: bool = True
    preserve: tuple[str, ...] = ()

    def validate(self) -> None:
        ids = [op.oid for op in self.ops]
        if len(set(ids)) != len(ids):
            raise DuplicateOpError("duplicate op ids")
        if sorted(ids) != list(range(len(ids))):
            raise ScheduleError("op ids must be dense 0..n-1")
        byid = {op.oid: op for op in self.ops}
        entries = [op for op in self.ops if op.entry]
        if len(entries) != 1 or entries[0].kind != K_NOP:
            raise ScheduleError("schedule needs exactly one entry NOP")
        if entries[0].oid != self.entry_id:
            raise ScheduleError("entry_id does not match the entry op")
        for op in self.ops:
            if op.kind not in _KINDS:
                raise ScheduleError(f"unknown op kind {op.kind!r}")
            if op.logic not in ("and", "or"):
                raise ScheduleError(f"unknown dep logic {op.logic!r}")
            for d in op.deps:
                if d not in byid:
                    raise ScheduleError(f"op {op.oid} depends on missing op {d}")
            if op.kind == K_SEND and op.send_buf is not None and op.send_buf not in self.buffers:
                raise ScheduleError(f"send op {op.oid} names unknown buffer")
            if op.kind == K_RECV and (op.recv_buf is not None) and op.recv_buf not in self.buffers:
                raise ScheduleError(f"recv op {op.oid} names unknown buffer")
            if op.kind == K_COMPUTE:
                if op.fn not in ("sum", "max", "bor"):
                    raise ScheduleError(f"compute op {op.oid} has unknown fn {op.fn!r}")
                for v in (op.dst, op.src):
                    if v is None or v.buf not in self.buffers:
                        raise ScheduleError(f"compute op {op.oid} has bad views")
                    if v.dtype not in _DTYPES:
                        raise ScheduleError(f"unknown dtype {v.dtype!r}")
                    if v.offset + v.nbytes() > self.buffers[v.buf]:
                        raise ScheduleError(f"compute op {op.oid} view out of range")
                if op.fn == "bor" and op.dst.dtype not in _INT_CODES:
                    raise ScheduleError("bor requires an integer dtype")
                if op.dst.count != op.src.count or op.dst.dtype != op.src.dtype:
                    raise ScheduleError(f"compute op {op.oid} view shape mismatch")
        # Kahn's algorithm: every op must be reachable through its deps
        indeg = {op.oid: len(op.deps) for op in self.ops}
        dependents: dict[int, list[int]] = {op.oid: [] for op in self.ops}
        for op in self.ops:
            for d in op.deps:
                dependents[d].append(op.oid)
        frontier = [o for o, n in indeg.items() if n == 0]
        seen = 0
        while frontier:
            o = frontier.pop()
            seen += 1
            for nxt in dependents[o]:
                indeg[nxt] -= 1
                if indeg[nxt] == 0:
                    frontier.append(nxt)
        if seen != len(self.ops):
            raise CycleError("dependency cycle in schedule")
        if self.publish_from is not None and self.publish_from not in self.buffers:
            raise ScheduleError("publish_from names unknown buffer")
        publishers = [op for op in self.ops if op.publish]
        if len(publishers) > 1:
            raise ScheduleError("at most one publishing op")
        if self.persistent and not self.require_activation:
            # the replica would complete unprompted and replicate again,
            # unboundedly, before commit() ever returns
            raise ScheduleError("persistent schedules must require activation")


class Engine:
    """Executes one committed schedule for one rank.

    Public surface: commit(), activate_internal(), pump(), fire(),
    try_contribute(), replicate(), plus read-only state (generation,
    done_generation, recv_buffer, fire_log).
    """

    def __init__(self, template: ScheduleTemplate, rank: int, cid: int,
                 send_fn, now_fn, recorder=None,
                 on_snapshot=None, on_done=None):
        template.validate()
        self.template = template
        self.rank = rank
        self.cid = cid
        self.send_fn = send_fn
        self.now_fn = now_fn
        self.recorder = recorder
        self.on_snapshot = on_snapshot
        self.on_done = on_done
        self.hold_policy = None      # callable(generation) -> bool, or None
        self.mailbox: list | None = None
        # When set (simulated transport), a rescan after an in-pump
        # replication is handed to the scheduler instead of running inline,
        # so same-instant application resumes observe the new generation
        # before held-back messages are matched against it.
        self.defer_fn = None
        # serializes app-thread calls against reader-thread pumps (socket mode);
        # uncontended in the simulator
        self.lock = threading.RLock()

        n = len(template.ops)
        self.ops: list[OpSpec] = sorted(template.ops, key=lambda o: o.oid)
        self.consumed = bytearray(n)
        self.fire_count = [0] * n
        self.fire_log: list[tuple[int, int]] = []   # (generation, oid)
        self.dependents: list[list[int]] = [[] for _ in range(n)]
        for op in self.ops:
            for d in op.deps:
                self.dependents[d].append(op.oid)
        self._recv_index: dict[tuple[int, int], int] = {}
        for op in self.ops:
            if op.kind == K_RECV:
                key = (op.phase, op.step)
                if key in self._recv_index:
                    raise ScheduleError(f"two recvs on the same (phase, step) {key}")
                self._recv_index[key] = op.oid

        self._buf: dict[str, np.ndarray] = {
            name: np.zeros(size, dtype=np.uint8) for name, size in template.buffers.items()
        }
        self._views: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for op in self.ops:
            if op.kind == K_COMPUTE:
                self._views[op.oid] = (self._resolve(op.dst), self._resolve(op.src))
        self.recv_buffer = (
            np.zeros(template.buffers[template.publish_from], dtype=np.uint8)
            if template.publish_from else None
        )
        self.generation = 0
        self.done_generation = -1
        self.committed = False

    def _resolve(self, view: BufView) -> np.ndarray:
        raw = self._buf[view.buf]
        dt = _DTYPES[view.dtype]
        n = view.nbytes()
        return raw[view.offset:view.offset + n].view(dt)

    def buffer(self, name: str) -> np.ndarray:
        return self._buf[name]

    # -- lifecycle ----------------------------------------------------------

    def commit(self) -> None:
        """Arm the schedule: dependency-free ops fire immediately, except the
        entry NOP when activation is required, and recvs, which fire on
        message arrival."""
        with self.lock:
            if self.committed:
                raise ScheduleError("schedule already committed")
            self.committed = True
            self._fire_free()
        self.pump()

    def _fire_free(self) -> None:
        seeds = []
        for op in self.ops:
            if op.deps:
                continue
            if op.kind == K_RECV:
                continue
            if op.entry and self.template.require_activation:
                continue
            seeds.append(op.oid)
        self._cascade(seeds)

    def activate_internal(self, expected_generation: int | None = None) -> None:
        """Fire the entry NOP.  Silent no-op if this generation is already
        activated (several initiators may race), or if the schedule has moved
        past `expected_generation`."""
        with self.lock:
            if not self.committed:
                raise ScheduleError("activate before commit")
            if expected_generation is not None and self.generation != expected_generation:
                return
            self._cascade([self.template.entry_id])
        self.pump()

    def replicate(self) -> None:
        with self.lock:
            if self.done_generation < self.generation:
                raise ReplicateError("replicate before the current generation completed")
            self._replicate()
        self.pump()

    def _replicate(self) -> None:
        self.generation += 1
        self.consumed = bytearray(len(self.ops))
        self.fire_count = [0] * len(self.ops)
        for name, arr in self._buf.items():
            if name not in self.template.preserve:
                arr[:] = 0
        self._fire_free()

    # -- firing -------------------------------------------------------------

    def _dep_ok(self, op: OpSpec) -> bool:
        if not op.deps:
            return True
        if op.logic == "or":
            return any(self.consumed[d] for d in op.deps)
        return all(self.consumed[d] for d in op.deps)

    def fire(self, oid: int) -> None:
        """Manually fire one op (and anything it unblocks).

        Already-consumed: silent no-op.  Unsatisfied dependencies: error.
        Recvs cannot be fired manually; they fire when a message matches.
        """
        with self.lock:
            if self.consumed[oid]:
                return
            op = self.ops[oid]
            if op.kind == K_RECV:
                raise DepsUnsatisfied("recv ops fire on message arrival")
            if not self._dep_ok(op):
                raise DepsUnsatisfied(f"op {oid} has unmet dependencies")
            self._cascade([oid])
        self.pump()

    def _cascade(self, seeds: list[int]) -> None:
        stack = list(seeds)
        epoch = self.generation
        while stack:
            if self.generation != epoch:
                return  # replicated underneath us; the old frontier is void
            oid = stack.pop()
            if self.consumed[oid]:
                continue
            op = self.ops[oid]
            if op.kind == K_RECV:
                continue
            if not self._dep_ok(op):
                continue
            self._fire(oid)
            stack.extend(self.dependents[oid])

    def _fire(self, oid: int) -> None:
        assert self.fire_count[oid] == 0, "op fired twice in one generation"
        self.consumed[oid] = 1
        self.fire_count[oid] += 1
        op = self.ops[oid]
        self.fire_log.append((self.generation, oid))
        if self.recorder is not None:
            self.recorder.op_fired(self.now_fn(), self.rank, self.cid,
                                   self.generation, oid, op.label)
        if op.kind == K_SEND:
            payload = self._buf[op.send_buf].tobytes() if op.send_buf else b""
            self.send_fn(Message(self.rank, op.peer,
                                 Tag(self.cid, self.generation, op.phase, op.step),
                                 payload))
        elif op.kind == K_COMPUTE:
            dst, src = self._views[oid]
            if op.fn == "sum":
                np.add(dst, src, out=dst)
            elif op.fn == "max":
                np.maximum(dst, src, out=dst)
            else:
                np.bitwise_or(dst, src, out=dst)
        if oid == self.template.snapshot_last:
            self._snapshot_taken()
        if op.publish:
            self._complete()

    def _snapshot_taken(self) -> None:
        name = self.template.snapshot_src
        if name is None:
            return
        buf = self._buf[name]
        if self.on_snapshot is not None:
            self.on_snapshot(self.generation, buf.copy())
        buf[:] = 0  # contribution consumed; the stash starts empty again

    def _complete(self) -> None:
        g = self.generation
        if self.recv_buffer is not None:
            np.copyto(self.recv_buffer, self._buf[self.template.publish_from])
        self.done_generation = g
        if self.on_done is not None:
            self.on_done(g)
        if self.template.persistent:
            self._replicate()

    # -- message matching ---------------------------------------------------

    def _fire_recv(self, oid: int, payload: bytes) -> None:
        op = self.ops[oid]
        if op.recv_buf is not None:
            dst = self._buf[op.recv_buf]
            if len(payload) != len(dst):
                raise ScheduleError(
                    f"recv {oid} payload {len(payload)}B != buffer {len(dst)}B")
            dst[:] = np.frombuffer(payload, dtype=np.uint8)
        assert self.fire_count[oid] == 0
        self.consumed[oid] = 1
        self.fire_count[oid] += 1
        self.fire_log.append((self.generation, oid))
        if self.recorder is not None:
            self.recorder.op_fired(self.now_fn(), self.rank, self.cid,
                                   self.generation, oid, op.label)
        self._cascade(self.dependents[oid])

    def pump(self, mailbox: list | None = None) -> None:
        """Match deliverable messages against this generation's recvs.

        Messages for past generations are dropped, future generations wait,
        duplicates of consumed ops are discarded, and activation-phase
        messages are skipped while the hold policy rejects the current
        generation.  Loops until no further progress: one match can complete
        the generation and replicate, making held-back messages current.
        """
        if not self.committed:
            return
        box = self.mailbox if mailbox is None else mailbox
        if box is None:
            return
        with self.lock:
            self._pump_locked(box)

    def _pump_locked(self, box: list) -> None:
        progressed = True
        while progressed:
            progressed = False
            gen_at_entry = self.generation
            i = 0
            while i < len(box):
                m = box[i]
                if m.tag.cid != self.cid:
                    i += 1
                    continue
                if m.tag.rnd < self.generation:
                    box.pop(i)
                    continue
                if m.tag.rnd > self.generation:
                    i += 1
                    continue
                oid = self._recv_index.get((m.tag.phase, m.tag.step))
                if oid is None:
                    i += 1
                    continue
                if self.consumed[oid]:
                    box.pop(i)  # duplicate for a consumable op: ignore
                    continue
                if (m.tag.phase == PHASE_ACT and self.hold_policy is not None
                        and self.hold_policy(self.generation)):
                    i += 1
                    continue
                if not self._dep_ok(self.ops[oid]):
                    i += 1
                    continue
                box.pop(i)
                self._fire_recv(oid, m.payload)
                progressed = True
                if self.generation != gen_at_entry and self.defer_fn is not None:
                    self.defer_fn(self.pump)
                    return
                break


def single_nop_template(*, publish: bool = True) -> ScheduleTemplate:
    """Smallest valid schedule: one dependency-free NOP that completes the
    generation the moment the schedule is committed."""
    op = OpSpec(0, K_NOP, entry=True, publish=publish, label="N0")
    return ScheduleTemplate(ops=[op], buffers={}, entry_id=0,
                            require_activation=False)
