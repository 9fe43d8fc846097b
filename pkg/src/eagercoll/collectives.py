"""Allreduce in three flavors on top of dependency schedules.

sync      every rank contributes, result includes all P contributions.
solo      wait-free: the first-arriving rank activates everyone's reduction
          immediately; late ranks find the round already finished.
majority  one rank per round, drawn by a counter-based PRNG every rank can
          evaluate locally, is the only one allowed to activate internally;
          on average half the ranks have contributed by the time it arrives.

The wire payload is the value vector followed by an inclusion bitmask
(one bit per rank, packed in 64-bit words).  Reduction combines payloads
elementwise: sum over the vector, bitwise-or over the mask, so the result
always says exactly which ranks' fresh contributions it contains.

The reduction is a recursive-doubling butterfly over the largest power of
two p2 <= p; ranks beyond p2 fold their contribution into a base partner
first and get the finished result back at the end.  Combination order is
identical block-aligned pairing at every rank, so for a given contribution
set the result is bit-identical everywhere.  Division by p happens at result
read-out and always divides by the full world size, included or not.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np

from .schedule import (
    BufView, Engine, K_COMPUTE, K_NOP, K_RECV, K_SEND, OpSpec, ScheduleTemplate,
)
from .trace import LatencyRecord, RoundRecord, SnapshotRecord, TraceRecorder
from .transport import PHASE_ACT, PHASE_RED, Sleep, SimTransport, WaitRound

SOLO, MAJORITY, SYNC = "solo", "majority", "sync"
FLAVORS = (SOLO, MAJORITY, SYNC)

_ELEMENTS = {"f8": np.float64, "i8": np.int64}


@dataclass(frozen=True)
class CollectiveConfig:
    p: int
    flavor: str
    vector_len: int
    element: str = "f8"
    seed: int = 0

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.flavor not in FLAVORS:
            raise ValueError(f"unknown flavor {self.flavor!r}")
        if self.vector_len < 1:
            raise ValueError("vector_len must be >= 1")
        if self.element not in _ELEMENTS:
            raise ValueError(f"element must be one of {sorted(_ELEMENTS)}")

    @property
    def mask_words(self) -> int:
        return (self.p + 63) // 64

    @property
    def payload_nbytes(self) -> int:
        return 8 * self.vector_len + 8 * self.mask_words


@dataclass
class CollectiveResult:
    u: np.ndarray        # reduced vector, divided by p
    included: int        # bitmask: bit r set iff rank r's fresh value is in u
    nap: int             # popcount of included
    rnd: int = 0


def initiator_for_round(seed: int, t: int, p: int) -> int:
    """Designated initiator for round t: uniform over ranks, reproducible.

    Implemented as a counter-based generator (philox4x64) keyed by the shared
    seed with the round number as the counter, so any rank can evaluate any
    round's choice locally without communication and without sequential state.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    bitgen = np.random.Philox(key=np.uint64(seed), counter=[np.uint64(t), 0, 0, 0])
    return int(np.random.Generator(bitgen).integers(0, p))


def ceil_log2(p: int) -> int:
    return 0 if p <= 1 else (p - 1).bit_length()


def floor_pow2(p: int) -> int:
    return 1 << (p.bit_length() - 1)


# reduction-phase step tags: 0..m2-1 butterfly, then fold, then final
def _fold_step(m2: int) -> int:
    return m2


def _final_step(m2: int) -> int:
    return m2 + 1


def build_allreduce_template(rank: int, cfg: CollectiveConfig) -> ScheduleTemplate:
    """One rank's schedule for a single allreduce generation.

    Layout: entry NOP -> (activation tree for partial flavors) -> snapshot of
    the contribution buffer -> fold/butterfly/final -> publishing NOP.
    """
    p, nbytes = cfg.p, cfg.payload_nbytes
    vlen, mw = cfg.vector_len, cfg.mask_words
    el = cfg.element

    def dv(buf: str) -> BufView:
        return BufView(buf, el, 0, vlen)

    def mv(buf: str) -> BufView:
        return BufView(buf, "u8", 8 * vlen, mw)

    ops: list[OpSpec] = []
    buffers: dict[str, int] = {"send": nbytes, "acc": nbytes}

    def add(kind: str, **kw) -> int:
        oid = len(ops)
        ops.append(OpSpec(oid, kind, **kw))
        return oid

    n0 = add(K_NOP, entry=True, label="N0")

    partial = cfg.flavor in (SOLO, MAJORITY) and p > 1
    if partial:
        # Union of p binomial trees: the initiator's entry NOP fires sends to
        # rank+2^k for every k; a rank activated through its distance-2^j recv
        # forwards only the shorter hops k < j.  Duplicate arrivals from
        # overlapping trees land on consumed ops and are dropped.
        m = ceil_log2(p)
        recvs = [add(K_RECV, phase=PHASE_ACT, step=k, label=f"Ra{k}") for k in range(m)]
        for k in range(m):
            deps = (n0,) + tuple(recvs[j] for j in range(k + 1, m))
            add(K_SEND, logic="or", deps=deps, peer=(rank + (1 << k)) % p,
                phase=PHASE_ACT, step=k, send_buf=None, label=f"Aa{k}")
        gate = add(K_NOP, logic="or", deps=(n0, *recvs), label="N1")
    else:
        gate = n0

    snap_sum = add(K_COMPUTE, deps=(gate,), fn="sum", dst=dv("acc"), src=dv("send"),
                   label="snap_sum")
    snap_or = add(K_COMPUTE, deps=(snap_sum,), fn="bor", dst=mv("acc"), src=mv("send"),
                  label="snap_or")

    p2 = floor_pow2(p)
    m2 = p2.bit_length() - 1
    if rank >= p2:
        # fold into the base partner, then wait for the finished result
        buffers["land_final"] = nbytes
        fold = add(K_SEND, deps=(snap_or,), peer=rank - p2, phase=PHASE_RED,
                   step=_fold_step(m2), send_buf="acc", label="fold_send")
        fin = add(K_RECV, phase=PHASE_RED, step=_final_step(m2),
                  recv_buf="land_final", label="final_recv")
        add(K_NOP, deps=(fold, fin), publish=True, label="done")
        publish_from = "land_final"
    else:
        prev = snap_or
        has_extra = rank + p2 < p
        if has_extra:
            buffers["land_fold"] = nbytes
            rf = add(K_RECV, phase=PHASE_RED, step=_fold_step(m2),
                     recv_buf="land_fold", label="fold_recv")
            fs = add(K_COMPUTE, deps=(rf, prev), fn="sum", dst=dv("acc"),
                     src=dv("land_fold"), label="fold_sum")
            prev = add(K_COMPUTE, deps=(fs,), fn="bor", dst=mv("acc"),
                       src=mv("land_fold"), label="fold_or")
        for k in range(m2):
            peer = rank ^ (1 << k)
            buffers[f"land{k}"] = nbytes
            sk = add(K_SEND, deps=(prev,), peer=peer, phase=PHASE_RED, step=k,
                     send_buf="acc", label=f"bf_send{k}")
            rk = add(K_RECV, phase=PHASE_RED, step=k, recv_buf=f"land{k}",
                     label=f"bf_recv{k}")
            ck = add(K_COMPUTE, deps=(rk, sk), fn="sum", dst=dv("acc"),
                     src=dv(f"land{k}"), label=f"bf_sum{k}")
            prev = add(K_COMPUTE, deps=(ck,), fn="bor", dst=mv("acc"),
                       src=mv(f"land{k}"), label=f"bf_or{k}")
        if has_extra:
            fin = add(K_SEND, deps=(prev,), peer=rank + p2, phase=PHASE_RED,
                      step=_final_step(m2), send_buf="acc", label="final_send")
            add(K_NOP, deps=(prev, fin), publish=True, label="done")
        else:
            add(K_NOP, deps=(prev,), publish=True, label="done")
        publish_from = "acc"

    return ScheduleTemplate(
        ops=ops, buffers=buffers, entry_id=n0, publish_from=publish_from,
        snapshot_last=snap_or, snapshot_src="send", persistent=True,
        require_activation=True, preserve=("send",),
    )


def mask_words_to_int(words: np.ndarray) -> int:
    return int.from_bytes(words.tobytes(), "little")


class AllreduceHandle:
    """Per-rank handle on a persistent allreduce schedule.

    The application drives rounds in order: try_contribute(t, vec) offers a
    value (refused once round t's snapshot has consumed the buffer), then
    activate(t) starts the round per the flavor's rule, then wait_done(t)
    (a generator step) parks until round >= t has published.  The engine
    itself runs passively under transport deliveries, so the schedule serves
    rounds this rank never actively joins.
    """

    def __init__(self, cfg: CollectiveConfig, rank: int, transport, cid: int = 0,
                 recorder: TraceRecorder | None = None):
        self.cfg = cfg
        self.rank = rank
        self.transport = transport
        self.cid = cid
        self.recorder = recorder
        self.user_snapshot_cb = None      # callable(rnd, data_vec, fresh)
        self.contributed_round = -1
        self._last: CollectiveResult | None = None
        self._waiters: list[tuple[int, int, object]] = []
        self._cv = threading.Condition()
        tpl = build_allreduce_template(rank, cfg)
        self.engine = Engine(tpl, rank, cid, transport.send, transport.now_us,
                             recorder=recorder, on_snapshot=self._snap_cb,
                             on_done=self._done_cb)
        transport.register_engine(rank, self.engine)
        self.engine.commit()

    # -- engine callbacks ---------------------------------------------------

    def _parse_payload(self, raw: np.ndarray) -> tuple[np.ndarray, int]:
        vlen = self.cfg.vector_len
        data = raw[:8 * vlen].view(_ELEMENTS[self.cfg.element])
        mask = mask_words_to_int(raw[8 * vlen:].view(np.uint64))
        return data, mask

    def _snap_cb(self, rnd: int, taken: np.ndarray) -> None:
        data, mask = self._parse_payload(taken)
        fresh = bool((mask >> self.rank) & 1)
        if self.recorder is not None:
            self.recorder.snapshot(SnapshotRecord(
                self.rank, rnd, data.copy(), fresh, self.transport.now_us()))
        if self.user_snapshot_cb is not None:
            self.user_snapshot_cb(rnd, data, fresh)

    def _done_cb(self, rnd: int) -> None:
        data, mask = self._parse_payload(self.engine.recv_buffer)
        if self.cfg.element == "f8":
            u = data / self.cfg.p
        else:
            u = data // self.cfg.p
        res = CollectiveResult(u=u.copy(), included=mask, nap=mask.bit_count(), rnd=rnd)
        self._last = res
        if self.recorder is not None:
            init = (initiator_for_round(self.cfg.seed, rnd, self.cfg.p)
                    if self.cfg.flavor == MAJORITY else -1)
            self.recorder.round_done(RoundRecord(
                self.rank, rnd, res.u, res.included, res.nap,
                self.cfg.flavor, init, self.transport.now_us()))
        if self._waiters:
            ready = [w for w in self._waiters if w[0] <= rnd]
            self._waiters = [w for w in self._waiters if w[0] > rnd]
            for _, wrank, cb in ready:
                cb(wrank, self.latest_result())
        with self._cv:
            self._cv.notify_all()

    # -- app protocol -------------------------------------------------------

    @property
    def done_generation(self) -> int:
        return self.engine.done_generation

    def latest_result(self) -> tuple[int, CollectiveResult]:
        return self.engine.done_generation, self._last

    def add_waiter(self, generation: int, rank: int, cb) -> None:
        self._waiters.append((generation, rank, cb))

    def round_done(self, t: int) -> bool:
        return self.engine.done_generation >= t

    def try_contribute(self, t: int, vec: np.ndarray, fresh: bool = True) -> bool:
        """Offer this rank's value for round t.  False once the round's
        snapshot has already consumed the buffer (the value missed the bus)."""
        eng = self.engine
        with eng.lock:
            if eng.done_generation >= t:
                return False
            assert eng.generation == t, "application rounds must be driven in order"
            if eng.consumed[eng.template.snapshot_last]:
                return False
            buf = eng.buffer("send")
            data = buf[:8 * self.cfg.vector_len].view(_ELEMENTS[self.cfg.element])
            np.copyto(data, vec)
            if fresh:
                mask = buf[8 * self.cfg.vector_len:].view(np.uint64)
                mask[self.rank // 64] |= np.uint64(1 << (self.rank % 64))
            self.contributed_round = t
        eng.pump()
        return True

    def activate(self, t: int) -> None:
        """Start round t per the flavor's rule.  solo/sync: always; majority:
        only the round's designated initiator activates internally."""
        if (self.cfg.flavor == MAJORITY
                and self.rank != initiator_for_round(self.cfg.seed, t, self.cfg.p)):
            return
        self.engine.activate_internal(expected_generation=t)

    def wait_done(self, t: int):
        """Generator step: parks until some round >= t has published, then
        returns (generation, CollectiveResult) for the latest round."""
        if self.engine.done_generation >= t:
            return self.latest_result()
        value = yield WaitRound(self, t)
        return value

    def wait_blocking(self, t: int, timeout: float = 30.0):
        with self._cv:
            ok = self._cv.wait_for(lambda: self.engine.done_generation >= t, timeout)
        if not ok:
            raise TimeoutError(f"rank {self.rank} round {t} did not complete")
        return self.latest_result()

    def call_round(self, t: int, vec: np.ndarray):
        """One full bench round: contribute if the bus is still here, start
        the round, wait for the result.  Returns this round's result (or the
        latest one, if the schedule has already moved past t)."""
        t0 = self.transport.now_us()
        if not self.round_done(t):
            self.try_contribute(t, vec)
            self.activate(t)
        gen, res = yield from self.wait_done(t)
        if self.recorder is not None:
            self.recorder.latency(LatencyRecord(self.rank, t, t0, self.transport.now_us()))
        return res


def run_allreduce(cfg: CollectiveConfig, contributions, *, rounds: int = 1,
                  delay_us=None, link_latency_us: int = 0,
                  recorder: TraceRecorder | None = None):
    """Run `rounds` allreduce rounds over a fresh simulated transport.

    contributions: array (p, vector_len), or callable (rank, t) -> vector.
    delay_us: optional callable (rank, t) -> microseconds slept before the
    rank joins round t.

    Returns (results, handles, sim) where results[(rank, t)] is the
    CollectiveResult the application observed for its round t call.
    """
    sim = SimTransport(cfg.p, link_latency_us=link_latency_us)
    handles = [AllreduceHandle(cfg, r, sim, cid=0, recorder=recorder)
               for r in range(cfg.p)]
    results: dict[tuple[int, int], CollectiveResult] = {}

    def contribution(rank: int, t: int) -> np.ndarray:
        if callable(contributions):
            return np.asarray(contributions(rank, t))
        return np.asarray(contributions[rank])

    def body(rank: int):
        for t in range(rounds):
            if delay_us is not None:
                d = delay_us(rank, t)
                if d:
                    yield Sleep(int(d))
            res = yield from handles[rank].call_round(t, contribution(rank, t))
            results[(rank, t)] = res

    for r in range(cfg.p):
        sim.spawn(r, body(r))
    sim.run()
    return results, handles, sim


def tree_order_sum(vectors: list[np.ndarray]) -> np.ndarray:
    """Reference reduction: the exact combination order the butterfly uses.

    Extras fold into base leaves first, then aligned blocks combine pairwise.
    Serves as the oracle for bit-exact safety checks.
    """
    p = len(vectors)
    if p == 0:
        raise ValueError("no vectors")
    p2 = floor_pow2(p)
    leaves = []
    for b in range(p2):
        v = np.array(vectors[b], dtype=np.asarray(vectors[b]).dtype, copy=True)
        if b + p2 < p:
            v = v + np.asarray(vectors[b + p2])
        leaves.append(v)
    while len(leaves) > 1:
        leaves = [leaves[i] + leaves[i + 1] for i in range(0, len(leaves), 2)]
    return leaves[0]
