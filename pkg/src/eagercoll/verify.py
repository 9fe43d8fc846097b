"""Trace checkers: collective contracts, drift tracking, interleaving search.

Everything here is an offline, pure function of a recorded trace (plus the
delivery ledger the trainer fills in).  The checkers report structured
violations instead of raising, so a run can be audited wholesale; the test
suite validates each violation class by fault injection.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .collectives import (
    CollectiveConfig, SOLO, build_allreduce_template, tree_order_sum,
)
from .schedule import Engine
from .trace import TraceRecorder
from .transport import Message


class IncompleteTrace(ValueError):
    pass


class StateSpaceTooLarge(RuntimeError):
    pass


@dataclass
class Violation:
    kind: str            # liveness | mismatch | subset-sum | nap | staleness | double-delivery | time-travel
    rnd: int
    rank: int | None
    detail: str


# ---------------------------------------------------------------------------
# delivery ledger


class DeliveryLedger:
    """Per-gradient bookkeeping: when was each (rank, round) gradient folded
    into a completed collective sum.  Delivered at most once, ever."""

    def __init__(self):
        self._delivered: dict[tuple[int, int], int | None] = {}
        self._order: list[tuple[int, int]] = []
        self._early_violations: list[Violation] = []

    def generated(self, rank: int, rnd: int) -> None:
        key = (rank, rnd)
        if key in self._delivered:
            self._early_violations.append(
                Violation("double-generation", rnd, rank, "gradient generated twice"))
            return
        self._delivered[key] = None
        self._order.append(key)

    def delivered(self, rank: int, generated_round: int, delivered_round: int) -> None:
        key = (rank, generated_round)
        if key not in self._delivered:
            self._early_violations.append(
                Violation("unknown-gradient", delivered_round, rank,
                          f"delivery for never-generated round {generated_round}"))
            return
        if self._delivered[key] is not None:
            self._early_violations.append(
                Violation("double-delivery", delivered_round, rank,
                          f"gradient of round {generated_round} delivered twice"))
            return
        self._delivered[key] = delivered_round

    def entries(self) -> list[tuple[int, int, int | None]]:
        return [(r, g, self._delivered[(r, g)]) for r, g in self._order]

    def staleness_of(self, rank: int, rnd: int) -> int | None:
        d = self._delivered.get((rank, rnd))
        return None if d is None else d - rnd

    def max_staleness(self) -> int:
        ages = [d - g for (_, g), d in self._delivered.items() if d is not None]
        return max(ages, default=0)

    def audit(self, tau: int | None = None,
              allow_pending_after: int | None = None) -> list[Violation]:
        """Check the exactly-once and bounded-staleness contracts.

        allow_pending_after: gradients generated strictly after this round may
        still be pending without it counting as a loss (the run simply ended
        before a round could take them).
        """
        out = list(self._early_violations)
        for (rank, g), d in self._delivered.items():
            if d is None:
                if allow_pending_after is None or g <= allow_pending_after:
                    out.append(Violation("undelivered", g, rank,
                                         "gradient never delivered"))
                continue
            if d < g:
                out.append(Violation("time-travel", g, rank,
                                     f"delivered at {d} before generated at {g}"))
            elif tau is not None and d - g > tau:
                out.append(Violation("staleness", g, rank,
                                     f"age {d - g} exceeds tau={tau}"))
        return out


# ---------------------------------------------------------------------------
# collective contract checker


@dataclass
class RoundContractReport:
    violations: list[Violation]
    rounds_checked: int
    p: int

    @property
    def ok(self) -> bool:
        return not self.violations

    def by_kind(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for v in self.violations:
            out[v.kind] = out.get(v.kind, 0) + 1
        return out


def check_round_contracts(recorder: TraceRecorder, p: int, *, tau: int | None = None,
                 ledger: DeliveryLedger | None = None,
                 expect_rounds: int | None = None,
                 allow_pending_after: int | None = None,
                 rel_tol: float = 1e-12) -> RoundContractReport:
    """Audit a completed run against the partial-collective contracts:

    1. every rank returned a result for every round (liveness);
    2. all ranks' (u, included) for a round are bit-identical;
    3. u*p equals the sum of exactly the contributions the mask flags,
       bit-exact in the reduction-tree order and within rel_tol of a serial
       recomputation;
    4. at least one fresh contribution per round;
    5. with a ledger and tau: delivery ages within bound, exactly-once.
    """
    vs: list[Violation] = []
    by_round: dict[int, list] = {}
    for r in recorder.rounds:
        by_round.setdefault(r.rnd, []).append(r)
    snaps = {(s.rank, s.rnd): s for s in recorder.snapshots}
    n_rounds = expect_rounds if expect_rounds is not None else (
        max(by_round) + 1 if by_round else 0)

    for rnd in range(n_rounds):
        rows = by_round.get(rnd, [])
        present = {r.rank for r in rows}
        for rank in range(p):
            if rank not in present:
                vs.append(Violation("liveness", rnd, rank, "no result returned"))
        if not rows:
            continue
        ref = rows[0]
        for r in rows[1:]:
            if r.included != ref.included or r.u.tobytes() != ref.u.tobytes():
                vs.append(Violation("mismatch", rnd, r.rank,
                                    "result differs from rank %d's" % ref.rank))
        # reconstruct the reduction from the consumed contributions
        vec = None
        contributions, mask_expected, missing = [], 0, False
        for rank in range(p):
            s = snaps.get((rank, rnd))
            if s is None:
                vs.append(Violation("liveness", rnd, rank, "no snapshot recorded"))
                missing = True
                continue
            contributions.append(s.data)
            if s.fresh:
                mask_expected |= 1 << rank
            if vec is None:
                vec = np.zeros_like(s.data)
        if missing:
            continue
        if ref.included != mask_expected:
            vs.append(Violation("subset-sum", rnd, None,
                                f"mask {ref.included:#x} != consumed-fresh set {mask_expected:#x}"))
        tree = tree_order_sum(contributions)
        expected_u = tree / p if tree.dtype.kind == "f" else tree // p
        if expected_u.tobytes() != ref.u.tobytes():
            vs.append(Violation("subset-sum", rnd, None,
                                "u does not equal the tree-ordered contribution sum / p"))
        serial = np.sum(np.stack(contributions), axis=0)
        err = np.abs(ref.u * p - serial)
        tol = rel_tol * np.maximum(np.abs(serial), 1e-300)
        if np.any(err > np.maximum(tol, rel_tol)):
            vs.append(Violation("subset-sum", rnd, None,
                                "u*p deviates from the serial contribution sum"))
        if ref.nap < 1:
            vs.append(Violation("nap", rnd, None, "round completed with no fresh data"))
        if ref.nap != ref.included.bit_count():
            vs.append(Violation("nap", rnd, None, "nap is not popcount(included)"))

    if ledger is not None:
        vs.extend(ledger.audit(tau, allow_pending_after=allow_pending_after))
    return RoundContractReport(vs, n_rounds, p)


# ---------------------------------------------------------------------------
# fault injection (used to validate the checker itself)


def tamper_result(recorder: TraceRecorder, rank: int, rnd: int,
                  delta: float = 1.0) -> None:
    for r in recorder.rounds:
        if r.rank == rank and r.rnd == rnd:
            r.u = r.u + delta
            return
    raise KeyError((rank, rnd))


def tamper_mask(recorder: TraceRecorder, rank: int, rnd: int, bit: int) -> None:
    for r in recorder.rounds:
        if r.rank == rank and r.rnd == rnd:
            r.included ^= 1 << bit
            r.nap = r.included.bit_count()
            return
    raise KeyError((rank, rnd))


def drop_round(recorder: TraceRecorder, rank: int, rnd: int) -> None:
    recorder.rounds = [r for r in recorder.rounds
                       if not (r.rank == rank and r.rnd == rnd)]


# ---------------------------------------------------------------------------
# shadow iterate


@dataclass
class ShadowIterate:
    lam: np.ndarray


@dataclass
class ShadowReport:
    drift: list[float]          # per-round mean over ranks of ||lam - w||^2
    max_drift: float
    bound: float
    m2_hat: float
    q_hat: int
    slack: float

    @property
    def ok(self) -> bool:
        return self.max_drift <= self.bound * (1 + self.slack) + 1e-300


def track_shadow(recorder: TraceRecorder, alpha: float, p: int, tau: int,
                 rounds: int | None = None, slack: float = 0.5) -> ShadowReport:
    """Replay the all-gradients-applied reference trajectory and measure how
    far each rank's actual parameter view drifted from it.

    The bound uses the empirically measured second moment and the worst
    observed quorum, with a configurable slack on top.
    """
    if rounds is None:
        if not recorder.weights:
            raise IncompleteTrace("no weight records")
        rounds = max(t for _, t in recorder.weights) + 1
    for i in range(p):
        for t in range(rounds):
            if (i, t) not in recorder.gradients or (i, t) not in recorder.weights:
                raise IncompleteTrace(f"missing gradient/weight for rank {i} round {t}")
    w0s = [recorder.weights[(i, 0)] for i in range(p)]
    for w in w0s[1:]:
        if w.tobytes() != w0s[0].tobytes():
            raise IncompleteTrace("ranks started from different parameters")
    lam = w0s[0].copy()
    drift: list[float] = []
    # Empirical stand-in for the second-moment constant: the worst observed
    # gradient (a mean would under-cover the early rounds, where both the
    # gradients and the drift peak).
    m2 = 0.0
    for t in range(rounds):
        d = float(np.mean([np.sum((lam - recorder.weights[(i, t)]) ** 2)
                           for i in range(p)]))
        drift.append(d)
        total = np.zeros_like(lam)
        for i in range(p):
            g = recorder.gradients[(i, t)]
            total += g
            m2 = max(m2, float(np.sum(g * g)))
        lam = lam - (alpha / p) * total
    naps = [r.nap for r in recorder.rounds if r.rnd < rounds]
    q_hat = min(naps) if naps else 0
    bound = alpha * alpha * tau * m2 * (p - q_hat) / (p * p)
    return ShadowReport(drift, max(drift), bound, m2, q_hat, slack)


# ---------------------------------------------------------------------------
# exhaustive interleaving exploration


@dataclass
class InterleavingCase:
    p: int
    arrival_order: tuple
    delivery_order: tuple


@dataclass
class InterleavingReport:
    states: int
    terminals: int
    unique_results: int
    violations: list[str]
    sample_cases: list[InterleavingCase] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        # Single execution, liveness, cross-rank agreement and mask soundness
        # hold in every order.  The result VALUE may differ across orders
        # when arrivals race the snapshot (that is what a partial collective
        # is); callers using arrivals_first additionally assert
        # unique_results == 1.
        return not self.violations and self.terminals > 0


def explore_interleavings(cfg: CollectiveConfig | None = None, *,
                          contributions=None, arrive_ranks=None,
                          arrivals_first: bool = False,
                          max_states: int = 250_000,
                          sample_limit: int = 5) -> InterleavingReport:
    """Enumerate every reachable event order of one collective round.

    Events are rank arrivals (contribute-if-not-snapshotted + activate
    internally, exactly the application protocol) and per-stream message
    deliveries; streams keep FIFO order, everything else interleaves freely.
    States are deduplicated on full engine + network state, so the search is
    exhaustive over distinct executions.  Checks per terminal state: the
    round completed at every rank exactly once (the engine faults on any
    double firing), all ranks hold identical result bytes, and the result
    equals the tree-ordered sum of exactly the contributions its mask flags.

    arrivals_first performs all arrivals before exploring, which restricts
    the enumeration to message delivery orders; in that regime the final
    buffer must also be identical in every order.
    """
    if cfg is None:
        cfg = CollectiveConfig(p=2, flavor=SOLO, vector_len=2)
    p = cfg.p
    if contributions is None:
        contributions = [np.arange(1, cfg.vector_len + 1, dtype=np.float64) * (r + 1)
                         for r in range(p)]
    if arrive_ranks is None:
        arrive_ranks = tuple(range(p))

    streams: dict[tuple, deque] = {}

    def send_fn(msg: Message) -> None:
        key = (msg.src, msg.dst, msg.tag.phase, msg.tag.step)
        streams.setdefault(key, deque()).append(msg)

    engines: list[Engine] = []
    mailboxes: list[list] = [[] for _ in range(p)]
    for r in range(p):
        tpl = build_allreduce_template(r, cfg)
        tpl.persistent = False  # single round; terminal state is generation 0 done
        eng = Engine(tpl, r, 0, send_fn, lambda: 0)
        eng.mailbox = mailboxes[r]
        eng.commit()
        engines.append(eng)

    el = np.float64 if cfg.element == "f8" else np.int64

    def contribute(rank: int) -> None:
        eng = engines[rank]
        if eng.consumed[eng.template.snapshot_last]:
            return  # too late: the round already took this rank's (null) slot
        buf = eng.buffer("send")
        data = buf[:8 * cfg.vector_len].view(el)
        np.copyto(data, contributions[rank])
        mask = buf[8 * cfg.vector_len:].view(np.uint64)
        mask[rank // 64] |= np.uint64(1 << (rank % 64))

    def snapshot():
        engs = tuple(
            (bytes(e.consumed), e.generation, e.done_generation,
             tuple((k, v.tobytes()) for k, v in sorted(e._buf.items())),
             e.recv_buffer.tobytes())
            for e in engines)
        net = tuple(sorted(
            (k, tuple((m.tag, m.payload) for m in q)) for k, q in streams.items() if q))
        boxes = tuple(tuple((m.src, m.dst, m.tag, m.payload) for m in box)
                      for box in mailboxes)
        return (engs, net, boxes, frozenset(pending_arrivals))

    def restore(s) -> None:
        engs, net, boxes, arrivals = s
        for e, (consumed, gen, done, bufs, recv) in zip(engines, engs):
            e.consumed = bytearray(consumed)
            e.fire_count = [1 if c else 0 for c in consumed]
            e.generation = gen
            e.done_generation = done
            for name, raw in bufs:
                e._buf[name][:] = np.frombuffer(raw, dtype=np.uint8)
            e.recv_buffer[:] = np.frombuffer(recv, dtype=np.uint8)
        streams.clear()
        for k, msgs in net:
            streams[k] = deque(Message(k[0], k[1], t, pl) for t, pl in msgs)
        for box, saved in zip(mailboxes, boxes):
            box.clear()
            box.extend(Message(src, dst, t, pl) for src, dst, t, pl in saved)
        pending_arrivals.clear()
        pending_arrivals.update(arrivals)

    pending_arrivals: set[int] = set(arrive_ranks)
    if arrivals_first:
        for r in sorted(pending_arrivals):
            contribute(r)
            engines[r].activate_internal(expected_generation=0)
        pending_arrivals.clear()

    def choices():
        out = [("arrive", r) for r in sorted(pending_arrivals)]
        out += [("deliver", k) for k in sorted(streams) if streams[k]]
        return out

    def apply(action) -> None:
        kind, x = action
        if kind == "arrive":
            pending_arrivals.discard(x)
            contribute(x)
            engines[x].activate_internal(expected_generation=0)
        else:
            msg = streams[x].popleft()
            mailboxes[msg.dst].append(msg)
            engines[msg.dst].pump()

    seen: set = set()
    results: set = set()
    violations: list[str] = []
    samples: list[InterleavingCase] = []
    terminals = 0
    root = snapshot()
    stack = [(root, ())]
    while stack:
        s, path = stack.pop()
        if s in seen:
            continue
        seen.add(s)
        if len(seen) > max_states:
            raise StateSpaceTooLarge(f"exceeded {max_states} states")
        restore(s)
        ch = choices()
        if not ch:
            terminals += 1
            done = [e.done_generation == 0 and e.generation == 0 for e in engines]
            if not all(done):
                violations.append(f"terminal state with incomplete round: {done} via {path}")
            res = tuple(e.recv_buffer.tobytes() for e in engines)
            if len(set(res)) != 1:
                violations.append(f"ranks disagree at terminal via {path}")
            results.add(res[0])
            raw = engines[0].recv_buffer
            data = raw[:8 * cfg.vector_len].view(el)
            mask = int.from_bytes(raw[8 * cfg.vector_len:].tobytes(), "little")
            vecs = [contributions[r] if (mask >> r) & 1
                    else np.zeros_like(contributions[r]) for r in range(p)]
            if tree_order_sum(vecs).tobytes() != data.tobytes():
                violations.append(f"terminal sum does not match its mask via {path}")
            if len(samples) < sample_limit:
                arr = tuple(a for a in path if a[0] == "arrive")
                dlv = tuple(a for a in path if a[0] == "deliver")
                samples.append(InterleavingCase(p, arr, dlv))
            continue
        for c in ch:
            restore(s)
            apply(c)
            stack.append((snapshot(), path + (c,)))
    return InterleavingReport(len(seen), terminals, len(results), violations, samples)
