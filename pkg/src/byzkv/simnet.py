"""Deterministic discrete-event simulation core.

Virtual clock with per-entity skew, exactly-once message delivery with seeded
latencies, node lifecycle (crash/restart), optional service-time modelling of
handler and crypto work, and the hook point for Byzantine behavior scripts.
Same seed, same event sequence.
"""

from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass

from .crypto import EntityId
from .trace import TraceLog

EV_DELIVER = 0
EV_TIMER = 1
EV_LIFECYCLE = 2
EV_CALL = 3


@dataclass
class LinkModel:
    """Per ordered-pair latency model. Delivery between correct entities is
    exactly-once and uncorrupted; Byzantine entities cheat at the behavior
    layer, never at the transport."""

    intra_lo_us: int = 1_000
    intra_hi_us: int = 5_000
    client_lo_us: int = 5_000
    client_hi_us: int = 15_000
    fixed: bool = False  # deterministic per-pair latency (cost scenarios)

    def sample(self, src: EntityId, dst: EntityId, rng: random.Random) -> int:
        cluster = src.kind == "node" and dst.kind == "node"
        lo, hi = (self.intra_lo_us, self.intra_hi_us) if cluster else \
                 (self.client_lo_us, self.client_hi_us)
        if self.fixed:
            # spread latencies by destination index so "fastest replica"
            # selection is reproducible in planted scenarios
            span = max(hi - lo, 1)
            return lo + (dst.index * 37 + src.index * 11) % span
        return rng.randint(lo, hi)


class Runtime:
    """Per-process facade over the simulator."""

    def __init__(self, sim: "Simulator", entity: EntityId):
        self.sim = sim
        self.entity = entity
        self.rng = random.Random(sim.derive_seed("rt", str(entity)))

    def now(self) -> int:
        return self.sim.now

    def local_clock_us(self) -> int:
        return self.sim.now + self.sim.skew_us.get(self.entity, 0)

    def send(self, dst: EntityId, msg) -> None:
        self.sim._buffer_send(self.entity, dst, msg)

    def set_timer(self, delay_us: int, tag) -> None:
        self.sim._schedule(EV_TIMER, delay_us, (self.entity, tag))

    def trace(self, ev: str, **detail) -> None:
        self.sim.trace.record(self.sim.now, ev, src=str(self.entity), **detail)

    def alert(self, reason: str, **detail) -> None:
        self.sim.trace.record(self.sim.now, "ALERT", src=str(self.entity),
                              reason=reason, **detail)


class Simulator:
    def __init__(self, seed: int, link: LinkModel | None = None,
                 trace: TraceLog | None = None, service_model: bool = False,
                 base_node_us: int = 20, base_client_us: int = 10):
        self.seed = seed
        self.now = 0
        self._heap: list = []
        self._seq = 0
        self.link = link if link is not None else LinkModel()
        self.trace = trace if trace is not None else TraceLog()
        self.service_model = service_model
        self.base_node_us = base_node_us
        self.base_client_us = base_client_us
        self._procs: dict[EntityId, object] = {}
        self._up: dict[EntityId, bool] = {}
        self._busy_until: dict[EntityId, int] = {}
        self._behaviors: dict[EntityId, object] = {}
        self.skew_us: dict[EntityId, int] = {}
        self._link_rng = random.Random(self.derive_seed("link"))
        self._out_buffer: list | None = None
        self._running_entity: EntityId | None = None
        self._crypto_work_us = 0
        self._stop = False
        self.delivered_msgs = 0
        self.dropped_msgs = 0

    # -- setup ---------------------------------------------------------------

    def derive_seed(self, *labels) -> int:
        h = hashlib.sha256(str(self.seed).encode())
        for lab in labels:
            h.update(b"|" + str(lab).encode())
        return int.from_bytes(h.digest()[:8], "big")

    def add_process(self, entity: EntityId, proc, skew_us: int = 0) -> Runtime:
        rt = Runtime(self, entity)
        self._procs[entity] = proc
        self._up[entity] = True
        self._busy_until[entity] = 0
        self.skew_us[entity] = skew_us
        return rt

    def set_behavior(self, entity: EntityId, behavior) -> None:
        self._behaviors[entity] = behavior

    def behavior_of(self, entity: EntityId):
        return self._behaviors.get(entity)

    def is_up(self, entity: EntityId) -> bool:
        return self._up.get(entity, False)

    # -- scheduling ------------------------------------------------------------

    def _schedule(self, kind: int, delay_us: int, payload, seq: int | None = None) -> None:
        if seq is None:
            seq = self._seq
            self._seq += 1
        heapq.heappush(self._heap, (self.now + delay_us, seq, kind, payload))

    def call_at(self, at_us: int, fn, *args) -> None:
        self._schedule(EV_CALL, max(0, at_us - self.now), (fn, args))

    def call_in(self, delay_us: int, fn, *args) -> None:
        self._schedule(EV_CALL, delay_us, (fn, args))

    def schedule_crash(self, entity: EntityId, at_us: int,
                       restart_at_us: int | None = None) -> None:
        self.call_at(at_us, self._do_crash, entity)
        if restart_at_us is not None:
            self.call_at(restart_at_us, self._do_restart, entity)

    def _do_crash(self, entity: EntityId) -> None:
        self._up[entity] = False
        self.trace.record(self.now, "NODE_DOWN", src=str(entity))

    def _do_restart(self, entity: EntityId) -> None:
        self._up[entity] = True
        self.trace.record(self.now, "NODE_UP", src=str(entity))
        proc = self._procs.get(entity)
        if proc is not None and hasattr(proc, "on_restart"):
            self._run_handler(entity, lambda: proc.on_restart())

    def request_stop(self) -> None:
        self._stop = True

    # -- sending --------------------------------------------------------------

    def _buffer_send(self, src: EntityId, dst: EntityId, msg) -> None:
        if self._out_buffer is not None and src == self._running_entity:
            self._out_buffer.append((dst, msg))
        else:
            self._dispatch_sends(src, [(dst, msg)], transformed=False)

    def _dispatch_sends(self, src: EntityId, outs: list, transformed: bool) -> None:
        depart = self.now
        if self.service_model:
            depart = max(depart, self._busy_until.get(src, 0))
        for item in outs:
            dst, msg = item[0], item[1]
            extra = item[2] if len(item) > 2 else 0  # behavior-injected stall
            latency = self.link.sample(src, dst, self._link_rng)
            self._schedule(EV_DELIVER, depart - self.now + latency + extra,
                           (src, dst, msg, transformed))
            if self.trace.verbose:
                self.trace.record(self.now, "MSG_SEND", src=str(src), dst=str(dst),
                                  req=getattr(msg, "req_id", -1),
                                  mtype=getattr(msg, "type_tag", "?"))

    # -- handler execution ------------------------------------------------------

    def on_crypto_delay(self, entity: EntityId, micros: int) -> None:
        if self.service_model and entity == self._running_entity:
            self._crypto_work_us += micros

    def _run_handler(self, entity: EntityId, fn) -> None:
        proc = self._procs.get(entity)
        self._out_buffer = []
        self._running_entity = entity
        self._crypto_work_us = 0
        fn()
        outs = self._out_buffer
        self._out_buffer = None
        self._running_entity = None
        transformed = False
        behavior = self._behaviors.get(entity)
        if behavior is not None:
            new_outs = behavior.transform_outgoing(proc, outs, self)
            transformed = new_outs is not outs
            outs = new_outs
        if self.service_model:
            base = self.base_node_us if entity.kind == "node" else self.base_client_us
            start = max(self.now, self._busy_until.get(entity, 0))
            self._busy_until[entity] = start + base + self._crypto_work_us
        if outs:
            self._dispatch_sends(entity, outs, transformed)

    # -- the loop ----------------------------------------------------------------

    def run(self, until_us: int | None = None) -> None:
        self._stop = False
        while self._heap and not self._stop:
            t, seq, kind, payload = self._heap[0]
            if until_us is not None and t > until_us:
                break
            heapq.heappop(self._heap)
            self.now = t
            if kind == EV_DELIVER:
                src, dst, msg, transformed = payload
                if not self._up.get(dst, False):
                    self.dropped_msgs += 1
                    if self.trace.verbose:
                        self.trace.record(t, "MSG_DROP", src=str(src), dst=str(dst),
                                          req=getattr(msg, "req_id", -1))
                    continue
                if self.service_model:
                    busy = self._busy_until.get(dst, 0)
                    if busy > t:
                        self._schedule(EV_DELIVER, busy - t, payload, seq=seq)
                        continue
                self.delivered_msgs += 1
                if self.trace.verbose:
                    self.trace.record(t, "MSG_RECV", src=str(src), dst=str(dst),
                                      req=getattr(msg, "req_id", -1),
                                      mtype=getattr(msg, "type_tag", "?"),
                                      xform=int(transformed))
                proc = self._procs[dst]
                behavior = self._behaviors.get(dst)

                def _handle(proc=proc, behavior=behavior, src=src, msg=msg):
                    if behavior is not None and \
                            behavior.intercept_incoming(proc, src, msg, self):
                        return
                    proc.handle_message(src, msg)

                self._run_handler(dst, _handle)
            elif kind == EV_TIMER:
                entity, tag = payload
                if not self._up.get(entity, False):
                    continue
                if self.service_model:
                    busy = self._busy_until.get(entity, 0)
                    if busy > t:
                        self._schedule(EV_TIMER, busy - t, payload, seq=seq)
                        continue
                proc = self._procs[entity]
                self._run_handler(entity, lambda: proc.handle_timer(tag))
            elif kind == EV_CALL:
                fn, args = payload
                fn(*args)
        if until_us is not None and self.now < until_us and not self._stop:
            self.now = until_us
