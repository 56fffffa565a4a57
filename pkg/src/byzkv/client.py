"""Client side of all variants: write/read orchestration, proxy failover
across f+1 proxies, acknowledgment verification, fetch-more-acks, blacklist
retries and client-side resolve with verified write-back."""

from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import CryptoService, EntityId
from .membership import MembershipView
from .messages import (ANSWER_DATA, ANSWER_EMPTY, ANSWER_IRRELEVANT,
                       FetchMoreAcks, ProxyReadReply, ProxyWriteReply,
                       ReadAnswer, ReadReq, WriteAck, WriteBackReq, WriteReq,
                       ack_signed_payload, answer_signed_payload)
from .node import MAC_FULL, MAC_HALF, VariantConfig, hybrid_payload, \
    resolve_rows
from .placement import QuorumSpec, Ring
from .storage import (VersionedCell, cell_signed_payload, make_cell,
                      make_tombstone, row_digest)

SUCCESS = "success"
FAILURE = "failure"
TIMEOUT = "timeout"


@dataclass
class OperationOutcome:
    status: str
    kind: str  # write | read | delete
    key: bytes
    value: tuple[VersionedCell, ...] | None = None
    evidence: dict = field(default_factory=dict)
    proxies_contacted: int = 0
    fetch_rounds: int = 0
    proxy_requests: int = 0
    started_us: int = 0
    finished_us: int = 0
    client: EntityId = None
    error: str = ""

    def latency_us(self) -> int:
        return self.finished_us - self.started_us


class _Op:
    __slots__ = ("kind", "key", "cells", "envelope", "done_cb", "proxy_order",
                 "proxies_tried", "current_proxy", "req_id", "fetch_rounds",
                 "total_fetch_rounds", "valid_acks", "bad_nodes", "client_ts",
                 "blacklist", "read_rounds", "started_us", "wb_need",
                 "wb_resolved", "wb_stale", "wb_value", "wb_updated",
                 "evidence_answers", "requests")

    def __init__(self, kind, key, done_cb):
        self.kind = kind
        self.key = key
        self.cells = ()
        self.envelope = None
        self.done_cb = done_cb
        self.proxy_order = []
        self.proxies_tried = []
        self.current_proxy = None
        self.req_id = 0
        self.fetch_rounds = 0  # this proxy
        self.total_fetch_rounds = 0
        self.valid_acks = {}
        self.bad_nodes = set()
        self.client_ts = 0
        self.blacklist = set()
        self.read_rounds = 0  # this proxy
        self.started_us = 0
        self.wb_need = 0
        self.wb_resolved = ()
        self.wb_stale = set()
        self.wb_value = None
        self.wb_updated = set()
        self.evidence_answers = ()
        self.requests = 0


class ClientProcess:
    def __init__(self, entity: EntityId, crypto: CryptoService,
                 variant: VariantConfig, qspec: QuorumSpec, ring: Ring,
                 view: MembershipView, client_timeout_us: int = 1_000_000,
                 columns: tuple[str, ...] = ("field0",)):
        self.entity = entity
        self.crypto = crypto
        self.variant = variant
        self.qspec = qspec
        self.ring = ring
        self.view = view
        self.client_timeout_us = client_timeout_us
        self.columns = columns
        self.rt = None
        self._last_ts = 0
        self._req_counter = 0
        self._ops: dict[int, _Op] = {}
        self._rr = 0  # round-robin proxy cursor (baseline)
        self.pin_order: list[EntityId] | None = None  # test harness hook
        self.trace_evidence = False
        self.outcomes: list[OperationOutcome] = []

    # -- plumbing -----------------------------------------------------------

    def on_start(self) -> None:
        pass

    def _next_req(self) -> int:
        self._req_counter += 1
        return ((0x10000 + self.entity.index) << 40) | self._req_counter

    def next_timestamp(self) -> int:
        """Strictly monotone per client, even under clock regression."""
        ts = max(self.rt.local_clock_us(), self._last_ts + 1)
        self._last_ts = ts
        return ts

    def _proxy_order(self) -> list[EntityId]:
        nodes = self.view.node_ids()
        if self.pin_order is not None:
            return list(self.pin_order) + [n for n in nodes
                                           if n not in self.pin_order]
        if self.variant.baseline:
            order = nodes[self._rr % len(nodes):] + nodes[:self._rr % len(nodes)]
            self._rr += 1
            return order
        order = list(nodes)
        self.rt.rng.shuffle(order)
        return order

    # -- public operation API ---------------------------------------------------

    def _cell_signer(self):
        if self.variant.baseline:
            from .crypto import EMPTY_SIG
            return lambda payload: EMPTY_SIG
        return lambda payload: self.crypto.pk_sign(self.entity, payload)

    def start_write(self, key: bytes, values: dict[str, bytes], done_cb) -> None:
        op = _Op("write", key, done_cb)
        ts = self.next_timestamp()
        sign = self._cell_signer()
        cells = tuple(make_cell(key, col, values[col], ts, self.entity, sign)
                      for col in sorted(values))
        op.cells = cells
        self._prepare_envelope(op)
        self._start_op(op)

    def start_delete(self, key: bytes, column: str, done_cb) -> None:
        op = _Op("delete", key, done_cb)
        ts = self.next_timestamp()
        sign = self._cell_signer()
        op.cells = (make_tombstone(key, column, ts, self.entity, sign),)
        self._prepare_envelope(op)
        self._start_op(op)

    def start_read(self, key: bytes, done_cb) -> None:
        op = _Op("read", key, done_cb)
        op.client_ts = self.next_timestamp()
        self._start_op(op)

    def _prepare_envelope(self, op: _Op) -> None:
        if self.variant.mac_usage == MAC_FULL and not self.variant.baseline:
            replicas = self.ring.replication_set(op.key)
            op.envelope = self.crypto.build_hybrid(
                self.entity, replicas, hybrid_payload(op.key, op.cells),
                pk_sig=op.cells[0].client_sig)

    def _start_op(self, op: _Op) -> None:
        op.proxy_order = self._proxy_order()
        op.started_us = self.rt.now()
        self._next_proxy(op)

    # -- proxy attempts ---------------------------------------------------------

    def _next_proxy(self, op: _Op) -> None:
        if len(op.proxies_tried) > self.qspec.f:
            self._finish(op, FAILURE, error="proxies-exhausted")
            return
        candidates = [p for p in op.proxy_order if p not in op.proxies_tried]
        if not candidates:
            self._finish(op, FAILURE, error="proxies-exhausted")
            return
        op.current_proxy = candidates[0]
        op.proxies_tried.append(op.current_proxy)
        op.fetch_rounds = 0
        op.read_rounds = 0
        # a bad signature cannot attribute blame between proxy and node, so
        # suspicion gathered through one proxy does not carry to the next
        op.bad_nodes = set()
        op.blacklist = set()
        self._send_attempt(op)

    def _send_attempt(self, op: _Op) -> None:
        op.req_id = self._next_req()
        self._ops[op.req_id] = op
        if op.kind in ("write", "delete"):
            msg = WriteReq(op.req_id, self.entity, self.view.epoch, key=op.key,
                           cells=op.cells, client=self.entity,
                           envelope=op.envelope)
        elif op.kind == "wb":
            still_stale = op.wb_stale - op.wb_updated
            replicas = self.ring.replication_set(op.key)
            skip = tuple(n for n in replicas if n not in still_stale)
            msg = WriteBackReq(op.req_id, self.entity, self.view.epoch,
                               key=op.key, cells=op.wb_resolved,
                               client=self.entity, client_ts=op.client_ts,
                               skip_nodes=skip,
                               updated_count=len(op.wb_updated))
        else:
            msg = ReadReq(op.req_id, self.entity, self.view.epoch, key=op.key,
                          client_ts=op.client_ts, client=self.entity)
        op.requests += 1
        self.rt.send(op.current_proxy, msg)
        self.rt.set_timer(self.client_timeout_us, ("op", op.req_id))

    def handle_timer(self, tag) -> None:
        if tag[0] == "op":
            op = self._ops.pop(tag[1], None)
            if op is not None:
                self._next_proxy(op)
        elif tag[0] == "driver":
            self._driver_cb(tag)

    def _driver_cb(self, tag) -> None:  # overridden by the workload driver
        pass

    def handle_message(self, src: EntityId, msg) -> None:
        op = self._ops.get(msg.req_id)
        if op is None or src != op.current_proxy:
            return
        del self._ops[msg.req_id]
        if msg.type_tag == "PROXY_WRITE_REPLY":
            if op.kind in ("write", "delete"):
                self._on_write_reply(op, msg)
            elif op.kind == "wb":
                self._on_wb_reply(op, msg)
        elif msg.type_tag == "PROXY_READ_REPLY":
            self._on_read_reply(op, msg)

    # -- write path ----------------------------------------------------------------

    def _verify_ack(self, op: _Op, ack: WriteAck, cells,
                    write_back: bool = False) -> bool:
        if ack.node is None or not ack.ok or ack.write_back != write_back:
            return False
        if ack.node not in self.ring.replication_set(op.key):
            return False
        payload = ack_signed_payload(cells, write_back)
        if self.variant.mac_usage in (MAC_HALF, MAC_FULL):
            if ack.mac is None:
                return False
            return self.crypto.mac_verify(self.entity, ack.node, self.entity,
                                          payload, ack.mac)
        if ack.sig is None:
            return False
        return self.crypto.pk_verify(self.entity, ack.node, payload, ack.sig)

    def _on_write_reply(self, op: _Op, reply: ProxyWriteReply) -> None:
        if self.variant.baseline:
            if reply.ok:
                self._finish(op, SUCCESS)
            else:
                self._next_proxy(op)
            return
        new_valid = 0
        for ack in reply.acks:
            if ack.node in op.valid_acks:
                continue
            if self._verify_ack(op, ack, op.cells):
                op.valid_acks[ack.node] = ack
                new_valid += 1
            else:
                op.bad_nodes.add(ack.node)
                self.rt.alert("bad-write-ack", node=str(ack.node),
                              proxy=str(op.current_proxy))
        self._write_progress(op, new_valid)

    def _write_progress(self, op: _Op, new_valid: int) -> None:
        w = self.qspec.w
        if len(op.valid_acks) >= w:
            self._finish(op, SUCCESS)
            return
        if (not self.variant.proxy_verifies
                and len(op.valid_acks) >= self.qspec.f + 1
                and op.fetch_rounds < self.qspec.f):
            op.fetch_rounds += 1
            op.total_fetch_rounds += 1
            orig_req = op.req_id
            op.req_id = self._next_req()
            self._ops[op.req_id] = op
            exclude = tuple(sorted(op.valid_acks, key=lambda e: e.index)) + \
                tuple(sorted(op.bad_nodes, key=lambda e: e.index))
            op.requests += 1
            self.rt.send(op.current_proxy,
                         FetchMoreAcks(op.req_id, self.entity, self.view.epoch,
                                       orig_req_id=orig_req,
                                       need=w - len(op.valid_acks),
                                       exclude=exclude))
            self.rt.set_timer(self.client_timeout_us, ("op", op.req_id))
            return
        self._next_proxy(op)

    # -- read path ------------------------------------------------------------------

    def _verify_answer(self, op: _Op, ans: ReadAnswer) -> bool:
        if ans.node is None or ans.node not in self.ring.replication_set(op.key):
            return False
        payload = answer_signed_payload(op.key, ans.row_digest, ans.row_meta,
                                        op.client_ts, ans.kind)
        if self.variant.mac_usage in (MAC_HALF, MAC_FULL):
            if ans.mac is None:
                return False
            ok = self.crypto.mac_verify(self.entity, ans.node, self.entity,
                                        payload, ans.mac)
        else:
            ok = ans.sig is not None and self.crypto.pk_verify(
                self.entity, ans.node, payload, ans.sig)
        if not ok:
            return False
        if ans.kind == ANSWER_DATA:
            if row_digest(op.key, {c.column: c for c in ans.row}) != ans.row_digest:
                return False
            meta = {m.column: m for m in ans.row_meta}
            for cell in ans.row:
                m = meta.get(cell.column)
                if m is None or m.client_sig.data != cell.client_sig.data \
                        or m.timestamp != cell.timestamp or m.client != cell.client:
                    return False
        return True

    def _validate_answers(self, op: _Op, answers) -> tuple[dict, set]:
        """Returns ({node: answer} verified and relevant, bad-signer set)."""
        valid: dict[EntityId, ReadAnswer] = {}
        bad: set[EntityId] = set()
        for ans in answers:
            if ans.node in valid:
                continue
            if self.variant.baseline:
                if ans.kind in (ANSWER_DATA, ANSWER_EMPTY):
                    valid[ans.node] = ans
                continue
            if self._verify_answer(op, ans):
                if ans.kind == ANSWER_IRRELEVANT:
                    # correctly signed but never counts toward the quorum
                    self.rt.alert("irrelevant-answer", node=str(ans.node),
                                  proxy=str(op.current_proxy))
                    continue
                valid[ans.node] = ans
            else:
                bad.add(ans.node)
                self.rt.alert("bad-answer", node=str(ans.node),
                              proxy=str(op.current_proxy))
        return valid, bad

    def _on_read_reply(self, op: _Op, reply: ProxyReadReply) -> None:
        if reply.kind == "fail":
            self._next_proxy(op)
            return
        if self.variant.baseline:
            if reply.kind == "value":
                data = [a for a in reply.answers if a.kind == ANSWER_DATA]
                row = data[0].row if data else ()
                self._finish(op, SUCCESS, value=row,
                             evidence={"answers": reply.answers})
            elif reply.kind == "bundle":
                self._finish(op, SUCCESS, value=reply.resolved,
                             evidence={"answers": reply.answers,
                                       "resolved": reply.resolved})
            else:
                self._next_proxy(op)
            return
        valid, bad = self._validate_answers(op, reply.answers)
        r = self.qspec.r
        if reply.kind == "value":
            if len(valid) >= r:
                digests = {a.row_digest for a in valid.values()}
                data = [a for a in valid.values() if a.kind == ANSWER_DATA]
                if len(digests) == 1:
                    row = data[0].row if data else ()
                    self._finish(op, SUCCESS, value=row,
                                 evidence={"answers": tuple(valid.values())})
                    return
            self._read_retry(op, bad)
            return
        if reply.kind == "bundle":
            if self._check_bundle(op, reply, valid):
                self._finish(op, SUCCESS, value=reply.resolved,
                             evidence={"answers": tuple(valid.values()),
                                       "resolved": reply.resolved,
                                       "wb_acks": reply.wb_acks})
            else:
                self._read_retry(op, bad)
            return
        if reply.kind == "versions":
            self._on_versions(op, reply, valid, bad)
            return
        self._read_retry(op, bad)

    def _check_bundle(self, op: _Op, reply: ProxyReadReply, valid: dict) -> bool:
        """A resolve observed via write-back is verified with the original
        answers: the client recomputes it and demands R verified-updated nodes."""
        if len(valid) < self.qspec.r or not reply.resolved:
            return False
        rows = [a.row for a in valid.values()]
        naive = resolve_rows(op.key, rows)
        if tuple(naive) != tuple(reply.resolved):
            strict = resolve_rows(
                op.key, rows,
                verify_cell=lambda c: self.crypto.pk_verify(
                    self.entity, c.client, cell_signed_payload(op.key, c),
                    c.client_sig))
            if tuple(strict) != tuple(reply.resolved):
                self.rt.alert("resolve-mismatch", proxy=str(op.current_proxy))
                return False
        resolved_digest = row_digest(op.key,
                                     {c.column: c for c in reply.resolved})
        updated = {n for n, a in valid.items() if a.row_digest == resolved_digest}
        for ack in reply.wb_acks:
            if ack.node in updated:
                continue
            if self._verify_ack(op, ack, reply.resolved, write_back=True):
                updated.add(ack.node)
            else:
                self.rt.alert("bad-wb-ack", node=str(ack.node))
        return len(updated) >= self.qspec.r

    def _on_versions(self, op: _Op, reply: ProxyReadReply, valid: dict,
                     bad: set) -> None:
        r = self.qspec.r
        if len(valid) < r:
            self._read_retry(op, bad)
            return
        answers = list(valid.values())[:r]
        digests = {a.row_digest for a in answers}
        if len(digests) == 1:
            data = [a for a in answers if a.kind == ANSWER_DATA]
            row = data[0].row if data else ()
            self._finish(op, SUCCESS, value=row,
                         evidence={"answers": tuple(answers)})
            return
        rejected = []
        resolved = resolve_rows(
            op.key, [a.row for a in answers],
            verify_cell=lambda c: self.crypto.pk_verify(
                self.entity, c.client, cell_signed_payload(op.key, c),
                c.client_sig),
            on_reject=lambda c: rejected.append(c))
        for cell in rejected:
            self.rt.alert("client-resolve-unverifiable-cell", column=cell.column)
        if not resolved:
            self._read_retry(op, bad)
            return
        resolved_digest = row_digest(op.key, {c.column: c for c in resolved})
        updated = {n for n, a in valid.items() if a.row_digest == resolved_digest}
        stale = {n for n in valid if n not in updated}
        # write-back through one proxy write that skips already-updated nodes
        wb = _Op("wb", op.key, None)
        wb.client_ts = op.client_ts
        wb.wb_resolved = resolved
        wb.wb_stale = stale
        wb.wb_need = max(0, self.qspec.r - len(updated))
        wb.wb_value = resolved
        wb.wb_updated = updated
        wb.evidence_answers = tuple(answers)
        wb.started_us = op.started_us
        wb.requests = op.requests  # the write-back continues the same read
        wb.done_cb = op.done_cb
        wb.proxy_order = [op.current_proxy] + [p for p in op.proxy_order
                                               if p != op.current_proxy]
        self._next_proxy(wb)

    def _on_wb_reply(self, op: _Op, reply: ProxyWriteReply) -> None:
        new_acks = []
        for ack in reply.acks:
            if ack.node in op.wb_updated:
                continue
            if self._verify_ack(op, ack, op.wb_resolved, write_back=True):
                op.wb_updated.add(ack.node)
                new_acks.append(ack)
            else:
                self.rt.alert("bad-wb-ack", node=str(ack.node))
        op.valid_acks.update({a.node: a for a in new_acks})
        if len(op.wb_updated) >= self.qspec.r:
            self._finish(op, SUCCESS, value=op.wb_value,
                         evidence={"answers": op.evidence_answers,
                                   "resolved": op.wb_resolved,
                                   "wb_acks": tuple(op.valid_acks.values())})
            return
        self._next_proxy(op)

    def _read_retry(self, op: _Op, bad: set) -> None:
        """Fig. read-flow-v2: re-request a full read from R nodes outside the
        grown bad-signer blacklist, at most f rounds per proxy."""
        grew = bool(bad - op.blacklist)
        op.blacklist |= bad
        if (not self.variant.proxy_verifies and not self.variant.baseline
                and grew and op.read_rounds < self.qspec.f):
            op.read_rounds += 1
            op.req_id = self._next_req()
            self._ops[op.req_id] = op
            op.requests += 1
            self.rt.send(op.current_proxy,
                         ReadReq(op.req_id, self.entity, self.view.epoch,
                                 key=op.key, client_ts=op.client_ts,
                                 client=self.entity, full_data=True,
                                 blacklist=tuple(sorted(op.blacklist,
                                                        key=lambda e: e.index))))
            self.rt.set_timer(self.client_timeout_us, ("op", op.req_id))
            return
        self._next_proxy(op)

    # -- completion --------------------------------------------------------------

    def _finish(self, op: _Op, status: str, value=None, evidence=None,
                error: str = "") -> None:
        kind = {"wb": "read", "delete": "delete"}.get(op.kind, op.kind)
        outcome = OperationOutcome(
            status=status, kind=kind, key=op.key, value=value,
            evidence=evidence if evidence is not None else {},
            proxies_contacted=len(op.proxies_tried),
            fetch_rounds=op.total_fetch_rounds, proxy_requests=op.requests,
            started_us=op.started_us, finished_us=self.rt.now(),
            client=self.entity, error=error)
        if op.kind in ("write", "delete") and status == SUCCESS:
            outcome.evidence.setdefault("cells", op.cells)
            outcome.evidence.setdefault("acks", tuple(op.valid_acks.values()))
        if op.kind in ("write", "delete"):
            outcome.value = op.cells
        outcome.evidence.setdefault("client_ts", op.client_ts)
        # bounded attempts: at most f+1 proxies, at most f fetch rounds each
        assert len(op.proxies_tried) <= self.qspec.f + 1
        assert op.fetch_rounds <= self.qspec.f
        self.outcomes.append(outcome)
        self.rt.trace("OP_DONE", req=op.req_id, kind=kind, status=status,
                      key=op.key, proxies=len(op.proxies_tried))
        if self.trace_evidence and status == SUCCESS:
            from .wirefmt import encode_outcome
            self.rt.trace("EVIDENCE", req=op.req_id, blob=encode_outcome(outcome))
        if op.done_cb is not None:
            op.done_cb(outcome)
