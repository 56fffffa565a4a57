"""Server side: replica handlers and proxy coordination for every variant.

A node plays two roles. As a replica it stores client-signed cells, answers
read/digest queries, applies write-backs and runs anti-entropy. As a proxy it
coordinates client operations against the replication set: collect W acks
(verified or not, per variant), two-phase reads with the digest optimization,
escalation to full reads on mismatch or timeout, conflict resolve and
write-back, and fetch-more-acks service for the no-verify variants.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from . import membership as mb
from .crypto import CryptoService, EntityId
from .messages import (ANSWER_DATA, ANSWER_DIGEST, ANSWER_EMPTY,
                       ANSWER_IRRELEVANT, AeFetchMsg, AeTreeMsg,
                       FetchMoreAcks, GossipMsg, ProxyReadReply,
                       ProxyWriteReply, ReadAnswer, ReadReq, WriteAck,
                       WriteBackReq, WriteReq, ack_signed_payload,
                       answer_signed_payload, meta_of)
from .placement import RING_SIZE, QuorumSpec, Ring, Token, key_position
from .storage import (ACCEPTED, EMPTY_ROW_DIGEST, NodeStore, VersionedCell,
                      anti_entropy_apply, build_merkle, cell_signed_payload,
                      diff_leaves, keys_in_leaves, row_digest)

RESOLVER_PROXY = "proxy"
RESOLVER_CLIENT = "client"

MAC_NONE = "none"
MAC_HALF = "half"
MAC_FULL = "full"


@dataclass(frozen=True)
class VariantConfig:
    proxy_verifies: bool = True
    resolver: str = RESOLVER_PROXY
    mac_usage: str = MAC_NONE
    mode: str = "strong"
    baseline: bool = False
    phase1_quorum_only: bool = True  # contact the fastest quorum, not all N
    deterministic_targets: bool = False

    def __post_init__(self):
        if self.baseline:
            assert self.mac_usage == MAC_NONE and not self.proxy_verifies
        if self.resolver == RESOLVER_CLIENT:
            assert not self.proxy_verifies
        if self.mac_usage != MAC_NONE:
            assert not self.proxy_verifies


@dataclass
class NodeTimers:
    gossip_period_us: int = mb.GOSSIP_PERIOD_US
    ae_period_us: int = 10_000_000
    gc_period_us: int = 0  # 0: never
    proxy_timeout_us: int = 500_000
    liveness_timeout_us: int = mb.DEFAULT_LIVENESS_TIMEOUT_US
    # after a quorum is reached, how long to keep collecting straggler
    # answers/acks so resolve targeting sees every responsive replica
    straggler_grace_us: int = 25_000


def resolve_rows(key: bytes, answer_rows: list, verify_cell=None,
                 on_reject=None) -> tuple[VersionedCell, ...]:
    """Column-wise max over the answers' cells, ignoring unverifiable ones.

    ``verify_cell(cell) -> bool`` is consulted lazily: per column, candidates
    are walked newest-first until one verifies, so a benign run costs exactly
    one verification per column.
    """
    by_col: dict[str, list[VersionedCell]] = {}
    for row in answer_rows:
        for cell in row:
            by_col.setdefault(cell.column, []).append(cell)
    resolved = []
    for col in sorted(by_col):
        seen = set()
        candidates = []
        for cell in by_col[col]:
            tag = (cell.order_key(), cell.client,
                   cell.client_sig.data if cell.client_sig else b"")
            if tag not in seen:
                seen.add(tag)
                candidates.append(cell)
        candidates.sort(key=VersionedCell.order_key, reverse=True)
        for cell in candidates:
            if verify_cell is None or verify_cell(cell):
                resolved.append(cell)
                break
            if on_reject is not None:
                on_reject(cell)
    return tuple(resolved)


class _WriteCoord:
    __slots__ = ("req_id", "origin", "client", "key", "cells", "envelope",
                 "replicas", "acks", "valid", "bad", "returned", "done",
                 "fetch_origin", "fetch_req", "fetch_need", "fetch_exclude",
                 "is_wb", "wb_known_updated")

    def __init__(self, req_id, origin, client, key, cells, envelope, replicas):
        self.req_id = req_id
        self.origin = origin
        self.client = client
        self.key = key
        self.cells = cells
        self.envelope = envelope
        self.replicas = replicas
        self.acks: dict[EntityId, WriteAck] = {}
        self.valid: list[WriteAck] = []
        self.bad: set[EntityId] = set()
        self.returned: set[EntityId] = set()
        self.done = False
        self.fetch_origin = None
        self.fetch_req = None
        self.fetch_need = 0
        self.fetch_exclude: set[EntityId] = set()
        self.is_wb = False
        self.wb_known_updated = ()


class _ReadCoord:
    __slots__ = ("req_id", "origin", "client", "key", "client_ts", "relevant",
                 "targets", "data_endpoint", "phase", "answers", "verified",
                 "phase2_data", "p2_verified", "resolved", "wb_acks",
                 "updated_verified", "done", "full_data", "blacklist",
                 "quorum_answers", "p2_targets", "p2_grace_armed", "wb_targets",
                 "wb_grace_armed")

    def __init__(self, req_id, origin, client, key, client_ts, relevant):
        self.req_id = req_id
        self.origin = origin
        self.client = client
        self.key = key
        self.client_ts = client_ts
        self.relevant = relevant
        self.targets: list[EntityId] = []
        self.data_endpoint: EntityId | None = None
        self.phase = 1
        self.answers: dict[EntityId, ReadAnswer] = {}
        self.verified: set[EntityId] = set()  # phase-1 answers that verified
        self.phase2_data: dict[EntityId, ReadAnswer] = {}
        self.p2_verified: set[EntityId] = set()  # phase-2 data answers verified
        self.resolved = None
        self.wb_acks: list[WriteAck] = []
        self.updated_verified: set[EntityId] = set()
        self.done = False
        self.full_data = False
        self.blacklist: tuple[EntityId, ...] = ()
        self.quorum_answers: list[ReadAnswer] = []
        self.p2_targets: set[EntityId] = set()
        self.p2_grace_armed = False
        self.wb_targets: set[EntityId] = set()
        self.wb_grace_armed = False


class ProtocolNode:
    def __init__(self, entity: EntityId, crypto: CryptoService, store: NodeStore,
                 variant: VariantConfig, qspec: QuorumSpec,
                 timers: NodeTimers | None = None, seeds: list[EntityId] = (),
                 view: mb.MembershipView | None = None,
                 merkle_depth: int = 15):
        self.entity = entity
        self.crypto = crypto
        self.store = store
        self.variant = variant
        self.qspec = qspec
        self.timers = timers if timers is not None else NodeTimers()
        self.seeds = list(seeds)
        self.view = view
        self.ring: Ring | None = None
        self.merkle_depth = merkle_depth
        self.rt = None  # wired by the simulator/runner
        self.generation = 0
        self.hb_version = 0
        self._req_counter = 0
        self._wcoords: dict[int, _WriteCoord] = {}
        self._rcoords: dict[int, _ReadCoord] = {}
        self._ae_sessions: dict[int, dict] = {}
        self._probes: dict[int, dict] = {}
        self._peer_failures: dict[EntityId, int] = {}
        self._boot_replies: dict[EntityId, tuple] = {}
        self._ae_round = 0
        if view is not None:
            self._rebuild_ring()

    # -- plumbing ---------------------------------------------------------------

    def _next_req(self) -> int:
        self._req_counter += 1
        return (self.entity.index << 40) | self._req_counter

    def _epoch(self) -> int:
        return self.view.epoch if self.view is not None else 0

    def _rebuild_ring(self) -> None:
        tokens = []
        for rec in self.view.records.values():
            for v, pos in enumerate(rec.tokens):
                tokens.append(Token(pos, rec.node, v))
        if tokens and len({t.owner for t in tokens}) >= self.qspec.n:
            self.ring = Ring(tokens, self.qspec.n)

    def owns_key(self, key: bytes) -> bool:
        return self.entity in self.ring.replication_set(key)

    # -- lifecycle ---------------------------------------------------------------

    def on_start(self) -> None:
        if self.view is None and self.seeds:
            boot = GossipMsg(self._next_req(), self.entity, 0, want_full=True)
            for seed in self.seeds:
                if seed != self.entity:
                    self.rt.send(seed, boot)
        self._arm_timers()

    def on_restart(self) -> None:
        self.generation += 1
        self.hb_version = 0
        self._arm_timers()
        self._start_anti_entropy()

    def _arm_timers(self) -> None:
        stagger = (self.entity.index + 1) * 1000
        if self.timers.gossip_period_us:
            self.rt.set_timer(self.timers.gossip_period_us + stagger, ("gossip",))
        if self.timers.ae_period_us:
            self.rt.set_timer(self.timers.ae_period_us + stagger, ("ae",))
        if self.timers.gc_period_us:
            self.rt.set_timer(self.timers.gc_period_us + stagger, ("gc",))

    # -- dispatch -------------------------------------------------------------------

    def handle_message(self, src: EntityId, msg) -> None:
        tag = msg.type_tag
        if tag == "WRITE_REQ":
            if msg.to_replica:
                self._on_replica_write(src, msg)
            else:
                self._proxy_write_start(src, msg)
        elif tag == "WRITE_ACK":
            self._on_ack(src, msg)
        elif tag == "READ_REQ":
            if msg.to_replica:
                self._on_replica_read(src, msg)
            else:
                self._proxy_read_start(src, msg)
        elif tag == "READ_ANS":
            self._on_answer(src, msg)
        elif tag == "WRITE_BACK":
            if msg.to_replica:
                self._on_replica_write_back(src, msg)
            else:
                self._proxy_write_back_start(src, msg)
        elif tag == "FETCH_MORE_ACKS":
            self._on_fetch_more(src, msg)
        elif tag == "AE_TREE":
            self._on_ae_tree(src, msg)
        elif tag == "AE_FETCH":
            self._on_ae_fetch(src, msg)
        elif tag == "GOSSIP":
            self._on_gossip(src, msg)

    def handle_timer(self, tag) -> None:
        kind = tag[0]
        if kind == "gossip":
            self._gossip_tick()
        elif kind == "ae":
            self._start_anti_entropy()
            self.rt.set_timer(self.timers.ae_period_us, ("ae",))
        elif kind == "gc":
            removed = self.store.gc(self.rt.local_clock_us())
            if removed:
                self.rt.trace("GC", removed=removed)
            self.rt.set_timer(self.timers.gc_period_us, ("gc",))
        elif kind == "wc":
            self._write_coord_timeout(tag[1])
        elif kind == "rc":
            self._read_coord_timeout(tag[1], tag[2])
        elif kind == "fetch":
            self._fetch_timeout(tag[1])
        elif kind == "probe":
            self._probe_timeout(tag[1])

    # ===========================================================================
    # Replica role
    # ===========================================================================

    def _verify_cell(self, key: bytes, cell: VersionedCell) -> bool:
        return self.crypto.pk_verify(self.entity, cell.client,
                                     cell_signed_payload(key, cell), cell.client_sig)

    def _sign_ack(self, client: EntityId, cells, write_back: bool) -> WriteAck:
        payload = ack_signed_payload(cells, write_back)
        ack = WriteAck(0, self.entity, self._epoch(), node=self.entity,
                       write_back=write_back)
        if self.variant.baseline:
            return ack
        if self.variant.mac_usage in (MAC_HALF, MAC_FULL) and client.kind == "client":
            return replace(ack, mac=self.crypto.mac_sign(self.entity, client, payload))
        return replace(ack, sig=self.crypto.pk_sign(self.entity, payload))

    def _reject_ack(self, client: EntityId, cells, error: str,
                    write_back: bool = False) -> WriteAck:
        ack = WriteAck(0, self.entity, self._epoch(), node=self.entity, ok=False,
                       error=error, write_back=write_back)
        if self.variant.baseline:
            return ack
        payload = ack_signed_payload(cells, write_back) + error.encode()
        return replace(ack, sig=self.crypto.pk_sign(self.entity, payload))

    def _on_replica_write(self, src: EntityId, msg: WriteReq) -> None:
        now = self.rt.local_clock_us()
        if not self.variant.baseline:
            if not self.crypto.registry.is_authorized(msg.client):
                self.rt.alert("write-from-unauthorized-client", client=str(msg.client))
                self._send_ack(src, msg, self._reject_ack(msg.client, msg.cells, "acl"))
                return
            if not self.owns_key(msg.key):
                self.rt.alert("write-for-irrelevant-key", key=msg.key)
                self._send_ack(src, msg,
                               self._reject_ack(msg.client, msg.cells, "irrelevant"))
                return
            verified = False
            if self.variant.mac_usage == MAC_FULL and msg.envelope is not None:
                payload = hybrid_payload(msg.key, msg.cells)
                how = self.crypto.verify_hybrid_at_node(self.entity, msg.envelope,
                                                        payload)
                if how == "mac":
                    verified = True
                elif how == "mismatch":
                    self.rt.alert("hybrid-envelope-mismatch", client=str(msg.client))
                    self._send_ack(src, msg, self._reject_ack(msg.client, msg.cells,
                                                              "bad-signature"))
                    return
            if not verified:
                for cell in msg.cells:
                    if not self._verify_cell(msg.key, cell):
                        self.rt.alert("bad-client-signature", client=str(msg.client))
                        self._send_ack(src, msg,
                                       self._reject_ack(msg.client, msg.cells,
                                                        "bad-signature"))
                        return
        result = self.store.append(msg.key, list(msg.cells), now)
        if result != ACCEPTED:
            self._send_ack(src, msg, self._reject_ack(msg.client, msg.cells, result))
            return
        self._send_ack(src, msg, self._sign_ack(msg.client, msg.cells, False))

    def _send_ack(self, dst: EntityId, msg, ack: WriteAck) -> None:
        self.rt.send(dst, replace(ack, req_id=msg.req_id))

    def _on_replica_read(self, src: EntityId, msg: ReadReq) -> None:
        newest = self.store.read_newest(msg.key)
        if self.variant.baseline:
            row = tuple(newest[c] for c in sorted(newest))
            rd = self.store.newest_digest(msg.key) if newest else EMPTY_ROW_DIGEST
            kind = ANSWER_DIGEST if msg.digest_only else ANSWER_DATA
            self.rt.send(src, ReadAnswer(msg.req_id, self.entity, self._epoch(),
                                         node=self.entity, key=msg.key, kind=kind,
                                         row=row if not msg.digest_only else (),
                                         row_meta=tuple(meta_of(c) for c in row),
                                         row_digest=rd, client_ts=msg.client_ts))
            return
        if not self.owns_key(msg.key):
            self.rt.send(src, self._signed_answer(msg, ANSWER_IRRELEVANT, ()))
            return
        if not newest:
            self.rt.send(src, self._signed_answer(msg, ANSWER_EMPTY, ()))
            return
        row = tuple(newest[c] for c in sorted(newest))
        kind = ANSWER_DIGEST if msg.digest_only else ANSWER_DATA
        self.rt.send(src, self._signed_answer(msg, kind, row))

    def _signed_answer(self, msg: ReadReq, kind: str, row: tuple) -> ReadAnswer:
        rd = self.store.newest_digest(msg.key) if row else EMPTY_ROW_DIGEST
        meta = tuple(meta_of(c) for c in row)
        payload = answer_signed_payload(msg.key, rd, meta, msg.client_ts, kind)
        requester = msg.client
        sig = None
        mac = None
        if (self.variant.mac_usage in (MAC_HALF, MAC_FULL)
                and requester is not None and requester.kind == "client"):
            mac = self.crypto.mac_sign(self.entity, requester, payload)
        else:
            sig = self.crypto.pk_sign(self.entity, payload)
        return ReadAnswer(msg.req_id, self.entity, self._epoch(), node=self.entity,
                          key=msg.key, kind=kind,
                          row=row if kind == ANSWER_DATA else (),
                          row_meta=meta, row_digest=rd, client_ts=msg.client_ts,
                          sig=sig, mac=mac)

    def _on_replica_write_back(self, src: EntityId, msg: WriteBackReq) -> None:
        now = self.rt.local_clock_us()
        if not self.variant.baseline:
            for cell in msg.cells:
                if not self._verify_cell(msg.key, cell):
                    # a resolver may not launder forged cells
                    self.rt.alert("write-back-forged-cell", column=cell.column)
                    self._send_ack(src, msg,
                                   self._reject_ack(msg.client, msg.cells,
                                                    "bad-signature", write_back=True))
                    return
        result = self.store.append(msg.key, list(msg.cells), now)
        if result != ACCEPTED:
            self._send_ack(src, msg, self._reject_ack(msg.client, msg.cells, result,
                                                      write_back=True))
            return
        self._send_ack(src, msg, self._sign_ack(msg.client, msg.cells, True))

    # ===========================================================================
    # Proxy role: writes
    # ===========================================================================

    def _proxy_write_start(self, src: EntityId, msg: WriteReq) -> None:
        replicas = self.ring.replication_set(msg.key)
        coord = _WriteCoord(msg.req_id, src, msg.client, msg.key, msg.cells,
                            msg.envelope, replicas)
        self._wcoords[msg.req_id] = coord
        fwd = replace(msg, sender=self.entity, to_replica=True, epoch=self._epoch())
        for node in replicas:
            self.rt.send(node, fwd)
        self.rt.set_timer(self.timers.proxy_timeout_us, ("wc", msg.req_id))

    def _proxy_write_back_start(self, src: EntityId, msg: WriteBackReq) -> None:
        # client-resolve write-back: the client names every replica it does NOT
        # want targeted, so the proxy hits exactly the observed-stale nodes
        replicas = self.ring.replication_set(msg.key)
        skip = set(msg.skip_nodes)
        targets = [n for n in replicas if n not in skip]
        coord = _WriteCoord(msg.req_id, src, msg.client, msg.key, msg.cells,
                            None, targets)
        coord.is_wb = True
        coord.wb_known_updated = (msg.updated_count,)
        self._wcoords[msg.req_id] = coord
        if self._wanted_acks(coord) == 0 or not targets:
            self._write_coord_reply(coord, ok=True)
            return
        fwd = replace(msg, sender=self.entity, to_replica=True, epoch=self._epoch())
        for node in targets:
            self.rt.send(node, fwd)
        self.rt.set_timer(self.timers.proxy_timeout_us, ("wc", msg.req_id))

    def _wanted_acks(self, coord: _WriteCoord) -> int:
        if not coord.is_wb:
            return self.qspec.w
        updated = coord.wb_known_updated[0] if coord.wb_known_updated else 0
        return max(0, min(self.qspec.w - updated, len(coord.replicas)))

    def _on_ack(self, src: EntityId, ack: WriteAck) -> None:
        coord = self._wcoords.get(ack.req_id)
        if coord is not None:
            self._write_coord_ack(coord, ack)
            return
        rcoord = self._rcoords.get(ack.req_id)
        if rcoord is not None and ack.write_back:
            self._read_coord_wb_ack(rcoord, ack)

    def _ack_verifies(self, cells, ack: WriteAck) -> bool:
        payload = ack_signed_payload(cells, ack.write_back)
        return ack.sig is not None and self.crypto.pk_verify(
            self.entity, ack.node, payload, ack.sig)

    def _write_coord_ack(self, coord: _WriteCoord, ack: WriteAck) -> None:
        if ack.node in coord.acks:
            return
        coord.acks[ack.node] = ack
        if not coord.done:
            if self.variant.baseline:
                usable = ack.ok
            elif self.variant.proxy_verifies:
                usable = (ack.node in coord.replicas and ack.ok
                          and self._ack_verifies(coord.cells, ack))
                if not usable:
                    coord.bad.add(ack.node)
                    self.rt.alert("bad-ack-signature", node=str(ack.node),
                                  req=coord.req_id)
            else:
                usable = ack.ok and ack.node in coord.replicas
            if usable:
                coord.valid.append(ack)
            if len(coord.valid) >= self._wanted_acks(coord):
                self._write_coord_reply(coord, ok=True)
        elif coord.fetch_origin is not None:
            self._fetch_check(coord)

    def _write_coord_reply(self, coord: _WriteCoord, ok: bool) -> None:
        coord.done = True
        acks = tuple(coord.valid[:self._wanted_acks(coord)]) if ok \
            else tuple(coord.valid)
        coord.returned.update(a.node for a in acks)
        if self.variant.baseline:
            acks = ()
        self.rt.send(coord.origin, ProxyWriteReply(coord.req_id, self.entity,
                                                   self._epoch(), acks=acks, ok=ok))

    def _write_coord_timeout(self, req_id: int) -> None:
        coord = self._wcoords.get(req_id)
        if coord is None or coord.done:
            return
        for node in coord.replicas:
            if node not in coord.acks:
                self._peer_failures[node] = self._peer_failures.get(node, 0) + 1
        self.rt.trace("PROXY_WRITE_TIMEOUT", req=req_id)
        self._write_coord_reply(coord, ok=False)

    # fetch-more-acks (write flow v2)

    def _on_fetch_more(self, src: EntityId, msg: FetchMoreAcks) -> None:
        coord = self._wcoords.get(msg.orig_req_id)
        if coord is None:
            self.rt.send(src, ProxyWriteReply(msg.req_id, self.entity,
                                              self._epoch(), acks=(), ok=False))
            return
        coord.fetch_origin = src
        coord.fetch_req = msg.req_id
        coord.fetch_need = msg.need
        coord.fetch_exclude = set(msg.exclude) | coord.returned
        fwd = WriteReq(coord.req_id, self.entity, self._epoch(), key=coord.key,
                       cells=coord.cells, client=coord.client,
                       envelope=coord.envelope, to_replica=True)
        for node in coord.replicas:
            if node not in coord.acks and node not in coord.fetch_exclude:
                self.rt.send(node, fwd)
        self.rt.set_timer(self.timers.proxy_timeout_us, ("fetch", coord.req_id))
        self._fetch_check(coord)

    def _fetch_candidates(self, coord: _WriteCoord) -> list[WriteAck]:
        return [coord.acks[n] for n in coord.replicas
                if n in coord.acks and n not in coord.fetch_exclude
                and coord.acks[n].ok]

    def _fetch_check(self, coord: _WriteCoord) -> None:
        if coord.fetch_origin is None:
            return
        new = self._fetch_candidates(coord)
        if len(new) >= coord.fetch_need:
            self._fetch_reply(coord, new[:coord.fetch_need])

    def _fetch_timeout(self, req_id: int) -> None:
        coord = self._wcoords.get(req_id)
        if coord is None or coord.fetch_origin is None:
            return
        self._fetch_reply(coord, self._fetch_candidates(coord))

    def _fetch_reply(self, coord: _WriteCoord, acks: list[WriteAck]) -> None:
        reply = ProxyWriteReply(coord.fetch_req, self.entity, self._epoch(),
                                acks=tuple(acks), ok=bool(acks))
        coord.returned.update(a.node for a in acks)
        origin = coord.fetch_origin
        coord.fetch_origin = None
        self.rt.send(origin, reply)

    # ===========================================================================
    # Proxy role: reads
    # ===========================================================================

    def _select_targets(self, relevant: list[EntityId], count: int,
                        exclude: set[EntityId]) -> list[EntityId]:
        now = self.rt.now()
        scored = []
        for node in relevant:
            if node in exclude:
                continue
            suspected = 0
            if self.view is not None and node != self.entity:
                if self.view.liveness(node, now, self.timers.liveness_timeout_us) \
                        == mb.SUSPECTED:
                    suspected = 1
            # deterministic mode tracks the fixed link model, where latency
            # grows with the destination index
            prio = node.index if self.variant.deterministic_targets else \
                ((node.index * 2654435761 + self.entity.index * 40503) & 0xFFFF)
            scored.append(((self._peer_failures.get(node, 0), suspected, prio), node))
        scored.sort(key=lambda s: s[0])
        return [node for _, node in scored[:count]]

    def _proxy_read_start(self, src: EntityId, msg: ReadReq) -> None:
        relevant = self.ring.replication_set(msg.key)
        coord = _ReadCoord(msg.req_id, src, msg.client, msg.key, msg.client_ts,
                           relevant)
        self._rcoords[msg.req_id] = coord
        coord.blacklist = msg.blacklist
        if msg.full_data:
            # v2 retry: full read from R nodes outside the client's blacklist
            coord.full_data = True
            coord.phase = 2
            coord.targets = self._select_targets(relevant, self.qspec.r,
                                                 set(msg.blacklist))
            coord.p2_targets = set(coord.targets)
            fwd = ReadReq(msg.req_id, self.entity, self._epoch(), key=msg.key,
                          client_ts=msg.client_ts, client=msg.client,
                          digest_only=False, to_replica=True)
            for node in coord.targets:
                self.rt.send(node, fwd)
            self.rt.set_timer(self.timers.proxy_timeout_us, ("rc", msg.req_id, 2))
            return
        if self.variant.phase1_quorum_only:
            coord.targets = self._select_targets(relevant, self.qspec.r, set())
        else:
            coord.targets = list(relevant)
        coord.data_endpoint = coord.targets[0]
        for node in coord.targets:
            self.rt.send(node, ReadReq(msg.req_id, self.entity, self._epoch(),
                                       key=msg.key, client_ts=msg.client_ts,
                                       client=msg.client,
                                       digest_only=(node != coord.data_endpoint),
                                       to_replica=True))
        self.rt.set_timer(self.timers.proxy_timeout_us, ("rc", msg.req_id, 1))

    def _answer_verifies(self, coord: _ReadCoord, ans: ReadAnswer) -> bool:
        payload = answer_signed_payload(coord.key, ans.row_digest, ans.row_meta,
                                        coord.client_ts, ans.kind)
        return ans.sig is not None and self.crypto.pk_verify(
            self.entity, ans.node, payload, ans.sig)

    def _on_answer(self, src: EntityId, ans: ReadAnswer) -> None:
        probe = self._probes.get(ans.req_id)
        if probe is not None:
            self._on_probe_answer(probe, ans)
            return
        coord = self._rcoords.get(ans.req_id)
        if coord is None or coord.done:
            return
        if ans.node not in coord.relevant:
            return
        if ans.kind == ANSWER_IRRELEVANT:
            self.rt.alert("irrelevant-answer-from-replica", node=str(ans.node),
                          req=coord.req_id)
            return
        if coord.phase == 1:
            if ans.node in coord.answers:
                return
            coord.answers[ans.node] = ans
            if self.variant.proxy_verifies:
                if len(coord.verified) < self.qspec.r:
                    if self._answer_verifies(coord, ans):
                        coord.verified.add(ans.node)
                    else:
                        self.rt.alert("bad-answer-signature", node=str(ans.node),
                                      req=coord.req_id)
                        return
                else:
                    return
            self._phase1_evaluate(coord)
        else:
            if ans.kind not in (ANSWER_DATA, ANSWER_EMPTY):
                return
            if ans.node in coord.phase2_data:
                return
            coord.phase2_data[ans.node] = ans
            if self.variant.proxy_verifies and len(coord.p2_verified) < self.qspec.r:
                if self._answer_verifies(coord, ans):
                    coord.p2_verified.add(ans.node)
                else:
                    self.rt.alert("bad-answer-signature", node=str(ans.node),
                                  req=coord.req_id)
            self._p2_check(coord)

    def _p2_quorum(self, coord: _ReadCoord) -> list[ReadAnswer] | None:
        if self.variant.proxy_verifies:
            quorum = [coord.phase2_data[n] for n in coord.phase2_data
                      if n in coord.p2_verified]
        else:
            quorum = list(coord.phase2_data.values())
        return quorum[:self.qspec.r] if len(quorum) >= self.qspec.r else None

    def _p2_check(self, coord: _ReadCoord) -> None:
        quorum = self._p2_quorum(coord)
        if quorum is None:
            return
        if coord.p2_targets <= set(coord.phase2_data):
            self._phase2_complete(coord, quorum)
        elif not coord.p2_grace_armed:
            coord.p2_grace_armed = True
            self.rt.set_timer(self.timers.straggler_grace_us,
                              ("rc", coord.req_id, 4))

    def _counted_phase1(self, coord: _ReadCoord) -> list[ReadAnswer]:
        if self.variant.proxy_verifies:
            return [coord.answers[n] for n in coord.targets
                    if n in coord.answers and n in coord.verified]
        return [coord.answers[n] for n in coord.targets if n in coord.answers]

    def _phase1_evaluate(self, coord: _ReadCoord) -> None:
        counted = self._counted_phase1(coord)
        if len(counted) < self.qspec.r:
            return
        de_ans = coord.answers.get(coord.data_endpoint)
        digests = {a.row_digest for a in counted}
        if de_ans is not None and de_ans.kind in (ANSWER_DATA, ANSWER_EMPTY) \
                and len(digests) == 1:
            coord.done = True
            self.rt.send(coord.origin,
                         ProxyReadReply(coord.req_id, self.entity, self._epoch(),
                                        kind="value",
                                        answers=tuple(counted[:self.qspec.r]),
                                        key=coord.key))
            return
        self._enter_phase2(coord)

    def _enter_phase2(self, coord: _ReadCoord) -> None:
        coord.phase = 2
        de = coord.data_endpoint
        de_ans = coord.answers.get(de) if de is not None else None
        if de_ans is not None and de_ans.kind in (ANSWER_DATA, ANSWER_EMPTY):
            coord.phase2_data[de] = de_ans
            if not self.variant.proxy_verifies or de in coord.verified:
                coord.p2_verified.add(de)
        fwd = ReadReq(coord.req_id, self.entity, self._epoch(), key=coord.key,
                      client_ts=coord.client_ts, client=coord.client,
                      digest_only=False, to_replica=True)
        coord.p2_targets = set(coord.phase2_data)
        for node in coord.relevant:
            if node not in coord.phase2_data:
                coord.p2_targets.add(node)
                self.rt.send(node, fwd)
        self.rt.set_timer(self.timers.proxy_timeout_us, ("rc", coord.req_id, 2))

    def _read_coord_timeout(self, req_id: int, phase: int) -> None:
        coord = self._rcoords.get(req_id)
        if coord is None or coord.done:
            return
        if phase == 4:  # phase-2 straggler grace expired
            if coord.phase == 2:
                quorum = self._p2_quorum(coord)
                if quorum is not None:
                    self._phase2_complete(coord, quorum)
            return
        if phase == 5:  # write-back straggler grace expired
            if coord.phase == 3 and len(coord.updated_verified) >= self.qspec.r:
                self._read_bundle_reply(coord)
            return
        for node in (coord.targets or coord.relevant):
            if node not in coord.answers and node not in coord.phase2_data:
                self._peer_failures[node] = self._peer_failures.get(node, 0) + 1
        if phase == 1 and coord.phase == 1:
            if len(coord.targets) >= len(coord.relevant):
                self._read_fail(coord)
            else:
                self.rt.trace("READ_ESCALATE", req=req_id)
                self._enter_phase2(coord)
        elif phase == 2 and coord.phase == 2:
            quorum = self._p2_quorum(coord)
            if quorum is not None:
                self._phase2_complete(coord, quorum)
            else:
                self._read_fail(coord)
        elif phase == 3 and coord.phase == 3:
            if len(coord.updated_verified) >= self.qspec.r:
                self._read_bundle_reply(coord)
            else:
                self._read_fail(coord)
        elif phase == coord.phase:
            self._read_fail(coord)

    def _read_fail(self, coord: _ReadCoord) -> None:
        coord.done = True
        self.rt.send(coord.origin,
                     ProxyReadReply(coord.req_id, self.entity, self._epoch(),
                                    kind="fail", key=coord.key))

    def _phase2_complete(self, coord: _ReadCoord, quorum: list[ReadAnswer]) -> None:
        coord.quorum_answers = quorum
        if coord.full_data:
            digests = {a.row_digest for a in quorum}
            if len(digests) == 1:
                coord.done = True
                self.rt.send(coord.origin,
                             ProxyReadReply(coord.req_id, self.entity, self._epoch(),
                                            kind="value", answers=tuple(quorum),
                                            key=coord.key))
                return
        if self.variant.resolver == RESOLVER_CLIENT:
            coord.done = True
            self.rt.send(coord.origin,
                         ProxyReadReply(coord.req_id, self.entity, self._epoch(),
                                        kind="versions", answers=tuple(quorum),
                                        key=coord.key))
            return
        verify = None
        if not self.variant.baseline:
            verify = lambda cell: self._verify_cell(coord.key, cell)
        rejected = []
        resolved = resolve_rows(coord.key, [a.row for a in quorum], verify,
                                on_reject=lambda c: rejected.append(c))
        for cell in rejected:
            self.rt.alert("resolve-unverifiable-cell", column=cell.column,
                          req=coord.req_id)
        had_cells = any(a.row for a in quorum)
        if had_cells and not resolved:
            self._read_fail(coord)  # all cells unverifiable
            return
        coord.resolved = resolved
        coord.phase = 3
        resolved_digest = row_digest(coord.key, {c.column: c for c in resolved}) \
            if resolved else EMPTY_ROW_DIGEST
        known_updated = set()
        for answers in (coord.answers, coord.phase2_data):
            for node, ans in answers.items():
                if ans.row_digest == resolved_digest:
                    known_updated.add(node)
        for node in known_updated:
            if (not self.variant.proxy_verifies
                    or node in coord.verified or node in coord.p2_verified):
                coord.updated_verified.add(node)
        wb_targets = [n for n in coord.relevant if n not in known_updated]
        if not wb_targets or not resolved:
            self._read_bundle_reply(coord)
            return
        coord.wb_targets = set(wb_targets)
        wb = WriteBackReq(coord.req_id, self.entity, self._epoch(), key=coord.key,
                          cells=resolved, client=coord.client,
                          client_ts=coord.client_ts, to_replica=True)
        for node in wb_targets:
            self.rt.send(node, wb)
        self.rt.set_timer(self.timers.proxy_timeout_us, ("rc", coord.req_id, 3))
        self._wb_check(coord)

    def _wb_check(self, coord: _ReadCoord) -> None:
        if len(coord.updated_verified) < self.qspec.r:
            return
        acked = {a.node for a in coord.wb_acks}
        if coord.wb_targets <= acked:
            self._read_bundle_reply(coord)
        elif not coord.wb_grace_armed:
            coord.wb_grace_armed = True
            self.rt.set_timer(self.timers.straggler_grace_us,
                              ("rc", coord.req_id, 5))

    def _read_coord_wb_ack(self, coord: _ReadCoord, ack: WriteAck) -> None:
        if coord.done or coord.phase != 3:
            return
        if ack.node in {a.node for a in coord.wb_acks}:
            return
        if self.variant.proxy_verifies:
            if not (ack.ok and self._ack_verifies(coord.resolved, ack)):
                self.rt.alert("bad-wb-ack-signature", node=str(ack.node))
                return
        elif not ack.ok:
            return
        coord.wb_acks.append(ack)
        coord.updated_verified.add(ack.node)
        self._wb_check(coord)

    def _read_bundle_reply(self, coord: _ReadCoord) -> None:
        coord.done = True
        self.rt.send(coord.origin,
                     ProxyReadReply(coord.req_id, self.entity, self._epoch(),
                                    kind="bundle",
                                    answers=tuple(coord.quorum_answers),
                                    resolved=coord.resolved or (),
                                    wb_acks=tuple(coord.wb_acks), key=coord.key))

    # ===========================================================================
    # Gossip and membership
    # ===========================================================================

    def _gossip_tick(self) -> None:
        self.hb_version += 1
        if self.variant.baseline:
            from .crypto import EMPTY_SIG
            hb = mb.HeartbeatState(self.entity, self.generation,
                                   self.hb_version, EMPTY_SIG)
        else:
            hb = mb.sign_heartbeat(self.crypto, self.entity, self.generation,
                                   self.hb_version)
        self.view.heartbeats[self.entity] = hb
        self.view.last_heard_us[self.entity] = self.rt.now()
        now = self.rt.now()
        peers = [n for n in self.view.node_ids() if n != self.entity]
        responsive = [n for n in peers
                      if self.view.liveness(n, now, self.timers.liveness_timeout_us)
                      == mb.RESPONSIVE]
        suspected = [n for n in peers if n not in responsive]
        targets = []
        if responsive:
            targets.append(responsive[self.rt.rng.randrange(len(responsive))])
        if suspected:
            targets.append(suspected[self.rt.rng.randrange(len(suspected))])
        seeds = [s for s in self.seeds if s != self.entity]
        if seeds:
            targets.append(seeds[self.rt.rng.randrange(len(seeds))])
        hbs = tuple(self.view.heartbeats[n]
                    for n in sorted(self.view.heartbeats, key=lambda e: e.index))
        msg = GossipMsg(self._next_req(), self.entity, self._epoch(), heartbeats=hbs)
        for t in dict.fromkeys(targets):
            self.rt.send(t, msg)
        self.rt.set_timer(self.timers.gossip_period_us, ("gossip",))

    def _on_gossip(self, src: EntityId, msg: GossipMsg) -> None:
        if msg.want_full:
            if self.view is None:
                return
            records = tuple(self.view.records[n] for n in self.view.node_ids())
            hbs = tuple(self.view.heartbeats[n]
                        for n in sorted(self.view.heartbeats, key=lambda e: e.index))
            self.rt.send(src, GossipMsg(msg.req_id, self.entity, self._epoch(),
                                        heartbeats=hbs, records=records,
                                        is_reply=True))
            return
        if self.view is None:
            if not msg.records:
                return
            self._boot_replies[src] = msg.records
            f = self.qspec.f
            if len(self._boot_replies) >= f + 1:
                replies = [(seed, list(recs))
                           for seed, recs in sorted(self._boot_replies.items(),
                                                    key=lambda kv: kv[0].index)]
                if self.variant.baseline:
                    verify_rec = lambda rec: True
                else:
                    verify_rec = lambda rec: mb.verify_record(self.crypto,
                                                              self.entity, rec)
                view, alerts = mb.merge_bootstrap(replies, f, verify_rec)
                for a in alerts:
                    self.rt.alert(a)
                self.view = view
                self._rebuild_ring()
                self.rt.trace("BOOTSTRAPPED", nodes=len(view.records))
            return
        if self.variant.baseline:
            verify_hb = lambda hb: True
        else:
            verify_hb = lambda hb: mb.verify_heartbeat(self.crypto,
                                                       self.entity, hb)
        new_view, alerts = mb.gossip_exchange(
            self.view, list(msg.heartbeats), verify_hb, self.rt.now())
        for a in alerts:
            self.rt.alert(a)
        self.view = new_view

    # ===========================================================================
    # Anti-entropy
    # ===========================================================================

    def _start_anti_entropy(self) -> None:
        if self.ring is None:
            return
        self._ae_round += 1
        arcs = self.ring.owned_arcs(self.entity)
        for i, arc in enumerate(arcs):
            peers = [n for n in self.ring.arc_replicas(arc) if n != self.entity]
            if not peers:
                continue
            peer = peers[(self._ae_round + i) % len(peers)]
            req = self._next_req()
            self._ae_sessions[req] = {"arc": arc, "peer": peer}
            self.rt.send(peer, AeTreeMsg(req, self.entity, self._epoch(),
                                         arc=arc, depth=self.merkle_depth))

    def _build_tree(self, arc: tuple[int, int]):
        return build_merkle(self.store, arc, self.merkle_depth, key_position,
                            RING_SIZE)

    def _on_ae_tree(self, src: EntityId, msg: AeTreeMsg) -> None:
        if not msg.is_reply:
            self.rt.send(src, replace(msg, sender=self.entity,
                                      tree=self._build_tree(msg.arc), is_reply=True))
            return
        session = self._ae_sessions.get(msg.req_id)
        if session is None:
            return
        local = self._build_tree(session["arc"])
        leaves = diff_leaves(local, msg.tree)
        if not leaves:
            del self._ae_sessions[msg.req_id]
            return
        self.rt.send(src, AeFetchMsg(msg.req_id, self.entity, self._epoch(),
                                     arc=session["arc"], depth=self.merkle_depth,
                                     leaves=tuple(leaves)))

    def _on_ae_fetch(self, src: EntityId, msg: AeFetchMsg) -> None:
        if not msg.is_reply:
            keys = keys_in_leaves(self.store, msg.arc, msg.depth, key_position,
                                  RING_SIZE, set(msg.leaves))
            items = tuple((k, tuple(self.store.cells_with_sigs(k))) for k in keys)
            self.rt.send(src, replace(msg, sender=self.entity, items=items,
                                      is_reply=True))
            return
        session = self._ae_sessions.pop(msg.req_id, None)
        if session is None:
            return
        now = self.rt.local_clock_us()
        stale: list[tuple[bytes, VersionedCell]] = []

        def defer_stale(key, cell):
            stale.append((key, cell))
            return None  # defer: quorum liveness proof runs below

        applied, alerts = anti_entropy_apply(
            self.store, [(k, list(cells)) for k, cells in msg.items],
            lambda key, cell: self._verify_cell(key, cell), now,
            liveness_check=defer_stale)
        for a in alerts:
            self.rt.alert(a, peer=str(src))
        if stale:
            self._start_liveness_probe(stale)
        if applied:
            self.rt.trace("AE_APPLIED", count=applied, peer=str(src))

    # quorum liveness proof for beyond-GC-grace cells, batches of <= 64 keys

    def _start_liveness_probe(self, stale: list[tuple[bytes, VersionedCell]]) -> None:
        for batch_start in range(0, len(stale), 64):
            batch = stale[batch_start:batch_start + 64]
            probe_id = self._next_req()
            self._probes[probe_id] = {
                "cells": {(k, c.column): c for k, c in batch},
                "answers": {},
            }
            for k in sorted({k for k, _ in batch}):
                replicas = [n for n in self.ring.replication_set(k)
                            if n != self.entity][:self.qspec.r]
                for node in replicas:
                    self.rt.send(node, ReadReq(probe_id, self.entity, self._epoch(),
                                               key=k, client_ts=self.rt.now(),
                                               client=self.entity,
                                               digest_only=False, to_replica=True))
            self.rt.set_timer(self.timers.proxy_timeout_us, ("probe", probe_id))

    def _on_probe_answer(self, probe: dict, ans: ReadAnswer) -> None:
        payload = answer_signed_payload(ans.key, ans.row_digest, ans.row_meta,
                                        ans.client_ts, ans.kind)
        if ans.sig is None or not self.crypto.pk_verify(self.entity, ans.node,
                                                        payload, ans.sig):
            return
        probe["answers"][(ans.key, ans.node)] = ans.row
        now = self.rt.local_clock_us()
        for (key, column), cell in list(probe["cells"].items()):
            if key != ans.key:
                continue
            votes = 0
            for (k2, _), row in probe["answers"].items():
                if k2 != key:
                    continue
                for c in row:
                    if c.column == column and c.order_key() == cell.order_key():
                        votes += 1
            if votes >= self.qspec.f + 1:
                self.store.append(key, [cell], now, liveness_proven=True)
                del probe["cells"][(key, column)]
                self.rt.trace("AE_STALE_ACCEPTED", key=key, column=column)

    def _probe_timeout(self, probe_id: int) -> None:
        probe = self._probes.pop(probe_id, None)
        if probe and probe["cells"]:
            for (key, column) in sorted(probe["cells"]):
                self.rt.alert("stale-cell-liveness-proof-failed",
                              key=key, column=column)


def hybrid_payload(key: bytes, cells) -> bytes:
    """The byte bundle a full-sym envelope authenticates: the signed cells
    together with their public-key signatures."""
    return b"".join(cell_signed_payload(key, c) + c.client_sig.data for c in cells)
