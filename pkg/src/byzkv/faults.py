"""Byzantine behavior scripts.

Behaviors transform a scripted entity's handler output (or intercept its
incoming messages); honest entities' messages are never touched. The
transport stays exactly-once: Byzantine entities cheat above it.
"""

from __future__ import annotations

from dataclasses import replace

from .crypto import PkSignature
from .messages import (ANSWER_DATA, ANSWER_DIGEST, ProxyReadReply,
                       ProxyWriteReply, ReadAnswer, ReadReq, WriteAck,
                       answer_signed_payload, meta_of)
from .storage import row_digest


def _corrupt_sig(sig: PkSignature | None) -> PkSignature | None:
    if sig is None or not sig.data:
        return PkSignature(sig.scheme if sig else "none", b"\x00bad")
    return PkSignature(sig.scheme, bytes([sig.data[0] ^ 0xFF]) + sig.data[1:])


def _corrupt_mac(mac):
    from .crypto import MacTag
    if mac is None or not mac.data:
        return MacTag(b"\x00" * 32)
    return MacTag(bytes([mac.data[0] ^ 0xFF]) + mac.data[1:])


class Behavior:
    name = "honest"

    def transform_outgoing(self, proc, outs, sim):
        return outs

    def intercept_incoming(self, proc, src, msg, sim) -> bool:
        return False


class BadSignatureReplier(Behavior):
    """Replica replies always carry flipped signature bytes."""

    name = "bad-sig"

    def transform_outgoing(self, proc, outs, sim):
        new = []
        for item in outs:
            dst, msg = item[0], item[1]
            if isinstance(msg, WriteAck):
                msg = replace(msg, sig=_corrupt_sig(msg.sig),
                              mac=_corrupt_mac(msg.mac) if msg.mac else None)
            elif isinstance(msg, ReadAnswer):
                msg = replace(msg, sig=_corrupt_sig(msg.sig),
                              mac=_corrupt_mac(msg.mac) if msg.mac else None)
            new.append((dst, msg))
        return new


class SilentReplier(Behavior):
    """Drops replica replies; gossip stays alive so the node looks healthy."""

    name = "silent"

    def transform_outgoing(self, proc, outs, sim):
        return [(dst, msg) for dst, msg in outs
                if not isinstance(msg, (WriteAck, ReadAnswer))]


class StaleReplier(Behavior):
    """Answers reads with the oldest stored cells, signed honestly: verified
    but stale, defeated only by quorum intersection."""

    name = "stale"

    def transform_outgoing(self, proc, outs, sim):
        new = []
        for dst, msg in outs:
            if isinstance(msg, ReadAnswer) and msg.kind in (ANSWER_DATA,
                                                            ANSWER_DIGEST):
                oldest = proc.store.read_oldest(msg.key)
                if oldest:
                    row = tuple(oldest[c] for c in sorted(oldest))
                    rd = row_digest(msg.key, oldest)
                    meta = tuple(meta_of(c) for c in row)
                    payload = answer_signed_payload(msg.key, rd, meta,
                                                    msg.client_ts, msg.kind)
                    sig = None
                    mac = None
                    if msg.mac is not None:
                        requester = dst if dst.kind == "client" else None
                        if requester is not None:
                            mac = proc.crypto.mac_sign(proc.entity, requester,
                                                       payload)
                        else:
                            sig = proc.crypto.pk_sign(proc.entity, payload)
                    else:
                        sig = proc.crypto.pk_sign(proc.entity, payload)
                    msg = replace(msg, row=row if msg.kind == ANSWER_DATA else (),
                                  row_meta=meta, row_digest=rd, sig=sig, mac=mac)
            new.append((dst, msg))
        return new


class StallingProxy(Behavior):
    """Correct results, delivered only after most of the client timeout."""

    name = "stall"

    def __init__(self, fraction: float, client_timeout_us: int):
        self.delay_us = int(fraction * client_timeout_us)

    def transform_outgoing(self, proc, outs, sim):
        new = []
        for dst, msg in outs:
            if isinstance(msg, (ProxyWriteReply, ProxyReadReply)):
                new.append((dst, msg, self.delay_us))
            else:
                new.append((dst, msg))
        return new


class AckForgingProxy(Behavior):
    """Forges up to f acknowledgments in its replies to clients; fetch-more
    rounds yield nothing but more garbage (the Table 3 worst case)."""

    name = "forge-acks"

    def __init__(self, f: int):
        self.f = f
        self._seen_reqs: set[int] = set()

    def transform_outgoing(self, proc, outs, sim):
        new = []
        for dst, msg in outs:
            if isinstance(msg, ProxyWriteReply) and dst.kind == "client":
                if msg.req_id in self._seen_reqs:
                    # fetch-more round: only freshly forged garbage
                    forged = tuple(replace(a, sig=_corrupt_sig(a.sig),
                                           mac=_corrupt_mac(a.mac) if a.mac else None)
                                   for a in msg.acks)
                    msg = replace(msg, acks=forged, ok=bool(forged))
                else:
                    self._seen_reqs.add(msg.req_id)
                    acks = list(msg.acks)
                    keep = max(len(acks) - self.f, 0)
                    forged = [replace(a, sig=_corrupt_sig(a.sig),
                                      mac=_corrupt_mac(a.mac) if a.mac else None)
                              for a in acks[keep:]]
                    msg = replace(msg, acks=tuple(acks[:keep] + forged))
            new.append((dst, msg))
        return new


class IrrelevantTargetProxy(Behavior):
    """Directs client reads at nodes outside the replication set and forwards
    their signed 'irrelevant' answers as if they were a valid quorum."""

    name = "irrelevant"

    def __init__(self):
        self._pending: dict[int, dict] = {}

    def intercept_incoming(self, proc, src, msg, sim) -> bool:
        if isinstance(msg, ReadReq) and not msg.to_replica:
            relevant = set(proc.ring.replication_set(msg.key))
            others = [n for n in proc.ring.nodes() if n not in relevant]
            if not others:
                return False  # every node is a replica; fall through to honest
            targets = (others * ((proc.qspec.r // len(others)) + 1))[:proc.qspec.r]
            targets = list(dict.fromkeys(targets))
            self._pending[msg.req_id] = {"client": src, "answers": [],
                                         "want": len(targets)}
            fwd = replace(msg, sender=proc.entity, to_replica=True)
            for node in targets:
                proc.rt.send(node, fwd)
            return True
        if isinstance(msg, ReadAnswer) and msg.req_id in self._pending:
            state = self._pending[msg.req_id]
            state["answers"].append(msg)
            if len(state["answers"]) >= state["want"]:
                proc.rt.send(state["client"],
                             ProxyReadReply(msg.req_id, proc.entity, 0,
                                            kind="value",
                                            answers=tuple(state["answers"]),
                                            key=msg.key))
                del self._pending[msg.req_id]
            return True
        return False


class SplitBrainProxy(Behavior):
    """Delivers one signed value to half the replicas and a sibling value,
    signed with the same timestamp, to the other half. The alternative cells
    arrive via the colluding client's side channel."""

    name = "split-brain"

    def __init__(self, side_channel: dict):
        self.side_channel = side_channel  # req_id -> (cells_b, envelope_b)

    def transform_outgoing(self, proc, outs, sim):
        new = []
        half_state: dict[int, int] = {}
        for dst, msg in outs:
            if (hasattr(msg, "type_tag") and msg.type_tag == "WRITE_REQ"
                    and getattr(msg, "to_replica", False)
                    and msg.req_id in self.side_channel):
                cells_b, env_b = self.side_channel[msg.req_id]
                k = half_state.get(msg.req_id, 0)
                half_state[msg.req_id] = k + 1
                if k % 2 == 1:
                    msg = replace(msg, cells=cells_b, envelope=env_b)
            new.append((dst, msg))
        return new


class ScriptedClient(Behavior):
    """Marker for Byzantine clients driven by scenario code (split-brain
    colluders). Output transforms are identity; the driver does the work."""

    name = "scripted-client"
