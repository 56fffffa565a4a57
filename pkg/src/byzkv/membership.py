"""Admin-signed node records, f+1-seed bootstrap and signed liveness gossip."""

from __future__ import annotations

from dataclasses import dataclass

from .crypto import (ADMIN, CryptoService, EntityId, PkSignature, enc_str,
                     enc_u32, enc_u64)

RESPONSIVE = "responsive"
SUSPECTED = "suspected"

DEFAULT_LIVENESS_TIMEOUT_US = 3_000_000  # 3 simulated seconds
GOSSIP_PERIOD_US = 1_000_000
GOSSIP_FANOUT = 3  # one responsive, one suspected, one seed


class BootstrapError(Exception):
    pass


@dataclass(frozen=True, slots=True)
class NodeRecord:
    node: EntityId
    tokens: tuple[int, ...]
    address: str
    install_ts: int  # logical configuration timestamp
    admin_sig: PkSignature


def record_payload(node: EntityId, tokens: tuple[int, ...], address: str,
                   install_ts: int) -> bytes:
    out = [node.encode(), enc_u32(len(tokens))]
    out += [_enc_u128(t) for t in tokens]
    out.append(enc_str(address))
    out.append(enc_u64(install_ts))
    return b"".join(out)


def _enc_u128(v: int) -> bytes:
    return v.to_bytes(16, "big")


def sign_record(crypto: CryptoService, node: EntityId, tokens: tuple[int, ...],
                address: str, install_ts: int) -> NodeRecord:
    sig = crypto.pk_sign(ADMIN, record_payload(node, tokens, address, install_ts))
    return NodeRecord(node, tokens, address, install_ts, sig)


def verify_record(crypto: CryptoService, verifier: EntityId, rec: NodeRecord) -> bool:
    return crypto.pk_verify(verifier, ADMIN,
                            record_payload(rec.node, rec.tokens, rec.address,
                                           rec.install_ts),
                            rec.admin_sig)


@dataclass(frozen=True, slots=True)
class HeartbeatState:
    node: EntityId
    generation: int  # bumps on restart
    version: int  # monotone within a generation
    sig: PkSignature

    def fresher_than(self, other: "HeartbeatState | None") -> bool:
        if other is None:
            return True
        return (self.generation, self.version) > (other.generation, other.version)


def heartbeat_payload(node: EntityId, generation: int, version: int) -> bytes:
    return node.encode() + enc_u64(generation) + enc_u64(version)


def sign_heartbeat(crypto: CryptoService, node: EntityId, generation: int,
                   version: int) -> HeartbeatState:
    sig = crypto.pk_sign(node, heartbeat_payload(node, generation, version))
    return HeartbeatState(node, generation, version, sig)


def verify_heartbeat(crypto: CryptoService, verifier: EntityId,
                     hb: HeartbeatState) -> bool:
    return crypto.pk_verify(verifier, hb.node,
                            heartbeat_payload(hb.node, hb.generation, hb.version),
                            hb.sig)


@dataclass
class MembershipView:
    """Immutable-by-convention snapshot of the admin-signed configuration plus
    per-node liveness derived from verified heartbeats or local timeout."""

    records: dict[EntityId, NodeRecord]
    epoch: int = 0
    heartbeats: dict[EntityId, HeartbeatState] = None
    last_heard_us: dict[EntityId, int] = None

    def __post_init__(self):
        if self.heartbeats is None:
            self.heartbeats = {}
        if self.last_heard_us is None:
            self.last_heard_us = {}

    def node_ids(self) -> list[EntityId]:
        return sorted(self.records, key=lambda e: e.index)

    def liveness(self, node: EntityId, now: int,
                 timeout_us: int = DEFAULT_LIVENESS_TIMEOUT_US) -> str:
        last = self.last_heard_us.get(node)
        if last is None or now - last > timeout_us:
            return SUSPECTED
        return RESPONSIVE

    def responsive_nodes(self, now: int,
                         timeout_us: int = DEFAULT_LIVENESS_TIMEOUT_US) -> list[EntityId]:
        return [n for n in self.node_ids()
                if self.liveness(n, now, timeout_us) == RESPONSIVE]

    def copy(self) -> "MembershipView":
        return MembershipView(dict(self.records), self.epoch,
                              dict(self.heartbeats), dict(self.last_heard_us))


def merge_bootstrap(replies: list[tuple[EntityId, list[NodeRecord]]], f: int,
                    verify_fn) -> tuple[MembershipView, list[str]]:
    """Union of admin-verified records returned by at least f+1 seeds.

    Byzantine seeds can hide nodes but cannot forge them: records failing the
    admin signature are discarded and reported.
    """
    if len({seed for seed, _ in replies}) < f + 1:
        raise BootstrapError(f"need replies from at least {f + 1} seeds, "
                             f"got {len(replies)}")
    alerts: list[str] = []
    merged: dict[EntityId, NodeRecord] = {}
    for seed, records in replies:
        for rec in records:
            if not verify_fn(rec):
                alerts.append(f"bootstrap: forged record for {rec.node} from seed {seed}")
                continue
            cur = merged.get(rec.node)
            if cur is None or rec.install_ts > cur.install_ts:
                merged[rec.node] = rec
    return MembershipView(merged), alerts


def gossip_exchange(local: MembershipView, remote_heartbeats: list[HeartbeatState],
                    verify_fn, now: int) -> tuple[MembershipView, list[str]]:
    """Refresh liveness from verified heartbeats that are newer than local
    knowledge; unverifiable or unknown-node heartbeats are ignored with an alert."""
    view = local.copy()
    alerts: list[str] = []
    for hb in remote_heartbeats:
        if hb.node not in view.records:
            alerts.append(f"gossip: heartbeat for unknown node {hb.node}")
            continue
        if not hb.fresher_than(view.heartbeats.get(hb.node)):
            continue
        if not verify_fn(hb):
            alerts.append(f"gossip: bad heartbeat signature claiming {hb.node}")
            continue
        view.heartbeats[hb.node] = hb
        view.last_heard_us[hb.node] = now
    return view, alerts


def apply_records(local: MembershipView, records: list[NodeRecord],
                  verify_fn) -> tuple[MembershipView, list[str]]:
    """Merge admin-verified records; lower install timestamps never override."""
    view = local.copy()
    alerts: list[str] = []
    changed = False
    for rec in records:
        cur = view.records.get(rec.node)
        if cur is not None and cur.install_ts >= rec.install_ts:
            continue
        if not verify_fn(rec):
            alerts.append(f"membership: forged record for {rec.node}")
            continue
        view.records[rec.node] = rec
        changed = True
    if changed:
        view.epoch += 1
    return view, alerts


# ---------------------------------------------------------------------------
# Membership configuration file:
#   node <id> tokens=<t1,t2,...> ts=<logical>
# record lines followed by a detached admin signature block.
# ---------------------------------------------------------------------------

SIG_BLOCK_HEADER = "admin-signature"


def format_membership_file(records: list[NodeRecord], crypto: CryptoService) -> str:
    body_lines = []
    for rec in sorted(records, key=lambda r: r.node.index):
        toks = ",".join(str(t) for t in rec.tokens)
        body_lines.append(f"node {rec.node.index} tokens={toks} ts={rec.install_ts}")
    body = "\n".join(body_lines)
    sig = crypto.pk_sign(ADMIN, body.encode("utf-8"))
    return body + f"\n{SIG_BLOCK_HEADER} {sig.data.hex()}\n"


def parse_membership_file(text: str, crypto: CryptoService, verifier: EntityId,
                          address_fn=lambda i: f"sim://node/{i}") -> list[NodeRecord]:
    body_lines = []
    sig_hex = None
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith(SIG_BLOCK_HEADER):
            sig_hex = line.split(None, 1)[1]
            break
        body_lines.append(line)
    if sig_hex is None:
        raise BootstrapError("membership file missing admin signature block")
    body = "\n".join(body_lines)
    sig = PkSignature(crypto.registry.scheme_name, bytes.fromhex(sig_hex))
    if not crypto.pk_verify(verifier, ADMIN, body.encode("utf-8"), sig):
        raise BootstrapError("membership file admin signature invalid")
    records = []
    for line in body_lines:
        parts = line.split()
        if parts[0] != "node":
            raise BootstrapError(f"bad membership record line: {line!r}")
        idx = int(parts[1])
        tokens = ()
        install_ts = 0
        for part in parts[2:]:
            k, _, v = part.partition("=")
            if k == "tokens":
                tokens = tuple(int(t) for t in v.split(",") if t)
            elif k == "ts":
                install_ts = int(v)
        node = EntityId("node", idx)
        records.append(sign_record(crypto, node, tokens, address_fn(idx), install_ts))
    return records
