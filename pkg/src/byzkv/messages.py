"""Simulated transport payloads.

Every message carries a request id, its sender and the membership epoch.
Signed portions use the canonical serialization from the crypto layer.
"""

from __future__ import annotations

from dataclasses import dataclass

from .crypto import (EntityId, HybridEnvelope, MacTag, PkSignature, enc_bytes,
                     enc_str, enc_u64, enc_u8)
from .storage import VersionedCell

WRITE_REQ = "WRITE_REQ"
WRITE_ACK = "WRITE_ACK"
READ_REQ = "READ_REQ"
READ_ANS = "READ_ANS"
WRITE_BACK = "WRITE_BACK"
FETCH_MORE_ACKS = "FETCH_MORE_ACKS"
AE_TREE = "AE_TREE"
AE_FETCH = "AE_FETCH"
GOSSIP = "GOSSIP"

ANSWER_DATA = "data"
ANSWER_DIGEST = "digest"
ANSWER_EMPTY = "empty"
ANSWER_IRRELEVANT = "irrelevant"


@dataclass(frozen=True, slots=True)
class Msg:
    req_id: int
    sender: EntityId
    epoch: int

    type_tag = "MSG"


@dataclass(frozen=True, slots=True)
class WriteReq(Msg):
    """Client write as forwarded along client -> proxy -> replica."""

    key: bytes = b""
    cells: tuple[VersionedCell, ...] = ()
    client: EntityId = None
    envelope: HybridEnvelope | None = None
    to_replica: bool = False  # False: client->proxy, True: proxy->replica store

    type_tag = WRITE_REQ


@dataclass(frozen=True, slots=True)
class WriteAck(Msg):
    node: EntityId = None
    ok: bool = True
    error: str = ""
    write_back: bool = False
    sig: PkSignature | None = None
    mac: MacTag | None = None
    topology_hint: tuple = ()

    type_tag = WRITE_ACK


def ack_signed_payload(cells: tuple[VersionedCell, ...], write_back: bool) -> bytes:
    """The node signs the client signature(s), which cover a fresh timestamp;
    the write-back flag is covered so the special ack is distinguishable."""
    parts = [enc_u8(1 if write_back else 0)]
    for c in cells:
        parts.append(enc_bytes(c.client_sig.data))
    return b"".join(parts)


@dataclass(frozen=True, slots=True)
class ProxyWriteReply(Msg):
    acks: tuple[WriteAck, ...] = ()
    ok: bool = True

    type_tag = "PROXY_WRITE_REPLY"


@dataclass(frozen=True, slots=True)
class FetchMoreAcks(Msg):
    orig_req_id: int = 0
    need: int = 0
    exclude: tuple[EntityId, ...] = ()

    type_tag = FETCH_MORE_ACKS


@dataclass(frozen=True, slots=True)
class ReadReq(Msg):
    key: bytes = b""
    client_ts: int = 0
    client: EntityId = None
    digest_only: bool = False
    to_replica: bool = False
    full_data: bool = False  # v2 retry: full read bypassing digest phase
    blacklist: tuple[EntityId, ...] = ()

    type_tag = READ_REQ


@dataclass(frozen=True, slots=True)
class CellMeta:
    """Per-column metadata carried by digest answers (values withheld)."""

    column: str
    kind: int
    timestamp: int
    client: EntityId
    client_sig: PkSignature


def meta_of(cell: VersionedCell) -> CellMeta:
    return CellMeta(cell.column, cell.kind, cell.timestamp, cell.client, cell.client_sig)


@dataclass(frozen=True, slots=True)
class ReadAnswer(Msg):
    node: EntityId = None
    key: bytes = b""
    kind: str = ANSWER_DATA
    row: tuple[VersionedCell, ...] = ()  # populated for data answers
    row_meta: tuple[CellMeta, ...] = ()
    row_digest: bytes = b""
    client_ts: int = 0
    sig: PkSignature | None = None
    mac: MacTag | None = None

    type_tag = READ_ANS


def answer_signed_payload(key: bytes, row_digest: bytes,
                          row_meta: tuple[CellMeta, ...], client_ts: int,
                          kind: str) -> bytes:
    """key || hash(value) || clientSignature(s) || client-ts, plus the answer
    kind so a signed 'irrelevant' cannot be repurposed."""
    parts = [enc_bytes(key), enc_bytes(row_digest)]
    for m in row_meta:
        parts.append(enc_str(m.column))
        parts.append(enc_u64(m.timestamp))
        parts.append(enc_bytes(m.client_sig.data))
    parts.append(enc_u64(client_ts))
    parts.append(enc_str(kind))
    return b"".join(parts)


@dataclass(frozen=True, slots=True)
class WriteBackReq(Msg):
    key: bytes = b""
    cells: tuple[VersionedCell, ...] = ()  # resolved row with original client sigs
    client: EntityId = None
    client_ts: int = 0
    skip_nodes: tuple[EntityId, ...] = ()  # client-resolve hint: do not target
    updated_count: int = 0  # replicas the client already verified as updated
    to_replica: bool = False

    type_tag = WRITE_BACK


@dataclass(frozen=True, slots=True)
class ProxyReadReply(Msg):
    kind: str = "value"  # value | bundle | versions | fail
    answers: tuple[ReadAnswer, ...] = ()
    resolved: tuple[VersionedCell, ...] = ()
    wb_acks: tuple[WriteAck, ...] = ()
    key: bytes = b""

    type_tag = "PROXY_READ_REPLY"


@dataclass(frozen=True, slots=True)
class AeTreeMsg(Msg):
    arc: tuple[int, int] = (0, 0)
    depth: int = 0
    tree: object = None  # MerkleTree; None in the request direction
    is_reply: bool = False

    type_tag = AE_TREE


@dataclass(frozen=True, slots=True)
class AeFetchMsg(Msg):
    arc: tuple[int, int] = (0, 0)
    depth: int = 0
    leaves: tuple[int, ...] = ()
    items: tuple = ()  # reply: ((key, (cells...)), ...)
    is_reply: bool = False

    type_tag = AE_FETCH


@dataclass(frozen=True, slots=True)
class GossipMsg(Msg):
    heartbeats: tuple = ()
    records: tuple = ()
    want_full: bool = False
    is_reply: bool = False

    type_tag = GOSSIP

