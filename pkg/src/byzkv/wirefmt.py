"""Evidence serialization for trace files.

Successful operations embed their signature evidence into the trace as
hex-encoded JSON so `verify-trace` can re-verify every bundle offline using
only the public material from the trace header.
"""

from __future__ import annotations

import json

from .crypto import EntityId, MacTag, PkSignature, pub_from_hex
from .messages import CellMeta, ReadAnswer, WriteAck
from .storage import VersionedCell


def _sig(sig: PkSignature | None):
    return None if sig is None else [sig.scheme, sig.data.hex()]


def _unsig(x) -> PkSignature | None:
    return None if x is None else PkSignature(x[0], bytes.fromhex(x[1]))


def _mac(mac: MacTag | None):
    return None if mac is None else mac.data.hex()


def _unmac(x) -> MacTag | None:
    return None if x is None else MacTag(bytes.fromhex(x))


def _cell(c: VersionedCell):
    return [c.column, c.kind, c.value.hex(), c.timestamp, str(c.client),
            _sig(c.client_sig)]


def _uncell(x) -> VersionedCell:
    return VersionedCell(x[0], x[1], bytes.fromhex(x[2]), x[3],
                         EntityId.parse(x[4]), _unsig(x[5]))


def _ack(a: WriteAck):
    return [str(a.node), int(a.ok), a.error, int(a.write_back), _sig(a.sig),
            _mac(a.mac)]


def _unack(x) -> WriteAck:
    return WriteAck(0, None, 0, node=EntityId.parse(x[0]), ok=bool(x[1]),
                    error=x[2], write_back=bool(x[3]), sig=_unsig(x[4]),
                    mac=_unmac(x[5]))


def _answer(a: ReadAnswer):
    return [str(a.node), a.kind, [_cell(c) for c in a.row],
            [[m.column, m.kind, m.timestamp, str(m.client), _sig(m.client_sig)]
             for m in a.row_meta],
            a.row_digest.hex(), a.client_ts, _sig(a.sig), _mac(a.mac)]


def _unanswer(x) -> ReadAnswer:
    return ReadAnswer(0, None, 0, node=EntityId.parse(x[0]), kind=x[1],
                      row=tuple(_uncell(c) for c in x[2]),
                      row_meta=tuple(CellMeta(m[0], m[1], m[2],
                                              EntityId.parse(m[3]), _unsig(m[4]))
                                     for m in x[3]),
                      row_digest=bytes.fromhex(x[4]), client_ts=x[5],
                      sig=_unsig(x[6]), mac=_unmac(x[7]))


def encode_outcome(out) -> str:
    ev = out.evidence
    doc = {
        "status": out.status,
        "kind": out.kind,
        "key": out.key.hex(),
        "client": str(out.client),
        "client_ts": ev.get("client_ts", 0),
        "value": [_cell(c) for c in (out.value or ())],
        "cells": [_cell(c) for c in ev.get("cells", ())],
        "acks": [_ack(a) for a in ev.get("acks", ())],
        "answers": [_answer(a) for a in ev.get("answers", ())],
        "resolved": [_cell(c) for c in ev.get("resolved", ())],
        "wb_acks": [_ack(a) for a in ev.get("wb_acks", ())],
    }
    return json.dumps(doc, separators=(",", ":")).encode().hex()


def decode_outcome(blob: str):
    from .client import OperationOutcome
    doc = json.loads(bytes.fromhex(blob))
    value = tuple(_uncell(c) for c in doc["value"])
    out = OperationOutcome(status=doc["status"], kind=doc["kind"],
                           key=bytes.fromhex(doc["key"]),
                           value=value if value or doc["kind"] == "read" else None,
                           client=EntityId.parse(doc["client"]))
    out.evidence = {
        "client_ts": doc["client_ts"],
        "cells": tuple(_uncell(c) for c in doc["cells"]),
        "acks": tuple(_unack(a) for a in doc["acks"]),
        "answers": tuple(_unanswer(a) for a in doc["answers"]),
        "resolved": tuple(_uncell(c) for c in doc["resolved"]),
        "wb_acks": tuple(_unack(a) for a in doc["wb_acks"]),
    }
    return out


class PublicRegistry:
    """Verification-only key material reconstructed from a trace header."""

    def __init__(self, scheme_name: str):
        self.scheme_name = scheme_name
        self._pub = {}
        self._pair = {}
        self._revoked = set()

    @classmethod
    def from_header(cls, header: list[str]) -> "PublicRegistry":
        reg = None
        for line in header:
            parts = line.split()
            if parts[0] == "pubkey":
                ent, scheme, hexkey = parts[1], parts[2], \
                    parts[3] if len(parts) > 3 else ""
                if reg is None:
                    reg = cls(scheme)
                reg._pub[EntityId.parse(ent)] = pub_from_hex(scheme, hexkey) \
                    if hexkey else None
            elif parts[0] == "pairkey":
                if reg is None:
                    continue
                reg._pair[(int(parts[1]), int(parts[2]))] = bytes.fromhex(parts[3])
        if reg is None:
            raise ValueError("trace header carries no public keys")
        return reg

    def has_entity(self, ent: EntityId) -> bool:
        return ent in self._pub

    def public_key(self, ent: EntityId):
        return self._pub[ent]

    def pair_key(self, node: EntityId, client: EntityId) -> bytes:
        return self._pair[(node.index, client.index)]

    def has_pair_key(self, node: EntityId, client: EntityId) -> bool:
        return (node.index, client.index) in self._pair

    def is_authorized(self, client: EntityId) -> bool:
        return client in self._pub
