"""Post-run auditors: re-verify every piece of signature evidence, prove
monotone reads, read-your-quorum-writes, split-brain repair, attempt bounds,
membership integrity and fault confinement from a completed run."""

from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import CryptoService, EntityId
from .messages import (ANSWER_IRRELEVANT, ack_signed_payload,
                       answer_signed_payload)
from .node import resolve_rows
from .storage import VersionedCell, cell_signed_payload, row_digest

SUCCESS = "success"


@dataclass
class AuditReport:
    violations: list[str] = field(default_factory=list)

    def flag(self, msg: str) -> None:
        self.violations.append(msg)

    @property
    def ok(self) -> bool:
        return not self.violations

    def merge(self, other: "AuditReport") -> None:
        self.violations.extend(other.violations)


def _cell_key(cell: VersionedCell):
    return cell.order_key()


def _read_cells(outcome) -> dict[str, VersionedCell]:
    if outcome.value is None:
        return {}
    return {c.column: c for c in outcome.value}


def audit_monotone_reads(outcomes) -> AuditReport:
    """Per client, per key, per column: successful reads never go backwards
    under the (timestamp, tombstone, value) total order. Post-GC empties are
    outside the order and skipped."""
    report = AuditReport()
    last: dict[tuple, tuple] = {}
    for out in sorted((o for o in outcomes if o.kind == "read"
                       and o.status == SUCCESS),
                      key=lambda o: (o.finished_us, str(o.client))):
        for col, cell in _read_cells(out).items():
            tag = (str(out.client), out.key, col)
            prev = last.get(tag)
            if prev is not None and _cell_key(cell) < prev:
                report.flag(f"monotone-reads: {out.client} key={out.key!r} "
                            f"col={col} went backwards: {prev} -> "
                            f"{_cell_key(cell)}")
            last[tag] = max(prev, _cell_key(cell)) if prev else _cell_key(cell)
    return report


def audit_read_your_writes(outcomes) -> AuditReport:
    """A successful read started after that client's successful write
    completed returns cells not older than the written ones."""
    report = AuditReport()
    by_client: dict[str, list] = {}
    for out in outcomes:
        if out.status == SUCCESS:
            by_client.setdefault(str(out.client), []).append(out)
    for client, outs in by_client.items():
        writes = [o for o in outs if o.kind in ("write", "delete")]
        reads = [o for o in outs if o.kind == "read"]
        for w in writes:
            w_cells = {c.column: c for c in (w.value or ())}
            for r in reads:
                if r.key != w.key or r.started_us < w.finished_us:
                    continue
                got = _read_cells(r)
                for col, wc in w_cells.items():
                    rc = got.get(col)
                    if rc is None:
                        # visible only if the row was never garbage collected
                        continue
                    if _cell_key(rc) < _cell_key(wc):
                        report.flag(f"read-your-writes: {client} key={w.key!r} "
                                    f"col={col} read {_cell_key(rc)} older than "
                                    f"written {_cell_key(wc)}")
    return report


class EvidenceVerifier:
    """Re-verifies, independently of the run, every signature an outcome's
    success rested on: ack signatures, answer signatures bound to the
    client-ts, and the client signatures of every returned cell."""

    def __init__(self, crypto: CryptoService, qspec, variant):
        self.crypto = crypto
        self.qspec = qspec
        self.variant = variant

    def _check_ack(self, verifier: EntityId, ack, cells, write_back: bool) -> bool:
        payload = ack_signed_payload(cells, write_back)
        if ack.mac is not None:
            return self.crypto.mac_verify(verifier, ack.node, verifier,
                                          payload, ack.mac)
        if ack.sig is None:
            return False
        return self.crypto.pk_verify(verifier, ack.node, payload, ack.sig)

    def _check_answer(self, verifier: EntityId, ans, key, client_ts) -> bool:
        payload = answer_signed_payload(key, ans.row_digest, ans.row_meta,
                                        client_ts, ans.kind)
        if ans.mac is not None:
            return self.crypto.mac_verify(verifier, ans.node, verifier,
                                          payload, ans.mac)
        if ans.sig is None:
            return False
        return self.crypto.pk_verify(verifier, ans.node, payload, ans.sig)

    def _check_cell(self, verifier: EntityId, key, cell) -> bool:
        return self.crypto.pk_verify(verifier, cell.client,
                                     cell_signed_payload(key, cell),
                                     cell.client_sig)

    def check_outcome(self, out, report: AuditReport) -> None:
        if out.status != SUCCESS or self.variant.baseline:
            return
        ev = out.evidence
        label = f"{out.client} {out.kind} key={out.key!r}"
        if out.kind in ("write", "delete"):
            cells = ev.get("cells", ())
            acks = ev.get("acks", ())
            good = {a.node for a in acks
                    if self._check_ack(out.client, a, cells, a.write_back)}
            if len(good) < self.qspec.w:
                report.flag(f"evidence: {label}: only {len(good)} verifiable "
                            f"acks, need {self.qspec.w}")
            return
        answers = ev.get("answers", ())
        cts = ev.get("client_ts", 0)
        good = {}
        for a in answers:
            if a.kind == ANSWER_IRRELEVANT:
                report.flag(f"evidence: {label}: irrelevant answer counted")
                continue
            if self._check_answer(out.client, a, out.key, cts):
                good[a.node] = a
        if len(good) < self.qspec.r:
            report.flag(f"evidence: {label}: only {len(good)} verifiable "
                        f"answers, need {self.qspec.r}")
            return
        value_cells = tuple(out.value or ())
        resolved = ev.get("resolved")
        if resolved:
            recomputed = resolve_rows(
                out.key, [a.row for a in good.values()],
                verify_cell=lambda c: self._check_cell(out.client, out.key, c))
            if tuple(recomputed) != tuple(resolved):
                report.flag(f"evidence: {label}: resolve not reproducible")
            rd = row_digest(out.key, {c.column: c for c in resolved})
            updated = {n for n, a in good.items() if a.row_digest == rd}
            for ack in ev.get("wb_acks", ()):
                if ack.node in updated:
                    continue
                if self._check_ack(out.client, ack, resolved, True):
                    updated.add(ack.node)
            if len(updated) < self.qspec.r:
                report.flag(f"evidence: {label}: only {len(updated)} verified "
                            f"updated nodes after resolve")
        else:
            rd = row_digest(out.key, {c.column: c for c in value_cells})
            agree = [a for a in good.values() if a.row_digest == rd]
            if len(agree) < self.qspec.r:
                report.flag(f"evidence: {label}: returned value not vouched "
                            f"by a quorum")
        # no unsigned or forged value may ever reach a client
        for cell in value_cells:
            if not self._check_cell(out.client, out.key, cell):
                report.flag(f"evidence: {label}: returned cell "
                            f"col={cell.column} has an unverifiable signature")


def audit_evidence(result) -> AuditReport:
    report = AuditReport()
    crypto = CryptoService(result.registry)
    verifier = EvidenceVerifier(crypto, result.qspec,
                                result.config.variant_config())
    for out in result.outcomes:
        verifier.check_outcome(out, report)
    return report


def audit_attempt_bounds(result) -> AuditReport:
    report = AuditReport()
    f = result.qspec.f
    for out in result.outcomes:
        if out.proxies_contacted > f + 1:
            report.flag(f"attempts: {out.client} contacted "
                        f"{out.proxies_contacted} proxies (> f+1)")
    return report


def audit_split_brain(result) -> AuditReport:
    """After the first successful read that witnesses a split-brain conflict,
    every read of that key started later returns the lexicographically larger
    value or something newer."""
    report = AuditReport()
    reads = sorted((o for o in result.outcomes
                    if o.kind == "read" and o.status == SUCCESS),
                   key=lambda o: o.finished_us)
    attacked: dict[bytes, list] = {}
    for entry in result.split_brain_log:
        attacked.setdefault(entry["key"], []).append(entry)
    for key, entries in attacked.items():
        for entry in entries:
            winner = (entry["ts"], 0, entry["high"])
            witness_done = None
            for r in reads:
                if r.key != key:
                    continue
                cell = _read_cells(r).get("field0")
                if cell is None:
                    continue
                if witness_done is None:
                    if _cell_key(cell) >= winner:
                        witness_done = r.finished_us
                    continue
                if r.started_us >= witness_done and _cell_key(cell) < winner:
                    report.flag(f"split-brain: key={key!r} read at "
                                f"{r.finished_us} returned {_cell_key(cell)} "
                                f"after repair to {winner}")
    return report


def audit_membership(result) -> AuditReport:
    """No fabricated membership: every node id in any correct node's view
    appears in the admin-signed configuration."""
    report = AuditReport()
    admin_nodes = {n for n in result.nodes}
    for nid, node in result.nodes.items():
        if node.view is None:
            continue
        for member in node.view.records:
            if member not in admin_nodes:
                report.flag(f"membership: {nid} believes in fabricated "
                            f"node {member}")
    return report


def audit_fault_confinement(result, scripted: set[str]) -> AuditReport:
    """Honest entities' outputs are never transformed."""
    report = AuditReport()
    for rec in result.trace.records:
        if rec[1] != "MSG_RECV":
            continue
        detail = dict(rec[5])
        if detail.get("xform") == "1" and rec[2] not in scripted:
            report.flag(f"confinement: message from honest {rec[2]} was "
                        f"transformed")
    return report


def audit_all(result, scripted: set[str] | None = None) -> AuditReport:
    report = AuditReport()
    report.merge(audit_monotone_reads(result.outcomes))
    report.merge(audit_read_your_writes(result.outcomes))
    report.merge(audit_evidence(result))
    report.merge(audit_attempt_bounds(result))
    report.merge(audit_membership(result))
    if result.split_brain_log:
        report.merge(audit_split_brain(result))
    if scripted is not None:
        report.merge(audit_fault_confinement(result, scripted))
    return report
