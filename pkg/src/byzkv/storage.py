"""Per-node append-log column store: newest-wins reads, signed tombstones,
GC-interval enforcement, Merkle trees and anti-entropy application."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from .crypto import (EntityId, PkSignature, digest, enc_bytes, enc_str,
                     enc_u64, enc_u8)

CELL_VALUE = 0
CELL_TOMBSTONE = 1

US_PER_DAY = 86_400_000_000

ACCEPTED = "accepted"
REJECT_FUTURE = "future-timestamp"
REJECT_NEEDS_PROOF = "needs-quorum-liveness-proof"


@dataclass(frozen=True, slots=True)
class VersionedCell:
    """One column version. Total order: timestamp, then tombstone-over-value,
    then lexicographic value bytes (the tombstone marker sorts above any value
    at equal timestamp, so deletes win ties)."""

    column: str
    kind: int  # CELL_VALUE | CELL_TOMBSTONE
    value: bytes
    timestamp: int  # microseconds
    client: EntityId
    client_sig: PkSignature

    def order_key(self):
        return (self.timestamp, self.kind, self.value)

    def is_tombstone(self) -> bool:
        return self.kind == CELL_TOMBSTONE


def cell_signed_payload(key: bytes, cell: VersionedCell) -> bytes:
    """What the writing client signs: key || column || value || timestamp."""
    return (enc_bytes(key) + enc_str(cell.column) + enc_u8(cell.kind) +
            enc_bytes(cell.value) + enc_u64(cell.timestamp))


def make_cell(key: bytes, column: str, value: bytes, ts: int, client: EntityId,
              sign_fn, kind: int = CELL_VALUE) -> VersionedCell:
    unsigned = VersionedCell(column, kind, value, ts, client, None)
    sig = sign_fn(cell_signed_payload(key, unsigned))
    return VersionedCell(column, kind, value, ts, client, sig)


def make_tombstone(key: bytes, column: str, ts: int, client: EntityId, sign_fn) -> VersionedCell:
    return make_cell(key, column, b"", ts, client, sign_fn, kind=CELL_TOMBSTONE)


def row_digest(key: bytes, newest: dict[str, VersionedCell]) -> bytes:
    """Digest of a newest-state row projection; stable across replicas."""
    h = hashlib.sha256()
    h.update(enc_bytes(key))
    for col in sorted(newest):
        c = newest[col]
        h.update(enc_str(col) + enc_u64(c.timestamp) + enc_u8(c.kind) +
                 enc_bytes(c.value) + c.client.encode())
    return h.digest()


EMPTY_ROW_DIGEST = row_digest(b"", {})


@dataclass(frozen=True)
class GcPolicy:
    gc_grace_us: int = 10 * US_PER_DAY
    max_future_skew_us: int = 10_000_000  # 10 s
    freshness_window_us: int = 60_000_000  # bound on liveness-proof answer age

    def __post_init__(self):
        assert self.gc_grace_us > 0 and self.max_future_skew_us > 0
        assert self.freshness_window_us > 0


class NodeStore:
    """Append log per (key, column) with cached newest projections."""

    def __init__(self, policy: GcPolicy | None = None):
        self.policy = policy if policy is not None else GcPolicy()
        self._log: dict[bytes, dict[str, list[VersionedCell]]] = {}
        self._newest: dict[bytes, dict[str, VersionedCell]] = {}
        self._digest: dict[bytes, bytes] = {}

    # -- writes ---------------------------------------------------------------

    def append(self, key: bytes, cells: list[VersionedCell], now: int,
               liveness_proven: bool = False) -> str:
        """Append already-authenticated cells. The whole batch shares one
        timestamp decision: too-far-future or beyond-GC-grace rejects it."""
        for cell in cells:
            if cell.timestamp > now + self.policy.max_future_skew_us:
                return REJECT_FUTURE
            if cell.timestamp < now - self.policy.gc_grace_us and not liveness_proven:
                return REJECT_NEEDS_PROOF
        for cell in cells:
            self._append_one(key, cell)
        return ACCEPTED

    def _append_one(self, key: bytes, cell: VersionedCell) -> None:
        cols = self._log.setdefault(key, {})
        cols.setdefault(cell.column, []).append(cell)
        newest = self._newest.setdefault(key, {})
        cur = newest.get(cell.column)
        if cur is None or cell.order_key() > cur.order_key():
            newest[cell.column] = cell
            self._digest.pop(key, None)

    # -- reads ----------------------------------------------------------------

    def read_newest(self, key: bytes) -> dict[str, VersionedCell]:
        """Per column, the maximal cell under the total order; {} if absent."""
        return dict(self._newest.get(key, {}))

    def read_oldest(self, key: bytes) -> dict[str, VersionedCell]:
        # Used by the stale-replier fault behavior.
        out = {}
        for col, cells in self._log.get(key, {}).items():
            out[col] = min(cells, key=VersionedCell.order_key)
        return out

    def newest_digest(self, key: bytes) -> bytes:
        d = self._digest.get(key)
        if d is None:
            newest = self._newest.get(key)
            d = row_digest(key, newest) if newest else row_digest(key, {})
            self._digest[key] = d
        return d

    def keys(self) -> list[bytes]:
        return list(self._log.keys())

    def has_key(self, key: bytes) -> bool:
        return key in self._log

    def cells_with_sigs(self, key: bytes) -> list[VersionedCell]:
        """Newest cells (with their client signatures) for anti-entropy transfer."""
        return list(self._newest.get(key, {}).values())

    # -- garbage collection -----------------------------------------------------

    def gc(self, now: int) -> int:
        """Drop tombstones past the grace interval together with the history
        they shadow, then compact older-than-grace duplicates. Returns the
        number of tombstones removed."""
        horizon = now - self.policy.gc_grace_us
        removed = 0
        for key in list(self._log.keys()):
            cols = self._log[key]
            for col in list(cols.keys()):
                cells = cols[col]
                expired = [c for c in cells if c.is_tombstone() and c.timestamp < horizon]
                if expired:
                    shadow = max(expired, key=VersionedCell.order_key).order_key()
                    kept = [c for c in cells if c.order_key() > shadow]
                    removed += len(expired)
                    cells = kept
                # compaction: keep only the maximal cell among those older than grace
                old = [c for c in cells if c.timestamp < horizon]
                if len(old) > 1:
                    keep = max(old, key=VersionedCell.order_key)
                    cells = [c for c in cells if c.timestamp >= horizon or c is keep]
                if cells:
                    cols[col] = cells
                    self._newest[key][col] = max(cells, key=VersionedCell.order_key)
                else:
                    del cols[col]
                    self._newest[key].pop(col, None)
                self._digest.pop(key, None)
            if not cols:
                del self._log[key]
                self._newest.pop(key, None)
                self._digest.pop(key, None)
        return removed

    # -- snapshots ----------------------------------------------------------------

    def dump_lines(self) -> list[str]:
        lines = []
        for key in sorted(self._log):
            ktext = key.decode("ascii")
            if "|" in ktext or "\n" in ktext:
                raise ValueError("snapshot keys must not contain '|' or newlines")
            for col in sorted(self._log[key]):
                for c in self._log[key][col]:
                    val = bytes([c.kind]) + c.value
                    lines.append(f"{ktext}|{c.column}|{c.timestamp}|{val.hex()}|"
                                 f"{c.client}|{c.client_sig.data.hex()}")
        return lines

    @classmethod
    def load_lines(cls, lines: list[str], scheme: str,
                   policy: GcPolicy | None = None) -> "NodeStore":
        store = cls(policy)
        for line in lines:
            if not line.strip() or line.startswith("#"):
                continue
            ktext, col, ts, val_hex, client, sig_hex = line.split("|")
            raw = bytes.fromhex(val_hex)
            cell = VersionedCell(col, raw[0], raw[1:], int(ts),
                                 EntityId.parse(client),
                                 PkSignature(scheme, bytes.fromhex(sig_hex)))
            store._append_one(ktext.encode("ascii"), cell)
        return store


# ---------------------------------------------------------------------------
# Merkle trees over token arcs
# ---------------------------------------------------------------------------

DEFAULT_MERKLE_DEPTH = 15

_EMPTY_DIGESTS = [hashlib.sha256(b"byzkv-empty-leaf").digest()]
for _ in range(64):
    _EMPTY_DIGESTS.append(hashlib.sha256(_EMPTY_DIGESTS[-1] + _EMPTY_DIGESTS[-1]).digest())


def empty_digest(levels_above_leaf: int) -> bytes:
    return _EMPTY_DIGESTS[levels_above_leaf]


@dataclass(frozen=True)
class MerkleTree:
    arc: tuple[int, int]
    depth: int
    leaves: tuple[tuple[int, bytes], ...]  # (leaf index, digest), sparse and sorted
    root: bytes


class MerkleRangeError(Exception):
    pass


def _arc_span(arc: tuple[int, int], ring_size: int) -> int:
    lo, hi = arc
    return (hi - lo) % ring_size or ring_size


def leaf_index(position: int, arc: tuple[int, int], depth: int, ring_size: int) -> int:
    lo, _ = arc
    span = _arc_span(arc, ring_size)
    offset = (position - lo - 1) % ring_size
    return (offset << depth) // span


def _root_from_leaves(leaves: dict[int, bytes], depth: int) -> bytes:
    level = leaves
    for lvl in range(depth):
        nxt: dict[int, bytes] = {}
        for idx in sorted(level):
            parent = idx >> 1
            if parent in nxt:
                continue
            left = level.get(parent << 1, empty_digest(lvl))
            right = level.get((parent << 1) | 1, empty_digest(lvl))
            nxt[parent] = hashlib.sha256(left + right).digest()
        level = nxt
    return level.get(0, empty_digest(depth))


def build_merkle(store: NodeStore, arc: tuple[int, int], depth: int,
                 pos_fn, ring_size: int) -> MerkleTree:
    """Leaves hash the (key, newest-row digest) pairs falling in each bucket;
    equal trees mean equal newest state over the arc (up to collision)."""
    buckets: dict[int, list[bytes]] = {}
    for key in store.keys():
        pos = pos_fn(key)
        offset = (pos - arc[0]) % ring_size
        if not (0 < offset <= _arc_span(arc, ring_size)):
            continue
        idx = leaf_index(pos, arc, depth, ring_size)
        buckets.setdefault(idx, []).append(enc_bytes(key) + store.newest_digest(key))
    leaves: dict[int, bytes] = {}
    for idx, entries in buckets.items():
        entries.sort()
        leaves[idx] = hashlib.sha256(b"".join(entries)).digest()
    root = _root_from_leaves(leaves, depth)
    return MerkleTree(arc, depth, tuple(sorted(leaves.items())), root)


def diff_leaves(local: MerkleTree, remote: MerkleTree) -> list[int]:
    if local.arc != remote.arc or local.depth != remote.depth:
        raise MerkleRangeError("trees cover different ranges")
    a = dict(local.leaves)
    b = dict(remote.leaves)
    out = [idx for idx in set(a) | set(b) if a.get(idx) != b.get(idx)]
    return sorted(out)


def keys_in_leaves(store: NodeStore, arc: tuple[int, int], depth: int,
                   pos_fn, ring_size: int, leaf_set: set[int]) -> list[bytes]:
    out = []
    for key in store.keys():
        pos = pos_fn(key)
        offset = (pos - arc[0]) % ring_size
        if not (0 < offset <= _arc_span(arc, ring_size)):
            continue
        if leaf_index(pos, arc, depth, ring_size) in leaf_set:
            out.append(key)
    return sorted(out)


def merkle_diff_keys(local: NodeStore, remote: NodeStore, arc: tuple[int, int],
                     depth: int, pos_fn, ring_size: int) -> list[bytes]:
    """Exactly the keys whose newest-row digests differ between two stores."""
    lt = build_merkle(local, arc, depth, pos_fn, ring_size)
    rt = build_merkle(remote, arc, depth, pos_fn, ring_size)
    leaf_set = set(diff_leaves(lt, rt))
    keys = set(keys_in_leaves(local, arc, depth, pos_fn, ring_size, leaf_set))
    keys |= set(keys_in_leaves(remote, arc, depth, pos_fn, ring_size, leaf_set))
    return sorted(k for k in keys
                  if local.newest_digest(k) != remote.newest_digest(k)
                  or local.has_key(k) != remote.has_key(k))


# ---------------------------------------------------------------------------
# Anti-entropy application
# ---------------------------------------------------------------------------

def anti_entropy_apply(store: NodeStore, fetched: list[tuple[bytes, list[VersionedCell]]],
                       verify_cell, now: int,
                       liveness_check=None) -> tuple[int, list[str]]:
    """Apply fetched (key, cells) after validating each client signature.

    Invalid signatures never change state; they surface as Byzantine alerts.
    Cells older than the GC grace consult ``liveness_check(key, cell)``:
    True applies the cell under a quorum liveness proof, False rejects it
    with an alert, None defers it (the caller runs the proof asynchronously).
    Replayed deleted values are shadowed by the newer tombstones already
    present, by the newest-wins order.
    """
    applied = 0
    alerts: list[str] = []
    horizon = now - store.policy.gc_grace_us
    for key, cells in fetched:
        good: list[VersionedCell] = []
        for cell in cells:
            if not verify_cell(key, cell):
                alerts.append(f"anti-entropy signature failure key={key!r} col={cell.column}")
                continue
            if cell.timestamp < horizon:
                verdict = liveness_check(key, cell) if liveness_check is not None else False
                if verdict is None:
                    continue
                if not verdict:
                    alerts.append(f"anti-entropy stale cell without liveness proof "
                                  f"key={key!r} col={cell.column}")
                    continue
                store.append(key, [cell], now, liveness_proven=True)
                applied += 1
                continue
            good.append(cell)
        if good:
            if store.append(key, good, now) == ACCEPTED:
                applied += len(good)
    return applied, alerts
