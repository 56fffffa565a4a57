import itertools
import random

from hypothesis import given, settings
from hypothesis import strategies as st

from byzkv.crypto import PkSignature, client_id
from byzkv.placement import RING_SIZE, key_position
from byzkv.storage import (ACCEPTED, CELL_TOMBSTONE, CELL_VALUE,
                           REJECT_FUTURE, REJECT_NEEDS_PROOF, GcPolicy,
                           NodeStore, US_PER_DAY, VersionedCell,
                           anti_entropy_apply, build_merkle, diff_leaves,
                           make_cell, make_tombstone, merkle_diff_keys,
                           row_digest)

SIG = PkSignature("sim", b"stub")
NOW = 20 * US_PER_DAY


def cell(col="a", value=b"v", ts=1, kind=CELL_VALUE, client=0):
    return VersionedCell(col, kind, value, ts, client_id(client), SIG)


def fresh_store():
    return NodeStore(GcPolicy())


# -- append rules -----------------------------------------------------------

def test_append_fresh_accepts_and_reads_back():
    st_ = fresh_store()
    assert st_.append(b"k", [cell(ts=NOW - 5)], NOW) == ACCEPTED
    assert st_.read_newest(b"k")["a"].value == b"v"


def test_append_far_future_rejected():
    st_ = fresh_store()
    one_hour = 3_600_000_000
    assert st_.append(b"k", [cell(ts=NOW + one_hour)], NOW) == REJECT_FUTURE
    assert st_.read_newest(b"k") == {}


def test_append_within_skew_accepted():
    st_ = fresh_store()
    assert st_.append(b"k", [cell(ts=NOW + 9_000_000)], NOW) == ACCEPTED


def test_append_beyond_gc_grace_needs_proof():
    st_ = fresh_store()
    eleven_days = NOW - 11 * US_PER_DAY
    assert st_.append(b"k", [cell(ts=eleven_days)], NOW) == REJECT_NEEDS_PROOF
    assert st_.append(b"k", [cell(ts=eleven_days)], NOW,
                      liveness_proven=True) == ACCEPTED


# -- newest wins ---------------------------------------------------------------

def test_same_ts_lexicographic_tie_break():
    st_ = fresh_store()
    st_.append(b"k", [cell(value=b"a", ts=5)], 100)
    st_.append(b"k", [cell(value=b"b", ts=5)], 100)
    assert st_.read_newest(b"k")["a"].value == b"b"


def test_newer_ts_wins():
    st_ = fresh_store()
    st_.append(b"k", [cell(value=b"x", ts=7)], 100)
    st_.append(b"k", [cell(value=b"y", ts=5)], 100)
    assert st_.read_newest(b"k")["a"].value == b"x"


def test_per_column_max_fuzz_against_brute_force():
    rng = random.Random(1)
    for _ in range(1000):
        st_ = fresh_store()
        history = []
        for _ in range(rng.randrange(1, 14)):
            c = cell(col=f"c{rng.randrange(10)}",
                     value=bytes([rng.randrange(256)]),
                     ts=rng.randrange(1, 8),
                     kind=CELL_TOMBSTONE if rng.random() < 0.2 else CELL_VALUE)
            history.append(c)
            st_.append(b"k", [c], 100)
        by_col = {}
        for c in history:
            by_col.setdefault(c.column, []).append(c)
        expect = {col: max(cs, key=VersionedCell.order_key)
                  for col, cs in by_col.items()}
        got = st_.read_newest(b"k")
        assert {c: v.order_key() for c, v in got.items()} == \
               {c: v.order_key() for c, v in expect.items()}


def test_append_order_insensitive():
    cells = [cell(value=bytes([i]), ts=i % 3) for i in range(5)]
    digests = set()
    for perm in itertools.permutations(cells):
        st_ = fresh_store()
        for c in perm:
            st_.append(b"k", [c], NOW)
        digests.add(st_.newest_digest(b"k"))
    assert len(digests) == 1


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 5), st.binary(min_size=1, max_size=3),
                          st.booleans()), min_size=1, max_size=8))
def test_resolve_join_semilattice(raw):
    # newest-wins over cell sets is idempotent, commutative, associative
    cells = [cell(value=v, ts=ts, kind=CELL_TOMBSTONE if tomb else CELL_VALUE)
             for ts, v, tomb in raw]

    def join(*groups):
        best = None
        for group in groups:
            for c in group:
                if best is None or c.order_key() > best.order_key():
                    best = c
        return best.order_key()

    a, b = cells[: len(cells) // 2 + 1], cells[len(cells) // 2:]
    assert join(cells, cells) == join(cells)
    assert join(a, b) == join(b, a)
    if len(cells) >= 3:
        x, y, z = cells[:1], cells[1:2], cells[2:]
        assert join(x, y + z) == join(x + y, z)


# -- tombstones ---------------------------------------------------------------

def test_delete_then_read_reports_tombstone():
    st_ = fresh_store()
    st_.append(b"k", [cell(value=b"v", ts=9)], 100)
    st_.append(b"k", [cell(value=b"", ts=10, kind=CELL_TOMBSTONE)], 100)
    assert st_.read_newest(b"k")["a"].is_tombstone()


def test_rewrite_after_tombstone_visible():
    st_ = fresh_store()
    st_.append(b"k", [cell(value=b"", ts=10, kind=CELL_TOMBSTONE)], 100)
    st_.append(b"k", [cell(value=b"new", ts=11)], 100)
    assert st_.read_newest(b"k")["a"].value == b"new"


def test_tombstone_vs_value_same_ts_deterministic_both_orders():
    # the marker encoding ranks the tombstone above any value at equal ts
    for order in ([0, 1], [1, 0]):
        st_ = fresh_store()
        pair = [cell(value=b"\xff\xff\xff", ts=10),
                cell(value=b"", ts=10, kind=CELL_TOMBSTONE)]
        for i in order:
            st_.append(b"k", [pair[i]], 100)
        assert st_.read_newest(b"k")["a"].is_tombstone()


# -- gc ------------------------------------------------------------------------

def test_gc_removes_old_tombstone():
    st_ = fresh_store()
    st_.append(b"k", [cell(ts=NOW - 11 * US_PER_DAY, kind=CELL_TOMBSTONE,
                           value=b"")], NOW, liveness_proven=True)
    assert st_.gc(NOW) == 1
    assert st_.read_newest(b"k") == {}


def test_gc_keeps_young_tombstone_and_old_value():
    st_ = fresh_store()
    st_.append(b"k1", [cell(ts=NOW - US_PER_DAY, kind=CELL_TOMBSTONE,
                            value=b"")], NOW)
    st_.append(b"k2", [cell(ts=NOW - 11 * US_PER_DAY)], NOW,
               liveness_proven=True)
    assert st_.gc(NOW) == 0
    assert st_.read_newest(b"k1")["a"].is_tombstone()
    assert st_.read_newest(b"k2")["a"].value == b"v"


def test_gc_drops_history_shadowed_by_expired_tombstone():
    st_ = fresh_store()
    st_.append(b"k", [cell(value=b"old", ts=NOW - 12 * US_PER_DAY)], NOW,
               liveness_proven=True)
    st_.append(b"k", [cell(ts=NOW - 11 * US_PER_DAY, kind=CELL_TOMBSTONE,
                           value=b"")], NOW, liveness_proven=True)
    st_.gc(NOW)
    # the deleted value must not resurrect locally after the tombstone leaves
    assert st_.read_newest(b"k") == {}


def test_gc_compaction_keeps_only_maximal_old_cell():
    st_ = fresh_store()
    for i in range(5):
        st_.append(b"k", [cell(value=bytes([i]), ts=NOW - 11 * US_PER_DAY + i)],
                   NOW, liveness_proven=True)
    st_.gc(NOW)
    assert st_.read_newest(b"k")["a"].value == bytes([4])
    assert len(st_._log[b"k"]["a"]) == 1


# -- merkle ---------------------------------------------------------------------

FULL_ARC = (0, RING_SIZE - 1)


def test_merkle_identical_stores_empty_diff():
    a, b = fresh_store(), fresh_store()
    for i in range(50):
        k = b"key%d" % i
        for s in (a, b):
            s.append(k, [cell(ts=i + 1)], 100)
    ta = build_merkle(a, FULL_ARC, 10, key_position, RING_SIZE)
    tb = build_merkle(b, FULL_ARC, 10, key_position, RING_SIZE)
    assert ta.root == tb.root
    assert diff_leaves(ta, tb) == []


def test_merkle_single_divergent_key_among_1000():
    a, b = fresh_store(), fresh_store()
    keys = [b"key%d" % i for i in range(1000)]
    for k in keys:
        a.append(k, [cell(ts=5)], 100)
        b.append(k, [cell(ts=5)], 100)
    b.append(keys[123], [cell(ts=6, value=b"newer")], 100)
    got = merkle_diff_keys(a, b, FULL_ARC, 12, key_position, RING_SIZE)
    # the full-scan oracle
    oracle = [k for k in keys if a.newest_digest(k) != b.newest_digest(k)]
    assert got == oracle == [keys[123]]


def test_merkle_empty_vs_populated_all_keys():
    a, b = fresh_store(), fresh_store()
    keys = sorted(b"key%d" % i for i in range(30))
    for k in keys:
        b.append(k, [cell(ts=2)], 100)
    got = merkle_diff_keys(a, b, FULL_ARC, 10, key_position, RING_SIZE)
    assert got == keys


def test_merkle_arc_scoping():
    a = fresh_store()
    half = (0, RING_SIZE // 2)
    inside, outside = [], []
    for i in range(200):
        k = b"key%d" % i
        a.append(k, [cell(ts=1)], 100)
        pos = key_position(k)
        (inside if 0 < pos <= RING_SIZE // 2 else outside).append(k)
    b = fresh_store()
    got = merkle_diff_keys(a, b, half, 10, key_position, RING_SIZE)
    assert got == sorted(inside)


def test_merkle_mismatched_range_raises():
    import pytest
    from byzkv.storage import MerkleRangeError
    a = build_merkle(fresh_store(), FULL_ARC, 8, key_position, RING_SIZE)
    b = build_merkle(fresh_store(), (0, 5), 8, key_position, RING_SIZE)
    with pytest.raises(MerkleRangeError):
        diff_leaves(a, b)


# -- anti-entropy apply --------------------------------------------------------

def test_ae_apply_valid_missed_write():
    st_ = fresh_store()
    applied, alerts = anti_entropy_apply(
        st_, [(b"k", [cell(ts=NOW - 5)])], lambda k, c: True, NOW)
    assert applied == 1 and alerts == []
    assert st_.read_newest(b"k")["a"].value == b"v"


def test_ae_apply_forged_signature_alert_no_state_change():
    st_ = fresh_store()
    applied, alerts = anti_entropy_apply(
        st_, [(b"k", [cell(ts=NOW - 5)])], lambda k, c: False, NOW)
    assert applied == 0 and len(alerts) == 1
    assert st_.read_newest(b"k") == {}


def test_ae_replayed_deleted_value_stays_deleted():
    # replay oracle over tombstone/value interleavings: the tombstone already
    # present shadows any replayed older value
    for replay_first in (False, True):
        st_ = fresh_store()
        old_value = cell(value=b"v", ts=NOW - 6)
        tomb = cell(value=b"", ts=NOW - 5, kind=CELL_TOMBSTONE)
        if replay_first:
            st_.append(b"k", [old_value], NOW)
        st_.append(b"k", [tomb], NOW)
        applied, _ = anti_entropy_apply(
            st_, [(b"k", [old_value])], lambda k, c: True, NOW)
        assert st_.read_newest(b"k")["a"].is_tombstone()


def test_ae_stale_cell_without_proof_dropped():
    st_ = fresh_store()
    stale = cell(ts=NOW - 11 * US_PER_DAY)
    applied, alerts = anti_entropy_apply(st_, [(b"k", [stale])],
                                         lambda k, c: True, NOW)
    assert applied == 0 and any("liveness" in a for a in alerts)
    applied, alerts = anti_entropy_apply(st_, [(b"k", [stale])],
                                         lambda k, c: True, NOW,
                                         liveness_check=lambda k, c: True)
    assert applied == 1 and alerts == []


# -- snapshots --------------------------------------------------------------------

def test_snapshot_roundtrip():
    st_ = fresh_store()
    st_.append(b"key1", [make_cell(b"key1", "a", b"v1", NOW - 2, client_id(0),
                                   lambda p: SIG)], NOW)
    st_.append(b"key1", [make_tombstone(b"key1", "b", NOW - 1, client_id(1),
                                        lambda p: SIG)], NOW)
    lines = st_.dump_lines()
    assert all(line.count("|") == 5 for line in lines)
    loaded = NodeStore.load_lines(lines, "sim")
    assert loaded.newest_digest(b"key1") == st_.newest_digest(b"key1")
    assert loaded.read_newest(b"key1")["b"].is_tombstone()
