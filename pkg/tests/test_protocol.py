import random

import pytest
from conftest import build_world, client0, run_op

from byzkv import faults
from byzkv.crypto import client_id, node_id
from byzkv.messages import ANSWER_IRRELEVANT, ReadReq
from byzkv.node import resolve_rows
from byzkv.runner import run_scenario
from byzkv.scenario import ScenarioConfig
from byzkv.storage import (CELL_TOMBSTONE, VersionedCell, cell_signed_payload,
                           make_cell)

SUCCESS = "success"


def write_and_read(world, key=b"alpha", value=b"hello"):
    cl = client0(world)
    out_w = run_op(world, lambda cb: cl.start_write(key, {"field0": value}, cb))
    assert out_w.status == SUCCESS
    out_r = run_op(world, lambda cb: cl.start_read(key, cb))
    return out_w, out_r


@pytest.mark.parametrize("variant,mac", [
    ("proxy-verify", "none"),
    ("no-verify-proxy-resolve", "none"),
    ("no-verify-proxy-resolve", "half"),
    ("no-verify-proxy-resolve", "full"),
    ("no-verify-client-resolve", "none"),
    ("no-verify-client-resolve", "full"),
    ("baseline", "none"),
])
def test_write_read_roundtrip_all_variants(variant, mac):
    world = build_world(variant=variant, mac=mac)
    out_w, out_r = write_and_read(world)
    assert out_r.status == SUCCESS
    assert out_r.value[0].value == b"hello"


def test_write_ack_verifiable_by_client(world):
    cl = client0(world)
    out = run_op(world, lambda cb: cl.start_write(b"k", {"field0": b"v"}, cb))
    assert out.status == SUCCESS
    assert len(out.evidence["acks"]) == world.qspec.w
    assert {a.node for a in out.evidence["acks"]} <= \
        set(world.ring.replication_set(b"k"))


def test_revoked_client_rejected(world):
    world.registry.revoke(client_id(0))
    cl = client0(world)
    out = run_op(world, lambda cb: cl.start_write(b"k", {"field0": b"v"}, cb))
    assert out.status == "failure"
    assert world.trace.count("ALERT") > 0


def test_read_of_absent_key(world):
    cl = client0(world)
    out = run_op(world, lambda cb: cl.start_read(b"never-written", cb))
    assert out.status == SUCCESS
    assert out.value == ()


def test_delete_then_read_reports_deleted(world):
    cl = client0(world)
    run_op(world, lambda cb: cl.start_write(b"k", {"field0": b"v"}, cb))
    out_d = run_op(world, lambda cb: cl.start_delete(b"k", "field0", cb))
    assert out_d.status == SUCCESS
    out_r = run_op(world, lambda cb: cl.start_read(b"k", cb))
    assert out_r.status == SUCCESS
    assert out_r.value[0].is_tombstone()


def test_rewrite_after_delete_visible(world):
    cl = client0(world)
    run_op(world, lambda cb: cl.start_write(b"k", {"field0": b"v1"}, cb))
    run_op(world, lambda cb: cl.start_delete(b"k", "field0", cb))
    run_op(world, lambda cb: cl.start_write(b"k", {"field0": b"v2"}, cb))
    out = run_op(world, lambda cb: cl.start_read(b"k", cb))
    assert out.value[0].value == b"v2"


def test_stale_replica_triggers_resolve_and_write_back():
    world = build_world(variant="no-verify-proxy-resolve")
    cl = client0(world)
    key = b"resolve-me"
    run_op(world, lambda cb: cl.start_write(key, {"field0": b"old"}, cb))
    # plant a newer client-signed cell on all but one replica
    replicas = world.ring.replication_set(key)
    sign = lambda p: world.crypto.pk_sign(client_id(0), p)
    fresh = make_cell(key, "field0", b"new", cl._last_ts + 50, client_id(0), sign)
    for nid in replicas[1:]:
        world.nodes[nid].store.append(key, [fresh], world.sim.now)
    out = run_op(world, lambda cb: cl.start_read(key, cb))
    assert out.status == SUCCESS
    assert out.value[0].value == b"new"
    # the stale replica was repaired
    stale_store = world.nodes[replicas[0]].store
    assert stale_store.read_newest(key)["field0"].value == b"new"


def test_split_brain_same_ts_resolves_to_lexicographic_max():
    world = build_world(variant="no-verify-proxy-resolve")
    cl = client0(world)
    key = b"split"
    ts = 1000
    sign = lambda p: world.crypto.pk_sign(client_id(1), p)
    cell_a = make_cell(key, "field0", b"a", ts, client_id(1), sign)
    cell_b = make_cell(key, "field0", b"b", ts, client_id(1), sign)
    replicas = world.ring.replication_set(key)
    for nid in replicas[:2]:
        world.nodes[nid].store.append(key, [cell_a], world.sim.now)
    for nid in replicas[2:]:
        world.nodes[nid].store.append(key, [cell_b], world.sim.now)
    out = run_op(world, lambda cb: cl.start_read(key, cb))
    assert out.status == SUCCESS
    assert out.value[0].value == b"b"
    # after the first read every replica holds the winner
    for nid in replicas:
        assert world.nodes[nid].store.read_newest(key)["field0"].value == b"b"


def test_column_family_partial_updates_merge():
    # one node holds new A and old B, another the opposite; a read returns
    # the latest version of both columns
    world = build_world(variant="no-verify-proxy-resolve", columns=2)
    cl = client0(world)
    key = b"cols"
    sign = lambda p: world.crypto.pk_sign(client_id(0), p)
    old_a = make_cell(key, "a", b"a-old", 100, client_id(0), sign)
    new_a = make_cell(key, "a", b"a-new", 200, client_id(0), sign)
    old_b = make_cell(key, "b", b"b-old", 100, client_id(0), sign)
    new_b = make_cell(key, "b", b"b-new", 200, client_id(0), sign)
    replicas = world.ring.replication_set(key)
    for i, nid in enumerate(replicas):
        cells = [new_a, old_b] if i % 2 == 0 else [old_a, new_b]
        world.nodes[nid].store.append(key, cells, world.sim.now)
    out = run_op(world, lambda cb: cl.start_read(key, cb))
    got = {c.column: c.value for c in out.value}
    assert got == {"a": b"a-new", "b": b"b-new"}


def test_resolve_oracle_1000_random_answer_sets():
    rng = random.Random(7)
    key = b"k"
    for _ in range(1000):
        cells = []
        for _ in range(rng.randrange(1, 12)):
            cells.append(VersionedCell(
                f"c{rng.randrange(3)}",
                CELL_TOMBSTONE if rng.random() < 0.15 else 0,
                bytes([rng.randrange(4)]), rng.randrange(1, 5),
                client_id(0), None))
        rows = []
        i = 0
        while i < len(cells):
            rows.append(tuple(cells[i:i + 3]))
            i += 3
        got = {c.column: c.order_key() for c in resolve_rows(key, rows)}
        oracle = {}
        for c in cells:
            if c.column not in oracle or c.order_key() > oracle[c.column]:
                oracle[c.column] = c.order_key()
        assert got == oracle


def test_resolver_neutrality_proxy_vs_client_unit():
    # identical answer multisets resolve identically regardless of who runs it
    rng = random.Random(3)
    key = b"k"
    for _ in range(200):
        rows = []
        for _ in range(3):
            rows.append(tuple(
                VersionedCell("x", 0, bytes([rng.randrange(5)]),
                              rng.randrange(1, 6), client_id(0), None)
                for _ in range(rng.randrange(0, 3))))
        assert resolve_rows(key, rows) == resolve_rows(key, list(reversed(rows)))


def test_write_back_with_forged_cell_rejected_every_position():
    world = build_world(variant="proxy-verify", columns=10)
    key = b"wbkey"
    replicas = world.ring.replication_set(key)
    target = world.nodes[replicas[0]]
    sign = lambda p: world.crypto.pk_sign(client_id(0), p)
    cells = [make_cell(key, f"field{i}", b"v%d" % i, 100, client_id(0), sign)
             for i in range(10)]
    from byzkv.messages import WriteBackReq
    from byzkv.crypto import PkSignature
    for forged_pos in range(10):
        bad_cells = list(cells)
        victim = bad_cells[forged_pos]
        bad_cells[forged_pos] = VersionedCell(
            victim.column, victim.kind, b"forged-value", victim.timestamp,
            victim.client, victim.client_sig)
        sent = []
        target.rt.send = lambda dst, msg: sent.append((dst, msg))
        target._on_replica_write_back(
            node_id(1), WriteBackReq(1, node_id(1), 0, key=key,
                                     cells=tuple(bad_cells),
                                     client=client_id(0), client_ts=1,
                                     to_replica=True))
        assert sent and not sent[-1][1].ok
        assert sent[-1][1].error == "bad-signature"
    assert target.store.read_newest(key) == {}


def test_replayed_answer_fails_under_new_client_ts(world):
    cl = client0(world)
    key = b"replay"
    run_op(world, lambda cb: cl.start_write(key, {"field0": b"v"}, cb))
    node = world.nodes[world.ring.replication_set(key)[0]]
    sent = []
    node.rt.send = lambda dst, msg: sent.append(msg)
    node._on_replica_read(node_id(1), ReadReq(1, node_id(1), 0, key=key,
                                              client_ts=111, client=client_id(0),
                                              to_replica=True))
    old_answer = sent[-1]
    # the signature binds the requesting client-ts: replaying under a new
    # nonce must fail verification
    from byzkv.messages import answer_signed_payload
    payload_new_ts = answer_signed_payload(key, old_answer.row_digest,
                                           old_answer.row_meta, 222,
                                           old_answer.kind)
    assert not world.crypto.pk_verify(client_id(0), node.entity,
                                      payload_new_ts, old_answer.sig)


def test_irrelevant_answer_signed_and_never_counted():
    # cluster larger than the replication factor: some nodes do not own a key
    world = build_world(nodes=6, variant="proxy-verify")
    cl = client0(world)
    key = b"irrkey"
    relevant = set(world.ring.replication_set(key))
    outsider = next(world.nodes[n] for n in world.node_ids if n not in relevant)
    sent = []
    outsider.rt.send = lambda dst, msg: sent.append(msg)
    outsider._on_replica_read(node_id(0), ReadReq(5, node_id(0), 0, key=key,
                                                  client_ts=9,
                                                  client=client_id(0),
                                                  to_replica=True))
    ans = sent[-1]
    assert ans.kind == ANSWER_IRRELEVANT
    from byzkv.messages import answer_signed_payload
    payload = answer_signed_payload(key, ans.row_digest, ans.row_meta, 9,
                                    ans.kind)
    assert world.crypto.pk_verify(client_id(0), outsider.entity, payload,
                                  ans.sig)


def test_irrelevant_target_proxy_defeated():
    cfg_kw = dict(nodes=6, variant="no-verify-proxy-resolve",
                  fault="proxy:5=irrelevant")
    world = build_world(**cfg_kw)
    cl = client0(world)
    key = b"irr2"
    out_w = run_op(world, lambda cb: cl.start_write(key, {"field0": b"v"}, cb))
    assert out_w.status == SUCCESS
    # force the read through the Byzantine proxy first
    cl.pin_order = [node_id(5)]
    out_r = run_op(world, lambda cb: cl.start_read(key, cb))
    assert out_r.status == SUCCESS
    assert out_r.value[0].value == b"v"
    assert out_r.proxies_contacted >= 2  # switched away from the bad proxy


def test_baseline_write_message_counts():
    # clean flow fidelity: the proxy sends N store requests and the write
    # completes on f+1 acknowledgments; nothing is signed
    world = build_world(variant="baseline", trace_messages=True)
    cl = client0(world)
    before = world.sim.trace.records[:]
    out = run_op(world, lambda cb: cl.start_write(b"bk", {"field0": b"v"}, cb))
    assert out.status == SUCCESS
    new = [r for r in world.sim.trace.records if r not in before]
    stores = [r for r in new if r[1] == "MSG_SEND"
              and dict(r[5]).get("mtype") == "WRITE_REQ"
              and r[2].startswith("node:")]
    assert len(stores) == world.qspec.n
    assert world.qspec.w == world.qspec.f + 1
    totals = world.counters.snapshot()
    assert sum(c.total() for c in totals.values()) == 0


def test_eventual_mode_quorums():
    world = build_world(mode="eventual", variant="no-verify-proxy-resolve")
    assert world.qspec.n == 3 and world.qspec.r == 2 and world.qspec.w == 2
    out_w, out_r = write_and_read(world)
    assert out_r.status == SUCCESS
    assert len(out_w.evidence["acks"]) == 2


def test_escalation_on_phase1_timeout_not_failure():
    # a silent replica in the phase-1 quorum escalates to a full read
    world = build_world(variant="proxy-verify", fault="node:1=silent")
    cl = client0(world)
    out_w, out_r = write_and_read(world, key=b"esc")
    assert out_r.status == SUCCESS
    assert out_r.value[0].value == b"hello"


def test_full_sym_corrupted_siblings_accept_via_pk_fallback():
    world = build_world(variant="no-verify-proxy-resolve", mac="full")
    cl = client0(world)
    key = b"fs"
    # a proxy that corrupts every sibling MAC entry but leaves payloads alone
    class SiblingCorruptor(faults.Behavior):
        def transform_outgoing(self, proc, outs, sim):
            from dataclasses import replace
            from byzkv.crypto import MacTag
            new = []
            for dst, msg in outs:
                if getattr(msg, "type_tag", "") == "WRITE_REQ" and \
                        getattr(msg, "to_replica", False) and msg.envelope:
                    vec = tuple((i, MacTag(b"\x00" * 32))
                                if i != dst.index else (i, t)
                                for i, t in msg.envelope.mac_vector)
                    env = replace(msg.envelope, mac_vector=vec)
                    msg = replace(msg, envelope=env)
                new.append((dst, msg))
            return new

    proxy = node_id(1)
    world.sim.set_behavior(proxy, SiblingCorruptor())
    cl.pin_order = [proxy]
    out = run_op(world, lambda cb: cl.start_write(key, {"field0": b"v"}, cb))
    assert out.status == SUCCESS
    # nodes fell back to public-key verification
    deltas = world.counters.snapshot()
    node_pk_verifies = sum(deltas[n].pk_verifies for n in world.node_ids
                           if n in deltas)
    assert node_pk_verifies >= world.qspec.n


def test_synchronous_session_facade():
    from byzkv.session import open_session
    world = build_world()
    session = open_session(world, 0)
    out = session.write(b"sess", {"field0": b"v"})
    assert out.status == SUCCESS
    got = session.read(b"sess")
    assert got.value[0].value == b"v"
    out = session.delete(b"sess", "field0")
    assert out.status == SUCCESS
    assert session.read(b"sess").value[0].is_tombstone()
    session.close()
    with pytest.raises(RuntimeError):
        session.read(b"sess")


def test_counter_conservation():
    # total verifications can never exceed signatures times entities, and
    # counters never decrease across a run
    world = build_world()
    cl = client0(world)
    pre = world.counters.snapshot()
    for i in range(5):
        run_op(world, lambda cb: cl.start_write(b"cc%d" % i, {"field0": b"v"}, cb))
        run_op(world, lambda cb: cl.start_read(b"cc%d" % i, cb))
    post = world.counters.snapshot()
    entities = len(post)
    total_signs = sum(c.pk_signs for c in post.values())
    total_verifies = sum(c.pk_verifies for c in post.values())
    assert total_verifies <= total_signs * entities
    for ent, before in pre.items():
        after = post[ent]
        assert after.pk_signs >= before.pk_signs
        assert after.pk_verifies >= before.pk_verifies
        assert after.mac_signs >= before.mac_signs
        assert after.mac_verifies >= before.mac_verifies
