"""Scenario assembly and execution: registry, ring, membership, node and
client processes, fault wiring, preload, workload driving, metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

from . import faults
from .client import ClientProcess, OperationOutcome, SUCCESS
from .crypto import (DEFAULT_DELAYS, CryptoCounters, CryptoService, EntityId,
                     KeyRegistry, OpCounts, client_id, node_id)
from .membership import MembershipView
from .messages import WriteReq
from .node import NodeTimers, ProtocolNode, hybrid_payload
from .placement import QuorumSpec, Ring, quorum_spec
from .scenario import (ScenarioConfig, ScenarioError, behavior_times_us,
                       parse_fault_script)
from .simnet import LinkModel, Simulator
from .storage import GcPolicy, NodeStore, make_cell
from .trace import TraceLog
from .workload import (OP_INSERT, OP_READ, OP_RMW, OP_WRITE, OperationStream,
                       RunMetrics, latency_stats, make_spec, make_value,
                       pacing_schedule)
from . import membership as mb

STABILIZE_US = 200_000


@dataclass
class OpRecord:
    index: int
    kind: str
    key: bytes
    status: str = ""
    started_us: int = 0
    finished_us: int = 0
    outcome: OperationOutcome | None = None


@dataclass
class RunResult:
    config: ScenarioConfig
    sim: Simulator
    trace: TraceLog
    registry: KeyRegistry
    crypto: CryptoService
    nodes: dict
    clients: dict
    outcomes: list
    records: list
    metrics: RunMetrics
    ring: Ring
    qspec: QuorumSpec
    split_brain_log: list = field(default_factory=list)
    scripted: set = field(default_factory=set)
    partial: bool = False

    def node_store(self, idx: int) -> NodeStore:
        return self.nodes[node_id(idx)].store


class World:
    def __init__(self, cfg: ScenarioConfig):
        cfg.validate()
        self.cfg = cfg
        self.variant = cfg.variant_config()
        n = cfg.replication_factor()
        if cfg.variant == "baseline":
            self.qspec = QuorumSpec("baseline", cfg.f, n, cfg.f + 1, cfg.f + 1)
        else:
            self.qspec = quorum_spec(cfg.mode, cfg.f)
        cluster = cfg.cluster_size()
        if cluster < self.qspec.n:
            raise ScenarioError("cluster smaller than replication factor")
        scheme = cfg.scheme_name()
        self.registry = KeyRegistry.build(scheme, cluster, cfg.clients, cfg.seed)
        self.counters = CryptoCounters()
        delays = DEFAULT_DELAYS[cfg.delay_profile or scheme]
        self.crypto = CryptoService(self.registry, self.counters, delays)
        self.trace = TraceLog(verbose=cfg.trace_messages)
        self.sim = Simulator(cfg.seed, LinkModel(fixed=cfg.fixed_latency),
                             self.trace, service_model=cfg.service_model)
        self.crypto.delay_hook = self.sim.on_crypto_delay
        if cfg.membership_file:
            with open(cfg.membership_file) as fh:
                parsed = mb.parse_membership_file(fh.read(), self.crypto,
                                                  node_id(0))
            cluster = len(parsed)
            self.node_ids = [rec.node for rec in parsed]
            self.client_ids = [client_id(i) for i in range(cfg.clients)]
            from .placement import Token
            tokens = [Token(pos, rec.node, v) for rec in parsed
                      for v, pos in enumerate(rec.tokens)]
            self.ring = Ring(tokens, self.qspec.n)
        else:
            self.node_ids = [node_id(i) for i in range(cluster)]
            self.client_ids = [client_id(i) for i in range(cfg.clients)]
            self.ring = Ring.generate(self.node_ids, self.qspec.n, cfg.seed,
                                      cfg.vnodes)
        if self.variant.baseline:
            from .crypto import EMPTY_SIG
            self.records = [mb.NodeRecord(nid, self.ring.tokens_of(nid),
                                          f"sim://node/{nid.index}", 1,
                                          EMPTY_SIG)
                            for nid in self.node_ids]
        else:
            self.records = [mb.sign_record(self.crypto, nid,
                                           self.ring.tokens_of(nid),
                                           f"sim://node/{nid.index}", 1)
                            for nid in self.node_ids]
        self.seeds = self.node_ids[:cfg.f + 1]
        timers = NodeTimers(
            gossip_period_us=cfg.gossip_period_ms * 1000,
            ae_period_us=cfg.ae_period_s * 1_000_000,
            gc_period_us=cfg.gc_period_s * 1_000_000,
            proxy_timeout_us=cfg.proxy_timeout_ms * 1000)
        policy = GcPolicy(gc_grace_us=cfg.gc_grace_s * 1_000_000,
                          max_future_skew_us=cfg.max_future_skew_s * 1_000_000)
        self.nodes: dict[EntityId, ProtocolNode] = {}
        fault_map = parse_fault_script(cfg.fault)
        self._check_fault_budget(fault_map)
        skews = self._skews(cfg)
        for nid in self.node_ids:
            view = MembershipView({r.node: r for r in self.records}) \
                if nid in self.seeds else None
            store = NodeStore(policy)
            node = ProtocolNode(nid, self.crypto, store, self.variant,
                                self.qspec, timers, self.seeds, view,
                                merkle_depth=cfg.merkle_depth)
            node.rt = self.sim.add_process(nid, node, skews.get(nid, 0))
            self.nodes[nid] = node
        self.clients: dict[EntityId, ClientProcess] = {}
        columns = tuple(f"field{c}" for c in range(cfg.columns))
        client_view = MembershipView({r.node: r for r in self.records})
        for cid in self.client_ids:
            cl = ClientProcess(cid, self.crypto, self.variant, self.qspec,
                               self.ring, client_view,
                               cfg.client_timeout_ms * 1000, columns)
            cl.trace_evidence = cfg.trace_evidence
            cl.rt = self.sim.add_process(cid, cl, skews.get(cid, 0))
            self.clients[cid] = cl
        self.split_brain_pairs: list[tuple[EntityId, EntityId]] = []
        self.split_brain_channel: dict = {}
        self._wire_faults(fault_map)
        for nid in self.node_ids:
            self.sim.call_at(0, self.nodes[nid].on_start)

    def _skews(self, cfg: ScenarioConfig) -> dict[EntityId, int]:
        if not cfg.skew_bound_ms:
            return {}
        import random
        rng = random.Random(self.sim.derive_seed("skews"))
        bound = cfg.skew_bound_ms * 1000
        out = {}
        for ent in self.node_ids + self.client_ids:
            out[ent] = rng.randint(-bound, bound)
        return out

    def _check_fault_budget(self, fault_map: dict) -> None:
        bad_nodes = set()
        for (kind, idx), spec in fault_map.items():
            if spec.name == "honest":
                continue
            if kind in ("node", "proxy"):
                if idx == "*":
                    raise ScenarioError(
                        "wildcard node faults would exceed the fault bound f")
                bad_nodes.add(int(idx))
        if len(bad_nodes) > self.cfg.f:
            raise ScenarioError(f"fault script names {len(bad_nodes)} faulty "
                                f"nodes; bound is f={self.cfg.f}")

    def _wire_faults(self, fault_map: dict) -> None:
        cfg = self.cfg
        sb_proxies: list[EntityId] = []
        sb_clients: list[EntityId] = []
        for (kind, idx), spec in fault_map.items():
            if kind == "client":
                targets = self.client_ids if idx == "*" else [client_id(int(idx))]
                for ent in targets:
                    if spec.name == "split-brain":
                        sb_clients.append(ent)
                        self.sim.set_behavior(ent, faults.ScriptedClient())
                continue
            ent = node_id(int(idx))
            if spec.name == "crash":
                times = behavior_times_us(spec)
                self.sim.schedule_crash(ent, times.get("at", 0),
                                        times.get("restart"))
            elif spec.name == "bad-sig":
                self.sim.set_behavior(ent, faults.BadSignatureReplier())
            elif spec.name == "silent":
                self.sim.set_behavior(ent, faults.SilentReplier())
            elif spec.name == "stale":
                self.sim.set_behavior(ent, faults.StaleReplier())
            elif spec.name == "stall":
                frac = float(spec.param("arg", "0.9"))
                self.sim.set_behavior(ent, faults.StallingProxy(
                    frac, cfg.client_timeout_ms * 1000))
            elif spec.name == "forge-acks":
                self.sim.set_behavior(ent, faults.AckForgingProxy(cfg.f))
            elif spec.name == "irrelevant":
                self.sim.set_behavior(ent, faults.IrrelevantTargetProxy())
            elif spec.name == "split-brain":
                sb_proxies.append(ent)
                self.sim.set_behavior(
                    ent, faults.SplitBrainProxy(self.split_brain_channel))
        for i, cl in enumerate(sb_clients):
            if sb_proxies:
                self.split_brain_pairs.append(
                    (cl, sb_proxies[i % len(sb_proxies)]))

    # -- preload -----------------------------------------------------------------

    def preload_direct(self, stream: OperationStream) -> None:
        """Populate every replica store directly with client-signed rows;
        models a quiesced, fully loaded cluster."""
        cfg = self.cfg
        now = self.sim.now
        ts = max(now - 1, 1)
        columns = [f"field{c}" for c in range(cfg.columns)]
        for i, key in enumerate(stream.preload_keys()):
            writer = self.client_ids[i % len(self.client_ids)]
            sign = lambda payload: self.crypto.pk_sign(writer, payload)
            cells = [make_cell(key, col, make_value(cfg.seed, -1 - i, col,
                                                    cfg.value_size),
                               ts, writer, sign) for col in columns]
            for nid in self.ring.replication_set(key):
                self.nodes[nid].store.append(key, cells, now)

    def stabilize(self) -> None:
        self.sim.run(until_us=STABILIZE_US)
        for nid in self.node_ids:
            if self.nodes[nid].view is None:
                raise ScenarioError(f"{nid} failed to bootstrap")


class SplitBrainColluder:
    """A Byzantine client signing sibling values under one timestamp, shipped
    through its colluding proxy which splits them across the replicas."""

    def __init__(self, world: World, client: EntityId, proxy: EntityId,
                 period_us: int, keys: list[bytes]):
        self.world = world
        self.client = client
        self.proxy = proxy
        self.period_us = period_us
        self.keys = keys
        self.proc = world.clients[client]
        self.count = 0
        self.log: list[dict] = []

    def start(self) -> None:
        self.world.sim.call_in(self.period_us, self.fire)

    def fire(self) -> None:
        world = self.world
        if not world.sim.is_up(self.proxy):
            world.sim.call_in(self.period_us, self.fire)
            return
        key = self.keys[self.count % len(self.keys)]
        self.count += 1
        ts = self.proc.next_timestamp()
        sign = lambda payload: world.crypto.pk_sign(self.client, payload)
        val_a = b"sb-a|%d" % self.count
        val_b = b"sb-b|%d" % self.count
        cell_a = make_cell(key, "field0", val_a, ts, self.client, sign)
        cell_b = make_cell(key, "field0", val_b, ts, self.client, sign)
        env_a = env_b = None
        if world.variant.mac_usage == "full":
            replicas = world.ring.replication_set(key)
            env_a = world.crypto.build_hybrid(self.client, replicas,
                                              hybrid_payload(key, (cell_a,)),
                                              pk_sig=cell_a.client_sig)
            env_b = world.crypto.build_hybrid(self.client, replicas,
                                              hybrid_payload(key, (cell_b,)),
                                              pk_sig=cell_b.client_sig)
        req = self.proc._next_req()
        world.split_brain_channel[req] = ((cell_b,), env_b)
        msg = WriteReq(req, self.client, 0, key=key, cells=(cell_a,),
                       client=self.client, envelope=env_a)
        world.sim._dispatch_sends(self.client, [(self.proxy, msg)],
                                  transformed=True)
        self.log.append({"key": key, "ts": ts, "low": val_a, "high": val_b,
                         "at": world.sim.now})
        world.trace.record(world.sim.now, "SPLIT_BRAIN_WRITE",
                           src=str(self.client), key=key, ts=ts)
        world.sim.call_in(self.period_us, self.fire)


class WorkloadDriver:
    def __init__(self, world: World, ops: list, time_origin_us: int,
                 pacing: list[int] | None = None):
        self.world = world
        self.ops = list(ops)
        self.next_ix = 0
        self.origin = time_origin_us
        self.pacing = pacing
        self.records: list[OpRecord] = []
        self.pending = 0
        self.done = False

    def start(self) -> None:
        for cid in self.world.client_ids:
            self._dispatch(self.world.clients[cid])

    def _dispatch(self, client: ClientProcess) -> None:
        if self.next_ix >= len(self.ops):
            if self.pending == 0 and not self.done:
                self.done = True
                self.world.sim.request_stop()
            return
        op = self.ops[self.next_ix]
        self.next_ix += 1
        at = self.origin + (self.pacing[op.index] if self.pacing else 0)
        self.pending += 1
        self.world.sim.call_at(max(at, self.world.sim.now), self._exec,
                               client, op)

    def _exec(self, client: ClientProcess, op) -> None:
        rec = OpRecord(op.index, op.kind, op.key, started_us=self.world.sim.now)
        self.records.append(rec)
        if op.kind == OP_READ:
            client.start_read(op.key, lambda out: self._done(client, rec, out))
        elif op.kind in (OP_WRITE, OP_INSERT):
            client.start_write(op.key, dict(op.values),
                               lambda out: self._done(client, rec, out))
        elif op.kind == OP_RMW:
            def after_read(out, client=client, rec=rec, op=op):
                if out.status != SUCCESS:
                    self._done(client, rec, out)
                    return
                client.start_write(op.key, dict(op.values),
                                   lambda o2: self._done(client, rec, o2))
            client.start_read(op.key, after_read)

    def _done(self, client: ClientProcess, rec: OpRecord,
              outcome: OperationOutcome) -> None:
        rec.status = outcome.status
        rec.finished_us = self.world.sim.now
        rec.outcome = outcome
        self.pending -= 1
        self._dispatch(client)


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    world = World(cfg)
    world.stabilize()
    stream = OperationStream(make_spec(cfg.workload, cfg.records, cfg.ops,
                                       cfg.clients, cfg.columns,
                                       cfg.value_size), cfg.seed)
    if cfg.preload_protocol:
        _preload_via_protocol(world, stream)
    else:
        world.preload_direct(stream)
    ops = stream.stream(cfg.ops)
    origin = world.sim.now
    pacing = pacing_schedule(cfg.target_tput, len(ops)) if cfg.target_tput else None
    driver = WorkloadDriver(world, ops, origin, pacing)
    colluders = []
    for cl, px in world.split_brain_pairs:
        keys = stream.preload_keys()[:8]
        col = SplitBrainColluder(world, cl, px, period_us=150_000, keys=keys)
        colluders.append(col)
        col.start()
    driver.start()
    world.sim.run(until_us=origin + cfg.time_cap_s * 1_000_000)
    partial = not driver.done
    outcomes = []
    for cid in world.client_ids:
        outcomes.extend(world.clients[cid].outcomes)
    metrics = _metrics(world, driver)
    result = RunResult(config=cfg, sim=world.sim, trace=world.trace,
                       registry=world.registry, crypto=world.crypto,
                       nodes=world.nodes, clients=world.clients,
                       outcomes=outcomes, records=driver.records,
                       metrics=metrics, ring=world.ring, qspec=world.qspec,
                       scripted={str(e) for e in world.sim._behaviors} |
                                {str(cl) for cl, _ in world.split_brain_pairs},
                       partial=partial)
    for col in colluders:
        result.split_brain_log.extend(col.log)
    world.trace.header = trace_header(world)
    return result


def _preload_via_protocol(world: World, stream: OperationStream) -> None:
    cfg = world.cfg
    keys = stream.preload_keys()
    columns = [f"field{c}" for c in range(cfg.columns)]
    pending = {"n": 0}
    ix = {"i": 0}

    def load_next(client):
        if ix["i"] >= len(keys):
            if pending["n"] == 0:
                world.sim.request_stop()
            return
        i = ix["i"]
        ix["i"] += 1
        key = keys[i]
        values = {c: make_value(cfg.seed, -1 - i, c, cfg.value_size)
                  for c in columns}
        pending["n"] += 1

        def done(_out, client=client):
            pending["n"] -= 1
            load_next(client)

        client.start_write(key, values, done)

    for cid in world.client_ids:
        load_next(world.clients[cid])
    world.sim.run(until_us=world.sim.now + 600_000_000)
    world.sim._stop = False


def _metrics(world: World, driver: WorkloadDriver) -> RunMetrics:
    cfg = world.cfg
    reads = [r.finished_us - r.started_us for r in driver.records
             if r.kind == OP_READ and r.status == SUCCESS]
    writes = [r.finished_us - r.started_us for r in driver.records
              if r.kind in (OP_WRITE, OP_INSERT, OP_RMW) and r.status == SUCCESS]
    ok = [r for r in driver.records if r.status == SUCCESS]
    failed = [r for r in driver.records if r.status and r.status != SUCCESS]
    if ok:
        t0 = min(r.started_us for r in ok)
        t1 = max(r.finished_us for r in ok)
        tput = len(ok) / max((t1 - t0) / 1e6, 1e-9)
    else:
        tput = 0.0
    r_mean, r_p95, r_p99 = latency_stats(reads)
    w_mean, w_p95, w_p99 = latency_stats(writes)
    totals = OpCounts()
    for counts in world.counters.snapshot().values():
        totals.add(counts)
    return RunMetrics(variant=cfg.variant, mode=cfg.mode, f=cfg.f, sig=cfg.sig,
                      mac=cfg.mac, workload=cfg.workload,
                      target_tput=float(cfg.target_tput), achieved_tput=tput,
                      w_mean_us=w_mean, w_p95_us=w_p95, w_p99_us=w_p99,
                      r_mean_us=r_mean, r_p95_us=r_p95, r_p99_us=r_p99,
                      pk_signs=totals.pk_signs, pk_verifies=totals.pk_verifies,
                      mac_signs=totals.mac_signs,
                      mac_verifies=totals.mac_verifies,
                      msgs=world.sim.delivered_msgs,
                      ops_ok=len(ok), ops_failed=len(failed))


def trace_header(world: World) -> list[str]:
    lines = [f"config {line}" for line in world.cfg.to_text().splitlines()]
    lines.append(f"config-digest {world.cfg.digest()}")
    for ent, scheme, hexkey in world.registry.pubkey_dump():
        lines.append(f"pubkey {ent} {scheme} {hexkey}")
    for n, c, hexkey in world.registry.pairkey_dump():
        lines.append(f"pairkey {n} {c} {hexkey}")
    return lines
