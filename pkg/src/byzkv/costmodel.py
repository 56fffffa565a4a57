"""Closed-form expected crypto-operation counts per variant and the checker
comparing them against measured counters.

Three regimes: the optimistic no-failure flows (exact), the benign-mismatch
read flows with M outdated replicas in the used quorum (exact), and the
worst-case adversarial flows (upper bounds, dominated by client-proxy request
counts). Counts assume the fastest-quorum optimization is on for reads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .client import SUCCESS
from .crypto import OpCounts, client_id, counter_delta, node_id
from .node import MAC_FULL, MAC_HALF, MAC_NONE
from .runner import World
from .scenario import ScenarioConfig
from .storage import make_cell
from .workload import make_value

FLOW_WRITE = "write"
FLOW_READ = "read"
FLOW_READ_MISMATCH = "read-with-mismatch"
FLOW_WORST_WRITE = "worst-write"
FLOW_WORST_READ = "worst-read"

ROLES = ("client", "proxy", "nodes")


class CostDomainError(Exception):
    pass


def _zero() -> dict[str, OpCounts]:
    return {role: OpCounts() for role in ROLES}


def expected_counts(variant: str, mac: str, flow: str, f: int, C: int,
                    M: int = 0) -> dict[str, OpCounts]:
    """Per-role expected signature/verification counts for one operation."""
    if f < 0 or C < 1 or M < 0 or M > 2 * f:
        raise CostDomainError(f"domain: f={f} C={C} M={M}")
    n = 3 * f + 1
    q = 2 * f + 1
    out = _zero()
    cl, px, nd = out["client"], out["proxy"], out["nodes"]
    proxy_verifies = variant == "proxy-verify"
    resolver_client = variant == "no-verify-client-resolve"
    if variant not in ("proxy-verify", "no-verify-proxy-resolve",
                       "no-verify-client-resolve", "baseline"):
        raise CostDomainError(f"unknown variant {variant!r}")
    if variant == "baseline":
        return out  # no cryptography anywhere

    if flow == FLOW_WRITE:
        cl.pk_signs = C
        if mac == MAC_NONE:
            nd.pk_signs = n
            nd.pk_verifies = n * C
            cl.pk_verifies = q
            if proxy_verifies:
                px.pk_verifies = q
        elif mac == MAC_HALF:
            nd.mac_signs = n
            nd.pk_verifies = n * C
            cl.mac_verifies = q
        elif mac == MAC_FULL:
            cl.mac_signs = n
            nd.mac_signs = n
            nd.mac_verifies = n
            cl.mac_verifies = q
        return out

    if flow == FLOW_READ:
        if mac == MAC_NONE:
            nd.pk_signs = q
            cl.pk_verifies = q
            if proxy_verifies:
                px.pk_verifies = q
        else:
            nd.mac_signs = q
            cl.mac_verifies = q
        return out

    if flow == FLOW_READ_MISMATCH:
        if M < 1:
            raise CostDomainError("mismatch flow needs M >= 1")
        sign_field = "pk_signs" if mac == MAC_NONE else "mac_signs"
        verify_field = "pk_verifies" if mac == MAC_NONE else "mac_verifies"
        setattr(nd, sign_field, 5 * f + 1 + M)
        nd.pk_verifies = M * C
        if proxy_verifies:
            px.pk_verifies = 4 * f + 1 + C + M
        elif not resolver_client:
            px.pk_verifies = C
        if resolver_client:
            if mac == MAC_NONE:
                cl.pk_verifies = q + C + M
            else:
                cl.mac_verifies = q + M
                cl.pk_verifies = C
        else:
            setattr(cl, verify_field, q + M)
        return out

    raise CostDomainError(f"unknown flow {flow!r}")


def worst_case_requests(variant: str, flow: str, f: int, M: int = 0) -> int:
    """Table-3 client-proxy request bounds."""
    if variant == "proxy-verify":
        return f + 1
    if flow == FLOW_WORST_WRITE:
        return (f + 1) * (f + 1)
    if variant == "no-verify-client-resolve":
        return (f + 1) * (f + 1) + (M + f) * (f + 1)
    return (f + 1) * (f + 1)


@dataclass
class CheckLine:
    role: str
    op: str
    expected: int
    measured: int
    ok: bool


@dataclass
class CheckReport:
    label: str
    lines: list[CheckLine] = field(default_factory=list)
    passed: bool = True

    def add(self, role: str, op: str, expected: int, measured: int,
            bound: bool = False) -> None:
        ok = measured <= expected if bound else measured == expected
        self.lines.append(CheckLine(role, op, expected, measured, ok))
        if not ok:
            self.passed = False

    def render(self) -> str:
        out = [f"[{'PASS' if self.passed else 'FAIL'}] {self.label}"]
        for ln in self.lines:
            if not ln.ok:
                out.append(f"    {ln.role}.{ln.op}: expected {ln.expected}, "
                           f"measured {ln.measured}")
        return "\n".join(out)


def check_counts(label: str, expected: dict[str, OpCounts],
                 measured: dict[str, OpCounts]) -> CheckReport:
    report = CheckReport(label)
    for role in ROLES:
        for op in ("pk_signs", "pk_verifies", "mac_signs", "mac_verifies"):
            report.add(role, op, getattr(expected[role], op),
                       getattr(measured[role], op))
    return report


# ---------------------------------------------------------------------------
# Measurement scenarios: one instrumented operation against a quiesced
# cluster of N+1 nodes, with the non-replica node pinned as proxy so the
# per-role counters separate cleanly.
# ---------------------------------------------------------------------------

def _cost_config(variant: str, mac: str, f: int, C: int, sig: str = "sim",
                 seed: int = 1) -> ScenarioConfig:
    n = 3 * f + 1
    return ScenarioConfig(
        f=f, variant=variant, mac=mac, sig=sig, workload="A", records=4,
        ops=1, clients=1, columns=C, seed=seed, nodes=n + 1, vnodes=4,
        gossip_period_ms=0, ae_period_s=0, gc_period_s=0, fixed_latency=True,
        deterministic_targets=True, phase1_quorum_only=True)


def _find_key_with_spare(world: World) -> tuple[bytes, object]:
    """A key whose replication set excludes at least one node; that spare
    node becomes the proxy."""
    for i in range(10_000):
        key = b"costkey-" + str(i).encode()
        replicas = set(world.ring.replication_set(key))
        spare = [n for n in world.node_ids if n not in replicas]
        if spare:
            return key, spare[0]
    raise CostDomainError("no key with a non-replica node found")


def _roles_delta(world: World, before, proxy, replicas) -> dict[str, OpCounts]:
    delta = counter_delta(world.counters.snapshot(), before)
    out = _zero()
    out["client"] = delta.get(client_id(0), OpCounts())
    out["proxy"] = delta.get(proxy, OpCounts())
    nodes = OpCounts()
    for n in replicas:
        nodes.add(delta.get(n, OpCounts()))
    out["nodes"] = nodes
    return out


def _run_one_op(world: World, start_fn) -> object:
    done = {}

    def cb(outcome):
        done["outcome"] = outcome
        world.sim.request_stop()

    start_fn(cb)
    world.sim.run(until_us=world.sim.now + 120_000_000)
    world.sim._stop = False
    return done.get("outcome")


def _preload_key(world: World, key: bytes, columns: list[str], ts: int,
                 writer, exclude=()) -> list:
    sign = lambda payload: world.crypto.pk_sign(writer, payload)
    cells = [make_cell(key, col, make_value(world.cfg.seed, 0, col, 16), ts,
                       writer, sign) for col in columns]
    for nid in world.ring.replication_set(key):
        if nid in exclude:
            continue
        world.nodes[nid].store.append(key, cells, world.sim.now)
    return cells


def measure_write_flow(variant: str, mac: str, f: int, C: int,
                       sig: str = "sim") -> tuple[dict, object]:
    cfg = _cost_config(variant, mac, f, C, sig)
    world = World(cfg)
    world.stabilize()
    key, proxy = _find_key_with_spare(world)
    replicas = world.ring.replication_set(key)
    client = world.clients[client_id(0)]
    client.pin_order = [proxy]
    values = {f"field{c}": make_value(cfg.seed, 1, f"field{c}", cfg.value_size)
              for c in range(C)}
    before = world.counters.snapshot()
    outcome = _run_one_op(world, lambda cb: client.start_write(key, values, cb))
    assert outcome is not None and outcome.status == SUCCESS, outcome
    return _roles_delta(world, before, proxy, replicas), outcome


def measure_read_flow(variant: str, mac: str, f: int, C: int,
                      sig: str = "sim") -> tuple[dict, object]:
    cfg = _cost_config(variant, mac, f, C, sig)
    world = World(cfg)
    world.stabilize()
    key, proxy = _find_key_with_spare(world)
    replicas = world.ring.replication_set(key)
    client = world.clients[client_id(0)]
    client.pin_order = [proxy]
    columns = [f"field{c}" for c in range(C)]
    _preload_key(world, key, columns, world.sim.now - 1, client_id(0))
    before = world.counters.snapshot()
    outcome = _run_one_op(world, lambda cb: client.start_read(key, cb))
    assert outcome is not None and outcome.status == SUCCESS, outcome
    return _roles_delta(world, before, proxy, replicas), outcome


def measure_read_mismatch_flow(variant: str, mac: str, f: int, C: int, M: int,
                               sig: str = "sim") -> tuple[dict, object]:
    """Planted benign mismatch: M outdated replicas inside the quorum the
    proxy will contact (deterministic targets follow the walk order)."""
    cfg = _cost_config(variant, mac, f, C, sig)
    world = World(cfg)
    world.stabilize()
    key, proxy = _find_key_with_spare(world)
    replicas = world.ring.replication_set(key)
    client = world.clients[client_id(0)]
    client.pin_order = [proxy]
    columns = [f"field{c}" for c in range(C)]
    now = world.sim.now
    _preload_key(world, key, columns, now - 10, client_id(0))
    # with deterministic targets and the fixed link model, the proxy contacts
    # the M+... lowest-index replicas first; positions 1..M (the digest
    # responders inside the used quorum) stay stale
    order = sorted(replicas, key=lambda n: n.index)
    stale = set(order[1:1 + M])
    sign = lambda payload: world.crypto.pk_sign(client_id(0), payload)
    fresh = [make_cell(key, col, make_value(cfg.seed, 7, col, 16), now - 5,
                       client_id(0), sign) for col in columns]
    for nid in replicas:
        if nid not in stale:
            world.nodes[nid].store.append(key, fresh, now)
    before = world.counters.snapshot()
    outcome = _run_one_op(world, lambda cb: client.start_read(key, cb))
    assert outcome is not None and outcome.status == SUCCESS, outcome
    assert tuple(outcome.value) == tuple(fresh)
    return _roles_delta(world, before, proxy, replicas), outcome


def measure_worst_write(variant: str, mac: str, f: int, C: int,
                        sig: str = "sim") -> object:
    """Adversarial write: the client's first f proxies forge acknowledgments
    (no-verify) or stall beyond the timeout (proxy-verify)."""
    cfg = _cost_config(variant, mac, f, C, sig)
    if variant == "proxy-verify":
        fault = ",".join(f"proxy:{i}=stall@2.5" for i in range(f))
    else:
        fault = ",".join(f"proxy:{i}=forge-acks" for i in range(f))
    cfg.fault = fault
    world = World(cfg)
    world.stabilize()
    key, proxy = _find_key_with_spare(world)
    client = world.clients[client_id(0)]
    byz = [node_id(i) for i in range(f)]
    honest = [n for n in world.node_ids if n not in byz]
    client.pin_order = byz + honest
    values = {f"field{c}": make_value(cfg.seed, 1, f"field{c}", cfg.value_size)
              for c in range(C)}
    outcome = _run_one_op(world, lambda cb: client.start_write(key, values, cb))
    assert outcome is not None and outcome.status == SUCCESS, outcome
    return outcome


def measure_worst_read(variant: str, mac: str, f: int, C: int,
                       sig: str = "sim") -> object:
    """Adversarial read: bad-signature replicas force blacklist retries."""
    cfg = _cost_config(variant, mac, f, C, sig)
    world_probe = World(cfg)
    world_probe.stabilize()
    key, proxy = _find_key_with_spare(world_probe)
    replicas = world_probe.ring.replication_set(key)
    cfg2 = _cost_config(variant, mac, f, C, sig)
    cfg2.fault = ",".join(f"node:{replicas[i].index}=bad-sig" for i in range(f))
    world = World(cfg2)
    world.stabilize()
    client = world.clients[client_id(0)]
    client.pin_order = [proxy]
    columns = [f"field{c}" for c in range(C)]
    _preload_key(world, key, columns, world.sim.now - 1, client_id(0))
    outcome = _run_one_op(world, lambda cb: client.start_read(key, cb))
    assert outcome is not None and outcome.status == SUCCESS, outcome
    return outcome


# ---------------------------------------------------------------------------
# Full sweep used by the CLI cost-check subcommand and the acceptance suite
# ---------------------------------------------------------------------------

WRITE_VARIANTS = (("proxy-verify", MAC_NONE), ("no-verify-proxy-resolve", MAC_NONE),
                  ("no-verify-proxy-resolve", MAC_HALF),
                  ("no-verify-proxy-resolve", MAC_FULL),
                  ("no-verify-client-resolve", MAC_NONE),
                  ("no-verify-client-resolve", MAC_FULL))
READ_VARIANTS = (("proxy-verify", MAC_NONE), ("no-verify-proxy-resolve", MAC_NONE),
                 ("no-verify-proxy-resolve", MAC_HALF),
                 ("no-verify-client-resolve", MAC_NONE),
                 ("no-verify-client-resolve", MAC_HALF))


def run_cost_checks(f_values=(1, 2), c_values=(1, 10), m_values=(1, 2),
                    sig: str = "sim", include_worst: bool = True) -> list[CheckReport]:
    reports: list[CheckReport] = []
    for f in f_values:
        for C in c_values:
            for variant, mac in WRITE_VARIANTS:
                measured, _ = measure_write_flow(variant, mac, f, C, sig)
                expected = expected_counts(variant, mac, FLOW_WRITE, f, C)
                reports.append(check_counts(
                    f"write {variant}/{mac} f={f} C={C}", expected, measured))
            for variant, mac in READ_VARIANTS:
                measured, _ = measure_read_flow(variant, mac, f, C, sig)
                expected = expected_counts(variant, mac, FLOW_READ, f, C)
                reports.append(check_counts(
                    f"read {variant}/{mac} f={f} C={C}", expected, measured))
            for M in m_values:
                if M > 2 * f:
                    continue
                for variant, mac in READ_VARIANTS:
                    measured, _ = measure_read_mismatch_flow(variant, mac, f,
                                                             C, M, sig)
                    expected = expected_counts(variant, mac,
                                               FLOW_READ_MISMATCH, f, C, M)
                    reports.append(check_counts(
                        f"read-mismatch {variant}/{mac} f={f} C={C} M={M}",
                        expected, measured))
    if include_worst:
        for f in f_values:
            for variant, mac in (("proxy-verify", MAC_NONE),
                                 ("no-verify-proxy-resolve", MAC_NONE),
                                 ("no-verify-proxy-resolve", MAC_FULL)):
                outcome = measure_worst_write(variant, mac, f, 1, sig)
                bound = worst_case_requests(variant, FLOW_WORST_WRITE, f)
                rep = CheckReport(f"worst-write {variant}/{mac} f={f}")
                rep.add("client", "proxy_requests", bound,
                        outcome.proxy_requests, bound=True)
                reports.append(rep)
            for variant, mac in (("no-verify-proxy-resolve", MAC_NONE),
                                 ("no-verify-client-resolve", MAC_NONE)):
                outcome = measure_worst_read(variant, mac, f, 1, sig)
                bound = worst_case_requests(variant, FLOW_WORST_READ, f, M=2 * f)
                rep = CheckReport(f"worst-read {variant}/{mac} f={f}")
                rep.add("client", "proxy_requests", bound,
                        outcome.proxy_requests, bound=True)
                reports.append(rep)
    return reports
