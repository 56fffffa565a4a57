"""YCSB-style load generation: workloads A/B/C/D/F, preload keys, throttle
pacing, saturation detection and run metrics."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

import numpy as np

KEY_CHARS = "abcdefghijklmnopqrstuvwxyz0123456789"
ZIPF_CONSTANT = 0.99

OP_READ = "read"
OP_WRITE = "write"
OP_INSERT = "insert"
OP_RMW = "rmw"


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    read_frac: float
    write_frac: float
    insert_frac: float = 0.0
    rmw_frac: float = 0.0
    records: int = 100_000
    ops: int = 100_000
    clients: int = 100
    columns: int = 10
    value_size: int = 100
    key_len_lo: int = 5
    key_len_hi: int = 23
    distribution: str = "zipfian"  # zipfian | latest
    full_row_writes: bool = False  # workload D updates the entire row


def make_spec(name: str, records: int = 100_000, ops: int = 100_000,
              clients: int = 100, columns: int = 10,
              value_size: int = 100) -> WorkloadSpec:
    name = name.upper()
    base = dict(records=records, ops=ops, clients=clients, columns=columns,
                value_size=value_size)
    if name == "A":
        return WorkloadSpec("A", 0.5, 0.5, **base)
    if name == "B":
        return WorkloadSpec("B", 0.95, 0.05, **base)
    if name == "C":
        return WorkloadSpec("C", 1.0, 0.0, **base)
    if name == "D":
        return WorkloadSpec("D", 0.95, 0.0, insert_frac=0.05,
                            distribution="latest", full_row_writes=True, **base)
    if name == "F":
        return WorkloadSpec("F", 0.0, 0.5, rmw_frac=0.5, **base)
    raise ValueError(f"unknown workload {name!r}")


@dataclass(frozen=True)
class Op:
    index: int
    kind: str
    key: bytes
    values: tuple[tuple[str, bytes], ...] = ()  # columns written


class ZipfianGenerator:
    """Gray et al. skewed distribution over [0, n), as used by YCSB."""

    def __init__(self, n: int, theta: float = ZIPF_CONSTANT):
        self.n = n
        self.theta = theta
        self.zetan = self._zeta(n, theta)
        self.zeta2 = self._zeta(2, theta)
        self.alpha = 1.0 / (1.0 - theta)
        self.eta = (1 - (2.0 / n) ** (1 - theta)) / (1 - self.zeta2 / self.zetan)

    @staticmethod
    def _zeta(n: int, theta: float) -> float:
        return sum(1.0 / (i ** theta) for i in range(1, n + 1))

    def sample(self, rng: random.Random) -> int:
        u = rng.random()
        uz = u * self.zetan
        if uz < 1.0:
            return 0
        if uz < 1.0 + 0.5 ** self.theta:
            return 1
        return int(self.n * (self.eta * u - self.eta + 1) ** self.alpha)


def make_key(index: int, seed: int) -> bytes:
    """Deterministic key of uniform length 5..23 bytes, unique per index."""
    h = hashlib.sha256(f"key|{seed}|{index}".encode()).digest()
    length = 5 + h[0] % 19  # uniform over 5..23
    prefix = "u" + _base36(index)
    pad = "".join(KEY_CHARS[h[i % 32] % len(KEY_CHARS)]
                  for i in range(max(0, length - len(prefix))))
    return (prefix + pad)[:max(length, len(prefix))].encode("ascii")


def _base36(n: int) -> str:
    digits = "0123456789abcdefghijklmnopqrstuvwxyz"
    if n == 0:
        return "0"
    out = []
    while n:
        n, rem = divmod(n, 36)
        out.append(digits[rem])
    return "".join(reversed(out))


def make_value(seed: int, op_index: int, column: str, size: int) -> bytes:
    out = b""
    ctr = 0
    stem = f"val|{seed}|{op_index}|{column}".encode()
    while len(out) < size:
        out += hashlib.sha256(stem + str(ctr).encode()).digest()
        ctr += 1
    return out[:size]


class OperationStream:
    """Deterministic operation stream for one (spec, seed).

    The read/write mix follows a low-discrepancy schedule so realized ratios
    stay within one operation of the target at every prefix; key choice and
    values come from the seeded RNG.
    """

    def __init__(self, spec: WorkloadSpec, seed: int):
        self.spec = spec
        self.seed = seed
        self.rng = random.Random(seed ^ 0xA5A5)
        self.insert_count = spec.records
        self._emitted = 0
        self._kind_acc = {OP_READ: 0.0, OP_WRITE: 0.0, OP_INSERT: 0.0,
                          OP_RMW: 0.0}
        self._zipf = ZipfianGenerator(max(spec.records, 2))

    def key_for(self, index: int) -> bytes:
        return make_key(index, self.seed)

    def preload_keys(self) -> list[bytes]:
        return [self.key_for(i) for i in range(self.spec.records)]

    def _next_kind(self) -> str:
        fracs = ((OP_READ, self.spec.read_frac), (OP_WRITE, self.spec.write_frac),
                 (OP_INSERT, self.spec.insert_frac), (OP_RMW, self.spec.rmw_frac))
        best, best_need = None, -1.0
        for kind, frac in fracs:
            if frac <= 0:
                continue
            need = (self._emitted + 1) * frac - self._kind_acc[kind]
            if need > best_need:
                best, best_need = kind, need
        self._kind_acc[best] += 1.0
        return best

    def _choose_key_index(self) -> int:
        if self.spec.distribution == "latest":
            back = self._zipf.sample(self.rng) % self.insert_count
            return self.insert_count - 1 - back
        idx = self._zipf.sample(self.rng)
        return idx % self.insert_count

    def next_op(self) -> Op:
        i = self._emitted
        kind = self._next_kind()
        self._emitted += 1
        cols = [f"field{c}" for c in range(self.spec.columns)]
        if kind == OP_INSERT:
            key = self.key_for(self.insert_count)
            self.insert_count += 1
            values = tuple((c, make_value(self.seed, i, c, self.spec.value_size))
                           for c in cols)
            return Op(i, OP_INSERT, key, values)
        key = self.key_for(self._choose_key_index())
        if kind == OP_READ:
            return Op(i, OP_READ, key)
        if self.spec.full_row_writes:
            write_cols = cols
        else:
            write_cols = [cols[self.rng.randrange(len(cols))]]
        values = tuple((c, make_value(self.seed, i, c, self.spec.value_size))
                       for c in write_cols)
        return Op(i, kind, key, values)

    def stream(self, count: int | None = None) -> list[Op]:
        n = count if count is not None else self.spec.ops
        return [self.next_op() for _ in range(n)]


def stream_digest(ops: list[Op]) -> str:
    h = hashlib.sha256()
    for op in ops:
        h.update(op.kind.encode())
        h.update(op.key)
        for col, val in op.values:
            h.update(col.encode())
            h.update(val)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Throttling
# ---------------------------------------------------------------------------

def pacing_schedule(target_ops_s: float, count: int) -> list[int]:
    """Open-loop arrival times (microseconds) at the target rate."""
    assert target_ops_s > 0
    gap = 1_000_000.0 / target_ops_s
    return [int(i * gap) for i in range(count)]


def detect_saturation(window_achieved: list[float], target_ops_s: float,
                      threshold: float = 0.95, windows: int = 3) -> bool:
    """Saturated when achieved < threshold x target for `windows` consecutive
    measurement windows."""
    if len(window_achieved) < windows:
        return False
    recent = window_achieved[-windows:]
    return all(a < threshold * target_ops_s for a in recent)


def ramp_targets(start_ops_s: float, growth: float = 1.25, steps: int = 20) -> list[float]:
    out = [start_ops_s]
    for _ in range(steps - 1):
        out.append(out[-1] * growth)
    return out


def find_plateau(run_fn, start_ops_s: float, growth: float = 1.25,
                 max_steps: int = 20) -> tuple[float, list[tuple[float, float]]]:
    """Monotone target steps until achieved throughput stops tracking the
    target; the plateau is reported as the maximum achieved rate."""
    history: list[tuple[float, float]] = []
    best = 0.0
    misses = 0
    for target in ramp_targets(start_ops_s, growth, max_steps):
        achieved = run_fn(target)
        history.append((target, achieved))
        best = max(best, achieved)
        if achieved < 0.95 * target:
            misses += 1
            if misses >= 3:
                break
        else:
            misses = 0
    return best, history


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class RunMetrics:
    variant: str = ""
    mode: str = ""
    f: int = 0
    sig: str = ""
    mac: str = ""
    workload: str = ""
    target_tput: float = 0.0
    achieved_tput: float = 0.0
    w_mean_us: float = 0.0
    w_p95_us: float = 0.0
    w_p99_us: float = 0.0
    r_mean_us: float = 0.0
    r_p95_us: float = 0.0
    r_p99_us: float = 0.0
    pk_signs: int = 0
    pk_verifies: int = 0
    mac_signs: int = 0
    mac_verifies: int = 0
    msgs: int = 0
    ops_ok: int = 0
    ops_failed: int = 0

    CSV_HEADER = ("variant,mode,f,sig,mac,workload,target_tput,achieved_tput,"
                  "w_mean_us,w_p99_us,r_mean_us,r_p99_us,pk_signs,pk_verifies,"
                  "mac_signs,mac_verifies,msgs")

    def csv_row(self) -> str:
        return (f"{self.variant},{self.mode},{self.f},{self.sig},{self.mac},"
                f"{self.workload},{self.target_tput:.1f},{self.achieved_tput:.1f},"
                f"{self.w_mean_us:.1f},{self.w_p99_us:.1f},{self.r_mean_us:.1f},"
                f"{self.r_p99_us:.1f},{self.pk_signs},{self.pk_verifies},"
                f"{self.mac_signs},{self.mac_verifies},{self.msgs}")


def latency_stats(latencies_us: list[int]) -> tuple[float, float, float]:
    if not latencies_us:
        return 0.0, 0.0, 0.0
    arr = np.asarray(latencies_us, dtype=np.float64)
    return float(arr.mean()), float(np.percentile(arr, 95)), \
        float(np.percentile(arr, 99))
