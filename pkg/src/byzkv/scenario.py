"""Scenario configuration: every knob that determines a simulation run, the
fault-script mini-grammar, and the config-file round trip."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

from .node import MAC_FULL, MAC_HALF, MAC_NONE, RESOLVER_CLIENT, \
    RESOLVER_PROXY, VariantConfig

VARIANTS = ("baseline", "proxy-verify", "no-verify-proxy-resolve",
            "no-verify-client-resolve")
SIG_NAMES = {"rsa": "rsa2048", "ecdsa": "ecdsa-p256", "none": "none", "sim": "sim"}
BEHAVIOR_NAMES = ("honest", "crash", "bad-sig", "silent", "stale", "split-brain",
                  "irrelevant", "stall", "forge-acks")


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class BehaviorSpec:
    name: str
    params: tuple[tuple[str, str], ...] = ()

    def param(self, key: str, default=None):
        for k, v in self.params:
            if k == key:
                return v
        return default


@dataclass
class ScenarioConfig:
    f: int = 1
    mode: str = "strong"  # strong | eventual
    variant: str = "proxy-verify"
    sig: str = "ecdsa"  # rsa | ecdsa | none | sim
    mac: str = MAC_NONE  # none | half | full
    workload: str = "A"
    records: int = 200
    ops: int = 200
    clients: int = 4
    columns: int = 10
    value_size: int = 100
    seed: int = 1
    fault: str = ""
    nodes: int = 0  # 0: exactly N = replication factor
    vnodes: int = 8
    proxy_timeout_ms: int = 500
    client_timeout_ms: int = 1000
    gc_grace_s: int = 864_000  # 10 days
    max_future_skew_s: int = 10
    gossip_period_ms: int = 1000
    ae_period_s: int = 10
    gc_period_s: int = 0
    merkle_depth: int = 15
    target_tput: int = 0  # 0: closed loop
    time_cap_s: int = 3600
    service_model: bool = False
    trace_messages: bool = False
    trace_evidence: bool = False
    fixed_latency: bool = False
    preload_protocol: bool = False
    phase1_quorum_only: bool = True
    deterministic_targets: bool = False
    byz_clients: int = 0  # colluding split-brain clients (unbounded by f)
    skew_bound_ms: int = 0  # honest entity clock skew bound
    delay_profile: str = ""  # override crypto delay profile (defaults to sig)
    membership_file: str = ""  # admin-signed node records (CLI input)
    out_dir: str = ""

    def validate(self) -> None:
        if self.mode not in ("strong", "eventual"):
            raise ScenarioError(f"bad mode {self.mode!r}")
        if self.variant not in VARIANTS:
            raise ScenarioError(f"bad variant {self.variant!r}")
        if self.sig not in SIG_NAMES:
            raise ScenarioError(f"bad sig {self.sig!r}")
        if self.mac not in (MAC_NONE, MAC_HALF, MAC_FULL):
            raise ScenarioError(f"bad mac {self.mac!r}")
        if self.mac == MAC_FULL and self.variant == "baseline":
            raise ScenarioError("mac=full requires a hardened variant")
        if self.mac != MAC_NONE and self.variant in ("baseline", "proxy-verify"):
            raise ScenarioError("MAC tags require a no-verify variant")
        if self.f < 1 and self.variant != "baseline":
            raise ScenarioError("f >= 1 required unless baseline")
        if self.f < 0:
            raise ScenarioError("f must be non-negative")
        if self.workload not in ("A", "B", "C", "D", "F"):
            raise ScenarioError(f"unknown workload {self.workload!r}")
        parse_fault_script(self.fault)

    # -- derived views ------------------------------------------------------

    def replication_factor(self) -> int:
        return 3 * self.f + 1 if self.mode == "strong" else 2 * self.f + 1

    def cluster_size(self) -> int:
        return self.nodes if self.nodes else self.replication_factor()

    def variant_config(self) -> VariantConfig:
        if self.variant == "baseline":
            return VariantConfig(proxy_verifies=False, resolver=RESOLVER_PROXY,
                                 mac_usage=MAC_NONE, mode=self.mode, baseline=True,
                                 phase1_quorum_only=self.phase1_quorum_only,
                                 deterministic_targets=self.deterministic_targets)
        resolver = RESOLVER_CLIENT if self.variant == "no-verify-client-resolve" \
            else RESOLVER_PROXY
        return VariantConfig(proxy_verifies=(self.variant == "proxy-verify"),
                             resolver=resolver, mac_usage=self.mac, mode=self.mode,
                             baseline=False,
                             phase1_quorum_only=self.phase1_quorum_only,
                             deterministic_targets=self.deterministic_targets)

    def scheme_name(self) -> str:
        return SIG_NAMES[self.sig]

    # -- config file round trip ------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for fld in fields(self):
            val = getattr(self, fld.name)
            if isinstance(val, bool):
                val = "true" if val else "false"
            lines.append(f"{fld.name}={val}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ScenarioConfig":
        known = {fld.name: fld for fld in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key = key.strip()
            if not sep or key not in known:
                raise ScenarioError(f"line {lineno}: bad config entry {raw!r}")
            fld = known[key]
            val = val.strip()
            if fld.type == "bool" or isinstance(getattr(cls, key, None), bool):
                kwargs[key] = val.lower() in ("1", "true", "yes", "on")
            elif fld.type == "int" or isinstance(getattr(cls, key, None), int):
                kwargs[key] = int(val)
            else:
                kwargs[key] = val
        return cls(**kwargs)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


# ---------------------------------------------------------------------------
# Fault-script grammar: comma-separated entity:index=behavior[@params]
# e.g. node:2=crash@50s,restart@80s  proxy:*=stall@0.9  client:1=split-brain
# Segments without '=' continue the previous entry's parameter list.
# ---------------------------------------------------------------------------

def _parse_time_us(text: str, pos: int) -> int:
    for suffix, mult in (("us", 1), ("ms", 1000), ("s", 1_000_000)):
        if text.endswith(suffix):
            try:
                return int(float(text[:-len(suffix)]) * mult)
            except ValueError:
                raise ScenarioError(f"column {pos}: bad duration {text!r}") from None
    try:
        return int(float(text) * 1_000_000)
    except ValueError:
        raise ScenarioError(f"column {pos}: bad duration {text!r}") from None


def parse_fault_script(script: str) -> dict[tuple[str, str], BehaviorSpec]:
    """Maps (entity kind, index-or-*) -> BehaviorSpec. Raises ScenarioError
    with the offending column on bad grammar."""
    out: dict[tuple[str, str], BehaviorSpec] = {}
    if not script.strip():
        return out
    pos = 0
    current_key = None
    for segment in script.split(","):
        seg = segment.strip()
        col = pos + 1
        pos += len(segment) + 1
        if not seg:
            continue
        if "=" in seg:
            target, _, beh = seg.partition("=")
            target = target.strip()
            if ":" not in target:
                raise ScenarioError(f"column {col}: expected entity:index in {seg!r}")
            kind, _, idx = target.partition(":")
            if kind not in ("node", "client", "proxy"):
                raise ScenarioError(f"column {col}: unknown entity kind {kind!r}")
            if idx != "*":
                try:
                    int(idx)
                except ValueError:
                    raise ScenarioError(f"column {col}: bad index {idx!r}") from None
            name, _, arg = beh.partition("@")
            name = name.strip()
            if name not in BEHAVIOR_NAMES:
                raise ScenarioError(f"column {col}: unknown behavior {name!r}")
            params = []
            if arg:
                params.append(("at" if name == "crash" else "arg", arg.strip()))
            current_key = (kind, idx)
            out[current_key] = BehaviorSpec(name, tuple(params))
        else:
            if current_key is None:
                raise ScenarioError(f"column {col}: parameter {seg!r} without a "
                                    f"behavior entry")
            name, _, arg = seg.partition("@")
            spec = out[current_key]
            out[current_key] = BehaviorSpec(
                spec.name, spec.params + ((name.strip(), arg.strip()),))
    return out


def behavior_times_us(spec: BehaviorSpec) -> dict:
    """Crash/restart times in microseconds for a crash behavior."""
    out = {}
    at = spec.param("at")
    if at is not None:
        out["at"] = _parse_time_us(at, 0)
    restart = spec.param("restart")
    if restart is not None:
        out["restart"] = _parse_time_us(restart, 0)
    return out
