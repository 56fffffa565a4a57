"""Byzantine fault injection: a node that always answers with bad signatures,
a split-brain-writing client/proxy pair, and an acknowledgment-forging proxy.

Every run below completes all operations; the audits re-verify, from logged
evidence alone, that no forged or stale value ever reached a client.
"""

from byzkv import audit
from byzkv.runner import run_scenario
from byzkv.scenario import ScenarioConfig

SCRIPTS = [
    ("honest baseline", ""),
    ("bad-signature replica", "node:1=bad-sig"),
    ("stale replier", "node:1=stale"),
    ("ack-forging proxy", "proxy:1=forge-acks"),
    ("split-brain colluders", "proxy:1=split-brain,client:0=split-brain"),
]

for label, fault in SCRIPTS:
    cfg = ScenarioConfig(f=1, variant="no-verify-proxy-resolve", mac="full",
                         sig="sim", workload="A", records=50, ops=600,
                         clients=20, columns=1, seed=11, fault=fault)
    res = run_scenario(cfg)
    ok = sum(1 for r in res.records if r.status == "success")
    alerts = res.trace.count("ALERT")
    report = audit.audit_all(res, res.scripted)
    print(f"{label:24s} ops ok {ok}/{len(res.records)}  Byzantine alerts "
          f"{alerts:4d}  audit: {'clean' if report.ok else report.violations[:1]}")
