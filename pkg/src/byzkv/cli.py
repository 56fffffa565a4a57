"""Command-line entry point: scenario runs, cost-table checks, trace replay
and offline trace verification."""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import fields

from . import audit, costmodel
from .crypto import CryptoService
from .runner import run_scenario
from .scenario import ScenarioConfig, ScenarioError
from .trace import parse_trace_file
from .wirefmt import PublicRegistry, decode_outcome
from .workload import RunMetrics


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="config file (key=value per line, "
                                         "# comments); flags override")
    for fld in fields(ScenarioConfig):
        flag = "--" + fld.name.replace("_", "-")
        if fld.type == "bool" or isinstance(getattr(ScenarioConfig, fld.name), bool):
            parser.add_argument(flag, dest=fld.name, default=None,
                                action="store_true")
        else:
            parser.add_argument(flag, dest=fld.name, default=None)


def _build_config(args) -> ScenarioConfig:
    if args.config:
        with open(args.config) as fh:
            cfg = ScenarioConfig.from_text(fh.read())
    else:
        cfg = ScenarioConfig()
    for fld in fields(ScenarioConfig):
        val = getattr(args, fld.name, None)
        if val is None:
            continue
        default = getattr(ScenarioConfig, fld.name)
        if isinstance(default, bool):
            setattr(cfg, fld.name, bool(val))
        elif isinstance(default, int):
            setattr(cfg, fld.name, int(val))
        else:
            setattr(cfg, fld.name, str(val))
    if getattr(args, "seed", None) is None and "BYZKV_SEED" in os.environ \
            and not args.config:
        cfg.seed = int(os.environ["BYZKV_SEED"])
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _build_config(args)
    cfg.trace_evidence = True
    try:
        result = run_scenario(cfg)
    except ScenarioError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    out_dir = cfg.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    results_path = os.path.join(out_dir, "results.csv")
    with open(results_path, "w") as fh:
        fh.write(RunMetrics.CSV_HEADER + "\n")
        fh.write(result.metrics.csv_row() + "\n")
    counters_path = os.path.join(out_dir, "counters.csv")
    with open(counters_path, "w") as fh:
        fh.write("\n".join(result.crypto.counters.csv_rows()) + "\n")
    trace_path = os.path.join(out_dir, "trace.log")
    result.trace.write(trace_path)
    report = audit.audit_all(result, result.scripted)
    ok = sum(1 for r in result.records if r.status == "success")
    print(f"ops: {ok}/{len(result.records)} succeeded; "
          f"achieved throughput {result.metrics.achieved_tput:.1f} ops/s "
          f"(simulated time)")
    print(f"trace digest: {result.trace.digest()}")
    print(f"wrote {results_path}, {counters_path}, {trace_path}")
    if result.partial:
        print("warning: simulated-time cap reached before workload completion",
              file=sys.stderr)
    if not report.ok:
        for v in report.violations[:20]:
            print("VIOLATION:", v, file=sys.stderr)
        return 1
    print("audits: all invariants hold")
    return 0


def cmd_cost_check(args) -> int:
    f_values = tuple(int(x) for x in args.f.split(",")) if args.f else (1, 2)
    c_values = tuple(int(x) for x in args.C.split(",")) if args.C else (1, 10)
    m_values = tuple(int(x) for x in args.M.split(",")) if args.M else (1, 2)
    reports = costmodel.run_cost_checks(f_values, c_values, m_values,
                                        sig=args.sig,
                                        include_worst=not args.no_worst)
    failed = 0
    for rep in reports:
        print(rep.render())
        if not rep.passed:
            failed += 1
    print(f"{len(reports) - failed}/{len(reports)} checks passed")
    return 1 if failed else 0


def cmd_replay(args) -> int:
    header, _, embedded = parse_trace_file(args.trace)
    cfg_lines = [ln[len("config "):] for ln in header
                 if ln.startswith("config ") and "=" in ln]
    cfg = ScenarioConfig.from_text("\n".join(cfg_lines))
    result = run_scenario(cfg)
    digest = result.trace.digest()
    print(f"replayed digest: {digest}")
    print(f"original digest: {embedded}")
    if embedded == digest:
        print("replay: traces identical")
        return 0
    print("replay: trace mismatch", file=sys.stderr)
    return 1


def cmd_verify_trace(args) -> int:
    header, records, _ = parse_trace_file(args.trace)
    cfg_lines = [ln[len("config "):] for ln in header
                 if ln.startswith("config ") and "=" in ln]
    cfg = ScenarioConfig.from_text("\n".join(cfg_lines))
    registry = PublicRegistry.from_header(header)
    crypto = CryptoService.__new__(CryptoService)
    from .crypto import CryptoCounters, DEFAULT_DELAYS, scheme_by_name
    crypto.registry = registry
    crypto.counters = CryptoCounters()
    crypto.scheme = scheme_by_name(registry.scheme_name)
    crypto.delays = DEFAULT_DELAYS[registry.scheme_name]
    crypto.delay_hook = None
    crypto._ledger = None
    from .placement import quorum_spec, QuorumSpec
    if cfg.variant == "baseline":
        n = cfg.replication_factor()
        qspec = QuorumSpec("baseline", cfg.f, n, cfg.f + 1, cfg.f + 1)
    else:
        qspec = quorum_spec(cfg.mode, cfg.f)
    verifier = audit.EvidenceVerifier(crypto, qspec, cfg.variant_config())
    report = audit.AuditReport()
    checked = 0
    for rec in records:
        if rec.get("ev") != "EVIDENCE":
            continue
        try:
            outcome = decode_outcome(rec["detail"]["blob"])
        except Exception as exc:
            report.flag(f"evidence record at t={rec.get('t')} is corrupt: {exc}")
            continue
        verifier.check_outcome(outcome, report)
        checked += 1
    print(f"verified {checked} evidence bundles")
    if report.ok:
        print("verify-trace: every signature evidence bundle verifies")
        return 0
    for v in report.violations[:20]:
        print("VIOLATION:", v, file=sys.stderr)
    return 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="byzkv",
        description="Byzantine-hardened quorum store simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario")
    _add_config_flags(p_run)
    p_run.set_defaults(fn=cmd_run)

    p_cost = sub.add_parser("cost-check",
                            help="verify crypto-operation cost tables")
    p_cost.add_argument("--f", help="comma-separated f values (default 1,2)")
    p_cost.add_argument("--C", help="comma-separated column counts (default 1,10)")
    p_cost.add_argument("--M", help="comma-separated outdated-replica counts")
    p_cost.add_argument("--sig", default="sim")
    p_cost.add_argument("--all-variants", action="store_true", default=True)
    p_cost.add_argument("--no-worst", action="store_true")
    p_cost.set_defaults(fn=cmd_cost_check)

    p_replay = sub.add_parser("replay", help="re-run a trace's scenario and "
                                             "compare digests")
    p_replay.add_argument("trace")
    p_replay.set_defaults(fn=cmd_replay)

    p_verify = sub.add_parser("verify-trace",
                              help="re-verify every signature evidence bundle")
    p_verify.add_argument("trace")
    p_verify.set_defaults(fn=cmd_verify_trace)

    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ScenarioError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
