import os

import pytest

from byzkv.cli import main
from byzkv.scenario import (BehaviorSpec, ScenarioConfig, ScenarioError,
                            behavior_times_us, parse_fault_script)


def run_args(tmp_path, *extra):
    return ["run", "--f", "1", "--variant", "no-verify-proxy-resolve",
            "--sig", "sim", "--mac", "full", "--workload", "A",
            "--seed", "7", "--ops", "40", "--records", "15", "--clients", "3",
            "--columns", "1", "--out-dir", str(tmp_path), *extra]


def test_config_round_trip_digest():
    cfg = ScenarioConfig(f=2, variant="no-verify-client-resolve", sig="ecdsa",
                         mac="half", workload="D", seed=99, fault="node:1=silent")
    text = cfg.to_text()
    again = ScenarioConfig.from_text(text)
    assert again == cfg
    assert again.digest() == cfg.digest()


def test_config_file_comments_and_errors(tmp_path):
    good = "f=2\nmode=strong # inline comment\n# full line comment\nsig=ecdsa\n"
    cfg = ScenarioConfig.from_text(good)
    assert cfg.f == 2 and cfg.sig == "ecdsa"
    with pytest.raises(ScenarioError) as err:
        ScenarioConfig.from_text("f=1\nbogus_key=3\n")
    assert "line 2" in str(err.value)


def test_fault_grammar():
    script = "node:2=crash@50s,restart@80s,proxy:1=stall@0.9,client:0=split-brain"
    out = parse_fault_script(script)
    assert out[("node", "2")].name == "crash"
    times = behavior_times_us(out[("node", "2")])
    assert times == {"at": 50_000_000, "restart": 80_000_000}
    assert out[("proxy", "1")] == BehaviorSpec("stall", (("arg", "0.9"),))
    assert out[("client", "0")].name == "split-brain"


def test_fault_grammar_errors_report_position():
    with pytest.raises(ScenarioError) as err:
        parse_fault_script("orphan-param,node:2=bad-sig")
    assert "column" in str(err.value)
    with pytest.raises(ScenarioError):
        parse_fault_script("widget:1=silent")
    with pytest.raises(ScenarioError):
        parse_fault_script("node:x=silent")
    with pytest.raises(ScenarioError):
        parse_fault_script("node:1=explode")


def test_scenario_validation():
    with pytest.raises(ScenarioError):
        ScenarioConfig(variant="baseline", mac="full").validate()
    with pytest.raises(ScenarioError):
        ScenarioConfig(variant="proxy-verify", mac="half").validate()
    with pytest.raises(ScenarioError):
        ScenarioConfig(variant="proxy-verify", f=0).validate()
    ScenarioConfig(variant="baseline", f=1).validate()


def test_cli_run_writes_outputs(tmp_path, capsys):
    code = main(run_args(tmp_path))
    out = capsys.readouterr().out
    assert code == 0
    assert "40/40 succeeded" in out
    assert os.path.exists(tmp_path / "results.csv")
    assert os.path.exists(tmp_path / "counters.csv")
    assert os.path.exists(tmp_path / "trace.log")
    header = open(tmp_path / "results.csv").readline()
    assert header.startswith("variant,mode,f,sig,mac,workload")
    counters = open(tmp_path / "counters.csv").readline().strip()
    assert counters == "entity,pk_signs,pk_verifies,mac_signs,mac_verifies"


def test_cli_run_with_fault_script(tmp_path):
    code = main(run_args(tmp_path, "--fault", "node:3=bad-sig"))
    assert code == 0


def test_cli_verify_trace_ok_and_detects_corruption(tmp_path, capsys):
    assert main(run_args(tmp_path)) == 0
    trace = str(tmp_path / "trace.log")
    assert main(["verify-trace", trace]) == 0
    capsys.readouterr()
    # flip one hex nibble inside an evidence blob
    lines = open(trace).read().splitlines()
    for i, line in enumerate(lines):
        if "ev=EVIDENCE" in line:
            k = line.rindex("blob=") + 5 + 40
            ch = "0" if line[k] != "0" else "1"
            lines[i] = line[:k] + ch + line[k + 1:]
            break
    with open(trace, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    assert main(["verify-trace", trace]) == 1


def test_cli_replay_matches(tmp_path, capsys):
    assert main(run_args(tmp_path, "--trace-messages")) == 0
    capsys.readouterr()
    assert main(["replay", str(tmp_path / "trace.log")]) == 0
    out = capsys.readouterr().out
    assert "traces identical" in out


def test_cli_cost_check_subcommand(capsys):
    code = main(["cost-check", "--f", "1", "--C", "10", "--M", "1",
                 "--no-worst"])
    out = capsys.readouterr().out
    assert code == 0
    assert "checks passed" in out
    assert "[PASS] write proxy-verify/none f=1 C=10" in out


def test_cli_usage_error_exit_code(tmp_path):
    code = main(["run", "--f", "1", "--variant", "baseline", "--mac", "full",
                 "--out-dir", str(tmp_path)])
    assert code == 2


def test_cli_seed_env_fallback(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("BYZKV_SEED", "31337")
    code = main(["run", "--variant", "baseline", "--sig", "none",
                 "--ops", "10", "--records", "5", "--clients", "2",
                 "--workload", "C", "--out-dir", str(tmp_path)])
    assert code == 0
    header, _, _ = _read_trace_header(tmp_path / "trace.log")
    assert "config seed=31337" in header


def _read_trace_header(path):
    from byzkv.trace import parse_trace_file
    return parse_trace_file(str(path))


def test_exit_nonzero_when_ops_cannot_complete(tmp_path, capsys):
    # all proxies stall forever: the workload cannot finish inside the cap
    code = main(run_args(tmp_path, "--fault", "node:1=crash@0.5s",
                         "--ops", "30", "--time-cap-s", "30"))
    # a single crashed node is tolerated: still zero
    assert code == 0
