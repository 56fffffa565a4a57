import pytest

from byzkv import costmodel as cm


def counts(d):
    return {role: (c.pk_signs, c.pk_verifies, c.mac_signs, c.mac_verifies)
            for role, c in d.items()}


def test_proxy_verifies_write_f1_c10():
    got = cm.expected_counts("proxy-verify", "none", cm.FLOW_WRITE, 1, 10)
    assert counts(got) == {"client": (10, 3, 0, 0),
                           "proxy": (0, 3, 0, 0),
                           "nodes": (4, 40, 0, 0)}


def test_full_sym_write_f1_c10():
    got = cm.expected_counts("no-verify-proxy-resolve", "full", cm.FLOW_WRITE,
                             1, 10)
    assert counts(got) == {"client": (10, 0, 4, 3),
                           "proxy": (0, 0, 0, 0),
                           "nodes": (0, 0, 4, 4)}


def test_proxy_verifies_read_mismatch_f1_c10_m1():
    got = cm.expected_counts("proxy-verify", "none", cm.FLOW_READ_MISMATCH,
                             1, 10, 1)
    assert counts(got) == {"client": (0, 4, 0, 0),
                           "proxy": (0, 16, 0, 0),
                           "nodes": (7, 10, 0, 0)}


def test_half_sym_read():
    got = cm.expected_counts("no-verify-proxy-resolve", "half", cm.FLOW_READ,
                             2, 1)
    assert counts(got) == {"client": (0, 0, 0, 5),
                           "proxy": (0, 0, 0, 0),
                           "nodes": (0, 0, 5, 0)}


def test_client_resolve_mismatch_formulas():
    got = cm.expected_counts("no-verify-client-resolve", "none",
                             cm.FLOW_READ_MISMATCH, 1, 10, 2)
    assert counts(got)["client"] == (0, 3 + 10 + 2, 0, 0)
    got = cm.expected_counts("no-verify-client-resolve", "half",
                             cm.FLOW_READ_MISMATCH, 1, 10, 2)
    assert counts(got)["client"] == (0, 10, 0, 3 + 2)


def test_baseline_all_zero():
    got = cm.expected_counts("baseline", "none", cm.FLOW_WRITE, 1, 10)
    assert all(c.total() == 0 for c in got.values())


def test_domain_errors():
    with pytest.raises(cm.CostDomainError):
        cm.expected_counts("proxy-verify", "none", cm.FLOW_WRITE, 1, 0)
    with pytest.raises(cm.CostDomainError):
        cm.expected_counts("proxy-verify", "none", cm.FLOW_READ_MISMATCH,
                           1, 1, 3)  # M > 2f
    with pytest.raises(cm.CostDomainError):
        cm.expected_counts("nope", "none", cm.FLOW_WRITE, 1, 1)
    with pytest.raises(cm.CostDomainError):
        cm.expected_counts("proxy-verify", "none", "bad-flow", 1, 1)


def test_formulas_nonnegative_over_domain():
    for variant, mac in cm.WRITE_VARIANTS:
        for f in range(0, 4):
            for C in (1, 5, 10):
                got = cm.expected_counts(variant, mac, cm.FLOW_WRITE, f, C)
                for c in got.values():
                    assert min(c.pk_signs, c.pk_verifies, c.mac_signs,
                               c.mac_verifies) >= 0
    for variant, mac in cm.READ_VARIANTS:
        for f in (1, 2, 3):
            for M in range(1, 2 * f + 1):
                got = cm.expected_counts(variant, mac, cm.FLOW_READ_MISMATCH,
                                         f, 3, M)
                for c in got.values():
                    assert min(c.pk_signs, c.pk_verifies, c.mac_signs,
                               c.mac_verifies) >= 0


def test_worst_case_request_bounds():
    assert cm.worst_case_requests("proxy-verify", cm.FLOW_WORST_WRITE, 1) == 2
    assert cm.worst_case_requests("no-verify-proxy-resolve",
                                  cm.FLOW_WORST_WRITE, 1) == 4
    assert cm.worst_case_requests("no-verify-proxy-resolve",
                                  cm.FLOW_WORST_WRITE, 2) == 9
    assert cm.worst_case_requests("no-verify-client-resolve",
                                  cm.FLOW_WORST_READ, 1, M=2) == 4 + 3 * 2


def test_measured_write_flow_matches_table_one():
    measured, outcome = cm.measure_write_flow("proxy-verify", "none", 1, 10)
    expected = cm.expected_counts("proxy-verify", "none", cm.FLOW_WRITE, 1, 10)
    assert cm.check_counts("t", expected, measured).passed
    assert outcome.proxy_requests == 1


def test_measured_mismatch_flow_matches_table_two():
    measured, _ = cm.measure_read_mismatch_flow("no-verify-proxy-resolve",
                                                "half", 1, 10, 1)
    expected = cm.expected_counts("no-verify-proxy-resolve", "half",
                                  cm.FLOW_READ_MISMATCH, 1, 10, 1)
    assert cm.check_counts("t", expected, measured).passed


def test_check_report_flags_mismatch():
    expected = cm.expected_counts("proxy-verify", "none", cm.FLOW_WRITE, 1, 1)
    measured = cm._zero()
    report = cm.check_counts("broken", expected, measured)
    assert not report.passed
    assert "FAIL" in report.render()
