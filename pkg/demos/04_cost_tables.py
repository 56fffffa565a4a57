"""Crypto-operation cost accounting per protocol variant.

Measured counters from single instrumented flows against the closed-form
expectations: the optimistic write/read flows match exactly, the planted
benign-mismatch read flows match exactly, and adversarial worst cases stay
within the client-proxy request bounds.
"""

from byzkv import costmodel as cm

print("flow                                          client(p/s)  proxy(p)  nodes(p/s)")
for variant, mac in cm.WRITE_VARIANTS:
    measured, _ = cm.measure_write_flow(variant, mac, f=1, C=10)
    exp = cm.expected_counts(variant, mac, cm.FLOW_WRITE, 1, 10)
    ok = cm.check_counts("", exp, measured).passed
    c, p, n = measured["client"], measured["proxy"], measured["nodes"]
    print(f"write {variant:26s} mac={mac:5s} "
          f"{c.pk_signs + c.pk_verifies:3d}/{c.mac_signs + c.mac_verifies:<3d}"
          f"      {p.pk_verifies:3d}     "
          f"{n.pk_signs + n.pk_verifies:3d}/{n.mac_signs + n.mac_verifies:<3d}"
          f"  {'exact' if ok else 'MISMATCH'}")

print()
for M in (1, 2):
    measured, _ = cm.measure_read_mismatch_flow("proxy-verify", "none", 1, 10, M)
    exp = cm.expected_counts("proxy-verify", "none", cm.FLOW_READ_MISMATCH,
                             1, 10, M)
    ok = cm.check_counts("", exp, measured).passed
    print(f"read with {M} outdated replica(s): proxy verifies "
          f"{measured['proxy'].pk_verifies} (= 4f+1+C+M), nodes verify "
          f"{measured['nodes'].pk_verifies} (= M*C)  "
          f"{'exact' if ok else 'MISMATCH'}")

print()
out = cm.measure_worst_write("no-verify-proxy-resolve", "none", 1, 1)
print(f"worst-case no-verify write under forging proxies: "
      f"{out.proxy_requests} client-proxy requests (bound (f+1)^2 = 4)")
