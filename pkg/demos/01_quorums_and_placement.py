"""Byzantine quorum arithmetic and consistent-hash placement.

Strong mode needs N = 3f+1 replicas with read/write quorums of 2f+1: any two
quorums intersect in at least f+1 nodes, so at least one correct node bridges
every write to every later read. Eventual mode shrinks the replication set to
2f+1 with quorums of f+1 and leans on anti-entropy for propagation.
"""

from itertools import combinations

from byzkv.crypto import node_id
from byzkv.placement import Ring, quorum_spec

print("mode      f   N   R   W   min quorum intersection")
for mode in ("strong", "eventual"):
    for f in (1, 2, 3):
        s = quorum_spec(mode, f)
        worst = min(len(set(a) & set(b))
                    for a in combinations(range(s.n), s.r)
                    for b in combinations(range(s.n), s.w))
        print(f"{mode:9s} {f}   {s.n}   {s.r}   {s.w}   {worst}")

print()
ring = Ring.generate([node_id(i) for i in range(6)], replication_factor=4,
                     seed=7, vnodes=8)
for key in (b"alpha", b"bravo", b"charlie"):
    replicas = ring.replication_set(key)
    print(f"replication set for {key.decode():8s}: "
          f"{[str(n) for n in replicas]}")
