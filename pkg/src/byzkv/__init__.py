"""byzkv: a Byzantine-hardened wide-column quorum store running inside a
deterministic discrete-event network simulator."""

from .crypto import (ADMIN, CryptoCounters, CryptoService, EntityId,
                     KeyRegistry, client_id, digest, node_id)
from .placement import QuorumSpec, Ring, quorum_spec
from .scenario import ScenarioConfig
from .storage import GcPolicy, NodeStore, VersionedCell

__all__ = [
    "ADMIN", "CryptoCounters", "CryptoService", "EntityId", "KeyRegistry",
    "client_id", "digest", "node_id", "QuorumSpec", "Ring", "quorum_spec",
    "ScenarioConfig", "GcPolicy", "NodeStore", "VersionedCell",
    "run_scenario", "open_session",
]


def run_scenario(cfg):
    from .runner import run_scenario as _run
    return _run(cfg)


def open_session(world, client_index: int = 0):
    from .session import open_session as _open
    return _open(world, client_index)
