"""Synchronous client session facade.

``open_session`` returns a handle whose ``write``/``read``/``delete`` calls
block, from the caller's point of view, until the operation completes with a
timeout-bounded outcome. Inside the simulator "blocking" means driving the
event loop; over the socket transport it means waiting on a real event.
"""

from __future__ import annotations

from .client import OperationOutcome
from .crypto import client_id
from .runner import World


class Session:
    def __init__(self, world: World, client_index: int = 0,
                 op_cap_us: int = 120_000_000):
        self.world = world
        self.client = world.clients[client_id(client_index)]
        self.op_cap_us = op_cap_us
        self.closed = False

    def _drive(self, start_fn) -> OperationOutcome:
        if self.closed:
            raise RuntimeError("session closed")
        box = {}

        def cb(outcome):
            box["out"] = outcome
            self.world.sim.request_stop()

        start_fn(cb)
        self.world.sim.run(until_us=self.world.sim.now + self.op_cap_us)
        if "out" not in box:
            raise TimeoutError("operation did not complete inside the cap")
        return box["out"]

    def write(self, key: bytes, cells: dict[str, bytes]) -> OperationOutcome:
        return self._drive(lambda cb: self.client.start_write(key, cells, cb))

    def read(self, key: bytes) -> OperationOutcome:
        return self._drive(lambda cb: self.client.start_read(key, cb))

    def delete(self, key: bytes, column: str) -> OperationOutcome:
        return self._drive(lambda cb: self.client.start_delete(key, column, cb))

    def close(self) -> None:
        self.closed = True


def open_session(world: World, client_index: int = 0) -> Session:
    return Session(world, client_index)
