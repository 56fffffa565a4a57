"""Real-socket service mode: the same node and client code served over local
TCP with wall-clock timers. Smoke-test only; determinism guarantees apply to
the simulated transport, not to this mode."""

from __future__ import annotations

import pickle
import random
import socket
import socketserver
import struct
import threading
import time

from .client import ClientProcess
from .crypto import CryptoService, KeyRegistry, client_id, node_id
from .membership import MembershipView
from .node import NodeTimers, ProtocolNode
from .placement import Ring, quorum_spec
from . import membership as mb
from .scenario import ScenarioConfig
from .storage import GcPolicy, NodeStore


def _send_frame(sock: socket.socket, payload: bytes) -> None:
    sock.sendall(struct.pack(">I", len(payload)) + payload)


def _recv_frame(sock: socket.socket) -> bytes | None:
    head = b""
    while len(head) < 4:
        chunk = sock.recv(4 - len(head))
        if not chunk:
            return None
        head += chunk
    size = struct.unpack(">I", head)[0]
    body = b""
    while len(body) < size:
        chunk = sock.recv(size - len(body))
        if not chunk:
            return None
        body += chunk
    return body


class SocketRuntime:
    def __init__(self, entity, hub: "SocketHub"):
        self.entity = entity
        self.hub = hub
        self.rng = random.Random(hub.seed ^ entity.index)

    def now(self) -> int:
        return int((time.monotonic() - self.hub.epoch) * 1e6)

    def local_clock_us(self) -> int:
        return self.now()

    def send(self, dst, msg) -> None:
        self.hub.transmit(self.entity, dst, msg)

    def set_timer(self, delay_us: int, tag) -> None:
        proc = self.hub.procs[self.entity]
        timer = threading.Timer(delay_us / 1e6, self.hub.fire_timer, (proc, tag))
        timer.daemon = True
        timer.start()

    def trace(self, ev, **detail) -> None:
        pass

    def alert(self, reason, **detail) -> None:
        pass


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            frame = _recv_frame(self.request)
            if frame is None:
                return
            src, dst, msg = pickle.loads(frame)
            self.server.hub.deliver(src, dst, msg)


class SocketHub:
    """Frame routing plus one lock per process (run-to-completion handlers)."""

    def __init__(self, seed: int):
        self.seed = seed
        self.epoch = time.monotonic()
        self.procs = {}
        self.locks = {}
        self.addrs = {}
        self.servers = []

    def add(self, entity, proc) -> None:
        self.procs[entity] = proc
        self.locks[entity] = threading.Lock()
        server = socketserver.ThreadingTCPServer(("127.0.0.1", 0), _Handler)
        server.daemon_threads = True
        server.hub = self
        self.addrs[entity] = server.server_address
        self.servers.append(server)
        t = threading.Thread(target=server.serve_forever, daemon=True)
        t.start()
        proc.rt = SocketRuntime(entity, self)

    def transmit(self, src, dst, msg) -> None:
        payload = pickle.dumps((src, dst, msg))
        sock = socket.create_connection(self.addrs[dst], timeout=5)
        try:
            _send_frame(sock, payload)
        finally:
            sock.close()

    def deliver(self, src, dst, msg) -> None:
        proc = self.procs[dst]
        with self.locks[dst]:
            proc.handle_message(src, msg)

    def fire_timer(self, proc, tag) -> None:
        with self.locks[proc.entity]:
            proc.handle_timer(tag)

    def shutdown(self) -> None:
        for server in self.servers:
            server.shutdown()
            server.server_close()


def run_socket_smoke(f: int = 1, seed: int = 1, ops: int = 4,
                     timeout_s: float = 20.0) -> bool:
    """Spin a cluster over localhost TCP, write and read back a few rows."""
    cfg = ScenarioConfig(f=f, variant="no-verify-proxy-resolve", mac="full",
                         sig="sim", clients=1, seed=seed)
    qspec = quorum_spec("strong", f)
    n = qspec.n
    registry = KeyRegistry.build("sim", n, 1, seed)
    crypto = CryptoService(registry)
    nodes = [node_id(i) for i in range(n)]
    ring = Ring.generate(nodes, n, seed, vnodes=2)
    records = [mb.sign_record(crypto, nid, ring.tokens_of(nid),
                              f"tcp://{nid.index}", 1) for nid in nodes]
    hub = SocketHub(seed)
    timers = NodeTimers(gossip_period_us=0, ae_period_us=0, gc_period_us=0,
                        proxy_timeout_us=2_000_000)
    variant = cfg.variant_config()
    for nid in nodes:
        view = MembershipView({r.node: r for r in records})
        node = ProtocolNode(nid, crypto, NodeStore(GcPolicy()), variant, qspec,
                            timers, seeds=nodes[:f + 1], view=view,
                            merkle_depth=8)
        hub.add(nid, node)
    client = ClientProcess(client_id(0), crypto, variant, qspec, ring,
                           MembershipView({r.node: r for r in records}),
                           client_timeout_us=4_000_000, columns=("field0",))
    hub.add(client_id(0), client)
    try:
        ok = True
        for i in range(ops):
            key = b"smoke-%d" % i
            value = b"value-%d" % i
            done = threading.Event()
            state = {}

            def cb(outcome, done=done, state=state):
                state["out"] = outcome
                done.set()

            with hub.locks[client.entity]:
                client.start_write(key, {"field0": value}, cb)
            if not done.wait(timeout_s):
                return False
            ok &= state["out"].status == "success"
            done2 = threading.Event()
            state2 = {}

            def cb2(outcome, done2=done2, state2=state2):
                state2["out"] = outcome
                done2.set()

            with hub.locks[client.entity]:
                client.start_read(key, cb2)
            if not done2.wait(timeout_s):
                return False
            out = state2["out"]
            ok &= out.status == "success" and out.value and \
                out.value[0].value == value
        return ok
    finally:
        hub.shutdown()
