import pytest

from byzkv.crypto import client_id
from byzkv.runner import World
from byzkv.scenario import ScenarioConfig


def small_config(**kw):
    base = dict(f=1, variant="proxy-verify", sig="sim", workload="A",
                records=12, ops=20, clients=2, columns=2, seed=5)
    base.update(kw)
    return ScenarioConfig(**base)


def build_world(**kw) -> World:
    world = World(small_config(**kw))
    world.stabilize()
    return world


def run_op(world: World, start_fn, cap_us=60_000_000):
    done = {}

    def cb(outcome):
        done["out"] = outcome
        world.sim.request_stop()

    start_fn(cb)
    world.sim.run(until_us=world.sim.now + cap_us)
    world.sim._stop = False
    return done.get("out")


def client0(world: World):
    return world.clients[client_id(0)]


@pytest.fixture
def world():
    return build_world()
