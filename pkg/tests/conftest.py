import pytest

from gridrelief import (
    FORMULATIONS,
    Branch,
    Bus,
    Demand,
    Machine,
    Network,
    RunConfig,
    bundled_case,
    load_case,
    prepare_scenario,
    run_scenario,
)


TWO_BUS_CASE = """function mpc = two_bus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	50	10	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0	0	0	0	0	0	0	0	0	0	0	0;
];
mpc.branch = [
	1	2	0.1	0.1	0	500	0	0	0	0	1	-360	360;
];
"""


def two_bus_network(load=0.0, imax=5.0) -> Network:
    buses = (Bus(1, 0.9, 1.1, is_slack=True), Bus(2, 0.9, 1.1))
    branches = (Branch(1, 1, 2, 0.1, 0.1, imax=imax),)
    machines = (Machine(1, 0.0, 2.0, -1.0, 1.0),)
    demands = (Demand(2, load, 0.0),) if load else ()
    return Network(buses, branches, machines, demands)


@pytest.fixture
def two_bus():
    return two_bus_network()


@pytest.fixture(scope="session")
def rts():
    return load_case(bundled_case())


@pytest.fixture(scope="session")
def emergency_config():
    return RunConfig(str(bundled_case()), "linear-taylor", load_scale=1.15, contingency_bus=24, reference="post")


@pytest.fixture(scope="session")
def emergency_scenario(emergency_config):
    return prepare_scenario(emergency_config)


@pytest.fixture(scope="session")
def emergency_reports(emergency_config, emergency_scenario):
    from dataclasses import replace

    return {k: run_scenario(replace(emergency_config, formulation=k), emergency_scenario, write=False) for k in FORMULATIONS}
