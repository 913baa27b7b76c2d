import pytest
from hypothesis import given, settings, strategies as st

from failover.domain import (
    ClusterSpec, Role, TID, dp_neighbor, index_of, node_of, role_of, roles_on_node,
    validate_spec,
)


def spec_222():
    return ClusterSpec(num_nodes=1, gpus_per_node=8, d=2, p=2, t=2)


def test_role_of_identity_and_tp_fastest():
    spec = spec_222()
    assert role_of(0, spec) == Role(0, 0, 0)
    assert role_of(1, spec) == Role(0, 0, 1)
    assert role_of(2, spec) == Role(0, 1, 0)
    assert role_of(4, spec) == Role(1, 0, 0)


def test_role_index_bijection_small():
    spec = spec_222()
    assert [index_of(role_of(g, spec), spec) for g in range(8)] == list(range(8))
    assert len(set(spec.roles())) == 8


@pytest.mark.parametrize("g", [-1, 8, 100])
def test_role_of_out_of_range(g):
    with pytest.raises(IndexError):
        role_of(g, spec_222())


degrees = st.integers(min_value=1, max_value=16)


@settings(max_examples=60, deadline=None)
@given(degrees, degrees, degrees)
def test_bijection_exhaustive_for_random_shapes(d, p, t):
    spec = ClusterSpec(num_nodes=1, gpus_per_node=d * p * t, d=d, p=p, t=t)
    seen = set()
    for g in range(spec.world_size):
        role = role_of(g, spec)
        assert index_of(role, spec) == g
        seen.add(role)
    assert len(seen) == d * p * t


def test_dp_neighbor_wraps():
    spec = ClusterSpec(num_nodes=2, d=4, p=2, t=2)
    assert dp_neighbor(Role(3, 1, 1), spec) == Role(0, 1, 1)
    assert dp_neighbor(Role(0, 1, 0), spec) == Role(1, 1, 0)


@settings(max_examples=40, deadline=None)
@given(degrees, st.integers(0, 15), st.integers(0, 15))
def test_dp_neighbor_single_cycle(d, pp, tp):
    spec = ClusterSpec(num_nodes=1, gpus_per_node=d * 16 * 16, d=d, p=16, t=16)
    start = Role(0, pp, tp)
    role, visited = start, []
    for _ in range(d):
        visited.append(role)
        role = dp_neighbor(role, spec)
    assert role == start
    assert len(set(visited)) == d


def test_validate_spec():
    assert validate_spec(spec_222()) == []
    bad = validate_spec(ClusterSpec(num_nodes=1, d=3, p=2, t=2))
    assert any("d*p*t != worker count" in v for v in bad)
    zero_v = validate_spec(spec_222().replace(nic_bandwidth=0))
    assert any("rates strictly positive" in v for v in zero_v)


def test_node_placement_keeps_tp_on_one_node():
    spec = ClusterSpec(num_nodes=4, gpus_per_node=4, d=4, p=2, t=2)
    for role in spec.roles():
        peers = {node_of(Role(role.dp_index, role.pp_index, tp), spec) for tp in range(spec.t)}
        assert len(peers) == 1
    assert roles_on_node(1, spec)[0] == Role(1, 0, 0)


def test_tid_orders_by_iteration_first():
    a = TID(Role(1, 0, 0), 3)
    b = TID(Role(0, 0, 0), 4)
    c = TID(Role(0, 1, 0), 3)
    assert sorted([b, a, c]) == [c, a, b]


def test_role_string_roundtrip():
    assert Role.parse(str(Role(3, 1, 7))) == Role(3, 1, 7)
