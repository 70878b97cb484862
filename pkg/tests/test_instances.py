import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icam.errors import ContractError, ParseError
from icam.instances import (
    Instance, augment_x8, default_capacity, distance_matrix, generate_set, generate_uniform, load_instances,
    parse_cvrplib, read_jsonl, read_sol_cost, scale_cvrplib, serialize_cvrplib, write_jsonl,
)
from icam.rollout import tour_length

DATA = Path(__file__).parent / "data"


def test_generation_is_deterministic():
    a, b = generate_uniform("tsp", 4, seed=7), generate_uniform("tsp", 4, seed=7)
    assert np.array_equal(a.coords, b.coords)
    c = generate_uniform("cvrp", 20, capacity=(50, 100), seed=3)
    d = generate_uniform("cvrp", 20, capacity=(50, 100), seed=3)
    assert np.array_equal(c.coords, d.coords) and np.array_equal(c.demands, d.demands) and c.capacity == d.capacity


def test_generation_contracts():
    inst = generate_uniform("cvrp", 100, capacity=50, seed=1)
    assert inst.capacity == 50 and inst.demands[0] == 0
    assert inst.demands[1:].min() >= 1 and inst.demands[1:].max() <= 9
    assert generate_uniform("cvrp", 200, seed=1).capacity == 80
    assert [default_capacity(n) for n in (100, 200, 500, 1000)] == [50, 80, 100, 250]
    with pytest.raises(ContractError):
        generate_uniform("tsp", 1)
    inst = generate_uniform("tsp", 30, seed=2)
    assert inst.coords.min() >= 0 and inst.coords.max() <= 1


def test_sampled_capacity_range():
    caps = {generate_uniform("cvrp", 10, capacity=(50, 100), seed=s).capacity for s in range(200)}
    assert min(caps) >= 50 and max(caps) <= 100 and len(caps) > 20


def test_instance_invariants():
    with pytest.raises(ContractError):
        Instance("cvrp", np.zeros((3, 2)), [1, 1, 1], 5)
    with pytest.raises(ContractError):
        Instance("cvrp", np.zeros((3, 2)), [0, 9, 1], 5)
    with pytest.raises(ContractError):
        Instance("tsp", np.zeros((1, 2)))


def test_distance_matrix():
    sq = Instance("tsp", [[0, 0], [1, 0], [1, 1], [0, 1]])
    d = distance_matrix(sq)
    assert d[0, 1] == 1.0 and d[0, 2] == math.sqrt(2)
    assert distance_matrix(Instance("tsp", [[0.3, 0.3], [0.3, 0.3]]))[0, 1] == 0.0
    inst = generate_uniform("tsp", 6, seed=5)
    d = distance_matrix(inst)
    loop = [[math.hypot(*(inst.coords[i] - inst.coords[j])) for j in range(6)] for i in range(6)]
    assert np.abs(d - np.array(loop)).max() <= 1e-12
    assert np.array_equal(d, d.T) and np.all(np.diag(d) == 0)


def test_augmentation_examples():
    inst = generate_uniform("cvrp", 8, seed=4)
    imgs = augment_x8(inst)
    assert len(imgs) == 8 and np.array_equal(imgs[0].coords, inst.coords)
    d0 = distance_matrix(inst)
    for img in imgs:
        assert np.abs(distance_matrix(img) - d0).max() <= 1e-12
        assert np.array_equal(img.demands, inst.demands) and img.capacity == inst.capacity
    pt = Instance("tsp", [[0.2, 0.7], [0.5, 0.5]])
    firsts = {tuple(np.round(img.coords[0], 12)) for img in augment_x8(pt)}
    assert (0.7, 0.2) in firsts and (0.8, 0.3) in firsts
    with pytest.raises(ContractError):
        augment_x8(Instance("tsp", [[0.0, 0.0], [1.5, 0.2]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(0, 2**32 - 1))
def test_fixed_tour_equal_on_all_images(n, seed):
    inst = generate_uniform("tsp", n, seed=seed)
    order = np.random.default_rng(seed).permutation(n)
    lengths = [tour_length(img, order) for img in augment_x8(inst)]
    assert max(lengths) - min(lengths) <= 1e-12


def test_jsonl_roundtrip(tmp_path):
    insts = generate_set("cvrp", 6, 3, 9) + generate_set("tsp", 5, 2, 9)
    path = tmp_path / "x.jsonl"
    write_jsonl(insts, path)
    back = read_jsonl(path)
    for a, b in zip(insts, back):
        assert a.id == b.id and np.array_equal(a.coords, b.coords)
        if a.problem == "cvrp":
            assert np.array_equal(a.demands, b.demands) and a.capacity == b.capacity
    rec = json.loads(path.read_text().splitlines()[0])
    assert set(rec) == {"problem", "id", "coords", "demands", "capacity"}


# ---------------------------------------------------------------- CVRPLib

def test_toy_fixture_golden():
    gold = json.loads((DATA / "toy5.golden.json").read_text())
    inst = parse_cvrplib((DATA / "toy5.vrp").read_text())
    assert inst.id == gold["name"] and inst.capacity == gold["capacity"]
    assert inst.meta["node_ids"] == gold["node_ids"]
    assert inst.coords.tolist() == gold["coords"]
    assert inst.demands.tolist() == gold["demands"]
    s = scale_cvrplib(inst)
    assert s.scale == gold["scale"] and list(s.origin) == gold["origin"]


@pytest.mark.parametrize("name", ["toy5.vrp", "synth-X-n31-k5.vrp"])
def test_parse_serialize_fixed_point(name):
    inst = parse_cvrplib((DATA / name).read_text())
    text = serialize_cvrplib(inst)
    again = parse_cvrplib(text)
    assert serialize_cvrplib(again) == text
    assert np.array_equal(again.coords, inst.coords) and np.array_equal(again.demands, inst.demands)


@pytest.mark.parametrize("name", ["toy5.vrp", "synth-X-n31-k5.vrp"])
def test_scaling_contract(name):
    raw = parse_cvrplib((DATA / name).read_text())
    s = scale_cvrplib(raw)
    assert s.coords.min() >= 0 and s.coords.max() <= 1
    assert abs((s.coords.max(axis=0) - s.coords.min(axis=0)).max() - 1.0) <= 1e-15
    order = _feasible_routes(raw)
    scaled_len = tour_length(s, order) * s.scale
    orig_len = tour_length(raw, order)
    assert abs(scaled_len - orig_len) / orig_len <= 1e-9


def _feasible_routes(inst):
    order, load = [0], 0
    for i in range(1, inst.num_nodes):
        if load + inst.demands[i] > inst.capacity:
            order.append(0)
            load = 0
        order.append(i)
        load += inst.demands[i]
    return order + [0]


BAD = {
    "missing section": ("NAME : x\nTYPE : CVRP\nDIMENSION : 2\nEDGE_WEIGHT_TYPE : EUC_2D\nCAPACITY : 5\n"
                        "NODE_COORD_SECTION\n1 0 0\n2 1 1\nDEPOT_SECTION\n1\n-1\nEOF\n", 12, "DEMAND_SECTION"),
    "non euclidean": ("NAME : x\nTYPE : CVRP\nDIMENSION : 2\nEDGE_WEIGHT_TYPE : GEO\nCAPACITY : 5\n", 4, "GEO"),
    "demand over capacity": ("NAME : x\nTYPE : CVRP\nDIMENSION : 2\nEDGE_WEIGHT_TYPE : EUC_2D\nCAPACITY : 5\n"
                             "NODE_COORD_SECTION\n1 0 0\n2 1 1\nDEMAND_SECTION\n1 0\n2 6\nDEPOT_SECTION\n1\n-1\nEOF\n",
                             11, "exceeds capacity"),
}


@pytest.mark.parametrize("case", sorted(BAD))
def test_parse_errors_carry_line_numbers(case):
    text, line, needle = BAD[case]
    with pytest.raises(ParseError) as exc:
        parse_cvrplib(text)
    assert exc.value.line == line
    assert f"line {line}" in str(exc.value) and needle in str(exc.value)


def test_load_instances_dispatch(tmp_path):
    [inst] = load_instances(DATA / "toy5.vrp")
    assert inst.scale == 50.0 and inst.coords.max() <= 1
    path = tmp_path / "a.jsonl"
    write_jsonl(generate_set("tsp", 5, 2, 0), path)
    assert len(load_instances(path)) == 2


def test_sol_cost():
    assert read_sol_cost("Route #1: 1 2\nCost 27591\n") == 27591.0
    with pytest.raises(ParseError):
        read_sol_cost("nothing here")
