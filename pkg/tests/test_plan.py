import copy
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autovarp.errors import ParseError, PlanReferenceError, SchemaError, UnknownFunction
from autovarp.plan import (load_plan, load_protocols, merge_subject_overrides, plan_from_dict,
                           plan_hash, plan_to_dict, save_plan, serialize, with_protocols,
                           write_measured_velocities)


def test_slab_plan_parses(plan_dict):
    plan = plan_from_dict(plan_dict)
    assert set(plan.functions) == {"ht_tissue", "bz_tissue", "scar"}
    assert plan.functions["scar"].is_scar
    assert plan.configurations["borderzone"].tags == (2, 3)
    assert plan.solver_setup.stimulus_strength == 40.0
    assert plan.functions["ht_tissue"].reference.vf == 0.6


def test_round_trip_is_stable(plan_dict, tmp_path):
    plan = plan_from_dict(plan_dict)
    save_plan(plan, tmp_path / "p.json")
    again = load_plan(tmp_path / "p.json")
    assert again == plan
    assert serialize(again) == serialize(plan)
    assert plan_hash(again) == plan_hash(plan)


def test_unknown_key_names_the_path(plan_dict):
    plan_dict["electrodes"]["definitions"]["S1200-RAD"]["colour"] = "red"
    with pytest.raises(SchemaError, match=r"electrodes\.definitions\.S1200-RAD\.colour"):
        plan_from_dict(plan_dict)


def test_version_mismatch(plan_dict):
    plan_dict["functions"]["version"] = 1
    with pytest.raises(SchemaError, match="version"):
        plan_from_dict(plan_dict)


def test_protocol_with_two_electrodes_rejected(plan_dict):
    plan_dict["protocols"]["prepacing"]["protocol_1"]["electrodes"] = ["S1200-RAD", "S0130-RAD"]
    with pytest.raises(SchemaError, match="exactly one electrode"):
        plan_from_dict(plan_dict)


def test_dangling_references(plan_dict):
    d = copy.deepcopy(plan_dict)
    d["protocols"]["prepacing"]["protocol_1"]["electrodes"] = "nowhere"
    with pytest.raises(PlanReferenceError, match="nowhere"):
        plan_from_dict(d)
    d = copy.deepcopy(plan_dict)
    d["configurations"]["definitions"]["healthy"]["func"] = "ghost"
    with pytest.raises(PlanReferenceError, match="ghost"):
        plan_from_dict(d)


def test_duplicate_tag_rejected(plan_dict):
    plan_dict["configurations"]["definitions"]["healthy"]["tags"] = [1, 2]
    with pytest.raises(SchemaError, match="tag 2"):
        plan_from_dict(plan_dict)


def test_output_interval_must_be_step_multiple(plan_dict):
    plan_dict["solver_setup"]["output_interval"] = 0.07
    with pytest.raises(SchemaError, match="multiple of dt"):
        plan_from_dict(plan_dict)


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ParseError):
        load_plan(p)


def test_external_protocols_replace_plan_order(plan_dict, tmp_path):
    plan = plan_from_dict(plan_dict)
    prots = {"version": 2, "prepacing": {
        name: {"propagation": "rd", "num_cycles": 10, "bcl": 500.0, "electrodes": name}
        for name in ("S0600-RAD", "S1200-RAD", "S0300-RAD")}}
    path = tmp_path / "varp_protocols.json"
    path.write_text(json.dumps(prots))
    loaded = load_protocols(path, plan)
    assert [p.name for p in loaded] == ["S0600-RAD", "S1200-RAD", "S0300-RAD"]
    assert list(with_protocols(plan, loaded).protocols) == [p.name for p in loaded]


def test_subject_overrides_move_tags(plan_dict, tmp_path):
    plan = plan_from_dict(plan_dict)
    subj = tmp_path / "subj"
    subj.mkdir()
    (subj / "configurations.json").write_text(json.dumps({"version": 2, "definitions": {
        "isthmus": {"tags": [3], "func": "scar"}}}))
    (subj / "electrodes.json").write_text(json.dumps({"version": 2, "definitions": {
        "extra": {"type": "node_list", "nodes": [0, 1, 2]}}}))
    merged = merge_subject_overrides(plan, subj)
    assert merged.configurations["borderzone"].tags == (2,)
    assert merged.configurations["isthmus"].func == "scar"
    assert merged.electrodes["extra"].nodes == (0, 1, 2)
    assert plan.configurations["borderzone"].tags == (2, 3)


def test_measured_velocity_write_back(plan_dict, tmp_path):
    path = tmp_path / "planfile.json"
    path.write_text(json.dumps(plan_dict))
    write_measured_velocities(path, "ht_tissue", {"vf": 0.61, "vs": 0.2, "vn": None})
    plan = load_plan(path)
    assert plan.functions["ht_tissue"].measured.vf == 0.61
    assert plan.functions["ht_tissue"].measured.vn is None
    with pytest.raises(UnknownFunction):
        write_measured_velocities(path, "scar", {"vf": 1.0, "vs": 1.0, "vn": 1.0})


@settings(max_examples=40, deadline=None)
@given(bcl=st.floats(100, 2000), cycles=st.integers(1, 500),
       radius=st.floats(0.1, 5.0), strength=st.one_of(st.none(), st.floats(1.0, 200.0)))
def test_serialize_parse_round_trip(bcl, cycles, radius, strength):
    from autovarp.slab import slab_plan
    d = slab_plan()
    d["protocols"]["prepacing"]["protocol_1"].update(bcl=bcl, num_cycles=cycles)
    d["electrodes"]["definitions"]["S0600-RAD"]["radius"] = radius
    d["solver_setup"]["stimulus"]["strength"] = strength
    plan = plan_from_dict(d)
    assert plan_from_dict(plan_to_dict(plan)) == plan
