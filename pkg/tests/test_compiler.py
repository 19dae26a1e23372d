"""Compiler phases: resolution, cycles, entailment, chains, conservation,
refinement flattening, metadata and classification."""

import random

from mechlang.compiler import (
    ModelContext,
    check_chain,
    check_conservation,
    compile_document,
)
from mechlang.diagnostics import ERROR, WARNING
from mechlang.model import (
    Aggregate,
    AndExpr,
    Cmp,
    Mechanism,
    QualityState,
    QualityValue,
    SetQuality,
    Transitional,
    TransitionalUnit,
)
from mechlang.parser import parse_mech
from mechlang.serializer import serialize_mech


def _compile_text(text, name="test.mech", **kwargs):
    parsed = parse_mech(text, name)
    assert parsed.ok, [d.render() for d in parsed.diagnostics]
    return compile_document(parsed.document, **kwargs)


def _codes(result):
    return [d.code for d in result.diagnostics]


# ---------------------------------------------------------------------------
# whole-corpus compilation and classification
# ---------------------------------------------------------------------------


def test_corpus_compiles_with_zero_diagnostics(corpus_docs):
    for name, doc in corpus_docs.items():
        result = compile_document(doc)
        assert result.ok, name
        assert result.diagnostics == (), (name, _codes(result))


def test_water_is_simple_linear(compiled_corpus):
    model = compiled_corpus["water.mech"]
    classification = model.classifications["water_synthesis"]
    assert classification.inferred == "SimpleLinear"
    assert not classification.concurrent and not classification.cyclic_marking


def test_tank_is_concurrent_with_cyclic_marking(compiled_corpus):
    model = compiled_corpus["tank.mech"]
    classification = model.classifications["tank_drain_refill"]
    assert classification.inferred == "Concurrent"
    assert classification.concurrent
    assert classification.cyclic_marking
    assert classification.describe() == "Concurrent (cyclic marking structure)"


def test_single_unit_mechanism_is_simple_linear():
    text = """
aggregate x { quality on: boolean false }
transitional flip { kind: quality-change  set x.on = true }
unit only { when: x.on == false  do: flip  then: x.on == true }
mechanism solo {
  metadata {
    mechanism_type: SimpleLinear
    function_type: Designed
    author: "a" date: "2026-01-01" version: "1"
  }
  phenomenon { setup: x.on == false  termination: x.on == true }
  part x: functional
  unit only
}
"""
    result = _compile_text(text)
    assert result.ok
    assert result.model.classifications["solo"].inferred == "SimpleLinear"


def test_declared_type_mismatch_is_a_warning_and_declaration_wins():
    text = """
aggregate x { quality on: boolean false }
transitional flip { kind: quality-change  set x.on = true }
unit only { when: x.on == false  do: flip  then: x.on == true }
mechanism solo {
  metadata {
    mechanism_type: Cyclic
    function_type: Designed
    author: "a" date: "2026-01-01" version: "1"
  }
  phenomenon { setup: x.on == false  termination: x.on == true }
  part x: functional
  unit only
}
"""
    result = _compile_text(text)
    assert result.ok
    warnings = [d for d in result.diagnostics if d.severity == WARNING]
    assert [d.code for d in warnings] == ["TYPE_MISMATCH"]
    # the declaration is kept
    assert result.model.context.mechanisms["solo"].metadata.mechanism_type == "Cyclic"


def test_non_inferable_declared_types_are_accepted_silently(compiled_corpus):
    # declared Asynchronous, inferred SimpleLinear: no TYPE_MISMATCH
    model = compiled_corpus["traffic.mech"]
    assert model.warnings == ()
    assert model.classifications["traffic_control"].inferred == "SimpleLinear"


# ---------------------------------------------------------------------------
# chain checking
# ---------------------------------------------------------------------------


def test_water_chain_is_clean(compiled_corpus):
    ctx = compiled_corpus["water.mech"].context
    assert check_chain(ctx.mechanisms["water_synthesis"], ctx) == []


def test_chain_mismatch_on_mutated_requirement(corpus_texts):
    text = corpus_texts["water.mech"].replace(
        "when: species_Hplus.count == 4", "when: species_Hplus.count == 5", 1
    )
    result = _compile_text(text, "broken_water.mech")
    assert not result.ok
    assert _codes(result) == ["CHAIN_MISMATCH"]
    diag = result.diagnostics[0]
    assert "combination" in diag.message
    assert "decomposition" in diag.message
    assert diag.related, "the producer's span must be attached"
    # primary span covers the combination unit, related covers decomposition
    parsed = parse_mech(text, "broken_water.mech").document
    units = {u.id: u for u in parsed.units}
    assert diag.span.start_line == units["combination"].span.start_line
    assert diag.related[0].start_line == units["decomposition"].span.start_line


def test_chain_single_unit_fed_by_setup_is_clean():
    ctx = ModelContext()
    ctx.aggregates["x"] = Aggregate("x", qualities={"on": QualityValue.boolean(False)})
    ctx.transitionals["t"] = Transitional(
        "t", effects=(SetQuality("x", "on", QualityValue.boolean(True)),)
    )
    ctx.units["u"] = TransitionalUnit(
        "u",
        inputs=QualityState("x", "on", Cmp.EQ, QualityValue.boolean(False)),
        transitional="t",
    )
    mech = Mechanism("m", parts=(("x", "functional"),), organization=("u",))
    ctx.mechanisms["m"] = mech
    assert check_chain(mech, ctx) == []


def test_unreachable_unit_is_a_warning_not_an_error():
    text = """
aggregate a { quality on: boolean false }
aggregate b { quality on: boolean false }
aggregate c { quality on: boolean false }
transitional set_b { kind: quality-change  set b.on = true }
transitional set_any { kind: quality-change  set a.on = true }
unit needs_c { when: c.on == true  do: set_b  then: b.on == true }
unit needs_b { when: b.on == true  do: set_any  then: a.on == true }
mechanism m {
  metadata { mechanism_type: SimpleLinear function_type: Designed author: "a" date: "d" version: "1" }
  phenomenon { setup: a.on == false  termination: a.on == true }
  part a: functional
  part b: functional
  part c: functional
  unit needs_c
  unit needs_b
}
"""
    result = _compile_text(text)
    assert not result.ok
    by_code = {(d.code, d.severity) for d in result.diagnostics}
    # nothing produces c.on == true: a hard mismatch for needs_c; needs_b
    # could be fed by needs_c's output, so it is merely unreachable
    assert ("CHAIN_MISMATCH", ERROR) in by_code
    assert ("UNREACHABLE_UNIT", WARNING) in by_code


def _random_boolean_mechanism(rng):
    """Token-free world of boolean qualities, for chain-oracle comparison."""
    n_aggs = rng.randint(2, 4)
    ctx = ModelContext()
    initial = {}
    for i in range(n_aggs):
        value = rng.random() < 0.5
        initial[f"a{i}"] = value
        ctx.aggregates[f"a{i}"] = Aggregate(
            f"a{i}", qualities={"on": QualityValue.boolean(value)}
        )
    units = []
    for u in range(rng.randint(1, 6)):
        atoms = tuple(
            QualityState(
                f"a{rng.randrange(n_aggs)}",
                "on",
                rng.choice((Cmp.EQ, Cmp.NE)),
                QualityValue.boolean(rng.random() < 0.5),
            )
            for _ in range(rng.randint(0, 3))
        )
        effects = tuple(
            SetQuality(f"a{rng.randrange(n_aggs)}", "on", QualityValue.boolean(rng.random() < 0.5))
            for _ in range(rng.randint(0, 2))
        )
        tid, uid = f"t{u}", f"u{u}"
        ctx.transitionals[tid] = Transitional(tid, effects=effects)
        inputs = atoms[0] if len(atoms) == 1 else AndExpr(atoms)
        ctx.units[uid] = TransitionalUnit(uid, inputs=inputs, transitional=tid)
        units.append(uid)
    mech = Mechanism(
        "m",
        parts=tuple((f"a{i}", "functional") for i in range(n_aggs)),
        organization=tuple(units),
    )
    ctx.mechanisms["m"] = mech
    return ctx, mech, initial


def _oracle_chain(ctx, mech, initial):
    """Independent fixpoint closure of producible facts."""

    def payload(uid):
        values = {}
        for effect in ctx.transitionals[ctx.units[uid].transitional].effects:
            values[effect.aggregate] = effect.literal.value  # last write wins
        return values

    def atoms_of(uid):
        expr = ctx.units[uid].inputs
        if isinstance(expr, AndExpr):
            return expr.items
        return (expr,)

    def sat(uid, facts):
        for atom in atoms_of(uid):
            values = facts[atom.aggregate]
            want = atom.literal.value
            if atom.cmp is Cmp.EQ and want not in values:
                return False
            if atom.cmp is Cmp.NE and not (values - {want}):
                return False
        return True

    optimistic = {a: {v} for a, v in initial.items()}
    for uid in mech.organization:
        for agg, value in payload(uid).items():
            optimistic[agg].add(value)
    mismatched = {u for u in mech.organization if not sat(u, optimistic)}
    facts = {a: {v} for a, v in initial.items()}
    fired = set()
    changed = True
    while changed:
        changed = False
        for uid in mech.organization:
            if not sat(uid, facts):
                continue
            if uid not in fired:
                fired.add(uid)
                changed = True
            for agg, value in payload(uid).items():
                if value not in facts[agg]:
                    facts[agg].add(value)
                    changed = True
    unreachable = set(mech.organization) - fired - mismatched
    return mismatched, unreachable


def test_chain_check_agrees_with_forward_closure_oracle():
    rng = random.Random(0xCAFE)
    for _case in range(150):
        ctx, mech, initial = _random_boolean_mechanism(rng)
        expected_mismatch, expected_unreachable = _oracle_chain(ctx, mech, initial)
        diags = check_chain(mech, ctx)
        got_mismatch = {
            d.message.split("'")[1] for d in diags if d.code == "CHAIN_MISMATCH"
        }
        got_unreachable = {
            d.message.split("'")[1] for d in diags if d.code == "UNREACHABLE_UNIT"
        }
        assert got_mismatch == expected_mismatch
        assert got_unreachable == expected_unreachable


# ---------------------------------------------------------------------------
# conservation
# ---------------------------------------------------------------------------


def test_water_conservation_is_balanced(compiled_corpus):
    ctx = compiled_corpus["water.mech"].context
    assert check_conservation(ctx.mechanisms["water_synthesis"], ctx) == []


def test_empty_effects_are_trivially_balanced():
    text = """
aggregate x { quality count: count 3 }
place go: 1
transitional nop { kind: quality-change }
unit idle { do: nop  consume go: 1 }
mechanism m {
  metadata { mechanism_type: SimpleLinear function_type: Designed author: "a" date: "d" version: "1" }
  phenomenon { setup: x.count == 3  termination: tokens(go) >= 0 }
  part x: functional
  place go
  unit idle
  conserve "things"
}
conserve "things" { weight x: 1 }
"""
    result = _compile_text(text)
    assert result.ok, _codes(result)


def test_overproducing_water_is_flagged_with_totals(corpus_texts):
    text = corpus_texts["water.mech"].replace(
        "set species_H2O.count = 2", "set species_H2O.count = 3", 1
    ).replace("then: species_H2O.count == 2", "then: species_H2O.count == 3", 1)
    result = _compile_text(text, "super_water.mech")
    assert not result.ok
    violations = [d for d in result.diagnostics if d.code == "CONSERVATION_VIOLATION"]
    assert violations, _codes(result)
    hydrogen = [d for d in violations if "'atom:H'" in d.message]
    assert len(hydrogen) == 1
    assert "4 before, 6 after" in hydrogen[0].message
    oxygen = [d for d in violations if "'atom:O'" in d.message]
    assert len(oxygen) == 1
    assert "2 before, 3 after" in oxygen[0].message


def test_exempt_units_may_source_a_quantity():
    text = """
aggregate x { quality count: count 2 }
transitional drain_all { kind: quality-change  set x.count = 0 }
unit sink { when: x.count == 2  do: drain_all  then: x.count == 0  exempt: "stuff" }
mechanism m {
  metadata { mechanism_type: SimpleLinear function_type: Designed author: "a" date: "d" version: "1" }
  phenomenon { setup: x.count == 2  termination: x.count == 0 }
  part x: functional
  unit sink
  conserve "stuff"
}
conserve "stuff" { weight x: 1 }
"""
    assert _compile_text(text).ok
    without_exempt = text.replace('  exempt: "stuff"', "")
    result = _compile_text(without_exempt)
    assert not result.ok
    assert "CONSERVATION_VIOLATION" in _codes(result)


# ---------------------------------------------------------------------------
# refinement resolution
# ---------------------------------------------------------------------------


def test_models_without_refinements_flatten_to_themselves(compiled_corpus):
    for name in ("water.mech", "tank.mech", "traffic.mech"):
        model = compiled_corpus[name]
        assert model.refinement_tree == {}
        for mech in model.context.mechanisms.values():
            assert all("__" not in uid for uid in mech.organization)


def test_vehicle_refinement_flattens_cleanly(compiled_corpus):
    model = compiled_corpus["vehicle.mech"]
    assert model.diagnostics == () if hasattr(model, "diagnostics") else True
    tree = model.refinement_tree
    assert "engine_moves_vehicle" in tree
    target, expansion = tree["engine_moves_vehicle"]
    assert target == "gasoline_engine"
    organization = model.context.mechanisms["vehicle_motion"].organization
    assert organization == expansion
    assert organization[0].endswith("__enter")
    assert organization[-1].endswith("__exit")
    assert "engine_moves_vehicle__spark_ignites" in organization
    # the detailing mechanism's parts joined the flattened mechanism
    parts = {p for p, _ in model.context.mechanisms["vehicle_motion"].parts}
    assert {"spark_plug", "piston"} <= parts


def test_self_referential_refinement_is_bounded():
    text = """
aggregate x { quality on: boolean false }
transitional t {
  kind: quality-change
  refinement: recursive
  set x.on = true
}
unit u { when: x.on == false  do: t  then: x.on == true }
mechanism recursive {
  metadata { mechanism_type: SimpleLinear function_type: Designed author: "a" date: "d" version: "1" }
  phenomenon { setup: x.on == false  termination: x.on == true }
  part x: functional
  unit u
}
"""
    result = _compile_text(text, max_depth=8)
    assert not result.ok
    assert "UNBOUNDED_REFINEMENT" in _codes(result)


def test_refinement_signature_mismatch_is_reported(corpus_texts):
    text = corpus_texts["vehicle.mech"].replace(
        "setup: engine.ignition == ON && vehicle.moving == false\n    termination: vehicle.moving == true\n    summary: \"pistons react to a spark and drive the wheels\"",
        "setup: engine.ignition == ON\n    termination: vehicle.moving == true\n    summary: \"pistons react to a spark and drive the wheels\"",
        1,
    )
    result = _compile_text(text, "mismatch.mech")
    assert not result.ok
    assert "REFINEMENT_SIGNATURE_MISMATCH" in _codes(result)


def test_flattened_model_recompiles_cleanly(compiled_corpus):
    for name, model in compiled_corpus.items():
        text = serialize_mech(model.to_document())
        result = _compile_text(text, name + ".flattened")
        assert result.ok, (name, _codes(result))
        errors = [d for d in result.diagnostics if d.severity == ERROR]
        assert errors == []


# ---------------------------------------------------------------------------
# other phases
# ---------------------------------------------------------------------------


def test_part_cycle_is_an_error():
    text = """
aggregate a { part b: functional }
aggregate b { part a: functional }
"""
    result = _compile_text(text)
    assert not result.ok
    cycle = [d for d in result.diagnostics if d.code == "PART_CYCLE"]
    assert len(cycle) == 1
    assert "->" in cycle[0].message


def test_output_must_follow_from_effects():
    text = """
aggregate x { quality on: boolean false }
transitional nop { kind: quality-change }
unit claims_too_much { when: x.on == false  do: nop  then: x.on == true }
"""
    result = _compile_text(text)
    assert not result.ok
    assert "OUTPUT_NOT_ENTAILED" in _codes(result)


def test_untouched_input_conditions_carry_to_outputs():
    text = """
aggregate x { quality on: boolean false }
aggregate y { quality on: boolean false }
transitional set_y { kind: quality-change  set y.on = true }
unit carries { when: x.on == false  do: set_y  then: y.on == true && x.on == false }
"""
    assert _compile_text(text).ok


def test_missing_author_is_metadata_missing(corpus_texts):
    text = corpus_texts["water.mech"].replace('    author: "P. Winters"\n', "")
    result = _compile_text(text, "anon.mech")
    assert not result.ok
    missing = [d for d in result.diagnostics if d.code == "METADATA_MISSING"]
    assert len(missing) == 1
    assert "author" in missing[0].message


def test_invalid_metadata_enum_is_reported():
    text = """
aggregate x { quality on: boolean true }
mechanism m {
  metadata { mechanism_type: Sideways function_type: Designed author: "a" date: "d" version: "1" }
  phenomenon { setup: x.on == true  termination: x.on == true }
  part x: functional
}
"""
    result = _compile_text(text)
    assert not result.ok
    assert "METADATA_INVALID" in _codes(result)


def test_scope_violation_is_reported():
    text = """
aggregate x { quality on: boolean false }
aggregate outsider { quality on: boolean false }
transitional t { kind: quality-change  set x.on = true }
unit u { when: outsider.on == false  do: t  then: x.on == true }
mechanism m {
  metadata { mechanism_type: SimpleLinear function_type: Designed author: "a" date: "d" version: "1" }
  phenomenon { setup: x.on == false  termination: x.on == true }
  part x: functional
  unit u
}
"""
    result = _compile_text(text)
    assert not result.ok
    assert "UNDECLARED_PART" in _codes(result)


def test_unsatisfiable_setup_is_reported():
    text = """
aggregate x { quality on: boolean false }
mechanism m {
  metadata { mechanism_type: SimpleLinear function_type: Designed author: "a" date: "d" version: "1" }
  phenomenon { setup: x.on == true && x.on == false  termination: x.on == true }
  part x: functional
}
"""
    result = _compile_text(text)
    assert not result.ok
    assert "PHENOMENON_UNSATISFIABLE" in _codes(result)


def test_unresolved_references_are_reported():
    result = _compile_text("unit u { when: ghost.on == true  do: missing }\n")
    assert not result.ok
    assert all(d.code == "UNRESOLVED_REFERENCE" for d in result.diagnostics)


def test_enum_symbol_and_unit_binding_errors():
    text = """
enum states { A, B }
aggregate x {
  quality mode: enum states A
  quality mass: scalar 5 [kg]
}
transitional t { kind: quality-change  set x.mode = C }
unit u { when: x.mass == 5 [g]  do: t }
"""
    result = _compile_text(text)
    assert not result.ok
    codes = set(_codes(result))
    assert "ENUM_SYMBOL_UNKNOWN" in codes
    assert "UNIT_MISMATCH" in codes


def test_comparator_restrictions_for_enum_and_boolean():
    text = """
enum states { A, B }
aggregate x { quality mode: enum states A }
transitional t { kind: quality-change  set x.mode = B }
unit u { when: x.mode <= B  do: t  then: x.mode == B }
"""
    result = _compile_text(text)
    assert not result.ok
    assert "COMPARATOR_INVALID" in _codes(result)


def test_compile_is_deterministic(corpus_texts):
    text = corpus_texts["water.mech"].replace(
        "when: species_Hplus.count == 4", "when: species_Hplus.count == 5", 1
    )
    first = _compile_text(text, "broken.mech")
    second = _compile_text(text, "broken.mech")
    assert [d.render() for d in first.diagnostics] == [
        d.render() for d in second.diagnostics
    ]


def test_phase_gating_stops_on_first_failing_phase():
    # both a broken chain and missing metadata: only the chain error surfaces
    text = """
aggregate x { quality on: boolean false }
aggregate y { quality on: boolean false }
transitional t { kind: quality-change  set x.on = true }
unit hopeless { when: y.on == true  do: t  then: x.on == true }
mechanism m {
  phenomenon { setup: x.on == false  termination: x.on == true }
  part x: functional
  part y: functional
  unit hopeless
}
"""
    result = _compile_text(text)
    assert not result.ok
    assert set(_codes(result)) == {"CHAIN_MISMATCH"}
