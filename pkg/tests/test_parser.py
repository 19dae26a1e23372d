"""Parser and serializer: shapes, diagnostics, round-trips, fuzzing."""

import json
import random

from mechlang.parser import (
    ModelDocument,
    RuleCmp,
    parse_mech,
    parse_rules,
    parse_state_expression,
)
from mechlang.serializer import document_to_json, serialize_mech

from generators import random_document

SAMPLE_RULES = (
    "if ((NAD ==LOW) && (Degeneration == LOW)) then {prefer ConceptualModel1;}  \n"
    "else if ((NAD ==LOW) && (Degeneration ==NORMAL)) then {prefer ConceptualModel2;}\n"
)


# ---------------------------------------------------------------------------
# parse_mech
# ---------------------------------------------------------------------------


def test_water_document_shape(corpus_texts):
    result = parse_mech(corpus_texts["water.mech"], "water.mech")
    assert result.ok
    doc = result.document
    assert len(doc.units) == 2
    assert len(doc.mechanisms) == 1
    assert len(doc.transitionals) == 2
    assert len(doc.conserves) == 2
    assert doc.mechanisms[0].organization == ("decomposition", "combination")


def test_empty_input_is_an_empty_document():
    result = parse_mech("", "empty.mech")
    assert result.ok
    assert result.document.is_empty()
    assert result.diagnostics == ()


def test_blank_and_comment_only_input():
    result = parse_mech("\n# just a comment\n   \n", "c.mech")
    assert result.ok and result.document.is_empty()


def test_misspelled_keyword_yields_one_diagnostic_at_its_position(corpus_texts):
    text = corpus_texts["water.mech"].replace(
        "transitional decompose {", "transitonal decompose {", 1
    )
    expected_line = next(
        index + 1
        for index, line in enumerate(text.splitlines())
        if line.startswith("transitonal decompose")
    )
    result = parse_mech(text, "water.mech")
    assert result.document is None
    assert len(result.diagnostics) == 1
    diag = result.diagnostics[0]
    assert "transitonal" in diag.message
    assert diag.span.start_line == expected_line
    assert diag.span.start_col == 1


def test_duplicate_id_is_reported():
    text = "place p: 1\nplace p: 2\n"
    result = parse_mech(text, "dup.mech")
    assert result.document is None
    assert any("duplicate place id 'p'" in d.message for d in result.diagnostics)


def test_unterminated_block_is_reported():
    result = parse_mech("aggregate a {\n  label: \"x\"\n", "open.mech")
    assert result.document is None
    assert result.diagnostics


def test_malformed_number_is_reported():
    result = parse_mech("place p: 1/0\n", "bad.mech")
    assert result.document is None
    assert any("malformed number" in d.message for d in result.diagnostics)


def test_crlf_input_parses_like_lf(corpus_texts):
    text = corpus_texts["tank.mech"]
    lf = parse_mech(text, "tank.mech")
    crlf = parse_mech(text.replace("\n", "\r\n"), "tank.mech")
    assert lf.ok and crlf.ok
    assert lf.document == crlf.document


def test_document_and_diagnostics_are_exclusive(corpus_texts):
    good = parse_mech(corpus_texts["water.mech"], "w.mech")
    assert good.document is not None and not good.diagnostics
    bad = parse_mech("aggregate {", "w.mech")
    assert bad.document is None and bad.diagnostics


def test_parse_state_expression_helper():
    result = parse_state_expression("vehicle.moving == true")
    assert result.ok
    assert result.document.aggregate == "vehicle"
    bad = parse_state_expression("vehicle.moving ==")
    assert not bad.ok


# ---------------------------------------------------------------------------
# serialize_mech round-trips
# ---------------------------------------------------------------------------


def test_corpus_round_trip(corpus_texts):
    for name, text in corpus_texts.items():
        first = parse_mech(text, name)
        assert first.ok, name
        canonical = serialize_mech(first.document)
        second = parse_mech(canonical, name)
        assert second.ok, name
        assert second.document == first.document, name
        # canonical output is a fixed point
        assert serialize_mech(second.document) == canonical


def test_empty_document_serializes_to_header_comment():
    text = serialize_mech(ModelDocument())
    assert text == "# mech model\n"
    result = parse_mech(text, "empty.mech")
    assert result.ok and result.document.is_empty()


def test_generated_documents_round_trip():
    rng = random.Random(42)
    for _case in range(200):
        doc = random_document(rng)
        text = serialize_mech(doc)
        result = parse_mech(text, "<generated>")
        assert result.ok, (text, [d.render() for d in result.diagnostics])
        assert result.document == doc, text


# ---------------------------------------------------------------------------
# fuzzing: parsing is total
# ---------------------------------------------------------------------------


def _fuzz_inputs(count):
    rng = random.Random(0xF00D)
    alphabet = (
        "abcdefg {}()[]:.,=<>!&|;#\"\\\n\t 0123456789/"
        "aggregate unit mechanism place enum rq transitional microworld conserve"
    )
    base = serialize_mech(random_document(random.Random(1)))
    for index in range(count):
        roll = rng.random()
        if roll < 0.5:
            yield "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 160)))
        elif roll < 0.8:
            # mutate a valid document: drop, duplicate or swap a slice
            start = rng.randrange(len(base))
            end = min(len(base), start + rng.randint(1, 40))
            if rng.random() < 0.5:
                yield base[:start] + base[end:]
            else:
                yield base[:start] + base[start:end] + base[start:end] + base[end:]
        else:
            yield "".join(chr(rng.randint(1, 0x2FF)) for _ in range(rng.randint(0, 80)))


def test_fuzz_never_crashes_and_spans_stay_in_bounds():
    checked = 0
    for text in _fuzz_inputs(10000):
        result = parse_mech(text, "fuzz.mech")
        assert (result.document is None) == bool(result.diagnostics)
        lines = text.split("\n")
        for diag in result.diagnostics:
            assert 1 <= diag.span.start_line <= len(lines) + 1
            assert diag.span.start_col >= 1
            if diag.span.start_line <= len(lines):
                assert diag.span.start_col <= len(lines[diag.span.start_line - 1]) + 2
        checked += 1
    assert checked == 10000


# ---------------------------------------------------------------------------
# .rules parsing
# ---------------------------------------------------------------------------


def test_two_rule_sample_parses():
    result = parse_rules(SAMPLE_RULES, "nad.rules")
    assert result.ok
    ruleset = result.document
    assert len(ruleset.rules) == 2
    assert ruleset.identifiers() == {"NAD", "Degeneration"}
    assert ruleset.rules[0].model == "ConceptualModel1"
    assert ruleset.rules[1].model == "ConceptualModel2"


def test_minimal_rule():
    result = parse_rules("if (A == X) then {prefer M;}", "one.rules")
    assert result.ok
    assert len(result.document.rules) == 1
    condition = result.document.rules[0].condition
    assert isinstance(condition, RuleCmp)
    assert condition.identifier == "A" and condition.symbol == "X"


def test_bare_else_catch_all():
    text = "if (A == X) then {prefer M1;}\nelse {prefer M2;}\n"
    result = parse_rules(text, "else.rules")
    assert result.ok
    assert result.document.rules[1].condition is None
    assert result.document.rules[1].model == "M2"


def test_unbalanced_parenthesis_points_at_the_offending_token():
    text = "if ((A == X) && (B == Y) then {prefer M;}"
    result = parse_rules(text, "broken.rules")
    assert result.document is None
    assert len(result.diagnostics) == 1
    diag = result.diagnostics[0]
    assert diag.span.start_line == 1
    # the diagnostic points at 'then', where ')' was required
    assert text[diag.span.start_col - 1 :].startswith("then")


def test_rules_whitespace_insensitive_around_comparisons():
    tight = parse_rules("if((NAD==LOW))then{prefer M;}", "t.rules")
    spaced = parse_rules("if ( ( NAD == LOW ) ) then { prefer M ; }", "s.rules")
    assert tight.ok and spaced.ok
    assert tight.document == spaced.document


# ---------------------------------------------------------------------------
# JSON export
# ---------------------------------------------------------------------------


def test_document_json_export_is_stable_and_carries_spans(corpus_texts):
    doc = parse_mech(corpus_texts["water.mech"], "water.mech").document
    exported = document_to_json(doc)
    assert list(exported) == [
        "file",
        "enums",
        "predicates",
        "aggregates",
        "relational_qualities",
        "places",
        "transitionals",
        "units",
        "mechanisms",
        "microworlds",
        "conserves",
    ]
    assert exported["file"] == "water.mech"
    first_aggregate = exported["aggregates"][0]
    assert first_aggregate["span"]["start_line"] >= 1
    assert first_aggregate["qualities"] == {} or isinstance(first_aggregate["qualities"], dict)
    unit = exported["units"][0]
    assert unit["inputs"]["type"] in ("and", "quality-state")
    # serializable and deterministic
    assert json.dumps(exported) == json.dumps(document_to_json(doc))


def test_generated_documents_export_to_json():
    rng = random.Random(5)
    for _case in range(50):
        doc = random_document(rng)
        json.dumps(document_to_json(doc))
