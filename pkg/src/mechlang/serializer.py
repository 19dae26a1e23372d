"""Canonical .mech serialization and a JSON export of parsed documents.

Canonical form uses LF line endings, 2-space indentation, a stable key
order per declaration, and normalized rational number formatting, so that
parse(serialize(d)) is structurally equal to d.
"""

from __future__ import annotations

import json
from fractions import Fraction

from .errors import MechError
from .model import (
    AndExpr,
    ConfigState,
    CreateAggregate,
    DestroyAggregate,
    EmergentState,
    MechanismMetadata,
    NotExpr,
    OrExpr,
    Phenomenon,
    QualityState,
    QualityValue,
    RawLiteral,
    SendMessage,
    SetQuality,
    SetRq,
    TokenState,
    TRUE_EXPR,
    ValueKind,
    fraction_text,
)

HEADER = "# mech model"


def _quote(text: str) -> str:
    out = text.replace("\\", "\\\\").replace('"', '\\"')
    out = out.replace("\n", "\\n").replace("\t", "\\t")
    return f'"{out}"'


def render_literal(literal) -> str:
    if isinstance(literal, (RawLiteral, QualityValue)):
        return literal.render()
    raise MechError(f"cannot render literal {literal!r}")


def render_typed_value(value: QualityValue) -> str:
    if value.kind is ValueKind.COUNT:
        return f"count {value.value}"
    if value.kind is ValueKind.SCALAR:
        return f"scalar {fraction_text(value.value)} [{value.unit}]"
    if value.kind is ValueKind.BOOLEAN:
        return "boolean true" if value.value else "boolean false"
    if value.domain is None:
        raise MechError(f"enum value {value.value!r} has no domain to serialize")
    return f"enum {value.domain} {value.value}"


def render_expression(expr) -> str:
    if isinstance(expr, QualityState):
        return f"{expr.aggregate}.{expr.quality} {expr.cmp.value} {render_literal(expr.literal)}"
    if isinstance(expr, ConfigState):
        return f"rq {expr.rq} {expr.cmp.value} {render_literal(expr.literal)}"
    if isinstance(expr, TokenState):
        return f"tokens({expr.place}) >= {expr.count}"
    if isinstance(expr, EmergentState):
        return f"emergent {expr.predicate}({', '.join(expr.aggregates)})"
    if isinstance(expr, NotExpr):
        inner = render_expression(expr.item)
        if isinstance(expr.item, (AndExpr, OrExpr)):
            inner = f"({inner})"
        return f"!{inner}"
    if isinstance(expr, AndExpr):
        if not expr.items:
            raise MechError("the empty conjunction has no textual form")
        if len(expr.items) == 1:
            return render_expression(expr.items[0])
        parts = []
        for item in expr.items:
            text = render_expression(item)
            if isinstance(item, (AndExpr, OrExpr)):
                text = f"({text})"
            parts.append(text)
        return " && ".join(parts)
    if isinstance(expr, OrExpr):
        if not expr.items:
            raise MechError("the empty disjunction has no textual form")
        if len(expr.items) == 1:
            return render_expression(expr.items[0])
        parts = []
        for item in expr.items:
            text = render_expression(item)
            if isinstance(item, OrExpr):
                text = f"({text})"
            parts.append(text)
        return " || ".join(parts)
    raise MechError(f"cannot render expression {expr!r}")


def _render_effect(effect) -> str:
    if isinstance(effect, SetQuality):
        return f"set {effect.aggregate}.{effect.quality} = {render_literal(effect.literal)}"
    if isinstance(effect, SetRq):
        return f"set rq {effect.rq} = {render_literal(effect.literal)}"
    if isinstance(effect, CreateAggregate):
        return f"create {effect.aggregate}"
    if isinstance(effect, DestroyAggregate):
        return f"destroy {effect.aggregate}"
    if isinstance(effect, SendMessage):
        text = f"send {effect.receiver}.{effect.quality} = {render_literal(effect.literal)}"
        if effect.sender:
            text += f" from {effect.sender}"
        if effect.delay:
            text += f" after {fraction_text(effect.delay)}"
        return text
    raise MechError(f"cannot render effect {effect!r}")


def _metadata_lines(metadata: MechanismMetadata, indent: str) -> list[str]:
    if metadata == MechanismMetadata():
        return []
    lines = [f"{indent}metadata {{"]
    inner = indent + "  "
    if metadata.mechanism_type:
        lines.append(f"{inner}mechanism_type: {metadata.mechanism_type}")
    if metadata.model_type:
        lines.append(f"{inner}model_type: {_quote(metadata.model_type)}")
    if metadata.function_type:
        lines.append(f"{inner}function_type: {metadata.function_type}")
    if metadata.dynamic_elements:
        lines.append(f"{inner}dynamic_elements: {_quote(metadata.dynamic_elements)}")
    if metadata.context:
        lines.append(f"{inner}context: {_quote(metadata.context)}")
    if metadata.author:
        lines.append(f"{inner}author: {_quote(metadata.author)}")
    if metadata.date:
        lines.append(f"{inner}date: {_quote(metadata.date)}")
    if metadata.version:
        lines.append(f"{inner}version: {_quote(metadata.version)}")
    if metadata.explanations:
        lines.append(f"{inner}explanations: {_quote(metadata.explanations)}")
    if metadata.variations:
        lines.append(f"{inner}variations: {_quote(metadata.variations)}")
    if metadata.implications:
        lines.append(f"{inner}implications: {_quote(metadata.implications)}")
    if metadata.evidence:
        lines.append(f"{inner}evidence: " + ", ".join(_quote(e) for e in metadata.evidence))
    lines.append(f"{indent}}}")
    return lines


def _phenomenon_lines(phen: Phenomenon, indent: str) -> list[str]:
    if phen == Phenomenon():
        return []
    lines = [f"{indent}phenomenon {{"]
    inner = indent + "  "
    if phen.setup != TRUE_EXPR:
        lines.append(f"{inner}setup: {render_expression(phen.setup)}")
    if phen.termination != TRUE_EXPR:
        lines.append(f"{inner}termination: {render_expression(phen.termination)}")
    if phen.summary:
        lines.append(f"{inner}summary: {_quote(phen.summary)}")
    lines.append(f"{indent}}}")
    return lines


def serialize_mech(document) -> str:
    """Serialize a document to canonical .mech text."""
    lines: list[str] = [HEADER]
    for enum in document.enums:
        lines.append("")
        lines.append(f"enum {enum.id} {{ " + ", ".join(enum.symbols) + " }")
    for pred in document.predicates:
        lines.append("")
        lines.append(f"predicate {pred.id}")
    for agg in document.aggregates:
        lines.append("")
        lines.append(f"aggregate {agg.id} {{")
        if agg.label:
            lines.append(f"  label: {_quote(agg.label)}")
        if agg.ontology_refs:
            lines.append("  ontology: " + ", ".join(_quote(r) for r in agg.ontology_refs))
        for name, value in agg.qualities.items():
            lines.append(f"  quality {name}: {render_typed_value(value)}")
        for link in agg.parts:
            lines.append(f"  part {link.child}: {link.role}")
        if agg.position is not None:
            coords = ", ".join(fraction_text(c) for c in agg.position)
            lines.append(f"  position: ({coords})")
        lines.append("}")
    for rq in document.rqs:
        lines.append("")
        lines.append(f"rq {rq.id} {{")
        if rq.name and rq.name != rq.id:
            lines.append(f"  label: {_quote(rq.name)}")
        if rq.participants:
            lines.append("  participants: " + ", ".join(rq.participants))
        lines.append(f"  value: {render_typed_value(rq.value)}")
        lines.append("}")
    if document.places:
        lines.append("")
        for place in document.places:
            lines.append(f"place {place.id}: {place.initial}")
    for trans in document.transitionals:
        lines.append("")
        lines.append(f"transitional {trans.id} {{")
        if trans.label:
            lines.append(f"  label: {_quote(trans.label)}")
        lines.append(f"  kind: {trans.kind.value}")
        if trans.delay:
            lines.append(f"  delay: {fraction_text(trans.delay)}")
        if trans.function:
            lines.append(f"  function: {_quote(trans.function)}")
        if trans.refinement:
            lines.append(f"  refinement: {trans.refinement}")
        for effect in trans.effects:
            lines.append(f"  {_render_effect(effect)}")
        lines.append("}")
    for unit in document.units:
        lines.append("")
        lines.append(f"unit {unit.id} {{")
        if unit.inputs != TRUE_EXPR:
            lines.append(f"  when: {render_expression(unit.inputs)}")
        lines.append(f"  do: {unit.transitional}")
        if unit.outputs != TRUE_EXPR:
            lines.append(f"  then: {render_expression(unit.outputs)}")
        for place, count in unit.consumes:
            lines.append(f"  consume {place}: {count}")
        for place, count in unit.produces:
            lines.append(f"  produce {place}: {count}")
        if unit.exempt:
            lines.append("  exempt: " + ", ".join(_quote(n) for n in unit.exempt))
        lines.append("}")
    for mech in document.mechanisms:
        lines.append("")
        lines.append(f"mechanism {mech.id} {{")
        lines.extend(_metadata_lines(mech.metadata, "  "))
        lines.extend(_phenomenon_lines(mech.phenomenon, "  "))
        for part, role in mech.parts:
            lines.append(f"  part {part}: {role}")
        for place in mech.places:
            lines.append(f"  place {place}")
        for unit in mech.organization:
            lines.append(f"  unit {unit}")
        for name in mech.conserved:
            lines.append(f"  conserve {_quote(name)}")
        lines.append("}")
    for world in document.microworlds:
        lines.append("")
        lines.append(f"microworld {world.id} {{")
        for agg, present in world.aggregates:
            lines.append(f"  aggregate {agg}" + ("" if present else ": absent"))
        for mech in world.mechanisms:
            lines.append(f"  mechanism {mech}")
        for axiom in world.axioms:
            lines.append(f"  axiom {render_expression(axiom)}")
        lines.append("}")
    for decl in document.conserves:
        lines.append("")
        lines.append(f"conserve {_quote(decl.name)} {{")
        for rule in decl.rules:
            if rule.matcher == "aggregate":
                lines.append(f"  weight {rule.pattern}: {rule.weight}")
            elif rule.matcher == "quality":
                lines.append(f"  weight quality {rule.pattern}: {rule.weight}")
            else:
                lines.append(f"  weight ref {_quote(rule.pattern)}: {rule.weight}")
        lines.append("}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSON export
# ---------------------------------------------------------------------------


def _span_json(span) -> dict:
    return {
        "file": span.file,
        "start_line": span.start_line,
        "start_col": span.start_col,
        "end_line": span.end_line,
        "end_col": span.end_col,
    }


def _value_json(value) -> dict:
    if isinstance(value, QualityValue):
        payload = value.value
        if isinstance(payload, Fraction):
            payload = fraction_text(payload)
        return {
            "kind": value.kind.value,
            "value": payload,
            "unit": value.unit,
            "domain": value.domain,
        }
    if isinstance(value, RawLiteral):
        return {
            "kind": value.kind,
            "number": fraction_text(value.number) if value.number is not None else None,
            "unit": value.unit,
            "symbol": value.symbol,
            "boolean": value.boolean,
        }
    raise MechError(f"cannot export value {value!r}")


def _expr_json(expr) -> dict:
    if isinstance(expr, QualityState):
        return {
            "type": "quality-state",
            "aggregate": expr.aggregate,
            "quality": expr.quality,
            "cmp": expr.cmp.value,
            "literal": _value_json(expr.literal),
            "span": _span_json(expr.span),
        }
    if isinstance(expr, ConfigState):
        return {
            "type": "configuration-state",
            "rq": expr.rq,
            "cmp": expr.cmp.value,
            "literal": _value_json(expr.literal),
            "span": _span_json(expr.span),
        }
    if isinstance(expr, TokenState):
        return {
            "type": "token-state",
            "place": expr.place,
            "count": expr.count,
            "span": _span_json(expr.span),
        }
    if isinstance(expr, EmergentState):
        return {
            "type": "emergent-state",
            "predicate": expr.predicate,
            "aggregates": list(expr.aggregates),
            "span": _span_json(expr.span),
        }
    if isinstance(expr, NotExpr):
        return {"type": "not", "item": _expr_json(expr.item)}
    if isinstance(expr, AndExpr):
        return {"type": "and", "items": [_expr_json(i) for i in expr.items]}
    if isinstance(expr, OrExpr):
        return {"type": "or", "items": [_expr_json(i) for i in expr.items]}
    raise MechError(f"cannot export expression {expr!r}")


def _effect_json(effect) -> dict:
    if isinstance(effect, SetQuality):
        return {
            "type": "set-quality",
            "aggregate": effect.aggregate,
            "quality": effect.quality,
            "literal": _value_json(effect.literal),
        }
    if isinstance(effect, SetRq):
        return {"type": "set-rq", "rq": effect.rq, "literal": _value_json(effect.literal)}
    if isinstance(effect, CreateAggregate):
        return {"type": "create-aggregate", "aggregate": effect.aggregate}
    if isinstance(effect, DestroyAggregate):
        return {"type": "destroy-aggregate", "aggregate": effect.aggregate}
    if isinstance(effect, SendMessage):
        return {
            "type": "message-send",
            "sender": effect.sender,
            "receiver": effect.receiver,
            "quality": effect.quality,
            "literal": _value_json(effect.literal),
            "delay": fraction_text(effect.delay),
        }
    raise MechError(f"cannot export effect {effect!r}")


def document_to_json(document) -> dict:
    """A stable JSON-compatible view of a parsed document, spans included."""
    return {
        "file": document.file,
        "enums": [
            {"id": e.id, "symbols": list(e.symbols), "span": _span_json(e.span)}
            for e in document.enums
        ],
        "predicates": [
            {"id": p.id, "span": _span_json(p.span)} for p in document.predicates
        ],
        "aggregates": [
            {
                "id": a.id,
                "label": a.label,
                "ontology_refs": list(a.ontology_refs),
                "qualities": {k: _value_json(v) for k, v in a.qualities.items()},
                "parts": [{"child": l.child, "role": l.role} for l in a.parts],
                "position": [fraction_text(c) for c in a.position]
                if a.position is not None
                else None,
                "span": _span_json(a.span),
            }
            for a in document.aggregates
        ],
        "relational_qualities": [
            {
                "id": r.id,
                "name": r.name,
                "participants": list(r.participants),
                "value": _value_json(r.value),
                "span": _span_json(r.span),
            }
            for r in document.rqs
        ],
        "places": [
            {"id": p.id, "initial": p.initial, "span": _span_json(p.span)}
            for p in document.places
        ],
        "transitionals": [
            {
                "id": t.id,
                "kind": t.kind.value,
                "label": t.label,
                "delay": fraction_text(t.delay),
                "function": t.function,
                "refinement": t.refinement,
                "effects": [_effect_json(e) for e in t.effects],
                "span": _span_json(t.span),
            }
            for t in document.transitionals
        ],
        "units": [
            {
                "id": u.id,
                "inputs": _expr_json(u.inputs),
                "transitional": u.transitional,
                "outputs": _expr_json(u.outputs),
                "consumes": [[p, c] for p, c in u.consumes],
                "produces": [[p, c] for p, c in u.produces],
                "exempt": list(u.exempt),
                "span": _span_json(u.span),
            }
            for u in document.units
        ],
        "mechanisms": [
            {
                "id": m.id,
                "metadata": {
                    "mechanism_type": m.metadata.mechanism_type,
                    "model_type": m.metadata.model_type,
                    "function_type": m.metadata.function_type,
                    "dynamic_elements": m.metadata.dynamic_elements,
                    "context": m.metadata.context,
                    "author": m.metadata.author,
                    "date": m.metadata.date,
                    "version": m.metadata.version,
                    "explanations": m.metadata.explanations,
                    "variations": m.metadata.variations,
                    "implications": m.metadata.implications,
                    "evidence": list(m.metadata.evidence),
                },
                "phenomenon": {
                    "setup": _expr_json(m.phenomenon.setup),
                    "termination": _expr_json(m.phenomenon.termination),
                    "summary": m.phenomenon.summary,
                },
                "parts": [[p, role] for p, role in m.parts],
                "places": list(m.places),
                "organization": list(m.organization),
                "conserved": list(m.conserved),
                "span": _span_json(m.span),
            }
            for m in document.mechanisms
        ],
        "microworlds": [
            {
                "id": w.id,
                "aggregates": [[a, present] for a, present in w.aggregates],
                "mechanisms": list(w.mechanisms),
                "axioms": [_expr_json(x) for x in w.axioms],
                "span": _span_json(w.span),
            }
            for w in document.microworlds
        ],
        "conserves": [
            {
                "name": c.name,
                "rules": [
                    {"matcher": r.matcher, "pattern": r.pattern, "weight": r.weight}
                    for r in c.rules
                ],
                "span": _span_json(c.span),
            }
            for c in document.conserves
        ],
    }


def document_json_text(document) -> str:
    return json.dumps(document_to_json(document), indent=2, sort_keys=False)
