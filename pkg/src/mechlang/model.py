"""Core domain model: aggregates, states, transitionals, mechanisms, microworlds.

All values are treated as immutable. Operations that change state return a new
snapshot and never touch their input, so snapshots are safe to share between
threads and to keep in histories.
"""

from __future__ import annotations

import fnmatch
import re
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction

from .diagnostics import SourceSpan
from .errors import (
    AxiomViolated,
    CycleDetected,
    MechError,
    PreconditionNotMet,
    UnitMismatch,
    UnknownAggregate,
    UnresolvedReference,
)

MECHANISM_TYPES = (
    "SimpleLinear",
    "Cyclic",
    "Concurrent",
    "Feedback",
    "Continuous",
    "Stochastic",
    "Asynchronous",
)
FUNCTION_TYPES = ("Designed", "Evolved", "Natural", "NoneApparent")
PART_ROLES = ("functional", "structural")

CURIE_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*:[A-Za-z0-9_.\-]+$")

_NO_SPAN = SourceSpan()


def fraction_text(value: Fraction) -> str:
    """Canonical rendering of a rational: plain integer or num/den."""
    if value.denominator == 1:
        return str(value.numerator)
    return f"{value.numerator}/{value.denominator}"


class ValueKind(Enum):
    ENUM = "enum-symbol"
    SCALAR = "scalar-with-unit"
    BOOLEAN = "boolean"
    COUNT = "count"


@dataclass(frozen=True)
class QualityValue:
    """A typed quality payload: enum symbol, scalar with unit, boolean or count."""

    kind: ValueKind
    value: object
    unit: str | None = None
    domain: str | None = None

    @staticmethod
    def enum(symbol: str, domain: str | None = None) -> "QualityValue":
        return QualityValue(ValueKind.ENUM, symbol, domain=domain)

    @staticmethod
    def scalar(value, unit: str) -> "QualityValue":
        return QualityValue(ValueKind.SCALAR, Fraction(value), unit=unit)

    @staticmethod
    def boolean(value: bool) -> "QualityValue":
        return QualityValue(ValueKind.BOOLEAN, bool(value))

    @staticmethod
    def count(value: int) -> "QualityValue":
        if value < 0:
            raise MechError(f"count values must be nonnegative, got {value}")
        return QualityValue(ValueKind.COUNT, int(value))

    def render(self) -> str:
        if self.kind is ValueKind.ENUM:
            return str(self.value)
        if self.kind is ValueKind.BOOLEAN:
            return "true" if self.value else "false"
        if self.kind is ValueKind.COUNT:
            return str(self.value)
        text = fraction_text(self.value)
        return f"{text} [{self.unit}]" if self.unit else text


@dataclass(frozen=True)
class RawLiteral:
    """A parsed but not yet type-bound literal from a .mech expression."""

    kind: str  # "number" | "bool" | "symbol"
    number: Fraction | None = None
    unit: str | None = None
    symbol: str | None = None
    boolean: bool | None = None
    span: SourceSpan = field(default=_NO_SPAN, compare=False)

    def render(self) -> str:
        if self.kind == "number":
            text = fraction_text(self.number)
            return f"{text} [{self.unit}]" if self.unit else text
        if self.kind == "bool":
            return "true" if self.boolean else "false"
        return self.symbol


def render_literal(literal) -> str:
    return literal.render()


class Cmp(Enum):
    EQ = "=="
    NE = "!="
    LT = "<"
    LE = "<="
    GT = ">"
    GE = ">="


_ORDERED_ONLY = (Cmp.LT, Cmp.LE, Cmp.GT, Cmp.GE)


def comparator_allowed(cmp: Cmp, kind: ValueKind) -> bool:
    """== and != apply everywhere; ordering only to scalars and counts."""
    if cmp in (Cmp.EQ, Cmp.NE):
        return True
    return kind in (ValueKind.SCALAR, ValueKind.COUNT)


def compare_values(cmp: Cmp, left: QualityValue, right: QualityValue) -> bool:
    if left.kind is not right.kind:
        raise MechError(
            f"cannot compare {left.kind.value} with {right.kind.value}"
        )
    if left.kind is ValueKind.SCALAR and left.unit != right.unit:
        raise UnitMismatch(f"unit {right.unit!r} does not match {left.unit!r}")
    if not comparator_allowed(cmp, left.kind):
        raise MechError(f"comparator {cmp.value} not allowed for {left.kind.value}")
    a, b = left.value, right.value
    if cmp is Cmp.EQ:
        return a == b
    if cmp is Cmp.NE:
        return a != b
    if cmp is Cmp.LT:
        return a < b
    if cmp is Cmp.LE:
        return a <= b
    if cmp is Cmp.GT:
        return a > b
    return a >= b


# ---------------------------------------------------------------------------
# Aggregates and relational qualities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PartLink:
    child: str
    role: str  # functional | structural


@dataclass(frozen=True)
class Aggregate:
    """An aggregate: identity, qualities, part links, annotations, position."""

    id: str
    label: str = ""
    ontology_refs: tuple[str, ...] = ()
    qualities: Mapping[str, object] = field(default_factory=dict)
    parts: tuple[PartLink, ...] = ()
    relational_qualities: tuple[str, ...] = field(default=(), compare=False)
    position: tuple[Fraction, ...] | None = None
    span: SourceSpan = field(default=_NO_SPAN, compare=False)

    def with_quality(self, name: str, value: QualityValue) -> "Aggregate":
        qualities = dict(self.qualities)
        qualities[name] = value
        return replace(self, qualities=qualities)


@dataclass(frozen=True)
class RelationalQuality:
    """A quality shared by two or more aggregates, e.g. a configuration."""

    id: str
    name: str = ""
    participants: tuple[str, ...] = ()
    value: object = None
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


# ---------------------------------------------------------------------------
# State expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QualityState:
    """quality-state: compare one aggregate quality against a literal."""

    aggregate: str
    quality: str
    cmp: Cmp
    literal: object  # RawLiteral until bound, QualityValue afterwards
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class ConfigState:
    """configuration-state: compare a relational quality against a literal."""

    rq: str
    cmp: Cmp
    literal: object
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class EmergentState:
    """emergent-state: a named predicate over a set of aggregates."""

    predicate: str
    aggregates: tuple[str, ...]
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class TokenState:
    """token-state: true iff the place holds at least `count` tokens."""

    place: str
    count: int
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class NotExpr:
    item: object
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class AndExpr:
    items: tuple
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class OrExpr:
    items: tuple
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


TRUE_EXPR = AndExpr(items=())  # the empty conjunction


def walk_expr(expr):
    """Yield every node of an expression tree, outermost first."""
    yield expr
    if isinstance(expr, NotExpr):
        yield from walk_expr(expr.item)
    elif isinstance(expr, (AndExpr, OrExpr)):
        for item in expr.items:
            yield from walk_expr(item)


def conjunction_atoms(expr) -> list:
    """Flatten a conjunction into its atomic conditions.

    Raises MechError when the expression is not a pure conjunction of
    (possibly negated) atoms; negation is normalized into the comparator.
    """
    if isinstance(expr, AndExpr):
        atoms = []
        for item in expr.items:
            atoms.extend(conjunction_atoms(item))
        return atoms
    if isinstance(expr, NotExpr):
        inner = expr.item
        if isinstance(inner, QualityState) and inner.cmp in (Cmp.EQ, Cmp.NE):
            flipped = Cmp.NE if inner.cmp is Cmp.EQ else Cmp.EQ
            return [replace(inner, cmp=flipped)]
        if isinstance(inner, ConfigState) and inner.cmp in (Cmp.EQ, Cmp.NE):
            flipped = Cmp.NE if inner.cmp is Cmp.EQ else Cmp.EQ
            return [replace(inner, cmp=flipped)]
        raise MechError("expression is not a conjunction of atomic conditions")
    if isinstance(expr, (QualityState, ConfigState, EmergentState, TokenState)):
        return [expr]
    raise MechError("expression is not a conjunction of atomic conditions")


# ---------------------------------------------------------------------------
# Transitionals and units
# ---------------------------------------------------------------------------


class TransitionalKind(Enum):
    QUALITY_CHANGE = "quality-change"
    CREATE_AGGREGATE = "create-aggregate"
    DESTROY_AGGREGATE = "destroy-aggregate"
    RQ_CHANGE = "rq-change"
    MESSAGE_SEND = "message-send"


@dataclass(frozen=True)
class SetQuality:
    aggregate: str
    quality: str
    literal: object
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class SetRq:
    rq: str
    literal: object
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class CreateAggregate:
    aggregate: str  # a declared template brought into existence
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class DestroyAggregate:
    aggregate: str
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class SendMessage:
    """Deliver a quality assignment to the receiver after a delay."""

    sender: str
    receiver: str
    quality: str
    literal: object
    delay: Fraction = Fraction(0)
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class Transitional:
    """A state-change primitive: an ordered effect list plus timing."""

    id: str
    kind: TransitionalKind = TransitionalKind.QUALITY_CHANGE
    label: str = ""
    effects: tuple = ()
    delay: Fraction = Fraction(0)
    function: str | None = None
    refinement: str | None = None
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class TransitionalUnit:
    """The packaged input-transition-output triple, with token arcs."""

    id: str
    inputs: object = TRUE_EXPR
    transitional: str = ""
    outputs: object = TRUE_EXPR
    consumes: tuple[tuple[str, int], ...] = ()
    produces: tuple[tuple[str, int], ...] = ()
    exempt: tuple[str, ...] = ()  # conserved quantities this unit may source/sink
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


# ---------------------------------------------------------------------------
# Mechanisms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MechanismMetadata:
    mechanism_type: str = ""
    model_type: str = ""
    function_type: str = ""
    dynamic_elements: str = ""
    context: str = ""
    author: str = ""
    date: str = ""
    version: str = ""
    explanations: str = ""
    variations: str = ""
    implications: str = ""
    evidence: tuple[str, ...] = ()
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class Phenomenon:
    setup: object = TRUE_EXPR
    termination: object = TRUE_EXPR
    summary: str = ""
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class WeightRule:
    """One conservation matcher: by aggregate id, quality name or ontology ref."""

    matcher: str  # "aggregate" | "quality" | "ontology"
    pattern: str
    weight: int
    span: SourceSpan = field(default=_NO_SPAN, compare=False)

    def matches(self, aggregate: Aggregate) -> bool:
        if self.matcher == "aggregate":
            return aggregate.id == self.pattern
        if self.matcher == "quality":
            return self.pattern in aggregate.qualities
        return any(
            fnmatch.fnmatchcase(ref, self.pattern)
            for ref in aggregate.ontology_refs
        )

    def counted_quality(self, aggregate: Aggregate) -> str | None:
        if self.matcher == "quality":
            return self.pattern
        return "count" if "count" in aggregate.qualities else None


@dataclass(frozen=True)
class ConservationDecl:
    """A named counting rule whose total must survive every transition."""

    name: str
    rules: tuple[WeightRule, ...] = ()
    span: SourceSpan = field(default=_NO_SPAN, compare=False)

    def contribution(self, aggregate: Aggregate) -> int:
        total = 0
        for rule in self.rules:
            if not rule.matches(aggregate):
                continue
            quality = rule.counted_quality(aggregate)
            if quality is None:
                total += rule.weight
                continue
            value = aggregate.qualities.get(quality)
            multiplier = 1
            if isinstance(value, QualityValue) and value.kind is ValueKind.COUNT:
                multiplier = value.value
            total += rule.weight * multiplier
        return total


@dataclass(frozen=True)
class Mechanism:
    id: str
    metadata: MechanismMetadata = field(default_factory=MechanismMetadata)
    phenomenon: Phenomenon = field(default_factory=Phenomenon)
    parts: tuple[tuple[str, str], ...] = ()  # (aggregate id, role)
    places: tuple[str, ...] = ()
    organization: tuple[str, ...] = ()  # ordered transitional-unit ids
    conserved: tuple[str, ...] = ()  # names of conservation declarations
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


@dataclass(frozen=True)
class Microworld:
    """The declared execution scope: aggregates, mechanisms, axioms."""

    id: str
    aggregates: tuple[tuple[str, bool], ...] = ()  # (id, initially present)
    mechanisms: tuple[str, ...] = ()
    axioms: tuple = ()
    span: SourceSpan = field(default=_NO_SPAN, compare=False)


# ---------------------------------------------------------------------------
# Snapshots and the primitive operations over them
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Snapshot:
    """One immutable world state: live aggregates, RQs and the marking.

    `templates` holds every declared aggregate with its initial qualities;
    `aggregates` holds the currently existing ones. Conditions over a declared
    but absent aggregate evaluate to false; unknown ids raise.
    """

    aggregates: Mapping[str, Aggregate]
    rqs: Mapping[str, RelationalQuality] = field(default_factory=dict)
    marking: Mapping[str, int] = field(default_factory=dict)
    templates: Mapping[str, Aggregate] | None = None
    predicates: Mapping[str, Callable] = field(default_factory=dict, compare=False)

    def declared(self, aggregate_id: str) -> bool:
        if self.templates is not None and aggregate_id in self.templates:
            return True
        return aggregate_id in self.aggregates

    def tokens(self, place: str) -> int:
        if place not in self.marking:
            raise UnresolvedReference(f"unknown place '{place}'")
        return self.marking[place]


def part_closure(aggregate_id: str, aggregates: Mapping[str, Aggregate]) -> set[str]:
    """Transitive closure of part links below one aggregate, excluding it.

    Raises CycleDetected (naming the cycle path) if the part graph loops, and
    UnknownAggregate when the root or a referenced child is not declared.
    """
    if aggregate_id not in aggregates:
        raise UnknownAggregate(f"unknown aggregate '{aggregate_id}'")
    closure: set[str] = set()
    stack: list[str] = []

    def visit(current: str):
        if current in stack:
            cycle = stack[stack.index(current):] + [current]
            raise CycleDetected(cycle)
        stack.append(current)
        node = aggregates.get(current)
        if node is None:
            raise UnknownAggregate(f"unknown aggregate '{current}'")
        for link in node.parts:
            closure.add(link.child)
            visit(link.child)
        stack.pop()

    visit(aggregate_id)
    return closure


def _quality_of(snapshot: Snapshot, aggregate_id: str, quality: str):
    """Return the quality value, None when declared-but-absent, raise otherwise."""
    node = snapshot.aggregates.get(aggregate_id)
    if node is None:
        if snapshot.declared(aggregate_id):
            return None
        raise UnresolvedReference(f"unknown aggregate '{aggregate_id}'")
    value = node.qualities.get(quality)
    if value is None:
        raise UnresolvedReference(
            f"aggregate '{aggregate_id}' has no quality '{quality}'"
        )
    return value


def evaluate_state(expr, snapshot: Snapshot) -> bool:
    """Standard boolean semantics over a snapshot.

    Quality comparisons are unit-checked; a token-state holds iff the place
    carries at least the required tokens.
    """
    if isinstance(expr, AndExpr):
        return all(evaluate_state(item, snapshot) for item in expr.items)
    if isinstance(expr, OrExpr):
        return any(evaluate_state(item, snapshot) for item in expr.items)
    if isinstance(expr, NotExpr):
        return not evaluate_state(expr.item, snapshot)
    if isinstance(expr, QualityState):
        if not isinstance(expr.literal, QualityValue):
            raise MechError(f"expression literal not bound: {expr}")
        value = _quality_of(snapshot, expr.aggregate, expr.quality)
        if value is None:
            return False
        return compare_values(expr.cmp, value, expr.literal)
    if isinstance(expr, ConfigState):
        if not isinstance(expr.literal, QualityValue):
            raise MechError(f"expression literal not bound: {expr}")
        rq = snapshot.rqs.get(expr.rq)
        if rq is None:
            raise UnresolvedReference(f"unknown relational quality '{expr.rq}'")
        return compare_values(expr.cmp, rq.value, expr.literal)
    if isinstance(expr, EmergentState):
        predicate = snapshot.predicates.get(expr.predicate)
        if predicate is None:
            raise UnresolvedReference(f"unregistered predicate '{expr.predicate}'")
        for aggregate_id in expr.aggregates:
            if not snapshot.declared(aggregate_id):
                raise UnresolvedReference(f"unknown aggregate '{aggregate_id}'")
        return bool(predicate(snapshot, expr.aggregates))
    if isinstance(expr, TokenState):
        return snapshot.tokens(expr.place) >= expr.count
    raise MechError(f"not a state expression: {expr!r}")


def _bound_value(literal, reference: QualityValue | None) -> QualityValue:
    if isinstance(literal, QualityValue):
        return literal
    raise MechError(f"effect literal not bound: {literal!r}")


def apply_effects(snapshot: Snapshot, effects) -> tuple[Snapshot, list, list]:
    """Apply an ordered effect list; returns (snapshot, deltas, messages).

    Deltas are (target, old, new) rendered strings. Message effects are
    returned for the caller to schedule; they do not touch the snapshot.
    """
    aggregates = dict(snapshot.aggregates)
    rqs = dict(snapshot.rqs)
    deltas: list[tuple[str, str, str]] = []
    messages: list[SendMessage] = []
    for effect in effects:
        if isinstance(effect, SetQuality):
            node = aggregates.get(effect.aggregate)
            if node is None:
                raise UnresolvedReference(
                    f"effect targets absent aggregate '{effect.aggregate}'"
                )
            old = node.qualities.get(effect.quality)
            if old is None:
                raise UnresolvedReference(
                    f"aggregate '{effect.aggregate}' has no quality '{effect.quality}'"
                )
            new = _bound_value(effect.literal, old)
            aggregates[effect.aggregate] = node.with_quality(effect.quality, new)
            deltas.append(
                (f"{effect.aggregate}.{effect.quality}", old.render(), new.render())
            )
        elif isinstance(effect, SetRq):
            rq = rqs.get(effect.rq)
            if rq is None:
                raise UnresolvedReference(f"unknown relational quality '{effect.rq}'")
            new = _bound_value(effect.literal, rq.value)
            rqs[effect.rq] = replace(rq, value=new)
            deltas.append((f"rq {effect.rq}", rq.value.render(), new.render()))
        elif isinstance(effect, CreateAggregate):
            templates = snapshot.templates or {}
            template = templates.get(effect.aggregate)
            if template is None:
                raise UnresolvedReference(
                    f"no declared template for aggregate '{effect.aggregate}'"
                )
            if effect.aggregate in aggregates:
                raise MechError(f"aggregate '{effect.aggregate}' already present")
            aggregates[effect.aggregate] = template
            deltas.append((f"aggregate {effect.aggregate}", "absent", "present"))
        elif isinstance(effect, DestroyAggregate):
            if effect.aggregate not in aggregates:
                raise UnresolvedReference(
                    f"cannot destroy absent aggregate '{effect.aggregate}'"
                )
            del aggregates[effect.aggregate]
            deltas.append((f"aggregate {effect.aggregate}", "present", "absent"))
        elif isinstance(effect, SendMessage):
            messages.append(effect)
        else:
            raise MechError(f"not an effect: {effect!r}")
    result = replace(snapshot, aggregates=aggregates, rqs=rqs)
    return result, deltas, messages


def _deliver_inline(snapshot: Snapshot, message: SendMessage) -> Snapshot:
    node = snapshot.aggregates.get(message.receiver)
    if node is None:
        if snapshot.declared(message.receiver):
            return snapshot  # message to an absent aggregate is dropped
        raise UnresolvedReference(f"unknown aggregate '{message.receiver}'")
    old = node.qualities.get(message.quality)
    if old is None:
        raise UnresolvedReference(
            f"aggregate '{message.receiver}' has no quality '{message.quality}'"
        )
    value = _bound_value(message.literal, old)
    aggregates = dict(snapshot.aggregates)
    aggregates[message.receiver] = node.with_quality(message.quality, value)
    return replace(snapshot, aggregates=aggregates)


def apply_transitional_unit(
    unit: TransitionalUnit,
    snapshot: Snapshot,
    transitionals: Mapping[str, Transitional],
    axioms=(),
) -> Snapshot:
    """Atomic application of one unit: consume, apply effects, produce.

    The input snapshot is left unmodified. Time is ignored: delays do not
    apply and message effects are delivered inline, which matches the
    untimed semantics used for chain checking and reachability.
    """
    transitional = transitionals.get(unit.transitional)
    if transitional is None:
        raise UnresolvedReference(f"unknown transitional '{unit.transitional}'")
    for place, count in unit.consumes:
        if snapshot.tokens(place) < count:
            raise PreconditionNotMet(
                f"unit '{unit.id}' needs {count} tokens at '{place}'"
            )
    if not evaluate_state(unit.inputs, snapshot):
        raise PreconditionNotMet(f"inputs of unit '{unit.id}' do not hold")
    marking = dict(snapshot.marking)
    for place, count in unit.consumes:
        marking[place] -= count
    working = replace(snapshot, marking=marking)
    working, _deltas, messages = apply_effects(working, transitional.effects)
    for message in messages:
        working = _deliver_inline(working, message)
    marking = dict(working.marking)
    for place, count in unit.produces:
        marking[place] = marking.get(place, 0) + count
    working = replace(working, marking=marking)
    for axiom in axioms:
        if not evaluate_state(axiom, working):
            raise AxiomViolated(f"axiom violated after unit '{unit.id}'")
    return working


def io_compatible(
    producer: TransitionalUnit,
    consumer: TransitionalUnit,
    snapshot: Snapshot,
    transitionals: Mapping[str, Transitional],
) -> bool:
    """True iff the consumer's inputs hold after the producer fires.

    The check is over ground facts: the producer's effects are applied to the
    model-initial snapshot (its own preconditions are not required), then the
    consumer's token needs and input conditions are evaluated on the result.
    """
    transitional = transitionals.get(producer.transitional)
    if transitional is None:
        raise UnresolvedReference(f"unknown transitional '{producer.transitional}'")
    marking = dict(snapshot.marking)
    for place, count in producer.consumes:
        if place not in marking:
            raise UnresolvedReference(f"unknown place '{place}'")
        marking[place] = max(0, marking[place] - count)
    working = replace(snapshot, marking=marking)
    working, _deltas, messages = apply_effects(working, transitional.effects)
    for message in messages:
        working = _deliver_inline(working, message)
    marking = dict(working.marking)
    for place, count in producer.produces:
        marking[place] = marking.get(place, 0) + count
    working = replace(working, marking=marking)
    for place, count in consumer.consumes:
        if working.tokens(place) < count:
            return False
    return evaluate_state(consumer.inputs, working)


def conservation_total(decl: ConservationDecl, snapshot: Snapshot) -> int:
    """Total of one conserved quantity over every live aggregate."""
    return sum(decl.contribution(a) for a in snapshot.aggregates.values())
