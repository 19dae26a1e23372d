"""Semantic validation and flattening of parsed model documents.

compile_document runs, in order: reference resolution, part-cycle check,
unit-output entailment, chain check, conservation check, refinement
resolution, metadata completeness, and structure classification. Phases are
gated: a phase that produces errors stops compilation, so later phases never
pile follow-on noise onto a root cause.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

from .diagnostics import ERROR, WARNING, Diagnostic, SourceSpan, has_errors, sort_diagnostics
from .errors import MechError
from .model import (
    Aggregate,
    AndExpr,
    Cmp,
    ConfigState,
    ConservationDecl,
    CreateAggregate,
    CURIE_RE,
    DestroyAggregate,
    EmergentState,
    FUNCTION_TYPES,
    MECHANISM_TYPES,
    Mechanism,
    Microworld,
    NotExpr,
    OrExpr,
    QualityState,
    QualityValue,
    RawLiteral,
    RelationalQuality,
    SendMessage,
    SetQuality,
    SetRq,
    Snapshot,
    TokenState,
    Transitional,
    TransitionalUnit,
    TRUE_EXPR,
    ValueKind,
    comparator_allowed,
    compare_values,
    conjunction_atoms,
    io_compatible,
    walk_expr,
)
from .parser import ModelDocument, PlaceDecl

DEFAULT_MAX_DEPTH = 16
_DNF_CAP = 128
_STATE_CAP = 4096

_INFERABLE = ("SimpleLinear", "Cyclic", "Concurrent")


@dataclass
class ModelContext:
    """Resolved declaration tables with all literals bound to typed values."""

    file: str = ""
    enums: dict = field(default_factory=dict)
    predicates: set = field(default_factory=set)
    aggregates: dict = field(default_factory=dict)
    rqs: dict = field(default_factory=dict)
    places: dict = field(default_factory=dict)
    transitionals: dict = field(default_factory=dict)
    units: dict = field(default_factory=dict)
    mechanisms: dict = field(default_factory=dict)
    microworld: Microworld | None = None
    conserves: dict = field(default_factory=dict)

    def initial_snapshot(self, predicates=None) -> Snapshot:
        absent = set()
        if self.microworld is not None:
            absent = {a for a, present in self.microworld.aggregates if not present}
        live = {
            aid: agg for aid, agg in self.aggregates.items() if aid not in absent
        }
        return Snapshot(
            aggregates=live,
            rqs=dict(self.rqs),
            marking=dict(self.places),
            templates=dict(self.aggregates),
            predicates=predicates or {},
        )

    def execution_mechanisms(self) -> list[Mechanism]:
        if self.microworld is not None:
            return [self.mechanisms[m] for m in self.microworld.mechanisms]
        return list(self.mechanisms.values())

    def execution_units(self) -> dict:
        units = {}
        for mech in self.execution_mechanisms():
            for uid in mech.organization:
                units.setdefault(uid, self.units[uid])
        return units

    def axioms(self) -> tuple:
        return self.microworld.axioms if self.microworld is not None else ()

    def to_document(self) -> ModelDocument:
        return ModelDocument(
            file=self.file,
            enums=tuple(self.enums.values()),
            predicates=tuple(self.predicates_decls),
            aggregates=tuple(self.aggregates.values()),
            rqs=tuple(self.rqs.values()),
            places=tuple(PlaceDecl(pid, count) for pid, count in self.places.items()),
            transitionals=tuple(self.transitionals.values()),
            units=tuple(self.units.values()),
            mechanisms=tuple(self.mechanisms.values()),
            microworlds=(self.microworld,) if self.microworld is not None else (),
            conserves=tuple(self.conserves.values()),
        )

    @property
    def predicates_decls(self):
        from .parser import PredicateDecl

        return [PredicateDecl(name) for name in self.predicates]


@dataclass(frozen=True)
class Classification:
    """Inferred structure of one mechanism."""

    inferred: str | None
    concurrent: bool
    cyclic_marking: bool

    def describe(self) -> str:
        if self.inferred is None:
            return "unclassified"
        text = self.inferred
        if self.cyclic_marking and self.inferred != "Cyclic":
            text += " (cyclic marking structure)"
        return text


@dataclass(frozen=True)
class CompiledModel:
    """A validated, flattened model ready for execution."""

    context: ModelContext
    unit_graphs: dict  # mechanism id -> {unit id: (successor ids,)}
    classifications: dict  # mechanism id -> Classification
    refinement_tree: dict  # replaced unit id -> (mechanism id, (new unit ids,))
    warnings: tuple[Diagnostic, ...]

    def to_document(self) -> ModelDocument:
        return self.context.to_document()


@dataclass(frozen=True)
class CompileResult:
    model: CompiledModel | None
    diagnostics: tuple[Diagnostic, ...]

    @property
    def ok(self) -> bool:
        return self.model is not None

    @property
    def errors(self) -> tuple[Diagnostic, ...]:
        return tuple(d for d in self.diagnostics if d.severity == ERROR)


def _diag(diags, code, message, span, related=()):
    diags.append(Diagnostic(ERROR, code, message, span, tuple(related)))


def _warn(diags, code, message, span, related=()):
    diags.append(Diagnostic(WARNING, code, message, span, tuple(related)))


# ---------------------------------------------------------------------------
# Phase 1: reference resolution and literal binding
# ---------------------------------------------------------------------------


def _bind_literal(literal, target: QualityValue, span, diags, what: str):
    """Bind a raw literal against the declared kind of its target."""
    if isinstance(literal, QualityValue):
        return literal
    if not isinstance(literal, RawLiteral):
        _diag(diags, "LITERAL_TYPE", f"{what}: unusable literal", span)
        return None
    kind = target.kind
    if kind is ValueKind.COUNT:
        if literal.kind != "number" or literal.number.denominator != 1:
            _diag(diags, "LITERAL_TYPE", f"{what}: expected a count", literal.span or span)
            return None
        if literal.number < 0:
            _diag(diags, "COUNT_NEGATIVE", f"{what}: counts are nonnegative", literal.span or span)
            return None
        return QualityValue.count(int(literal.number))
    if kind is ValueKind.SCALAR:
        if literal.kind != "number":
            _diag(diags, "LITERAL_TYPE", f"{what}: expected a scalar", literal.span or span)
            return None
        if literal.unit != target.unit:
            _diag(
                diags,
                "UNIT_MISMATCH",
                f"{what}: unit '{literal.unit or ''}' does not match '{target.unit}'",
                literal.span or span,
            )
            return None
        return QualityValue.scalar(literal.number, target.unit)
    if kind is ValueKind.BOOLEAN:
        if literal.kind != "bool":
            _diag(diags, "LITERAL_TYPE", f"{what}: expected true or false", literal.span or span)
            return None
        return QualityValue.boolean(literal.boolean)
    if literal.kind != "symbol":
        _diag(diags, "LITERAL_TYPE", f"{what}: expected an enum symbol", literal.span or span)
        return None
    return QualityValue.enum(literal.symbol, domain=target.domain)


class _Resolver:
    def __init__(self, document: ModelDocument):
        self.doc = document
        self.diags: list[Diagnostic] = []
        self.ctx = ModelContext(file=document.file)

    def run(self):
        doc, ctx, diags = self.doc, self.ctx, self.diags
        for enum in doc.enums:
            ctx.enums[enum.id] = enum
        ctx.predicates = {p.id for p in doc.predicates}
        for place in doc.places:
            ctx.places[place.id] = place.initial
        declared_aggregates = {a.id for a in doc.aggregates}
        for agg in doc.aggregates:
            ctx.aggregates[agg.id] = self._resolve_aggregate(agg, declared_aggregates)
        for rq in doc.rqs:
            ctx.rqs[rq.id] = self._resolve_rq(rq)
        for trans in doc.transitionals:
            ctx.transitionals[trans.id] = self._resolve_transitional(trans)
        for unit in doc.units:
            ctx.units[unit.id] = self._resolve_unit(unit)
        for mech in doc.mechanisms:
            ctx.mechanisms[mech.id] = self._resolve_mechanism(mech)
        if len(doc.microworlds) > 1:
            _diag(
                self.diags,
                "MULTIPLE_MICROWORLDS",
                "a document may declare at most one microworld",
                doc.microworlds[1].span,
            )
        if doc.microworlds:
            ctx.microworld = self._resolve_microworld(doc.microworlds[0])
        for decl in doc.conserves:
            ctx.conserves[decl.name] = self._resolve_conserve(decl)
        self._check_exempt_names()
        return ctx, self.diags

    # -- pieces ------------------------------------------------------------

    def _resolve_quality_value(self, value: QualityValue, span, what):
        if value.kind is ValueKind.ENUM:
            domain = self.ctx.enums.get(value.domain)
            if domain is None:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown enum domain '{value.domain}'",
                    span,
                )
            elif value.value not in domain.symbols:
                _diag(
                    self.diags,
                    "ENUM_SYMBOL_UNKNOWN",
                    f"{what}: symbol '{value.value}' is not in enum '{value.domain}'",
                    span,
                )
        return value

    def _resolve_aggregate(self, agg: Aggregate, declared):
        for ref in agg.ontology_refs:
            if not CURIE_RE.match(ref):
                _diag(
                    self.diags,
                    "INVALID_CURIE",
                    f"ontology annotation '{ref}' is not CURIE-shaped (PREFIX:LOCAL)",
                    agg.span,
                )
        qualities = {
            name: self._resolve_quality_value(v, agg.span, f"aggregate '{agg.id}' quality '{name}'")
            for name, v in agg.qualities.items()
        }
        for link in agg.parts:
            if link.child not in declared:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"aggregate '{agg.id}' links to undeclared part '{link.child}'",
                    agg.span,
                )
        return replace(agg, qualities=qualities)

    def _resolve_rq(self, rq: RelationalQuality):
        if len(rq.participants) < 2:
            _diag(
                self.diags,
                "RQ_PARTICIPANTS",
                f"relational quality '{rq.id}' needs at least two participants",
                rq.span,
            )
        for pid in rq.participants:
            if pid not in self.ctx.aggregates:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"relational quality '{rq.id}' references unknown aggregate '{pid}'",
                    rq.span,
                )
        value = self._resolve_quality_value(rq.value, rq.span, f"rq '{rq.id}' value")
        for pid in rq.participants:
            agg = self.ctx.aggregates.get(pid)
            if agg is not None and rq.id not in agg.relational_qualities:
                self.ctx.aggregates[pid] = replace(
                    agg, relational_qualities=agg.relational_qualities + (rq.id,)
                )
        return replace(rq, value=value)

    def _quality_target(self, aggregate: str, quality: str, span, what):
        agg = self.ctx.aggregates.get(aggregate)
        if agg is None:
            _diag(
                self.diags,
                "UNRESOLVED_REFERENCE",
                f"{what}: unknown aggregate '{aggregate}'",
                span,
            )
            return None
        target = agg.qualities.get(quality)
        if target is None:
            _diag(
                self.diags,
                "UNRESOLVED_REFERENCE",
                f"{what}: aggregate '{aggregate}' has no quality '{quality}'",
                span,
            )
            return None
        return target

    def _resolve_transitional(self, trans: Transitional):
        effects = []
        for effect in trans.effects:
            what = f"transitional '{trans.id}'"
            if isinstance(effect, SetQuality):
                target = self._quality_target(effect.aggregate, effect.quality, effect.span, what)
                if target is None:
                    continue
                bound = _bind_literal(effect.literal, target, effect.span, self.diags, what)
                if bound is None:
                    continue
                bound = self._resolve_quality_value(bound, effect.span, what)
                effects.append(replace(effect, literal=bound))
            elif isinstance(effect, SetRq):
                rq = self.ctx.rqs.get(effect.rq)
                if rq is None:
                    _diag(
                        self.diags,
                        "UNRESOLVED_REFERENCE",
                        f"{what}: unknown relational quality '{effect.rq}'",
                        effect.span,
                    )
                    continue
                bound = _bind_literal(effect.literal, rq.value, effect.span, self.diags, what)
                if bound is None:
                    continue
                effects.append(replace(effect, literal=bound))
            elif isinstance(effect, (CreateAggregate, DestroyAggregate)):
                if effect.aggregate not in self.ctx.aggregates:
                    _diag(
                        self.diags,
                        "UNRESOLVED_REFERENCE",
                        f"{what}: unknown aggregate '{effect.aggregate}'",
                        effect.span,
                    )
                    continue
                effects.append(effect)
            elif isinstance(effect, SendMessage):
                if not effect.sender:
                    _diag(
                        self.diags,
                        "UNRESOLVED_REFERENCE",
                        f"{what}: message effects need a sender ('from <aggregate>')",
                        effect.span,
                    )
                    continue
                if effect.sender not in self.ctx.aggregates:
                    _diag(
                        self.diags,
                        "UNRESOLVED_REFERENCE",
                        f"{what}: unknown sender aggregate '{effect.sender}'",
                        effect.span,
                    )
                    continue
                target = self._quality_target(effect.receiver, effect.quality, effect.span, what)
                if target is None:
                    continue
                bound = _bind_literal(effect.literal, target, effect.span, self.diags, what)
                if bound is None:
                    continue
                bound = self._resolve_quality_value(bound, effect.span, what)
                effects.append(replace(effect, literal=bound))
        return replace(trans, effects=tuple(effects))

    def _bind_expr(self, expr, span, what):
        if isinstance(expr, AndExpr):
            return AndExpr(
                tuple(self._bind_expr(i, span, what) for i in expr.items), span=expr.span
            )
        if isinstance(expr, OrExpr):
            return OrExpr(
                tuple(self._bind_expr(i, span, what) for i in expr.items), span=expr.span
            )
        if isinstance(expr, NotExpr):
            return NotExpr(self._bind_expr(expr.item, span, what), span=expr.span)
        if isinstance(expr, QualityState):
            target = self._quality_target(expr.aggregate, expr.quality, expr.span or span, what)
            if target is None:
                return expr
            bound = _bind_literal(expr.literal, target, expr.span or span, self.diags, what)
            if bound is None:
                return expr
            bound = self._resolve_quality_value(bound, expr.span or span, what)
            if not comparator_allowed(expr.cmp, target.kind):
                _diag(
                    self.diags,
                    "COMPARATOR_INVALID",
                    f"{what}: comparator '{expr.cmp.value}' not allowed for {target.kind.value}",
                    expr.span or span,
                )
            return replace(expr, literal=bound)
        if isinstance(expr, ConfigState):
            rq = self.ctx.rqs.get(expr.rq)
            if rq is None:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown relational quality '{expr.rq}'",
                    expr.span or span,
                )
                return expr
            bound = _bind_literal(expr.literal, rq.value, expr.span or span, self.diags, what)
            if bound is None:
                return expr
            if not comparator_allowed(expr.cmp, rq.value.kind):
                _diag(
                    self.diags,
                    "COMPARATOR_INVALID",
                    f"{what}: comparator '{expr.cmp.value}' not allowed for {rq.value.kind.value}",
                    expr.span or span,
                )
            return replace(expr, literal=bound)
        if isinstance(expr, EmergentState):
            if expr.predicate not in self.ctx.predicates:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: undeclared predicate '{expr.predicate}'",
                    expr.span or span,
                )
            for aid in expr.aggregates:
                if aid not in self.ctx.aggregates:
                    _diag(
                        self.diags,
                        "UNRESOLVED_REFERENCE",
                        f"{what}: unknown aggregate '{aid}'",
                        expr.span or span,
                    )
            return expr
        if isinstance(expr, TokenState):
            if expr.place not in self.ctx.places:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown place '{expr.place}'",
                    expr.span or span,
                )
            return expr
        raise MechError(f"unexpected expression node {expr!r}")

    def _resolve_unit(self, unit: TransitionalUnit):
        what = f"unit '{unit.id}'"
        if unit.transitional not in self.ctx.transitionals:
            _diag(
                self.diags,
                "UNRESOLVED_REFERENCE",
                f"{what}: unknown transitional '{unit.transitional}'",
                unit.span,
            )
        for place, _count in unit.consumes + unit.produces:
            if place not in self.ctx.places:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown place '{place}'",
                    unit.span,
                )
        inputs = self._bind_expr(unit.inputs, unit.span, what)
        outputs = self._bind_expr(unit.outputs, unit.span, what)
        return replace(unit, inputs=inputs, outputs=outputs)

    def _resolve_mechanism(self, mech: Mechanism):
        what = f"mechanism '{mech.id}'"
        for part, _role in mech.parts:
            if part not in self.ctx.aggregates:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown part aggregate '{part}'",
                    mech.span,
                )
        for place in mech.places:
            if place not in self.ctx.places:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown place '{place}'",
                    mech.span,
                )
        for uid in mech.organization:
            if uid not in self.ctx.units:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown unit '{uid}'",
                    mech.span,
                )
        for name in mech.conserved:
            if name not in {c.name for c in self.doc.conserves}:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown conserved quantity '{name}'",
                    mech.span,
                )
        setup = self._bind_expr(mech.phenomenon.setup, mech.span, f"{what} setup")
        termination = self._bind_expr(
            mech.phenomenon.termination, mech.span, f"{what} termination"
        )
        phen = replace(mech.phenomenon, setup=setup, termination=termination)
        resolved = replace(mech, phenomenon=phen)
        self._check_scope(resolved)
        self._check_satisfiable(resolved)
        return resolved

    def _check_scope(self, mech: Mechanism):
        """Every unit of a mechanism references only its declared parts/places."""
        parts = {p for p, _ in mech.parts}
        places = set(mech.places)

        def check_expr(expr, owner):
            for node in walk_expr(expr):
                if isinstance(node, QualityState) and node.aggregate not in parts:
                    if node.aggregate in self.ctx.aggregates:
                        _diag(
                            self.diags,
                            "UNDECLARED_PART",
                            f"{owner} references aggregate '{node.aggregate}' "
                            f"which is not a part of mechanism '{mech.id}'",
                            node.span or mech.span,
                        )
                elif isinstance(node, TokenState) and node.place not in places:
                    if node.place in self.ctx.places:
                        _diag(
                            self.diags,
                            "UNDECLARED_PART",
                            f"{owner} references place '{node.place}' "
                            f"which is not declared in mechanism '{mech.id}'",
                            node.span or mech.span,
                        )
                elif isinstance(node, EmergentState):
                    for aid in node.aggregates:
                        if aid in self.ctx.aggregates and aid not in parts:
                            _diag(
                                self.diags,
                                "UNDECLARED_PART",
                                f"{owner} references aggregate '{aid}' "
                                f"which is not a part of mechanism '{mech.id}'",
                                node.span or mech.span,
                            )

        check_expr(mech.phenomenon.setup, f"setup of mechanism '{mech.id}'")
        check_expr(mech.phenomenon.termination, f"termination of mechanism '{mech.id}'")
        for uid in mech.organization:
            unit = self.ctx.units.get(uid)
            if unit is None:
                continue
            owner = f"unit '{uid}'"
            check_expr(unit.inputs, owner)
            check_expr(unit.outputs, owner)
            for place, _n in unit.consumes + unit.produces:
                if place not in places and place in self.ctx.places:
                    _diag(
                        self.diags,
                        "UNDECLARED_PART",
                        f"{owner} uses place '{place}' which is not declared "
                        f"in mechanism '{mech.id}'",
                        unit.span,
                    )
            trans = self.ctx.transitionals.get(unit.transitional)
            if trans is None:
                continue
            for effect in trans.effects:
                touched = []
                if isinstance(effect, SetQuality):
                    touched = [effect.aggregate]
                elif isinstance(effect, (CreateAggregate, DestroyAggregate)):
                    touched = [effect.aggregate]
                elif isinstance(effect, SendMessage):
                    touched = [effect.sender, effect.receiver]
                for aid in touched:
                    if aid in self.ctx.aggregates and aid not in parts:
                        _diag(
                            self.diags,
                            "UNDECLARED_PART",
                            f"{owner} (via transitional '{trans.id}') touches aggregate "
                            f"'{aid}' which is not a part of mechanism '{mech.id}'",
                            unit.span,
                        )

    def _check_satisfiable(self, mech: Mechanism):
        for label, expr in (
            ("setup", mech.phenomenon.setup),
            ("termination", mech.phenomenon.termination),
        ):
            if not _satisfiable(expr, self.ctx):
                _diag(
                    self.diags,
                    "PHENOMENON_UNSATISFIABLE",
                    f"{label} of mechanism '{mech.id}' is unsatisfiable",
                    mech.phenomenon.span or mech.span,
                )

    def _resolve_microworld(self, world: Microworld):
        what = f"microworld '{world.id}'"
        for aid, _present in world.aggregates:
            if aid not in self.ctx.aggregates:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown aggregate '{aid}'",
                    world.span,
                )
        for mid in world.mechanisms:
            if mid not in self.ctx.mechanisms:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"{what}: unknown mechanism '{mid}'",
                    world.span,
                )
        axioms = tuple(
            self._bind_expr(a, world.span, f"{what} axiom") for a in world.axioms
        )
        return replace(world, axioms=axioms)

    def _resolve_conserve(self, decl: ConservationDecl):
        for rule in decl.rules:
            if rule.matcher == "aggregate" and rule.pattern not in self.ctx.aggregates:
                _diag(
                    self.diags,
                    "UNRESOLVED_REFERENCE",
                    f"conserve '{decl.name}': unknown aggregate '{rule.pattern}'",
                    rule.span or decl.span,
                )
        return decl

    def _check_exempt_names(self):
        names = set(self.ctx.conserves)
        for unit in self.ctx.units.values():
            for name in unit.exempt:
                if name not in names:
                    _diag(
                        self.diags,
                        "UNRESOLVED_REFERENCE",
                        f"unit '{unit.id}': unknown conserved quantity '{name}' in exempt list",
                        unit.span,
                    )


# ---------------------------------------------------------------------------
# Satisfiability of phenomenon expressions (finite candidate domains)
# ---------------------------------------------------------------------------


def _dnf(expr, positive=True):
    """Expand to a capped list of branches of (atom, positive) literals."""
    if isinstance(expr, NotExpr):
        return _dnf(expr.item, not positive)
    if isinstance(expr, AndExpr):
        items = expr.items
        if not positive:
            return _dnf(OrExpr(tuple(NotExpr(i) for i in items)), True)
        branches = [[]]
        for item in items:
            sub = _dnf(item, True)
            branches = [a + b for a in branches for b in sub]
            if len(branches) > _DNF_CAP:
                return None
        return branches
    if isinstance(expr, OrExpr):
        items = expr.items
        if not positive:
            return _dnf(AndExpr(tuple(NotExpr(i) for i in items)), True)
        branches = []
        for item in items:
            sub = _dnf(item, True)
            if sub is None:
                return None
            branches.extend(sub)
            if len(branches) > _DNF_CAP:
                return None
        return branches if branches else [[]]
    return [[(expr, positive)]]


def _atom_target(atom):
    if isinstance(atom, QualityState):
        return ("q", atom.aggregate, atom.quality)
    if isinstance(atom, ConfigState):
        return ("rq", atom.rq)
    if isinstance(atom, TokenState):
        return ("tok", atom.place)
    return None


def _satisfiable(expr, ctx: ModelContext) -> bool:
    branches = _dnf(expr)
    if branches is None:
        return True  # too large to decide; assume satisfiable
    for branch in branches:
        by_target: dict = {}
        ok = True
        for atom, positive in branch:
            key = _atom_target(atom)
            if key is None:
                continue  # emergent states are assumed satisfiable
            by_target.setdefault(key, []).append((atom, positive))
        for key, atoms in by_target.items():
            candidates = _candidate_values(key, atoms, ctx)
            if not any(
                all(_atom_holds(atom, value) == positive for atom, positive in atoms)
                for value in candidates
            ):
                ok = False
                break
        if ok:
            return True
    return False


def _candidate_values(key, atoms, ctx: ModelContext):
    if key[0] == "tok":
        counts = {0}
        for atom, _pos in atoms:
            counts.add(atom.count)
            counts.add(max(0, atom.count - 1))
            counts.add(atom.count + 1)
        return [("tok", c) for c in sorted(counts)]
    literals = [a.literal for a, _pos in atoms if isinstance(a.literal, QualityValue)]
    if not literals:
        return []
    kind = literals[0].kind
    if kind is ValueKind.ENUM:
        domain = ctx.enums.get(literals[0].domain)
        symbols = domain.symbols if domain else [l.value for l in literals]
        return [QualityValue.enum(s, domain=literals[0].domain) for s in symbols]
    if kind is ValueKind.BOOLEAN:
        return [QualityValue.boolean(True), QualityValue.boolean(False)]
    values = set()
    for lit in literals:
        values.add(lit.value)
        values.add(lit.value + 1)
        if kind is ValueKind.SCALAR or lit.value - 1 >= 0:
            values.add(lit.value - 1)
    if kind is ValueKind.COUNT:
        return [QualityValue.count(int(v)) for v in sorted(values) if v >= 0]
    unit = literals[0].unit
    return [QualityValue.scalar(v, unit) for v in sorted(values)]


def _atom_holds(atom, value) -> bool:
    if isinstance(atom, TokenState):
        return value[1] >= atom.count
    return compare_values(atom.cmp, value, atom.literal)


# ---------------------------------------------------------------------------
# Phase 2: part cycles
# ---------------------------------------------------------------------------


def check_part_cycles(ctx: ModelContext) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {aid: WHITE for aid in ctx.aggregates}
    reported: set[frozenset] = set()

    def visit(aid, stack):
        color[aid] = GRAY
        stack.append(aid)
        for link in ctx.aggregates[aid].parts:
            child = link.child
            if child not in ctx.aggregates:
                continue
            if color[child] == GRAY:
                cycle = stack[stack.index(child):] + [child]
                key = frozenset(cycle)
                if key not in reported:
                    reported.add(key)
                    _diag(
                        diags,
                        "PART_CYCLE",
                        "part links form a cycle: " + " -> ".join(cycle),
                        ctx.aggregates[child].span,
                        related=[ctx.aggregates[a].span for a in cycle[1:-1]],
                    )
            elif color[child] == WHITE:
                visit(child, stack)
        stack.pop()
        color[aid] = BLACK

    for aid in ctx.aggregates:
        if color[aid] == WHITE:
            visit(aid, [])
    return diags


# ---------------------------------------------------------------------------
# Phase 3: unit outputs must follow from effects (or carried inputs)
# ---------------------------------------------------------------------------


def _final_effect_values(trans: Transitional, ctx: ModelContext):
    """Last-write-wins view of what the effect list establishes."""
    qualities: dict = {}
    rqs: dict = {}
    created: set = set()
    destroyed: set = set()
    for effect in trans.effects:
        if isinstance(effect, SetQuality):
            qualities[(effect.aggregate, effect.quality)] = effect.literal
        elif isinstance(effect, SendMessage):
            qualities[(effect.receiver, effect.quality)] = effect.literal
        elif isinstance(effect, SetRq):
            rqs[effect.rq] = effect.literal
        elif isinstance(effect, CreateAggregate):
            created.add(effect.aggregate)
            destroyed.discard(effect.aggregate)
            template = ctx.aggregates.get(effect.aggregate)
            if template is not None:
                for name, value in template.qualities.items():
                    qualities.setdefault((effect.aggregate, name), value)
        elif isinstance(effect, DestroyAggregate):
            destroyed.add(effect.aggregate)
            created.discard(effect.aggregate)
    return qualities, rqs, created, destroyed


def _input_entails(unit: TransitionalUnit, atom) -> bool:
    """Conservative frame rule: an untouched output atom carried by the inputs."""
    try:
        input_atoms = conjunction_atoms(unit.inputs)
    except MechError:
        return False
    for other in input_atoms:
        if isinstance(atom, QualityState) and isinstance(other, QualityState):
            if (other.aggregate, other.quality) != (atom.aggregate, atom.quality):
                continue
            if other.cmp is Cmp.EQ and isinstance(other.literal, QualityValue):
                if isinstance(atom.literal, QualityValue) and compare_values(
                    atom.cmp, other.literal, atom.literal
                ):
                    return True
            if other.cmp is atom.cmp and other.literal == atom.literal:
                return True
        elif isinstance(atom, ConfigState) and isinstance(other, ConfigState):
            if other.rq != atom.rq:
                continue
            if other.cmp is Cmp.EQ and isinstance(other.literal, QualityValue):
                if isinstance(atom.literal, QualityValue) and compare_values(
                    atom.cmp, other.literal, atom.literal
                ):
                    return True
            if other.cmp is atom.cmp and other.literal == atom.literal:
                return True
        elif isinstance(atom, TokenState) and isinstance(other, TokenState):
            if other.place == atom.place and other.count >= atom.count:
                consumed = sum(n for p, n in unit.consumes if p == atom.place)
                if other.count - consumed >= atom.count:
                    return True
    return False


def check_output_entailment(ctx: ModelContext) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    for unit in ctx.units.values():
        trans = ctx.transitionals.get(unit.transitional)
        if trans is None:
            continue
        try:
            atoms = conjunction_atoms(unit.outputs)
        except MechError:
            _diag(
                diags,
                "OUTPUT_NOT_CONJUNCTION",
                f"unit '{unit.id}': outputs must be a conjunction of atomic conditions",
                unit.span,
            )
            continue
        qualities, rqs, _created, destroyed = _final_effect_values(trans, ctx)
        produced = {}
        for place, count in unit.produces:
            produced[place] = produced.get(place, 0) + count
        for atom in atoms:
            ok = False
            if isinstance(atom, QualityState):
                if atom.aggregate in destroyed:
                    ok = False
                elif (atom.aggregate, atom.quality) in qualities:
                    value = qualities[(atom.aggregate, atom.quality)]
                    ok = isinstance(value, QualityValue) and isinstance(
                        atom.literal, QualityValue
                    ) and compare_values(atom.cmp, value, atom.literal)
                else:
                    ok = _input_entails(unit, atom)
            elif isinstance(atom, ConfigState):
                if atom.rq in rqs:
                    value = rqs[atom.rq]
                    ok = isinstance(value, QualityValue) and isinstance(
                        atom.literal, QualityValue
                    ) and compare_values(atom.cmp, value, atom.literal)
                else:
                    ok = _input_entails(unit, atom)
            elif isinstance(atom, TokenState):
                ok = produced.get(atom.place, 0) >= atom.count or _input_entails(unit, atom)
            if not ok:
                from .serializer import render_expression

                _diag(
                    diags,
                    "OUTPUT_NOT_ENTAILED",
                    f"unit '{unit.id}': output '{render_expression(atom)}' does not "
                    f"follow from the effects of transitional '{trans.id}'",
                    unit.span,
                    related=[trans.span],
                )
    return diags


# ---------------------------------------------------------------------------
# Phase 4: chain check over ground facts
# ---------------------------------------------------------------------------


class FactSet:
    """Accumulated ground facts: value sets per target, max tokens per place."""

    def __init__(self):
        self.values: dict = {}  # ("q", agg, quality) / ("rq", id) -> set of QualityValue
        self.tokens: dict = {}  # place -> max count seen

    def add_value(self, key, value) -> bool:
        bucket = self.values.setdefault(key, set())
        if value in bucket:
            return False
        bucket.add(value)
        return True

    def add_tokens(self, place, count) -> bool:
        if count <= self.tokens.get(place, 0):
            return False
        self.tokens[place] = count
        return True

    def copy(self) -> "FactSet":
        out = FactSet()
        out.values = {k: set(v) for k, v in self.values.items()}
        out.tokens = dict(self.tokens)
        return out


def _fact_sat_atom(atom, facts: FactSet, negated=False) -> bool:
    if isinstance(atom, QualityState):
        values = facts.values.get(("q", atom.aggregate, atom.quality), ())
        if not isinstance(atom.literal, QualityValue):
            return True
        for value in values:
            holds = compare_values(atom.cmp, value, atom.literal)
            if holds != negated:
                return True
        return False
    if isinstance(atom, ConfigState):
        values = facts.values.get(("rq", atom.rq), ())
        if not isinstance(atom.literal, QualityValue):
            return True
        for value in values:
            holds = compare_values(atom.cmp, value, atom.literal)
            if holds != negated:
                return True
        return False
    if isinstance(atom, TokenState):
        if negated:
            return True  # tokens can always be drained by other firings
        return facts.tokens.get(atom.place, 0) >= atom.count
    if isinstance(atom, EmergentState):
        return True  # cannot be decided statically
    raise MechError(f"unexpected atom {atom!r}")


def _fact_sat(expr, facts: FactSet, negated=False) -> bool:
    if isinstance(expr, AndExpr):
        if negated:
            return any(_fact_sat(i, facts, True) for i in expr.items)
        return all(_fact_sat(i, facts, False) for i in expr.items)
    if isinstance(expr, OrExpr):
        if negated:
            return all(_fact_sat(i, facts, True) for i in expr.items)
        return any(_fact_sat(i, facts, False) for i in expr.items)
    if isinstance(expr, NotExpr):
        return _fact_sat(expr.item, facts, not negated)
    return _fact_sat_atom(expr, facts, negated)


def _initial_facts(mechanism: Mechanism, ctx: ModelContext) -> FactSet:
    facts = FactSet()
    snapshot = ctx.initial_snapshot()
    for part, _role in mechanism.parts:
        agg = snapshot.aggregates.get(part)
        if agg is None:
            continue
        for name, value in agg.qualities.items():
            facts.add_value(("q", part, name), value)
    for rq in ctx.rqs.values():
        facts.add_value(("rq", rq.id), rq.value)
    for place in mechanism.places:
        facts.add_tokens(place, ctx.places.get(place, 0))
    return facts


def _token_caps(mechanism: Mechanism, ctx: ModelContext) -> dict:
    caps: dict = {}
    for place in mechanism.places:
        caps[place] = ctx.places.get(place, 0)
    for uid in mechanism.organization:
        unit = ctx.units.get(uid)
        if unit is None:
            continue
        for place, count in unit.consumes:
            caps[place] = max(caps.get(place, 0), count)
        for node in walk_expr(unit.inputs):
            if isinstance(node, TokenState):
                caps[node.place] = max(caps.get(node.place, 0), node.count)
    return caps


def _unit_fact_payload(unit: TransitionalUnit, ctx: ModelContext):
    """Facts a firing of this unit can add: effect results and output atoms."""
    payload = []
    trans = ctx.transitionals.get(unit.transitional)
    if trans is not None:
        qualities, rqs, created, _destroyed = _final_effect_values(trans, ctx)
        for key, value in qualities.items():
            if isinstance(value, QualityValue):
                payload.append((("q",) + key, value))
        for rq_id, value in rqs.items():
            if isinstance(value, QualityValue):
                payload.append((("rq", rq_id), value))
    try:
        for atom in conjunction_atoms(unit.outputs):
            if isinstance(atom, QualityState) and atom.cmp is Cmp.EQ:
                if isinstance(atom.literal, QualityValue):
                    payload.append((("q", atom.aggregate, atom.quality), atom.literal))
            elif isinstance(atom, ConfigState) and atom.cmp is Cmp.EQ:
                if isinstance(atom.literal, QualityValue):
                    payload.append((("rq", atom.rq), atom.literal))
    except MechError:
        pass
    return payload


def _closure(mechanism: Mechanism, ctx: ModelContext, guarded: bool):
    """Forward closure of producible facts; returns (facts, fired unit ids)."""
    facts = _initial_facts(mechanism, ctx)
    caps = _token_caps(mechanism, ctx)
    units = [ctx.units[uid] for uid in mechanism.organization if uid in ctx.units]
    fired: set[str] = set()
    if not guarded:
        for unit in units:
            fired.add(unit.id)
            for key, value in _unit_fact_payload(unit, ctx):
                facts.add_value(key, value)
            for place, _count in unit.produces:
                facts.add_tokens(place, caps.get(place, 0))
        return facts, fired
    changed = True
    while changed:
        changed = False
        for unit in units:
            tokens_ok = all(
                facts.tokens.get(place, 0) >= count for place, count in unit.consumes
            )
            if not tokens_ok or not _fact_sat(unit.inputs, facts):
                continue
            if unit.id not in fired:
                fired.add(unit.id)
                changed = True
            for key, value in _unit_fact_payload(unit, ctx):
                if facts.add_value(key, value):
                    changed = True
            for place, count in unit.produces:
                # clamp at the largest count any unit ever needs so the
                # fixpoint terminates; nothing queries beyond the cap
                cap = caps.get(place, 0)
                new = min(cap, facts.tokens.get(place, 0) + count)
                if facts.add_tokens(place, new):
                    changed = True
    return facts, fired


def check_chain(mechanism: Mechanism, ctx: ModelContext) -> list[Diagnostic]:
    """Chain compatibility: every unit's inputs must be producible from setup.

    A unit whose inputs cannot be met even if every other unit contributes its
    outputs is a CHAIN_MISMATCH error; a unit that is merely never reached by
    the guarded forward closure is an UNREACHABLE_UNIT warning.
    """
    from .serializer import render_expression

    diags: list[Diagnostic] = []
    optimistic, _ = _closure(mechanism, ctx, guarded=False)
    _, fired = _closure(mechanism, ctx, guarded=True)
    for uid in mechanism.organization:
        unit = ctx.units.get(uid)
        if unit is None:
            continue
        tokens_ok = all(
            optimistic.tokens.get(place, 0) >= count for place, count in unit.consumes
        )
        if tokens_ok and _fact_sat(unit.inputs, optimistic):
            if uid not in fired:
                _warn(
                    diags,
                    "UNREACHABLE_UNIT",
                    f"unit '{uid}' can never fire from the setup state of "
                    f"mechanism '{mechanism.id}'",
                    unit.span,
                )
            continue
        detail, related = _mismatch_detail(unit, mechanism, ctx, optimistic)
        _diag(
            diags,
            "CHAIN_MISMATCH",
            f"inputs of unit '{uid}' cannot be satisfied by any chain of "
            f"outputs in mechanism '{mechanism.id}'{detail}",
            unit.span,
            related=related,
        )
    return diags


def _mismatch_detail(unit, mechanism, ctx, optimistic):
    from .serializer import render_expression

    related: list[SourceSpan] = []
    detail = ""
    for node in walk_expr(unit.inputs):
        if isinstance(node, (QualityState, ConfigState, TokenState)):
            if _fact_sat_atom(node, optimistic):
                continue
            producers = _producers_of(node, mechanism, ctx, exclude=unit.id)
            names = ", ".join(f"'{p.id}'" for p in producers)
            available = _available_text(node, optimistic)
            detail = (
                f": requires {render_expression(node)}, but {available}"
                + (f" (produced by unit {names})" if names else "")
            )
            related = [p.span for p in producers]
            break
    for place, count in unit.consumes:
        if optimistic.tokens.get(place, 0) < count and not detail:
            detail = (
                f": needs {count} tokens at place '{place}', at most "
                f"{optimistic.tokens.get(place, 0)} ever available"
            )
    return detail, related


def _producers_of(atom, mechanism, ctx, exclude):
    producers = []
    for uid in mechanism.organization:
        if uid == exclude:
            continue
        other = ctx.units.get(uid)
        if other is None:
            continue
        for key, _value in _unit_fact_payload(other, ctx):
            if isinstance(atom, QualityState) and key == ("q", atom.aggregate, atom.quality):
                producers.append(other)
                break
            if isinstance(atom, ConfigState) and key == ("rq", atom.rq):
                producers.append(other)
                break
        else:
            if isinstance(atom, TokenState) and any(
                p == atom.place for p, _n in other.produces
            ):
                producers.append(other)
    return producers


def _available_text(atom, facts: FactSet) -> str:
    if isinstance(atom, TokenState):
        return f"at most {facts.tokens.get(atom.place, 0)} tokens ever reach '{atom.place}'"
    key = ("q", atom.aggregate, atom.quality) if isinstance(atom, QualityState) else ("rq", atom.rq)
    values = facts.values.get(key, ())
    if not values:
        return "no value is ever produced for that target"
    rendered = sorted(v.render() for v in values)
    return "the producible values are {" + ", ".join(rendered) + "}"


# ---------------------------------------------------------------------------
# Phase 5: conservation
# ---------------------------------------------------------------------------


def _pinned_values(unit: TransitionalUnit) -> dict:
    pins: dict = {}
    try:
        atoms = conjunction_atoms(unit.inputs)
    except MechError:
        return pins
    for atom in atoms:
        if isinstance(atom, QualityState) and atom.cmp is Cmp.EQ:
            if isinstance(atom.literal, QualityValue):
                pins[(atom.aggregate, atom.quality)] = atom.literal
    return pins


def check_conservation(mechanism: Mechanism, ctx: ModelContext) -> list[Diagnostic]:
    """Symbolic balance per unit: totals over touched/pinned aggregates match.

    The before-value of a touched aggregate comes from an input pin (an ==
    condition) when present, otherwise from its declared initial value.
    """
    diags: list[Diagnostic] = []
    decls = [ctx.conserves[name] for name in mechanism.conserved if name in ctx.conserves]
    if not decls:
        return diags
    initial_live = set(ctx.initial_snapshot().aggregates)
    for uid in mechanism.organization:
        unit = ctx.units.get(uid)
        if unit is None:
            continue
        trans = ctx.transitionals.get(unit.transitional)
        if trans is None:
            continue
        pins = _pinned_values(unit)
        qualities, _rqs, created, destroyed = _final_effect_values(trans, ctx)
        touched_aggs = {agg for agg, _q in qualities} | created | destroyed
        pinned_aggs = {agg for agg, _q in pins}
        for decl in decls:
            if decl.name in unit.exempt:
                continue
            active = [
                aid
                for aid in ctx.aggregates
                if (aid in touched_aggs or aid in pinned_aggs)
                and decl.contribution(_with_values(ctx.aggregates[aid], {})) >= 0
                and _matches_decl(decl, ctx.aggregates[aid])
            ]
            before = after = 0
            for aid in active:
                template = ctx.aggregates[aid]
                before_agg = _with_values(
                    template,
                    {q: v for (a, q), v in pins.items() if a == aid},
                )
                before_present = aid in initial_live and aid not in created
                after_agg = _with_values(
                    before_agg,
                    {q: v for (a, q), v in qualities.items() if a == aid},
                )
                after_present = (before_present or aid in created) and aid not in destroyed
                if before_present:
                    before += decl.contribution(before_agg)
                if after_present:
                    after += decl.contribution(after_agg)
            if before != after:
                _diag(
                    diags,
                    "CONSERVATION_VIOLATION",
                    f"conserved quantity '{decl.name}' is unbalanced in unit "
                    f"'{uid}': {before} before, {after} after",
                    unit.span,
                    related=[trans.span],
                )
    return diags


def _matches_decl(decl: ConservationDecl, aggregate: Aggregate) -> bool:
    return any(rule.matches(aggregate) for rule in decl.rules)


def _with_values(aggregate: Aggregate, overrides: dict) -> Aggregate:
    if not overrides:
        return aggregate
    qualities = dict(aggregate.qualities)
    qualities.update(overrides)
    return replace(aggregate, qualities=qualities)


# ---------------------------------------------------------------------------
# Phase 6: refinement resolution (flattening)
# ---------------------------------------------------------------------------


def _atom_key(atom):
    if isinstance(atom, QualityState):
        return ("q", atom.aggregate, atom.quality, atom.cmp.value, atom.literal)
    if isinstance(atom, ConfigState):
        return ("rq", atom.rq, atom.cmp.value, atom.literal)
    if isinstance(atom, TokenState):
        return ("tok", atom.place, atom.count)
    if isinstance(atom, EmergentState):
        return ("em", atom.predicate, atom.aggregates)
    raise MechError(f"unexpected atom {atom!r}")


def _signature(expr):
    try:
        return frozenset(_atom_key(a) for a in conjunction_atoms(expr))
    except MechError:
        return None


def _remap_expr(expr, place_map):
    if isinstance(expr, AndExpr):
        return AndExpr(tuple(_remap_expr(i, place_map) for i in expr.items), span=expr.span)
    if isinstance(expr, OrExpr):
        return OrExpr(tuple(_remap_expr(i, place_map) for i in expr.items), span=expr.span)
    if isinstance(expr, NotExpr):
        return NotExpr(_remap_expr(expr.item, place_map), span=expr.span)
    if isinstance(expr, TokenState) and expr.place in place_map:
        return replace(expr, place=place_map[expr.place])
    return expr


def _and_with(expr, extra):
    if isinstance(expr, AndExpr):
        return AndExpr(expr.items + (extra,), span=expr.span)
    if expr == TRUE_EXPR:
        return AndExpr((extra,))
    return AndExpr((expr, extra), span=getattr(expr, "span", None) or SourceSpan())


def resolve_refinements(ctx: ModelContext, kb=None, max_depth: int = DEFAULT_MAX_DEPTH):
    """Replace refined transitionals by their detailing mechanisms' units.

    A refined unit U becomes: an enter unit (U's inputs and token consumption,
    producing one token on a fresh gate place), the detailing mechanism's
    units gated on that place, and an exit unit (the refinement's termination,
    consuming the gate and producing U's tokens). The detailing mechanism's
    setup/termination must equal U's inputs/outputs atom-for-atom. Each
    expansion also consumes a one-shot ready token, so a refined unit fires
    at most once per run.
    """
    diags: list[Diagnostic] = []
    tree: dict = {}
    ungated: dict = {}  # clone id -> inputs before the gate atom was added

    def fresh(base: str, table: dict) -> str:
        candidate = base
        while candidate in table:
            candidate += "_"
        return candidate

    def expand_unit(mech: Mechanism, uid: str, depth: int) -> list[str]:
        unit = ctx.units.get(uid)
        if unit is None:
            return [uid]
        trans = ctx.transitionals.get(unit.transitional)
        if trans is None or trans.refinement is None:
            return [uid]
        if uid in tree:
            return list(tree[uid][1])
        if depth > max_depth:
            _diag(
                diags,
                "UNBOUNDED_REFINEMENT",
                f"refinement of unit '{uid}' exceeds the maximum nesting depth "
                f"({max_depth}); refinements must bottom out",
                unit.span,
                related=[trans.span],
            )
            return [uid]
        target = ctx.mechanisms.get(trans.refinement)
        if target is None and kb is not None:
            merged = _merge_kb_mechanism(ctx, kb, trans.refinement, diags, unit.span)
            target = ctx.mechanisms.get(trans.refinement) if merged else None
        if target is None:
            _diag(
                diags,
                "UNRESOLVED_REFERENCE",
                f"transitional '{trans.id}' refines unknown mechanism "
                f"'{trans.refinement}'",
                trans.span,
            )
            return [uid]
        setup_sig = _signature(target.phenomenon.setup)
        term_sig = _signature(target.phenomenon.termination)
        if setup_sig is None or setup_sig != _signature(ungated.get(uid, unit.inputs)):
            _diag(
                diags,
                "REFINEMENT_SIGNATURE_MISMATCH",
                f"setup of mechanism '{target.id}' does not equal the inputs of "
                f"refined unit '{uid}'",
                unit.span,
                related=[target.span],
            )
            return [uid]
        if term_sig is None or term_sig != _signature(unit.outputs):
            _diag(
                diags,
                "REFINEMENT_SIGNATURE_MISMATCH",
                f"termination of mechanism '{target.id}' does not equal the "
                f"outputs of refined unit '{uid}'",
                unit.span,
                related=[target.span],
            )
            return [uid]
        prefix = uid + "__"
        place_map = {}
        for place in target.places:
            clone = fresh(prefix + place, ctx.places)
            place_map[place] = clone
            ctx.places[clone] = ctx.places.get(place, 0)
        gate = fresh(prefix + "active", ctx.places)
        ctx.places[gate] = 0
        gate_atom = TokenState(gate, 1)
        ready = fresh(prefix + "ready", ctx.places)
        ctx.places[ready] = 1

        noop_enter = fresh(prefix + "enter_t", ctx.transitionals)
        ctx.transitionals[noop_enter] = Transitional(id=noop_enter, span=unit.span)
        enter_id = fresh(prefix + "enter", ctx.units)
        ctx.units[enter_id] = TransitionalUnit(
            id=enter_id,
            inputs=unit.inputs,
            transitional=noop_enter,
            outputs=gate_atom,
            consumes=unit.consumes + ((ready, 1),),
            produces=((gate, 1),),
            span=unit.span,
        )

        sub_ids: list[str] = []
        for vid in target.organization:
            sub = ctx.units.get(vid)
            if sub is None:
                continue
            sub_trans = ctx.transitionals[sub.transitional]
            trans_clone_id = fresh(prefix + sub_trans.id, ctx.transitionals)
            ctx.transitionals[trans_clone_id] = replace(sub_trans, id=trans_clone_id)
            clone_id = fresh(prefix + vid, ctx.units)
            remapped_inputs = _remap_expr(sub.inputs, place_map)
            ungated[clone_id] = ungated.get(vid, remapped_inputs)
            ctx.units[clone_id] = replace(
                sub,
                id=clone_id,
                transitional=trans_clone_id,
                inputs=_and_with(remapped_inputs, gate_atom),
                outputs=_remap_expr(sub.outputs, place_map),
                consumes=tuple((place_map.get(p, p), n) for p, n in sub.consumes),
                produces=tuple((place_map.get(p, p), n) for p, n in sub.produces),
            )
            sub_ids.append(clone_id)

        noop_exit = fresh(prefix + "exit_t", ctx.transitionals)
        ctx.transitionals[noop_exit] = Transitional(id=noop_exit, span=unit.span)
        exit_id = fresh(prefix + "exit", ctx.units)
        ctx.units[exit_id] = TransitionalUnit(
            id=exit_id,
            inputs=_and_with(_remap_expr(target.phenomenon.termination, place_map), gate_atom),
            transitional=noop_exit,
            outputs=unit.outputs,
            consumes=((gate, 1),),
            produces=unit.produces,
            span=unit.span,
        )

        expansion = [enter_id]
        for sub_id in sub_ids:
            expansion.extend(expand_unit(mech, sub_id, depth + 1))
        expansion.append(exit_id)
        tree[uid] = (target.id, tuple(expansion))

        new_parts = list(mech.parts)
        have = {p for p, _ in new_parts}
        for part, role in target.parts:
            if part not in have:
                new_parts.append((part, role))
                have.add(part)
        new_places = (
            list(mech.places) + [place_map[p] for p in target.places] + [gate, ready]
        )
        new_conserved = list(mech.conserved)
        for name in target.conserved:
            if name not in new_conserved:
                new_conserved.append(name)
        ctx.mechanisms[mech.id] = replace(
            ctx.mechanisms[mech.id],
            parts=tuple(new_parts),
            places=tuple(new_places),
            conserved=tuple(new_conserved),
        )
        return expansion

    for mech_id in list(ctx.mechanisms):
        changed = True
        while changed:
            changed = False
            mech = ctx.mechanisms[mech_id]
            new_org: list[str] = []
            for uid in mech.organization:
                expanded = expand_unit(ctx.mechanisms[mech_id], uid, depth=1)
                if expanded != [uid]:
                    changed = True
                new_org.extend(expanded)
            ctx.mechanisms[mech_id] = replace(
                ctx.mechanisms[mech_id], organization=tuple(new_org)
            )
            if has_errors(diags):
                return tree, diags
    return tree, diags


def _merge_kb_mechanism(ctx, kb, mechanism_id, diags, span) -> bool:
    """Pull a mechanism document out of the knowledgebase into this context."""
    document = kb.mechanism_document(mechanism_id) if kb is not None else None
    if document is None:
        return False
    sub = _Resolver(document)
    sub_ctx, sub_diags = sub.run()
    if has_errors(sub_diags):
        _diag(
            diags,
            "UNRESOLVED_REFERENCE",
            f"knowledgebase mechanism '{mechanism_id}' does not resolve standalone",
            span,
        )
        return False
    for table_name in ("enums", "aggregates", "rqs", "places", "transitionals", "units", "mechanisms", "conserves"):
        ours = getattr(ctx, table_name)
        theirs = getattr(sub_ctx, table_name)
        for key, value in theirs.items():
            if key in ours:
                if ours[key] != value:
                    _diag(
                        diags,
                        "UNRESOLVED_REFERENCE",
                        f"knowledgebase mechanism '{mechanism_id}' redeclares "
                        f"'{key}' incompatibly",
                        span,
                    )
                    return False
            else:
                ours[key] = value
    ctx.predicates |= sub_ctx.predicates
    return True


# ---------------------------------------------------------------------------
# Phase 7: metadata completeness
# ---------------------------------------------------------------------------


def check_metadata(mechanism: Mechanism) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    md = mechanism.metadata
    span = md.span if md != type(md)() else mechanism.span
    for name, value in (("author", md.author), ("date", md.date), ("version", md.version)):
        if not value:
            _diag(
                diags,
                "METADATA_MISSING",
                f"mechanism '{mechanism.id}': metadata field '{name}' is required",
                span,
            )
    if not md.mechanism_type:
        _diag(
            diags,
            "METADATA_MISSING",
            f"mechanism '{mechanism.id}': metadata field 'mechanism_type' is required",
            span,
        )
    elif md.mechanism_type not in MECHANISM_TYPES:
        _diag(
            diags,
            "METADATA_INVALID",
            f"mechanism '{mechanism.id}': unknown mechanism_type "
            f"'{md.mechanism_type}' (one of {', '.join(MECHANISM_TYPES)})",
            span,
        )
    if not md.function_type:
        _diag(
            diags,
            "METADATA_MISSING",
            f"mechanism '{mechanism.id}': metadata field 'function_type' is required",
            span,
        )
    elif md.function_type not in FUNCTION_TYPES:
        _diag(
            diags,
            "METADATA_INVALID",
            f"mechanism '{mechanism.id}': unknown function_type "
            f"'{md.function_type}' (one of {', '.join(FUNCTION_TYPES)})",
            span,
        )
    return diags


# ---------------------------------------------------------------------------
# Phase 8: structure classification
# ---------------------------------------------------------------------------


def _touched_targets(unit: TransitionalUnit, ctx: ModelContext) -> set:
    trans = ctx.transitionals.get(unit.transitional)
    touched: set = {("tok", p) for p, _n in unit.produces}
    if trans is None:
        return touched
    for effect in trans.effects:
        if isinstance(effect, SetQuality):
            touched.add(("q", effect.aggregate, effect.quality))
        elif isinstance(effect, SendMessage):
            touched.add(("q", effect.receiver, effect.quality))
        elif isinstance(effect, SetRq):
            touched.add(("rq", effect.rq))
        elif isinstance(effect, (CreateAggregate, DestroyAggregate)):
            touched.add(("agg", effect.aggregate))
    return touched


def _needed_targets(unit: TransitionalUnit) -> set:
    needed: set = {("tok", p) for p, _n in unit.consumes}
    for node in walk_expr(unit.inputs):
        if isinstance(node, QualityState):
            needed.add(("q", node.aggregate, node.quality))
            needed.add(("agg", node.aggregate))
        elif isinstance(node, ConfigState):
            needed.add(("rq", node.rq))
        elif isinstance(node, TokenState):
            needed.add(("tok", node.place))
        elif isinstance(node, EmergentState):
            needed.update(("agg", a) for a in node.aggregates)
    return needed


def _dependency_graph(mechanism: Mechanism, ctx: ModelContext) -> dict:
    """producer -> consumer edges: the producer moves tokens the consumer
    needs, or it touches an input target of a unit whose inputs hold after
    it fires (plain io_compatible alone would connect almost every pair
    through untouched initial facts)."""
    units = [ctx.units[uid] for uid in mechanism.organization if uid in ctx.units]
    snapshot = ctx.initial_snapshot()
    edges: dict = {u.id: [] for u in units}
    needed = {u.id: _needed_targets(u) for u in units}
    for producer, consumer in itertools.permutations(units, 2):
        touched = _touched_targets(producer, ctx)
        if not touched & needed[consumer.id]:
            continue
        produced = {t[1] for t in touched if t[0] == "tok"}
        if produced & {t[1] for t in needed[consumer.id] if t[0] == "tok"}:
            edges[producer.id].append(consumer.id)
            continue
        try:
            if io_compatible(producer, consumer, snapshot, ctx.transitionals):
                edges[producer.id].append(consumer.id)
        except MechError:
            pass
    return edges


def _is_path(edges: dict) -> bool:
    nodes = list(edges)
    if not nodes:
        return False
    edge_count = sum(len(v) for v in edges.values())
    if edge_count != len(nodes) - 1:
        return False
    indeg = {n: 0 for n in nodes}
    for source, targets in edges.items():
        if len(targets) > 1:
            return False
        for target in targets:
            indeg[target] += 1
    if any(d > 1 for d in indeg.values()):
        return False
    # connectivity: walk from the unique start
    starts = [n for n in nodes if indeg[n] == 0]
    if len(starts) != 1:
        return len(nodes) == 1 and edge_count == 0
    seen = set()
    current: str | None = starts[0]
    while current is not None and current not in seen:
        seen.add(current)
        targets = edges[current]
        current = targets[0] if targets else None
    return len(seen) == len(nodes)


def _token_exploration(mechanism: Mechanism, ctx: ModelContext):
    """Bounded token-level reachability ignoring quality guards.

    Used only for classification: markings are explored over the units that
    actually move tokens, which is the structural notion of concurrency.
    """
    units = [
        ctx.units[uid]
        for uid in mechanism.organization
        if uid in ctx.units and ctx.units[uid].consumes
    ]
    places = sorted(mechanism.places)
    if not units or not places:
        return False, False
    index = {p: i for i, p in enumerate(places)}
    caps = _token_caps(mechanism, ctx)
    bound = max([caps.get(p, 0) for p in places] + [1]) + 2
    initial = tuple(ctx.places.get(p, 0) for p in places)

    def enabled_at(marking):
        out = []
        for unit in units:
            if all(marking[index[p]] >= n for p, n in unit.consumes if p in index):
                out.append(unit)
        return out

    def fire(marking, unit):
        state = list(marking)
        for p, n in unit.consumes:
            if p in index:
                state[index[p]] -= n
        for p, n in unit.produces:
            if p in index:
                state[index[p]] += n
                if state[index[p]] > bound:
                    return None
        return tuple(state)

    seen = {initial}
    frontier = [initial]
    edges: dict = {}
    concurrent = False
    while frontier and len(seen) < _STATE_CAP:
        marking = frontier.pop()
        fireable = enabled_at(marking)
        if len(fireable) >= 2:
            concurrent = True
        edges[marking] = []
        for unit in fireable:
            successor = fire(marking, unit)
            if successor is None:
                continue
            edges[marking].append(successor)
            if successor not in seen:
                seen.add(successor)
                frontier.append(successor)
    # cyclic: the initial marking is reachable from one of its successors
    cyclic = False
    targets = list(edges.get(initial, ()))
    visited = set()
    while targets:
        marking = targets.pop()
        if marking == initial:
            cyclic = True
            break
        if marking in visited:
            continue
        visited.add(marking)
        targets.extend(edges.get(marking, ()))
    return concurrent, cyclic


def classify_mechanism(mechanism: Mechanism, ctx: ModelContext):
    """Infer SimpleLinear, Cyclic or Concurrent structure; declared type wins.

    A TYPE_MISMATCH warning is emitted only when the declared type is itself
    inferable and differs from the inference; the other declared types carry
    knowledge outside the model and are accepted as-is.
    """
    diags: list[Diagnostic] = []
    concurrent, cyclic = _token_exploration(mechanism, ctx)
    edges = _dependency_graph(mechanism, ctx)
    if concurrent:
        inferred = "Concurrent"
    elif cyclic:
        inferred = "Cyclic"
    elif _is_path(edges):
        inferred = "SimpleLinear"
    else:
        inferred = None
    classification = Classification(inferred, concurrent, cyclic)
    declared = mechanism.metadata.mechanism_type
    if inferred is not None and declared in _INFERABLE and declared != inferred:
        _warn(
            diags,
            "TYPE_MISMATCH",
            f"mechanism '{mechanism.id}' is declared {declared} but its "
            f"structure looks {inferred}; the declaration wins",
            mechanism.metadata.span or mechanism.span,
        )
    return classification, diags


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def compile_document(
    document: ModelDocument, kb=None, max_depth: int = DEFAULT_MAX_DEPTH
) -> CompileResult:
    """Validate and flatten a parsed document into a CompiledModel."""
    all_diags: list[Diagnostic] = []

    def gate(phase_diags) -> bool:
        all_diags.extend(phase_diags)
        return has_errors(phase_diags)

    ctx, diags = _Resolver(document).run()
    if gate(diags):
        return CompileResult(None, tuple(sort_diagnostics(all_diags)))
    if gate(check_part_cycles(ctx)):
        return CompileResult(None, tuple(sort_diagnostics(all_diags)))
    if gate(check_output_entailment(ctx)):
        return CompileResult(None, tuple(sort_diagnostics(all_diags)))
    chain_diags: list[Diagnostic] = []
    for mech in ctx.mechanisms.values():
        chain_diags.extend(check_chain(mech, ctx))
    if gate(chain_diags):
        return CompileResult(None, tuple(sort_diagnostics(all_diags)))
    conservation_diags: list[Diagnostic] = []
    for mech in ctx.mechanisms.values():
        conservation_diags.extend(check_conservation(mech, ctx))
    if gate(conservation_diags):
        return CompileResult(None, tuple(sort_diagnostics(all_diags)))
    tree, refinement_diags = resolve_refinements(ctx, kb, max_depth)
    if gate(refinement_diags):
        return CompileResult(None, tuple(sort_diagnostics(all_diags)))
    metadata_diags: list[Diagnostic] = []
    for mech in ctx.mechanisms.values():
        metadata_diags.extend(check_metadata(mech))
    if gate(metadata_diags):
        return CompileResult(None, tuple(sort_diagnostics(all_diags)))
    unit_graphs: dict = {}
    classifications: dict = {}
    for mech in ctx.mechanisms.values():
        classification, class_diags = classify_mechanism(mech, ctx)
        classifications[mech.id] = classification
        all_diags.extend(class_diags)
        unit_graphs[mech.id] = {
            uid: tuple(targets)
            for uid, targets in _dependency_graph(mech, ctx).items()
        }
    warnings = tuple(d for d in sort_diagnostics(all_diags) if d.severity == WARNING)
    model = CompiledModel(
        context=ctx,
        unit_graphs=unit_graphs,
        classifications=classifications,
        refinement_tree=tree,
        warnings=warnings,
    )
    return CompileResult(model, tuple(sort_diagnostics(all_diags)))
