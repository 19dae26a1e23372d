"""Seeded random generators shared by the property tests."""

from __future__ import annotations

import random
from fractions import Fraction

from mechlang.compiler import CompiledModel, ModelContext
from mechlang.model import (
    Aggregate,
    AndExpr,
    Cmp,
    ConfigState,
    EmergentState,
    Mechanism,
    MechanismMetadata,
    Microworld,
    NotExpr,
    OrExpr,
    PartLink,
    Phenomenon,
    QualityState,
    QualityValue,
    RawLiteral,
    RelationalQuality,
    SendMessage,
    SetQuality,
    SetRq,
    CreateAggregate,
    DestroyAggregate,
    TokenState,
    Transitional,
    TransitionalKind,
    TransitionalUnit,
    TRUE_EXPR,
)
from mechlang.parser import EnumDecl, ModelDocument, PlaceDecl, PredicateDecl

UNITS = ("L", "m", "s", "kg", "m/s^2")
WORDS = ("alpha", "beta", "gamma", "delta", "flow", "valve", "core", "mix")


def _ident(rng: random.Random, prefix: str, index: int) -> str:
    return f"{prefix}{index}_{rng.choice(WORDS)}"


def _text(rng: random.Random) -> str:
    pieces = [rng.choice(WORDS) for _ in range(rng.randint(1, 4))]
    if rng.random() < 0.2:
        pieces.append('with "quotes" and \\slashes')
    if rng.random() < 0.1:
        pieces.append("line\nbreak")
    return " ".join(pieces)


def _fraction(rng: random.Random, nonnegative=False) -> Fraction:
    num = rng.randint(0 if nonnegative else -20, 20)
    den = rng.choice((1, 1, 2, 3, 4, 10))
    return Fraction(num, den)


def _typed_value(rng: random.Random, enums) -> QualityValue:
    kinds = ["count", "scalar", "boolean"]
    if enums:
        kinds.append("enum")
    kind = rng.choice(kinds)
    if kind == "count":
        return QualityValue.count(rng.randint(0, 9))
    if kind == "scalar":
        return QualityValue.scalar(_fraction(rng), rng.choice(UNITS))
    if kind == "boolean":
        return QualityValue.boolean(rng.random() < 0.5)
    domain = rng.choice(enums)
    return QualityValue.enum(rng.choice(domain.symbols), domain=domain.id)


def _raw_literal(rng: random.Random) -> RawLiteral:
    roll = rng.random()
    if roll < 0.4:
        unit = rng.choice(UNITS) if rng.random() < 0.4 else None
        return RawLiteral("number", number=_fraction(rng), unit=unit)
    if roll < 0.6:
        return RawLiteral("bool", boolean=rng.random() < 0.5)
    return RawLiteral("symbol", symbol=rng.choice(("LOW", "HIGH", "OPEN", "SHUT")))


def _atom(rng: random.Random, aggregates, rqs, places, predicates):
    roll = rng.random()
    if places and roll < 0.2:
        return TokenState(rng.choice(places).id, rng.randint(0, 3))
    if rqs and roll < 0.35:
        return ConfigState(rng.choice(rqs).id, rng.choice(list(Cmp)), _raw_literal(rng))
    if predicates and roll < 0.45 and aggregates:
        picks = rng.sample(aggregates, k=min(len(aggregates), rng.randint(1, 2)))
        return EmergentState(rng.choice(predicates).id, tuple(a.id for a in picks))
    agg = rng.choice(aggregates)
    quality = rng.choice(sorted(agg.qualities)) if agg.qualities else "q"
    return QualityState(agg.id, quality, rng.choice(list(Cmp)), _raw_literal(rng))


def random_expression(rng: random.Random, aggregates, rqs=(), places=(), predicates=(), depth=2):
    if depth <= 0 or rng.random() < 0.4:
        return _atom(rng, aggregates, list(rqs), list(places), list(predicates))
    roll = rng.random()
    if roll < 0.2:
        return NotExpr(random_expression(rng, aggregates, rqs, places, predicates, depth - 1))
    items = tuple(
        random_expression(rng, aggregates, rqs, places, predicates, depth - 1)
        for _ in range(rng.randint(2, 3))
    )
    return AndExpr(items) if roll < 0.65 else OrExpr(items)


def random_document(rng: random.Random) -> ModelDocument:
    """A structurally valid document exercising the whole surface syntax."""
    enums = [
        EnumDecl(_ident(rng, "dom", i), tuple(f"S{i}{j}" for j in range(rng.randint(2, 4))))
        for i in range(rng.randint(0, 2))
    ]
    aggregates = []
    for i in range(rng.randint(1, 5)):
        qualities = {
            _ident(rng, "q", j): _typed_value(rng, enums)
            for j in range(rng.randint(0, 3))
        }
        parts = tuple(
            PartLink(earlier.id, rng.choice(("functional", "structural")))
            for earlier in rng.sample(aggregates, k=min(len(aggregates), rng.randint(0, 2)))
        )
        position = None
        if rng.random() < 0.3:
            position = tuple(_fraction(rng) for _ in range(rng.randint(1, 3)))
        aggregates.append(
            Aggregate(
                id=_ident(rng, "agg", i),
                label=_text(rng) if rng.random() < 0.6 else "",
                ontology_refs=tuple(
                    f"CHEBI:{rng.randint(1000, 99999)}" for _ in range(rng.randint(0, 2))
                ),
                qualities=qualities,
                parts=parts,
                position=position,
            )
        )
    rqs = []
    if len(aggregates) >= 2 and rng.random() < 0.6:
        for i in range(rng.randint(1, 2)):
            participants = tuple(a.id for a in rng.sample(aggregates, k=2))
            rqs.append(
                RelationalQuality(
                    id=_ident(rng, "rq", i),
                    name=_text(rng) if rng.random() < 0.3 else "",
                    participants=participants,
                    value=_typed_value(rng, enums),
                )
            )
    rqs = [r if r.name else type(r)(r.id, r.id, r.participants, r.value) for r in rqs]
    places = [
        PlaceDecl(_ident(rng, "p", i), rng.randint(0, 3)) for i in range(rng.randint(0, 3))
    ]
    predicates = [PredicateDecl(_ident(rng, "pred", i)) for i in range(rng.randint(0, 1))]
    transitionals = []
    for i in range(rng.randint(0, 4)):
        effects = []
        for _ in range(rng.randint(0, 3)):
            roll = rng.random()
            agg = rng.choice(aggregates)
            if roll < 0.5 and agg.qualities:
                effects.append(
                    SetQuality(agg.id, rng.choice(sorted(agg.qualities)), _raw_literal(rng))
                )
            elif roll < 0.6 and rqs:
                effects.append(SetRq(rng.choice(rqs).id, _raw_literal(rng)))
            elif roll < 0.7:
                effects.append(CreateAggregate(agg.id))
            elif roll < 0.8:
                effects.append(DestroyAggregate(agg.id))
            elif agg.qualities:
                effects.append(
                    SendMessage(
                        sender=rng.choice(aggregates).id,
                        receiver=agg.id,
                        quality=rng.choice(sorted(agg.qualities)),
                        literal=_raw_literal(rng),
                        delay=_fraction(rng, nonnegative=True),
                    )
                )
        transitionals.append(
            Transitional(
                id=_ident(rng, "t", i),
                kind=rng.choice(list(TransitionalKind)),
                label=_text(rng) if rng.random() < 0.4 else "",
                effects=tuple(effects),
                delay=_fraction(rng, nonnegative=True),
                function=_text(rng) if rng.random() < 0.4 else None,
                refinement=_ident(rng, "m", 0) if rng.random() < 0.15 else None,
            )
        )
    units = []
    for i in range(rng.randint(0, 3)):
        consumes = tuple(
            (p.id, rng.randint(1, 2)) for p in rng.sample(places, k=min(len(places), rng.randint(0, 2)))
        )
        produces = tuple(
            (p.id, rng.randint(1, 2)) for p in rng.sample(places, k=min(len(places), rng.randint(0, 2)))
        )
        units.append(
            TransitionalUnit(
                id=_ident(rng, "u", i),
                inputs=random_expression(rng, aggregates, rqs, places, predicates)
                if rng.random() < 0.8
                else TRUE_EXPR,
                transitional=rng.choice(transitionals).id if transitionals else "t_missing",
                outputs=random_expression(rng, aggregates, rqs, places, predicates)
                if rng.random() < 0.8
                else TRUE_EXPR,
                consumes=consumes,
                produces=produces,
                exempt=("atom:X",) if rng.random() < 0.2 else (),
            )
        )
    mechanisms = []
    for i in range(rng.randint(0, 2)):
        metadata = MechanismMetadata(
            mechanism_type=rng.choice(("SimpleLinear", "Cyclic", "Concurrent", "Feedback")),
            model_type=_text(rng) if rng.random() < 0.5 else "",
            function_type=rng.choice(("Designed", "Evolved", "Natural", "NoneApparent")),
            author=_text(rng),
            date="2026-01-0%d" % rng.randint(1, 9),
            version="1.%d" % rng.randint(0, 9),
            evidence=tuple(
                f"https://example.org/{rng.choice(WORDS)}" for _ in range(rng.randint(0, 2))
            ),
        )
        mechanisms.append(
            Mechanism(
                id=_ident(rng, "m", i),
                metadata=metadata,
                phenomenon=Phenomenon(
                    setup=random_expression(rng, aggregates, rqs, places, predicates, 1)
                    if rng.random() < 0.7
                    else TRUE_EXPR,
                    termination=random_expression(rng, aggregates, rqs, places, predicates, 1)
                    if rng.random() < 0.7
                    else TRUE_EXPR,
                    summary=_text(rng) if rng.random() < 0.6 else "",
                ),
                parts=tuple(
                    (a.id, rng.choice(("functional", "structural")))
                    for a in rng.sample(aggregates, k=min(len(aggregates), rng.randint(0, 3)))
                ),
                places=tuple(p.id for p in places),
                organization=tuple(u.id for u in units),
                conserved=("atom:X",) if rng.random() < 0.3 else (),
            )
        )
    microworlds = ()
    if mechanisms and rng.random() < 0.6:
        microworlds = (
            Microworld(
                id="world0",
                aggregates=tuple((a.id, rng.random() < 0.9) for a in aggregates),
                mechanisms=tuple(m.id for m in mechanisms),
                axioms=tuple(
                    random_expression(rng, aggregates, rqs, places, predicates, 1)
                    for _ in range(rng.randint(0, 2))
                ),
            ),
        )
    conserves = ()
    if rng.random() < 0.5:
        from mechlang.model import ConservationDecl, WeightRule

        rules = []
        for _ in range(rng.randint(1, 3)):
            roll = rng.random()
            if roll < 0.5:
                rules.append(WeightRule("aggregate", rng.choice(aggregates).id, rng.randint(0, 4)))
            elif roll < 0.8:
                rules.append(WeightRule("quality", "count", rng.randint(0, 4)))
            else:
                rules.append(WeightRule("ontology", "CHEBI:*", rng.randint(0, 4)))
        conserves = (ConservationDecl("atom:X", tuple(rules)),)
    return ModelDocument(
        file="<generated>",
        enums=tuple(enums),
        predicates=tuple(predicates),
        aggregates=tuple(aggregates),
        rqs=tuple(rqs),
        places=tuple(places),
        transitionals=tuple(transitionals),
        units=tuple(units),
        mechanisms=tuple(mechanisms),
        microworlds=microworlds,
        conserves=conserves,
    )


# ---------------------------------------------------------------------------
# Random token nets, built directly as compiled contexts
# ---------------------------------------------------------------------------


def random_net(rng: random.Random, max_places=4, max_transitions=4, max_initial=2):
    """A pure token net: (place ids, initial marking, [(consumes, produces)])."""
    n_places = rng.randint(1, max_places)
    n_transitions = rng.randint(1, max_transitions)
    places = [f"p{i}" for i in range(n_places)]
    initial = {p: rng.randint(0, max_initial) for p in places}
    transitions = []
    for _t in range(n_transitions):
        consumes = {p: rng.randint(0, 2) for p in rng.sample(places, k=rng.randint(0, n_places))}
        produces = {p: rng.randint(0, 2) for p in rng.sample(places, k=rng.randint(0, n_places))}
        consumes = {p: n for p, n in consumes.items() if n}
        produces = {p: n for p, n in produces.items() if n}
        transitions.append((consumes, produces))
    return places, initial, transitions


def net_to_compiled(places, initial, transitions) -> CompiledModel:
    """Wrap a bare token net in a minimal compiled model for the engine."""
    ctx = ModelContext(file="<net>")
    ctx.places = dict(initial)
    unit_ids = []
    for index, (consumes, produces) in enumerate(transitions):
        tid = f"t{index}"
        uid = f"u{index}"
        ctx.transitionals[tid] = Transitional(id=tid)
        ctx.units[uid] = TransitionalUnit(
            id=uid,
            transitional=tid,
            consumes=tuple(sorted(consumes.items())),
            produces=tuple(sorted(produces.items())),
        )
        unit_ids.append(uid)
    ctx.mechanisms["net"] = Mechanism(
        id="net", places=tuple(places), organization=tuple(unit_ids)
    )
    return CompiledModel(
        context=ctx,
        unit_graphs={},
        classifications={},
        refinement_tree={},
        warnings=(),
    )


def enumerate_markings_matrix(places, initial, transitions, bound, max_states=100000):
    """Independent matrix-style reachability: m' = m - pre + post, bounded."""
    order = list(places)
    pre = []
    post = []
    for consumes, produces in transitions:
        pre.append([consumes.get(p, 0) for p in order])
        post.append([produces.get(p, 0) for p in order])
    start = tuple(initial[p] for p in order)
    seen = {start}
    queue = [start]
    overflow = False
    while queue:
        if len(seen) >= max_states:
            overflow = True
            break
        marking = queue.pop(0)
        for row_pre, row_post in zip(pre, post):
            if any(m < need for m, need in zip(marking, row_pre)):
                continue
            successor = tuple(
                m - need + out for m, need, out in zip(marking, row_pre, row_post)
            )
            if any(v > bound for v in successor):
                continue
            if successor not in seen:
                seen.add(successor)
                queue.append(successor)
    as_keys = {
        tuple(sorted(zip(order, marking))) for marking in seen
    }
    return as_keys, overflow
