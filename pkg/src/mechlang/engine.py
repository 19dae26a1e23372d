"""Deterministic discrete-event execution of compiled models.

One run is strictly sequential: at each step due messages are delivered
first, then due unit completions are applied, then one newly enabled unit is
started under the chosen tie-break policy. Identical (model, seed, policy,
horizon) inputs yield byte-identical serialized traces.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, replace
from fractions import Fraction

from .compiler import CompiledModel
from .errors import (
    AxiomViolated,
    ConservationViolated,
    DeadlockError,
    InitError,
    MechError,
    TimeInPast,
    UnknownAggregate,
)
from .model import (
    QualityValue,
    Snapshot,
    apply_effects,
    conservation_total,
    evaluate_state,
    fraction_text,
)

UNIT_STARTED = "unit-started"
UNIT_COMPLETED = "unit-completed"
MESSAGE_SENT = "message-sent"
MESSAGE_DELIVERED = "message-delivered"
STATE_DELTA = "state-delta"
TERMINATION_REACHED = "termination-reached"
DEADLOCK = "deadlock"

POLICIES = ("lexicographic", "seeded-random")

TERMINATED = "terminated"
HORIZON = "horizon"
DEADLOCKED = "deadlock"


@dataclass(frozen=True)
class TraceEvent:
    """One timestamped trace record; delta entries are (target, old, new)."""

    time: Fraction
    kind: str
    subject: str
    delta: tuple[tuple[str, str, str], ...] = ()

    def to_json_line(self) -> str:
        return json.dumps(
            {
                "time": f"{self.time.numerator}/{self.time.denominator}",
                "kind": self.kind,
                "unit": self.subject,
                "delta": [
                    {"target": t, "old": o, "new": n} for t, o, n in self.delta
                ],
            },
            separators=(",", ":"),
        )


@dataclass(frozen=True)
class _Completion:
    time: Fraction
    seq: int
    unit: str


@dataclass(frozen=True)
class _Message:
    deliver_at: Fraction
    seq: int
    id: str
    sender: str
    receiver: str
    quality: str
    value: QualityValue


@dataclass(frozen=True)
class WorldState:
    """An immutable execution state: snapshot, clock, pending work, rng seed."""

    snapshot: Snapshot
    clock: Fraction = Fraction(0)
    pending: tuple[_Completion, ...] = ()
    messages: tuple[_Message, ...] = ()
    seq: int = 0
    rng_seed: int = 0
    draws: int = 0
    baselines: tuple[tuple[str, int], ...] = ()


@dataclass(frozen=True)
class RunResult:
    events: tuple[TraceEvent, ...]
    world: WorldState
    status: str  # terminated | horizon | deadlock
    steps: int

    @property
    def firings(self) -> int:
        return sum(1 for e in self.events if e.kind == UNIT_STARTED)

    @property
    def unit_events(self) -> int:
        return sum(1 for e in self.events if e.kind in (UNIT_STARTED, UNIT_COMPLETED))


def _conservation_decls(compiled: CompiledModel):
    names: list[str] = []
    for mech in compiled.context.execution_mechanisms():
        for name in mech.conserved:
            if name not in names:
                names.append(name)
    return [compiled.context.conserves[n] for n in names if n in compiled.context.conserves]


def _baselines(compiled: CompiledModel, snapshot: Snapshot):
    return tuple(
        (decl.name, conservation_total(decl, snapshot))
        for decl in _conservation_decls(compiled)
    )


def init_world(compiled: CompiledModel, seed: int = 0, predicates=None) -> WorldState:
    """Build the initial world: declared marking, clock 0, setup verified."""
    snapshot = compiled.context.initial_snapshot(predicates)
    for mech in compiled.context.execution_mechanisms():
        if not evaluate_state(mech.phenomenon.setup, snapshot):
            raise InitError(
                f"setup of mechanism '{mech.id}' does not hold in the initial world"
            )
    for axiom in compiled.context.axioms():
        if not evaluate_state(axiom, snapshot):
            raise AxiomViolated("an axiom fails in the initial world")
    return WorldState(
        snapshot=snapshot,
        clock=Fraction(0),
        rng_seed=seed,
        baselines=_baselines(compiled, snapshot),
    )


def enabled(world: WorldState, compiled: CompiledModel) -> list[str]:
    """Unit ids whose tokens and input conditions are met, lexicographic."""
    out = []
    for uid, unit in compiled.context.execution_units().items():
        if all(world.snapshot.tokens(p) >= n for p, n in unit.consumes) and evaluate_state(
            unit.inputs, world.snapshot
        ):
            out.append(uid)
    return sorted(out)


def termination_reached(world: WorldState, compiled: CompiledModel) -> bool:
    mechanisms = compiled.context.execution_mechanisms()
    if not mechanisms:
        return False
    return all(
        evaluate_state(m.phenomenon.termination, world.snapshot) for m in mechanisms
    )


def send_message(
    world: WorldState,
    sender: str,
    receiver: str,
    quality: str,
    value: QualityValue,
    deliver_at: Fraction,
) -> WorldState:
    """Enqueue a quality assignment for the receiver; FIFO at equal times."""
    deliver_at = Fraction(deliver_at)
    for aggregate in (sender, receiver):
        if not world.snapshot.declared(aggregate):
            raise UnknownAggregate(f"unknown aggregate '{aggregate}'")
    if deliver_at < world.clock:
        raise TimeInPast(
            f"cannot deliver at {fraction_text(deliver_at)}; clock is "
            f"{fraction_text(world.clock)}"
        )
    message = _Message(
        deliver_at, world.seq, f"m{world.seq + 1}", sender, receiver, quality, value
    )
    queue = tuple(sorted(world.messages + (message,), key=lambda m: (m.deliver_at, m.seq)))
    return replace(world, messages=queue, seq=world.seq + 1)


def _check_axioms(snapshot: Snapshot, compiled: CompiledModel, context: str):
    for axiom in compiled.context.axioms():
        if not evaluate_state(axiom, snapshot):
            raise AxiomViolated(f"axiom violated {context}")


def _check_conservation(world: WorldState, compiled: CompiledModel, exempt=()):
    """Runtime re-check of the compiler's static guarantee."""
    baselines = []
    for name, total in world.baselines:
        decl = compiled.context.conserves[name]
        current = conservation_total(decl, world.snapshot)
        if name in exempt:
            baselines.append((name, current))
            continue
        if current != total:
            raise ConservationViolated(
                f"conserved quantity '{name}' changed from {total} to {current}"
            )
        baselines.append((name, total))
    return replace(world, baselines=tuple(baselines))


def _deliver_message(world: WorldState, compiled: CompiledModel, message: _Message, events):
    snapshot = world.snapshot
    delta: tuple = ()
    node = snapshot.aggregates.get(message.receiver)
    if node is not None:
        old = node.qualities.get(message.quality)
        if old is None:
            raise MechError(
                f"message to '{message.receiver}' targets unknown quality "
                f"'{message.quality}'"
            )
        aggregates = dict(snapshot.aggregates)
        aggregates[message.receiver] = node.with_quality(message.quality, message.value)
        snapshot = replace(snapshot, aggregates=aggregates)
        delta = (
            (
                f"{message.receiver}.{message.quality}",
                old.render(),
                message.value.render(),
            ),
        )
    world = replace(world, snapshot=snapshot)
    events.append(TraceEvent(world.clock, MESSAGE_DELIVERED, message.id, delta))
    _check_axioms(world.snapshot, compiled, f"after delivery of '{message.id}'")
    return _check_conservation(world, compiled)


def _complete_unit(world: WorldState, compiled: CompiledModel, unit_id: str, events):
    unit = compiled.context.units[unit_id]
    transitional = compiled.context.transitionals[unit.transitional]
    snapshot, deltas, outgoing = apply_effects(world.snapshot, transitional.effects)
    marking = dict(snapshot.marking)
    for place, count in unit.produces:
        old = marking[place]
        marking[place] = old + count
        deltas.append((f"place {place}", str(old), str(old + count)))
    snapshot = replace(snapshot, marking=marking)
    world = replace(world, snapshot=snapshot)
    events.append(TraceEvent(world.clock, UNIT_COMPLETED, unit_id, tuple(deltas)))
    for effect in outgoing:
        message = _Message(
            world.clock + effect.delay,
            world.seq,
            f"m{world.seq + 1}",
            effect.sender,
            effect.receiver,
            effect.quality,
            effect.literal,
        )
        queue = tuple(
            sorted(world.messages + (message,), key=lambda m: (m.deliver_at, m.seq))
        )
        world = replace(world, messages=queue, seq=world.seq + 1)
        events.append(TraceEvent(world.clock, MESSAGE_SENT, message.id))
    _check_axioms(world.snapshot, compiled, f"after unit '{unit_id}'")
    return _check_conservation(world, compiled, exempt=unit.exempt)


def _start_unit(world: WorldState, compiled: CompiledModel, unit_id: str, events):
    unit = compiled.context.units[unit_id]
    transitional = compiled.context.transitionals[unit.transitional]
    marking = dict(world.snapshot.marking)
    deltas = []
    for place, count in unit.consumes:
        old = marking[place]
        marking[place] = old - count
        deltas.append((f"place {place}", str(old), str(old - count)))
    world = replace(world, snapshot=replace(world.snapshot, marking=marking))
    events.append(TraceEvent(world.clock, UNIT_STARTED, unit_id, tuple(deltas)))
    if transitional.delay == 0:
        return _complete_unit(world, compiled, unit_id, events)
    completion = _Completion(world.clock + transitional.delay, world.seq, unit_id)
    pending = tuple(sorted(world.pending + (completion,), key=lambda c: (c.time, c.seq)))
    return replace(world, pending=pending, seq=world.seq + 1)


def _process_due(world: WorldState, compiled: CompiledModel, events):
    """Deliver due messages, then apply due completions, until none remain."""
    progressed = True
    while progressed:
        progressed = False
        while world.messages and world.messages[0].deliver_at <= world.clock:
            message = world.messages[0]
            world = replace(world, messages=world.messages[1:])
            world = _deliver_message(world, compiled, message, events)
            progressed = True
        while world.pending and world.pending[0].time <= world.clock:
            completion = world.pending[0]
            world = replace(world, pending=world.pending[1:])
            world = _complete_unit(world, compiled, completion.unit, events)
            progressed = True
    return world


def _pick(ids: list[str], world: WorldState, policy: str) -> tuple[str, WorldState]:
    if policy == "lexicographic":
        return ids[0], world
    if policy == "seeded-random":
        rng = random.Random(f"{world.rng_seed}:{world.draws}")
        choice = ids[rng.randrange(len(ids))]
        return choice, replace(world, draws=world.draws + 1)
    raise MechError(f"unknown tie-break policy '{policy}'")


def step(
    world: WorldState, compiled: CompiledModel, policy: str = "lexicographic"
) -> tuple[WorldState, list[TraceEvent]]:
    """Advance one step: due work first, else start one unit, else advance time.

    Raises DeadlockError when nothing is enabled and nothing is pending.
    """
    events: list[TraceEvent] = []
    world = _process_due(world, compiled, events)
    ids = enabled(world, compiled)
    if ids:
        choice, world = _pick(ids, world, policy)
        world = _start_unit(world, compiled, choice, events)
        return world, events
    next_times = []
    if world.pending:
        next_times.append(world.pending[0].time)
    if world.messages:
        next_times.append(world.messages[0].deliver_at)
    if next_times:
        world = replace(world, clock=min(next_times))
        world = _process_due(world, compiled, events)
        return world, events
    if events:
        return world, events
    raise DeadlockError("no unit is enabled and nothing is pending")


def run(
    world: WorldState,
    compiled: CompiledModel,
    horizon: str = "until-termination",
    limit=None,
    policy: str = "lexicographic",
) -> RunResult:
    """Iterate step until termination, the horizon, or deadlock.

    horizon is one of "until-termination", "max-time" (limit: time bound) and
    "max-steps" (limit: step count). Deadlock ends the trace with a deadlock
    event and a distinguished status rather than an exception.
    """
    if horizon not in ("until-termination", "max-time", "max-steps"):
        raise MechError(f"unknown horizon '{horizon}'")
    if horizon in ("max-time", "max-steps") and limit is None:
        raise MechError(f"horizon '{horizon}' needs a limit")
    events: list[TraceEvent] = []
    steps = 0
    if termination_reached(world, compiled):
        events.append(TraceEvent(world.clock, TERMINATION_REACHED, ""))
        return RunResult(tuple(events), world, TERMINATED, steps)
    while True:
        if horizon == "max-steps" and steps >= limit:
            return RunResult(tuple(events), world, HORIZON, steps)
        if horizon == "max-time" and world.clock >= Fraction(limit):
            return RunResult(tuple(events), world, HORIZON, steps)
        try:
            world, new_events = step(world, compiled, policy)
        except DeadlockError:
            events.append(TraceEvent(world.clock, DEADLOCK, ""))
            return RunResult(tuple(events), world, DEADLOCKED, steps)
        steps += 1
        events.extend(new_events)
        if termination_reached(world, compiled):
            events.append(TraceEvent(world.clock, TERMINATION_REACHED, ""))
            return RunResult(tuple(events), world, TERMINATED, steps)


# ---------------------------------------------------------------------------
# Markings and the reachability oracle
# ---------------------------------------------------------------------------


def marking_key(marking) -> tuple:
    return tuple(sorted(marking.items()))


def _snapshot_key(snapshot: Snapshot) -> tuple:
    aggs = tuple(
        (
            aid,
            tuple(
                (q, v.kind.value, v.value, v.unit, v.domain)
                for q, v in sorted(agg.qualities.items())
            ),
        )
        for aid, agg in sorted(snapshot.aggregates.items())
    )
    rqs = tuple(
        (rid, rq.value.kind.value, rq.value.value, rq.value.unit, rq.value.domain)
        for rid, rq in sorted(snapshot.rqs.items())
    )
    return (aggs, rqs, marking_key(snapshot.marking))


@dataclass(frozen=True)
class ReachableMarkings:
    markings: frozenset
    overflow: bool

    def __contains__(self, marking) -> bool:
        key = marking if isinstance(marking, tuple) else marking_key(marking)
        return key in self.markings


def reachable_markings(
    compiled: CompiledModel, bound: int = 8, max_states: int = 10000
) -> ReachableMarkings:
    """Breadth-first marking exploration over all enabled-unit choices.

    Time is ignored: units fire atomically, message effects apply inline.
    Firings that would push any place beyond `bound` tokens are pruned;
    hitting `max_states` sets the overflow flag instead of raising.
    """
    from .model import apply_transitional_unit
    from .errors import PreconditionNotMet

    if bound <= 0 or max_states <= 0:
        raise MechError("reachability bounds must be positive")
    units = compiled.context.execution_units()
    transitionals = compiled.context.transitionals
    initial = compiled.context.initial_snapshot()
    seen_states = {_snapshot_key(initial)}
    markings = {marking_key(initial.marking)}
    frontier = [initial]
    overflow = False
    while frontier:
        if len(seen_states) >= max_states:
            overflow = True
            break
        snapshot = frontier.pop(0)
        for uid in sorted(units):
            unit = units[uid]
            try:
                successor = apply_transitional_unit(unit, snapshot, transitionals)
            except PreconditionNotMet:
                continue
            if any(count > bound for count in successor.marking.values()):
                continue
            key = _snapshot_key(successor)
            if key in seen_states:
                continue
            seen_states.add(key)
            markings.add(marking_key(successor.marking))
            frontier.append(successor)
    return ReachableMarkings(frozenset(markings), overflow)


# ---------------------------------------------------------------------------
# Trace serialization
# ---------------------------------------------------------------------------


def serialize_trace(events) -> str:
    """JSON Lines, one event per line, bit-exact across platforms."""
    return "".join(event.to_json_line() + "\n" for event in events)


def write_trace(events, path):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write(serialize_trace(events))


def read_trace(path) -> list[dict]:
    with open(path, "r", encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
