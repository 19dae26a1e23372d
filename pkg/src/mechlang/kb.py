"""A file-backed registry of reusable model fragments, plus preference rules.

The store is a directory of canonical .mech files and a JSON index:
kb/<kind>/<id>.mech and kb/index.json. Writes take an advisory lock on the
index; reads are lock-free.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from filelock import FileLock

from .compiler import FactSet, _fact_sat, _unit_fact_payload, compile_document
from .errors import DuplicateId, InvalidPayload, MechError, UnboundIdentifier, UnknownEntry
from .model import (
    AndExpr,
    Cmp,
    ConfigState,
    NotExpr,
    OrExpr,
    QualityState,
    TokenState,
    conjunction_atoms,
    walk_expr,
)
from .parser import (
    ModelDocument,
    RuleCmp,
    RuleSet,
    parse_mech,
    parse_state_expression,
)
from .serializer import serialize_mech

ENTRY_KINDS = ("aggregate-template", "transitional-unit", "mechanism")

NO_MATCH = None  # evaluate_rules returns None when no rule matches

_CORPUS_FILES = ("water.mech", "tank.mech", "vehicle.mech", "traffic.mech")


@dataclass(frozen=True)
class Provenance:
    source: str = ""
    author: str = ""
    version: str = ""


@dataclass(frozen=True)
class KbEntry:
    """One registered fragment: a standalone document plus catalog fields."""

    id: str
    kind: str  # aggregate-template | transitional-unit | mechanism
    payload: ModelDocument
    function: str = ""
    tags: tuple[str, ...] = ()
    provenance: Provenance = field(default_factory=Provenance)


def slice_document(document: ModelDocument, kind: str, entry_id: str) -> ModelDocument:
    """Cut the closure of one declaration out of a document.

    The result is self-contained: referenced aggregates (with their part
    closure), enum domains, places, transitionals and conservation rules
    come along, so the slice compiles standalone.
    """
    by_id = {
        "aggregate": {a.id: a for a in document.aggregates},
        "unit": {u.id: u for u in document.units},
        "transitional": {t.id: t for t in document.transitionals},
        "mechanism": {m.id: m for m in document.mechanisms},
        "rq": {r.id: r for r in document.rqs},
    }
    need_aggs: set[str] = set()
    need_units: set[str] = set()
    need_trans: set[str] = set()
    need_places: set[str] = set()
    need_rqs: set[str] = set()
    need_mechs: set[str] = set()
    need_conserves: set[str] = set()
    need_predicates: set[str] = set()

    def pull_expr(expr):
        for node in walk_expr(expr):
            if isinstance(node, QualityState):
                pull_aggregate(node.aggregate)
            elif isinstance(node, TokenState):
                need_places.add(node.place)
            elif isinstance(node, ConfigState):
                need_rqs.add(node.rq)
            elif hasattr(node, "predicate"):
                need_predicates.add(node.predicate)
                for aid in node.aggregates:
                    pull_aggregate(aid)

    def pull_aggregate(aid):
        if aid in need_aggs or aid not in by_id["aggregate"]:
            need_aggs.add(aid)
            return
        need_aggs.add(aid)
        for link in by_id["aggregate"][aid].parts:
            pull_aggregate(link.child)

    def pull_transitional(tid):
        if tid in need_trans:
            return
        need_trans.add(tid)
        trans = by_id["transitional"].get(tid)
        if trans is None:
            return
        for effect in trans.effects:
            for attr in ("aggregate", "sender", "receiver"):
                target = getattr(effect, attr, None)
                if target:
                    pull_aggregate(target)
            if hasattr(effect, "rq"):
                need_rqs.add(effect.rq)
        if trans.refinement:
            pull_mechanism(trans.refinement)

    def pull_unit(uid):
        if uid in need_units:
            return
        need_units.add(uid)
        unit = by_id["unit"].get(uid)
        if unit is None:
            return
        pull_expr(unit.inputs)
        pull_expr(unit.outputs)
        for place, _n in unit.consumes + unit.produces:
            need_places.add(place)
        need_conserves.update(unit.exempt)
        pull_transitional(unit.transitional)

    def pull_mechanism(mid):
        if mid in need_mechs:
            return
        need_mechs.add(mid)
        mech = by_id["mechanism"].get(mid)
        if mech is None:
            return
        for part, _role in mech.parts:
            pull_aggregate(part)
        need_places.update(mech.places)
        need_conserves.update(mech.conserved)
        pull_expr(mech.phenomenon.setup)
        pull_expr(mech.phenomenon.termination)
        for uid in mech.organization:
            pull_unit(uid)

    if kind == "aggregate-template":
        pull_aggregate(entry_id)
    elif kind == "transitional-unit":
        pull_unit(entry_id)
    elif kind == "mechanism":
        pull_mechanism(entry_id)
    else:
        raise InvalidPayload(f"unknown entry kind '{kind}'")

    for rid in list(need_rqs):
        rq = by_id["rq"].get(rid)
        if rq is not None:
            for pid in rq.participants:
                pull_aggregate(pid)
    need_enums = set()
    for aid in need_aggs:
        agg = by_id["aggregate"].get(aid)
        if agg is None:
            continue
        for value in agg.qualities.values():
            if value.domain:
                need_enums.add(value.domain)
    for rid in need_rqs:
        rq = by_id["rq"].get(rid)
        if rq is not None and rq.value.domain:
            need_enums.add(rq.value.domain)

    return ModelDocument(
        file=document.file,
        enums=tuple(e for e in document.enums if e.id in need_enums),
        predicates=tuple(p for p in document.predicates if p.id in need_predicates),
        aggregates=tuple(a for a in document.aggregates if a.id in need_aggs),
        rqs=tuple(r for r in document.rqs if r.id in need_rqs),
        places=tuple(p for p in document.places if p.id in need_places),
        transitionals=tuple(t for t in document.transitionals if t.id in need_trans),
        units=tuple(u for u in document.units if u.id in need_units),
        mechanisms=tuple(m for m in document.mechanisms if m.id in need_mechs),
        microworlds=(),
        conserves=tuple(c for c in document.conserves if c.name in need_conserves),
    )


class Knowledgebase:
    """Directory-backed entry store with signature-aware queries."""

    def __init__(self, root):
        self.root = Path(root)

    @property
    def index_path(self) -> Path:
        return self.root / "index.json"

    def exists(self) -> bool:
        return self.index_path.exists()

    def initialize(self):
        self.root.mkdir(parents=True, exist_ok=True)
        if not self.index_path.exists():
            self._write_index({"entries": []})

    def _read_index(self) -> dict:
        if not self.index_path.exists():
            return {"entries": []}
        with open(self.index_path, "r", encoding="utf-8") as handle:
            return json.load(handle)

    def _write_index(self, index: dict):
        index["entries"].sort(key=lambda e: e["id"])
        with open(self.index_path, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(index, handle, indent=2)
            handle.write("\n")

    def _entry_path(self, kind: str, entry_id: str) -> Path:
        return self.root / kind / f"{entry_id}.mech"

    def register(self, entry: KbEntry) -> str:
        """Persist an entry; duplicate ids and invalid payloads are rejected."""
        if entry.kind not in ENTRY_KINDS:
            raise InvalidPayload(f"unknown entry kind '{entry.kind}'")
        result = compile_document(entry.payload)
        if not result.ok:
            first = result.errors[0] if result.errors else None
            raise InvalidPayload(
                f"entry '{entry.id}' does not compile standalone"
                + (f": {first.message}" if first else "")
            )
        self.initialize()
        lock = FileLock(str(self.index_path) + ".lock")
        with lock:
            index = self._read_index()
            if any(e["id"] == entry.id for e in index["entries"]):
                raise DuplicateId(f"entry '{entry.id}' is already registered")
            text = serialize_mech(entry.payload)
            path = self._entry_path(entry.kind, entry.id)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(text)
            index["entries"].append(
                {
                    "id": entry.id,
                    "kind": entry.kind,
                    "tags": sorted(entry.tags),
                    "hash": hashlib.sha256(text.encode("utf-8")).hexdigest(),
                    "function": entry.function,
                    "provenance": {
                        "source": entry.provenance.source,
                        "author": entry.provenance.author,
                        "version": entry.provenance.version,
                    },
                }
            )
            self._write_index(index)
        return entry.id

    def get(self, entry_id: str) -> KbEntry:
        for record in self._read_index()["entries"]:
            if record["id"] == entry_id:
                return self._load(record)
        raise UnknownEntry(f"no entry '{entry_id}' in the knowledgebase")

    def _load(self, record: dict) -> KbEntry:
        path = self._entry_path(record["kind"], record["id"])
        parsed = parse_mech(path.read_text(encoding="utf-8"), str(path))
        if not parsed.ok:
            raise InvalidPayload(f"stored entry '{record['id']}' no longer parses")
        prov = record.get("provenance", {})
        return KbEntry(
            id=record["id"],
            kind=record["kind"],
            payload=parsed.document,
            function=record.get("function", ""),
            tags=tuple(record.get("tags", ())),
            provenance=Provenance(
                prov.get("source", ""), prov.get("author", ""), prov.get("version", "")
            ),
        )

    def entries(self) -> list[KbEntry]:
        return [self._load(r) for r in self._read_index()["entries"]]

    def mechanism_document(self, mechanism_id: str) -> ModelDocument | None:
        """Used by the compiler to resolve refinements out of the store."""
        try:
            entry = self.get(mechanism_id)
        except UnknownEntry:
            return None
        if entry.kind != "mechanism":
            return None
        return entry.payload

    # -- queries -----------------------------------------------------------

    def query(
        self,
        kind: str | None = None,
        tag: str | None = None,
        input_signature: str | None = None,
        output_signature: str | None = None,
        function_substring: str | None = None,
    ) -> list[KbEntry]:
        """Entries matching every given criterion, ordered by id.

        Signature strings are state expressions; an entry matches when its
        own input (or output) facts entail the pattern, the same ground-fact
        entailment the chain checker uses.
        """
        out = []
        for entry in self.entries():
            if kind is not None and entry.kind != kind:
                continue
            if tag is not None and tag not in entry.tags:
                continue
            if function_substring is not None and function_substring not in (
                entry.function or ""
            ):
                continue
            if input_signature is not None and not self._signature_match(
                entry, input_signature, "input"
            ):
                continue
            if output_signature is not None and not self._signature_match(
                entry, output_signature, "output"
            ):
                continue
            out.append(entry)
        return sorted(out, key=lambda e: e.id)

    def _signature_match(self, entry: KbEntry, pattern: str, side: str) -> bool:
        parsed = parse_state_expression(pattern)
        if not parsed.ok:
            raise MechError(f"signature pattern does not parse: {pattern!r}")
        result = compile_document(entry.payload)
        if not result.ok:
            return False
        ctx = result.model.context
        try:
            bound = _bind_pattern(parsed.document, ctx)
        except MechError:
            return False
        facts = _entry_facts(entry, ctx, side)
        return _fact_sat(bound, facts)

    def usage_count(self, entry_id: str, models) -> int:
        """Distinct mechanisms, across the models, that reference the entry."""
        known = {e["id"] for e in self._read_index()["entries"]}
        if entry_id not in known:
            raise UnknownEntry(f"no entry '{entry_id}' in the knowledgebase")
        users: set[str] = set()
        for model in models:
            ctx = model.context
            for mech in ctx.mechanisms.values():
                referenced: set[str] = {p for p, _role in mech.parts}
                referenced.update(mech.places)
                for uid in mech.organization:
                    referenced.add(uid)
                    unit = ctx.units.get(uid)
                    if unit is not None:
                        referenced.add(unit.transitional)
                        trans = ctx.transitionals.get(unit.transitional)
                        if trans is not None and trans.refinement:
                            referenced.add(trans.refinement)
                for replaced, (target, expansion) in model.refinement_tree.items():
                    if replaced in mech.organization or set(expansion) & set(
                        mech.organization
                    ):
                        referenced.add(target)
                        referenced.add(replaced)
                if entry_id in referenced:
                    users.add(mech.id)
        return len(users)


def _bind_pattern(expr, ctx):
    """Bind a query pattern's literals against the entry's declarations."""
    from .compiler import _Resolver

    resolver = _Resolver.__new__(_Resolver)
    resolver.ctx = ctx
    resolver.diags = []
    bound = resolver._bind_expr(expr, None, "signature pattern")
    if resolver.diags:
        raise MechError("pattern does not bind against this entry")
    return bound


def _entry_facts(entry: KbEntry, ctx, side: str) -> FactSet:
    facts = FactSet()
    if entry.kind == "mechanism":
        mech = ctx.mechanisms.get(entry.id)
        exprs = []
        if mech is not None:
            exprs = [mech.phenomenon.setup if side == "input" else mech.phenomenon.termination]
        for expr in exprs:
            _facts_from_expr(expr, facts)
        if side == "output" and mech is not None:
            for uid in mech.organization:
                unit = ctx.units.get(uid)
                if unit is not None:
                    for key, value in _unit_fact_payload(unit, ctx):
                        facts.add_value(key, value)
    elif entry.kind == "transitional-unit":
        for unit in ctx.units.values():
            expr = unit.inputs if side == "input" else unit.outputs
            _facts_from_expr(expr, facts)
            if side == "output":
                for key, value in _unit_fact_payload(unit, ctx):
                    facts.add_value(key, value)
    else:  # aggregate templates expose their declared qualities on both sides
        for agg in ctx.aggregates.values():
            for name, value in agg.qualities.items():
                facts.add_value(("q", agg.id, name), value)
    return facts


def _facts_from_expr(expr, facts: FactSet):
    try:
        atoms = conjunction_atoms(expr)
    except MechError:
        return
    for atom in atoms:
        if isinstance(atom, QualityState) and atom.cmp is Cmp.EQ:
            facts.add_value(("q", atom.aggregate, atom.quality), atom.literal)
        elif isinstance(atom, ConfigState) and atom.cmp is Cmp.EQ:
            facts.add_value(("rq", atom.rq), atom.literal)
        elif isinstance(atom, TokenState):
            facts.add_tokens(atom.place, atom.count)


# ---------------------------------------------------------------------------
# Preference rules
# ---------------------------------------------------------------------------


def _condition_holds(cond, binding: dict) -> bool:
    if isinstance(cond, RuleCmp):
        if cond.identifier not in binding:
            raise UnboundIdentifier(
                f"rule condition references unbound identifier '{cond.identifier}'"
            )
        return binding[cond.identifier] == cond.symbol
    if isinstance(cond, AndExpr):
        return all(_condition_holds(i, binding) for i in cond.items)
    if isinstance(cond, OrExpr):
        return any(_condition_holds(i, binding) for i in cond.items)
    if isinstance(cond, NotExpr):
        return not _condition_holds(cond.item, binding)
    raise MechError(f"unexpected rule condition {cond!r}")


def _condition_identifiers(cond) -> set[str]:
    if isinstance(cond, RuleCmp):
        return {cond.identifier}
    out: set[str] = set()
    for item in getattr(cond, "items", ()) or ():
        out.update(_condition_identifiers(item))
    if isinstance(cond, NotExpr):
        out.update(_condition_identifiers(cond.item))
    return out


def evaluate_rules(ruleset: RuleSet, binding: dict):
    """First-match evaluation; returns the preferred model id or NO_MATCH.

    A reached condition whose identifiers are not all bound raises
    UnboundIdentifier; falling through every rule is a value, not an error.
    """
    for rule in ruleset.rules:
        if rule.condition is None:
            return rule.model
        missing = _condition_identifiers(rule.condition) - set(binding)
        if missing:
            raise UnboundIdentifier(
                "rule condition references unbound identifier "
                + ", ".join(f"'{m}'" for m in sorted(missing))
            )
        if _condition_holds(rule.condition, binding):
            return rule.model
    return NO_MATCH


# ---------------------------------------------------------------------------
# Built-in corpus
# ---------------------------------------------------------------------------


def corpus_text(name: str) -> str:
    return resources.files("mechlang.corpus").joinpath(name).read_text(encoding="utf-8")


def builtin_corpus() -> list[ModelDocument]:
    """The bundled example models; each parses and compiles with zero errors."""
    documents = []
    for name in _CORPUS_FILES:
        parsed = parse_mech(corpus_text(name), name)
        if not parsed.ok:
            raise MechError(f"bundled model '{name}' failed to parse")
        documents.append(parsed.document)
    return documents
