"""Lexer and parsers for the .mech model format and the .rules format.

Parsing is total: any input yields either a document or a nonempty list of
diagnostics, never an exception. Every node carries a source span.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

from .diagnostics import ERROR, Diagnostic, SourceSpan
from .model import (
    Aggregate,
    AndExpr,
    Cmp,
    ConfigState,
    ConservationDecl,
    CreateAggregate,
    DestroyAggregate,
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
    TokenState,
    Transitional,
    TransitionalKind,
    TransitionalUnit,
    TRUE_EXPR,
    WeightRule,
)

TOP_KEYWORDS = (
    "enum",
    "predicate",
    "aggregate",
    "rq",
    "place",
    "transitional",
    "unit",
    "mechanism",
    "microworld",
    "conserve",
)

_PUNCT2 = ("==", "!=", "<=", ">=", "&&", "||")
_PUNCT1 = "{}():,.=<>!;"


@dataclass(frozen=True)
class EnumDecl:
    id: str
    symbols: tuple[str, ...]
    span: SourceSpan = field(default=SourceSpan(), compare=False)


@dataclass(frozen=True)
class PredicateDecl:
    id: str
    span: SourceSpan = field(default=SourceSpan(), compare=False)


@dataclass(frozen=True)
class PlaceDecl:
    id: str
    initial: int
    span: SourceSpan = field(default=SourceSpan(), compare=False)


@dataclass(frozen=True)
class ModelDocument:
    """A parsed .mech file, declarations bucketed by kind in source order."""

    file: str = field(default="", compare=False)
    enums: tuple[EnumDecl, ...] = ()
    predicates: tuple[PredicateDecl, ...] = ()
    aggregates: tuple[Aggregate, ...] = ()
    rqs: tuple[RelationalQuality, ...] = ()
    places: tuple[PlaceDecl, ...] = ()
    transitionals: tuple[Transitional, ...] = ()
    units: tuple[TransitionalUnit, ...] = ()
    mechanisms: tuple[Mechanism, ...] = ()
    microworlds: tuple[Microworld, ...] = ()
    conserves: tuple[ConservationDecl, ...] = ()

    def is_empty(self) -> bool:
        return not any(
            (
                self.enums,
                self.predicates,
                self.aggregates,
                self.rqs,
                self.places,
                self.transitionals,
                self.units,
                self.mechanisms,
                self.microworlds,
                self.conserves,
            )
        )


@dataclass(frozen=True)
class RuleCmp:
    identifier: str
    symbol: str
    span: SourceSpan = field(default=SourceSpan(), compare=False)


@dataclass(frozen=True)
class Rule:
    condition: object  # RuleCmp / AndExpr / OrExpr; None for a bare else
    model: str
    span: SourceSpan = field(default=SourceSpan(), compare=False)


@dataclass(frozen=True)
class RuleSet:
    rules: tuple[Rule, ...] = ()
    file: str = field(default="", compare=False)

    def identifiers(self) -> set[str]:
        names: set[str] = set()
        for rule in self.rules:
            if rule.condition is not None:
                names.update(_condition_identifiers(rule.condition))
        return names


def _condition_identifiers(cond) -> set[str]:
    if isinstance(cond, RuleCmp):
        return {cond.identifier}
    names: set[str] = set()
    for item in cond.items:
        names.update(_condition_identifiers(item))
    return names


@dataclass(frozen=True)
class ParseResult:
    """Either a document/ruleset or diagnostics, never both."""

    document: object
    diagnostics: tuple[Diagnostic, ...]

    @property
    def ok(self) -> bool:
        return not self.diagnostics


# ---------------------------------------------------------------------------
# Lexer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Token:
    kind: str  # IDENT NUMBER STRING UNIT PUNCT EOF
    text: str
    span: SourceSpan
    value: object = None


class _LexError(Exception):
    def __init__(self, message, span):
        super().__init__(message)
        self.message = message
        self.span = span


def _lex(text: str, file: str) -> list[Token]:
    tokens: list[Token] = []
    i, line, col = 0, 1, 1
    n = len(text)

    def span(l0, c0, l1, c1):
        return SourceSpan(file, l0, c0, l1, c1)

    while i < n:
        ch = text[i]
        if ch == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if ch == "#":
            while i < n and text[i] != "\n":
                i += 1
                col += 1
            continue
        l0, c0 = line, col
        if ch == '"':
            i += 1
            col += 1
            out = []
            while True:
                if i >= n or text[i] == "\n":
                    raise _LexError("unterminated string", span(l0, c0, line, col))
                c = text[i]
                if c == '"':
                    i += 1
                    col += 1
                    break
                if c == "\\":
                    if i + 1 >= n:
                        raise _LexError("unterminated string", span(l0, c0, line, col))
                    esc = text[i + 1]
                    out.append({"n": "\n", "t": "\t", '"': '"', "\\": "\\"}.get(esc, esc))
                    i += 2
                    col += 2
                    continue
                out.append(c)
                i += 1
                col += 1
            tokens.append(Token("STRING", "".join(out), span(l0, c0, line, col - 1), "".join(out)))
            continue
        if ch == "[":
            i += 1
            col += 1
            start = i
            while i < n and text[i] not in "]\n":
                i += 1
                col += 1
            if i >= n or text[i] == "\n":
                raise _LexError("unterminated unit bracket", span(l0, c0, line, col))
            unit = text[start:i].strip()
            i += 1
            col += 1
            tokens.append(Token("UNIT", unit, span(l0, c0, line, col - 1), unit))
            continue
        if ch.isdigit() or (ch == "-" and i + 1 < n and text[i + 1].isdigit()):
            start = i
            if ch == "-":
                i += 1
                col += 1
            while i < n and text[i].isdigit():
                i += 1
                col += 1
            if i < n and text[i] in "./" and i + 1 < n and text[i + 1].isdigit():
                i += 1
                col += 1
                while i < n and text[i].isdigit():
                    i += 1
                    col += 1
            raw = text[start:i]
            try:
                value = Fraction(raw)
            except (ValueError, ZeroDivisionError):
                raise _LexError(f"malformed number '{raw}'", span(l0, c0, line, col - 1))
            tokens.append(Token("NUMBER", raw, span(l0, c0, line, col - 1), value))
            continue
        if ch.isalpha() or ch == "_":
            start = i
            while i < n and (text[i].isalnum() or text[i] in "_-"):
                i += 1
                col += 1
            word = text[start:i]
            tokens.append(Token("IDENT", word, span(l0, c0, line, col - 1), word))
            continue
        two = text[i : i + 2]
        if two in _PUNCT2:
            i += 2
            col += 2
            tokens.append(Token("PUNCT", two, span(l0, c0, line, col - 1)))
            continue
        if ch in _PUNCT1:
            i += 1
            col += 1
            tokens.append(Token("PUNCT", ch, span(l0, c0, line, col - 1)))
            continue
        raise _LexError(f"unexpected character {ch!r}", span(l0, c0, line, col))
    tokens.append(Token("EOF", "", SourceSpan(file, line, max(col, 1), line, max(col, 1))))
    return tokens


# ---------------------------------------------------------------------------
# Shared parser machinery
# ---------------------------------------------------------------------------


class _SyncError(Exception):
    """Internal: abort the current construct and resynchronize."""


class _Parser:
    def __init__(self, tokens: list[Token], file: str):
        self.tokens = tokens
        self.pos = 0
        self.file = file
        self.diags: list[Diagnostic] = []

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.pos + ahead, len(self.tokens) - 1)]

    def next(self) -> Token:
        tok = self.peek()
        if tok.kind != "EOF":
            self.pos += 1
        return tok

    def at_punct(self, text: str) -> bool:
        tok = self.peek()
        return tok.kind == "PUNCT" and tok.text == text

    def at_word(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "IDENT" and tok.text == word

    def at_word_any(self, words) -> bool:
        tok = self.peek()
        return tok.kind == "IDENT" and tok.text in words

    def error(self, message: str, span: SourceSpan | None = None):
        span = span or self.peek().span
        self.diags.append(Diagnostic(ERROR, "SYNTAX", message, span))

    def fail(self, message: str, span: SourceSpan | None = None):
        self.error(message, span)
        raise _SyncError()

    def expect_punct(self, text: str) -> Token:
        if not self.at_punct(text):
            tok = self.peek()
            self.fail(f"expected '{text}', found '{tok.text or tok.kind}'", tok.span)
        return self.next()

    def expect_ident(self, what: str = "identifier") -> Token:
        tok = self.peek()
        if tok.kind != "IDENT":
            self.fail(f"expected {what}, found '{tok.text or tok.kind}'", tok.span)
        return self.next()

    def expect_string(self, what: str = "string") -> Token:
        tok = self.peek()
        if tok.kind != "STRING":
            self.fail(f"expected {what}, found '{tok.text or tok.kind}'", tok.span)
        return self.next()

    def expect_int(self, what: str = "integer", minimum: int | None = 0) -> int:
        tok = self.peek()
        if tok.kind != "NUMBER" or tok.value.denominator != 1:
            self.fail(f"expected {what}, found '{tok.text or tok.kind}'", tok.span)
        value = tok.value.numerator
        if minimum is not None and value < minimum:
            self.fail(f"{what} must be >= {minimum}", tok.span)
        self.next()
        return value

    def expect_number(self) -> tuple[Fraction, Token]:
        tok = self.peek()
        if tok.kind != "NUMBER":
            self.fail(f"expected number, found '{tok.text or tok.kind}'", tok.span)
        self.next()
        return tok.value, tok

    def skip_balanced_block(self):
        """Skip a brace-balanced block if one follows, else skip one token."""
        if not self.at_punct("{"):
            if self.peek().kind != "EOF":
                self.next()
            return
        depth = 0
        while True:
            tok = self.next()
            if tok.kind == "EOF":
                return
            if tok.kind == "PUNCT" and tok.text == "{":
                depth += 1
            elif tok.kind == "PUNCT" and tok.text == "}":
                depth -= 1
                if depth == 0:
                    return


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------


def _parse_literal(p: _Parser) -> RawLiteral:
    tok = p.peek()
    if tok.kind == "NUMBER":
        p.next()
        unit = None
        if p.peek().kind == "UNIT":
            unit = p.next().value
        return RawLiteral("number", number=tok.value, unit=unit, span=tok.span)
    if tok.kind == "IDENT" and tok.text in ("true", "false"):
        p.next()
        return RawLiteral("bool", boolean=tok.text == "true", span=tok.span)
    if tok.kind == "IDENT":
        p.next()
        return RawLiteral("symbol", symbol=tok.text, span=tok.span)
    p.fail(f"expected a literal, found '{tok.text or tok.kind}'", tok.span)


_CMP_BY_TEXT = {c.value: c for c in Cmp}


def _parse_comparator(p: _Parser) -> Cmp:
    tok = p.peek()
    if tok.kind == "PUNCT" and tok.text in _CMP_BY_TEXT:
        p.next()
        return _CMP_BY_TEXT[tok.text]
    p.fail(f"expected a comparator, found '{tok.text or tok.kind}'", tok.span)


def _parse_atom(p: _Parser):
    tok = p.peek()
    if p.at_punct("("):
        p.next()
        expr = parse_expression(p)
        p.expect_punct(")")
        return expr
    if p.at_punct("!"):
        p.next()
        return NotExpr(_parse_atom(p), span=tok.span)
    if tok.kind != "IDENT":
        p.fail(f"expected a condition, found '{tok.text or tok.kind}'", tok.span)
    if tok.text == "tokens" and p.peek(1).kind == "PUNCT" and p.peek(1).text == "(":
        p.next()
        p.expect_punct("(")
        place = p.expect_ident("place id").text
        p.expect_punct(")")
        cmp_tok = p.peek()
        if not p.at_punct(">="):
            p.fail("token conditions use '>='", cmp_tok.span)
        p.next()
        count = p.expect_int("token count", minimum=0)
        return TokenState(place, count, span=tok.span)
    if tok.text == "rq" and p.peek(1).kind == "IDENT":
        p.next()
        rq_id = p.expect_ident("relational quality id").text
        cmp = _parse_comparator(p)
        literal = _parse_literal(p)
        return ConfigState(rq_id, cmp, literal, span=tok.span)
    if tok.text == "emergent" and p.peek(1).kind == "IDENT":
        p.next()
        name = p.expect_ident("predicate id").text
        p.expect_punct("(")
        ids = [p.expect_ident("aggregate id").text]
        while p.at_punct(","):
            p.next()
            ids.append(p.expect_ident("aggregate id").text)
        p.expect_punct(")")
        return EmergentState(name, tuple(ids), span=tok.span)
    aggregate = p.expect_ident("aggregate id").text
    p.expect_punct(".")
    quality = p.expect_ident("quality name").text
    cmp = _parse_comparator(p)
    literal = _parse_literal(p)
    return QualityState(aggregate, quality, cmp, literal, span=tok.span)


def _parse_and(p: _Parser):
    first = _parse_atom(p)
    if not p.at_punct("&&"):
        return first
    items = [first]
    while p.at_punct("&&"):
        p.next()
        items.append(_parse_atom(p))
    return AndExpr(tuple(items), span=items[0].span)


def parse_expression(p: _Parser):
    first = _parse_and(p)
    if not p.at_punct("||"):
        return first
    items = [first]
    while p.at_punct("||"):
        p.next()
        items.append(_parse_and(p))
    return OrExpr(tuple(items), span=items[0].span)


def _parse_typed_value(p: _Parser) -> QualityValue:
    tok = p.expect_ident("value kind (count/scalar/boolean/enum)")
    if tok.text == "count":
        value = p.expect_int("count value", minimum=None)
        if value < 0:
            p.fail("count values must be nonnegative", tok.span)
        return QualityValue.count(value)
    if tok.text == "scalar":
        number, _ = p.expect_number()
        unit_tok = p.peek()
        if unit_tok.kind != "UNIT":
            p.fail("scalar values require a [unit]", unit_tok.span)
        p.next()
        return QualityValue.scalar(number, unit_tok.value)
    if tok.text == "boolean":
        word = p.expect_ident("true or false")
        if word.text not in ("true", "false"):
            p.fail("expected true or false", word.span)
        return QualityValue.boolean(word.text == "true")
    if tok.text == "enum":
        domain = p.expect_ident("enum domain id").text
        symbol = p.expect_ident("enum symbol").text
        return QualityValue.enum(symbol, domain=domain)
    p.fail(f"unknown value kind '{tok.text}'", tok.span)


# ---------------------------------------------------------------------------
# .mech declarations
# ---------------------------------------------------------------------------


class _MechParser(_Parser):
    def __init__(self, tokens, file):
        super().__init__(tokens, file)
        self.enums: list[EnumDecl] = []
        self.predicates: list[PredicateDecl] = []
        self.aggregates: list[Aggregate] = []
        self.rqs: list[RelationalQuality] = []
        self.places: list[PlaceDecl] = []
        self.transitionals: list[Transitional] = []
        self.units: list[TransitionalUnit] = []
        self.mechanisms: list[Mechanism] = []
        self.microworlds: list[Microworld] = []
        self.conserves: list[ConservationDecl] = []
        self.seen_ids: dict[str, set[str]] = {}

    def check_duplicate(self, kind: str, ident: Token):
        seen = self.seen_ids.setdefault(kind, set())
        if ident.text in seen:
            self.error(f"duplicate {kind} id '{ident.text}'", ident.span)
        seen.add(ident.text)

    def parse_document(self) -> ModelDocument:
        while self.peek().kind != "EOF":
            tok = self.peek()
            if tok.kind != "IDENT" or tok.text not in TOP_KEYWORDS:
                self.error(
                    f"unknown declaration keyword '{tok.text or tok.kind}'", tok.span
                )
                self.next()
                # swallow the declaration head and its block, if any
                while self.peek().kind in ("IDENT", "STRING", "NUMBER") and not (
                    self.peek().kind == "IDENT" and self.peek().text in TOP_KEYWORDS
                ):
                    self.next()
                if self.at_punct("{"):
                    self.skip_balanced_block()
                elif not self.at_word_any(TOP_KEYWORDS):
                    self._resync()
                continue
            try:
                getattr(self, "parse_" + tok.text)()
            except _SyncError:
                self._resync()
        return ModelDocument(
            file=self.file,
            enums=tuple(self.enums),
            predicates=tuple(self.predicates),
            aggregates=tuple(self.aggregates),
            rqs=tuple(self.rqs),
            places=tuple(self.places),
            transitionals=tuple(self.transitionals),
            units=tuple(self.units),
            mechanisms=tuple(self.mechanisms),
            microworlds=tuple(self.microworlds),
            conserves=tuple(self.conserves),
        )

    def _resync(self):
        depth = 0
        while True:
            tok = self.peek()
            if tok.kind == "EOF":
                return
            if tok.kind == "PUNCT" and tok.text == "{":
                depth += 1
            elif tok.kind == "PUNCT" and tok.text == "}":
                if depth == 0:
                    self.next()
                    return
                depth -= 1
            elif tok.kind == "IDENT" and tok.text in TOP_KEYWORDS and depth == 0:
                return
            self.next()

    # -- declarations ------------------------------------------------------

    def parse_enum(self):
        start = self.next()
        ident = self.expect_ident("enum domain id")
        self.check_duplicate("enum", ident)
        self.expect_punct("{")
        symbols = [self.expect_ident("enum symbol").text]
        while self.at_punct(","):
            self.next()
            symbols.append(self.expect_ident("enum symbol").text)
        end = self.expect_punct("}")
        if len(set(symbols)) != len(symbols):
            self.error(f"duplicate symbol in enum '{ident.text}'", ident.span)
        self.enums.append(
            EnumDecl(ident.text, tuple(symbols), span=_join(start.span, end.span))
        )

    def parse_predicate(self):
        start = self.next()
        ident = self.expect_ident("predicate id")
        self.check_duplicate("predicate", ident)
        self.predicates.append(PredicateDecl(ident.text, span=_join(start.span, ident.span)))

    def parse_place(self):
        start = self.next()
        ident = self.expect_ident("place id")
        self.check_duplicate("place", ident)
        self.expect_punct(":")
        initial = self.expect_int("initial token count")
        self.places.append(
            PlaceDecl(ident.text, initial, span=_join(start.span, ident.span))
        )

    def parse_aggregate(self):
        start = self.next()
        ident = self.expect_ident("aggregate id")
        self.check_duplicate("aggregate", ident)
        self.expect_punct("{")
        label = ""
        refs: list[str] = []
        qualities: dict[str, QualityValue] = {}
        parts: list[PartLink] = []
        position = None
        while not self.at_punct("}"):
            key = self.expect_ident("aggregate item")
            if key.text == "label":
                self.expect_punct(":")
                label = self.expect_string("label text").value
            elif key.text == "ontology":
                self.expect_punct(":")
                refs.append(self.expect_string("ontology term").value)
                while self.at_punct(","):
                    self.next()
                    refs.append(self.expect_string("ontology term").value)
            elif key.text == "quality":
                name = self.expect_ident("quality name")
                if name.text in qualities:
                    self.error(
                        f"duplicate quality '{name.text}' in aggregate '{ident.text}'",
                        name.span,
                    )
                self.expect_punct(":")
                qualities[name.text] = _parse_typed_value(self)
            elif key.text == "part":
                child = self.expect_ident("part aggregate id").text
                self.expect_punct(":")
                role = self.expect_ident("part role")
                if role.text not in ("functional", "structural"):
                    self.fail("part role must be functional or structural", role.span)
                parts.append(PartLink(child, role.text))
            elif key.text == "position":
                self.expect_punct(":")
                self.expect_punct("(")
                coords = [self.expect_number()[0]]
                while self.at_punct(","):
                    self.next()
                    coords.append(self.expect_number()[0])
                self.expect_punct(")")
                position = tuple(coords)
            else:
                self.fail(f"unknown aggregate item '{key.text}'", key.span)
        end = self.expect_punct("}")
        self.aggregates.append(
            Aggregate(
                id=ident.text,
                label=label,
                ontology_refs=tuple(refs),
                qualities=qualities,
                parts=tuple(parts),
                position=position,
                span=_join(start.span, end.span),
            )
        )

    def parse_rq(self):
        start = self.next()
        ident = self.expect_ident("relational quality id")
        self.check_duplicate("rq", ident)
        self.expect_punct("{")
        name = ""
        participants: list[str] = []
        value = None
        while not self.at_punct("}"):
            key = self.expect_ident("rq item")
            self.expect_punct(":")
            if key.text == "label":
                name = self.expect_string("label text").value
            elif key.text == "participants":
                participants.append(self.expect_ident("aggregate id").text)
                while self.at_punct(","):
                    self.next()
                    participants.append(self.expect_ident("aggregate id").text)
            elif key.text == "value":
                value = _parse_typed_value(self)
            else:
                self.fail(f"unknown rq item '{key.text}'", key.span)
        end = self.expect_punct("}")
        if value is None:
            self.error(f"rq '{ident.text}' is missing a value", ident.span)
            value = QualityValue.boolean(False)
        self.rqs.append(
            RelationalQuality(
                id=ident.text,
                name=name or ident.text,
                participants=tuple(participants),
                value=value,
                span=_join(start.span, end.span),
            )
        )

    def parse_transitional(self):
        start = self.next()
        ident = self.expect_ident("transitional id")
        self.check_duplicate("transitional", ident)
        self.expect_punct("{")
        label = ""
        kind = TransitionalKind.QUALITY_CHANGE
        delay = Fraction(0)
        function = None
        refinement = None
        effects: list = []
        while not self.at_punct("}"):
            key = self.expect_ident("transitional item")
            if key.text == "label":
                self.expect_punct(":")
                label = self.expect_string("label text").value
            elif key.text == "kind":
                self.expect_punct(":")
                word = self.expect_ident("transitional kind")
                try:
                    kind = TransitionalKind(word.text)
                except ValueError:
                    self.fail(f"unknown transitional kind '{word.text}'", word.span)
            elif key.text == "delay":
                self.expect_punct(":")
                number, tok = self.expect_number()
                if number < 0:
                    self.fail("delay must be nonnegative", tok.span)
                delay = number
            elif key.text == "function":
                self.expect_punct(":")
                function = self.expect_string("function text").value
            elif key.text == "refinement":
                self.expect_punct(":")
                refinement = self.expect_ident("mechanism id").text
            elif key.text == "set":
                effects.append(self._parse_set_effect(key))
            elif key.text == "create":
                target = self.expect_ident("aggregate id")
                effects.append(CreateAggregate(target.text, span=key.span))
            elif key.text == "destroy":
                target = self.expect_ident("aggregate id")
                effects.append(DestroyAggregate(target.text, span=key.span))
            elif key.text == "send":
                effects.append(self._parse_send_effect(key))
            else:
                self.fail(f"unknown transitional item '{key.text}'", key.span)
        end = self.expect_punct("}")
        self.transitionals.append(
            Transitional(
                id=ident.text,
                kind=kind,
                label=label,
                effects=tuple(effects),
                delay=delay,
                function=function,
                refinement=refinement,
                span=_join(start.span, end.span),
            )
        )

    def _parse_set_effect(self, key: Token):
        first = self.expect_ident("target")
        if first.text == "rq" and not self.at_punct("."):
            rq_id = self.expect_ident("relational quality id").text
            self.expect_punct("=")
            return SetRq(rq_id, _parse_literal(self), span=key.span)
        self.expect_punct(".")
        quality = self.expect_ident("quality name").text
        self.expect_punct("=")
        return SetQuality(first.text, quality, _parse_literal(self), span=key.span)

    def _parse_send_effect(self, key: Token):
        receiver = self.expect_ident("receiver aggregate id").text
        self.expect_punct(".")
        quality = self.expect_ident("quality name").text
        self.expect_punct("=")
        literal = _parse_literal(self)
        sender = ""
        delay = Fraction(0)
        if self.at_word("from"):
            self.next()
            sender = self.expect_ident("sender aggregate id").text
        if self.at_word("after"):
            self.next()
            number, tok = self.expect_number()
            if number < 0:
                self.fail("message delay must be nonnegative", tok.span)
            delay = number
        return SendMessage(sender, receiver, quality, literal, delay, span=key.span)

    def parse_unit(self):
        start = self.next()
        ident = self.expect_ident("unit id")
        self.check_duplicate("unit", ident)
        self.expect_punct("{")
        inputs = TRUE_EXPR
        outputs = TRUE_EXPR
        transitional = ""
        consumes: list[tuple[str, int]] = []
        produces: list[tuple[str, int]] = []
        exempt: list[str] = []
        while not self.at_punct("}"):
            key = self.expect_ident("unit item")
            if key.text == "when":
                self.expect_punct(":")
                inputs = parse_expression(self)
            elif key.text == "do":
                self.expect_punct(":")
                transitional = self.expect_ident("transitional id").text
            elif key.text == "then":
                self.expect_punct(":")
                outputs = parse_expression(self)
            elif key.text == "consume":
                place = self.expect_ident("place id").text
                self.expect_punct(":")
                consumes.append((place, self.expect_int("token count")))
            elif key.text == "produce":
                place = self.expect_ident("place id").text
                self.expect_punct(":")
                produces.append((place, self.expect_int("token count")))
            elif key.text == "exempt":
                self.expect_punct(":")
                exempt.append(self.expect_string("conserved quantity name").value)
                while self.at_punct(","):
                    self.next()
                    exempt.append(self.expect_string("conserved quantity name").value)
            else:
                self.fail(f"unknown unit item '{key.text}'", key.span)
        end = self.expect_punct("}")
        if not transitional:
            self.error(f"unit '{ident.text}' is missing a 'do:' transitional", ident.span)
        self.units.append(
            TransitionalUnit(
                id=ident.text,
                inputs=inputs,
                transitional=transitional,
                outputs=outputs,
                consumes=tuple(consumes),
                produces=tuple(produces),
                exempt=tuple(exempt),
                span=_join(start.span, end.span),
            )
        )

    _METADATA_STRING_KEYS = (
        "model_type",
        "dynamic_elements",
        "context",
        "author",
        "date",
        "version",
        "explanations",
        "variations",
        "implications",
    )

    def _parse_metadata(self, start: Token) -> MechanismMetadata:
        self.expect_punct("{")
        values: dict[str, object] = {}
        evidence: list[str] = []
        while not self.at_punct("}"):
            key = self.expect_ident("metadata key")
            self.expect_punct(":")
            if key.text in ("mechanism_type", "function_type"):
                values[key.text] = self.expect_ident("metadata symbol").text
            elif key.text == "evidence":
                evidence.append(self.expect_string("evidence uri").value)
                while self.at_punct(","):
                    self.next()
                    evidence.append(self.expect_string("evidence uri").value)
            elif key.text in self._METADATA_STRING_KEYS:
                values[key.text] = self.expect_string("metadata text").value
            else:
                self.fail(f"unknown metadata key '{key.text}'", key.span)
        end = self.expect_punct("}")
        return MechanismMetadata(
            evidence=tuple(evidence), span=_join(start.span, end.span), **values
        )

    def _parse_phenomenon(self, start: Token) -> Phenomenon:
        self.expect_punct("{")
        setup = TRUE_EXPR
        termination = TRUE_EXPR
        summary = ""
        while not self.at_punct("}"):
            key = self.expect_ident("phenomenon key")
            self.expect_punct(":")
            if key.text == "setup":
                setup = parse_expression(self)
            elif key.text == "termination":
                termination = parse_expression(self)
            elif key.text == "summary":
                summary = self.expect_string("summary text").value
            else:
                self.fail(f"unknown phenomenon key '{key.text}'", key.span)
        end = self.expect_punct("}")
        return Phenomenon(setup, termination, summary, span=_join(start.span, end.span))

    def parse_mechanism(self):
        start = self.next()
        ident = self.expect_ident("mechanism id")
        self.check_duplicate("mechanism", ident)
        self.expect_punct("{")
        metadata = MechanismMetadata()
        phenomenon = Phenomenon()
        parts: list[tuple[str, str]] = []
        places: list[str] = []
        organization: list[str] = []
        conserved: list[str] = []
        while not self.at_punct("}"):
            key = self.expect_ident("mechanism item")
            if key.text == "metadata":
                metadata = self._parse_metadata(key)
            elif key.text == "phenomenon":
                phenomenon = self._parse_phenomenon(key)
            elif key.text == "part":
                part = self.expect_ident("aggregate id").text
                self.expect_punct(":")
                role = self.expect_ident("part role")
                if role.text not in ("functional", "structural"):
                    self.fail("part role must be functional or structural", role.span)
                parts.append((part, role.text))
            elif key.text == "place":
                places.append(self.expect_ident("place id").text)
            elif key.text == "unit":
                organization.append(self.expect_ident("unit id").text)
            elif key.text == "conserve":
                conserved.append(self.expect_string("conserved quantity name").value)
            else:
                self.fail(f"unknown mechanism item '{key.text}'", key.span)
        end = self.expect_punct("}")
        self.mechanisms.append(
            Mechanism(
                id=ident.text,
                metadata=metadata,
                phenomenon=phenomenon,
                parts=tuple(parts),
                places=tuple(places),
                organization=tuple(organization),
                conserved=tuple(conserved),
                span=_join(start.span, end.span),
            )
        )

    def parse_microworld(self):
        start = self.next()
        ident = self.expect_ident("microworld id")
        self.check_duplicate("microworld", ident)
        self.expect_punct("{")
        aggregates: list[tuple[str, bool]] = []
        mechanisms: list[str] = []
        axioms: list = []
        while not self.at_punct("}"):
            key = self.expect_ident("microworld item")
            if key.text == "aggregate":
                agg = self.expect_ident("aggregate id").text
                present = True
                if self.at_punct(":"):
                    self.next()
                    word = self.expect_ident("'absent'")
                    if word.text != "absent":
                        self.fail("expected 'absent'", word.span)
                    present = False
                aggregates.append((agg, present))
            elif key.text == "mechanism":
                mechanisms.append(self.expect_ident("mechanism id").text)
            elif key.text == "axiom":
                axioms.append(parse_expression(self))
            else:
                self.fail(f"unknown microworld item '{key.text}'", key.span)
        end = self.expect_punct("}")
        self.microworlds.append(
            Microworld(
                id=ident.text,
                aggregates=tuple(aggregates),
                mechanisms=tuple(mechanisms),
                axioms=tuple(axioms),
                span=_join(start.span, end.span),
            )
        )

    def parse_conserve(self):
        start = self.next()
        name = self.expect_string("conserved quantity name")
        seen = self.seen_ids.setdefault("conserve", set())
        if name.value in seen:
            self.error(f"duplicate conserve declaration '{name.value}'", name.span)
        seen.add(name.value)
        self.expect_punct("{")
        rules: list[WeightRule] = []
        while not self.at_punct("}"):
            key = self.expect_ident("conserve item")
            if key.text != "weight":
                self.fail(f"unknown conserve item '{key.text}'", key.span)
            tok = self.peek()
            if tok.kind == "IDENT" and tok.text == "ref" and self.peek(1).kind == "STRING":
                self.next()
                pattern = self.expect_string("ontology pattern").value
                matcher = "ontology"
            elif tok.kind == "IDENT" and tok.text == "quality" and self.peek(1).kind == "IDENT":
                self.next()
                pattern = self.expect_ident("quality name").text
                matcher = "quality"
            else:
                pattern = self.expect_ident("aggregate id").text
                matcher = "aggregate"
            self.expect_punct(":")
            weight = self.expect_int("weight")
            rules.append(WeightRule(matcher, pattern, weight, span=key.span))
        end = self.expect_punct("}")
        self.conserves.append(
            ConservationDecl(name.value, tuple(rules), span=_join(start.span, end.span))
        )


def _join(a: SourceSpan, b: SourceSpan) -> SourceSpan:
    return SourceSpan(a.file, a.start_line, a.start_col, b.end_line, b.end_col)


def parse_mech(text: str, file_name: str = "<string>") -> ParseResult:
    """Parse .mech text into a ModelDocument or a list of diagnostics."""
    try:
        tokens = _lex(text, file_name)
    except _LexError as exc:
        return ParseResult(None, (Diagnostic(ERROR, "SYNTAX", exc.message, exc.span),))
    parser = _MechParser(tokens, file_name)
    document = parser.parse_document()
    if parser.diags:
        return ParseResult(None, tuple(parser.diags))
    return ParseResult(document, ())


def parse_mech_file(path) -> ParseResult:
    with open(path, "r", encoding="utf-8") as handle:
        return parse_mech(handle.read(), str(path))


def parse_state_expression(text: str, file_name: str = "<pattern>") -> ParseResult:
    """Parse a bare state expression, e.g. for signature queries."""
    try:
        tokens = _lex(text, file_name)
    except _LexError as exc:
        return ParseResult(None, (Diagnostic(ERROR, "SYNTAX", exc.message, exc.span),))
    parser = _Parser(tokens, file_name)
    try:
        expr = parse_expression(parser)
        if parser.peek().kind != "EOF":
            parser.error("unexpected trailing input", parser.peek().span)
    except _SyncError:
        expr = None
    if parser.diags:
        return ParseResult(None, tuple(parser.diags))
    return ParseResult(expr, ())


# ---------------------------------------------------------------------------
# .rules format
# ---------------------------------------------------------------------------


def _parse_rule_atom(p: _Parser):
    if p.at_punct("("):
        p.next()
        cond = _parse_rule_or(p)
        p.expect_punct(")")
        return cond
    ident = p.expect_ident("identifier")
    if not p.at_punct("=="):
        p.fail("rule comparisons use '=='", p.peek().span)
    p.next()
    symbol = p.expect_ident("symbol")
    return RuleCmp(ident.text, symbol.text, span=_join(ident.span, symbol.span))


def _parse_rule_and(p: _Parser):
    first = _parse_rule_atom(p)
    if not p.at_punct("&&"):
        return first
    items = [first]
    while p.at_punct("&&"):
        p.next()
        items.append(_parse_rule_atom(p))
    return AndExpr(tuple(items), span=items[0].span)


def _parse_rule_or(p: _Parser):
    first = _parse_rule_and(p)
    if not p.at_punct("||"):
        return first
    items = [first]
    while p.at_punct("||"):
        p.next()
        items.append(_parse_rule_and(p))
    return OrExpr(tuple(items), span=items[0].span)


def _parse_rule_body(p: _Parser) -> str:
    p.expect_punct("{")
    word = p.expect_ident("'prefer'")
    if word.text != "prefer":
        p.fail("expected 'prefer'", word.span)
    model = p.expect_ident("model id").text
    p.expect_punct(";")
    p.expect_punct("}")
    return model


def parse_rules(text: str, file_name: str = "<rules>") -> ParseResult:
    """Parse a .rules preference file: an if/else-if chain of prefer rules."""
    try:
        tokens = _lex(text, file_name)
    except _LexError as exc:
        return ParseResult(None, (Diagnostic(ERROR, "SYNTAX", exc.message, exc.span),))
    p = _Parser(tokens, file_name)
    rules: list[Rule] = []
    try:
        while p.peek().kind != "EOF":
            start = p.peek()
            if not rules:
                if not p.at_word("if"):
                    p.fail("rules start with 'if'", start.span)
                p.next()
            else:
                if not p.at_word("else"):
                    p.fail("expected 'else' or end of rules", start.span)
                p.next()
                if not p.at_word("if"):
                    model = _parse_rule_body(p)
                    rules.append(Rule(None, model, span=start.span))
                    if p.peek().kind != "EOF":
                        p.error("nothing may follow a bare else", p.peek().span)
                    break
                p.next()
            p.expect_punct("(")
            condition = _parse_rule_or(p)
            p.expect_punct(")")
            then = p.expect_ident("'then'")
            if then.text != "then":
                p.fail("expected 'then'", then.span)
            model = _parse_rule_body(p)
            rules.append(Rule(condition, model, span=start.span))
    except _SyncError:
        pass
    if p.diags:
        return ParseResult(None, tuple(p.diags))
    return ParseResult(RuleSet(tuple(rules), file=file_name), ())
