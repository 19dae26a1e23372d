"""Source spans and diagnostics used by the parser and the compiler."""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True, order=True)
class SourceSpan:
    """A 1-based region of a source file; start must not come after end."""

    file: str = ""
    start_line: int = 1
    start_col: int = 1
    end_line: int = 1
    end_col: int = 1

    def __post_init__(self):
        if (self.end_line, self.end_col) < (self.start_line, self.start_col):
            raise ValueError("span end precedes start")

    def __str__(self):
        return f"{self.file}:{self.start_line}:{self.start_col}"


ERROR = "error"
WARNING = "warning"


@dataclass(frozen=True)
class Diagnostic:
    """A single compiler or parser finding with a stable code and a span."""

    severity: str
    code: str
    message: str
    span: SourceSpan
    related: tuple[SourceSpan, ...] = field(default=())

    def render(self) -> str:
        text = f"{self.span}: {self.severity} {self.code}: {self.message}"
        for extra in self.related:
            text += f"\n  note: related: {extra}"
        return text

    def to_json(self) -> dict:
        return {
            "code": self.code,
            "severity": self.severity,
            "message": self.message,
            "file": self.span.file,
            "line": self.span.start_line,
            "column": self.span.start_col,
            "related": [
                {"file": s.file, "line": s.start_line, "column": s.start_col}
                for s in self.related
            ],
        }


def sort_diagnostics(diags) -> list[Diagnostic]:
    """Deterministic ordering: by span, then code, then message."""
    return sorted(diags, key=lambda d: (d.span, d.code, d.message))


def has_errors(diags) -> bool:
    return any(d.severity == ERROR for d in diags)
