"""mechlang: a mechanism modeling language, compiler and execution engine.

Models are written in the .mech format: aggregates with typed qualities and
part links, transitionals (state-change primitives), transitional units
wiring inputs to outputs through token places, mechanisms with full
metadata, and microworlds that scope execution. Compiled models run on a
deterministic discrete-event engine; conditional preference rules (.rules)
select between candidate models.
"""

from .compiler import (
    Classification,
    CompiledModel,
    CompileResult,
    ModelContext,
    check_chain,
    check_conservation,
    check_metadata,
    classify_mechanism,
    compile_document,
    resolve_refinements,
)
from .diagnostics import Diagnostic, SourceSpan
from .engine import (
    ReachableMarkings,
    RunResult,
    TraceEvent,
    WorldState,
    enabled,
    init_world,
    reachable_markings,
    run,
    send_message,
    serialize_trace,
    step,
    write_trace,
)
from .errors import (
    AxiomViolated,
    ConservationViolated,
    CycleDetected,
    DeadlockError,
    DuplicateId,
    InitError,
    InvalidPayload,
    MechError,
    PreconditionNotMet,
    TimeInPast,
    UnboundIdentifier,
    UnitMismatch,
    UnknownAggregate,
    UnknownEntry,
    UnresolvedReference,
)
from .kb import (
    KbEntry,
    Knowledgebase,
    NO_MATCH,
    Provenance,
    builtin_corpus,
    evaluate_rules,
    slice_document,
)
from .model import (
    Aggregate,
    AndExpr,
    Cmp,
    ConfigState,
    ConservationDecl,
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
    RelationalQuality,
    Snapshot,
    TokenState,
    Transitional,
    TransitionalUnit,
    WeightRule,
    apply_transitional_unit,
    conservation_total,
    evaluate_state,
    io_compatible,
    part_closure,
)
from .parser import (
    ModelDocument,
    ParseResult,
    RuleSet,
    parse_mech,
    parse_mech_file,
    parse_rules,
    parse_state_expression,
)
from .serializer import document_to_json, serialize_mech

__version__ = "0.1.0"
