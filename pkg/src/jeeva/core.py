"""Domain types shared across the grid and the prediction pipeline.

Sequences, 3-class structure strings, the fixed 9-task prediction DAG,
Q3 scoring and FASTA parsing. Everything here is an immutable value
object and safe to share between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

ALPHABET = "ACDEFGHIKLMNPQRSTVWY"
ALPHABET_INDEX = {c: i for i, c in enumerate(ALPHABET)}

STRUCTURE_CLASSES = "HEC"


class SequenceError(ValueError):
    """Invalid protein sequence input."""


class EmptySequence(SequenceError):
    def __init__(self) -> None:
        super().__init__("sequence is empty")


class IllegalResidue(SequenceError):
    def __init__(self, position: int, char: str) -> None:
        self.position = position
        self.char = char
        super().__init__(f"illegal residue {char!r} at position {position}")


class LengthMismatch(ValueError):
    """Two per-residue strings/arrays do not have the same length."""


class UnknownTask(KeyError):
    """Task id not present in the graph / registry it was looked up in."""


@dataclass(frozen=True)
class ProteinSequence:
    """A validated amino-acid sequence over the strict 20-letter alphabet."""

    id: str
    residues: str

    def __post_init__(self) -> None:
        if not self.residues:
            raise EmptySequence()
        for i, c in enumerate(self.residues):
            if c not in ALPHABET_INDEX:
                raise IllegalResidue(i, c)

    def __len__(self) -> int:
        return len(self.residues)


@dataclass(frozen=True)
class StructureString:
    """Per-residue H/E/C labels."""

    labels: str

    def __post_init__(self) -> None:
        for i, c in enumerate(self.labels):
            if c not in STRUCTURE_CLASSES:
                raise ValueError(f"illegal structure label {c!r} at position {i}")

    def __len__(self) -> int:
        return len(self.labels)


def validate_sequence(raw: str, seq_id: str = "") -> ProteinSequence:
    """Strip whitespace, uppercase, and validate against the 20-letter alphabet.

    Ambiguous residues (B, J, O, U, X, Z) are rejected, not zero-filled.
    """
    cleaned = "".join(raw.split()).upper()
    if not cleaned:
        raise EmptySequence()
    return ProteinSequence(id=seq_id, residues=cleaned)


class TaskKind(Enum):
    """The nine task kinds of one prediction job, keyed by their DAG letter."""

    PROFILE = "A"
    CREATE_VECTOR = "B"
    CLASS_HH = "C"
    CLASS_SS = "D"
    CLASS_TT = "E"
    CLASS_HS = "F"
    CLASS_ST = "G"
    CLASS_TH = "H"
    FINAL_PREDICT = "I"

    @property
    def letter(self) -> str:
        return self.value

    @property
    def is_classifier(self) -> bool:
        return self in CLASSIFIER_KINDS

    @classmethod
    def from_letter(cls, letter: str) -> "TaskKind":
        return cls(letter)


CLASSIFIER_KINDS = (
    TaskKind.CLASS_HH,
    TaskKind.CLASS_SS,
    TaskKind.CLASS_TT,
    TaskKind.CLASS_HS,
    TaskKind.CLASS_ST,
    TaskKind.CLASS_TH,
)

# Binary problem solved by each classifier kind: (positive, negative) where a
# '~' prefix marks a one-vs-rest negative. HH/SS/TT are one-vs-rest for
# H, E and C; HS/ST/TH are the one-vs-one pairs H/E, E/C and C/H.
CLASSIFIER_CLASSES = {
    TaskKind.CLASS_HH: ("H", "~H"),
    TaskKind.CLASS_SS: ("E", "~E"),
    TaskKind.CLASS_TT: ("C", "~C"),
    TaskKind.CLASS_HS: ("H", "E"),
    TaskKind.CLASS_ST: ("E", "C"),
    TaskKind.CLASS_TH: ("C", "H"),
}

# Short names used for model files and log lines.
CLASSIFIER_NAMES = {
    TaskKind.CLASS_HH: "HH",
    TaskKind.CLASS_SS: "SS",
    TaskKind.CLASS_TT: "TT",
    TaskKind.CLASS_HS: "HS",
    TaskKind.CLASS_ST: "ST",
    TaskKind.CLASS_TH: "TH",
}


def task_id_for(job_id: str, kind: TaskKind) -> str:
    return f"{job_id}-{kind.letter}"


@dataclass(frozen=True)
class JobGraph:
    """The fixed 9-node, 13-edge prediction DAG of one job."""

    job_id: str
    nodes: tuple[tuple[str, TaskKind], ...]
    edges: tuple[tuple[str, str], ...]
    _kind_by_id: dict = field(repr=False, hash=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_kind_by_id", {tid: k for tid, k in self.nodes})

    def task_ids(self) -> tuple[str, ...]:
        return tuple(tid for tid, _ in self.nodes)

    def kind_of(self, task_id: str) -> TaskKind:
        try:
            return self._kind_by_id[task_id]
        except KeyError:
            raise UnknownTask(task_id) from None

    def predecessors(self, task_id: str) -> tuple[str, ...]:
        if task_id not in self._kind_by_id:
            raise UnknownTask(task_id)
        return tuple(src for src, dst in self.edges if dst == task_id)


def build_prediction_dag(seq: ProteinSequence, job_id: str) -> JobGraph:
    """Build the A -> B -> {C..H} -> I graph with deterministic task ids."""
    kinds = list(TaskKind)
    nodes = tuple((task_id_for(job_id, k), k) for k in kinds)
    a = task_id_for(job_id, TaskKind.PROFILE)
    b = task_id_for(job_id, TaskKind.CREATE_VECTOR)
    i = task_id_for(job_id, TaskKind.FINAL_PREDICT)
    edges = [(a, b)]
    for k in CLASSIFIER_KINDS:
        c = task_id_for(job_id, k)
        edges.append((b, c))
        edges.append((c, i))
    return JobGraph(job_id=job_id, nodes=nodes, edges=tuple(edges))


def ready_tasks(graph: JobGraph, completed: set[str]) -> set[str]:
    """Tasks whose predecessors are all completed and are not completed themselves."""
    known = set(graph.task_ids())
    for tid in completed:
        if tid not in known:
            raise UnknownTask(tid)
    ready = set()
    for tid in graph.task_ids():
        if tid in completed:
            continue
        if all(p in completed for p in graph.predecessors(tid)):
            ready.add(tid)
    return ready


def q3_score(predicted: StructureString, truth: StructureString) -> float:
    """Fraction of residues with identical 3-class labels."""
    if len(predicted) != len(truth):
        raise LengthMismatch(
            f"predicted length {len(predicted)} != truth length {len(truth)}"
        )
    same = sum(1 for a, b in zip(predicted.labels, truth.labels) if a == b)
    return same / len(predicted)


@dataclass(frozen=True)
class PredictionResult:
    """Final output of one job: structure plus a per-residue confidence."""

    job_id: str
    sequence: ProteinSequence
    structure: StructureString
    confidence: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.sequence) == len(self.structure) == len(self.confidence)):
            raise LengthMismatch(
                "sequence, structure and confidence must have equal lengths"
            )
        for v in self.confidence:
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"confidence {v} outside [0,1]")


def confidence_digits(confidence: tuple[float, ...] | list[float]) -> str:
    """Render confidences as one digit per residue: floor(conf*10) capped at 9."""
    return "".join(str(min(int(v * 10), 9)) for v in confidence)


def render_result(result: PredictionResult) -> str:
    """Three aligned text lines: sequence, structure, confidence digits."""
    return "\n".join(
        [result.sequence.residues, result.structure.labels,
         confidence_digits(result.confidence)]
    )


def parse_rendered_result(text: str) -> tuple[str, str, str]:
    """Split a rendered result back into (sequence, structure, digits) lines."""
    lines = text.strip("\n").split("\n")
    if len(lines) != 3 or not (len(lines[0]) == len(lines[1]) == len(lines[2])):
        raise ValueError("rendered result must be 3 aligned lines")
    StructureString(lines[1])
    if not lines[2].isdigit():
        raise ValueError("confidence line must be digits")
    return lines[0], lines[1], lines[2]


class FastaError(ValueError):
    """Malformed FASTA text."""


def parse_fasta(text: str) -> list[tuple[str, str]]:
    """Parse FASTA text into (header, raw_sequence) records.

    Records start at '>' lines; sequence may span multiple lines. The raw
    sequence is not validated here; callers pass it to validate_sequence.
    """
    records: list[tuple[str, str]] = []
    header: str | None = None
    chunks: list[str] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith(">"):
            if header is not None:
                records.append((header, "".join(chunks)))
            header = stripped[1:].strip()
            chunks = []
        else:
            if header is None:
                raise FastaError(f"line {lineno}: sequence data before any '>' header")
            chunks.append(stripped)
    if header is not None:
        records.append((header, "".join(chunks)))
    if not records:
        raise FastaError("no FASTA records found")
    return records
