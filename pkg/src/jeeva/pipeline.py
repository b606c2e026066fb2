"""Compute payload of the prediction DAG.

Stage A: per-residue profile (one-hot stub or an external PSSM command).
Stage B: sliding-window feature vectors from profile + property tables.
Stages C..H: six linear binary SVMs with Platt-scaled posteriors.
Stage I: additive posterior-mass combination into the final H/E/C call.

All operations are pure functions over immutable inputs; the six
classifier stages of one job may run concurrently on different nodes.
"""

from __future__ import annotations

import io
import json
import math
import os
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from .core import (
    ALPHABET,
    ALPHABET_INDEX,
    CLASSIFIER_CLASSES,
    CLASSIFIER_KINDS,
    LengthMismatch,
    PredictionResult,
    ProteinSequence,
    StructureString,
    TaskKind,
)

DEFAULT_WINDOW = 15

MODEL_MAGIC = "jeeva-svm v1"


class DimensionMismatch(ValueError):
    pass


class ModelKindMismatch(ValueError):
    pass


class MissingClassifier(ValueError):
    def __init__(self, kind: TaskKind) -> None:
        self.kind = kind
        super().__init__(f"missing classifier output for {kind.name}")


class ExternalBackendFailed(RuntimeError):
    def __init__(self, exit_code: int, stderr_excerpt: str) -> None:
        self.exit_code = exit_code
        self.stderr_excerpt = stderr_excerpt
        super().__init__(f"profile command exited {exit_code}: {stderr_excerpt}")


class PssmParseError(ValueError):
    def __init__(self, line_no: int, reason: str = "") -> None:
        self.line_no = line_no
        super().__init__(f"bad PSSM line {line_no}" + (f": {reason}" if reason else ""))


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Profile:
    """L x 20 per-residue scores, columns in alphabet order."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        r = np.asarray(self.rows, dtype=np.float64)
        object.__setattr__(self, "rows", r)
        if r.ndim != 2 or r.shape[1] != len(ALPHABET):
            raise DimensionMismatch(f"profile must be Lx20, got {r.shape}")
        if not np.all(np.isfinite(r)):
            raise ValueError("profile contains non-finite values")


@dataclass(frozen=True)
class PropertyTable:
    """Named per-letter properties: 20 rows (alphabet order) x k columns."""

    name: str
    columns: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", v)
        if v.shape != (len(ALPHABET), len(self.columns)):
            raise DimensionMismatch(
                f"table {self.name}: expected {(len(ALPHABET), len(self.columns))}, got {v.shape}"
            )
        if not np.all(np.isfinite(v)):
            raise ValueError(f"table {self.name} contains non-finite values")


@dataclass(frozen=True)
class FeatureMatrix:
    """L x D windowed features, D = window * (20 + total property columns)."""

    vectors: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "vectors", np.asarray(self.vectors, dtype=np.float64))


@dataclass(frozen=True)
class SvmModel:
    """Linear decision function plus Platt sigmoid parameters."""

    kind: TaskKind
    weights: np.ndarray
    bias: float
    platt_a: float
    platt_b: float
    positive_class: str
    negative_class: str

    def __post_init__(self) -> None:
        w = np.asarray(self.weights, dtype=np.float64)
        object.__setattr__(self, "weights", w)
        if w.ndim != 1:
            raise DimensionMismatch("weights must be a vector")
        if not (math.isfinite(self.platt_a) and math.isfinite(self.platt_b)):
            raise ValueError("platt parameters must be finite")


@dataclass(frozen=True)
class ClassifierOutput:
    """Per-residue posterior of the positive class, one classifier kind."""

    kind: TaskKind
    posteriors: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.posteriors, dtype=np.float64)
        object.__setattr__(self, "posteriors", p)
        if p.ndim != 1:
            raise DimensionMismatch("posteriors must be a vector")
        if np.any((p < 0.0) | (p > 1.0)):
            raise ValueError("posteriors outside [0,1]")


# ---------------------------------------------------------------------------
# Stage A: profiles


class OneHotBackend:
    """Deterministic stand-in for the evolutionary profile: one-hot rows."""

    name = "onehot"

    def profile_for(self, seq: ProteinSequence) -> Profile:
        rows = np.zeros((len(seq), len(ALPHABET)), dtype=np.float64)
        for i, c in enumerate(seq.residues):
            rows[i, ALPHABET_INDEX[c]] = 1.0
        return Profile(rows)


class ExternalCommandBackend:
    """Runs a pre-deployed command that writes a PSSM text file.

    The command is run in a scratch directory containing ``query.fasta`` and
    must write ``pssm.txt`` there. Stage A on the grid reaches the same
    command through a dependency-reference task instead.
    """

    name = "external"

    def __init__(self, argv: list[str], timeout_s: float = 300.0) -> None:
        self.argv = list(argv)
        self.timeout_s = timeout_s

    def profile_for(self, seq: ProteinSequence) -> Profile:
        with tempfile.TemporaryDirectory(prefix="jeeva-pssm-") as workdir:
            query = os.path.join(workdir, "query.fasta")
            with open(query, "w") as fh:
                fh.write(f">{seq.id or 'query'}\n{seq.residues}\n")
            proc = subprocess.run(
                self.argv,
                cwd=workdir,
                capture_output=True,
                text=True,
                timeout=self.timeout_s,
            )
            if proc.returncode != 0:
                raise ExternalBackendFailed(proc.returncode, proc.stderr[-500:])
            out = os.path.join(workdir, "pssm.txt")
            if not os.path.exists(out):
                raise ExternalBackendFailed(0, "command produced no pssm.txt")
            with open(out) as fh:
                return parse_pssm(fh.read(), expected=seq)


def parse_pssm(text: str, expected: ProteinSequence | None = None) -> Profile:
    """Parse a PSSM text file: header lines until a line starting with an
    integer, then one row per residue: index, residue letter, 20 integers."""
    rows: list[list[float]] = []
    letters: list[str] = []
    started = False
    last_line = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            if started:
                break
            continue
        if not started:
            try:
                int(tokens[0])
            except ValueError:
                continue
            started = True
        else:
            try:
                int(tokens[0])
            except ValueError:
                break
        if len(tokens) < 22:
            raise PssmParseError(line_no, "expected index, residue and 20 scores")
        try:
            scores = [float(int(t)) for t in tokens[2:22]]
        except ValueError:
            raise PssmParseError(line_no, "non-integer score") from None
        letters.append(tokens[1].upper())
        rows.append(scores)
        last_line = line_no
    if not rows:
        raise PssmParseError(0, "no score rows found")
    if expected is not None:
        if len(rows) != len(expected):
            raise PssmParseError(last_line, f"{len(rows)} rows for {len(expected)} residues")
        got = "".join(letters)
        if got != expected.residues:
            raise PssmParseError(last_line, "residue column does not match query")
    return Profile(np.array(rows, dtype=np.float64))


def generate_profile(seq: ProteinSequence, backend: OneHotBackend | ExternalCommandBackend) -> Profile:
    """Produce the L x 20 profile for a sequence via the chosen backend."""
    profile = backend.profile_for(seq)
    if profile.rows.shape[0] != len(seq):
        raise DimensionMismatch(
            f"profile has {profile.rows.shape[0]} rows for {len(seq)} residues"
        )
    return profile


# ---------------------------------------------------------------------------
# Stage B: feature vectors


def load_property_table(text: str, name: str = "properties") -> PropertyTable:
    """Parse a property table from TSV: header 'residue <col>...', 20 rows."""
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise ValueError("empty property table")
    header = lines[0].split()
    if header[0].lower() != "residue" or len(header) < 2:
        raise ValueError("property table header must be 'residue <name>...'")
    columns = tuple(header[1:])
    values = np.zeros((len(ALPHABET), len(columns)), dtype=np.float64)
    seen: set[str] = set()
    for ln in lines[1:]:
        tokens = ln.split()
        if len(tokens) != len(columns) + 1:
            raise ValueError(f"bad property row: {ln!r}")
        letter = tokens[0].upper()
        if letter not in ALPHABET_INDEX:
            raise ValueError(f"unknown residue {letter!r} in property table")
        values[ALPHABET_INDEX[letter]] = [float(t) for t in tokens[1:]]
        seen.add(letter)
    if seen != set(ALPHABET):
        missing = sorted(set(ALPHABET) - seen)
        raise ValueError(f"property table missing residues: {missing}")
    return PropertyTable(name=name, columns=columns, values=values)


def dump_property_table(table: PropertyTable) -> str:
    lines = ["residue\t" + "\t".join(table.columns)]
    for i, letter in enumerate(ALPHABET):
        lines.append(letter + "\t" + "\t".join(repr(float(v)) for v in table.values[i]))
    return "\n".join(lines) + "\n"


def feature_dim(window: int, tables: list[PropertyTable]) -> int:
    k_total = sum(len(t.columns) for t in tables)
    return window * (len(ALPHABET) + k_total)


def create_feature_vectors(
    profile: Profile,
    seq: ProteinSequence,
    tables: list[PropertyTable],
    window: int = DEFAULT_WINDOW,
) -> FeatureMatrix:
    """Windowed per-residue features.

    Row i concatenates, for each offset in [-(W-1)/2, +(W-1)/2], the profile
    row at i+offset followed by the property values of residue i+offset, in
    table-list order; offsets outside the sequence contribute zero blocks.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be odd and >= 1")
    if not tables:
        raise ValueError("at least one property table is required")
    length = len(seq)
    if profile.rows.shape[0] != length:
        raise DimensionMismatch(
            f"profile has {profile.rows.shape[0]} rows for {length} residues"
        )
    letter_idx = np.array([ALPHABET_INDEX[c] for c in seq.residues])
    blocks = [profile.rows] + [t.values[letter_idx] for t in tables]
    base = np.hstack(blocks)
    half = (window - 1) // 2
    width = base.shape[1]
    padded = np.zeros((length + 2 * half, width), dtype=np.float64)
    padded[half:half + length] = base
    idx = np.arange(length)[:, None] + np.arange(window)[None, :]
    return FeatureMatrix(padded[idx].reshape(length, window * width))


# ---------------------------------------------------------------------------
# Stages C..H: classifiers


def svm_decision(model: SvmModel, vector: np.ndarray) -> float:
    """Linear decision value: dot(weights, vector) + bias."""
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != model.weights.shape:
        raise DimensionMismatch(f"vector dim {v.shape} != weights dim {model.weights.shape}")
    return float(np.dot(model.weights, v) + model.bias)


def _stable_platt(z: np.ndarray) -> np.ndarray:
    # 1 / (1 + exp(z)) without overflow for large |z|
    out = np.empty_like(z)
    pos = z >= 0
    ez = np.exp(-z[pos])
    out[pos] = ez / (1.0 + ez)
    out[~pos] = 1.0 / (1.0 + np.exp(z[~pos]))
    return out


def platt_posterior(model: SvmModel, decision: float) -> float:
    """Posterior of the positive class: 1 / (1 + exp(a*decision + b))."""
    z = np.array([model.platt_a * decision + model.platt_b], dtype=np.float64)
    return float(_stable_platt(z)[0])


def run_classifier(kind: TaskKind, features: FeatureMatrix, model: SvmModel) -> ClassifierOutput:
    """Score every feature row and return Platt posteriors for the positive class."""
    if kind not in CLASSIFIER_KINDS:
        raise ModelKindMismatch(f"{kind.name} is not a classifier kind")
    if model.kind != kind:
        raise ModelKindMismatch(f"model is for {model.kind.name}, task is {kind.name}")
    x = features.vectors
    if x.shape[1] != model.weights.shape[0]:
        raise DimensionMismatch(
            f"feature dim {x.shape[1]} != weight dim {model.weights.shape[0]}"
        )
    decisions = x @ model.weights + model.bias
    posteriors = _stable_platt(model.platt_a * decisions + model.platt_b)
    return ClassifierOutput(kind=kind, posteriors=posteriors)


# ---------------------------------------------------------------------------
# Stage I: combination


def class_scores(posteriors: dict[TaskKind, float]) -> dict[str, float]:
    """Additive posterior-mass score for each class at one residue.

    Each one-vs-rest classifier contributes its posterior to its class; each
    one-vs-one classifier splits its mass p / (1-p) between its pair.
    """
    p_hh = posteriors[TaskKind.CLASS_HH]
    p_ss = posteriors[TaskKind.CLASS_SS]
    p_tt = posteriors[TaskKind.CLASS_TT]
    p_hs = posteriors[TaskKind.CLASS_HS]
    p_st = posteriors[TaskKind.CLASS_ST]
    p_th = posteriors[TaskKind.CLASS_TH]
    return {
        "H": p_hh + p_hs + (1.0 - p_th),
        "E": p_ss + (1.0 - p_hs) + p_st,
        "C": p_tt + (1.0 - p_st) + p_th,
    }


def combine_predictions(
    outputs: list[ClassifierOutput],
    seq: ProteinSequence,
    job_id: str = "",
) -> PredictionResult:
    """Fuse the six classifier outputs into per-residue labels + confidence.

    Ties break in the fixed order H > E > C; confidence is the winning score
    divided by the total score mass at that residue.
    """
    by_kind: dict[TaskKind, ClassifierOutput] = {}
    for out in outputs:
        if out.kind in by_kind:
            raise ValueError(f"duplicate classifier output for {out.kind.name}")
        by_kind[out.kind] = out
    for kind in CLASSIFIER_KINDS:
        if kind not in by_kind:
            raise MissingClassifier(kind)
    length = len(seq)
    for out in by_kind.values():
        if out.posteriors.shape[0] != length:
            raise LengthMismatch(
                f"{out.kind.name} output length {out.posteriors.shape[0]} != {length}"
            )
    p = {k: by_kind[k].posteriors for k in CLASSIFIER_KINDS}
    score_h = p[TaskKind.CLASS_HH] + p[TaskKind.CLASS_HS] + (1.0 - p[TaskKind.CLASS_TH])
    score_e = p[TaskKind.CLASS_SS] + (1.0 - p[TaskKind.CLASS_HS]) + p[TaskKind.CLASS_ST]
    score_c = p[TaskKind.CLASS_TT] + (1.0 - p[TaskKind.CLASS_ST]) + p[TaskKind.CLASS_TH]
    scores = np.stack([score_h, score_e, score_c])
    # argmax over rows ordered H, E, C: first max wins, which is the tie rule
    winners = np.argmax(scores, axis=0)
    total = scores.sum(axis=0)
    winning = scores[winners, np.arange(length)]
    labels = "".join("HEC"[w] for w in winners)
    confidence = tuple(float(v) for v in winning / total)
    return PredictionResult(
        job_id=job_id,
        sequence=seq,
        structure=StructureString(labels),
        confidence=confidence,
    )


def run_sequential(
    seq: ProteinSequence,
    models: dict[TaskKind, SvmModel],
    tables: list[PropertyTable],
    window: int = DEFAULT_WINDOW,
    backend: OneHotBackend | ExternalCommandBackend | None = None,
    job_id: str = "",
) -> PredictionResult:
    """Run all four pipeline stages in-process, in order.

    This is the reference the grid execution is checked against: both must
    produce byte-identical results for the same inputs and models.
    """
    backend = backend or OneHotBackend()
    profile = generate_profile(seq, backend)
    features = create_feature_vectors(profile, seq, tables, window)
    outputs = [run_classifier(kind, features, models[kind]) for kind in CLASSIFIER_KINDS]
    return combine_predictions(outputs, seq, job_id=job_id)


# ---------------------------------------------------------------------------
# Blob codecs (task inputs/outputs on the wire)


def array_to_blob(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.asarray(a, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def blob_to_array(data: bytes) -> np.ndarray:
    return np.load(io.BytesIO(data), allow_pickle=False)


def result_to_blob(result: PredictionResult) -> bytes:
    obj = {
        "job_id": result.job_id,
        "sequence_id": result.sequence.id,
        "residues": result.sequence.residues,
        "structure": result.structure.labels,
        "confidence": list(result.confidence),
    }
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def result_from_blob(data: bytes) -> PredictionResult:
    obj = json.loads(data.decode("utf-8"))
    return PredictionResult(
        job_id=obj["job_id"],
        sequence=ProteinSequence(id=obj["sequence_id"], residues=obj["residues"]),
        structure=StructureString(obj["structure"]),
        confidence=tuple(float(v) for v in obj["confidence"]),
    )


# ---------------------------------------------------------------------------
# Model files


def dump_model(model: SvmModel) -> str:
    """Serialize to the 7-line text model format."""
    pos, neg = model.positive_class, model.negative_class
    lines = [
        MODEL_MAGIC,
        f"kind {model.kind.letter}",
        f"dim {model.weights.shape[0]}",
        f"bias {float(model.bias)!r}",
        f"platt {float(model.platt_a)!r} {float(model.platt_b)!r}",
        f"classes {pos} {neg}",
        " ".join(repr(float(w)) for w in model.weights),
    ]
    return "\n".join(lines) + "\n"


def load_model(text: str) -> SvmModel:
    lines = text.splitlines()
    if len(lines) < 7:
        raise ModelFormatError("model file must have 7 lines")
    if lines[0].strip() != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic line {lines[0]!r}")

    def _field(line: str, key: str, n: int) -> list[str]:
        tokens = line.split()
        if not tokens or tokens[0] != key or len(tokens) != n + 1:
            raise ModelFormatError(f"expected '{key}' line, got {line!r}")
        return tokens[1:]

    letter = _field(lines[1], "kind", 1)[0]
    kind = TaskKind.from_letter(letter)
    if kind not in CLASSIFIER_KINDS:
        raise ModelFormatError(f"kind {letter} is not a classifier")
    dim = int(_field(lines[2], "dim", 1)[0])
    bias = float(_field(lines[3], "bias", 1)[0])
    a, b = (float(t) for t in _field(lines[4], "platt", 2))
    pos, neg = _field(lines[5], "classes", 2)
    expected = CLASSIFIER_CLASSES[kind]
    if (pos, neg) != expected:
        raise ModelFormatError(
            f"classes {pos}/{neg} do not match kind {kind.name} ({expected[0]}/{expected[1]})"
        )
    weights = np.array([float(t) for t in lines[6].split()], dtype=np.float64)
    if weights.shape[0] != dim:
        raise ModelFormatError(f"expected {dim} weights, found {weights.shape[0]}")
    return SvmModel(
        kind=kind, weights=weights, bias=bias, platt_a=a, platt_b=b,
        positive_class=pos, negative_class=neg,
    )


def load_model_file(path: str) -> SvmModel:
    with open(path) as fh:
        return load_model(fh.read())


def save_model_file(path: str, model: SvmModel) -> None:
    with open(path, "w") as fh:
        fh.write(dump_model(model))
