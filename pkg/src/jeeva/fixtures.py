"""Synthetic fixtures: property tables and toy classifier models.

The shipped property table and model weights are synthetic, generated by
the functions below. The separable models key on the center residue of
each window and predict a fixed letter-to-class assignment exactly, which
makes them useful as an end-to-end correctness probe.
"""

from __future__ import annotations

import os

import numpy as np

from .core import (
    ALPHABET,
    ALPHABET_INDEX,
    CLASSIFIER_CLASSES,
    CLASSIFIER_KINDS,
    CLASSIFIER_NAMES,
    TaskKind,
)
from .pipeline import (
    DEFAULT_WINDOW,
    PropertyTable,
    SvmModel,
    dump_property_table,
    feature_dim,
    load_model_file,
    load_property_table,
    save_model_file,
)

PROPERTY_FILE = "properties.tsv"


def synthetic_property_table(name: str = "synthetic") -> PropertyTable:
    """A 3-column table of made-up but deterministic per-letter values."""
    columns = ("p1", "p2", "p3")
    values = np.zeros((len(ALPHABET), len(columns)))
    for i in range(len(ALPHABET)):
        values[i, 0] = round(((i * 7) % 19) / 10.0 - 0.9, 3)
        values[i, 1] = round(((i * 3 + 5) % 13) / 12.0, 3)
        values[i, 2] = round((i % 5) * 0.25 - 0.5, 3)
    return PropertyTable(name=name, columns=columns, values=values)


def letter_class_map() -> dict[str, str]:
    """Fixed assignment of each residue letter to H, E or C."""
    return {c: "HEC"[i % 3] for i, c in enumerate(ALPHABET)}


def true_structure(residues: str) -> str:
    cmap = letter_class_map()
    return "".join(cmap[c] for c in residues)


def separable_models(
    window: int = DEFAULT_WINDOW,
    tables: list[PropertyTable] | None = None,
) -> dict[TaskKind, SvmModel]:
    """Models that classify the center residue's assigned class exactly.

    Weights are nonzero only on the one-hot profile block of the window
    center, so with the one-hot profile backend the decision value is +1,
    -1 or 0 depending on the center letter's class.
    """
    tables = tables if tables is not None else [synthetic_property_table()]
    dim = feature_dim(window, tables)
    block = dim // window
    center_off = ((window - 1) // 2) * block
    cmap = letter_class_map()
    models: dict[TaskKind, SvmModel] = {}
    for kind in CLASSIFIER_KINDS:
        pos, neg = CLASSIFIER_CLASSES[kind]
        weights = np.zeros(dim)
        for letter, j in ALPHABET_INDEX.items():
            cls = cmap[letter]
            if neg.startswith("~"):
                weights[center_off + j] = 1.0 if cls == pos else -1.0
            else:
                if cls == pos:
                    weights[center_off + j] = 1.0
                elif cls == neg:
                    weights[center_off + j] = -1.0
        models[kind] = SvmModel(
            kind=kind, weights=weights, bias=0.0, platt_a=-4.0, platt_b=0.0,
            positive_class=pos, negative_class=neg,
        )
    return models


def random_models(
    window: int = DEFAULT_WINDOW,
    tables: list[PropertyTable] | None = None,
    seed: int = 7,
) -> dict[TaskKind, SvmModel]:
    """Seeded random-weight models; useful when only determinism matters."""
    tables = tables if tables is not None else [synthetic_property_table()]
    dim = feature_dim(window, tables)
    rng = np.random.default_rng(seed)
    models: dict[TaskKind, SvmModel] = {}
    for kind in CLASSIFIER_KINDS:
        pos, neg = CLASSIFIER_CLASSES[kind]
        models[kind] = SvmModel(
            kind=kind,
            weights=rng.normal(0.0, 0.2, size=dim),
            bias=float(rng.normal(0.0, 0.1)),
            platt_a=float(-1.0 - rng.random()),
            platt_b=float(rng.normal(0.0, 0.2)),
            positive_class=pos,
            negative_class=neg,
        )
    return models


def model_file_name(kind: TaskKind) -> str:
    return f"{CLASSIFIER_NAMES[kind]}.model"


def write_model_dir(
    directory: str,
    models: dict[TaskKind, SvmModel],
    tables: list[PropertyTable],
) -> None:
    """Write <NAME>.model files and the property table into a directory."""
    os.makedirs(directory, exist_ok=True)
    for kind, model in models.items():
        save_model_file(os.path.join(directory, model_file_name(kind)), model)
    with open(os.path.join(directory, PROPERTY_FILE), "w") as fh:
        for t in tables:
            fh.write(dump_property_table(t))


def load_model_dir(directory: str) -> tuple[dict[TaskKind, SvmModel], list[PropertyTable]]:
    models = {
        kind: load_model_file(os.path.join(directory, model_file_name(kind)))
        for kind in CLASSIFIER_KINDS
    }
    with open(os.path.join(directory, PROPERTY_FILE)) as fh:
        tables = [load_property_table(fh.read())]
    return models, tables


def default_model_dir() -> str:
    """Fixture models shipped with the package."""
    return os.path.join(os.path.dirname(__file__), "data")
