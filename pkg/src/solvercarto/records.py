"""CSV records: primitive scorecards (resumable) and generic row tables."""

from __future__ import annotations

import csv
import os

import numpy as np

from .diagnostics import DIAGNOSTIC_NAMES
from .primitives import DEFAULT_LIBRARY, Primitive, PrimitiveScorecard


def num(v) -> str:
    """Shortest round-trip text for a real; ``None`` and NaN become empty cells."""
    if v is None:
        return ""
    v = float(v)
    return "" if np.isnan(v) else repr(v)


def score_header(library=DEFAULT_LIBRARY) -> list[str]:
    cols = ["game_id"]
    for kind in library:
        cols += [f"auc_{kind.label}", f"terminal_{kind.label}"]
    return cols + ["oracle_kind", "margin", *DIAGNOSTIC_NAMES]


def score_row(card: PrimitiveScorecard, diag) -> list[str]:
    row = [card.game_id]
    for a, t in zip(card.auc, card.terminal):
        row += [num(a), num(t)]
    return row + [card.oracle_kind.label, num(card.margin), *[num(d) for d in diag]]


def _complete_prefix(path) -> int:
    """Byte length of the file up to its last newline (drops a torn final line)."""
    with open(path, "rb") as fh:
        data = fh.read()
    cut = data.rfind(b"\n")
    return cut + 1


def open_score_csv(path, library=DEFAULT_LIBRARY):
    """Open ``path`` for appending; returns ``(file, writer, ids already scored)``."""
    header = score_header(library)
    done: set[str] = set()
    if os.path.exists(path) and os.path.getsize(path) > 0:
        keep = _complete_prefix(path)
        with open(path, "r+b") as fh:
            fh.truncate(keep)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            first = next(reader, None)
            if first is not None and first != header:
                raise ValueError(f"{path}: existing scorecard header does not match this library")
            for row in reader:
                done.add(row[0])
        fh = open(path, "a", newline="")
        w = csv.writer(fh, lineterminator="\n")
        if first is None:
            w.writerow(header)
    else:
        fh = open(path, "w", newline="")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
    return fh, w, done


def read_scores(path, library=DEFAULT_LIBRARY) -> list[PrimitiveScorecard]:
    cards = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, 2):
            try:
                auc = np.array([float(row[f"auc_{k.label}"]) for k in library])
                term = np.array([float(row[f"terminal_{k.label}"]) for k in library])
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed scorecard row ({exc})") from exc
            cards.append(PrimitiveScorecard(row["game_id"], tuple(library), auc, term))
    return cards


def library_from_labels(labels) -> tuple:
    return tuple(Primitive.from_label(s) for s in labels)


def write_rows(path, rows: list[dict], columns: list[str] | None = None) -> None:
    """Write dict rows as CSV; reals use round-trip text."""
    columns = list(rows[0].keys()) if columns is None and rows else (columns or [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([num(r.get(c)) if isinstance(r.get(c), (float, np.floating)) or r.get(c) is None
                        else r.get(c) for c in columns])
