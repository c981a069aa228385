"""Response-log datasets, Q-matrices, splitting, and synthetic generation.

File formats are headerless CSV, UTF-8, LF or CRLF line endings, 0-based
indices: one ``student,exercise,score`` triple per line for logs, and one
0/1 row per exercise for the Q-matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

__all__ = [
    "QMatrix",
    "ResponseDataset",
    "SyntheticGroundTruth",
    "load_logs",
    "load_qmatrix",
    "split",
    "generate_synthetic",
    "generating_probabilities",
    "save_logs",
    "save_qmatrix",
]


class QMatrix:
    """Binary exercise-by-attribute relevance matrix.

    Every entry is 0 or 1 and every exercise row names at least one
    attribute; an exercise linked to nothing cannot be diagnosed.
    """

    def __init__(self, entries: np.ndarray | Sequence[Sequence[int]]):
        arr = np.asarray(entries)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DataError(f"Q-matrix must be 2-D and nonempty, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise DataError("Q-matrix entries must all be 0 or 1")
        zero_rows = np.flatnonzero(arr.sum(axis=1) == 0)
        if zero_rows.size:
            raise DataError(
                f"exercise rows {zero_rows.tolist()} have no attributes"
            )
        self.entries = arr.astype(np.int8)
        self.entries.setflags(write=False)

    @property
    def n_exercises(self) -> int:
        return self.entries.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.entries.shape[1]

    def __eq__(self, other) -> bool:
        return isinstance(other, QMatrix) and np.array_equal(self.entries, other.entries)

    def __repr__(self) -> str:
        return f"QMatrix({self.n_exercises}x{self.n_attributes})"


class ResponseDataset:
    """Triplet logs (student, exercise, binary score) plus the Q-matrix.

    At most one log per (student, exercise) pair. Split outputs may be
    empty (``allow_empty``); loaded datasets never are. Immutable once
    constructed and safe to share across readers.
    """

    def __init__(
        self,
        logs: Iterable[tuple[int, int, int]] | np.ndarray,
        n_students: int,
        qmatrix: QMatrix,
        allow_empty: bool = False,
    ):
        arr = np.asarray(list(logs) if not isinstance(logs, np.ndarray) else logs, dtype=np.int64)
        if arr.size == 0:
            arr = arr.reshape(0, 3)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise DataError(f"logs must be (n, 3) triples, got shape {arr.shape}")
        if n_students < 1:
            raise DataError(f"n_students must be >= 1, got {n_students}")
        if arr.shape[0] == 0 and not allow_empty:
            raise DataError("dataset has no logs")
        if arr.shape[0]:
            if arr[:, 0].min() < 0 or arr[:, 0].max() >= n_students:
                raise DataError("student index out of range")
            if arr[:, 1].min() < 0 or arr[:, 1].max() >= qmatrix.n_exercises:
                raise DataError("exercise index out of range")
            if not np.isin(arr[:, 2], (0, 1)).all():
                raise DataError("scores must be 0 or 1")
            pair_ids = arr[:, 0] * qmatrix.n_exercises + arr[:, 1]
            if np.unique(pair_ids).size != pair_ids.size:
                raise DataError("duplicate (student, exercise) pair in logs")
        self.students = arr[:, 0].copy()
        self.exercises = arr[:, 1].copy()
        self.scores = arr[:, 2].copy()
        for a in (self.students, self.exercises, self.scores):
            a.setflags(write=False)
        self.n_students = int(n_students)
        self.qmatrix = qmatrix

    @property
    def n_logs(self) -> int:
        return self.students.shape[0]

    @property
    def logs(self) -> list[tuple[int, int, int]]:
        return [
            (int(s), int(e), int(r))
            for s, e, r in zip(self.students, self.exercises, self.scores)
        ]

    def correct_rate(self) -> float:
        return float(self.scores.mean())

    def __repr__(self) -> str:
        return (
            f"ResponseDataset({self.n_logs} logs, {self.n_students} students, "
            f"{self.qmatrix.n_exercises} exercises, {self.qmatrix.n_attributes} attrs)"
        )


@dataclass(frozen=True)
class SyntheticGroundTruth:
    """Generator parameters behind a synthetic dataset, for recovery checks."""

    true_p: np.ndarray        # N x L in [0, 1]
    true_diff: np.ndarray     # M x L in [0, 1]
    true_disc: np.ndarray     # M positive scalars
    bayes_accuracy: float     # mean over logs of max(prob, 1 - prob)


def _read_lines(path: str | Path) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"file not found: {p}")
    text = p.read_text(encoding="utf-8")
    return text.replace("\r\n", "\n").split("\n")


def load_qmatrix(path: str | Path) -> QMatrix:
    """Load a headerless CSV of 0/1 rows, one exercise per line."""
    rows: list[list[int]] = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        row = []
        for c in cells:
            if c not in ("0", "1"):
                raise DataError(f"{path}:{lineno}: non-binary Q-matrix entry {c!r}")
            row.append(int(c))
        if rows and len(row) != len(rows[0]):
            raise DataError(
                f"{path}:{lineno}: ragged row has {len(row)} columns, expected {len(rows[0])}"
            )
        rows.append(row)
    if not rows:
        raise DataError(f"{path}: empty Q-matrix file")
    return QMatrix(np.asarray(rows))


def load_logs(path: str | Path, n_students: int, qmatrix: QMatrix) -> ResponseDataset:
    """Load ``student,exercise,score`` triples; indices are validated here
    with line numbers, then dataset invariants are enforced."""
    triples: list[tuple[int, int, int]] = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 comma-separated fields")
        try:
            s, e, r = (int(c.strip()) for c in cells)
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-integer field in {line!r}") from None
        if not 0 <= s < n_students:
            raise DataError(f"{path}:{lineno}: student index {s} out of range [0, {n_students})")
        if not 0 <= e < qmatrix.n_exercises:
            raise DataError(
                f"{path}:{lineno}: exercise index {e} out of range [0, {qmatrix.n_exercises})"
            )
        if r not in (0, 1):
            raise DataError(f"{path}:{lineno}: score {r} not in {{0, 1}}")
        triples.append((s, e, r))
    if not triples:
        raise DataError(f"{path}: no logs found")
    seen: dict[tuple[int, int], int] = {}
    for i, (s, e, _) in enumerate(triples):
        if (s, e) in seen:
            raise DataError(
                f"{path}: duplicate (student, exercise) pair ({s}, {e})"
            )
        seen[(s, e)] = i
    return ResponseDataset(triples, n_students, qmatrix)


def save_logs(ds: ResponseDataset, path: str | Path) -> None:
    lines = [f"{s},{e},{r}" for s, e, r in zip(ds.students, ds.exercises, ds.scores)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_qmatrix(q: QMatrix, path: str | Path) -> None:
    lines = [",".join(str(v) for v in row) for row in q.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def split(
    ds: ResponseDataset, test_fraction: float, seed: int
) -> tuple[ResponseDataset, ResponseDataset]:
    """Per-student stratified split.

    Each student's logs are shuffled with the seeded generator and
    floor(count * test_fraction) of them go to test, so every student in
    the input keeps at least one training log. Deterministic in the seed.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(ds.n_logs, dtype=bool)
    for student in np.unique(ds.students):
        idx = np.flatnonzero(ds.students == student)
        perm = rng.permutation(idx.size)
        n_test = int(np.floor(idx.size * test_fraction))
        test_mask[idx[perm[:n_test]]] = True

    def subset(mask: np.ndarray) -> ResponseDataset:
        triples = np.stack(
            [ds.students[mask], ds.exercises[mask], ds.scores[mask]], axis=1
        )
        return ResponseDataset(triples, ds.n_students, ds.qmatrix, allow_empty=True)

    return subset(~test_mask), subset(test_mask)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def generating_probabilities(
    truth: SyntheticGroundTruth,
    qmatrix: QMatrix,
    students: np.ndarray,
    exercises: np.ndarray,
) -> np.ndarray:
    """Correct-answer probability per (student, exercise) pair under the
    inner-product generator: sigmoid(disc_e * sum_k Q[e,k] (P[s,k] - diff[e,k]))."""
    students = np.asarray(students)
    exercises = np.asarray(exercises)
    q = qmatrix.entries[exercises].astype(float)
    gap = truth.true_p[students] - truth.true_diff[exercises]
    z = truth.true_disc[exercises] * np.einsum("bl,bl->b", q, gap)
    return _stable_sigmoid(z)


def generate_synthetic(
    n_students: int,
    n_exercises: int,
    n_attrs: int,
    density: float,
    seed: int,
    logs_per_student: int | None = None,
) -> tuple[ResponseDataset, SyntheticGroundTruth]:
    """Sample a dataset from known ground truth.

    Q rows include each attribute with probability ``density`` (resampled
    until nonzero). True proficiencies and difficulties are uniform on
    [0, 1]; discriminations uniform on [0.5, 2.5], which keeps generating
    probabilities away from saturation so recovery is testable. Each
    student answers all exercises unless ``logs_per_student`` caps it (at
    most one log per pair, so the cap tops out at ``n_exercises``).
    """
    if min(n_students, n_exercises, n_attrs) < 1:
        raise ValueError("all counts must be >= 1")
    if not 0.0 < density <= 1.0:
        raise ValueError(f"density must be in (0, 1], got {density}")
    rng = np.random.default_rng(seed)

    q_rows = np.zeros((n_exercises, n_attrs), dtype=np.int8)
    for j in range(n_exercises):
        row = (rng.random(n_attrs) < density).astype(np.int8)
        while not row.any():
            row = (rng.random(n_attrs) < density).astype(np.int8)
        q_rows[j] = row
    qmatrix = QMatrix(q_rows)

    truth_p = rng.random((n_students, n_attrs))
    truth_diff = rng.random((n_exercises, n_attrs))
    truth_disc = rng.uniform(0.5, 2.5, size=n_exercises)

    if logs_per_student is None:
        per_student = n_exercises
    else:
        per_student = min(int(logs_per_student), n_exercises)
        if per_student < 1:
            raise ValueError("logs_per_student must be >= 1")
    students = np.repeat(np.arange(n_students), per_student)
    if per_student == n_exercises:
        exercises = np.tile(np.arange(n_exercises), n_students)
    else:
        exercises = np.concatenate(
            [rng.permutation(n_exercises)[:per_student] for _ in range(n_students)]
        )

    truth = SyntheticGroundTruth(truth_p, truth_diff, truth_disc, bayes_accuracy=0.0)
    probs = generating_probabilities(truth, qmatrix, students, exercises)
    scores = (rng.random(probs.size) < probs).astype(np.int64)
    bayes = float(np.maximum(probs, 1.0 - probs).mean())
    truth = SyntheticGroundTruth(truth_p, truth_diff, truth_disc, bayes_accuracy=bayes)

    triples = np.stack([students, exercises, scores], axis=1)
    return ResponseDataset(triples, n_students, qmatrix), truth
