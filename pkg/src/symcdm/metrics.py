"""Generalization metrics (accuracy, AUC, F1) and the rank-concordance
interpretability metric DOA over diagnosed proficiencies.

Conventions, stated once and embedded in every report: probabilities of
exactly 0.5 predict class 1; AUC handles ties by midranks; DOA's pairwise
indicator is strict (ties count for neither side), exercises a pair did
not both answer contribute no evidence, and attributes without any usable
pair are excluded from the mean rather than scored 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ResponseDataset

__all__ = ["EvalReport", "accuracy", "auc", "f1", "doa", "evaluate_model"]

DOA_CONVENTIONS = {
    "threshold": "probability >= 0.5 predicts 1",
    "auc_ties": "midrank (tied pairs count half)",
    "doa_delta": "strict inequality; ties add to neither numerator nor Z",
    "doa_no_coanswer": "pairs with no co-answered covering exercise contribute 0",
    "doa_exclusion": "attributes with Z = 0 or zero co-answered evidence are excluded from the mean",
}


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of thresholded predictions equal to the labels."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    if probs.size == 0 or probs.shape != labels.shape:
        raise ValueError("probs and labels must be nonempty and equal-length")
    return float(np.mean((probs >= 0.5).astype(int) == labels))


def auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the rank-sum statistic with midranks:
    (concordant + 0.5 * tied) / (positives * negatives)."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    if probs.size == 0 or probs.shape != labels.shape:
        raise ValueError("probs and labels must be nonempty and equal-length")
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError(
            f"AUC needs both classes; got {n_pos} positives and {n_neg} negatives"
        )
    ranks = _midranks(probs)
    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean rank of their run."""
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]
    ranks = np.empty(values.size, dtype=float)
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def f1(probs: np.ndarray, labels: np.ndarray) -> float:
    """Harmonic mean of precision and recall for the positive class at
    threshold 0.5, with the 0-when-undefined convention."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    if probs.size == 0 or probs.shape != labels.shape:
        raise ValueError("probs and labels must be nonempty and equal-length")
    pred = (probs >= 0.5).astype(int)
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class DoaResult:
    mean: float
    per_attribute: np.ndarray       # NaN where excluded
    excluded_attributes: list[int]
    pair_count: int                 # ordered pairs examined per attribute
    mode: str                       # "exact" or "sampled(<n>)"


def doa(
    p_effective: np.ndarray,
    ds: ResponseDataset,
    mode: str = "exact",
    n_pairs: int = 1_000_000,
    seed: int = 0,
) -> DoaResult:
    """Degree of agreement between proficiency order and response superiority.

    Per attribute, over ordered student pairs (a, b) with P[a] > P[b]
    strictly, each pair scores (covering exercises both answered where a
    was right and b wrong) / (covering exercises both answered), and the
    scores are averaged over the Z qualifying pairs. ``mode="sampled"``
    draws ``n_pairs`` ordered pairs uniformly and applies the same formula
    on the sample; exact mode is O(N^2 M).
    """
    p_effective = np.asarray(p_effective, dtype=float)
    n_students, n_attrs = p_effective.shape
    if n_students != ds.n_students or n_attrs != ds.qmatrix.n_attributes:
        raise ValueError(
            f"P is {p_effective.shape} but dataset has {ds.n_students} students "
            f"and {ds.qmatrix.n_attributes} attributes"
        )
    if mode not in ("exact", "sampled"):
        raise ValueError(f"mode must be 'exact' or 'sampled', got {mode!r}")

    answered = np.zeros((n_students, ds.qmatrix.n_exercises), dtype=float)
    right = np.zeros_like(answered)
    answered[ds.students, ds.exercises] = 1.0
    right[ds.students, ds.exercises] = ds.scores

    if mode == "sampled":
        rng = np.random.default_rng(seed)
        a_idx = rng.integers(n_students, size=n_pairs)
        b_idx = rng.integers(n_students, size=n_pairs)
        pair_count = n_pairs
    else:
        a_idx = b_idx = None
        pair_count = n_students * n_students

    per_attr = np.full(n_attrs, np.nan)
    excluded: list[int] = []
    for k in range(n_attrs):
        covering = np.flatnonzero(ds.qmatrix.entries[:, k] == 1)
        ans_k = answered[:, covering]
        right_k = right[:, covering]
        wrong_k = ans_k - right_k
        if mode == "exact":
            # co[a, b] = co-answered covering exercises; conc[a, b] = those
            # where a was right and b wrong.
            co = ans_k @ ans_k.T
            conc = right_k @ wrong_k.T
            delta = p_effective[:, k][:, None] > p_effective[:, k][None, :]
        else:
            co = np.einsum("pj,pj->p", ans_k[a_idx], ans_k[b_idx])
            conc = np.einsum("pj,pj->p", right_k[a_idx], wrong_k[b_idx])
            delta = p_effective[a_idx, k] > p_effective[b_idx, k]
        z = int(delta.sum())
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.where(co > 0, conc / np.where(co > 0, co, 1.0), 0.0)
        evidence = float((delta * (co > 0)).sum())
        if z == 0 or evidence == 0:
            excluded.append(k)
            continue
        per_attr[k] = float((delta * ratio).sum() / z)

    usable = ~np.isnan(per_attr)
    if not usable.any():
        raise ValueError("DOA undefined: every attribute lacks usable pairs")
    mode_label = "exact" if mode == "exact" else f"sampled({n_pairs})"
    return DoaResult(
        mean=float(per_attr[usable].mean()),
        per_attribute=per_attr,
        excluded_attributes=excluded,
        pair_count=pair_count,
        mode=mode_label,
    )


@dataclass
class EvalReport:
    """Metric bundle for one model on one dataset; ``auc`` is None when the
    labels are single-class (reported as unavailable, not NaN)."""

    accuracy: float
    auc: float | None
    f1: float
    doa: float
    per_attribute_doa: list[float]
    excluded_attributes: list[int]
    n_logs: int
    doa_pair_count: int
    doa_mode: str
    conventions: dict[str, str] = field(default_factory=lambda: dict(DOA_CONVENTIONS))

    def to_json(self) -> str:
        payload = dict(self.__dict__)
        payload["per_attribute_doa"] = [
            None if np.isnan(v) else float(v) for v in self.per_attribute_doa
        ]
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def summary(self) -> str:
        auc_part = "unavailable (single-class labels)" if self.auc is None else f"{self.auc:.4f}"
        lines = [
            f"logs       {self.n_logs}",
            f"accuracy   {self.accuracy:.4f}",
            f"auc        {auc_part}",
            f"f1         {self.f1:.4f}",
            f"doa        {self.doa:.4f}  [{self.doa_mode}]",
        ]
        if self.excluded_attributes:
            lines.append(f"doa excluded attributes: {self.excluded_attributes}")
        return "\n".join(lines)


def evaluate_model(
    probs: np.ndarray,
    ds: ResponseDataset,
    p_effective: np.ndarray,
    doa_mode: str = "exact",
    doa_pairs: int = 1_000_000,
    doa_seed: int = 0,
) -> EvalReport:
    """Assemble the full report from per-log probabilities on ``ds``."""
    labels = ds.scores
    try:
        auc_value: float | None = auc(probs, labels)
    except ValueError:
        auc_value = None
    doa_result = doa(p_effective, ds, mode=doa_mode, n_pairs=doa_pairs, seed=doa_seed)
    return EvalReport(
        accuracy=accuracy(probs, labels),
        auc=auc_value,
        f1=f1(probs, labels),
        doa=doa_result.mean,
        per_attribute_doa=list(doa_result.per_attribute),
        excluded_attributes=doa_result.excluded_attributes,
        n_logs=ds.n_logs,
        doa_pair_count=doa_result.pair_count,
        doa_mode=doa_result.mode,
    )
