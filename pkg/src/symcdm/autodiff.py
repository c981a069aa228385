"""Gradient-based learning of student and exercise parameters.

Trainable parameters live in raw (unconstrained) form; effective values
are sigmoid(raw) for proficiency and difficulty and sigmoid(raw) *
disc_scale for discrimination, so box constraints hold after any number
of optimizer steps without clipping. Gradients of the summed cross-entropy
loss are exact reverse-mode derivatives propagated through the expression
tree and the reparameterization.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import QMatrix, ResponseDataset
from .errors import DataError
from .exprtree import (
    ExprNode,
    ExprTree,
    Op,
    TerminalKind,
    TerminalNode,
    evaluate_batch,
    _sigmoid,
)

__all__ = [
    "ModelParams",
    "AdamState",
    "PoConfig",
    "init_params",
    "predict",
    "loss_and_grads",
    "adam_step",
    "fit_params",
    "monotonicity_audit",
    "save_params",
    "load_params",
    "PROB_CLAMP",
]

# Predicted probabilities are clamped to [PROB_CLAMP, 1 - PROB_CLAMP]
# before any log, so the loss stays finite even for saturated trees.
PROB_CLAMP = 1e-7

DEFAULT_DISC_SCALE = 10.0


@dataclass
class ModelParams:
    """Raw student/exercise parameters for N students, M exercises, L attributes."""

    raw_p: np.ndarray      # N x L
    raw_diff: np.ndarray   # M x L
    raw_disc: np.ndarray   # M
    disc_scale: float = DEFAULT_DISC_SCALE

    def __post_init__(self):
        if self.raw_p.ndim != 2 or self.raw_diff.ndim != 2 or self.raw_disc.ndim != 1:
            raise ValueError("raw_p and raw_diff must be 2-D, raw_disc 1-D")
        if self.raw_p.shape[1] != self.raw_diff.shape[1]:
            raise ValueError("raw_p and raw_diff disagree on attribute count")
        if self.raw_diff.shape[0] != self.raw_disc.shape[0]:
            raise ValueError("raw_diff and raw_disc disagree on exercise count")

    @property
    def n_students(self) -> int:
        return self.raw_p.shape[0]

    @property
    def n_exercises(self) -> int:
        return self.raw_diff.shape[0]

    @property
    def n_attributes(self) -> int:
        return self.raw_p.shape[1]

    @property
    def p_effective(self) -> np.ndarray:
        """Proficiency matrix in (0, 1)."""
        return _sigmoid(self.raw_p)

    @property
    def diff_effective(self) -> np.ndarray:
        """Difficulty matrix in (0, 1)."""
        return _sigmoid(self.raw_diff)

    @property
    def disc_effective(self) -> np.ndarray:
        """Discrimination vector in (0, disc_scale)."""
        return _sigmoid(self.raw_disc) * self.disc_scale

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.raw_p.copy(), self.raw_diff.copy(), self.raw_disc.copy(), self.disc_scale
        )


@dataclass
class Grads:
    """Gradients with the same shapes as the raw parameters."""

    raw_p: np.ndarray
    raw_diff: np.ndarray
    raw_disc: np.ndarray


@dataclass
class AdamState:
    """First/second-moment accumulators plus the step counter."""

    m_p: np.ndarray
    v_p: np.ndarray
    m_diff: np.ndarray
    v_diff: np.ndarray
    m_disc: np.ndarray
    v_disc: np.ndarray
    step: int = 0
    learning_rate: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams, learning_rate: float = 0.002) -> "AdamState":
        return cls(
            m_p=np.zeros_like(params.raw_p),
            v_p=np.zeros_like(params.raw_p),
            m_diff=np.zeros_like(params.raw_diff),
            v_diff=np.zeros_like(params.raw_diff),
            m_disc=np.zeros_like(params.raw_disc),
            v_disc=np.zeros_like(params.raw_disc),
            learning_rate=learning_rate,
        )


@dataclass
class PoConfig:
    """Continuous-optimization settings for one parameter-fitting phase."""

    learning_rate: float = 0.002
    batch_size: int = 256
    inner_epochs: int = 5
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.inner_epochs < 1:
            raise ValueError("learning_rate, batch_size, inner_epochs must be positive")


def init_params(
    n: int, m: int, l: int, seed: int, disc_scale: float = DEFAULT_DISC_SCALE
) -> ModelParams:
    """Xavier-normal raw parameters: each tensor is drawn from a zero-mean
    normal with std sqrt(2 / (fan_in + fan_out)) taken from its own dims
    (the disc vector is treated as M x 1)."""
    if min(n, m, l) < 1:
        raise ValueError("all dims must be >= 1")
    rng = np.random.default_rng(seed)
    return _init_params_rng(n, m, l, rng, disc_scale)


def _init_params_rng(
    n: int, m: int, l: int, rng: np.random.Generator, disc_scale: float = DEFAULT_DISC_SCALE
) -> ModelParams:
    raw_p = rng.normal(0.0, np.sqrt(2.0 / (n + l)), size=(n, l))
    raw_diff = rng.normal(0.0, np.sqrt(2.0 / (m + l)), size=(m, l))
    raw_disc = rng.normal(0.0, np.sqrt(2.0 / (m + 1)), size=m)
    return ModelParams(raw_p, raw_diff, raw_disc, disc_scale)


def _gather_bindings(
    params: ModelParams, q: QMatrix, students: np.ndarray, exercises: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    p = params.p_effective[students]
    rele = q.entries[exercises].astype(float)
    diff = params.diff_effective[exercises]
    disc = params.disc_effective[exercises]
    return p, rele, diff, disc


def _check_pairs(
    params: ModelParams, q: QMatrix, students: np.ndarray, exercises: np.ndarray
) -> None:
    if students.size and (students.min() < 0 or students.max() >= params.n_students):
        raise IndexError("student index out of range")
    if exercises.size and (exercises.min() < 0 or exercises.max() >= q.n_exercises):
        raise IndexError("exercise index out of range")
    if params.n_exercises != q.n_exercises or params.n_attributes != q.n_attributes:
        raise DataError(
            f"params shaped for {params.n_exercises}x{params.n_attributes} "
            f"exercises/attributes but Q-matrix is {q.n_exercises}x{q.n_attributes}"
        )


@dataclass
class _Trace:
    """One forward-pass node record: value plus child traces, kept so the
    backward sweep revisits exactly the same intermediate arrays."""

    node: ExprNode
    value: np.ndarray
    children: tuple["_Trace", ...]


def _forward_trace(
    node: ExprNode, lookup: dict[TerminalKind, np.ndarray]
) -> _Trace:
    if isinstance(node, TerminalNode):
        return _Trace(node, lookup[node.which], ())
    kids = tuple(_forward_trace(c, lookup) for c in node.children)
    vals = [k.value for k in kids]
    if node.op is Op.TANH:
        value = np.tanh(vals[0])
    elif node.op is Op.SIGMOID:
        value = _sigmoid(vals[0])
    elif node.op is Op.INNER:
        value = np.einsum("bl,bl->b", vals[0], vals[1])
    else:
        a, b = vals
        if a.ndim != b.ndim:
            a = a[:, None] if a.ndim == 1 else a
            b = b[:, None] if b.ndim == 1 else b
        if node.op is Op.ADD:
            value = a + b
        elif node.op is Op.SUB:
            value = a - b
        else:
            value = a * b
    return _Trace(node, value, kids)


def _unbroadcast(grad: np.ndarray, like: np.ndarray) -> np.ndarray:
    # A scalar child broadcast against a vector sibling collects the sum
    # of adjoints over the attribute axis.
    if grad.ndim == 2 and like.ndim == 1:
        return grad.sum(axis=1)
    return grad


def _backward(trace: _Trace, adjoint: np.ndarray, sinks: dict[TerminalKind, np.ndarray]) -> None:
    node = trace.node
    if isinstance(node, TerminalNode):
        if node.which in sinks:
            sinks[node.which] += adjoint
        return
    kids = trace.children
    if node.op is Op.TANH:
        _backward(kids[0], adjoint * (1.0 - trace.value**2), sinks)
    elif node.op is Op.SIGMOID:
        _backward(kids[0], adjoint * trace.value * (1.0 - trace.value), sinks)
    elif node.op is Op.INNER:
        a, b = kids[0].value, kids[1].value
        _backward(kids[0], adjoint[:, None] * b, sinks)
        _backward(kids[1], adjoint[:, None] * a, sinks)
    elif node.op is Op.ADD:
        _backward(kids[0], _unbroadcast(adjoint, kids[0].value), sinks)
        _backward(kids[1], _unbroadcast(adjoint, kids[1].value), sinks)
    elif node.op is Op.SUB:
        _backward(kids[0], _unbroadcast(adjoint, kids[0].value), sinks)
        _backward(kids[1], _unbroadcast(-adjoint, kids[1].value), sinks)
    else:  # MUL
        a, b = kids[0].value, kids[1].value
        a2 = a[:, None] if (a.ndim == 1 and b.ndim == 2) else a
        b2 = b[:, None] if (b.ndim == 1 and a.ndim == 2) else b
        _backward(kids[0], _unbroadcast(adjoint * b2, a), sinks)
        _backward(kids[1], _unbroadcast(adjoint * a2, b), sinks)


def _forward_scores(
    tree: ExprTree,
    params: ModelParams,
    q: QMatrix,
    students: np.ndarray,
    exercises: np.ndarray,
) -> tuple[_Trace, np.ndarray]:
    p, rele, diff, disc = _gather_bindings(params, q, students, exercises)
    lookup = {
        TerminalKind.PROFICIENCY: p,
        TerminalKind.RELEVANCE: rele,
        TerminalKind.DIFFICULTY: diff,
        TerminalKind.DISCRIMINATION: disc,
    }
    with np.errstate(over="ignore", invalid="ignore"):
        trace = _forward_trace(tree.root, lookup)
    z = trace.value
    # A tree can only overflow to non-finite scores through degenerate
    # operator stacking; such scores are treated as saturated coin flips.
    z = np.where(np.isfinite(z), z, 0.0)
    return trace, z


def predict(
    tree: ExprTree,
    params: ModelParams,
    pairs,
    q: QMatrix,
) -> np.ndarray:
    """Correct-answer probabilities sigmoid(tree(...)) for (student,
    exercise) pairs; strictly inside (0, 1) via the probability clamp."""
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    students, exercises = arr[:, 0], arr[:, 1]
    _check_pairs(params, q, students, exercises)
    _, z = _forward_scores(tree, params, q, students, exercises)
    return np.clip(_sigmoid(z), PROB_CLAMP, 1.0 - PROB_CLAMP)


def predict_dataset(tree: ExprTree, params: ModelParams, ds: ResponseDataset) -> np.ndarray:
    """predict() over every log in a dataset, in log order."""
    _check_pairs(params, ds.qmatrix, ds.students, ds.exercises)
    _, z = _forward_scores(tree, params, ds.qmatrix, ds.students, ds.exercises)
    return np.clip(_sigmoid(z), PROB_CLAMP, 1.0 - PROB_CLAMP)


def loss_value(tree: ExprTree, params: ModelParams, ds: ResponseDataset) -> float:
    """Summed cross-entropy over a dataset, forward pass only."""
    p, rele, diff, disc = _gather_bindings(params, ds.qmatrix, ds.students, ds.exercises)
    with np.errstate(over="ignore", invalid="ignore"):
        z = evaluate_batch(tree, p, rele, diff, disc)
    z = np.where(np.isfinite(z), z, 0.0)
    y = np.clip(_sigmoid(z), PROB_CLAMP, 1.0 - PROB_CLAMP)
    r = ds.scores.astype(float)
    return float(-np.sum(r * np.log(y) + (1.0 - r) * np.log(1.0 - y)))


def loss_and_grads(
    tree: ExprTree,
    params: ModelParams,
    batch: ResponseDataset | np.ndarray,
    q: QMatrix | None = None,
) -> tuple[float, Grads]:
    """Summed cross-entropy over the batch and its exact raw-parameter
    gradients.

    The batch is either a ResponseDataset or an (n, 3) array of triples
    (then ``q`` is required). Parameters of students and exercises absent
    from the batch get exactly zero gradient. Probabilities are clamped
    before the log; inside the clamped region the gradient through the
    clamp is zero, matching the piecewise-constant loss there.
    """
    if isinstance(batch, ResponseDataset):
        students, exercises, scores = batch.students, batch.exercises, batch.scores
        q = batch.qmatrix
    else:
        arr = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
        if q is None:
            raise ValueError("q is required when batch is a raw array")
        students, exercises, scores = arr[:, 0], arr[:, 1], arr[:, 2]
    if students.size == 0:
        raise ValueError("batch must be nonempty")
    _check_pairs(params, q, students, exercises)

    trace, z = _forward_scores(tree, params, q, students, exercises)
    y = _sigmoid(z)
    y_clamped = np.clip(y, PROB_CLAMP, 1.0 - PROB_CLAMP)
    r = scores.astype(float)
    loss = float(-np.sum(r * np.log(y_clamped) + (1.0 - r) * np.log(1.0 - y_clamped)))

    inside = (y > PROB_CLAMP) & (y < 1.0 - PROB_CLAMP) & np.isfinite(trace.value)
    # d(loss)/d(score) collapses to y - r wherever the clamp is inactive.
    dz = np.where(inside, y - r, 0.0)

    n_batch = students.size
    sinks = {
        TerminalKind.PROFICIENCY: np.zeros((n_batch, params.n_attributes)),
        TerminalKind.DIFFICULTY: np.zeros((n_batch, params.n_attributes)),
        TerminalKind.DISCRIMINATION: np.zeros(n_batch),
    }
    with np.errstate(over="ignore", invalid="ignore"):
        _backward(trace, dz, sinks)

    p_eff = params.p_effective[students]
    diff_eff = params.diff_effective[exercises]
    disc_sig = _sigmoid(params.raw_disc)[exercises]

    per_log_p = sinks[TerminalKind.PROFICIENCY] * p_eff * (1.0 - p_eff)
    per_log_diff = sinks[TerminalKind.DIFFICULTY] * diff_eff * (1.0 - diff_eff)
    per_log_disc = (
        sinks[TerminalKind.DISCRIMINATION] * params.disc_scale * disc_sig * (1.0 - disc_sig)
    )

    g_p = np.zeros_like(params.raw_p)
    g_diff = np.zeros_like(params.raw_diff)
    g_disc = np.zeros_like(params.raw_disc)
    np.add.at(g_p, students, per_log_p)
    np.add.at(g_diff, exercises, per_log_diff)
    np.add.at(g_disc, exercises, per_log_disc)

    # Non-finite adjoints can only arise from overflowed intermediate
    # values whose true saturated derivative is zero.
    for g in (g_p, g_diff, g_disc):
        np.copyto(g, 0.0, where=~np.isfinite(g))

    return loss, Grads(g_p, g_diff, g_disc)


def adam_step(state: AdamState, params: ModelParams, grads: Grads) -> tuple[ModelParams, AdamState]:
    """Standard bias-corrected Adam update, applied in place to the raw
    parameters; returns the same objects for chaining."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    lr, eps = state.learning_rate, state.eps
    for m, v, g, raw in (
        (state.m_p, state.v_p, grads.raw_p, params.raw_p),
        (state.m_diff, state.v_diff, grads.raw_diff, params.raw_diff),
        (state.m_disc, state.v_disc, grads.raw_disc, params.raw_disc),
    ):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g**2
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        raw -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def fit_params(
    tree: ExprTree,
    params: ModelParams,
    train: ResponseDataset,
    cfg: PoConfig,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """Mini-batch Adam over the training logs with a fresh optimizer state.

    Runs cfg.inner_epochs shuffled passes; the input params are left
    untouched and an updated copy is returned. Deterministic for a fixed
    generator (or cfg.shuffle_seed when none is given).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.shuffle_seed)
    params = params.copy()
    state = AdamState.for_params(params, learning_rate=cfg.learning_rate)
    triples = np.stack([train.students, train.exercises, train.scores], axis=1)
    for _ in range(cfg.inner_epochs):
        order = rng.permutation(train.n_logs)
        for start in range(0, train.n_logs, cfg.batch_size):
            batch = triples[order[start : start + cfg.batch_size]]
            _, grads = loss_and_grads(tree, params, batch, train.qmatrix)
            adam_step(state, params, grads)
    return params


@dataclass(frozen=True)
class MonotonicityReport:
    violation_rate: float
    n_probes: int
    n_violations: int


def monotonicity_audit(
    tree: ExprTree,
    params: ModelParams,
    q: QMatrix,
    n_probes: int,
    step: float,
    seed: int = 0,
) -> MonotonicityReport:
    """Numeric probe of the education monotonicity assumption.

    For random (student, exercise, covered-attribute) triples, bump the
    effective proficiency entry by ``step`` (clipped to 1) and flag a
    violation when the predicted probability drops by more than 1e-9.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    covered_counts = q.entries.sum(axis=1)
    usable = np.flatnonzero(covered_counts > 0)  # all, given QMatrix invariants
    students = rng.integers(params.n_students, size=n_probes)
    exercises = usable[rng.integers(usable.size, size=n_probes)]
    # Pick a covered attribute uniformly per probe.
    ranks = rng.integers(covered_counts[exercises])
    attr_idx = np.argsort(~q.entries.astype(bool), axis=1, kind="stable")
    attrs = attr_idx[exercises, ranks]

    p, rele, diff, disc = _gather_bindings(params, q, students, exercises)
    base = _sigmoid(evaluate_batch(tree, p, rele, diff, disc))
    p_bumped = p.copy()
    rows = np.arange(n_probes)
    p_bumped[rows, attrs] = np.minimum(p_bumped[rows, attrs] + step, 1.0)
    bumped = _sigmoid(evaluate_batch(tree, p_bumped, rele, diff, disc))

    violations = int(np.sum(bumped < base - 1e-9))
    return MonotonicityReport(violations / n_probes, n_probes, violations)


_PARAMS_HEADER = "symcdm-params v1"


def save_params(params: ModelParams, path: str | Path) -> None:
    """Structured text export: shapes, then row-major values with full
    round-trip precision (byte-stable for identical params)."""
    buf = io.StringIO()
    buf.write(f"{_PARAMS_HEADER}\n")
    buf.write(f"n_students {params.n_students}\n")
    buf.write(f"n_exercises {params.n_exercises}\n")
    buf.write(f"n_attributes {params.n_attributes}\n")
    buf.write(f"disc_scale {params.disc_scale!r}\n")
    for name, arr in (("raw_p", params.raw_p), ("raw_diff", params.raw_diff)):
        buf.write(f"[{name}]\n")
        for row in arr:
            buf.write(" ".join(repr(float(v)) for v in row) + "\n")
    buf.write("[raw_disc]\n")
    for v in params.raw_disc:
        buf.write(repr(float(v)) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def load_params(path: str | Path) -> ModelParams:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != _PARAMS_HEADER:
        raise DataError(f"{path}: not a params file (missing '{_PARAMS_HEADER}' header)")
    meta: dict[str, str] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("["):
        key, _, value = lines[i].partition(" ")
        meta[key] = value
        i += 1
    try:
        n = int(meta["n_students"])
        m = int(meta["n_exercises"])
        l = int(meta["n_attributes"])
        disc_scale = float(meta["disc_scale"])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad params metadata ({exc})") from None

    def read_block(name: str, rows: int) -> np.ndarray:
        nonlocal i
        if i >= len(lines) or lines[i] != f"[{name}]":
            raise DataError(f"{path}: expected [{name}] block at line {i + 1}")
        i += 1
        block = lines[i : i + rows]
        if len(block) != rows:
            raise DataError(f"{path}: [{name}] block truncated")
        i += rows
        return np.array([[float(v) for v in row.split()] for row in block])

    raw_p = read_block("raw_p", n)
    raw_diff = read_block("raw_diff", m)
    raw_disc = read_block("raw_disc", m).reshape(m)
    if raw_p.shape != (n, l) or raw_diff.shape != (m, l):
        raise DataError(f"{path}: block shapes disagree with declared dims")
    return ModelParams(raw_p, raw_diff, raw_disc, disc_scale)
