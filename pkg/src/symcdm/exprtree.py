"""Typed symbolic trees for student-exercise interaction functions.

A tree combines four terminal families (proficiency row ``P``, exercise
relevance ``rele``, exercise difficulty ``diff``, exercise discrimination
``disc``) with the monotone operator set {add, sub, mul, inner, tanh,
sigmoid}. Values are either per-attribute vectors of a common length or
scalars; a usable interaction tree must evaluate to a scalar and mention
both ``P`` and ``rele``.

Trees are immutable after construction. Evaluation is pure and batched:
the same node structure is applied to whole arrays of (student, exercise)
bindings at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence, Union

import numpy as np

from .errors import TreeParseError

__all__ = [
    "Op",
    "TerminalKind",
    "ValueKind",
    "OperatorNode",
    "TerminalNode",
    "ExprNode",
    "Bindings",
    "ExprTree",
    "kind_check",
    "validate",
    "evaluate",
    "evaluate_batch",
    "random_tree",
    "to_infix",
    "serialize",
    "parse",
    "to_graph",
]


class Op(Enum):
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    INNER = "inner"
    TANH = "tanh"
    SIGMOID = "sigmoid"


class TerminalKind(Enum):
    PROFICIENCY = "P"
    RELEVANCE = "rele"
    DIFFICULTY = "diff"
    DISCRIMINATION = "disc"


class ValueKind(Enum):
    SCALAR = "scalar"
    VECTOR = "vector"


_ARITY = {
    Op.ADD: 2,
    Op.SUB: 2,
    Op.MUL: 2,
    Op.INNER: 2,
    Op.TANH: 1,
    Op.SIGMOID: 1,
}

_BINARY_ELEMENTWISE = (Op.ADD, Op.SUB, Op.MUL)
_UNARY = (Op.TANH, Op.SIGMOID)

# Only discrimination is scalar-valued; the other terminals are attribute
# vectors whose length is bound at evaluation time.
_TERMINAL_KIND = {
    TerminalKind.PROFICIENCY: ValueKind.VECTOR,
    TerminalKind.RELEVANCE: ValueKind.VECTOR,
    TerminalKind.DIFFICULTY: ValueKind.VECTOR,
    TerminalKind.DISCRIMINATION: ValueKind.SCALAR,
}


@dataclass(frozen=True)
class TerminalNode:
    which: TerminalKind


@dataclass(frozen=True)
class OperatorNode:
    op: Op
    children: tuple["ExprNode", ...]

    def __post_init__(self):
        want = _ARITY[self.op]
        if len(self.children) != want:
            raise ValueError(
                f"operator {self.op.value} takes {want} children, "
                f"got {len(self.children)}"
            )


ExprNode = Union[TerminalNode, OperatorNode]


@dataclass(frozen=True)
class Bindings:
    """Terminal values for a single (student, exercise) pair."""

    p: np.ndarray
    rele: np.ndarray
    diff: np.ndarray
    disc: float

    def __post_init__(self):
        object.__setattr__(self, "p", np.asarray(self.p, dtype=float))
        object.__setattr__(self, "rele", np.asarray(self.rele, dtype=float))
        object.__setattr__(self, "diff", np.asarray(self.diff, dtype=float))
        lengths = {self.p.shape, self.rele.shape, self.diff.shape}
        if len(lengths) != 1 or self.p.ndim != 1:
            raise ValueError(
                f"binding vectors must share one length, got shapes "
                f"{self.p.shape}, {self.rele.shape}, {self.diff.shape}"
            )

    @property
    def n_attributes(self) -> int:
        return self.p.shape[0]


class ExprTree:
    """Immutable wrapper around a node with cached structural measures.

    Height counts edges (a lone terminal has height 0); node_count counts
    every node. ``output_kind`` is None when kind checking fails.
    """

    __slots__ = ("root", "height", "node_count", "output_kind")

    def __init__(self, root: ExprNode):
        self.root = root
        self.height = _height(root)
        self.node_count = _count_nodes(root)
        kind, violations = _kind_of(root, path="root")
        self.output_kind = kind if not violations else None

    def __eq__(self, other) -> bool:
        return isinstance(other, ExprTree) and self.root == other.root

    def __hash__(self) -> int:
        return hash(self.root)

    def __repr__(self) -> str:
        return f"ExprTree({to_infix(self)})"


def _height(node: ExprNode) -> int:
    if isinstance(node, TerminalNode):
        return 0
    return 1 + max(_height(c) for c in node.children)


def _count_nodes(node: ExprNode) -> int:
    if isinstance(node, TerminalNode):
        return 1
    return 1 + sum(_count_nodes(c) for c in node.children)


def _kind_of(node: ExprNode, path: str) -> tuple[ValueKind | None, list[str]]:
    """Infer the value kind of ``node``, collecting violations.

    Kind rules: add/sub/mul combine scalars and vectors elementwise with
    scalar broadcast; inner maps (vector, vector) to scalar; tanh/sigmoid
    preserve the child kind. A violation makes the node's kind None but
    checking continues so all problems are reported at once.
    """
    if isinstance(node, TerminalNode):
        return _TERMINAL_KIND[node.which], []

    violations: list[str] = []
    child_kinds = []
    for i, child in enumerate(node.children):
        kind, sub = _kind_of(child, f"{path}.{i}")
        violations.extend(sub)
        child_kinds.append(kind)

    if len(node.children) != _ARITY[node.op]:
        violations.append(
            f"{path}: {node.op.value} has {len(node.children)} children, "
            f"expected {_ARITY[node.op]}"
        )
        return None, violations

    if any(k is None for k in child_kinds):
        return None, violations

    if node.op in _UNARY:
        return child_kinds[0], violations
    left, right = child_kinds
    if node.op is Op.INNER:
        if left is ValueKind.VECTOR and right is ValueKind.VECTOR:
            return ValueKind.SCALAR, violations
        violations.append(
            f"{path}: inner requires two vectors, got "
            f"({left.value}, {right.value})"
        )
        return None, violations
    # add/sub/mul: vector wins via broadcast
    if ValueKind.VECTOR in (left, right):
        return ValueKind.VECTOR, violations
    return ValueKind.SCALAR, violations


def kind_check(tree: ExprTree | ExprNode) -> tuple[ValueKind | None, list[str]]:
    """Return (root kind, violations); kind is None when violations exist."""
    root = tree.root if isinstance(tree, ExprTree) else tree
    return _kind_of(root, path="root")


def _terminals(node: ExprNode) -> Iterator[TerminalKind]:
    if isinstance(node, TerminalNode):
        yield node.which
    else:
        for child in node.children:
            yield from _terminals(child)


def validate(tree: ExprTree | ExprNode) -> list[str]:
    """Check a tree against the interaction-function constraints.

    Returns a list of violations (empty means valid): the root must be
    scalar-kinded, kind checking must succeed everywhere, and both a
    proficiency and a relevance terminal must appear so the output depends
    on the knowledge attributes.
    """
    root = tree.root if isinstance(tree, ExprTree) else tree
    kind, violations = _kind_of(root, path="root")
    if kind is not None and kind is not ValueKind.SCALAR:
        violations.append("root: output kind must be scalar, got vector")
    present = set(_terminals(root))
    if TerminalKind.PROFICIENCY not in present:
        violations.append("tree contains no proficiency (P) terminal")
    if TerminalKind.RELEVANCE not in present:
        violations.append("tree contains no relevance (rele) terminal")
    return violations


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Piecewise form avoids overflow warnings for large |x|.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _apply_op(op: Op, values: list[np.ndarray]) -> np.ndarray:
    if op is Op.TANH:
        return np.tanh(values[0])
    if op is Op.SIGMOID:
        return _sigmoid(values[0])
    a, b = values
    if op is Op.INNER:
        return np.einsum("bl,bl->b", a, b)
    # Promote a scalar batch (B,) next to a vector batch (B, L).
    if a.ndim != b.ndim:
        if a.ndim == 1:
            a = a[:, None]
        else:
            b = b[:, None]
    if op is Op.ADD:
        return a + b
    if op is Op.SUB:
        return a - b
    return a * b


def evaluate_batch(
    tree: ExprTree | ExprNode,
    p: np.ndarray,
    rele: np.ndarray,
    diff: np.ndarray,
    disc: np.ndarray,
) -> np.ndarray:
    """Evaluate a tree over B bound pairs at once.

    ``p``, ``rele`` and ``diff`` are (B, L) arrays, ``disc`` is (B,).
    Returns (B,) for a scalar-kinded tree, (B, L) for a vector-kinded one.
    The tree must kind-check; shapes are trusted from there on.
    """
    root = tree.root if isinstance(tree, ExprTree) else tree
    if not (p.shape == rele.shape == diff.shape) or p.ndim != 2:
        raise ValueError(
            f"batch bindings must be (B, L) arrays of one shape, got "
            f"{p.shape}, {rele.shape}, {diff.shape}"
        )
    if disc.shape != (p.shape[0],):
        raise ValueError(f"disc must be shape ({p.shape[0]},), got {disc.shape}")

    lookup = {
        TerminalKind.PROFICIENCY: p,
        TerminalKind.RELEVANCE: rele,
        TerminalKind.DIFFICULTY: diff,
        TerminalKind.DISCRIMINATION: disc,
    }

    def ev(node: ExprNode) -> np.ndarray:
        if isinstance(node, TerminalNode):
            return lookup[node.which]
        return _apply_op(node.op, [ev(c) for c in node.children])

    # Degenerate deep trees can overflow float64; inf/nan flow to the
    # caller, which decides how to treat saturated outputs.
    with np.errstate(over="ignore", invalid="ignore"):
        return ev(root)


def evaluate(tree: ExprTree | ExprNode, b: Bindings) -> float:
    """Evaluate a scalar-kinded tree for one (student, exercise) binding."""
    out = evaluate_batch(
        tree,
        b.p[None, :],
        b.rele[None, :],
        b.diff[None, :],
        np.asarray([b.disc], dtype=float),
    )
    if out.ndim != 1:
        raise ValueError("tree is vector-kinded; a valid tree must be scalar")
    return float(out[0])


_OPERATORS = list(Op)
_TERMS = list(TerminalKind)

# Grow sampling knobs, tuned so rejection against ``validate`` accepts
# roughly one draw in eleven at depth 5 (the 200-retry bound then fails
# with probability ~6e-9 per call). Proficiency and relevance terminals
# are favored because a valid tree must contain both.
_GROW_P_OPERATOR = 0.75
_TERMINAL_WEIGHTS = (0.35, 0.35, 0.15, 0.15)  # P, rele, diff, disc
_TERMINAL_CUMWEIGHTS = tuple(np.cumsum(_TERMINAL_WEIGHTS))


def _random_terminal(rng) -> TerminalNode:
    u = rng.random()
    for i, edge in enumerate(_TERMINAL_CUMWEIGHTS):
        if u < edge:
            return TerminalNode(_TERMS[i])
    return TerminalNode(_TERMS[-1])


def _grow(rng, depth_left: int, force_operator: bool = False) -> ExprNode:
    """Grow-style random node: operator vs terminal by a biased coin,
    terminals by fixed weights, until the depth budget forces a leaf."""
    if depth_left > 0 and (force_operator or rng.random() < _GROW_P_OPERATOR):
        op = _OPERATORS[int(rng.integers(len(_OPERATORS)))]
        children = tuple(_grow(rng, depth_left - 1) for _ in range(_ARITY[op]))
        return OperatorNode(op, children)
    return _random_terminal(rng)


def random_tree(max_depth: int, rng, max_retries: int = 200) -> ExprTree:
    """Draw a random valid tree of height <= max_depth.

    Generation is plain grow sampling rejected until ``validate`` passes
    (the root is always an operator; a lone terminal can never validate).
    Raises RuntimeError after ``max_retries`` failures, which signals an
    over-constrained configuration rather than bad luck.
    """
    if max_depth < 2:
        raise ValueError(f"max_depth must be >= 2, got {max_depth}")
    for _ in range(max_retries):
        root = _grow(rng, max_depth, force_operator=True)
        if not validate(root):
            return ExprTree(root)
    raise RuntimeError(
        f"no valid tree found in {max_retries} draws at max_depth={max_depth}"
    )


_INFIX_SYMBOL = {Op.ADD: "+", Op.SUB: "−", Op.MUL: "×", Op.INNER: "∘"}


def to_infix(tree: ExprTree | ExprNode) -> str:
    """Human-readable rendering, e.g. ``((rele ∘ (P − diff)) × disc)``."""
    node = tree.root if isinstance(tree, ExprTree) else tree
    if isinstance(node, TerminalNode):
        return node.which.value
    if node.op in _UNARY:
        return f"{node.op.value}({to_infix(node.children[0])})"
    left, right = (to_infix(c) for c in node.children)
    return f"({left} {_INFIX_SYMBOL[node.op]} {right})"


def serialize(tree: ExprTree | ExprNode) -> str:
    """Parenthesized prefix text, e.g. ``(mul (inner rele (sub P diff)) disc)``."""
    node = tree.root if isinstance(tree, ExprTree) else tree
    if isinstance(node, TerminalNode):
        return node.which.value
    parts = " ".join(serialize(c) for c in node.children)
    return f"({node.op.value} {parts})"


_TERM_BY_NAME = {t.value: t for t in TerminalKind}
_OP_BY_NAME = {o.value: o for o in Op}


def _tokenize(text: str) -> list[tuple[str, int]]:
    tokens: list[tuple[str, int]] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append((ch, i))
            i += 1
        else:
            j = i
            while j < len(text) and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append((text[i:j], i))
            i = j
    return tokens


def parse(text: str) -> ExprTree:
    """Parse ``serialize`` output back into a tree (structural inverse)."""
    tokens = _tokenize(text)
    pos = 0

    def expect(what: str) -> tuple[str, int]:
        nonlocal pos
        if pos >= len(tokens):
            raise TreeParseError(f"unexpected end of input, expected {what}", len(text))
        tok = tokens[pos]
        pos += 1
        return tok

    def node() -> ExprNode:
        tok, at = expect("a node")
        if tok == ")":
            raise TreeParseError("unexpected ')'", at)
        if tok != "(":
            if tok in _TERM_BY_NAME:
                return TerminalNode(_TERM_BY_NAME[tok])
            raise TreeParseError(f"unknown terminal {tok!r}", at)
        name, at = expect("an operator name")
        if name not in _OP_BY_NAME:
            raise TreeParseError(f"unknown operator {name!r}", at)
        op = _OP_BY_NAME[name]
        children = tuple(node() for _ in range(_ARITY[op]))
        closer, at = expect("')'")
        if closer != ")":
            raise TreeParseError(f"expected ')', got {closer!r}", at)
        return OperatorNode(op, children)

    root = node()
    if pos != len(tokens):
        raise TreeParseError(f"trailing input {tokens[pos][0]!r}", tokens[pos][1])
    return ExprTree(root)


def to_graph(tree: ExprTree | ExprNode) -> str:
    """Graph description for external rendering: one ``node id label`` line
    per node (preorder ids) and one ``edge parent child`` line per edge."""
    root = tree.root if isinstance(tree, ExprTree) else tree
    nodes: list[str] = []
    edges: list[str] = []

    def walk(node: ExprNode) -> int:
        my_id = len(nodes)
        label = node.which.value if isinstance(node, TerminalNode) else node.op.value
        nodes.append(f"node {my_id} {label}")
        if isinstance(node, OperatorNode):
            for child in node.children:
                child_id = walk(child)
                edges.append(f"edge {my_id} {child_id}")
        return my_id

    walk(root)
    return "\n".join(nodes + edges) + "\n"


def subtree_nodes(node: ExprNode) -> list[ExprNode]:
    """All nodes in preorder; index order is the contract for subtree picks."""
    out = [node]
    if isinstance(node, OperatorNode):
        for child in node.children:
            out.extend(subtree_nodes(child))
    return out


def replace_subtree(root: ExprNode, index: int, replacement: ExprNode) -> ExprNode:
    """Return a new tree with the preorder-``index`` subtree swapped out."""

    def rebuild(node: ExprNode, counter: list[int]) -> ExprNode:
        my_index = counter[0]
        counter[0] += 1
        if my_index == index:
            # Skip the replaced subtree's node numbers.
            counter[0] += _count_nodes(node) - 1
            return replacement
        if isinstance(node, TerminalNode):
            return node
        return OperatorNode(node.op, tuple(rebuild(c, counter) for c in node.children))

    total = _count_nodes(root)
    if not 0 <= index < total:
        raise IndexError(f"subtree index {index} out of range for {total} nodes")
    return rebuild(root, [0])
