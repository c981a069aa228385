import numpy as np
import pytest

from symcdm.errors import TreeParseError
from symcdm.exprtree import (
    Bindings,
    ExprTree,
    Op,
    OperatorNode,
    TerminalKind,
    TerminalNode,
    ValueKind,
    evaluate,
    evaluate_batch,
    kind_check,
    parse,
    random_tree,
    serialize,
    to_graph,
    to_infix,
    validate,
)

from oracles import enumerate_valid_trees_height2, ref_eval

P = TerminalNode(TerminalKind.PROFICIENCY)
RELE = TerminalNode(TerminalKind.RELEVANCE)
DIFF = TerminalNode(TerminalKind.DIFFICULTY)
DISC = TerminalNode(TerminalKind.DISCRIMINATION)


def op(kind, *children):
    return OperatorNode(kind, tuple(children))


class TestKindCheck:
    def test_gap_inner_is_scalar(self):
        node = op(Op.INNER, RELE, op(Op.SUB, P, DIFF))
        kind, violations = kind_check(node)
        assert kind is ValueKind.SCALAR
        assert violations == []

    def test_inner_rejects_scalar_child(self):
        node = op(Op.INNER, DISC, P)
        kind, violations = kind_check(node)
        assert kind is None
        assert len(violations) == 1
        assert "inner requires two vectors" in violations[0]

    def test_scalar_scaling_of_inner(self):
        node = op(Op.MUL, op(Op.INNER, RELE, P), DISC)
        kind, violations = kind_check(node)
        assert kind is ValueKind.SCALAR and not violations

    def test_broadcast_gives_vector(self):
        kind, _ = kind_check(op(Op.ADD, P, DISC))
        assert kind is ValueKind.VECTOR

    def test_nested_violations_all_reported(self):
        node = op(Op.ADD, op(Op.INNER, DISC, DISC), op(Op.INNER, DISC, P))
        kind, violations = kind_check(node)
        assert kind is None
        assert len(violations) == 2


class TestValidate:
    def test_initial_tree_ok(self, initial_tree):
        assert validate(initial_tree) == []

    def test_missing_both_required_terminals(self):
        violations = validate(op(Op.SIGMOID, DISC))
        assert any("no proficiency" in v for v in violations)
        assert any("no relevance" in v for v in violations)

    def test_vector_root_rejected(self):
        violations = validate(op(Op.SUB, P, RELE))
        assert any("must be scalar" in v for v in violations)

    def test_arity_enforced_at_construction(self):
        with pytest.raises(ValueError, match="takes 2 children"):
            OperatorNode(Op.ADD, (P,))
        with pytest.raises(ValueError, match="takes 1 children"):
            OperatorNode(Op.TANH, (P, DIFF))


class TestEvaluate:
    def test_symmetric_cancellation(self, initial_tree):
        b = Bindings(p=[0.5, 0.5], rele=[1, 0], diff=[0.5, 0.5], disc=2.0)
        assert evaluate(initial_tree, b) == 0.0

    def test_hand_computed_unit_gap(self, initial_tree):
        # (1-0)*1 + (0-0)*1 = 1, scaled by disc 1
        b = Bindings(p=[1.0, 0.0], rele=[1, 1], diff=[0.0, 0.0], disc=1.0)
        assert evaluate(initial_tree, b) == 1.0

    def test_sigmoid_root_at_zero(self):
        tree = ExprTree(op(Op.SIGMOID, op(Op.INNER, RELE, op(Op.SUB, P, DIFF))))
        b = Bindings(p=[0.3, 0.7], rele=[1, 1], diff=[0.3, 0.7], disc=5.0)
        assert evaluate(tree, b) == pytest.approx(0.5)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="share one length"):
            Bindings(p=[0.5, 0.5], rele=[1], diff=[0.5, 0.5], disc=1.0)

    def test_matches_reference_on_random_trees(self, rng):
        for _ in range(50):
            tree = random_tree(5, rng)
            p = rng.random(4)
            rele = rng.integers(0, 2, size=4).astype(float)
            diff = rng.random(4)
            disc = float(rng.uniform(0, 10))
            got = evaluate(tree, Bindings(p, rele, diff, disc))
            want = float(ref_eval(tree.root, p, rele, diff, np.float64(disc)))
            assert got == pytest.approx(want, rel=1e-12, abs=1e-12)

    def test_eval_is_pure(self, initial_tree, rng):
        b = Bindings(p=rng.random(3), rele=[1, 0, 1], diff=rng.random(3), disc=3.3)
        assert evaluate(initial_tree, b) == evaluate(initial_tree, b)

    def test_batch_eval_matches_single(self, rng):
        tree = random_tree(4, rng)
        p = rng.random((8, 3))
        rele = rng.integers(0, 2, size=(8, 3)).astype(float)
        diff = rng.random((8, 3))
        disc = rng.uniform(0, 10, size=8)
        batch = evaluate_batch(tree, p, rele, diff, disc)
        for i in range(8):
            single = evaluate(tree, Bindings(p[i], rele[i], diff[i], float(disc[i])))
            assert batch[i] == pytest.approx(single, rel=1e-12)


class TestMonotonicityOfInitialTree:
    def test_finite_differences_never_decrease(self, initial_tree, rng):
        # Raising any covered proficiency entry cannot lower the output
        # while discrimination stays positive.
        for _ in range(200):
            l = int(rng.integers(1, 6))
            p = rng.random(l)
            rele = rng.integers(0, 2, size=l).astype(float)
            diff = rng.random(l)
            disc = float(rng.uniform(0.01, 10))
            covered = np.flatnonzero(rele == 1)
            if covered.size == 0:
                continue
            k = int(covered[rng.integers(covered.size)])
            base = evaluate(initial_tree, Bindings(p, rele, diff, disc))
            p2 = p.copy()
            p2[k] = min(p2[k] + 0.05, 1.0)
            bumped = evaluate(initial_tree, Bindings(p2, rele, diff, disc))
            assert bumped >= base - 1e-12


class TestRandomTree:
    def test_all_draws_valid_at_depth5(self, rng):
        for _ in range(1000):
            tree = random_tree(5, rng)
            assert validate(tree) == []
            assert tree.height <= 5

    def test_depth2_draws_are_in_enumerated_set(self, rng):
        allowed = {serialize(t) for t in enumerate_valid_trees_height2()}
        assert "(inner P rele)" in allowed
        for _ in range(300):
            tree = random_tree(2, rng)
            assert serialize(tree) in allowed

    def test_deterministic_given_seed(self):
        t1 = random_tree(5, np.random.default_rng(99))
        t2 = random_tree(5, np.random.default_rng(99))
        assert t1 == t2

    def test_min_depth_guard(self, rng):
        with pytest.raises(ValueError, match="max_depth"):
            random_tree(1, rng)


class TestSerialization:
    def test_initial_tree_infix(self, initial_tree):
        assert to_infix(initial_tree) == "((rele ∘ (P − diff)) × disc)"

    def test_initial_tree_prefix(self, initial_tree):
        assert serialize(initial_tree) == "(mul (inner rele (sub P diff)) disc)"

    def test_round_trip_random_trees(self, rng):
        for _ in range(100):
            tree = random_tree(5, rng)
            assert parse(serialize(tree)) == tree

    def test_parse_error_reports_position(self):
        with pytest.raises(TreeParseError) as err:
            parse("(inner P")
        assert err.value.position == 8

    def test_parse_unknown_symbol(self):
        with pytest.raises(TreeParseError, match="unknown operator"):
            parse("(frobnicate P rele)")
        with pytest.raises(TreeParseError, match="unknown terminal"):
            parse("(inner P bogus)")

    def test_parse_trailing_input(self):
        with pytest.raises(TreeParseError, match="trailing"):
            parse("P rele")

    def test_graph_export_counts(self, initial_tree):
        text = to_graph(initial_tree)
        node_lines = [l for l in text.splitlines() if l.startswith("node ")]
        edge_lines = [l for l in text.splitlines() if l.startswith("edge ")]
        assert len(node_lines) == initial_tree.node_count
        assert len(edge_lines) == initial_tree.node_count - 1


class TestMeasures:
    def test_single_terminal(self):
        tree = ExprTree(P)
        assert tree.height == 0
        assert tree.node_count == 1

    def test_initial_tree_measures(self, initial_tree):
        # Hand enumeration: mul, inner, sub + terminals rele, P, diff, disc.
        assert initial_tree.height == 3
        assert initial_tree.node_count == 7

    def test_wrapping_adds_one(self, initial_tree):
        wrapped = ExprTree(op(Op.SIGMOID, initial_tree.root))
        assert wrapped.height == initial_tree.height + 1
        assert wrapped.node_count == initial_tree.node_count + 1
