"""Independent reference implementations used as test oracles.

Everything here is deliberately written from the definitions (per-log
loops, ordered-pair loops, recursive evaluation) and shares no code with
the package paths it checks. Finite-difference work runs in extended
precision so the h=1e-4 central quotient stays accurate down to tiny
gradient magnitudes.
"""

from __future__ import annotations

import numpy as np

from symcdm.exprtree import ExprTree, Op, OperatorNode, TerminalKind, TerminalNode

LONG = np.longdouble
CLAMP = 1e-7


def stable_sigmoid(x):
    x = np.asarray(x)
    out = np.where(
        x >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x))),
        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))),
    )
    return out


def ref_eval(node, p, rele, diff, disc):
    """Recursive single-pair evaluation; vectors are 1-d arrays, scalars 0-d."""
    if isinstance(node, TerminalNode):
        return {
            TerminalKind.PROFICIENCY: p,
            TerminalKind.RELEVANCE: rele,
            TerminalKind.DIFFICULTY: diff,
            TerminalKind.DISCRIMINATION: disc,
        }[node.which]
    vals = [ref_eval(c, p, rele, diff, disc) for c in node.children]
    if node.op is Op.TANH:
        return np.tanh(vals[0])
    if node.op is Op.SIGMOID:
        return stable_sigmoid(vals[0])
    a, b = vals
    if node.op is Op.INNER:
        return np.sum(a * b)
    if node.op is Op.ADD:
        return a + b
    if node.op is Op.SUB:
        return a - b
    return a * b


def ref_loss(tree: ExprTree, raw_p, raw_diff, raw_disc, disc_scale, triples, q_entries):
    """Summed cross-entropy from raw parameters, one log at a time."""
    p_eff = stable_sigmoid(raw_p)
    diff_eff = stable_sigmoid(raw_diff)
    disc_eff = stable_sigmoid(raw_disc) * disc_scale
    total = raw_p.dtype.type(0.0)
    for s, e, r in triples:
        z = ref_eval(
            tree.root,
            p_eff[s],
            q_entries[e].astype(raw_p.dtype),
            diff_eff[e],
            disc_eff[e],
        )
        y = stable_sigmoid(z)
        y = min(max(y, raw_p.dtype.type(CLAMP)), raw_p.dtype.type(1.0 - CLAMP))
        total -= r * np.log(y) + (1 - r) * np.log(1 - y)
    return total


def fd_grads(tree: ExprTree, params, triples, q_entries, h=1e-4):
    """Central finite differences of ref_loss over every raw entry,
    computed in extended precision."""
    raws = {
        "raw_p": params.raw_p.astype(LONG),
        "raw_diff": params.raw_diff.astype(LONG),
        "raw_disc": params.raw_disc.astype(LONG),
    }

    def loss_with(name, flat_index, value):
        local = {k: v.copy() for k, v in raws.items()}
        local[name].flat[flat_index] = value
        return ref_loss(
            tree,
            local["raw_p"],
            local["raw_diff"],
            local["raw_disc"],
            LONG(params.disc_scale),
            triples,
            q_entries,
        )

    out = {}
    hh = LONG(h)
    for name, arr in raws.items():
        grad = np.zeros(arr.shape, dtype=LONG)
        for idx in range(arr.size):
            x = arr.flat[idx]
            up = loss_with(name, idx, x + hh)
            down = loss_with(name, idx, x - hh)
            grad.flat[idx] = (up - down) / (2 * hh)
        out[name] = grad
    return out


def brute_force_auc(probs, labels) -> float:
    """O(n^2) concordant/tied pair counting."""
    probs = list(map(float, probs))
    labels = list(map(int, labels))
    pos = [p for p, l in zip(probs, labels) if l == 1]
    neg = [p for p, l in zip(probs, labels) if l == 0]
    score = 0.0
    for a in pos:
        for b in neg:
            if a > b:
                score += 1.0
            elif a == b:
                score += 0.5
    return score / (len(pos) * len(neg))


def brute_force_doa(p_matrix, ds):
    """Literal per-attribute ordered-pair DOA with the package conventions:
    strict deltas, zero contribution without co-answers, attributes with
    no usable evidence excluded (returned as NaN)."""
    n_students = ds.n_students
    q = ds.qmatrix.entries
    n_attrs = q.shape[1]
    responses = {}
    for s, e, r in zip(ds.students, ds.exercises, ds.scores):
        responses[(int(s), int(e))] = int(r)

    per_attr = np.full(n_attrs, np.nan)
    for k in range(n_attrs):
        covering = [j for j in range(q.shape[0]) if q[j, k] == 1]
        z = 0
        numer = 0.0
        evidence = 0
        for a in range(n_students):
            for b in range(n_students):
                if not p_matrix[a, k] > p_matrix[b, k]:
                    continue
                z += 1
                co = 0
                conc = 0
                for j in covering:
                    ra = responses.get((a, j))
                    rb = responses.get((b, j))
                    if ra is None or rb is None:
                        continue
                    co += 1
                    if ra > rb:
                        conc += 1
                if co > 0:
                    evidence += 1
                    numer += conc / co
        if z > 0 and evidence > 0:
            per_attr[k] = numer / z
    usable = ~np.isnan(per_attr)
    mean = float(per_attr[usable].mean()) if usable.any() else float("nan")
    return mean, per_attr


def enumerate_valid_trees_height2():
    """Exhaustive list of valid trees with height <= 2."""
    from symcdm.exprtree import validate

    terminals = [TerminalNode(t) for t in TerminalKind]

    def build(depth_left):
        yield from terminals
        if depth_left == 0:
            return
        for op in Op:
            arity = 1 if op in (Op.TANH, Op.SIGMOID) else 2
            kids = list(build(depth_left - 1))
            if arity == 1:
                for c in kids:
                    yield OperatorNode(op, (c,))
            else:
                for c1 in kids:
                    for c2 in kids:
                        yield OperatorNode(op, (c1, c2))

    return [ExprTree(node) for node in build(2) if not validate(node)]
