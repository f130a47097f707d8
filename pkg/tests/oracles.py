"""Naive from-definition oracles used to cross-check the package.

Everything here is written as directly as possible from the documented
definitions (position scans instead of Counters, explicit loops instead of
vectorization) so a bug in the production code cannot hide in a shared
helper.
"""

import itertools
import math

import numpy as np


def occurrences(tokens, gram):
    n = len(gram)
    return sum(1 for i in range(len(tokens) - n + 1) if tuple(tokens[i : i + n]) == tuple(gram))


def grams_of(tokens, n):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bf_bleu(cand, refs, max_n=1):
    cand = list(cand)
    refs = [list(r) for r in refs]
    if not cand or not refs:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        grams = grams_of(cand, n)
        if not grams:
            precisions.append(0.0)
            continue
        matched = 0
        for gram in set(grams):
            matched += min(occurrences(cand, gram), max(occurrences(r, gram) for r in refs))
        precisions.append(matched / len(grams))
    if any(p == 0.0 for p in precisions):
        return 0.0
    geo = math.exp(sum(math.log(p) for p in precisions) / len(precisions))
    c = len(cand)
    r = min((len(r) for r in refs), key=lambda rl: (abs(rl - c), rl))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * geo


def bf_self_bleu(corpus, n):
    sentences = [list(s) for s in corpus]
    scores = []
    for i in range(len(sentences)):
        others = [s for j, s in enumerate(sentences) if j != i]
        scores.append(bf_bleu(sentences[i], others, max_n=n))
    return sum(scores) / len(scores)


def bf_chrf(cand, ref, n=6, beta=2.0):
    if not cand and not ref:
        return 1.0
    if not cand or not ref:
        return 0.0
    p_vals, r_vals = [], []
    for order in range(1, n + 1):
        cand_grams = grams_of(cand, order)
        ref_grams = grams_of(ref, order)
        if not cand_grams and not ref_grams:
            continue
        matched = 0
        for gram in set(cand_grams):
            matched += min(occurrences(cand, gram), occurrences(ref, gram))
        p_vals.append(matched / len(cand_grams) if cand_grams else 0.0)
        r_vals.append(matched / len(ref_grams) if ref_grams else 0.0)
    if not p_vals:
        return 0.0
    precision = sum(p_vals) / len(p_vals)
    recall = sum(r_vals) / len(r_vals)
    denom = beta * beta * precision + recall
    return (1 + beta * beta) * precision * recall / denom if denom else 0.0


def bf_gleu(cand, ref, max_n=4):
    cand = list(cand)
    ref = list(ref)
    if not cand:
        return 0.0
    matched = cand_total = ref_total = 0
    for n in range(1, max_n + 1):
        cand_grams = grams_of(cand, n)
        ref_grams = grams_of(ref, n)
        for gram in set(cand_grams):
            matched += min(occurrences(cand, gram), occurrences(ref, gram))
        cand_total += len(cand_grams)
        ref_total += len(ref_grams)
    if cand_total == 0 or ref_total == 0:
        return 0.0
    return min(matched / cand_total, matched / ref_total)


def bf_weighted_prf(cand, ref, max_n=4):
    cand = list(cand)
    ref = list(ref)
    p_vals, r_vals = [], []
    for n in range(1, max_n + 1):
        cand_grams = grams_of(cand, n)
        ref_grams = grams_of(ref, n)
        if not cand_grams and not ref_grams:
            continue
        matched = 0
        for gram in set(cand_grams):
            matched += min(occurrences(cand, gram), occurrences(ref, gram))
        p_vals.append(matched / len(cand_grams) if cand_grams else 0.0)
        r_vals.append(matched / len(ref_grams) if ref_grams else 0.0)
    if not p_vals:
        return 0.0, 0.0, 0.0
    precision = sum(p_vals) / len(p_vals)
    recall = sum(r_vals) / len(r_vals)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def bf_ribes(cand, ref, alpha=0.25, beta=0.10):
    cand = list(cand)
    ref = list(ref)
    if not cand or not ref:
        return 0.0
    aligned = []
    for tok in cand:
        if cand.count(tok) == 1 and ref.count(tok) == 1:
            aligned.append(ref.index(tok))
    n = len(aligned)
    if n == 0:
        return 0.0
    if n == 1:
        nkt = 0.5
    else:
        concordant = discordant = 0
        for i in range(n):
            for j in range(i + 1, n):
                if aligned[i] < aligned[j]:
                    concordant += 1
                else:
                    discordant += 1
        tau = (concordant - discordant) / (n * (n - 1) / 2)
        nkt = (tau + 1) / 2
    matched = sum(min(cand.count(tok), ref.count(tok)) for tok in set(cand))
    p1 = matched / len(cand)
    bp = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return nkt * p1**alpha * bp**beta


def bf_edit_distance(a, b):
    a, b = list(a), list(b)
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        table[i][0] = i
    for j in range(len(b) + 1):
        table[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1, table[i - 1][j - 1] + cost)
    return table[len(a)][len(b)]


def bf_ter(cand, ref, max_shift_len=10):
    cand = list(cand)
    ref = list(ref)
    if not ref:
        raise ValueError("empty reference")

    def appears_in_ref(span):
        return occurrences(ref, span) > 0

    shifts = 0
    current = cand
    dist = bf_edit_distance(current, ref)
    while dist > 0:
        best = None
        for length in range(1, min(max_shift_len, len(current)) + 1):
            for start in range(len(current) - length + 1):
                span = tuple(current[start : start + length])
                if not appears_in_ref(span):
                    continue
                rest = current[:start] + current[start + length :]
                for dest in range(len(rest) + 1):
                    if dest == start:
                        continue
                    shifted = rest[:dest] + list(span) + rest[dest:]
                    d = bf_edit_distance(shifted, ref)
                    if best is None or d < best[0]:
                        best = (d, shifted)
        if best is None or best[0] >= dist:
            break
        current = best[1]
        dist = best[0]
        shifts += 1
    return (dist + shifts) / len(ref)


def bf_transport_cost(p, q, cost):
    """Exhaustive enumeration over basic solutions (vertices) of the
    transportation polytope; feasible for a handful of tokens."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m, n = cost.shape
    arcs = [(i, j) for i in range(m) for j in range(n)]
    constraints = np.zeros((m + n, m * n))
    for idx, (i, j) in enumerate(arcs):
        constraints[i, idx] = 1.0
        constraints[m + j, idx] = 1.0
    rhs = np.concatenate([p, q])
    best = None
    basis_size = m + n - 1
    for combo in itertools.combinations(range(m * n), basis_size):
        sub = constraints[:, combo]
        flows, residuals, rank, _ = np.linalg.lstsq(sub, rhs, rcond=None)
        if rank < basis_size:
            continue
        if np.linalg.norm(sub @ flows - rhs) > 1e-9:
            continue
        if np.any(flows < -1e-10):
            continue
        value = float(sum(cost[arcs[k]] * max(flow, 0.0) for k, flow in zip(combo, flows)))
        if best is None or value < best:
            best = value
    assert best is not None, "degenerate transport instance"
    return best


def bf_confusion_metrics(preds, gold):
    classes = sorted(set(gold))
    accuracy = sum(1 for p, g in zip(preds, gold) if p == g) / len(gold)
    per_p, per_r, per_f = [], [], []
    for c in classes:
        tp = sum(1 for p, g in zip(preds, gold) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, gold) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, gold) if p != c and g == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per_p.append(prec)
        per_r.append(rec)
        per_f.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return accuracy, sum(per_p) / len(classes), sum(per_r) / len(classes), sum(per_f) / len(classes)


def bf_dendrite(vector, weight_stack):
    current = np.asarray(vector, dtype=np.float64)
    for w in weight_stack:
        current = (current * current) @ np.asarray(w, dtype=np.float64)
    return current
