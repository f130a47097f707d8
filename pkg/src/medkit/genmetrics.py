"""Generation-quality metrics with precisely pinned definitions.

Each sentence-level metric here is mirrored by a naive from-definition oracle
in the test tree; the definitions below are therefore spelled out exactly:

* bleu: clipped n-gram precision, geometric mean over orders 1..max_n,
  brevity penalty exp(1 - r/c) when the candidate is shorter than the
  (closest-length) reference.
* chrf: character n-gram F-beta, averaging precision/recall over orders
  1..n; orders where neither side has n-grams are skipped.
* gleu: matched n-gram counts pooled over orders 1..4; the score is
  min(pooled precision, pooled recall).
* weighted_prf: clipped n-gram precision AND recall per order 1..4,
  uniformly averaged over orders where either side has n-grams; F1 is the
  harmonic mean of the averaged P and R.
* nist: information-weighted n-gram co-occurrence (weights from reference
  corpus statistics), order sums divided by candidate n-gram counts, with
  the NIST brevity factor exp(beta * ln(min(c/r, 1))^2), beta chosen so the
  factor is 0.5 at c/r = 2/3.
* ribes: rank-correlation score NKT * p1^alpha * bp^beta, where NKT maps
  Kendall's tau over one-to-one alignments (tokens occurring exactly once
  on both sides) into [0, 1]; a single alignment scores NKT = 0.5.
* ter: word edits (insert/delete/substitute) plus greedy block shifts per
  reference word. A shift moves a candidate span (length <= 10) that occurs
  verbatim in the reference to another position; at each step the first
  shift (scanning span length, then start, then destination, ascending)
  achieving the lowest resulting edit distance is applied, while it strictly
  improves.
* wmd_similarity: 1 / (1 + d) where d is the exact optimal-transport cost
  between normalized bag-of-token distributions under Euclidean ground
  distances between token embeddings.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

log = logging.getLogger(__name__)

_NIST_BETA = math.log(0.5) / math.log(2.0 / 3.0) ** 2
_TER_MAX_SHIFT_LEN = 10


def char_tokens(text: str) -> list[str]:
    """Character-level tokenization used for word-level metrics on Chinese."""
    return list(text)


def ngram_counts(tokens, n: int) -> Counter:
    tokens = list(tokens)
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- n-gram overlap ------------------------------------------------------------


def _closest_ref_len(cand_len: int, references) -> int:
    # ties break toward the shorter reference
    return min((len(r) for r in references), key=lambda rl: (abs(rl - cand_len), rl))


def _clipped_matches(cand_counts: Counter, references, n: int) -> int:
    matched = 0
    ref_counts = [ngram_counts(r, n) for r in references]
    for gram, count in cand_counts.items():
        best = max((rc.get(gram, 0) for rc in ref_counts), default=0)
        matched += min(count, best)
    return matched


def bleu(candidate, references, max_n: int = 1, smoothing: str = "off") -> float:
    """Clipped n-gram precision BLEU against one or more references."""
    cand = list(candidate)
    refs = [list(r) for r in references]
    if not cand or not refs:
        return 0.0
    precisions = []
    for n in range(1, max_n + 1):
        cand_counts = ngram_counts(cand, n)
        total = sum(cand_counts.values())
        matched = _clipped_matches(cand_counts, refs, n)
        if smoothing == "add_one" and n > 1:
            precisions.append((matched + 1) / (total + 1))
        elif total == 0 or matched == 0:
            precisions.append(0.0)
        else:
            precisions.append(matched / total)
    if any(p == 0.0 for p in precisions):
        return 0.0
    geo = math.exp(sum(math.log(p) for p in precisions) / len(precisions))
    c = len(cand)
    r = _closest_ref_len(c, refs)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * geo


def self_bleu(corpus, n: int) -> float:
    """Mean BLEU of each sentence against all others; lower = more diverse."""
    sentences = [list(s) for s in corpus]
    if len(sentences) < 2:
        raise ValueError("self_bleu needs at least two sentences")
    scores = []
    for i, sent in enumerate(sentences):
        others = sentences[:i] + sentences[i + 1 :]
        scores.append(bleu(sent, others, max_n=n))
    return sum(scores) / len(scores)


def chrf(candidate: str, reference: str, n: int = 6, beta: float = 2.0) -> float:
    """Character n-gram F-beta score between two raw strings."""
    if not candidate and not reference:
        return 1.0
    if not candidate or not reference:
        return 0.0
    p_sum = r_sum = 0.0
    orders = 0
    for order in range(1, n + 1):
        cand_counts = ngram_counts(candidate, order)
        ref_counts = ngram_counts(reference, order)
        cand_total = sum(cand_counts.values())
        ref_total = sum(ref_counts.values())
        if cand_total == 0 and ref_total == 0:
            continue
        matched = sum(min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items())
        p_sum += matched / cand_total if cand_total else 0.0
        r_sum += matched / ref_total if ref_total else 0.0
        orders += 1
    if orders == 0:
        return 0.0
    precision = p_sum / orders
    recall = r_sum / orders
    denom = beta * beta * precision + recall
    if denom == 0.0:
        return 0.0
    return (1 + beta * beta) * precision * recall / denom


def gleu(candidate, reference, max_n: int = 4) -> float:
    """min(precision, recall) over n-gram counts pooled across orders 1..max_n."""
    cand = list(candidate)
    ref = list(reference)
    if not cand:
        return 0.0
    matched = cand_total = ref_total = 0
    for n in range(1, max_n + 1):
        cand_counts = ngram_counts(cand, n)
        ref_counts = ngram_counts(ref, n)
        matched += sum(min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items())
        cand_total += sum(cand_counts.values())
        ref_total += sum(ref_counts.values())
    if cand_total == 0 or ref_total == 0:
        return 0.0
    return min(matched / cand_total, matched / ref_total)


def weighted_prf(candidate, reference, max_n: int = 4) -> tuple[float, float, float]:
    """Uniformly order-weighted clipped n-gram precision/recall and their F1."""
    cand = list(candidate)
    ref = list(reference)
    p_sum = r_sum = 0.0
    orders = 0
    for n in range(1, max_n + 1):
        cand_counts = ngram_counts(cand, n)
        ref_counts = ngram_counts(ref, n)
        cand_total = sum(cand_counts.values())
        ref_total = sum(ref_counts.values())
        if cand_total == 0 and ref_total == 0:
            continue
        matched = sum(min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items())
        p_sum += matched / cand_total if cand_total else 0.0
        r_sum += matched / ref_total if ref_total else 0.0
        orders += 1
    if orders == 0:
        return 0.0, 0.0, 0.0
    precision = p_sum / orders
    recall = r_sum / orders
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


# -- NIST ------------------------------------------------------------------------


def nist_info_weights(reference_corpus, max_n: int = 5) -> dict:
    """Information weights log2(count(prefix) / count(ngram)) from a corpus of
    reference token sequences; the order-1 prefix count is the total number
    of unigram tokens."""
    counts: list[Counter] = [Counter() for _ in range(max_n + 1)]
    for ref in reference_corpus:
        ref = list(ref)
        for n in range(1, max_n + 1):
            counts[n].update(ngram_counts(ref, n))
    total_unigrams = sum(counts[1].values())
    info: dict[tuple, float] = {}
    for n in range(1, max_n + 1):
        for gram, c in counts[n].items():
            prefix_count = total_unigrams if n == 1 else counts[n - 1][gram[:-1]]
            info[gram] = math.log2(prefix_count / c)
    return info


def nist(candidate, references, max_n: int = 5, info: dict | None = None) -> float:
    """Information-weighted n-gram score with the NIST brevity factor."""
    cand = list(candidate)
    refs = [list(r) for r in references]
    if not cand or not refs:
        return 0.0
    if info is None:
        info = nist_info_weights(refs, max_n)
    score = 0.0
    for n in range(1, max_n + 1):
        cand_counts = ngram_counts(cand, n)
        total = sum(cand_counts.values())
        if total == 0:
            continue
        ref_counts = [ngram_counts(r, n) for r in refs]
        weighted = 0.0
        for gram, count in cand_counts.items():
            best = max((rc.get(gram, 0) for rc in ref_counts), default=0)
            matched = min(count, best)
            if matched:
                weighted += matched * info.get(gram, 0.0)
        score += weighted / total
    c = len(cand)
    r_mean = sum(len(r) for r in refs) / len(refs)
    ratio = min(c / r_mean, 1.0)
    bp = math.exp(_NIST_BETA * math.log(ratio) ** 2) if ratio < 1.0 else 1.0
    return score * bp


# -- RIBES -----------------------------------------------------------------------


def _unique_alignment(candidate, reference) -> list[int]:
    """Reference positions of candidate tokens occurring exactly once on both
    sides, listed in candidate order."""
    cand_counts = Counter(candidate)
    ref_counts = Counter(reference)
    ref_pos = {tok: i for i, tok in enumerate(reference)}
    return [ref_pos[tok] for tok in candidate if cand_counts[tok] == 1 and ref_counts[tok] == 1]


def ribes(candidate, reference, alpha: float = 0.25, beta: float = 0.10) -> float:
    """Rank-correlation metric over one-to-one word alignments."""
    cand = list(candidate)
    ref = list(reference)
    if not cand or not ref:
        return 0.0
    aligned = _unique_alignment(cand, ref)
    n = len(aligned)
    if n == 0:
        return 0.0
    if n == 1:
        nkt = 0.5
    else:
        concordant = sum(1 for i in range(n) for j in range(i + 1, n) if aligned[i] < aligned[j])
        pairs = n * (n - 1) // 2
        tau = (2 * concordant - pairs) / pairs
        nkt = (tau + 1.0) / 2.0
    cand_counts = ngram_counts(cand, 1)
    ref_counts = ngram_counts(ref, 1)
    matched = sum(min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items())
    p1 = matched / len(cand)
    bp = min(1.0, math.exp(1.0 - len(ref) / len(cand)))
    return nkt * (p1**alpha) * (bp**beta)


# -- TER -------------------------------------------------------------------------


def _edit_distance(a, b) -> int:
    """Word-level Levenshtein distance with unit costs."""
    if a == b:
        return 0
    prev = np.arange(len(b) + 1)
    for i, tok in enumerate(a, start=1):
        cur = np.empty(len(b) + 1, dtype=np.int64)
        cur[0] = i
        sub = prev[:-1] + np.fromiter((0 if tok == bt else 1 for bt in b), dtype=np.int64, count=len(b))
        np.minimum(sub, prev[1:] + 1, out=sub)
        for j in range(1, len(b) + 1):
            cur[j] = min(sub[j - 1], cur[j - 1] + 1)
        prev = cur
    return int(prev[-1])


def _ref_spans(reference, max_len: int) -> set[tuple]:
    spans = set()
    ref = list(reference)
    for length in range(1, min(max_len, len(ref)) + 1):
        for start in range(len(ref) - length + 1):
            spans.add(tuple(ref[start : start + length]))
    return spans


def _best_shift(current, reference, ref_spans) -> tuple[int, list] | None:
    """First shift (span length asc, start asc, destination asc) reaching the
    minimal post-shift edit distance; None when no shift is possible."""
    best_dist = None
    best_seq = None
    n = len(current)
    for length in range(1, min(_TER_MAX_SHIFT_LEN, n) + 1):
        for start in range(n - length + 1):
            span = tuple(current[start : start + length])
            if span not in ref_spans:
                continue
            rest = current[:start] + current[start + length :]
            for dest in range(len(rest) + 1):
                if dest == start:
                    continue
                shifted = rest[:dest] + list(span) + rest[dest:]
                d = _edit_distance(shifted, reference)
                if best_dist is None or d < best_dist:
                    best_dist = d
                    best_seq = shifted
    if best_dist is None:
        return None
    return best_dist, best_seq


def ter(candidate, reference) -> float:
    """Translation edit rate: (edits + block shifts) / reference length."""
    cand = list(candidate)
    ref = list(reference)
    if not ref:
        raise ValueError("ter needs a non-empty reference")
    spans = _ref_spans(ref, _TER_MAX_SHIFT_LEN)
    shifts = 0
    current = cand
    dist = _edit_distance(current, ref)
    while dist > 0:
        found = _best_shift(current, ref, spans)
        if found is None:
            break
        new_dist, shifted = found
        if new_dist >= dist:  # each shift costs one edit, so require a strict gain
            break
        current = shifted
        shifts += 1
        dist = new_dist
    return (dist + shifts) / len(ref)


# -- embedding-based metrics -------------------------------------------------------


def wmd_similarity(candidate, reference, embeddings) -> float:
    """Optimal-transport similarity between bag-of-token distributions.

    `embeddings` maps token -> vector with an "[UNK]" fallback for tokens it
    does not cover. Distance is the exact transportation LP optimum under
    Euclidean ground costs; the reported value is 1 / (1 + distance).
    """
    cand = list(candidate)
    ref = list(reference)
    if not cand or not ref:
        raise ValueError("wmd needs non-empty sentences")
    cand_counts = Counter(cand)
    ref_counts = Counter(ref)
    if cand_counts == ref_counts:
        return 1.0
    cand_toks = sorted(cand_counts)
    ref_toks = sorted(ref_counts)

    def vec(tok):
        if tok in embeddings:
            return np.asarray(embeddings[tok], dtype=np.float64)
        return np.asarray(embeddings["[UNK]"], dtype=np.float64)

    p = np.array([cand_counts[t] for t in cand_toks], dtype=np.float64)
    p /= p.sum()
    q = np.array([ref_counts[t] for t in ref_toks], dtype=np.float64)
    q /= q.sum()
    cv = np.stack([vec(t) for t in cand_toks])
    rv = np.stack([vec(t) for t in ref_toks])
    cost = np.linalg.norm(cv[:, None, :] - rv[None, :, :], axis=2)
    distance = transport_cost(p, q, cost)
    return 1.0 / (1.0 + distance)


def transport_cost(p: np.ndarray, q: np.ndarray, cost: np.ndarray) -> float:
    """Exact optimal transport between distributions p and q (LP solve)."""
    m, n = cost.shape
    a_eq = np.zeros((m + n, m * n))
    for i in range(m):
        a_eq[i, i * n : (i + 1) * n] = 1.0
    for j in range(n):
        a_eq[m + j, j::n] = 1.0
    b_eq = np.concatenate([p, q])
    res = linprog(cost.reshape(-1), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def embed_score(candidate: str, reference: str, encoder, vocab) -> tuple[float, float, float]:
    """Greedy max-cosine matching of contextual token vectors.

    Precision averages, over candidate tokens, the best cosine against any
    reference token (floored at 0); recall is symmetric; F1 is their harmonic
    mean. Empty sides score zeros.
    """
    cand_vecs = _token_vectors(candidate, encoder, vocab)
    ref_vecs = _token_vectors(reference, encoder, vocab)
    if cand_vecs.shape[0] == 0 or ref_vecs.shape[0] == 0:
        return 0.0, 0.0, 0.0
    sims = _cosine_table(cand_vecs, ref_vecs)
    sims = np.maximum(sims, 0.0)
    precision = float(sims.max(axis=1).mean())
    recall = float(sims.max(axis=0).mean())
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def _token_vectors(text: str, encoder, vocab) -> np.ndarray:
    from .tokenizer import NUM_RESERVED, encode

    seq = encode(text, vocab, max_len=encoder.config.max_len, mode="encoder")
    out = encoder.encode(seq)
    rows = [i for i, (tok, real) in enumerate(zip(seq.ids, seq.attention_mask)) if real and (tok >= NUM_RESERVED or tok == 1)]
    return out.token_reps.data[rows] if rows else np.zeros((0, encoder.config.hidden_dim))


def _cosine_table(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = a / np.linalg.norm(a, axis=1, keepdims=True).clip(min=1e-12)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True).clip(min=1e-12)
    return an @ bn.T


# -- corpus-level metrics -----------------------------------------------------------


def entropy(corpus_tokens) -> float:
    """Shannon entropy (bits) of the corpus unigram distribution."""
    counts = Counter(corpus_tokens)
    total = sum(counts.values())
    if total == 0:
        raise ValueError("entropy needs a non-empty corpus")
    return -sum((c / total) * math.log2(c / total) for c in counts.values())


def lexical_diversity(corpus_tokens) -> float:
    """Type-token ratio: distinct unigrams / total unigrams."""
    tokens = list(corpus_tokens)
    if not tokens:
        raise ValueError("lexical_diversity needs a non-empty corpus")
    return len(set(tokens)) / len(tokens)


def kl_divergence(gen_corpus, ref_corpus) -> float:
    """KL(gen || ref) over add-one-smoothed unigram distributions on the
    union vocabulary, natural log."""
    gen_counts = Counter(gen_corpus)
    ref_counts = Counter(ref_corpus)
    union = sorted(set(gen_counts) | set(ref_counts))
    if not union:
        raise ValueError("kl_divergence needs non-empty corpora")
    gen_total = sum(gen_counts.values()) + len(union)
    ref_total = sum(ref_counts.values()) + len(union)
    total = 0.0
    for tok in union:
        p = (gen_counts.get(tok, 0) + 1) / gen_total
        q = (ref_counts.get(tok, 0) + 1) / ref_total
        total += p * math.log(p / q)
    return total


# -- corpus report ------------------------------------------------------------------


@dataclass
class MetricReport:
    weighted_p: float
    weighted_r: float
    weighted_f1: float
    bleu1: float
    chrf: float
    gleu: float
    nist: float
    ribes: float
    ter: float
    wmd_similarity: float | None
    embed_p: float | None
    embed_r: float | None
    embed_f1: float | None
    entropy: float
    lexical_diversity: float
    kl_divergence: float
    self_bleu2: float | None
    self_bleu3: float | None

    def to_json(self) -> dict:
        return dict(self.__dict__)


def report(gen_lines, ref_lines, encoder=None, vocab=None, embeddings=None) -> MetricReport:
    """Aggregate the full metric battery over aligned sentence files.

    Sentence-level metrics are averaged over pairs; entropy/diversity/KL/
    Self-BLEU and the NIST information weights are computed over the whole
    corpora. Embedding-based metrics are None unless an encoder (for the
    contextual scores) or an embedding table (for transport similarity) is
    supplied.
    """
    gen_lines = [line.rstrip("\n") for line in gen_lines]
    ref_lines = [line.rstrip("\n") for line in ref_lines]
    if len(gen_lines) != len(ref_lines):
        raise ValueError(f"line count mismatch: {len(gen_lines)} generated vs {len(ref_lines)} reference")
    if not gen_lines:
        raise ValueError("empty input files")
    gen_tok = [char_tokens(line) for line in gen_lines]
    ref_tok = [char_tokens(line) for line in ref_lines]

    if embeddings is None and encoder is not None and vocab is not None:
        embeddings = embedding_table(encoder, vocab)

    info = nist_info_weights(ref_tok, max_n=5)
    w_p = w_r = w_f = 0.0
    bleu1_sum = chrf_sum = gleu_sum = nist_sum = ribes_sum = ter_sum = 0.0
    wmd_sum = 0.0
    wmd_count = 0
    ep_sum = er_sum = ef_sum = 0.0
    embed_count = 0
    pairs = len(gen_lines)
    for g_line, r_line, g, r in zip(gen_lines, ref_lines, gen_tok, ref_tok):
        p, rec, f1 = weighted_prf(g, r)
        w_p += p
        w_r += rec
        w_f += f1
        bleu1_sum += bleu(g, [r], max_n=1)
        chrf_sum += chrf(g_line, r_line)
        gleu_sum += gleu(g, r)
        nist_sum += nist(g, [r], max_n=5, info=info)
        ribes_sum += ribes(g, r)
        ter_sum += ter(g, r) if r else 0.0
        if embeddings is not None and g and r:
            wmd_sum += wmd_similarity(g, r, embeddings)
            wmd_count += 1
        if encoder is not None and vocab is not None:
            ep, er, ef = embed_score(g_line, r_line, encoder, vocab)
            ep_sum += ep
            er_sum += er
            ef_sum += ef
            embed_count += 1

    gen_flat = [tok for sent in gen_tok for tok in sent]
    ref_flat = [tok for sent in ref_tok for tok in sent]
    return MetricReport(
        weighted_p=w_p / pairs,
        weighted_r=w_r / pairs,
        weighted_f1=w_f / pairs,
        bleu1=bleu1_sum / pairs,
        chrf=chrf_sum / pairs,
        gleu=gleu_sum / pairs,
        nist=nist_sum / pairs,
        ribes=ribes_sum / pairs,
        ter=ter_sum / pairs,
        wmd_similarity=wmd_sum / wmd_count if wmd_count else None,
        embed_p=ep_sum / embed_count if embed_count else None,
        embed_r=er_sum / embed_count if embed_count else None,
        embed_f1=ef_sum / embed_count if embed_count else None,
        entropy=entropy(gen_flat),
        lexical_diversity=lexical_diversity(gen_flat),
        kl_divergence=kl_divergence(gen_flat, ref_flat),
        self_bleu2=self_bleu(gen_tok, 2) if pairs >= 2 else None,
        self_bleu3=self_bleu(gen_tok, 3) if pairs >= 2 else None,
    )


def embedding_table(encoder, vocab) -> dict[str, np.ndarray]:
    """Static token embedding table extracted from an encoder's input matrix."""
    table: dict[str, np.ndarray] = {}
    emb = encoder.params["tok_emb"].data
    for idx in range(vocab.size):
        table[vocab.token_of(idx)] = emb[idx]
    return table
