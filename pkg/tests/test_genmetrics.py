import math

import numpy as np
import pytest

from medkit import genmetrics as gm
from medkit.numerics import Rng, Tensor

from oracles import (
    bf_bleu,
    bf_chrf,
    bf_gleu,
    bf_ribes,
    bf_self_bleu,
    bf_ter,
    bf_transport_cost,
    bf_weighted_prf,
)

ALPHABET = ["a", "b", "c", "d", "e"]


def _random_sentence(rng, lo=1, hi=8):
    length = int(rng.integers(lo, hi + 1))
    return [ALPHABET[i] for i in rng.integers(0, len(ALPHABET), length)]


# -- BLEU ---------------------------------------------------------------------


def test_bleu_identical_is_one():
    assert gm.bleu(list("abcd"), [list("abcd")], max_n=1) == 1.0


def test_bleu_clipping_hand_case():
    assert gm.bleu(["the", "the", "the"], [["the", "cat"]], max_n=1) == pytest.approx(1 / 3)


def test_bleu_brevity_penalty_hand_case():
    score = gm.bleu(["a", "b"], [["a", "b", "c", "d"]], max_n=1)
    assert score == pytest.approx(math.exp(-1.0), abs=1e-12)


def test_bleu_empty_candidate_is_zero():
    assert gm.bleu([], [["a"]], max_n=1) == 0.0


def test_bleu_matches_oracle_fuzz():
    rng = Rng(100)
    for _ in range(100):
        cand = _random_sentence(rng, 0, 7)
        refs = [_random_sentence(rng) for _ in range(int(rng.integers(1, 3)))]
        n = int(rng.integers(1, 4))
        assert gm.bleu(cand, refs, max_n=n) == pytest.approx(bf_bleu(cand, refs, max_n=n), abs=1e-9)


# -- chrF ---------------------------------------------------------------------


def test_chrf_identical_is_one():
    assert gm.chrf("同样的句子", "同样的句子") == 1.0


def test_chrf_disjoint_is_zero():
    assert gm.chrf("aaaa", "bbbb") == 0.0


def test_chrf_hand_case_ab_abc():
    assert gm.chrf("ab", "abc") == pytest.approx(14 / 33, abs=1e-12)
    assert gm.chrf("ab", "abc") == pytest.approx(bf_chrf("ab", "abc"), abs=1e-12)


def test_chrf_empty_conventions():
    assert gm.chrf("", "") == 1.0
    assert gm.chrf("a", "") == 0.0
    assert gm.chrf("", "a") == 0.0


def test_chrf_matches_oracle_fuzz():
    rng = Rng(101)
    for _ in range(100):
        cand = "".join(_random_sentence(rng, 0, 9))
        ref = "".join(_random_sentence(rng, 0, 9))
        assert gm.chrf(cand, ref) == pytest.approx(bf_chrf(cand, ref), abs=1e-9)


# -- GLEU ---------------------------------------------------------------------


def test_gleu_identical_is_one():
    assert gm.gleu(list("abcd"), list("abcd")) == 1.0


def test_gleu_disjoint_is_zero():
    assert gm.gleu(["a", "a"], ["b", "b"]) == 0.0


def test_gleu_hand_case():
    assert gm.gleu(["a", "b", "c"], ["a", "b", "d"]) == pytest.approx(0.5)
    assert bf_gleu(["a", "b", "c"], ["a", "b", "d"]) == pytest.approx(0.5)


def test_gleu_matches_oracle_fuzz():
    rng = Rng(102)
    for _ in range(100):
        cand = _random_sentence(rng, 0, 8)
        ref = _random_sentence(rng, 1, 8)
        assert gm.gleu(cand, ref) == pytest.approx(bf_gleu(cand, ref), abs=1e-9)


# -- weighted P/R/F1 -------------------------------------------------------------


def test_weighted_prf_identical():
    assert gm.weighted_prf(list("abcde"), list("abcde")) == (1.0, 1.0, 1.0)


def test_weighted_prf_disjoint():
    assert gm.weighted_prf(["a", "a"], ["b", "b"]) == (0.0, 0.0, 0.0)


def test_weighted_prf_hand_case():
    p, r, f1 = gm.weighted_prf(["a", "b", "c"], ["a", "b", "d"])
    assert p == pytest.approx(7 / 18, abs=1e-12)
    assert r == pytest.approx(7 / 18, abs=1e-12)
    assert f1 == pytest.approx(7 / 18, abs=1e-12)


def test_weighted_prf_matches_oracle_fuzz():
    rng = Rng(103)
    for _ in range(100):
        cand = _random_sentence(rng, 0, 8)
        ref = _random_sentence(rng, 0, 8)
        mine = gm.weighted_prf(cand, ref)
        expected = bf_weighted_prf(cand, ref)
        assert mine == pytest.approx(expected, abs=1e-9)


# -- NIST ---------------------------------------------------------------------


def test_nist_zero_match_is_zero():
    assert gm.nist(["x"], [["y"]]) == 0.0


def test_nist_identical_three_word_hand_case():
    sentence = ["a", "b", "c"]
    assert gm.nist(sentence, [sentence]) == pytest.approx(math.log2(3), abs=1e-12)


def test_nist_info_weights_hand_case():
    info = gm.nist_info_weights([["a", "b", "a"]], max_n=2)
    assert info[("a",)] == pytest.approx(math.log2(3 / 2))
    assert info[("b",)] == pytest.approx(math.log2(3 / 1))
    assert info[("a", "b")] == pytest.approx(math.log2(2 / 1))


def test_nist_brevity_factor_halves_at_two_thirds():
    # candidate 2/3 the reference length: brevity factor is 0.5 by construction.
    # order 1 contributes 2 * log2(3) / 2; the matched bigram has info 0.
    short = gm.nist(["a", "b"], [["a", "b", "c"]])
    assert short == pytest.approx(0.5 * math.log2(3), abs=1e-12)


def test_nist_nonnegative_fuzz():
    rng = Rng(104)
    for _ in range(60):
        cand = _random_sentence(rng, 0, 8)
        refs = [_random_sentence(rng, 1, 8)]
        assert gm.nist(cand, refs) >= 0.0


# -- RIBES --------------------------------------------------------------------


def test_ribes_identical_is_one():
    assert gm.ribes(list("abcd"), list("abcd")) == pytest.approx(1.0)


def test_ribes_reversal_is_zero():
    assert gm.ribes(list("dcba"), list("abcd")) == 0.0


def test_ribes_single_shared_word_hand_case():
    score = gm.ribes(["x", "a"], ["a", "y"])
    assert score == pytest.approx(0.5 * 0.5**0.25, abs=1e-12)


def test_ribes_no_alignment_is_zero():
    assert gm.ribes(["x"], ["y"]) == 0.0


def test_ribes_matches_oracle_fuzz():
    rng = Rng(105)
    for _ in range(100):
        cand = _random_sentence(rng, 0, 8)
        ref = _random_sentence(rng, 0, 8)
        assert gm.ribes(cand, ref) == pytest.approx(bf_ribes(cand, ref), abs=1e-9)


# -- TER ----------------------------------------------------------------------


def test_ter_identical_is_zero():
    assert gm.ter(list("abc"), list("abc")) == 0.0


def test_ter_one_insertion_hand_case():
    assert gm.ter(["a", "b", "c", "d"], ["a", "b", "c"]) == pytest.approx(1 / 3)


def test_ter_shift_beats_substitutions():
    assert gm.ter(["c", "a", "b"], ["a", "b", "c"]) == pytest.approx(1 / 3)


def test_ter_empty_reference_errors():
    with pytest.raises(ValueError):
        gm.ter(["a"], [])


def test_ter_upper_bound_fuzz():
    rng = Rng(106)
    for _ in range(60):
        cand = _random_sentence(rng, 0, 8)
        ref = _random_sentence(rng, 1, 8)
        score = gm.ter(cand, ref)
        assert 0.0 <= score <= (len(cand) + len(ref)) / len(ref)


def test_ter_matches_oracle_fuzz():
    rng = Rng(107)
    for _ in range(80):
        cand = _random_sentence(rng, 0, 7)
        ref = _random_sentence(rng, 1, 7)
        assert gm.ter(cand, ref) == pytest.approx(bf_ter(cand, ref), abs=1e-9)


# -- WMD ----------------------------------------------------------------------


def _toy_embeddings():
    rng = Rng(42)
    table = {tok: rng.normal(size=3) for tok in ALPHABET}
    table["[UNK]"] = np.zeros(3)
    return table


def test_wmd_identical_sentences_similarity_one():
    table = _toy_embeddings()
    assert gm.wmd_similarity(["a", "b"], ["b", "a"], table) == 1.0


def test_wmd_single_token_distance_is_embedding_distance():
    table = {"u": np.array([0.0, 0.0]), "v": np.array([3.0, 4.0]), "[UNK]": np.zeros(2)}
    sim = gm.wmd_similarity(["u"], ["v"], table)
    assert sim == pytest.approx(1.0 / 6.0, abs=1e-12)


def test_wmd_unknown_tokens_fall_back_to_unk():
    table = {"a": np.array([1.0, 0.0]), "[UNK]": np.zeros(2)}
    sim = gm.wmd_similarity(["zz"], ["qq"], table)  # both map to [UNK]
    assert sim == pytest.approx(1.0)


def test_wmd_empty_sentence_errors():
    with pytest.raises(ValueError):
        gm.wmd_similarity([], ["a"], _toy_embeddings())


def test_transport_cost_matches_vertex_enumeration_fuzz():
    rng = Rng(108)
    for _ in range(25):
        m = int(rng.integers(1, 4))
        n = int(rng.integers(1, 4))
        p = np.asarray(rng.uniform(0.1, 1.0, m))
        p /= p.sum()
        q = np.asarray(rng.uniform(0.1, 1.0, n))
        q /= q.sum()
        cost = np.abs(rng.normal(size=(m, n)))
        assert gm.transport_cost(p, q, cost) == pytest.approx(bf_transport_cost(p, q, cost), abs=1e-9)


def test_wmd_matches_vertex_oracle_on_sentences():
    rng = Rng(109)
    table = _toy_embeddings()
    for _ in range(15):
        cand = _random_sentence(rng, 1, 4)
        ref = _random_sentence(rng, 1, 4)
        from collections import Counter

        if Counter(cand) == Counter(ref):
            continue
        cand_toks = sorted(set(cand))
        ref_toks = sorted(set(ref))
        p = np.array([cand.count(t) for t in cand_toks], dtype=float)
        p /= p.sum()
        q = np.array([ref.count(t) for t in ref_toks], dtype=float)
        q /= q.sum()
        cost = np.array([[np.linalg.norm(table[a] - table[b]) for b in ref_toks] for a in cand_toks])
        expected = 1.0 / (1.0 + bf_transport_cost(p, q, cost))
        assert gm.wmd_similarity(cand, ref, table) == pytest.approx(expected, abs=1e-9)


# -- embedding score ------------------------------------------------------------


class _StubEncoder:
    """Maps every token id to a fixed vector so cosines are hand-checkable."""

    def __init__(self, vectors_by_id, hidden):
        self.vectors = vectors_by_id
        self.config = type("Cfg", (), {"max_len": 16, "hidden_dim": hidden})()

    def encode(self, seq):
        rows = np.stack([self.vectors.get(t, np.zeros(self.config.hidden_dim)) for t in seq.ids])
        return type("Out", (), {"token_reps": Tensor(rows), "cls_vector": Tensor(rows[0])})()


def test_embed_score_identical_sentence_is_unity():
    from medkit.tokenizer import build_vocab

    vocab = build_vocab(["abc"])
    rng = Rng(7)
    vectors = {i: rng.normal(size=4) for i in range(vocab.size)}
    enc = _StubEncoder(vectors, hidden=4)
    p, r, f1 = gm.embed_score("abc", "abc", enc, vocab)
    assert p == pytest.approx(1.0, abs=1e-12)
    assert r == pytest.approx(1.0, abs=1e-12)
    assert f1 == pytest.approx(1.0, abs=1e-12)


def test_embed_score_hand_cosine_table():
    from medkit.tokenizer import build_vocab

    vocab = build_vocab(["ab"])
    a_id, b_id = vocab.id_of("a"), vocab.id_of("b")
    vectors = {a_id: np.array([1.0, 0.0]), b_id: np.array([0.0, 1.0])}
    enc = _StubEncoder(vectors, hidden=2)
    # candidate "a", reference "ab": best cosine for 'a' is 1; recall side: 'a'->1, 'b'->0
    p, r, f1 = gm.embed_score("a", "ab", enc, vocab)
    assert p == pytest.approx(1.0)
    assert r == pytest.approx(0.5)
    assert f1 == pytest.approx(2 * 1.0 * 0.5 / 1.5)


def test_embed_score_negative_cosines_floor_to_zero():
    from medkit.tokenizer import build_vocab

    vocab = build_vocab(["ab"])
    a_id, b_id = vocab.id_of("a"), vocab.id_of("b")
    vectors = {a_id: np.array([1.0, 0.0]), b_id: np.array([-1.0, 0.0])}
    enc = _StubEncoder(vectors, hidden=2)
    p, r, f1 = gm.embed_score("a", "b", enc, vocab)
    assert (p, r, f1) == (0.0, 0.0, 0.0)


def test_embed_score_empty_side_is_zero():
    from medkit.tokenizer import build_vocab

    vocab = build_vocab(["ab"])
    enc = _StubEncoder({}, hidden=2)
    assert gm.embed_score("", "ab", enc, vocab) == (0.0, 0.0, 0.0)


# -- corpus statistics ------------------------------------------------------------


def test_entropy_single_token_zero():
    assert gm.entropy(["x"] * 10) == 0.0


def test_entropy_uniform_four_tokens():
    assert gm.entropy(["a", "b", "c", "d"]) == 2.0


def test_entropy_half_quarter_quarter():
    assert gm.entropy(["a", "a", "b", "c"]) == pytest.approx(1.5)


def test_entropy_maximal_exactly_at_uniform():
    corpus = ["a", "b", "c", "d", "e", "f", "g", "h"]
    assert gm.entropy(corpus) == math.log2(8)


def test_entropy_empty_errors():
    with pytest.raises(ValueError):
        gm.entropy([])


def test_lexical_diversity_all_distinct():
    assert gm.lexical_diversity(list("abcde")) == 1.0


def test_lexical_diversity_single_type():
    assert gm.lexical_diversity(["x"] * 50) == pytest.approx(0.02)


def test_kl_identical_corpora_zero():
    corpus = list("aabbccdd")
    assert gm.kl_divergence(corpus, list(corpus)) == 0.0


def test_kl_hand_case():
    gen = ["a", "a", "b", "b"]
    ref = ["a", "b", "b", "b"]
    # union {a, b}; add-one: p = (3/6, 3/6), q = (2/6, 4/6)
    expected = 0.5 * math.log(0.5 / (2 / 6)) + 0.5 * math.log(0.5 / (4 / 6))
    assert gm.kl_divergence(gen, ref) == pytest.approx(expected, abs=1e-12)


def test_kl_nonnegative_on_ten_thousand_pairs():
    rng = Rng(110)
    for _ in range(10_000):
        gen = _random_sentence(rng, 1, 12)
        ref = _random_sentence(rng, 1, 12)
        assert gm.kl_divergence(gen, ref) >= 0.0


def test_bounded_metrics_stay_in_range_fuzz():
    rng = Rng(112)
    for _ in range(200):
        cand = _random_sentence(rng, 0, 8)
        ref = _random_sentence(rng, 1, 8)
        assert 0.0 <= gm.bleu(cand, [ref], max_n=2) <= 1.0
        assert 0.0 <= gm.chrf("".join(cand), "".join(ref)) <= 1.0
        assert 0.0 <= gm.gleu(cand, ref) <= 1.0
        assert 0.0 <= gm.ribes(cand, ref) <= 1.0
        assert gm.ter(cand, ref) >= 0.0
        assert gm.nist(cand, [ref]) >= 0.0
        corpus = [_random_sentence(rng, 1, 6) for _ in range(3)]
        assert 0.0 <= gm.self_bleu(corpus, 2) <= 1.0
        assert gm.entropy(ref) >= 0.0


# -- Self-BLEU -----------------------------------------------------------------


def test_self_bleu_identical_sentences():
    corpus = [list("abab")] * 3
    assert gm.self_bleu(corpus, 2) == 1.0


def test_self_bleu_disjoint_vocabularies():
    corpus = [["a", "a"], ["b", "b"], ["c", "c"]]
    assert gm.self_bleu(corpus, 2) == 0.0


def test_self_bleu_single_sentence_errors():
    with pytest.raises(ValueError):
        gm.self_bleu([["a"]], 2)


def test_self_bleu_matches_leave_one_out_oracle():
    rng = Rng(111)
    for _ in range(20):
        corpus = [_random_sentence(rng, 1, 6) for _ in range(3)]
        for n in (2, 3):
            assert gm.self_bleu(corpus, n) == pytest.approx(bf_self_bleu(corpus, n), abs=1e-9)


# -- corpus report ----------------------------------------------------------------


def test_report_diagonal_case():
    lines = ["头痛多喝水好好休息", "发烧要保暖注意降温", "咳嗽的患者要多喝水"]
    rep = gm.report(lines, list(lines))
    assert rep.bleu1 == 1.0
    assert rep.ter == 0.0
    assert rep.kl_divergence == 0.0
    assert rep.chrf == 1.0
    assert rep.weighted_f1 == 1.0


def test_report_permutation_covariant():
    gen = ["abab", "bcbc", "caca", "abba"]
    ref = ["abab", "bccb", "caac", "baab"]
    base = gm.report(gen, ref).to_json()
    order = [2, 0, 3, 1]
    shuffled = gm.report([gen[i] for i in order], [ref[i] for i in order]).to_json()
    for key, value in base.items():
        if value is None:
            assert shuffled[key] is None
            continue
        assert shuffled[key] == pytest.approx(value, abs=1e-12), key


def test_report_length_mismatch_errors():
    with pytest.raises(ValueError):
        gm.report(["a"], ["a", "b"])


def test_report_embedding_metrics_none_without_encoder():
    rep = gm.report(["ab"], ["ab"])
    assert rep.wmd_similarity is None
    assert rep.embed_f1 is None
