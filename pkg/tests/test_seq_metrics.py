import itertools
import math
import warnings

import numpy as np
import pytest

from dmch.errors import DataError
from dmch.seq_metrics import (
    CorpusItem, NoNgramWarning, bleu_composite, bleu_n, cider, cider_items, format_table,
    lcs_length, metric_table, read_corpus, rouge_l, write_corpus,
)

# ---------------------------------------------------------------- brute-force oracles


def all_ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def oracle_clipped(corpus, n):
    matched = total = 0
    for pred, ref in corpus:
        p, r = all_ngrams(pred, n), all_ngrams(ref, n)
        for g in set(p):
            matched += min(p.count(g), r.count(g))
        total += len(p)
    return matched, total


def oracle_bp(corpus):
    c = sum(len(p) for p, _ in corpus)
    r = sum(len(r) for _, r in corpus)
    return 1.0 if c > r else math.exp(1 - r / c)


def oracle_bleu_n(corpus, n):
    m, t = oracle_clipped(corpus, n)
    return 0.0 if t == 0 else oracle_bp(corpus) * m / t


def oracle_bleu4(corpus):
    ps = [oracle_clipped(corpus, n) for n in range(1, 5)]
    if any(m == 0 or t == 0 for m, t in ps):
        return 0.0
    return oracle_bp(corpus) * math.exp(sum(math.log(m / t) for m, t in ps) / 4)


def oracle_lcs(a, b):
    # longest subsequence of a (by exhaustive enumeration) that is also a subsequence of b
    def is_subseq(s, t):
        it = iter(t)
        return all(x in it for x in s)

    for k in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            if is_subseq([a[i] for i in idx], b):
                return k
    return 0


def oracle_rouge(corpus, beta=1.2):
    scores = []
    for pred, ref in corpus:
        lcs = oracle_lcs(pred, ref)
        if lcs == 0:
            scores.append(0.0)
            continue
        p, r = lcs / len(pred), lcs / len(ref)
        scores.append((1 + beta ** 2) * p * r / (r + beta ** 2 * p))
    return float(np.mean(scores))


def oracle_cider(corpus):
    refs = [r for _, r in corpus]
    N = len(corpus)
    per_item = np.zeros(N)
    for n in range(1, 5):
        universe = sorted({g for toks in [t for pair in corpus for t in pair] for g in all_ngrams(toks, n)})
        col = {g: j for j, g in enumerate(universe)}
        df = np.array([sum(g in set(all_ngrams(r, n)) for r in refs) for g in universe], dtype=float)
        idf = np.log(N) - np.log(np.maximum(df, 1.0))

        def dense(tokens):
            v = np.zeros(len(universe))
            for g in all_ngrams(tokens, n):
                v[col[g]] += 1
            return v * idf

        for i, (pred, ref) in enumerate(corpus):
            a, b = dense(pred), dense(ref)
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            if na > 0 and nb > 0:
                per_item[i] += a @ b / (na * nb)
    return float(np.mean(10 * per_item / 4))


def random_corpus(rng):
    vocab = [f"w{i}" for i in range(int(rng.integers(3, 9)))]
    items = []
    for _ in range(int(rng.integers(2, 9))):
        ref = list(rng.choice(vocab, int(rng.integers(1, 8))))
        pred = list(rng.choice(vocab, int(rng.integers(1, 8))))
        if rng.random() < 0.3:
            pred = ref[:]
        items.append((pred, ref))
    return items


# ---------------------------------------------------------------- examples


def test_identity_corpus_scores_one():
    corpus = [("a b c d".split(), "a b c d".split()), ("x y z w v".split(), "x y z w v".split())]
    for n in range(1, 5):
        assert bleu_n(corpus, n) == 1.0
    assert rouge_l(corpus) == 1.0
    assert bleu_composite(corpus) == 1.0


def test_unigram_clipped_precision_example():
    assert abs(bleu_n([("a b c".split(), "a b d".split())], 1) - 2 / 3) < 1e-15


def test_disjoint_vocabularies_score_zero():
    corpus = [("a b".split(), "c d".split()), ("e".split(), "f g".split())]
    assert bleu_n(corpus, 1) == 0.0
    assert rouge_l(corpus) == 0.0
    assert cider(corpus) == 0.0


def test_clipping_caps_repeats():
    assert abs(bleu_n([("a a a a".split(), "a b c d".split())], 1) - 0.25) < 1e-15


def test_too_short_predictions_flagged():
    with pytest.warns(NoNgramWarning):
        assert bleu_n([("a b".split(), "a b c".split())], 3) == 0.0


def test_rouge_example():
    # LCS 2: precision 1, recall 2/3
    p, r, b = 1.0, 2 / 3, 1.2
    want = (1 + b * b) * p * r / (r + b * b * p)
    assert abs(rouge_l([("a c".split(), "a b c".split())]) - want) < 1e-15
    assert lcs_length("a c".split(), "a b c".split()) == 2


def test_cider_identity_equal_scores():
    seqs = ["dress solid red v", "shirt striped blue round", "skirt dotted green v"]
    corpus = [(s.split(), s.split()) for s in seqs]
    scores = cider_items(corpus)
    assert all(abs(s - 10.0) < 1e-12 for s in scores)


def test_cider_three_item_hand_computation():
    corpus = [(["a", "b"], ["a", "c"]), (["c"], ["c"]), (["b", "b"], ["b", "a"])]
    # unigram df over references: a:2, b:1, c:2; idf = ln3 - ln df
    l3, l2 = math.log(3), math.log(3) - math.log(2)
    # item 1: pred {a: l2, b: l3}, ref {a: l2, c: l2}
    s1 = (l2 * l2) / (math.hypot(l2, l3) * math.hypot(l2, l2))
    # item 2: identical single unigram
    s2 = 1.0
    # item 3: pred {b: 2 l3}, ref {b: l3, a: l2}
    s3 = (2 * l3 * l3) / (2 * l3 * math.hypot(l3, l2))
    # no bigram of any prediction occurs in its reference, and orders 3-4 are empty
    want = 10 * (s1 + s2 + s3) / 4 / 3
    assert abs(cider(corpus) - want) < 1e-9


def test_cider_needs_two_items():
    with pytest.raises(DataError, match="document frequencies"):
        cider([(["a"], ["a"])])


# ---------------------------------------------------------------- oracles over random corpora


@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_brute_force(seed):
    corpus = random_corpus(np.random.default_rng(seed))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoNgramWarning)
        for n in range(1, 5):
            assert abs(bleu_n(corpus, n) - oracle_bleu_n(corpus, n)) < 1e-9
    assert abs(bleu_composite(corpus) - oracle_bleu4(corpus)) < 1e-9
    assert abs(rouge_l(corpus) - oracle_rouge(corpus)) < 1e-9
    assert abs(cider(corpus) - oracle_cider(corpus)) < 1e-9


# ---------------------------------------------------------------- properties


@pytest.mark.parametrize("seed", range(20))
def test_metrics_invariant_under_reordering(seed):
    rng = np.random.default_rng(seed)
    corpus = random_corpus(rng)
    shuffled = [corpus[i] for i in rng.permutation(len(corpus))]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoNgramWarning)
        a, b = metric_table(corpus), metric_table(shuffled)
    for k in a:
        assert abs(a[k] - b[k]) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_bleu_orders_decrease_under_single_substitution(seed):
    rng = np.random.default_rng(seed)
    corpus = []
    for _ in range(5):
        ref = [f"t{v}" for v in rng.integers(0, 6, int(rng.integers(5, 9)))]
        pred = ref[:]
        pred[int(rng.integers(len(pred)))] = "oov"
        corpus.append((pred, ref))
    scores = [bleu_n(corpus, n) for n in range(1, 5)]
    assert all(b <= a for a, b in zip(scores, scores[1:]))


# ---------------------------------------------------------------- corpus files


def test_corpus_file_round_trip(tmp_path):
    items = [CorpusItem("i1", ["red", "dress"], ["red", "dress", "v"]), CorpusItem("i2", [], ["x"])]
    write_corpus(tmp_path / "c.tsv", items)
    assert read_corpus(tmp_path / "c.tsv") == items


def test_corpus_file_bad_line(tmp_path):
    (tmp_path / "c.tsv").write_text("only\ttwo\n")
    with pytest.raises(DataError):
        read_corpus(tmp_path / "c.tsv")


def test_table_layout():
    corpus = [("a b".split(), "a b".split()), ("c d".split(), "c e".split())]
    text = format_table(metric_table(corpus))
    head, row = text.splitlines()
    assert head.split("\t") == ["B-1", "B-2", "B-3", "B-4", "ROUGE-L", "CIDEr", "BLEU-4"]
    assert len(row.split("\t")) == 7
