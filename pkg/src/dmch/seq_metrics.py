"""BLEU-n, ROUGE-L and CIDEr for single-reference token sequences."""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import DataError

Tokens = Sequence[str]


@dataclass
class CorpusItem:
    item_id: str
    prediction: list[str]
    reference: list[str]


class NoNgramWarning(UserWarning):
    pass


def _ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _pairs(corpus) -> list[tuple[list[str], list[str]]]:
    out = []
    for item in corpus:
        if isinstance(item, CorpusItem):
            out.append((list(item.prediction), list(item.reference)))
        else:
            pred, ref = item
            out.append((list(pred), list(ref)))
    if not out:
        raise DataError("empty corpus")
    return out


def clipped_precision(corpus, n: int) -> tuple[int, int]:
    """Corpus totals (clipped matches, predicted n-grams) for order n."""
    matched = total = 0
    for pred, ref in _pairs(corpus):
        p, r = _ngrams(pred, n), _ngrams(ref, n)
        matched += sum(min(c, r[g]) for g, c in p.items())
        total += sum(p.values())
    return matched, total


def brevity_penalty(corpus) -> float:
    pairs = _pairs(corpus)
    c = sum(len(p) for p, _ in pairs)
    r = sum(len(r) for _, r in pairs)
    if c == 0:
        return 0.0
    return 1.0 if c > r else math.exp(1.0 - r / c)


def bleu_n(corpus, n: int) -> float:
    """Corpus clipped n-gram precision of order n times the brevity penalty.

    Returns 0 (with a NoNgramWarning) when no prediction has n tokens.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    matched, total = clipped_precision(corpus, n)
    if total == 0:
        warnings.warn(f"no prediction is long enough for {n}-grams", NoNgramWarning, stacklevel=2)
        return 0.0
    return brevity_penalty(corpus) * matched / total


def bleu_composite(corpus, max_n: int = 4) -> float:
    """Standard BLEU: brevity penalty times the geometric mean of orders 1..max_n."""
    logs = []
    for n in range(1, max_n + 1):
        matched, total = clipped_precision(corpus, n)
        if total == 0 or matched == 0:
            return 0.0
        logs.append(math.log(matched / total))
    return brevity_penalty(corpus) * math.exp(sum(logs) / max_n)


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_item(pred: Tokens, ref: Tokens, beta: float = 1.2) -> float:
    lcs = lcs_length(pred, ref)
    if lcs == 0:
        return 0.0
    prec, rec = lcs / len(pred), lcs / len(ref)
    return (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)


def rouge_l(corpus, beta: float = 1.2) -> float:
    """Mean LCS F-measure; beta = 1.2 weights recall as in the COCO toolkit."""
    pairs = _pairs(corpus)
    return sum(rouge_l_item(p, r, beta) for p, r in pairs) / len(pairs)


def cider_items(corpus, max_n: int = 4) -> list[float]:
    """Per-item CIDEr: 10 x mean over n of the TF-IDF cosine between the
    prediction and its reference, with document frequencies taken over the
    references."""
    pairs = _pairs(corpus)
    if len(pairs) < 2:
        raise DataError("CIDEr needs at least 2 items to estimate document frequencies")
    log_n = math.log(len(pairs))
    df: Counter = Counter()
    for _, ref in pairs:
        for n in range(1, max_n + 1):
            df.update(_ngrams(ref, n).keys())

    def vec(tokens, n):
        return {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in _ngrams(tokens, n).items()}

    scores = []
    for pred, ref in pairs:
        total = 0.0
        for n in range(1, max_n + 1):
            vp, vr = vec(pred, n), vec(ref, n)
            norm_p = math.sqrt(sum(v * v for v in vp.values()))
            norm_r = math.sqrt(sum(v * v for v in vr.values()))
            if norm_p == 0 or norm_r == 0:
                continue
            dot = sum(v * vr.get(g, 0.0) for g, v in vp.items())
            total += dot / (norm_p * norm_r)
        scores.append(10.0 * total / max_n)
    return scores


def cider(corpus, max_n: int = 4) -> float:
    scores = cider_items(corpus, max_n)
    return sum(scores) / len(scores)


def metric_table(corpus) -> dict[str, float]:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoNgramWarning)
        row = {f"B-{n}": bleu_n(corpus, n) for n in range(1, 5)}
    row["ROUGE-L"] = rouge_l(corpus)
    row["CIDEr"] = cider(corpus) if len(_pairs(corpus)) >= 2 else float("nan")
    row["BLEU-4"] = bleu_composite(corpus)
    return row


def format_table(row: dict[str, float]) -> str:
    keys = list(row)
    return "\t".join(keys) + "\n" + "\t".join(f"{row[k]:.4f}" for k in keys)


def read_corpus(path) -> list[CorpusItem]:
    items = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"{path}:{lineno}: expected 3 tab-separated fields")
        items.append(CorpusItem(parts[0], parts[1].split(), parts[2].split()))
    return items


def write_corpus(path, items: Sequence[CorpusItem]) -> None:
    lines = [f"{it.item_id}\t{' '.join(it.prediction)}\t{' '.join(it.reference)}" for it in items]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
