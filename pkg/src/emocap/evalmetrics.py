"""Objective caption scoring: BLEU-1/4, ROUGE-L, and corpus CIDEr.

Tokenization is either per character (default, suits ideographic text)
or whitespace-split words, behind a flag.  Smoothing and weighting rules
follow the conventions documented on each function so scores are
reproducible.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np


@dataclass
class TokenizedPair:
    candidate: list
    references: list  # one or more token lists

    def __post_init__(self):
        if not self.references:
            raise ValueError("at least one reference is required")


def tokenize(text: str, mode: str = "char") -> list:
    if mode == "char":
        return [c for c in text if not c.isspace()]
    if mode == "word":
        return text.split()
    raise ValueError(f"unknown tokenization mode {mode!r} (want 'char' or 'word')")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(pair: TokenizedPair, n_max: int = 4) -> float:
    """Geometric mean of clipped n-gram precisions with brevity penalty.

    Reference length r uses the closest-length rule.  A higher-order
    precision level with zero matches is smoothed to 1/(2*candidate_length)
    so BLEU-4 stays defined for short captions; with no unigram matches at
    all the score is 0.
    """
    if n_max not in (1, 4):
        raise ValueError("n_max must be 1 or 4")
    c = len(pair.candidate)
    if c == 0:
        return 0.0
    ref_lens = [len(r) for r in pair.references]
    r = min(ref_lens, key=lambda L: (abs(L - c), L))
    log_sum = 0.0
    for n in range(1, n_max + 1):
        cand_counts = _ngrams(pair.candidate, n)
        total = max(sum(cand_counts.values()), 1)
        clipped = 0
        for gram, count in cand_counts.items():
            best = max(_ngrams(ref, n).get(gram, 0) for ref in pair.references)
            clipped += min(count, best)
        if clipped == 0 and n == 1:
            return 0.0
        p = clipped / total if clipped > 0 else 1.0 / (2.0 * c)
        log_sum += np.log(p)
    bp = 1.0 if c >= r else float(np.exp(1.0 - r / c))
    return float(bp * np.exp(log_sum / n_max))


def _lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(pair: TokenizedPair) -> float:
    """LCS-based F-measure with beta=1, maximized over references."""
    c = len(pair.candidate)
    if c == 0:
        return 0.0
    best = 0.0
    for ref in pair.references:
        if not ref:
            continue
        lcs = _lcs_length(pair.candidate, ref)
        if lcs == 0:
            continue
        p = lcs / c
        r = lcs / len(ref)
        best = max(best, 2 * p * r / (p + r))
    return best


@dataclass
class CiderScorer:
    """Corpus-level TF-IDF n-gram consensus metric.

    Document frequency df counts, per n-gram, the number of corpus items
    whose reference set contains it; idf = log(n_items / df) with df
    clipped to at least 1.  Per n in 1..4, the score is the cosine
    between TF-IDF vectors of the candidate and each reference, averaged
    over references; the final score averages over n and multiplies by 10.
    """

    pairs: list = field(default_factory=list)
    n_max: int = 4

    def score(self):
        if len(self.pairs) < 2:
            raise ValueError(
                f"CIDEr needs a corpus of at least 2 items, got {len(self.pairs)}"
            )
        n_items = len(self.pairs)
        idf = []
        for n in range(1, self.n_max + 1):
            df = Counter()
            for pair in self.pairs:
                grams = set()
                for ref in pair.references:
                    grams.update(_ngrams(ref, n).keys())
                df.update(grams)
            idf.append({g: np.log(n_items / max(d, 1)) for g, d in df.items()})
        per_item = []
        for pair in self.pairs:
            acc = 0.0
            for n in range(1, self.n_max + 1):
                table = idf[n - 1]
                cand_vec = {g: cnt * table.get(g, np.log(n_items))
                            for g, cnt in _ngrams(pair.candidate, n).items()}
                sims = []
                for ref in pair.references:
                    ref_vec = {g: cnt * table.get(g, np.log(n_items))
                               for g, cnt in _ngrams(ref, n).items()}
                    sims.append(_cosine_sparse(cand_vec, ref_vec))
                acc += float(np.mean(sims))
            per_item.append(10.0 * acc / self.n_max)
        return per_item, float(np.mean(per_item))


def _cosine_sparse(a: dict, b: dict) -> float:
    na = np.sqrt(sum(v * v for v in a.values()))
    nb = np.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    num = sum(v * b[g] for g, v in a.items() if g in b)
    return num / (na * nb)


def cider(pairs) -> tuple[list, float]:
    """Per-item CIDEr scores and the corpus mean."""
    return CiderScorer(pairs=list(pairs)).score()


METRIC_NAMES = ("bleu1", "bleu4", "rouge_l", "cider")


@dataclass
class EvalReport:
    rows: list          # (item id, {metric: value}) in input order
    corpus: dict        # metric name -> corpus mean

    def to_csv(self) -> str:
        lines = ["id," + ",".join(METRIC_NAMES)]
        for item_id, metrics in self.rows:
            lines.append(item_id + "," + ",".join(f"{metrics[m]:.6f}" for m in METRIC_NAMES))
        lines.append("__corpus__," + ",".join(f"{self.corpus[m]:.6f}" for m in METRIC_NAMES))
        return "\n".join(lines) + "\n"


def evaluate_pairs(ids, candidates, references, mode: str = "char") -> EvalReport:
    """Score aligned candidate/reference caption lists."""
    pairs = [TokenizedPair(tokenize(c, mode), [tokenize(r, mode) for r in refs])
             for c, refs in zip(candidates, references)]
    cider_scores, cider_mean = cider(pairs)
    rows = []
    for item_id, pair, cd in zip(ids, pairs, cider_scores):
        rows.append((item_id, {
            "bleu1": bleu(pair, 1),
            "bleu4": bleu(pair, 4),
            "rouge_l": rouge_l(pair),
            "cider": cd,
        }))
    corpus = {m: float(np.mean([r[1][m] for r in rows])) for m in METRIC_NAMES}
    return EvalReport(rows=rows, corpus=corpus)


def evaluate_manifest(predictions: dict, references: dict, mode: str = "char") -> EvalReport:
    """Score predictions against references keyed by item id.

    predictions: id -> caption string; references: id -> list of caption
    strings.  Missing or extra ids are all enumerated in the error.
    """
    missing = sorted(set(references) - set(predictions))
    extra = sorted(set(predictions) - set(references))
    if missing or extra:
        raise ValueError(
            f"manifest id mismatch: missing predictions for {missing}, "
            f"unmatched predictions {extra}"
        )
    ids = sorted(references)
    return evaluate_pairs(ids, [predictions[i] for i in ids],
                          [references[i] for i in ids], mode=mode)
