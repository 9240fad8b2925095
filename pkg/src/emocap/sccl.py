"""Category-structured contrastive loss between speech and caption embeddings.

Batches hold exactly K speech-caption pairs from each of N emotion
categories.  Each anchor is pulled toward its own caption and the K-1
same-category captions, and pushed below a margin against the NK-K
captions from other categories.  Similarity is the cosine of mean-pooled
embedding rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


class BatchLayoutError(ValueError):
    pass


@dataclass
class SCCLWeights:
    w1: float = 1.0   # anchor vs own caption
    w2: float = 0.5   # anchor vs same-category captions
    w3: float = 1.0   # margin hinge vs other-category captions
    margin: float = 0.2

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or self.w3 < 0:
            raise ValueError("contrastive weights must be nonnegative")
        if self.w1 == self.w2 == self.w3 == 0:
            raise ValueError("at least one contrastive weight must be positive")
        if not (-1.0 <= self.margin <= 1.0):
            raise ValueError(f"margin must lie in [-1, 1], got {self.margin}")


@dataclass
class ContrastiveBatch:
    """Aligned lists of pooled-or-full embeddings plus category ids.

    speech[i] and caption[i] come from the same record; entries may be
    autodiff Nodes (training) or plain arrays (evaluation).
    """

    speech: list
    caption: list
    categories: list

    def __post_init__(self):
        if not (len(self.speech) == len(self.caption) == len(self.categories)):
            raise BatchLayoutError("speech/caption/category lists must align")
        counts = {}
        for c in self.categories:
            counts[c] = counts.get(c, 0) + 1
        k_values = set(counts.values())
        if len(k_values) != 1:
            raise BatchLayoutError(
                f"every category must contribute the same K items, got counts {counts}"
            )
        self.n_categories = len(counts)
        self.k_per_category = k_values.pop()


def _pool(e):
    node = e if isinstance(e, ad.Node) else ad.const(np.asarray(e, dtype=np.float64))
    if node.value.ndim == 2:
        return ad.mean_rows(node)
    return node


def cosine(a, b):
    """Cosine similarity of two vectors as a differentiable Node."""
    norm_a = ad.sqrt(ad.dot(a, a))
    norm_b = ad.sqrt(ad.dot(b, b))
    if norm_a.value == 0.0 or norm_b.value == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm pooled vector")
    return ad.div(ad.dot(a, b), ad.mul(norm_a, norm_b))


def pooled_cosine(a, b):
    """Cosine of the mean-pooled rows of two embedding matrices."""
    return cosine(_pool(a), _pool(b))


def sccl_loss(batch: ContrastiveBatch, w: SCCLWeights):
    """The contrastive training loss over one structured batch.

    Per anchor: w1*(1 - S(e_i, d_i)) + w2*sum over same-category captions
    (1 - S) + w3*sum over other-category captions of ReLU(S - margin),
    summed over all anchors.  Returns a scalar Node.
    """
    n_items = len(batch.speech)
    anchors = [_pool(e) for e in batch.speech]
    caps = [_pool(c) for c in batch.caption]
    terms = []
    for i in range(n_items):
        sims = {}

        def sim(j):
            if j not in sims:
                sims[j] = cosine(anchors[i], caps[j])
            return sims[j]

        if w.w1 > 0:
            terms.append(ad.scale(ad.neg(ad.add_const(sim(i), -1.0)), w.w1))
        for j in range(n_items):
            if j == i:
                continue
            if batch.categories[j] == batch.categories[i]:
                if w.w2 > 0:
                    terms.append(ad.scale(ad.neg(ad.add_const(sim(j), -1.0)), w.w2))
            elif w.w3 > 0:
                terms.append(ad.scale(ad.relu(ad.add_const(sim(j), -w.margin)), w.w3))
    if not terms:
        return ad.const(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def sample_contrastive_batch(records, n_categories: int, k_per_category: int,
                             rng: np.random.Generator) -> list:
    """Pick indices for an N x K batch: K records from each of N categories.

    Sampling is uniform without replacement within a category and
    deterministic for a given generator state.  Categories themselves are
    drawn uniformly from those with at least K records when more than N
    exist.
    """
    by_cat = {}
    for idx, rec in enumerate(records):
        by_cat.setdefault(rec.emotion_category, []).append(idx)
    cats = sorted(by_cat)
    if len(cats) < n_categories:
        raise BatchLayoutError(
            f"need {n_categories} categories, dataset has {len(cats)}"
        )
    for c in cats:
        if len(by_cat[c]) < k_per_category:
            raise BatchLayoutError(
                f"category {c!r} has only {len(by_cat[c])} records, need {k_per_category}"
            )
    chosen_cats = [cats[i] for i in rng.choice(len(cats), size=n_categories, replace=False)]
    indices = []
    for c in chosen_cats:
        pool = by_cat[c]
        picks = rng.choice(len(pool), size=k_per_category, replace=False)
        indices.extend(pool[p] for p in picks)
    return indices
