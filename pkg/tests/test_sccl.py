from types import SimpleNamespace

import numpy as np
import pytest

from emocap import autodiff as ad
from emocap import sccl


def np_cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def brute_force_loss(speech, caption, categories, w):
    """Independent triple-loop restatement of the loss definition."""
    total = 0.0
    pooled_e = [np.mean(np.atleast_2d(e), axis=0) for e in speech]
    pooled_c = [np.mean(np.atleast_2d(c), axis=0) for c in caption]
    for i in range(len(speech)):
        total += w.w1 * (1 - np_cos(pooled_e[i], pooled_c[i]))
        for j in range(len(speech)):
            if j == i:
                continue
            s = np_cos(pooled_e[i], pooled_c[j])
            if categories[j] == categories[i]:
                total += w.w2 * (1 - s)
            else:
                total += w.w3 * max(0.0, s - w.margin)
    return total


def random_batch(rng, n, k, d=5, rows=True):
    speech, caption, cats = [], [], []
    for c in range(n):
        for _ in range(k):
            shape = (rng.integers(1, 4), d) if rows else (d,)
            speech.append(rng.normal(size=shape))
            caption.append(rng.normal(size=(rng.integers(1, 4), d) if rows else (d,)))
            cats.append(c)
    return sccl.ContrastiveBatch(speech, caption, cats)


class TestPooledCosine:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(3, 4))
        assert sccl.pooled_cosine(a, a).value == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert sccl.pooled_cosine(np.array([[1.0, 0.0]]),
                                  np.array([[0.0, 1.0]])).value == pytest.approx(0.0)

    def test_hand_case(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])  # pools to (0.5, 0.5)
        b = np.array([[1.0, 0.0]])
        assert sccl.pooled_cosine(a, b).value == pytest.approx(np.sqrt(0.5), abs=1e-12)

    def test_zero_norm_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            sccl.pooled_cosine(np.zeros((2, 3)), np.ones((1, 3)))


class TestScclLoss:
    def test_single_pair_matching_caption(self):
        e = np.random.default_rng(1).normal(size=(2, 4))
        batch = sccl.ContrastiveBatch([e], [e.copy()], [0])
        loss = sccl.sccl_loss(batch, sccl.SCCLWeights())
        assert loss.value == pytest.approx(0.0, abs=1e-12)

    def test_two_category_hand_arithmetic(self):
        # two anchors equal own captions; cross-category similarity 0.9,
        # margin 0.5 -> loss = 2 * relu(0.9 - 0.5) = 0.8
        d = 4
        a = np.zeros(d)
        a[0] = 1.0
        b = 0.9 * a + np.sqrt(1 - 0.81) * np.eye(d)[1]
        batch = sccl.ContrastiveBatch([a, b], [a.copy(), b.copy()], [0, 1])
        w = sccl.SCCLWeights(w1=1.0, w2=0.5, w3=1.0, margin=0.5)
        assert sccl.sccl_loss(batch, w).value == pytest.approx(0.8, abs=1e-12)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        batch = random_batch(rng, n, k)
        w = sccl.SCCLWeights(w1=float(rng.uniform(0, 2)), w2=float(rng.uniform(0, 2)),
                             w3=float(rng.uniform(0, 2)) + 0.01,
                             margin=float(rng.uniform(-0.5, 0.5)))
        got = sccl.sccl_loss(batch, w).value
        want = brute_force_loss(batch.speech, batch.caption, batch.categories, w)
        assert got == pytest.approx(want, abs=1e-10)

    def test_nonnegative(self):
        rng = np.random.default_rng(99)
        for _ in range(10):
            batch = random_batch(rng, 2, 2)
            assert sccl.sccl_loss(batch, sccl.SCCLWeights()).value >= 0.0

    def test_monotone_in_cross_category_similarity(self):
        # pushing a cross-category caption toward the anchor raises the loss
        d = 4
        anchor = np.eye(d)[0]
        other = np.eye(d)[1]
        w = sccl.SCCLWeights(w1=1.0, w2=0.5, w3=1.0, margin=0.0)
        losses = []
        for lam in [0.3, 0.5, 0.7, 0.9]:
            cross = lam * anchor + (1 - lam) * other
            batch = sccl.ContrastiveBatch([anchor, other], [anchor.copy(), cross], [0, 1])
            losses.append(sccl.sccl_loss(batch, w).value)
        assert all(b > a for a, b in zip(losses, losses[1:]))

    def test_layout_violation(self):
        with pytest.raises(sccl.BatchLayoutError):
            sccl.ContrastiveBatch([np.ones(3)] * 3, [np.ones(3)] * 3, [0, 0, 1])

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_vs_finite_differences(self, seed):
        rng = np.random.default_rng(200 + seed)
        base = [rng.normal(size=4) for _ in range(4)]
        caps = [rng.normal(size=4) for _ in range(4)]
        cats = [0, 0, 1, 1]
        w = sccl.SCCLWeights(margin=-0.99)  # keep hinge active, away from the kink

        def f(x):
            speech = [x] + base[1:]
            return float(sccl.sccl_loss(
                sccl.ContrastiveBatch(speech, caps, cats), w).value)

        node = ad.param(base[0])
        loss = sccl.sccl_loss(sccl.ContrastiveBatch([node] + base[1:], caps, cats), w)
        ad.backward(loss)
        assert ad.grad_close(node.grad, ad.finite_diff_grad(f, base[0]))


class TestSampler:
    def recs(self, cats):
        return [SimpleNamespace(emotion_category=c) for c in cats]

    def test_forced_full_dataset(self):
        records = self.recs([0, 0, 1, 1])
        idx = sccl.sample_contrastive_batch(records, 2, 2, np.random.default_rng(0))
        assert sorted(idx) == [0, 1, 2, 3]

    def test_deterministic_per_seed(self):
        records = self.recs([0] * 5 + [1] * 5 + [2] * 5)
        a = sccl.sample_contrastive_batch(records, 3, 2, np.random.default_rng(42))
        b = sccl.sample_contrastive_batch(records, 3, 2, np.random.default_rng(42))
        assert a == b

    def test_insufficient_category_named(self):
        records = self.recs(["happy"] * 4 + ["sad"] * 1)
        with pytest.raises(sccl.BatchLayoutError, match="sad"):
            sccl.sample_contrastive_batch(records, 2, 2, np.random.default_rng(0))

    def test_inclusion_frequency_uniform(self):
        records = self.recs([0] * 6 + [1] * 6 + [2] * 6)
        rng = np.random.default_rng(7)
        counts = np.zeros(len(records))
        draws = 10_000
        for _ in range(draws):
            for i in sccl.sample_contrastive_batch(records, 3, 2, rng):
                counts[i] += 1
        p = 2 / 6  # each record: K of 6 category slots per draw
        sigma = np.sqrt(draws * p * (1 - p))
        assert np.all(np.abs(counts - draws * p) < 3 * sigma)
