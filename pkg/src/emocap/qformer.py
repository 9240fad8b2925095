"""Bridge network between speech features and the text decoder.

A fixed set of learnable query vectors self-attends, then cross-attends
over the (projected) speech feature frames, so the output always has n_q
rows regardless of input length.  A cross-attention-free text branch runs
transcriptions and captions through the same self-attention/feed-forward
stack, embedding them into the same d_q space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .audiofeat import SpeechFeatures


@dataclass
class QFormerConfig:
    n_q: int = 8
    d_q: int = 64
    d_k: int = 64
    d_v: int = 64          # kept equal to d_q so residual connections line up
    n_layers: int = 2
    ff_width: int = 256
    d_in: int = 40         # raw speech feature width before the input projection
    d_dec: int = 64        # decoder width targeted by project()
    vocab_size: int = 64


def xavier(rng, shape):
    fan_in, fan_out = shape[0], shape[-1]
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape)


def init_params(rng: np.random.Generator, cfg: QFormerConfig) -> dict:
    """Random (Xavier-style) initialization of all bridge parameters.

    Names are prefixed by freeze group: featproj.*, qformer.*, outproj.*.
    """
    p = {}
    p["featproj.W"] = xavier(rng, (cfg.d_in, cfg.d_q))
    p["featproj.b"] = np.zeros(cfg.d_q)
    p["qformer.queries"] = rng.normal(0.0, 0.5, size=(cfg.n_q, cfg.d_q))
    p["qformer.tok"] = rng.normal(0.0, 0.5, size=(cfg.vocab_size, cfg.d_q))
    for i in range(cfg.n_layers):
        pre = f"qformer.L{i}."
        p[pre + "self.Wq"] = xavier(rng, (cfg.d_q, cfg.d_k))
        p[pre + "self.Wk"] = xavier(rng, (cfg.d_q, cfg.d_k))
        p[pre + "self.Wv"] = xavier(rng, (cfg.d_q, cfg.d_v))
        p[pre + "cross.Wq"] = xavier(rng, (cfg.d_v, cfg.d_k))
        p[pre + "cross.Wk"] = xavier(rng, (cfg.d_q, cfg.d_k))
        p[pre + "cross.Wv"] = xavier(rng, (cfg.d_q, cfg.d_v))
        p[pre + "ff.W1"] = xavier(rng, (cfg.d_q, cfg.ff_width))
        p[pre + "ff.b1"] = np.zeros(cfg.ff_width)
        p[pre + "ff.W2"] = xavier(rng, (cfg.ff_width, cfg.d_q))
        p[pre + "ff.b2"] = np.zeros(cfg.d_q)
        for ln in ("ln1", "ln2", "ln3"):
            p[pre + ln + ".g"] = np.ones(cfg.d_q)
            p[pre + ln + ".b"] = np.zeros(cfg.d_q)
    p["qformer.lnf.g"] = np.ones(cfg.d_q)
    p["qformer.lnf.b"] = np.zeros(cfg.d_q)
    p["outproj.W"] = xavier(rng, (cfg.d_q, cfg.d_dec))
    p["outproj.b"] = np.zeros(cfg.d_dec)
    return p


def self_attend(x, wq, wk, wv, d_k: int):
    """Single-head self-attention: softmax(xWq (xWk)^T / sqrt(d_k)) xWv."""
    q = ad.matmul(x, wq)
    k = ad.matmul(x, wk)
    v = ad.matmul(x, wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    return ad.matmul(ad.softmax_rows(scores), v)


def cross_attend(a_self, s, wq, wk, wv, d_k: int):
    """Cross-attention where the speech frames serve as keys and values."""
    q = ad.matmul(a_self, wq)
    k = ad.matmul(s, wk)
    v = ad.matmul(s, wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(d_k))
    return ad.matmul(ad.softmax_rows(scores), v)


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Standard fixed sine/cosine positional encoding, shape (n, d)."""
    pos = np.arange(n)[:, None].astype(np.float64)
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _feed_forward(x, params, pre):
    h = ad.add_rowvec(ad.matmul(x, params[pre + "ff.W1"]), params[pre + "ff.b1"])
    h = ad.relu(h)
    return ad.add_rowvec(ad.matmul(h, params[pre + "ff.W2"]), params[pre + "ff.b2"])


def _ln(x, params, pre, which):
    return ad.layer_norm_rows(x, params[pre + which + ".g"], params[pre + which + ".b"])


def _run_stack(x, params, cfg: QFormerConfig, s_proj=None):
    """Shared layer stack; the speech branch passes projected frames for
    cross-attention, the text branch passes None and skips that sublayer.
    Pre-norm residual placement throughout."""
    for i in range(cfg.n_layers):
        pre = f"qformer.L{i}."
        h = self_attend(_ln(x, params, pre, "ln1"),
                        params[pre + "self.Wq"], params[pre + "self.Wk"],
                        params[pre + "self.Wv"], cfg.d_k)
        x = ad.add(x, h)
        if s_proj is not None:
            h = cross_attend(_ln(x, params, pre, "ln2"), s_proj,
                             params[pre + "cross.Wq"], params[pre + "cross.Wk"],
                             params[pre + "cross.Wv"], cfg.d_k)
            x = ad.add(x, h)
        x = ad.add(x, _feed_forward(_ln(x, params, pre, "ln3"), params, pre))
    # final normalization keeps the embedding scale bounded, which the
    # MI-minimization objective would otherwise blow up
    return ad.layer_norm_rows(x, params["qformer.lnf.g"], params["qformer.lnf.b"])


def _node(params, name):
    v = params[name]
    return v if isinstance(v, ad.Node) else ad.const(v)


def _wrap(params):
    return {k: _node(params, k) for k in params}


def encode_speech(s: SpeechFeatures, params, cfg: QFormerConfig):
    """Fixed-length speech embedding: (n_q, d_q) for any number of frames."""
    params = _wrap(params)
    if s.frames.shape[1] != cfg.d_in:
        raise ad.ShapeError(
            f"speech feature width {s.frames.shape[1]} != configured d_in {cfg.d_in}"
        )
    s_proj = ad.add_rowvec(ad.matmul(ad.const(s.frames), params["featproj.W"]),
                           params["featproj.b"])
    return _run_stack(params["qformer.queries"], params, cfg, s_proj=s_proj)


def encode_text(token_ids, params, cfg: QFormerConfig, kind: str = "caption"):
    """Text-branch embedding of a token sequence, shape (T, d_q).

    kind is metadata only ("transcription" or "caption"); positions come
    from a fixed sinusoidal encoding, unlike the speech branch.
    """
    if kind not in ("transcription", "caption"):
        raise ValueError(f"unknown text kind: {kind}")
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ValueError("encode_text: empty token sequence")
    params = _wrap(params)
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise IndexError(f"token id out of range for vocab size {cfg.vocab_size}")
    x = ad.take_rows(params["qformer.tok"], ids)
    x = ad.add(x, ad.const(sinusoidal_positions(ids.size, cfg.d_q)))
    return _run_stack(x, params, cfg, s_proj=None)


def project(q_embedding, params):
    """Affine map from bridge space into the decoder input space."""
    params = _wrap(params)
    return ad.add_rowvec(ad.matmul(q_embedding, params["outproj.W"]),
                         params["outproj.b"])
