"""Small causal text decoder.

Consumes the fixed input layout BOS + bridge-embedding rows + prompt
(+ caption during training), computes teacher-forced cross-entropy over
caption positions only, and generates captions by greedy argmax decoding
at inference.  Character-level tokenization over the dataset alphabet.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .qformer import sinusoidal_positions, xavier

BOS, EOS, PAD = 0, 1, 2
N_SPECIALS = 3


class TokenError(ValueError):
    pass


@dataclass
class Vocab:
    """Dense symbol<->id bijection; ids 0..2 are BOS/EOS/PAD."""

    symbols: list[str]
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise TokenError("duplicate symbols in vocabulary")
        self._index = {s: i + N_SPECIALS for i, s in enumerate(self.symbols)}

    @property
    def size(self) -> int:
        return N_SPECIALS + len(self.symbols)

    def tokenize(self, text: str) -> list[int]:
        ids = []
        for offset, ch in enumerate(text):
            if ch not in self._index:
                raise TokenError(
                    f"character {ch!r} at offset {offset} is not in the vocabulary"
                )
            ids.append(self._index[ch])
        return ids

    def detokenize(self, ids) -> str:
        chars = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i < 0 or i >= self.size:
                raise TokenError(f"invalid token id {i} for vocabulary of size {self.size}")
            if i >= N_SPECIALS:
                chars.append(self.symbols[i - N_SPECIALS])
        return "".join(chars)


def build_vocab(texts) -> Vocab:
    """Character vocabulary over all text the model will ever see."""
    alphabet = sorted({ch for t in texts for ch in t})
    return Vocab(symbols=alphabet)


@dataclass
class DecoderConfig:
    d_dec: int = 64
    n_layers: int = 2
    ff_width: int = 256
    max_positions: int = 256
    vocab_size: int = 64


def init_params(rng: np.random.Generator, cfg: DecoderConfig) -> dict:
    p = {}
    p["decoder.tok"] = rng.normal(0.0, 0.5, size=(cfg.vocab_size, cfg.d_dec))
    for i in range(cfg.n_layers):
        pre = f"decoder.L{i}."
        for w in ("Wq", "Wk", "Wv", "Wo"):
            p[pre + "att." + w] = xavier(rng, (cfg.d_dec, cfg.d_dec))
        p[pre + "ff.W1"] = xavier(rng, (cfg.d_dec, cfg.ff_width))
        p[pre + "ff.b1"] = np.zeros(cfg.ff_width)
        p[pre + "ff.W2"] = xavier(rng, (cfg.ff_width, cfg.d_dec))
        p[pre + "ff.b2"] = np.zeros(cfg.d_dec)
        for ln in ("ln1", "ln2"):
            p[pre + ln + ".g"] = np.ones(cfg.d_dec)
            p[pre + ln + ".b"] = np.zeros(cfg.d_dec)
    p["decoder.lnf.g"] = np.ones(cfg.d_dec)
    p["decoder.lnf.b"] = np.zeros(cfg.d_dec)
    p["decoder.out.W"] = xavier(rng, (cfg.d_dec, cfg.vocab_size))
    p["decoder.out.b"] = np.zeros(cfg.vocab_size)
    return p


@dataclass
class DecoderInput:
    """Assembled input embeddings plus segment boundary metadata.

    Segment order is fixed: BOS, bridge rows, prompt, then (training
    only) caption.  Loss positions cover exactly the caption tokens plus
    the terminal EOS.
    """

    embeddings: object               # Node, (total_len, d_dec)
    bridge_len: int
    prompt_len: int
    caption_ids: list[int] | None

    @property
    def total_len(self) -> int:
        return self.embeddings.value.shape[0]

    @property
    def caption_start(self) -> int:
        return 1 + self.bridge_len + self.prompt_len

    @property
    def n_loss_positions(self) -> int:
        return 0 if self.caption_ids is None else len(self.caption_ids) + 1

    def boundary_metadata(self) -> dict:
        return {
            "bridge_len": self.bridge_len,
            "prompt_len": self.prompt_len,
            "caption_len": None if self.caption_ids is None else len(self.caption_ids),
        }


def assemble_input(l_embedding, prompt_ids, params, caption_ids=None) -> DecoderInput:
    """Concatenate BOS, bridge-embedding rows, prompt, and optional caption."""
    if len(prompt_ids) == 0:
        raise ValueError("assemble_input: prompt must be non-empty")
    l_node = l_embedding if isinstance(l_embedding, ad.Node) \
        else ad.const(np.asarray(l_embedding, dtype=np.float64))
    tok = params["decoder.tok"]
    tok = tok if isinstance(tok, ad.Node) else ad.const(tok)
    parts = [ad.take_rows(tok, [BOS]), l_node, ad.take_rows(tok, list(prompt_ids))]
    if caption_ids is not None:
        parts.append(ad.take_rows(tok, list(caption_ids)))
    return DecoderInput(
        embeddings=ad.concat_rows(parts),
        bridge_len=l_node.value.shape[0],
        prompt_len=len(prompt_ids),
        caption_ids=None if caption_ids is None else [int(c) for c in caption_ids],
    )


def _node(params, name):
    v = params[name]
    return v if isinstance(v, ad.Node) else ad.const(v)


def forward_logits(inp: DecoderInput, params, cfg: DecoderConfig):
    """Causal transformer forward pass: (total_len, vocab_size) logits."""
    t = inp.total_len
    if t > cfg.max_positions:
        raise ValueError(
            f"sequence length {t} exceeds positional-encoding capacity {cfg.max_positions}"
        )
    x = ad.add(inp.embeddings, ad.const(sinusoidal_positions(t, cfg.d_dec)))
    mask = np.triu(np.full((t, t), -1e9), k=1)  # position i attends to <= i
    for i in range(cfg.n_layers):
        pre = f"decoder.L{i}."
        h = ad.layer_norm_rows(x, _node(params, pre + "ln1.g"), _node(params, pre + "ln1.b"))
        q = ad.matmul(h, _node(params, pre + "att.Wq"))
        k = ad.matmul(h, _node(params, pre + "att.Wk"))
        v = ad.matmul(h, _node(params, pre + "att.Wv"))
        scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(cfg.d_dec))
        att = ad.matmul(ad.softmax_rows(ad.add(scores, ad.const(mask))), v)
        x = ad.add(x, ad.matmul(att, _node(params, pre + "att.Wo")))
        h = ad.layer_norm_rows(x, _node(params, pre + "ln2.g"), _node(params, pre + "ln2.b"))
        h = ad.relu(ad.add_rowvec(ad.matmul(h, _node(params, pre + "ff.W1")),
                                  _node(params, pre + "ff.b1")))
        h = ad.add_rowvec(ad.matmul(h, _node(params, pre + "ff.W2")),
                          _node(params, pre + "ff.b2"))
        x = ad.add(x, h)
    x = ad.layer_norm_rows(x, _node(params, "decoder.lnf.g"), _node(params, "decoder.lnf.b"))
    return ad.add_rowvec(ad.matmul(x, _node(params, "decoder.out.W")),
                         _node(params, "decoder.out.b"))


def teacher_forced_loss(inp: DecoderInput, params, cfg: DecoderConfig):
    """Mean cross-entropy over caption positions plus the terminal EOS.

    No loss is computed at BOS, bridge, or prompt positions.
    """
    if inp.caption_ids is None:
        raise ValueError("teacher_forced_loss: input has no caption segment")
    logits = forward_logits(inp, params, cfg)
    targets = inp.caption_ids + [EOS]
    start = inp.caption_start - 1  # each position predicts the next token
    rows = ad.slice_rows(ad.log_softmax_rows(logits), start, start + len(targets))
    return ad.neg(ad.mean_all(ad.pick(rows, targets)))


def generate_greedy(l_embedding, prompt_ids, params, cfg: DecoderConfig,
                    vocab: Vocab, max_len: int = 64) -> str:
    """Iterative argmax decoding; stops at EOS or max_len symbols.

    Deterministic; argmax ties break toward the lowest token id.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    generated: list[int] = []
    for _ in range(max_len):
        inp = assemble_input(l_embedding, prompt_ids, params,
                             caption_ids=generated if generated else [])
        logits = forward_logits(inp, params, cfg).value
        nxt = int(np.argmax(logits[-1]))
        if nxt == EOS:
            break
        generated.append(nxt)
    return vocab.detokenize(generated)


def load_prompt_bank(path=None) -> list[str]:
    """Prompt sentences, one per line; defaults to the packaged bank."""
    if path is None:
        text = importlib.resources.files("emocap").joinpath("prompts.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    prompts = [line.strip() for line in text.splitlines() if line.strip()]
    if not prompts:
        raise ValueError("prompt bank is empty")
    return prompts


def select_prompt(bank: list[str], rng: np.random.Generator | None = None) -> str:
    """Uniform draw during training (rng given); fixed first prompt otherwise."""
    if not bank:
        raise ValueError("prompt bank is empty")
    if rng is None:
        return bank[0]
    return bank[int(rng.integers(len(bank)))]
