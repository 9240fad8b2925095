"""Two-stage training orchestration, optimizer, and checkpoints.

Stage 1 trains the bridge network (plus the feature projection and the
variational net) with a weighted sum of the mutual-information upper
bound and the contrastive loss.  Stage 2 trains the bridge and its
decoder-side projection under teacher-forced cross-entropy, with the
decoder core optionally pretrained as a caption language model and then
frozen.  Checkpoints are versioned binary containers with per-tensor
CRC32; training replays bit-identically for a fixed seed and resumes
exactly from any checkpoint.
"""

from __future__ import annotations

import binascii
import json
import os
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import decoder as dec
from . import miestim as mi
from . import qformer as qf
from . import sccl
from .audiofeat import FeatConfig, load_precomputed, load_wav, mel_features
from .data import CaptionRecord, read_manifest

CHECKPOINT_MAGIC = b"EMCK"
CHECKPOINT_VERSION = 1
PARAM_GROUPS = ("featproj", "qformer", "varnet", "decoder", "outproj")


class CheckpointError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 300
    seed: int = 0
    lr: float | None = None          # default 1e-3 stage 1, 5e-4 stage 2
    varnet_lr: float = 1e-3
    # stage-1 loss weights
    w_t1: float = 0.1                # mutual-information penalty
    w_t2: float = 1.0                # contrastive loss
    sccl_w1: float = 1.0
    sccl_w2: float = 0.5
    sccl_w3: float = 1.0
    sccl_margin: float = 0.2
    n_categories: int = 4
    k_per_category: int = 4
    # stage-2 settings
    batch_size: int = 8
    pretrain_decoder_steps: int = 400
    freeze_decoder_after_pretrain: bool = False
    frozen_groups: list[str] = field(default_factory=list)
    # shared
    grad_clip: float = 5.0
    checkpoint_interval: int = 100
    max_caption_len: int = 64
    prompt_bank: str | None = None
    # model dimensions
    n_q: int = 8
    d_q: int = 64
    qf_layers: int = 2
    qf_ff: int = 256
    d_dec: int = 64
    dec_layers: int = 2
    dec_ff: int = 256
    max_positions: int = 256
    mel_bins: int = 40

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValidationError(f"stage must be 1 or 2, got {self.stage}")
        bad = [g for g in self.frozen_groups if g not in PARAM_GROUPS]
        if bad:
            raise ValidationError(f"unknown freeze group(s) {bad}; valid: {PARAM_GROUPS}")
        if self.stage == 1 and self.n_categories * self.k_per_category < 2:
            raise ValidationError("stage 1 needs a contrastive batch of at least 2")
        if self.stage == 2 and self.batch_size < 1:
            raise ValidationError("stage 2 needs batch_size >= 1")

    @property
    def effective_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.stage == 1 else 5e-4

    def sccl_weights(self) -> sccl.SCCLWeights:
        return sccl.SCCLWeights(w1=self.sccl_w1, w2=self.sccl_w2, w3=self.sccl_w3,
                                margin=self.sccl_margin)


_BOOL_STRINGS = {"true": True, "false": False, "1": True, "0": False,
                 "yes": True, "no": False}


def parse_config_file(path) -> TrainConfig:
    """key=value text config; keys mirror the TrainConfig fields."""
    defaults = TrainConfig()
    kwargs = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not hasattr(defaults, key):
                raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
            current = getattr(defaults, key)
            if key == "frozen_groups":
                kwargs[key] = [g for g in value.split(",") if g]
            elif key in ("lr", "prompt_bank"):
                kwargs[key] = None if value in ("", "none") else (
                    float(value) if key == "lr" else value)
            elif isinstance(current, bool):
                if value.lower() not in _BOOL_STRINGS:
                    raise ValidationError(f"{path}:{lineno}: bad boolean {value!r}")
                kwargs[key] = _BOOL_STRINGS[value.lower()]
            elif isinstance(current, int):
                kwargs[key] = int(value)
            elif isinstance(current, float):
                kwargs[key] = float(value)
            else:
                kwargs[key] = value
    return TrainConfig(**kwargs)


def model_configs(cfg: TrainConfig, vocab: dec.Vocab):
    qf_cfg = qf.QFormerConfig(n_q=cfg.n_q, d_q=cfg.d_q, d_k=cfg.d_q, d_v=cfg.d_q,
                              n_layers=cfg.qf_layers, ff_width=cfg.qf_ff,
                              d_in=cfg.mel_bins, d_dec=cfg.d_dec,
                              vocab_size=vocab.size)
    dec_cfg = dec.DecoderConfig(d_dec=cfg.d_dec, n_layers=cfg.dec_layers,
                                ff_width=cfg.dec_ff, max_positions=cfg.max_positions,
                                vocab_size=vocab.size)
    return qf_cfg, dec_cfg


def init_model(cfg: TrainConfig, vocab: dec.Vocab, rng: np.random.Generator) -> dict:
    """All parameter tensors, keyed by group-prefixed names."""
    qf_cfg, dec_cfg = model_configs(cfg, vocab)
    params = {}
    params.update(qf.init_params(rng, qf_cfg))
    params.update(dec.init_params(rng, dec_cfg))
    params.update(mi.init_varnet(rng, cfg.d_q, cfg.d_q))
    # canonical key order: float reductions over the dict (gradient-norm
    # clipping) must not depend on construction order
    return dict(sorted(params.items()))


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with the usual defaults and global-norm gradient clipping."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float, clip: float = 0.0):
        if clip > 0.0:
            norm = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
            if norm > clip:
                grads = {k: g * (clip / norm) for k, g in grads.items()}
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# model fragments shared by the step functions


def _trainable_nodes(params: dict, exclude_groups=("varnet",)) -> dict:
    nodes = {}
    for k, v in params.items():
        if group_of(k) in exclude_groups:
            nodes[k] = v  # stays a plain array (constant in the graph)
        else:
            nodes[k] = ad.param(v)
    return nodes


def _collect_grads(nodes: dict, cfg: TrainConfig) -> dict:
    grads = {}
    for k, v in nodes.items():
        if isinstance(v, ad.Node) and v.grad is not None \
                and group_of(k) not in cfg.frozen_groups:
            grads[k] = v.grad
    return grads


def _pooled(node):
    return ad.mean_rows(node)


def stage1_step(records, feats, params, opt: Adam, cfg: TrainConfig,
                vocab: dec.Vocab, rng: np.random.Generator) -> dict:
    """One combined step: variational-net ascent, then descent on the
    weighted MI-upper-bound + contrastive loss.  Returns the loss report."""
    qf_cfg, _ = model_configs(cfg, vocab)
    idx = sccl.sample_contrastive_batch(records, cfg.n_categories,
                                        cfg.k_per_category, rng)
    batch = [records[i] for i in idx]
    captions = [r.captions[int(rng.integers(len(r.captions)))] for r in batch]

    nodes = _trainable_nodes(params)
    q_e, q_t, q_c = [], [], []
    for rec, cap in zip(batch, captions):
        q_e.append(qf.encode_speech(feats[rec.id], nodes, qf_cfg))
        q_t.append(qf.encode_text(vocab.tokenize(rec.transcription), nodes, qf_cfg,
                                  kind="transcription"))
        q_c.append(qf.encode_text(vocab.tokenize(cap), nodes, qf_cfg, kind="caption"))

    pooled_t = [_pooled(n) for n in q_t]
    pooled_e = [_pooled(n) for n in q_e]

    # variational-net maximization on the current (detached) batch
    if "varnet" not in cfg.frozen_groups:
        xs = np.stack([n.value for n in pooled_t])
        ys = np.stack([n.value for n in pooled_e])
        vsub = {k: params[k] for k in params if group_of(k) == "varnet"}
        mi.train_varnet_step(vsub, xs, ys, lr=cfg.varnet_lr)
        params.update(vsub)
        for k in vsub:
            nodes[k] = params[k]

    xs_node = ad.concat_rows([mi._row(n) for n in pooled_t])
    ys_node = ad.concat_rows([mi._row(n) for n in pooled_e])
    varnet_frozen = {k: params[k] for k in params if group_of(k) == "varnet"}
    u = mi.club_upper_bound(xs_node, ys_node, varnet_frozen)
    batch_obj = sccl.ContrastiveBatch(
        speech=q_e, caption=q_c,
        categories=[r.emotion_category for r in batch])
    l_con = sccl.sccl_loss(batch_obj, cfg.sccl_weights())
    loss = ad.add(ad.scale(u, cfg.w_t1), ad.scale(l_con, cfg.w_t2))
    report = {"U": float(u.value), "L": float(l_con.value),
              "L_T1": float(loss.value)}
    if not np.isfinite(loss.value):
        raise FloatingPointError(f"non-finite stage-1 loss: {report}")
    ad.backward(loss)
    grads = _collect_grads(nodes, cfg)
    if grads:
        opt.step(params, grads, lr=cfg.effective_lr, clip=cfg.grad_clip)
    return report


def _record_tf_loss(rec: CaptionRecord, feats, nodes, cfg, qf_cfg, dec_cfg,
                    vocab, prompt_bank, rng):
    q_e = qf.encode_speech(feats[rec.id], nodes, qf_cfg)
    l_emb = qf.project(q_e, nodes)
    prompt = dec.select_prompt(prompt_bank, rng)
    caption = rec.captions[int(rng.integers(len(rec.captions)))]
    inp = dec.assemble_input(l_emb, vocab.tokenize(prompt), nodes,
                             caption_ids=vocab.tokenize(caption))
    return dec.teacher_forced_loss(inp, nodes, dec_cfg)


def stage2_step(batch, feats, params, opt: Adam, cfg: TrainConfig,
                vocab: dec.Vocab, prompt_bank, rng: np.random.Generator) -> float:
    """Teacher-forced cross-entropy over a batch of records; descent on the
    unfrozen groups."""
    qf_cfg, dec_cfg = model_configs(cfg, vocab)
    nodes = _trainable_nodes(params)
    losses = [_record_tf_loss(r, feats, nodes, cfg, qf_cfg, dec_cfg, vocab,
                              prompt_bank, rng) for r in batch]
    total = losses[0]
    for l in losses[1:]:
        total = ad.add(total, l)
    loss = ad.scale(total, 1.0 / len(losses))
    if not np.isfinite(loss.value):
        raise FloatingPointError(f"non-finite stage-2 loss {loss.value}")
    ad.backward(loss)
    grads = _collect_grads(nodes, cfg)
    if grads:
        opt.step(params, grads, lr=cfg.effective_lr, clip=cfg.grad_clip)
    return float(loss.value)


def pretrain_decoder_step(batch, params, opt: Adam, cfg: TrainConfig,
                          vocab: dec.Vocab, prompt_bank,
                          rng: np.random.Generator) -> float:
    """Caption language-model step with noise in the bridge slots; only the
    decoder core trains, so the layout matches stage 2 while no audio is
    involved."""
    _, dec_cfg = model_configs(cfg, vocab)
    nodes = {k: (ad.param(v) if group_of(k) == "decoder" else v)
             for k, v in params.items()}
    losses = []
    for rec in batch:
        noise = rng.normal(0.0, 0.5, size=(cfg.n_q, cfg.d_dec))
        prompt = dec.select_prompt(prompt_bank, rng)
        caption = rec.captions[int(rng.integers(len(rec.captions)))]
        inp = dec.assemble_input(noise, vocab.tokenize(prompt), nodes,
                                 caption_ids=vocab.tokenize(caption))
        losses.append(dec.teacher_forced_loss(inp, nodes, dec_cfg))
    total = losses[0]
    for l in losses[1:]:
        total = ad.add(total, l)
    loss = ad.scale(total, 1.0 / len(losses))
    ad.backward(loss)
    grads = {k: v.grad for k, v in nodes.items()
             if isinstance(v, ad.Node) and v.grad is not None}
    opt.step(params, grads, lr=cfg.effective_lr, clip=cfg.grad_clip)
    return float(loss.value)


# ---------------------------------------------------------------------------
# checkpoints


def _round_f32(arrays: dict):
    for k in arrays:
        arrays[k] = arrays[k].astype(np.float32).astype(np.float64)


def save_checkpoint(path, params: dict, opt: Adam, cfg: TrainConfig,
                    vocab: dec.Vocab, rng: np.random.Generator, step: int):
    """Write the versioned container; also rounds the live parameters and
    optimizer moments through float32 so an uninterrupted run follows the
    same trajectory as one resumed from this file."""
    _round_f32(params)
    _round_f32(opt.m)
    _round_f32(opt.v)
    tensors = dict(params)
    tensors.update({f"opt.m.{k}": v for k, v in opt.m.items()})
    tensors.update({f"opt.v.{k}": v for k, v in opt.v.items()})
    names = sorted(tensors)
    index = []
    payloads = []
    for name in names:
        payload = tensors[name].astype("<f4").tobytes()
        index.append({"name": name, "shape": list(tensors[name].shape),
                      "crc": binascii.crc32(payload)})
        payloads.append(payload)
    header = {
        "version": CHECKPOINT_VERSION,
        "step": step,
        "opt_t": opt.t,
        "config": asdict(cfg),
        "vocab": vocab.symbols,
        "rng_state": rng.bit_generator.state,
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def load_checkpoint(path):
    """Read and validate a checkpoint; returns a dict with params, opt,
    config, vocab, rng_state, and step."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    version, blob_len = struct.unpack("<IQ", data[4:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {version}, expected {CHECKPOINT_VERSION}: {path}")
    header = json.loads(data[16:16 + blob_len].decode("utf-8"))
    at = 16 + blob_len
    tensors = {}
    for entry in header["tensors"]:
        size = 4 * int(np.prod(entry["shape"])) if entry["shape"] else 4
        payload = data[at:at + size]
        if len(payload) < size:
            raise CheckpointError(f"truncated checkpoint payload for {entry['name']}")
        if binascii.crc32(payload) != entry["crc"]:
            raise CheckpointError(f"checksum failure in tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(payload, dtype="<f4") \
            .astype(np.float64).reshape(entry["shape"])
        at += size
    cfg = TrainConfig(**header["config"])
    params = {k: v for k, v in tensors.items() if not k.startswith("opt.")}
    opt = Adam()
    opt.t = header["opt_t"]
    opt.m = {k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")}
    opt.v = {k[len("opt.v."):]: v for k, v in tensors.items() if k.startswith("opt.v.")}
    vocab = dec.Vocab(symbols=header["vocab"])
    expected = init_model(cfg, vocab, np.random.default_rng(0))
    for name, ref in expected.items():
        if name not in params:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        if params[name].shape != ref.shape:
            raise CheckpointError(
                f"shape drift in tensor {name}: checkpoint {params[name].shape} "
                f"vs config {ref.shape}")
    return {"params": params, "opt": opt, "config": cfg, "vocab": vocab,
            "rng_state": header["rng_state"], "step": header["step"]}


# ---------------------------------------------------------------------------
# features / vocab plumbing


def featurize_records(records, mel_bins: int = 40) -> dict:
    """id -> SpeechFeatures, from WAV (log-mel) or precomputed feature files."""
    cfg = FeatConfig(mel_bins=mel_bins)
    feats = {}
    for rec in records:
        if rec.audio.endswith(".wav"):
            feats[rec.id] = mel_features(load_wav(rec.audio), cfg)
        else:
            feats[rec.id] = load_precomputed(rec.audio, expected_dim=mel_bins)
    return feats


def build_dataset_vocab(records, prompt_bank) -> dec.Vocab:
    texts = list(prompt_bank)
    for rec in records:
        texts.append(rec.transcription)
        texts.extend(rec.captions)
    return dec.build_vocab(texts)


def validate_manifest_records(records, cfg: TrainConfig):
    problems = []
    if not records:
        problems.append("manifest contains no records")
    if cfg.stage == 1 and records:
        by_cat = {}
        for r in records:
            by_cat[r.emotion_category] = by_cat.get(r.emotion_category, 0) + 1
        if len(by_cat) < cfg.n_categories:
            problems.append(
                f"need {cfg.n_categories} categories for stage 1, found {len(by_cat)}")
        for cat, count in sorted(by_cat.items()):
            if count < cfg.k_per_category:
                problems.append(
                    f"category {cat!r} has {count} records, need {cfg.k_per_category}")
    if problems:
        raise ValidationError("; ".join(problems))


# ---------------------------------------------------------------------------
# the training loop


METRICS_HEADER = "step,loss_total,loss_mi,loss_sccl,loss_ce,wall_ms"


def run_training(cfg: TrainConfig, manifest_path, out_dir,
                 init_checkpoint=None, resume_from=None,
                 records=None, feats=None):
    """Seeded, resumable training loop for one stage.

    init_checkpoint seeds the parameters (fresh optimizer/rng); resume_from
    continues an interrupted run exactly.  Returns (params, vocab, final
    checkpoint path, metric rows).
    """
    os.makedirs(out_dir, exist_ok=True)
    if records is None:
        records = [r for r in read_manifest(manifest_path) if r.split == "train"]
    validate_manifest_records(records, cfg)
    prompt_bank = dec.load_prompt_bank(cfg.prompt_bank)

    start_step = 0
    opt = Adam()
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        params, vocab, opt = state["params"], state["vocab"], state["opt"]
        cfg = state["config"]  # carries any freeze applied before the save
        rng = np.random.default_rng(cfg.seed)
        rng.bit_generator.state = state["rng_state"]
        start_step = state["step"]
    elif init_checkpoint is not None:
        state = load_checkpoint(init_checkpoint)
        params, vocab = state["params"], state["vocab"]
        rng = np.random.default_rng(cfg.seed)
    else:
        vocab = build_dataset_vocab(records, prompt_bank)
        rng = np.random.default_rng(cfg.seed)
        params = init_model(cfg, vocab, rng)

    if feats is None:
        feats = featurize_records(records, mel_bins=cfg.mel_bins)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    mode = "a" if (resume_from is not None and os.path.exists(metrics_path)) else "w"
    rows = []
    with open(metrics_path, mode, encoding="utf-8") as log:
        if mode == "w":
            log.write(METRICS_HEADER + "\n")
        # stage-2 decoder language-model pretraining happens once, up front
        if cfg.stage == 2 and start_step == 0 and cfg.pretrain_decoder_steps > 0:
            for _ in range(cfg.pretrain_decoder_steps):
                picks = rng.choice(len(records),
                                   size=min(cfg.batch_size, len(records)),
                                   replace=False)
                pretrain_decoder_step([records[i] for i in picks], params, opt,
                                      cfg, vocab, prompt_bank, rng)
            if cfg.freeze_decoder_after_pretrain and "decoder" not in cfg.frozen_groups:
                cfg.frozen_groups.append("decoder")

        for step in range(start_step + 1, cfg.steps + 1):
            t0 = time.monotonic()
            if cfg.stage == 1:
                report = stage1_step(records, feats, params, opt, cfg, vocab, rng)
                row = (step, report["L_T1"], report["U"], report["L"], 0.0)
            else:
                picks = rng.choice(len(records),
                                   size=min(cfg.batch_size, len(records)),
                                   replace=False)
                ce = stage2_step([records[i] for i in picks], feats, params, opt,
                                 cfg, vocab, prompt_bank, rng)
                row = (step, ce, 0.0, 0.0, ce)
            wall_ms = (time.monotonic() - t0) * 1000.0
            rows.append(row)
            log.write(f"{row[0]},{row[1]:.12g},{row[2]:.12g},{row[3]:.12g},"
                      f"{row[4]:.12g},{wall_ms:.3f}\n")
            if cfg.checkpoint_interval > 0 and step % cfg.checkpoint_interval == 0 \
                    and step < cfg.steps:
                save_checkpoint(os.path.join(out_dir, f"ckpt_{step:06d}.ckpt"),
                                params, opt, cfg, vocab, rng, step)

    final_path = os.path.join(out_dir, "ckpt_final.ckpt")
    save_checkpoint(final_path, params, opt, cfg, vocab, rng, cfg.steps)
    return params, vocab, final_path, rows


# ---------------------------------------------------------------------------
# evaluation helpers


def caption_record(rec: CaptionRecord, feats, params, cfg: TrainConfig,
                   vocab: dec.Vocab, prompt_bank) -> str:
    """Greedy caption for one record using the fixed inference prompt."""
    qf_cfg, dec_cfg = model_configs(cfg, vocab)
    q_e = qf.encode_speech(feats[rec.id], params, qf_cfg)
    l_emb = qf.project(q_e, params).value
    prompt = dec.select_prompt(prompt_bank)
    return dec.generate_greedy(l_emb, vocab.tokenize(prompt), params, dec_cfg,
                               vocab, max_len=cfg.max_caption_len)


def category_keyword_accuracy(records, feats, params, cfg: TrainConfig,
                              vocab: dec.Vocab, prompt_bank) -> float:
    """Fraction of records whose generated caption contains the true
    category's emotion word."""
    hits = 0
    for rec in records:
        word = rec.emotion_category.split("-")[0]
        if word in caption_record(rec, feats, params, cfg, vocab, prompt_bank):
            hits += 1
    return hits / len(records)


def representation_separation(records, feats, params, cfg: TrainConfig,
                              vocab: dec.Vocab) -> float:
    """Mean within-category minus cross-category cosine of pooled speech
    embeddings."""
    qf_cfg, _ = model_configs(cfg, vocab)
    pooled, cats = [], []
    for rec in records:
        q_e = qf.encode_speech(feats[rec.id], params, qf_cfg)
        pooled.append(q_e.value.mean(axis=0))
        cats.append(rec.emotion_category)
    within, cross = [], []
    for i in range(len(pooled)):
        for j in range(i + 1, len(pooled)):
            c = float(np.dot(pooled[i], pooled[j])
                      / (np.linalg.norm(pooled[i]) * np.linalg.norm(pooled[j])))
            (within if cats[i] == cats[j] else cross).append(c)
    return float(np.mean(within) - np.mean(cross))
