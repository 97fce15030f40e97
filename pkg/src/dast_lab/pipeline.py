"""Training orchestration: AdamW, warmup+cosine schedule, both stages,
checkpoint persistence, and the ablation switches.

Stage 1 trains the encoder, disease tokens, and classifier heads. Stage 2
first pretrains the small decoder on the prompt layout (its stand-in for
being a pretrained language model), then freezes everything except the
projection matrix and its layer-norm affine and optimizes the language
modeling loss, optionally with retrieved exemplar prompts.

Checkpoints are a single binary blob of named float64 tensors:
    magic b"DLCKPT1", u32 tensor count, then per tensor
    u16 name length + UTF-8 name, u8 ndim, ndim x u32 dims, f64 data (LE).
Vocabulary and hyperparameters ride along as encoded tensors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dmsr
from .dvaf import FusionParams, build_visual_sequence, dvaf_pool, gate_fuse, project
from .encoder import EncoderParams, SsmBlockParams, encode, pool_mean
from .generator import (
    SPECIAL_TOKENS,
    DecoderBlock,
    DecoderParams,
    Vocabulary,
    apply_freeze,
    assemble_prompt,
    generate,
    lm_loss,
    stage2_freeze_mask,
    tokenize,
)
from .stage1 import DastBank, HashTextEncoder, classify, refine_dasts, stage1_loss
from .tensor import NonFiniteError, Tensor, backward

CKPT_MAGIC = b"DLCKPT1"


class CheckpointError(ValueError):
    """Corrupt or mismatched checkpoint file."""


# -- configuration -----------------------------------------------------------------


@dataclass
class TrainConfig:
    base_lr: float = 1e-4
    warmup_steps: int = 500
    total_steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    stage: int = 1
    use_dast_dvaf: bool = True
    use_dmsr: bool = True
    lambda_: float = 0.5
    tau: float = 0.07
    weight_decay: float = 0.01
    channels: int = 32
    patch_size: int = 4
    depth: int = 2
    refine_depth: int = 1
    decoder_width: int = 64
    decoder_blocks: int = 2
    decoder_ff_mult: int = 4
    decoder_pretrain_steps: int = 600
    decoder_pretrain_lr: float = 2e-3
    max_positions: int = 512
    max_report_len: int = 128
    fusion_mode: str = "linear"
    use_probabilities: bool = False
    early_stop_loss: float = 0.0

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")
        if self.lambda_ < 0 or self.tau <= 0:
            raise ValueError("lambda must be >= 0 and tau > 0")
        if self.fusion_mode not in ("linear", "sigmoid"):
            raise ValueError(f"unknown fusion_mode '{self.fusion_mode}'")


_KEY_ALIASES = {"lambda": "lambda_"}


def parse_config_file(path):
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line {lineno}: '{raw}' (expected key=value)")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _coerce(value, kind):
    if not isinstance(value, str):
        return value
    if kind is bool:
        low = value.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ValueError(f"expected a boolean, got '{value}'")
    return kind(value)


def make_config(config_path=None, overrides=None):
    """TrainConfig from an optional key=value file plus explicit overrides.

    Unknown keys are fatal and name the offending key.
    """
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    defaults = TrainConfig()
    kwargs = {}
    merged = parse_config_file(config_path) if config_path else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value
    for key, value in merged.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in fields:
            raise ValueError(f"unknown config key '{key}'")
        kwargs[name] = _coerce(value, type(getattr(defaults, name)))
    return TrainConfig(**kwargs)


def lr_at(step, cfg):
    """Linear ramp to base_lr over the warmup, then cosine decay to zero."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return cfg.base_lr
    progress = (step - cfg.warmup_steps) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizer ---------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam; state exists only for trainable parameters."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = {n: t for n, t in named_params.items() if t.requires_grad}
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params.items()}
        self.t = 0

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def step(self, lr):
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
            grads[name] = g
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data -= lr * (m_hat / (np.sqrt(v_hat) + self.eps)
                            + self.weight_decay * p.data)


# -- checkpoint persistence -----------------------------------------------------------


def save_checkpoint(path, arrays):
    chunks = [CKPT_MAGIC, struct.pack("<I", len(arrays))]
    for name, value in arrays.items():
        data = np.asarray(value, dtype=np.float64)  # tobytes() emits C order
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", data.ndim))
        if data.ndim:
            chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint file")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError("magic mismatch: not a checkpoint file")
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        n_items = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(take(8 * n_items), dtype="<f8").reshape(shape).copy()
    if pos != len(blob):
        raise CheckpointError("trailing bytes after final tensor")
    return arrays


def _pack_meta(values, keys):
    return np.array([float(values[k]) for k in keys])


def _unpack_meta(arr, keys):
    return {k: float(v) for k, v in zip(keys, arr)}


S1_META_KEYS = ("channels", "patch_size", "depth", "refine_depth", "tau")
S2_META_KEYS = ("channels", "patch_size", "depth", "refine_depth", "decoder_width",
                "decoder_blocks", "decoder_ff_mult", "max_positions", "max_report_len",
                "use_dast_dvaf", "use_dmsr", "lambda_", "tau", "fusion_mode_idx",
                "use_probabilities")
_FUSION_MODES = ("linear", "sigmoid")


def _vocab_to_array(vocab):
    text = " ".join(vocab.tokens[len(SPECIAL_TOKENS):])
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def _vocab_from_array(arr):
    text = bytes(np.asarray(arr, dtype=np.float64).astype(np.uint8)).decode("utf-8")
    return Vocabulary(text.split())


# -- stage 1 -----------------------------------------------------------------------


@dataclass
class Stage1Model:
    encoder: EncoderParams
    bank: DastBank
    text_encoder: HashTextEncoder
    refine_depth: int = 1
    tau: float = 0.07

    @staticmethod
    def init(rng, cfg):
        return Stage1Model(
            EncoderParams.init(rng, cfg.patch_size, cfg.channels, cfg.depth),
            DastBank.init(rng, cfg.channels),
            HashTextEncoder(cfg.channels),
            refine_depth=cfg.refine_depth,
            tau=cfg.tau,
        )

    def named(self):
        return {**self.encoder.named(), **self.bank.named()}

    def forward(self, sample):
        z = encode(sample, self.encoder)
        refined = refine_dasts(self.bank, z, depth=self.refine_depth)
        logits = classify(refined, self.bank)
        return z, pool_mean(z), refined, logits

    def predict(self, sample):
        _, _, _, logits = self.forward(sample)
        return (1.0 / (1.0 + np.exp(-logits.data)) > 0.5).astype(int)


def stage1_arrays(model):
    out = {name: t.data for name, t in model.named().items()}
    out["meta/stage1"] = _pack_meta({
        "channels": model.encoder.channels, "patch_size": model.encoder.patch_size,
        "depth": len(model.encoder.blocks), "refine_depth": model.refine_depth,
        "tau": model.tau}, S1_META_KEYS)
    return out


def stage1_from_arrays(arrays, trainable=False):
    meta = _unpack_meta(arrays["meta/stage1"], S1_META_KEYS)
    channels = int(meta["channels"])
    patch = int(meta["patch_size"])
    depth = int(meta["depth"])
    enc = EncoderParams(patch, channels,
                        Tensor(arrays["encoder/w_embed"], requires_grad=trainable), [])
    for i in range(depth):
        block = SsmBlockParams.__new__(SsmBlockParams)
        for attr in ("decay_raw", "w_in", "w_out", "skip"):
            setattr(block, attr,
                    Tensor(arrays[f"encoder/block{i}/{attr}"], requires_grad=trainable))
        enc.blocks.append(block)
    bank = DastBank(Tensor(arrays["dast/tokens"], requires_grad=trainable),
                    Tensor(arrays["dast/head_w"], requires_grad=trainable),
                    Tensor(arrays["dast/head_b"], requires_grad=trainable))
    return Stage1Model(enc, bank, HashTextEncoder(channels),
                       refine_depth=int(meta["refine_depth"]), tau=meta["tau"])


class _BatchSchedule:
    """Seeded epoch-reshuffled batch index stream."""

    def __init__(self, n, batch_size, rng):
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.queue = deque()

    def next(self):
        while len(self.queue) < self.batch_size:
            self.queue.extend(self.rng.permutation(self.n).tolist())
        return [self.queue.popleft() for _ in range(self.batch_size)]


def run_stage1(cfg, samples, log_path=None):
    """Optimize classification + alignment; returns (model, per-step log)."""
    rng = np.random.default_rng(cfg.seed)
    model = Stage1Model.init(rng, cfg)
    opt = AdamW(model.named(), weight_decay=cfg.weight_decay)
    text_cache = {s.study_id: model.text_encoder.encode(s.report) for s in samples}
    schedule = _BatchSchedule(len(samples), cfg.batch_size, rng)
    log = []
    for step in range(1, cfg.total_steps + 1):
        batch = [samples[i] for i in schedule.next()]
        pooled, texts, logits, labels = [], [], [], []
        for s in batch:
            _, z_bar, _, lg = model.forward(s)
            pooled.append(z_bar)
            texts.append(text_cache[s.study_id])
            logits.append(lg)
            labels.append(s.labels)
        total, parts = stage1_loss(pooled, texts, logits, labels, cfg.tau)
        loss_value = total.item()
        opt.zero_grad()
        backward(total)
        lr = lr_at(step, cfg)
        opt.step(lr)
        log.append({"step": step, "lr": lr, "loss": loss_value, **parts})
    if log_path:
        _write_log(log_path, log)
    return model, log


def _write_log(path, records):
    Path(path).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def macro_f1(pred_rows, true_rows):
    """Binary multilabel macro-F1 with the zero-denominator-is-zero convention."""
    pred = np.asarray(pred_rows)
    true = np.asarray(true_rows)
    scores = []
    for d in range(pred.shape[1]):
        tp = int(np.sum((pred[:, d] == 1) & (true[:, d] == 1)))
        fp = int(np.sum((pred[:, d] == 1) & (true[:, d] == 0)))
        fn = int(np.sum((pred[:, d] == 0) & (true[:, d] == 1)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * p * r / (p + r) if p + r else 0.0)
    return float(np.mean(scores))


def stage1_macro_f1(model, samples):
    pred = [model.predict(s) for s in samples]
    true = [s.labels for s in samples]
    return macro_f1(pred, true)


# -- exemplar index over a trained stage-1 model ----------------------------------------


def build_index(model, samples, lambda_default=dmsr.DEFAULT_LAMBDA):
    index = dmsr.ExemplarIndex(width=model.encoder.channels,
                               lambda_default=lambda_default)
    for s in samples:
        _, z_bar, _, logits = model.forward(s)
        dmsr.add_exemplar(index, dmsr.ExemplarRecord(
            s.study_id, z_bar.data.copy(), logits.data.copy(), s.report))
    return index


# -- stage 2 ------------------------------------------------------------------------


def parameter_checksums(named_params):
    """SHA-256 of each tensor's raw bytes; bit-exact change detection."""
    return {name: hashlib.sha256(t.data.tobytes()).hexdigest()
            for name, t in named_params.items()}


@dataclass
class Stage2Model:
    stage1: Stage1Model
    fusion: FusionParams
    decoder: DecoderParams
    vocab: Vocabulary
    use_dast_dvaf: bool
    use_dmsr: bool
    lambda_: float
    fusion_mode: str = "linear"
    use_probabilities: bool = False
    max_report_len: int = 128
    # checksums of every parameter at the phase-A/phase-B boundary
    boundary_checksums: dict = field(default_factory=dict)

    def named(self):
        return {**self.stage1.named(), **self.fusion.named(), **self.decoder.named()}

    def visual_sequence(self, sample):
        """Constant (grad-free) visual sequence V for one study."""
        z, z_bar, _, logits = self.stage1.forward(sample)
        if self.use_dast_dvaf:
            p = dvaf_pool(self.stage1.bank.tokens, z, self.fusion)
            f = gate_fuse(p, z_bar, self.fusion, mode=self.fusion_mode)
            v = build_visual_sequence(z, f)
        else:
            v = z
        return Tensor(v.data), z_bar.data.copy(), logits.data.copy()

    def retrieved_text(self, index, z_bar, logits, exclude_id):
        if not self.use_dmsr:
            return ""
        return dmsr.retrieve_report(index, z_bar, logits, lam=self.lambda_,
                                    exclude_id=exclude_id,
                                    use_probabilities=self.use_probabilities)


@dataclass
class _StudyCache:
    study_id: str
    v_const: Tensor
    retrieved: str
    target: object


def _prepare_caches(model, samples, index):
    caches = []
    for s in samples:
        v_const, z_bar, logits = model.visual_sequence(s)
        retrieved = model.retrieved_text(index, z_bar, logits, exclude_id=s.study_id)
        caches.append(_StudyCache(s.study_id, v_const, retrieved,
                                  tokenize(s.report, model.vocab)))
    return caches


def _cache_loss(model, cache):
    v_proj = project(cache.v_const, model.fusion)
    prompt = assemble_prompt(model.decoder, model.vocab, cache.retrieved, v_proj,
                             cache.target)
    return lm_loss(model.decoder, prompt)


def _batch_mean_loss(model, caches):
    terms = [_cache_loss(model, c)[1] for c in caches]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def mean_token_loss(model, caches):
    """Grad-free mean per-token loss over a set of cached studies."""
    was = {n: t.requires_grad for n, t in model.named().items()}
    apply_freeze(model.named(), {n: False for n in was})
    value = _batch_mean_loss(model, caches).item()
    apply_freeze(model.named(), was)
    return value


def run_stage2(cfg, samples, stage1_ckpt_arrays, index, log_path=None):
    """Decoder pretraining phase, then projection-only optimization.

    The pretraining phase runs the identical prompt layout with the decoder
    trainable so the frozen decoder knows how to read visual prefixes, the
    same way a production run would start from a language model that already
    understands its inputs. The stage-2 contract applies afterwards: only the
    projection matrix and its layer-norm affine receive updates.
    """
    if cfg.use_dmsr and index is None:
        raise ValueError("stage 2 with retrieval enabled requires an exemplar index")
    rng = np.random.default_rng(cfg.seed)
    s1 = stage1_from_arrays(stage1_ckpt_arrays, trainable=False)
    vocab = Vocabulary.from_corpus([s.report for s in samples])
    fusion = FusionParams(rng, cfg.channels, cfg.decoder_width)
    decoder = DecoderParams.init(rng, len(vocab), cfg.decoder_width,
                                 cfg.max_positions, cfg.decoder_blocks,
                                 cfg.decoder_ff_mult)
    model = Stage2Model(s1, fusion, decoder, vocab,
                        use_dast_dvaf=cfg.use_dast_dvaf, use_dmsr=cfg.use_dmsr,
                        lambda_=cfg.lambda_, fusion_mode=cfg.fusion_mode,
                        use_probabilities=cfg.use_probabilities,
                        max_report_len=cfg.max_report_len)
    caches = _prepare_caches(model, samples, index)
    named = model.named()

    # phase A: decoder (and initial projection) learn the prompt layout
    pretrain_mask = {n: n.startswith("decoder/")
                     or n in ("dvaf/w_proj", "dvaf/proj_gamma", "dvaf/proj_beta")
                     for n in named}
    apply_freeze(named, pretrain_mask)
    opt = AdamW(named, weight_decay=cfg.weight_decay)
    schedule = _BatchSchedule(len(caches), cfg.batch_size, rng)
    for _ in range(cfg.decoder_pretrain_steps):
        batch = [caches[i] for i in schedule.next()]
        loss = _batch_mean_loss(model, batch)
        opt.zero_grad()
        backward(loss)
        opt.step(cfg.decoder_pretrain_lr)

    # phase B: the freeze contract proper
    apply_freeze(named, stage2_freeze_mask(named))
    model.boundary_checksums = parameter_checksums(named)
    opt = AdamW(named, weight_decay=cfg.weight_decay)
    log = []
    for step in range(1, cfg.total_steps + 1):
        batch = [caches[i] for i in schedule.next()]
        loss = _batch_mean_loss(model, batch)
        loss_value = loss.item()
        opt.zero_grad()
        backward(loss)
        lr = lr_at(step, cfg)
        opt.step(lr)
        log.append({"step": step, "lr": lr, "loss": loss_value})
        if cfg.early_stop_loss > 0 and step % 50 == 0:
            if mean_token_loss(model, caches) < cfg.early_stop_loss:
                break
    if log_path:
        _write_log(log_path, log)
    return model, log


def stage2_arrays(model):
    out = {name: t.data for name, t in model.named().items()}
    s1_meta = stage1_arrays(model.stage1)["meta/stage1"]
    out["meta/stage1"] = s1_meta
    out["meta/stage2"] = _pack_meta({
        "channels": model.stage1.encoder.channels,
        "patch_size": model.stage1.encoder.patch_size,
        "depth": len(model.stage1.encoder.blocks),
        "refine_depth": model.stage1.refine_depth,
        "decoder_width": model.decoder.width,
        "decoder_blocks": len(model.decoder.blocks),
        "decoder_ff_mult": model.decoder.blocks[0].ff_w1.data.shape[1] // model.decoder.width,
        "max_positions": model.decoder.max_positions,
        "max_report_len": model.max_report_len,
        "use_dast_dvaf": model.use_dast_dvaf,
        "use_dmsr": model.use_dmsr,
        "lambda_": model.lambda_,
        "tau": model.stage1.tau,
        "fusion_mode_idx": _FUSION_MODES.index(model.fusion_mode),
        "use_probabilities": model.use_probabilities,
    }, S2_META_KEYS)
    out["vocab/utf8"] = _vocab_to_array(model.vocab)
    return out


def stage2_from_arrays(arrays):
    meta = _unpack_meta(arrays["meta/stage2"], S2_META_KEYS)
    s1 = stage1_from_arrays(arrays, trainable=False)
    vocab = _vocab_from_array(arrays["vocab/utf8"])
    width = int(meta["decoder_width"])
    fusion = FusionParams.__new__(FusionParams)
    for name, attr in (("wq_cross", "wq_cross"), ("wk_cross", "wk_cross"),
                       ("wv_cross", "wv_cross"), ("wq_self", "wq_self"),
                       ("wk_self", "wk_self"), ("wv_self", "wv_self"),
                       ("pool_query", "pool_query"), ("w_gate", "w_gate"),
                       ("w_proj", "w_proj"), ("proj_gamma", "proj_gamma"),
                       ("proj_beta", "proj_beta")):
        setattr(fusion, attr, Tensor(arrays[f"dvaf/{name}"]))
    decoder = DecoderParams(width, int(meta["max_positions"]),
                            Tensor(arrays["decoder/tok_emb"]),
                            Tensor(arrays["decoder/pos_emb"]),
                            Tensor(arrays["decoder/w_prefix"]), [])
    i = 0
    while f"decoder/block{i}/wq" in arrays:
        block = DecoderBlock.__new__(DecoderBlock)
        for attr in ("wq", "wk", "wv", "wo", "ff_w1", "ff_b1", "ff_w2", "ff_b2"):
            setattr(block, attr, Tensor(arrays[f"decoder/block{i}/{attr}"]))
        decoder.blocks.append(block)
        i += 1
    return Stage2Model(s1, fusion, decoder, vocab,
                       use_dast_dvaf=bool(meta["use_dast_dvaf"]),
                       use_dmsr=bool(meta["use_dmsr"]), lambda_=meta["lambda_"],
                       fusion_mode=_FUSION_MODES[int(meta["fusion_mode_idx"])],
                       use_probabilities=bool(meta["use_probabilities"]),
                       max_report_len=int(meta["max_report_len"]))


def generate_reports(model, samples, index):
    """Greedy reports for every sample, sorted by study id."""
    rows = []
    for s in sorted(samples, key=lambda x: x.study_id):
        v_const, z_bar, logits = model.visual_sequence(s)
        retrieved = model.retrieved_text(index, z_bar, logits, exclude_id=s.study_id)
        v_proj = project(v_const, model.fusion)
        text = generate(model.decoder, model.vocab, retrieved, v_proj,
                        model.max_report_len)
        rows.append({"study_id": s.study_id, "hypothesis": text})
    return rows
