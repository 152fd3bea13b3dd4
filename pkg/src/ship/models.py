"""Three small sequence models over one shared token embedding table.

Encoder: instruction tokens -> diagonal-Gaussian latent (mu, log_var).
Decoder: latent soft tokens (+ one (x, y) pair as condition) -> instruction,
autoregressive. Task model: latent soft tokens (+ optional instruction and
the input x) -> output y, autoregressive. Backbones are pre-norm transformer
blocks; the three backbones share no parameters, only the token table.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import corpus as cp

NEG_INF = -1e9
LN_EPS = 1e-5


class ModelError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    alphabet_size: int = 16
    d_model: int = 32
    m_soft: int = 4
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    enc_positions: int = 64
    dec_positions: int = 128
    task_positions: int = 256
    x_slot_positions: int = 8  # right-aligned position channel for the input slot
    decoder_conditioned: bool = True  # decoder sees one (x, y) pair
    task_conditioned: bool = True  # task model may see the instruction text
    logvar_limit: float = 8.0
    soft_scale: float = 0.1  # latent-to-pseudo-embedding injection gain
    max_instruction_len: int = 48

    @property
    def latent_dim(self) -> int:
        return self.m_soft * self.d_model

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by heads {self.n_heads}")


class ModelBundle:
    """Parameter store plus the vocabulary; all forward passes live below."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.vocab = cp.build_vocab(config.alphabet_size)
        self.params = params
        v = self.vocab
        self._dec_local = _local_index_map(len(v), v.decoder_out_ids)
        self._task_local = _local_index_map(len(v), v.task_out_ids)

    def p(self, name: str) -> ad.Node:
        return self.params[name].node

    def blocks(self):
        return list(self.params.values())

    def param_count(self) -> int:
        return int(sum(b.node.value.size for b in self.params.values()))

    def zero_grad(self):
        for b in self.params.values():
            b.node.zero_grad()

    def set_requires_grad(self, flag: bool):
        for b in self.params.values():
            b.node.requires_grad = flag

    def state_arrays(self) -> dict:
        return {name: b.node.value for name, b in self.params.items()}

    def clone(self) -> "ModelBundle":
        params = {name: ad.ParamBlock(name, ad.param(b.node.value.copy()))
                  for name, b in self.params.items()}
        return ModelBundle(self.config, params)


def _local_index_map(vocab_size: int, out_ids) -> np.ndarray:
    m = np.full(vocab_size, -1, dtype=np.int64)
    for local, g in enumerate(out_ids):
        m[g] = local
    return m


def init_bundle(config: ModelConfig, seed: int) -> ModelBundle:
    """Deterministic parameter init. Latent heads start at zero so the
    latent regularizer is exactly zero before any update."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x11D0]))
    vocab = cp.build_vocab(config.alphabet_size)
    d, f = config.d_model, config.d_ff
    res_scale = 1.0 / np.sqrt(2.0 * config.n_layers)
    params = {}

    def add(name, value):
        params[name] = ad.ParamBlock(name, ad.param(value))

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    add("embed.tok", normal((len(vocab), d), 0.1))
    n_segments = {"enc": 0, "dec": 3, "task": 4}
    for model, positions in (("enc", config.enc_positions),
                             ("dec", config.dec_positions),
                             ("task", config.task_positions)):
        add(f"{model}.pos", normal((positions, d), 0.05))
        for layer in range(config.n_layers):
            pre = f"{model}.{layer}"
            if n_segments[model]:
                add(f"{pre}.attn.segb", np.zeros((n_segments[model], config.n_heads)))
            # query/key start sharper than the usual 1/sqrt(d) so content-
            # and position-matching heads differentiate early in training
            for mat in ("Wq", "Wk"):
                add(f"{pre}.attn.{mat}", normal((d, d), 2.0 * d ** -0.5))
            add(f"{pre}.attn.Wv", normal((d, d), d ** -0.5))
            add(f"{pre}.attn.Wo", normal((d, d), d ** -0.5 * res_scale))
            add(f"{pre}.attn.bo", np.zeros(d))
            add(f"{pre}.ln1.g", np.ones(d))
            add(f"{pre}.ln1.b", np.zeros(d))
            # gated feed-forward: tasks here hinge on conditional letter
            # substitution (output = f(input letter, task code)), and the
            # value*gate product gives that interaction a first-order
            # gradient path that a plain rectified layer lacks
            add(f"{pre}.ffn.Wv", normal((d, f), d ** -0.5))
            add(f"{pre}.ffn.bv", np.zeros(f))
            add(f"{pre}.ffn.Wg", normal((d, f), d ** -0.5))
            add(f"{pre}.ffn.bg", np.zeros(f))
            add(f"{pre}.ffn.Wo", normal((f, d), f ** -0.5 * res_scale))
            add(f"{pre}.ffn.bo", np.zeros(d))
            add(f"{pre}.ln2.g", np.ones(d))
            add(f"{pre}.ln2.b", np.zeros(d))
        add(f"{model}.lnf.g", np.ones(d))
        add(f"{model}.lnf.b", np.zeros(d))
    add("dec.seg", normal((3, d), 0.05))
    add("task.seg", normal((4, d), 0.05))
    add("task.posr", normal((config.x_slot_positions, d), 0.05))
    add("dec.head.W", normal((d, len(vocab.decoder_out_ids)), d ** -0.5))
    add("dec.head.b", np.zeros(len(vocab.decoder_out_ids)))
    add("task.head.W", normal((d, len(vocab.task_out_ids)), d ** -0.5))
    add("task.head.b", np.zeros(len(vocab.task_out_ids)))
    add("enc.mu.W", np.zeros((d, config.latent_dim)))
    add("enc.mu.b", np.zeros(config.latent_dim))
    add("enc.lv.W", np.zeros((d, config.latent_dim)))
    add("enc.lv.b", np.zeros(config.latent_dim))
    return ModelBundle(config, params)


# ---------------------------------------------------------------------------
# batched forward pieces


def pad_batch(seqs, pad_id: int):
    """Right-pad integer sequences; returns (ids (B,T), mask (B,T) float)."""
    b = len(seqs)
    t = max(1, max((len(s) for s in seqs), default=1))
    ids = np.full((b, t), pad_id, dtype=np.int64)
    mask = np.zeros((b, t))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def _layer_norm(x, g, b):
    mu = ad.mean_(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean_(ad.mul(xc, xc), axis=-1, keepdims=True)
    inv = ad.pow_const(ad.add(var, LN_EPS), -0.5)
    return ad.add(ad.mul(ad.mul(xc, inv), g), b)


def _attention_mask(key_mask: np.ndarray, causal: bool) -> np.ndarray:
    b, t = key_mask.shape
    allow = np.broadcast_to(key_mask[:, None, None, :], (b, 1, t, t)).copy()
    if causal:
        allow = allow * np.tril(np.ones((t, t)))[None, None]
    return np.where(allow > 0, 0.0, NEG_INF)


def backbone_forward(bundle: ModelBundle, model: str, x, key_mask: np.ndarray,
                     causal: bool, pos_ids: np.ndarray | None = None,
                     seg_ids: np.ndarray | None = None) -> ad.Node:
    """Run embedded inputs (B, T, d) through one backbone; returns (B, T, d).

    pos_ids (B, T) selects learned position embeddings per token; the default
    is 0..T-1 for every row. Segment-structured callers pass indices that
    restart at each slot boundary, plus seg_ids enabling a learned per-head
    attention bias toward each key segment — one scalar can redirect a head
    to the soft prefix or the instruction, which otherwise takes a slow
    conspiracy of query/key weights to arrange.
    """
    cfg = bundle.config
    b, t, d = x.value.shape
    pos_table = bundle.p(f"{model}.pos")
    if pos_ids is None:
        if t > pos_table.value.shape[0]:
            raise ModelError(f"{model}: sequence length {t} exceeds positional "
                             f"capacity {pos_table.value.shape[0]}")
        h = ad.add(x, ad.slice_(pos_table, (slice(0, t),)))
    else:
        if int(pos_ids.max()) >= pos_table.value.shape[0]:
            raise ModelError(f"{model}: position index {int(pos_ids.max())} exceeds "
                             f"positional capacity {pos_table.value.shape[0]}")
        h = ad.add(x, ad.embed(pos_table, pos_ids))
    mask = ad.constant(_attention_mask(key_mask, causal))
    n_heads = cfg.n_heads
    hd = d // n_heads
    scale = hd ** -0.5
    for layer in range(cfg.n_layers):
        pre = f"{model}.{layer}"
        a_in = _layer_norm(h, bundle.p(f"{pre}.ln1.g"), bundle.p(f"{pre}.ln1.b"))

        def heads(node):
            return ad.transpose(ad.reshape(node, (b, t, n_heads, hd)), (0, 2, 1, 3))

        q = heads(ad.matmul(a_in, bundle.p(f"{pre}.attn.Wq")))
        k = heads(ad.matmul(a_in, bundle.p(f"{pre}.attn.Wk")))
        v = heads(ad.matmul(a_in, bundle.p(f"{pre}.attn.Wv")))
        scores = ad.add(ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), scale), mask)
        if seg_ids is not None:
            segb = bundle.p(f"{pre}.attn.segb")  # (n_segments, n_heads)
            kb = ad.transpose(ad.embed(segb, seg_ids), (0, 2, 1))
            scores = ad.add(scores, ad.reshape(kb, (b, n_heads, 1, t)))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        proj = ad.add(ad.matmul(ctx, bundle.p(f"{pre}.attn.Wo")), bundle.p(f"{pre}.attn.bo"))
        h = ad.add(h, proj)
        f_in = _layer_norm(h, bundle.p(f"{pre}.ln2.g"), bundle.p(f"{pre}.ln2.b"))
        val = ad.add(ad.matmul(f_in, bundle.p(f"{pre}.ffn.Wv")), bundle.p(f"{pre}.ffn.bv"))
        gate = ad.sigmoid(ad.add(ad.matmul(f_in, bundle.p(f"{pre}.ffn.Wg")),
                                 bundle.p(f"{pre}.ffn.bg")))
        f_out = ad.add(ad.matmul(ad.mul(val, gate), bundle.p(f"{pre}.ffn.Wo")),
                       bundle.p(f"{pre}.ffn.bo"))
        h = ad.add(h, f_out)
    return _layer_norm(h, bundle.p(f"{model}.lnf.g"), bundle.p(f"{model}.lnf.b"))


# ---------------------------------------------------------------------------
# encoder


@dataclass
class LatentDistribution:
    mu: ad.Node  # (B, D_z)
    log_var: ad.Node  # (B, D_z), bounded by the smooth clamp below

    @property
    def dim(self) -> int:
        return self.mu.value.shape[-1]


def encode_embeds(bundle: ModelBundle, embeds, key_mask: np.ndarray) -> LatentDistribution:
    """Encoder over already-embedded inputs; bidirectional, mean-pooled."""
    hidden = backbone_forward(bundle, "enc", embeds, key_mask, causal=False)
    counts = key_mask.sum(axis=1, keepdims=True)
    if (counts == 0).any():
        raise ModelError("encoder input has an all-padding row")
    weights = ad.constant((key_mask / counts)[:, :, None])
    pooled = ad.sum_(ad.mul(hidden, weights), axis=1)
    mu = ad.add(ad.matmul(pooled, bundle.p("enc.mu.W")), bundle.p("enc.mu.b"))
    raw = ad.add(ad.matmul(pooled, bundle.p("enc.lv.W")), bundle.p("enc.lv.b"))
    lim = bundle.config.logvar_limit
    log_var = ad.mul(ad.tanh(ad.mul(raw, 1.0 / lim)), lim)  # smooth clamp to (-lim, lim)
    return LatentDistribution(mu, log_var)


def encode(bundle: ModelBundle, token_seqs) -> LatentDistribution:
    """Encode batches of instruction token id sequences."""
    ids, mask = pad_batch(token_seqs, bundle.vocab.pad_id)
    if ids.shape[1] > bundle.config.enc_positions:
        raise ModelError(f"instruction length {ids.shape[1]} exceeds encoder capacity")
    embeds = ad.embed(bundle.p("embed.tok"), ids)
    return encode_embeds(bundle, embeds, mask)


def sample_latent(dist: LatentDistribution, eps=None) -> ad.Node:
    """Reparameterized draw; eps=None gives the mean (deterministic mode)."""
    if eps is None:
        return dist.mu
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != dist.mu.value.shape:
        raise ModelError(f"eps shape {eps.shape} vs mu {dist.mu.value.shape}")
    std = ad.exp(ad.mul(dist.log_var, 0.5))
    return ad.add(dist.mu, ad.mul(std, ad.constant(eps)))


def soft_tokens(bundle: ModelBundle, z) -> ad.Node:
    """Reshape a latent (B, D_z) into m_soft pseudo-embeddings (B, m, d).

    The injection is scaled down so a prior sample lands at token-embedding
    magnitude instead of drowning the sequence in unit-scale noise; the
    latent itself stays at the prior's scale.
    """
    b = z.value.shape[0]
    cfg = bundle.config
    if z.value.shape[-1] != cfg.latent_dim:
        raise ModelError(f"latent dim {z.value.shape[-1]} != {cfg.latent_dim}")
    return ad.mul(ad.reshape(z, (b, cfg.m_soft, cfg.d_model)), cfg.soft_scale)


# ---------------------------------------------------------------------------
# segment-structured rows
#
# Both autoregressive models consume rows of typed slots behind the soft
# tokens. Position indices restart at every slot, so "output position j"
# and "input position j" share a position embedding regardless of how long
# the instruction prefix is; a segment embedding keeps the slots apart. The
# input slot additionally carries a right-aligned position channel so that
# suffix-indexed transformations see a length-independent key as well.

SEG_SOFT = 0
SEG_PREFIX = 1  # instruction text, serialized demonstrations, or the (x, y) condition
SEG_INPUT = 2  # task-model input slot
SEG_OUT = 3  # task-model output slot
SEG_DEC_OUT = 2  # decoder output slot (the decoder has no input slot)


@dataclass
class Segment:
    seg_id: int
    ids: list
    dual_pos: bool = False  # add the right-aligned channel (input slot only)


def _rows_forward(bundle: ModelBundle, model: str, soft, rows, causal: bool = True):
    """Forward a batch of segment rows behind the soft tokens.

    rows: per-example list of Segments, packed contiguously and padded only
    at the row end, so every real token occupies the same position it would
    during autoregressive generation. Returns (hidden (B, m+T, d), spans)
    where spans[i][s] = (flat_start, length) of row i's segment s.
    """
    cfg = bundle.config
    v = bundle.vocab
    b = len(rows)
    m = cfg.m_soft
    flats, poss, segs, rposs, rmasks, spans = [], [], [], [], [], []
    for row in rows:
        ids, pos, seg, rpos, rmask, span = [], [], [], [], [], []
        for s in row:
            span.append((len(ids), len(s.ids)))
            if s.dual_pos and len(s.ids) > cfg.x_slot_positions:
                raise ModelError(f"input slot length {len(s.ids)} exceeds "
                                 f"right-aligned capacity {cfg.x_slot_positions}")
            for j, t in enumerate(s.ids):
                ids.append(t)
                pos.append(j)
                seg.append(s.seg_id)
                rpos.append(cfg.x_slot_positions - len(s.ids) + j if s.dual_pos else 0)
                rmask.append(1.0 if s.dual_pos else 0.0)
        flats.append(ids)
        poss.append(pos)
        segs.append(seg)
        rposs.append(rpos)
        rmasks.append(rmask)
        spans.append(span)
    ids, key_mask = pad_batch(flats, v.pad_id)
    t = ids.shape[1]

    def padded_int(seq_rows):
        out = np.zeros((b, t), dtype=np.int64)
        for i, s in enumerate(seq_rows):
            out[i, :len(s)] = s
        return out

    pos_ids, seg_ids, rpos_ids = map(padded_int, (poss, segs, rposs))
    rmask_arr = padded_int(rmasks).astype(np.float64)
    tok = ad.add(ad.embed(bundle.p("embed.tok"), ids),
                 ad.embed(bundle.p(f"{model}.seg"), seg_ids))
    if model == "task" and rmask_arr.any():
        right = ad.embed(bundle.p("task.posr"), rpos_ids)
        tok = ad.add(tok, ad.mul(right, ad.constant(rmask_arr[:, :, None])))
    # the task model's soft tokens take the instruction segment id, so the
    # attention program that reads the instruction reads the latent through
    # the same keys — and keeps working when the instruction is dropped
    soft_sid = SEG_PREFIX if model == "task" else SEG_SOFT
    soft_seg = ad.embed(bundle.p(f"{model}.seg"), np.full((b, m), soft_sid, dtype=np.int64))
    x = ad.concat([ad.add(soft, soft_seg), tok], axis=1)
    full_mask = np.concatenate([np.ones((b, m)), key_mask], axis=1)
    full_pos = np.concatenate([np.tile(np.arange(m, dtype=np.int64), (b, 1)), pos_ids], axis=1)
    full_seg = np.concatenate(
        [np.full((b, m), soft_sid, dtype=np.int64), seg_ids], axis=1)
    hidden = backbone_forward(bundle, model, x, full_mask, causal,
                              pos_ids=full_pos, seg_ids=full_seg)
    return hidden, spans


def _read_span(bundle, hidden, spans, segment_index: int):
    """Gather hidden states over one segment of every row (end-padded)."""
    b = len(spans)
    m = bundle.config.m_soft
    lens = [spans[i][segment_index][1] for i in range(b)]
    idx = np.zeros((b, max(lens)), dtype=np.int64)
    for i, ln in enumerate(lens):
        idx[i, :ln] = m + spans[i][segment_index][0] + np.arange(ln)  # overshoot stays 0, masked in loss
    d = hidden.value.shape[-1]
    return ad.gather(hidden, np.repeat(idx[:, :, None], d, axis=2), axis=1)


def decoder_forward(bundle: ModelBundle, soft, cond_seqs, in_seqs, target_seqs):
    """Teacher-forced decoder pass.

    soft: (B, m, d) latent tokens. cond_seqs: per-example condition token ids
    (required when the decoder is conditioned, must be None otherwise).
    in_seqs/target_seqs: shifted instruction ids including bos/eos handling.
    Returns (logprobs (B, T, V_dec), local_targets (B, T), loss_mask (B, T)).
    """
    v = bundle.vocab
    if bundle.config.decoder_conditioned:
        if cond_seqs is None:
            raise ModelError("decoder is conditioned, but no condition was given")
    elif cond_seqs is not None:
        raise ModelError("decoder is unconditioned, but a condition was given")
    conds = cond_seqs if cond_seqs is not None else [[] for _ in in_seqs]
    rows = [[Segment(SEG_PREFIX, list(c)), Segment(SEG_DEC_OUT, list(s))]
            for c, s in zip(conds, in_seqs)]
    hidden, spans = _rows_forward(bundle, "dec", soft, rows)
    region = _read_span(bundle, hidden, spans, 1)
    logits = ad.add(ad.matmul(region, bundle.p("dec.head.W")), bundle.p("dec.head.b"))
    logprobs = ad.log_softmax(logits, axis=-1)
    tgt_ids, tgt_mask = pad_batch(target_seqs, v.pad_id)
    local = bundle._dec_local[tgt_ids]
    if (local[tgt_mask > 0] < 0).any():
        raise ModelError("decoder target token outside decoder output vocabulary")
    return logprobs, np.maximum(local, 0), tgt_mask


def task_forward(bundle: ModelBundle, soft, k_seqs, x_seqs, in_seqs, target_seqs):
    """Teacher-forced task-model pass; k_seqs may be None (no instruction).

    in_seqs start with the separator token and continue with y; targets are
    y tokens plus eos. Returns (logprobs, local_targets, loss_mask).
    """
    v = bundle.vocab
    if k_seqs is not None and not bundle.config.task_conditioned:
        raise ModelError("task model is unconditioned, but an instruction was given")
    ks = k_seqs if k_seqs is not None else [[] for _ in in_seqs]
    rows = [[Segment(SEG_PREFIX, list(k)),
             Segment(SEG_INPUT, list(x), dual_pos=True),
             Segment(SEG_OUT, list(s))]
            for k, x, s in zip(ks, x_seqs, in_seqs)]
    hidden, spans = _rows_forward(bundle, "task", soft, rows)
    region = _read_span(bundle, hidden, spans, 2)
    logits = ad.add(ad.matmul(region, bundle.p("task.head.W")), bundle.p("task.head.b"))
    logprobs = ad.log_softmax(logits, axis=-1)
    tgt_ids, tgt_mask = pad_batch(target_seqs, v.pad_id)
    local = bundle._task_local[tgt_ids]
    if (local[tgt_mask > 0] < 0).any():
        raise ModelError("task target token outside task output vocabulary")
    return logprobs, np.maximum(local, 0), tgt_mask


# ---------------------------------------------------------------------------
# generation


def _generate(bundle, model, soft, prefix_segments, out_seg, first_id, out_ids,
              head_w, head_b, max_new: int, mode: str, rng, temperature: float):
    """Autoregressive loop shared by both generators; batch size 1."""
    v = bundle.vocab
    grown = [first_id]
    out = []
    eos = v.eos_id
    with ad.no_grad():
        for _ in range(max_new):
            rows = [prefix_segments + [Segment(out_seg, grown)]]
            hidden, _ = _rows_forward(bundle, model, soft, rows)
            last = hidden.value[0, -1]
            logits = last @ bundle.p(head_w).value + bundle.p(head_b).value
            if mode == "greedy":
                local = int(np.argmax(logits))
            elif mode == "sampled":
                if rng is None:
                    raise ModelError("sampled generation needs an rng")
                shifted = (logits - logits.max()) / max(temperature, 1e-6)
                probs = np.exp(shifted)
                probs /= probs.sum()
                local = int(rng.choice(len(probs), p=probs))
            else:
                raise ModelError(f"unknown generation mode {mode!r}")
            tok = out_ids[local]
            if tok == eos:
                break
            out.append(tok)
            grown.append(tok)
    return out


def decode_instruction(bundle: ModelBundle, z, condition, mode: str = "greedy",
                       rng=None, temperature: float = 1.0):
    """Generate instruction tokens from a latent, optionally conditioned on
    one (x, y) pair. Returns a list of token strings."""
    v = bundle.vocab
    cfg = bundle.config
    if cfg.decoder_conditioned and condition is None:
        raise ModelError("decoder is conditioned, but no condition was given")
    if not cfg.decoder_conditioned and condition is not None:
        raise ModelError("decoder is unconditioned, but a condition was given")
    soft = soft_tokens(bundle, z)
    cond_ids = condition_tokens(v, *condition) if condition is not None else []
    prefix = [Segment(SEG_PREFIX, cond_ids)]
    ids = _generate(bundle, "dec", soft, prefix, SEG_DEC_OUT, v.bos_id,
                    v.decoder_out_ids, "dec.head.W", "dec.head.b",
                    cfg.max_instruction_len, mode, rng, temperature)
    return v.decode(ids)


def task_generate(bundle: ModelBundle, z, x_tokens, instruction_tokens=None,
                  context_ids=None, mode: str = "greedy", rng=None,
                  temperature: float = 1.0, max_new: int = 20):
    """Generate y tokens for input x under a latent; the prefix slot carries
    either instruction tokens, serialized demonstrations, or nothing."""
    v = bundle.vocab
    if instruction_tokens is not None and not bundle.config.task_conditioned:
        raise ModelError("task model is unconditioned, but an instruction was given")
    if instruction_tokens is not None and context_ids is not None:
        raise ModelError("instruction and demonstration context are exclusive")
    soft = soft_tokens(bundle, z)
    prefix_ids = []
    if instruction_tokens is not None:
        prefix_ids += v.encode(instruction_tokens)
    if context_ids is not None:
        prefix_ids += list(context_ids)
    prefix = [Segment(SEG_PREFIX, prefix_ids),
              Segment(SEG_INPUT, v.encode(list(x_tokens)), dual_pos=True)]
    ids = _generate(bundle, "task", soft, prefix, SEG_OUT, v.sep_id,
                    v.task_out_ids, "task.head.W", "task.head.b",
                    max_new, mode, rng, temperature)
    return v.decode(ids)


def condition_tokens(v: cp.Vocab, x_tokens, y_tokens):
    """Token ids for the literal condition string 'x = <x> ; y = <y>'."""
    toks = ["x", "="] + list(x_tokens) + [";", "y", "="] + list(y_tokens)
    return v.encode(toks)


def demos_context_ids(v: cp.Vocab, demos):
    """Serialized demonstrations: x -> y ; x -> y ; ... for the ICL baseline."""
    ids = []
    for i, (x, y) in enumerate(demos):
        if i:
            ids.append(v.index[";"])
        ids += v.encode(list(x)) + [v.arrow_id] + v.encode(list(y))
    ids.append(v.index[";"])
    return ids


def zero_latent(bundle: ModelBundle, batch: int = 1) -> ad.Node:
    return ad.constant(np.zeros((batch, bundle.config.latent_dim)))


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"SHPBIN01"
_VERSION = 1


def save_checkpoint(path, bundle: ModelBundle, *, seed: int, step: int,
                    rng_state=None, opt_arrays=None, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, version, json header, named float64 blocks."""
    header = {
        "config": dataclasses.asdict(bundle.config),
        "seed": int(seed),
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
        "blocks": [],
        "opt_blocks": [],
    }
    blocks = [(name, b.node.value) for name, b in sorted(bundle.params.items())]
    header["blocks"] = [name for name, _ in blocks]
    opt_items = []
    if opt_arrays:
        opt_items = sorted(opt_arrays.items())
        header["opt_blocks"] = [name for name, _ in opt_items]
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", _VERSION))
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(header_bytes)))
    buf.write(header_bytes)
    for name, arr in blocks + opt_items:
        _write_block(buf, name, arr)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _write_block(buf, name: str, arr: np.ndarray) -> None:
    name_b = name.encode("utf-8")
    buf.write(struct.pack("<H", len(name_b)))
    buf.write(name_b)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    buf.write(struct.pack("<B", arr.ndim))
    for dim in arr.shape:
        buf.write(struct.pack("<I", dim))
    buf.write(arr.astype("<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def _read_block(fh):
    raw = fh.read(2)
    if not raw:
        return None
    if len(raw) != 2:
        raise CheckpointError("truncated checkpoint while reading block name length")
    (name_len,) = struct.unpack("<H", raw)
    name = _read_exact(fh, name_len, "block name").decode("utf-8")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "block rank"))
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4, "block dim"))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = _read_exact(fh, count * 8, f"block {name}")
    arr = np.frombuffer(data, dtype="<f8").reshape(shape).copy()
    return name, arr


def load_checkpoint(path):
    """Returns (bundle, header, opt_arrays). Validates magic, version, and
    that stored blocks exactly match the config's parameter set."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (hlen,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        header = json.loads(_read_exact(fh, hlen, "header").decode("utf-8"))
        config = ModelConfig(**header["config"])
        arrays = {}
        while True:
            item = _read_block(fh)
            if item is None:
                break
            arrays[item[0]] = item[1]
    expected = init_bundle(config, seed=0)
    want = set(expected.params)
    got_model = {n for n in arrays if not n.startswith("opt/")}
    if want != got_model or set(header["blocks"]) != got_model:
        raise CheckpointError(f"{path}: block set does not match config "
                              f"(missing {sorted(want - got_model)[:3]}, "
                              f"unexpected {sorted(got_model - want)[:3]})")
    params = {}
    for name in expected.params:
        arr = arrays[name]
        if arr.shape != expected.params[name].shape:
            raise CheckpointError(f"{path}: block {name} shape {arr.shape} "
                                  f"!= expected {expected.params[name].shape}")
        params[name] = ad.ParamBlock(name, ad.param(arr))
    bundle = ModelBundle(config, params)
    opt_arrays = {n: a for n, a in arrays.items() if n.startswith("opt/")}
    if set(header.get("opt_blocks", [])) != set(opt_arrays):
        raise CheckpointError(f"{path}: optimizer block set does not match header")
    return bundle, header, opt_arrays
