"""Joint objective: latent regularizer + task loss + instruction reconstruction.

total = w0 * KL(q(z|k) || N(0, I)) + w1 * NLL(y | z, x, k?) + w2 * NLL(k | z, x, y)

Both NLL terms are per-token means within a sequence, then means over the
batch, so long instructions do not dominate short ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import models as md

DEFAULT_WEIGHTS = (1e-3, 1.0, 1.0)


@dataclass(frozen=True)
class LossBreakdown:
    l_reg: float
    l_task: float
    l_recon: float
    total: float


@dataclass(frozen=True)
class TrainExample:
    """One (instruction, x, y) occurrence with precomputed token ids."""
    k_ids: tuple
    cond_ids: tuple
    x_ids: tuple
    y_ids: tuple


def make_example(vocab: cp.Vocab, task: cp.TaskProgram, instance: cp.Instance,
                 template_id: int) -> TrainExample:
    k = tuple(vocab.encode(cp.render_instruction(task, template_id).tokens))
    cond = tuple(md.condition_tokens(vocab, instance.x, instance.y))
    x = tuple(vocab.encode(list(instance.x)))
    y = tuple(vocab.encode(list(instance.y)))
    return TrainExample(k, cond, x, y)


def kl_to_standard_normal(dist: md.LatentDistribution) -> ad.Node:
    """Closed-form KL(N(mu, diag(exp(lv))) || N(0, I)) per example, shape (B,)."""
    mu, lv = dist.mu, dist.log_var
    term = ad.sub(ad.add(ad.mul(mu, mu), ad.exp(lv)), ad.add(lv, 1.0))
    return ad.mul(ad.sum_(term, axis=-1), 0.5)


def masked_token_nll(logprobs: ad.Node, targets: np.ndarray, mask: np.ndarray) -> ad.Node:
    """Mean over batch of per-sequence mean token NLL."""
    lengths = mask.sum(axis=1)
    if (lengths == 0).any():
        raise md.ModelError("empty target sequence in batch")
    weights = mask / lengths[:, None] / mask.shape[0]
    picked = ad.gather(logprobs, targets[:, :, None], axis=-1)
    return ad.neg(ad.sum_(ad.mul(picked, ad.constant(weights[:, :, None]))))


def batch_loss(bundle: md.ModelBundle, examples, eps: np.ndarray | None,
               weights=DEFAULT_WEIGHTS, drop_k: bool = False):
    """Assemble the joint loss for a batch of TrainExamples.

    eps: (B, D_z) standard-normal draws, or None for mean-mode latents.
    drop_k: omit the instruction from the task-model input for this batch.
    Returns (total Node, LossBreakdown).
    """
    v = bundle.vocab
    w0, w1, w2 = weights
    dist = md.encode(bundle, [list(e.k_ids) for e in examples])
    z = md.sample_latent(dist, eps)
    soft = md.soft_tokens(bundle, z)

    l_reg = ad.mean_(kl_to_standard_normal(dist))

    conds = [list(e.cond_ids) for e in examples] if bundle.config.decoder_conditioned else None
    dec_in = [[v.bos_id] + list(e.k_ids) for e in examples]
    dec_tgt = [list(e.k_ids) + [v.eos_id] for e in examples]
    lp, tgt, mask = md.decoder_forward(bundle, soft, conds, dec_in, dec_tgt)
    l_recon = masked_token_nll(lp, tgt, mask)

    use_k = bundle.config.task_conditioned and not drop_k
    k_seqs = [list(e.k_ids) for e in examples] if use_k else None
    x_seqs = [list(e.x_ids) for e in examples]
    t_in = [[v.sep_id] + list(e.y_ids) for e in examples]
    t_tgt = [list(e.y_ids) + [v.eos_id] for e in examples]
    lp2, tgt2, mask2 = md.task_forward(bundle, soft, k_seqs, x_seqs, t_in, t_tgt)
    l_task = masked_token_nll(lp2, tgt2, mask2)

    total = ad.add(ad.add(ad.mul(l_reg, w0), ad.mul(l_task, w1)), ad.mul(l_recon, w2))
    breakdown = LossBreakdown(float(l_reg.value), float(l_task.value),
                              float(l_recon.value), float(total.value))
    return total, breakdown
