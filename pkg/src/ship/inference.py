"""Moving between instructions, latents, and behavior with a trained bundle.

Deduction encodes an instruction and acts from the latent alone. Induction
fits a latent to demonstrations by optimizing a pseudo-instruction through
the frozen encoder (or, ablated, the latent directly). Reasoning answers a
query three ways: from the fitted latent, from a decoded-then-re-encoded
instruction, or from demonstrations serialized into the prompt.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import models as md
from . import objective as ob
from . import trainer as tr


class InferenceError(RuntimeError):
    pass


def deduce(bundle: md.ModelBundle, instruction_tokens, x_tokens,
           mode: str = "mean", rng=None, zero_latent: bool = False):
    """Instruction -> latent -> output tokens. The task model sees both the
    latent (as soft tokens) and the instruction text, mirroring training;
    zero_latent swaps in an all-zero latent as a control for how much the
    latent carries beyond the text."""
    if zero_latent:
        z = md.zero_latent(bundle)
    else:
        with ad.no_grad():
            dist = md.encode(bundle, [bundle.vocab.encode(list(instruction_tokens))])
        if mode == "mean":
            eps = None
        elif mode == "sampled":
            if rng is None:
                raise InferenceError("sampled deduction needs an rng")
            eps = rng.standard_normal(dist.mu.value.shape)
        else:
            raise InferenceError(f"unknown deduction mode {mode!r}")
        z = md.sample_latent(dist, eps)
    k = list(instruction_tokens) if bundle.config.task_conditioned else None
    return md.task_generate(bundle, z, x_tokens, instruction_tokens=k)


@dataclass(frozen=True)
class InduceConfig:
    steps: int = 200
    lr: float = 0.1
    m_k: int | None = None  # pseudo-instruction length; None = corpus median
    use_indirect: bool = True  # optimize pseudo-tokens through the frozen encoder
    regularize: bool = True
    reg_weight: float = 1e-3
    seed: int = 0


@dataclass
class InducedResult:
    z: np.ndarray  # (1, latent_dim) converged latent
    k_hat: list  # instruction decoded from z under the held demo condition
    k_star: np.ndarray | None  # converged pseudo-instruction embeddings
    trace: list  # objective value per optimization step
    n_demos: int
    condition_index: int  # demo pair used as the decoding condition
    config: InduceConfig = field(repr=False, default=InduceConfig())


def default_pseudo_len(vocab: cp.Vocab) -> int:
    tasks = cp.enumerate_tasks(cp.CorpusConfig(alphabet_size=len(vocab.lower_ids)))
    return cp.median_instruction_len(tasks)


def _demo_batch(vocab: cp.Vocab, demos):
    xs = [vocab.encode(list(x)) for x, _ in demos]
    t_in = [[vocab.sep_id] + vocab.encode(list(y)) for _, y in demos]
    t_tgt = [vocab.encode(list(y)) + [vocab.eos_id] for _, y in demos]
    return xs, t_in, t_tgt


def _tile(z, n: int):
    return z if n == 1 else ad.concat([z] * n, axis=0)


def induce(bundle: md.ModelBundle, demos, config: InduceConfig = InduceConfig()) -> InducedResult:
    """Fit a latent to (x, y) demonstrations with the bundle frozen.

    The objective is the task model's instruction-free NLL of the
    demonstrations, optionally plus the latent regularizer. With
    use_indirect the free variable is a continuous pseudo-instruction fed
    through the encoder; without it the latent itself is the leaf.
    """
    if not demos:
        raise InferenceError("induction needs at least one demonstration")
    frozen = bundle.clone()
    frozen.set_requires_grad(False)
    before = {n: b.node.value.copy() for n, b in frozen.params.items()}
    v = frozen.vocab
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1D0C]))
    condition_index = int(rng.integers(0, len(demos)))

    xs, t_in, t_tgt = _demo_batch(v, demos)
    n = len(demos)
    m_k = config.m_k if config.m_k is not None else default_pseudo_len(v)
    if config.use_indirect:
        seed_ids = v.encode(list(cp.NEUTRAL_PHRASE))[:m_k]
        seed_ids += [v.pad_id] * (m_k - len(seed_ids))
        init = frozen.p("embed.tok").value[np.array(seed_ids)][None, :, :].copy()
    else:
        init = np.zeros((1, frozen.config.latent_dim))
    free = ad.ParamBlock("induce.free", ad.param(init))
    mask = np.ones((1, m_k))
    optimizer = tr.Adam(["induce.free"])
    trace = []

    def latent():
        if config.use_indirect:
            dist = md.encode_embeds(frozen, free.node, mask)
            return dist.mu, dist
        return free.node, None

    for _ in range(config.steps):
        z, dist = latent()
        soft = md.soft_tokens(frozen, _tile(z, n))
        lp, tgt, m = md.task_forward(frozen, soft, None, xs, t_in, t_tgt)
        objective = ob.masked_token_nll(lp, tgt, m)
        if config.regularize:
            if dist is not None:
                reg = ad.mean_(ob.kl_to_standard_normal(dist))
            else:
                reg = ad.mul(ad.sum_(ad.mul(z, z)), 0.5)
            objective = ad.add(objective, ad.mul(reg, config.reg_weight))
        if not np.isfinite(objective.value):
            raise InferenceError(f"non-finite induction objective at step {len(trace)}")
        trace.append(float(objective.value))
        ad.backward(objective)
        optimizer.step([free], config.lr)
        free.node.zero_grad()

    with ad.no_grad():
        z_final, _ = latent()
    z_arr = z_final.value.copy()
    x_star, y_star = demos[condition_index]
    condition = (x_star, y_star) if frozen.config.decoder_conditioned else None
    k_hat = md.decode_instruction(frozen, ad.constant(z_arr), condition)
    k_star = free.node.value.copy() if config.use_indirect else None
    for name, arr in before.items():
        assert np.array_equal(arr, frozen.params[name].node.value), \
            f"induction touched frozen parameter {name}"
    return InducedResult(z_arr, k_hat, k_star, trace, n, condition_index, config)


@dataclass
class ReasonResult:
    mode: str
    y_tokens: list
    z: np.ndarray | None  # latent the answer was generated from
    instruction: list | None = None  # decoded instruction (refined mode)


def reason(bundle: md.ModelBundle, demos, query_x, mode: str,
           induced: InducedResult | None = None,
           induce_config: InduceConfig = InduceConfig()) -> ReasonResult:
    """Answer query_x from demonstrations in one of three modes.

    sft: act straight from the fitted latent. refined: decode an instruction
    from the fitted latent (conditioned on one held demo pair), re-encode it,
    act from that latent. context: no informative latent; demonstrations are
    serialized into the prompt.
    """
    if mode not in ("context", "sft", "refined"):
        raise InferenceError(f"unknown reasoning mode {mode!r}")
    v = bundle.vocab
    if mode == "context":
        ids = md.demos_context_ids(v, demos)
        y = md.task_generate(bundle, md.zero_latent(bundle), query_x, context_ids=ids)
        return ReasonResult(mode, y, None)
    if induced is None:
        induced = induce(bundle, demos, induce_config)
    if mode == "sft":
        z = ad.constant(induced.z)
        return ReasonResult(mode, md.task_generate(bundle, z, query_x), induced.z.copy())
    z_arr, k_hat = refined_latent(bundle, demos, induced)
    y = md.task_generate(bundle, ad.constant(z_arr), query_x)
    return ReasonResult(mode, y, z_arr, instruction=k_hat)


def refined_latent(bundle: md.ModelBundle, demos, induced: InducedResult):
    """Re-encode the instruction decoded during induction; returns
    (latent array, decoded tokens)."""
    del demos  # the decoding condition was already consumed by induce
    k_hat = induced.k_hat
    if k_hat:
        with ad.no_grad():
            dist = md.encode(bundle, [bundle.vocab.encode(k_hat)])
        return dist.mu.value.copy(), k_hat
    # decoder produced nothing usable; fall back to the fitted latent
    return induced.z.copy(), k_hat


def demos_for_task(split: cp.CorpusSplit, task_id: str, n: int):
    """Deterministic demonstration pairs: held-out instances first, then
    fresh probe inputs run through the task definition."""
    if n < 1:
        raise InferenceError("need at least one demonstration")
    task = split.task(task_id)
    pool = [(inst.x, inst.y) for inst in split.test[task_id]]
    used = {x for x, _ in pool}
    probes = iter(cp.probes_for_task(task_id, n=4 * n + 16,
                                     alphabet_size=split.alphabet_size))
    while len(pool) < n:
        x = next(probes)
        if x in used:
            continue
        used.add(x)
        pool.append((x, cp.execute(task, x)))
    return pool[:n]
