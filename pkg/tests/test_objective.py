from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ship import autodiff as ad
from ship import corpus as cp
from ship import models as md
from ship import objective as ob


def dist_of(mu, lv):
    return md.LatentDistribution(ad.constant(np.asarray(mu, dtype=float)),
                                 ad.constant(np.asarray(lv, dtype=float)))


def kl_oracle(mu, lv):
    """Independent closed form, plain numpy."""
    mu, lv = np.asarray(mu, dtype=float), np.asarray(lv, dtype=float)
    return 0.5 * np.sum(mu * mu + np.exp(lv) - 1.0 - lv, axis=-1)


def kl_monte_carlo(mu, lv, n_samples, seed):
    """Sampled E_q[log q(z) - log p(z)] for one diagonal Gaussian."""
    mu, lv = np.asarray(mu, dtype=float), np.asarray(lv, dtype=float)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n_samples, mu.size))
    z = mu + np.exp(lv / 2) * eps
    return float(np.mean(0.5 * np.sum(z * z - eps * eps - lv, axis=-1)))


def test_kl_standard_normal_is_exactly_zero():
    kl = ob.kl_to_standard_normal(dist_of(np.zeros((3, 5)), np.zeros((3, 5))))
    assert kl.value.shape == (3,)
    assert np.all(kl.value == 0.0)


def test_kl_matches_hand_formula():
    rng = np.random.default_rng(1)
    mu = rng.normal(size=(4, 7))
    lv = rng.normal(size=(4, 7)) * 0.5
    kl = ob.kl_to_standard_normal(dist_of(mu, lv)).value
    assert np.allclose(kl, kl_oracle(mu, lv), rtol=1e-12)
    assert np.all(kl >= 0.0)


def test_kl_pinned_single_dim():
    # N(1, e) vs N(0, 1): 0.5 * (1^2 + e^1 - 1 - 1) = (e - 1) / 2
    kl = ob.kl_to_standard_normal(dist_of([[1.0]], [[1.0]])).value
    assert np.isclose(kl[0], (np.e - 1) / 2, atol=1e-12)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(2)
    for trial in range(6):
        mu = rng.normal(size=(1, 6))
        lv = rng.uniform(-1.0, 1.0, size=(1, 6))
        exact = float(ob.kl_to_standard_normal(dist_of(mu, lv)).value[0])
        mc = kl_monte_carlo(mu[0], lv[0], n_samples=200_000, seed=100 + trial)
        assert abs(mc - exact) / max(exact, 1e-9) < 0.02


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=6),
       st.lists(st.floats(-2, 2), min_size=2, max_size=6))
def test_kl_nonnegative_property(mu, lv):
    n = min(len(mu), len(lv))
    kl = ob.kl_to_standard_normal(dist_of([mu[:n]], [lv[:n]])).value
    assert kl[0] >= -1e-12


def test_masked_nll_hand_case():
    lp = np.log(np.array([
        [[0.5, 0.25, 0.25], [0.1, 0.6, 0.3]],
        [[0.2, 0.2, 0.6], [0.9, 0.05, 0.05]],
    ]))
    targets = np.array([[0, 1], [2, 0]])
    mask = np.array([[1.0, 1.0], [1.0, 0.0]])
    got = ob.masked_token_nll(ad.constant(lp), targets, mask).value
    seq0 = -(np.log(0.5) + np.log(0.6)) / 2
    seq1 = -np.log(0.6) / 1
    assert np.isclose(got, (seq0 + seq1) / 2, atol=1e-12)


def test_masked_nll_rejects_empty_sequence():
    lp = ad.constant(np.zeros((2, 3, 4)))
    targets = np.zeros((2, 3), dtype=np.int64)
    mask = np.array([[1.0, 0, 0], [0, 0, 0]])
    with pytest.raises(md.ModelError, match="empty"):
        ob.masked_token_nll(lp, targets, mask)


def test_masked_nll_ignores_padded_positions():
    rng = np.random.default_rng(3)
    lp = ad.constant(rng.normal(size=(2, 4, 5)))
    targets = rng.integers(0, 5, size=(2, 4))
    mask = np.array([[1.0, 1, 0, 0], [1, 1, 1, 0]])
    base = ob.masked_token_nll(lp, targets, mask).value
    lp2 = lp.value.copy()
    lp2[0, 2:] = 123.0  # only padded slots change
    lp2[1, 3:] = -55.0
    again = ob.masked_token_nll(ad.constant(lp2), targets, mask).value
    assert np.array_equal(base, again)


@pytest.fixture(scope="module")
def micro_examples(micro_split):
    v = cp.build_vocab(micro_split.alphabet_size)
    tasks = [micro_split.task(tid) for tid in sorted(micro_split.seen_ids)]
    examples = []
    for i, task in enumerate(tasks):
        for inst in micro_split.train[task.task_id][:2]:
            examples.append(ob.make_example(v, task, inst, template_id=i % 3))
    return v, examples


def test_make_example_fields(micro_split):
    v = cp.build_vocab(micro_split.alphabet_size)
    task = next(t for t in micro_split.tasks if t.family == cp.REVERSE)
    inst = micro_split.train[task.task_id][0]
    ex = ob.make_example(v, task, inst, template_id=0)
    assert v.decode(list(ex.k_ids)) == list(cp.render_instruction(task, 0).tokens)
    assert v.decode(list(ex.x_ids)) == list(inst.x)
    assert v.decode(list(ex.y_ids)) == list(inst.y)
    cond = v.decode(list(ex.cond_ids))
    assert cond == ["x", "="] + list(inst.x) + [";", "y", "="] + list(inst.y)


def test_uniform_heads_give_log_vocab_losses(micro_model_config, micro_examples):
    v, examples = micro_examples
    bundle = md.init_bundle(micro_model_config, seed=0)
    bundle.params["task.head.W"].node.value[:] = 0.0
    bundle.params["task.head.b"].node.value[:] = 0.0
    bundle.params["dec.head.W"].node.value[:] = 0.0
    bundle.params["dec.head.b"].node.value[:] = 0.0
    _, bd = ob.batch_loss(bundle, examples[:4], eps=None)
    assert np.isclose(bd.l_task, np.log(len(v.task_out_ids)), atol=1e-9)
    assert np.isclose(bd.l_recon, np.log(len(v.decoder_out_ids)), atol=1e-9)
    assert bd.l_reg == 0.0  # zero-initialized latent heads


def test_total_is_exact_weighted_sum(micro_model_config, micro_examples):
    _, examples = micro_examples
    bundle = md.init_bundle(micro_model_config, seed=5)
    weights = (1e-3, 1.0, 1.0)
    total, bd = ob.batch_loss(bundle, examples[:4], eps=None, weights=weights)
    recombined = weights[0] * bd.l_reg + weights[1] * bd.l_task + weights[2] * bd.l_recon
    assert abs(bd.total - recombined) <= 1e-12
    assert float(total.value) == bd.total


def test_zero_weights_zero_total(micro_model_config, micro_examples):
    _, examples = micro_examples
    bundle = md.init_bundle(micro_model_config, seed=5)
    total, bd = ob.batch_loss(bundle, examples[:2], eps=None, weights=(0.0, 0.0, 0.0))
    assert float(total.value) == 0.0
    assert bd.l_task > 0.0  # pieces still measured


def test_zero_eps_equals_mean_mode(micro_model_config, micro_examples):
    _, examples = micro_examples
    bundle = md.init_bundle(micro_model_config, seed=6)
    dim = micro_model_config.latent_dim
    _, a = ob.batch_loss(bundle, examples[:3], eps=None)
    _, b = ob.batch_loss(bundle, examples[:3], eps=np.zeros((3, dim)))
    assert a == b
    # uniform eps would be erased by layer norm; use a structured draw
    _, c = ob.batch_loss(bundle, examples[:3],
                         eps=np.random.default_rng(0).standard_normal((3, dim)))
    assert c.l_task != a.l_task


def test_drop_k_changes_only_task_loss(micro_model_config, micro_examples):
    _, examples = micro_examples
    bundle = md.init_bundle(micro_model_config, seed=7)
    _, with_k = ob.batch_loss(bundle, examples[:4], eps=None)
    _, no_k = ob.batch_loss(bundle, examples[:4], eps=None, drop_k=True)
    assert no_k.l_recon == with_k.l_recon
    assert no_k.l_reg == with_k.l_reg
    assert no_k.l_task != with_k.l_task


def test_batch_order_invariance(micro_model_config, micro_examples):
    _, examples = micro_examples
    bundle = md.init_bundle(micro_model_config, seed=8)
    batch = examples[:4]
    rng = np.random.default_rng(0)
    eps = rng.standard_normal((4, micro_model_config.latent_dim))
    _, fwd = ob.batch_loss(bundle, batch, eps=eps)
    order = [3, 1, 0, 2]
    _, perm = ob.batch_loss(bundle, [batch[i] for i in order], eps=eps[order])
    for field in ("l_reg", "l_task", "l_recon", "total"):
        assert abs(getattr(fwd, field) - getattr(perm, field)) <= 1e-12


def test_objective_gradients_match_finite_differences(micro_model_config, micro_examples):
    _, examples = micro_examples
    bundle = md.init_bundle(micro_model_config, seed=9)
    rng = np.random.default_rng(4)
    eps = rng.standard_normal((2, micro_model_config.latent_dim))
    batch = examples[:2]

    def f():
        total, _ = ob.batch_loss(bundle, batch, eps=eps)
        return total

    names = ["embed.tok", "enc.0.attn.Wq", "enc.mu.W", "enc.lv.b",
             "dec.pos", "dec.head.W", "task.0.ffn.Wv", "task.head.b"]
    report = ad.grad_check(f, [bundle.params[n] for n in names],
                           max_entries_per_param=4, rng=np.random.default_rng(11))
    assert report.passed, str(report)
