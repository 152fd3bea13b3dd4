"""Joint training loop for the encoder, decoder, and task model.

All randomness is a pure function of (seed, epoch, batch index), so a resumed
run consumes exactly the same draws as an uninterrupted one and reproduces it
bit for bit.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import models as md
from . import objective as obj


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good_checkpoint):
        self.step = step
        self.last_good_checkpoint = last_good_checkpoint
        where = last_good_checkpoint or "<no checkpoint written>"
        super().__init__(f"non-finite loss at step {step}; last good checkpoint: {where}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 10
    batch_size: int = 16
    lr: float = 3e-3
    optimizer: str = "adam"  # or "sgd"
    w0: float = 1e-3
    w1: float = 1.0
    w2: float = 1.0
    # Fraction of batches where the task model sees no instruction text, so
    # instruction-free prediction (used by induction and latent-only
    # deduction) is in-distribution. Ignored when drop_k_condition is set.
    k_dropout: float = 0.25
    drop_xy_condition: bool = False  # ablation: decoder loses its (x, y) pair
    drop_k_condition: bool = False  # ablation: task model never sees k
    checkpoint_every: int = 0  # steps; 0 disables periodic checkpoints
    eval_every: int = 0  # steps; 0 disables eval snapshots

    @property
    def weights(self):
        return (self.w0, self.w1, self.w2)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (step, l_reg, l_task, l_recon, total)
    eval_snapshots: list = field(default_factory=list)  # (step, accuracy)
    wall_clock_s: float = 0.0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "l_reg", "l_task", "l_recon", "total"])
            for row in self.rows:
                writer.writerow([row[0]] + [repr(v) for v in row[1:]])

    @staticmethod
    def from_csv(path) -> "TrainLog":
        log = TrainLog()
        with open(path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            assert header[0] == "step"
            for row in reader:
                log.rows.append((int(row[0]),) + tuple(float(v) for v in row[1:]))
        return log


class Adam:
    def __init__(self, names):
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}
        self.t = 0
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-8

    def step(self, blocks, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for block in blocks:
            g = block.node.grad
            if g is None:
                continue
            if self.m[block.name] is None:
                self.m[block.name] = np.zeros_like(block.node.value)
                self.v[block.name] = np.zeros_like(block.node.value)
            m = self.m[block.name]
            v = self.v[block.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            assert np.isfinite(update).all(), f"non-finite update for {block.name}"
            block.node.value -= update

    def state_arrays(self):
        out = {"opt/adam.t": np.array([float(self.t)])}
        for name, arr in self.m.items():
            if arr is not None:
                out[f"opt/adam.m.{name}"] = arr
                out[f"opt/adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays):
        self.t = int(arrays["opt/adam.t"][0])
        for key, arr in arrays.items():
            if key.startswith("opt/adam.m."):
                self.m[key[len("opt/adam.m."):]] = arr.copy()
            elif key.startswith("opt/adam.v."):
                self.v[key[len("opt/adam.v."):]] = arr.copy()


class Sgd:
    def __init__(self, names):
        del names

    def step(self, blocks, lr: float):
        for block in blocks:
            g = block.node.grad
            if g is None:
                continue
            update = lr * g
            assert np.isfinite(update).all(), f"non-finite update for {block.name}"
            block.node.value -= update

    def state_arrays(self):
        return {}

    def load_state(self, arrays):
        del arrays


def _make_optimizer(config: TrainConfig, names):
    if config.optimizer == "adam":
        return Adam(names)
    if config.optimizer == "sgd":
        return Sgd(names)
    raise ValueError(f"unknown optimizer {config.optimizer!r}")


def _epoch_rng(seed: int, epoch: int):
    return np.random.default_rng(np.random.SeedSequence([seed, 0xE90C, epoch]))


def _batch_rng(seed: int, epoch: int, batch: int):
    return np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C, epoch, batch]))


def _epoch_plan(split: cp.CorpusSplit, seed: int, epoch: int):
    """Shuffled (task_id, instance_index, template_id) triples for one epoch.
    Templates are re-drawn each epoch so every paraphrase gets cover."""
    rng = _epoch_rng(seed, epoch)
    pool = []
    for tid in split.seen_ids:
        task = split.task(tid)
        n_tpl = len(cp.TEMPLATES[task.family])
        for idx in range(len(split.train[tid])):
            pool.append((tid, idx, int(rng.integers(0, n_tpl))))
    order = rng.permutation(len(pool))
    return [pool[int(i)] for i in order]


def steps_per_epoch(split: cp.CorpusSplit, batch_size: int) -> int:
    n = sum(len(v) for v in split.train.values())
    return (n + batch_size - 1) // batch_size


def _quick_deduction_accuracy(bundle: md.ModelBundle, split: cp.CorpusSplit,
                              max_tasks: int = 8) -> float:
    """Tiny greedy-deduction probe for eval snapshots; seen test instances."""
    v = bundle.vocab
    hits = 0
    total = 0
    for tid in split.seen_ids[:max_tasks]:
        task = split.task(tid)
        k_tokens = cp.render_instruction(task, 0).tokens
        inst = split.test[tid][0]
        with ad.no_grad():
            dist = md.encode(bundle, [v.encode(k_tokens)])
            z = md.sample_latent(dist, None)
        k_arg = list(k_tokens) if bundle.config.task_conditioned else None
        pred = md.task_generate(bundle, z, inst.x, instruction_tokens=k_arg)
        hits += int(tuple(pred) == inst.y)
        total += 1
    return hits / max(total, 1)


def train(split: cp.CorpusSplit, model_config: md.ModelConfig, config: TrainConfig,
          out_dir=None, resume_from=None, corpus_hash: str | None = None):
    """Train a fresh or resumed bundle; returns (bundle, TrainLog).

    Writes loss.csv, checkpoint.bin, and periodic checkpoints under out_dir
    when given. Aborts with TrainingDiverged on a non-finite loss.
    """
    t_start = time.time()
    mc = dataclasses.replace(
        model_config,
        decoder_conditioned=not config.drop_xy_condition,
        task_conditioned=not config.drop_k_condition,
    )
    start_step = 0
    optimizer = None
    if resume_from is not None:
        bundle, header, opt_arrays = md.load_checkpoint(resume_from)
        if bundle.config != mc:
            raise md.CheckpointError("checkpoint model config does not match request")
        stored = header.get("extra", {}).get("train_config")
        if stored is not None:
            # a longer horizon is a valid resume: derived RNG streams make the
            # extension identical to an uninterrupted longer run
            want = {k: v for k, v in dataclasses.asdict(config).items() if k != "epochs"}
            have = {k: v for k, v in stored.items() if k != "epochs"}
            if want != have:
                raise md.CheckpointError("checkpoint train config does not match request")
        stored_hash = header.get("extra", {}).get("corpus_hash")
        if corpus_hash is not None and stored_hash not in (None, corpus_hash):
            raise md.CheckpointError("checkpoint was trained on a different corpus")
        start_step = int(header["step"])
        optimizer = _make_optimizer(config, list(bundle.params))
        if opt_arrays:
            optimizer.load_state(opt_arrays)
    else:
        bundle = md.init_bundle(mc, config.seed)
        optimizer = _make_optimizer(config, list(bundle.params))

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    log = TrainLog()
    spe = steps_per_epoch(split, config.batch_size)
    total_steps = config.epochs * spe
    last_good = resume_from if resume_from is not None else None
    vocab = bundle.vocab

    def save(step, name="checkpoint.bin"):
        if out_dir is None:
            return None
        path = out_dir / name
        md.save_checkpoint(
            path, bundle, seed=config.seed, step=step,
            rng_state={"scheme": "derived", "epoch": step // spe, "batch": step % spe},
            opt_arrays=optimizer.state_arrays(),
            extra={"train_config": dataclasses.asdict(config), "corpus_hash": corpus_hash},
        )
        return str(path)

    plan_epoch, plan = -1, []
    for step in range(start_step, total_steps):
        epoch, batch_idx = divmod(step, spe)
        if epoch != plan_epoch:
            plan_epoch, plan = epoch, _epoch_plan(split, config.seed, epoch)
        chunk = plan[batch_idx * config.batch_size:(batch_idx + 1) * config.batch_size]
        if not chunk:
            continue
        examples = []
        for tid, idx, tpl in chunk:
            task = split.task(tid)
            inst = split.train[tid][idx]
            examples.append(obj.make_example(vocab, task, inst, tpl))
        brng = _batch_rng(config.seed, epoch, batch_idx)
        eps = brng.normal(size=(len(examples), bundle.config.latent_dim))
        drop_k = (not config.drop_k_condition) and bool(brng.random() < config.k_dropout)

        for block in bundle.params.values():
            assert block.node.grad is None, f"stale gradient on {block.name}"
        total, breakdown = obj.batch_loss(bundle, examples, eps, config.weights,
                                          drop_k=drop_k)
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(step, last_good)
        ad.backward(total)
        optimizer.step(bundle.blocks(), config.lr)
        bundle.zero_grad()
        log.rows.append((step, breakdown.l_reg, breakdown.l_task,
                         breakdown.l_recon, breakdown.total))
        done = step + 1
        if config.checkpoint_every and done % config.checkpoint_every == 0 and done < total_steps:
            last_good = save(done, f"checkpoint-step{done}.bin") or last_good
        if config.eval_every and done % config.eval_every == 0:
            log.eval_snapshots.append((done, _quick_deduction_accuracy(bundle, split)))

    save(total_steps)
    log.wall_clock_s = time.time() - t_start
    if out_dir is not None:
        log.to_csv(out_dir / "loss.csv")
    return bundle, log
