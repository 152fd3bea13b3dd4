"""Command-line orchestration: generate the corpus, train, evaluate the
three inference regimes (plus ablations), and analyze latents.

Every run writes a manifest recording its inputs, seeds, corpus hash, and
output paths. Evaluation fans out per task — optionally across processes —
and merges in task-id order so results never depend on scheduling.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis as an
from . import autodiff as ad
from . import corpus as cp
from . import inference as inf
from . import judge as jd
from . import models as md
from . import svgplot as sp
from . import trainer as tr


class CliError(RuntimeError):
    pass


def task_seed(master_seed: int, task_id: str) -> int:
    """Independent per-task stream id derived from the master seed."""
    digest = hashlib.sha256(task_id.encode("utf-8")).digest()
    return (master_seed * 1_000_003 + int.from_bytes(digest[:4], "little")) % (2 ** 31)


# ---------------------------------------------------------------------------
# config file + manifest plumbing

def read_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; values keep their raw string."""
    values = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}: malformed config line {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def apply_config_file(args: argparse.Namespace):
    """Fill parser-default values from the config file; explicit flags win."""
    if not getattr(args, "config", None):
        return
    parser = args._parser  # the subparser that produced this namespace
    overrides = read_config_file(args.config)
    for key, raw in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr) or attr.startswith("_"):
            raise CliError(f"unknown config key {key!r}")
        default = parser.get_default(attr)
        if getattr(args, attr) != default:
            continue  # explicitly set on the command line
        if isinstance(default, bool):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif isinstance(default, int):
            value = int(raw)
        elif isinstance(default, float):
            value = float(raw)
        else:
            value = raw
        setattr(args, attr, value)


def write_manifest(out_dir: Path, command: str, config: dict, seeds,
                   corpus_hash, checkpoints, outputs, started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seeds": list(seeds),
        "corpus_hash": corpus_hash,
        "checkpoints": [str(p) for p in checkpoints],
        "outputs": [str(p) for p in outputs],
        "timestamps": {"started": started, "finished": time.time()},
    }
    path = out_dir / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    missing = [str(p) for p in outputs if not Path(p).exists()]
    if missing:
        raise CliError(f"missing declared outputs: {missing}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_pair(args):
    """(bundle, split) for eval/analyze commands, with the hash cross-check."""
    split = cp.load_corpus(args.corpus)
    bundle, header, _ = md.load_checkpoint(args.checkpoint)
    stored = header.get("extra", {}).get("corpus_hash")
    actual = cp.split_hash(split)
    if stored is not None and stored != actual:
        raise CliError(f"checkpoint was trained on corpus {stored}, "
                       f"but {args.corpus} hashes to {actual}")
    return bundle, split


# ---------------------------------------------------------------------------
# gen

def cmd_gen(args) -> int:
    started = time.time()
    out = _out_dir(args)
    config = cp.CorpusConfig(alphabet_size=args.alphabet)
    tasks = cp.enumerate_tasks(config)
    cp.require_viable(tasks)
    split = cp.build_split(tasks, train_per_task=args.train_per_task,
                           seed=args.seed)
    corpus_path = out / "corpus.txt"
    cp.save_corpus(split, corpus_path)
    n_seen, n_unseen = len(split.seen_ids), len(split.unseen_ids)
    print(f"tasks: {n_seen} seen, {n_unseen} unseen "
          f"({len(tasks)} total, alphabet {args.alphabet})")
    print(f"instances: {sum(len(v) for v in split.train.values())} train, "
          f"{sum(len(v) for v in split.test.values())} test")
    write_manifest(out, "gen",
                   {"alphabet": args.alphabet,
                    "train_per_task": args.train_per_task},
                   [args.seed], cp.split_hash(split), [], [corpus_path], started)
    return 0


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    started = time.time()
    out = _out_dir(args)
    split = cp.load_corpus(args.corpus)
    corpus_hash = cp.split_hash(split)
    config = tr.TrainConfig(
        seed=args.seed, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, optimizer=args.optimizer, k_dropout=args.k_dropout,
        drop_xy_condition=args.no_xy_cond, drop_k_condition=args.no_k_cond,
        checkpoint_every=args.checkpoint_every)
    model_config = md.ModelConfig(
        alphabet_size=split.alphabet_size, d_model=args.d_model,
        m_soft=args.m_soft, n_layers=args.n_layers, n_heads=args.n_heads,
        d_ff=args.d_ff)
    try:
        bundle, log = tr.train(split, model_config, config,
                               out_dir=out, resume_from=args.resume,
                               corpus_hash=corpus_hash)
    except tr.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    svg_path = out / "loss-curve.svg"
    steps = [row[0] for row in log.rows]
    series = [(label, steps, [row[i] for row in log.rows])
              for i, label in ((1, "l_reg"), (2, "l_task"), (3, "l_recon"))]
    svg_path.write_text(sp.line_chart(series, "training losses"),
                        encoding="utf-8")
    checkpoint = out / "checkpoint.bin"
    write_manifest(out, "train", dataclasses.asdict(config), [args.seed],
                   corpus_hash, [checkpoint],
                   [checkpoint, out / "loss.csv", svg_path], started)
    print(f"trained {len(log.rows)} steps in {log.wall_clock_s:.1f}s; "
          f"final losses reg={log.rows[-1][1]:.4f} task={log.rows[-1][2]:.4f} "
          f"recon={log.rows[-1][3]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval

def _split_tag(split: cp.CorpusSplit, task_id: str) -> str:
    return "seen" if task_id in set(split.seen_ids) else "unseen"


def _dedu_one(bundle, split, task_id):
    task = split.task(task_id)
    tag = _split_tag(split, task_id)
    k = cp.render_instruction(task, 0).tokens
    records = []
    for inst in split.test[task_id]:
        for method, zero in (("deduce", False), ("zero-z", True)):
            pred = inf.deduce(bundle, k, inst.x, zero_latent=zero)
            records.append(jd.EvalRecord(
                "deduction", task_id, tag, method, " ".join(pred),
                jd.judge_deduction(pred, inst.y), f"x={''.join(inst.x)}"))
    return records


def _induct_one(bundle, split, task_id, n_demos, use_indirect, master_seed,
                induce_steps):
    task = split.task(task_id)
    tag = _split_tag(split, task_id)
    demos = inf.demos_for_task(split, task_id, n_demos)
    config = inf.InduceConfig(steps=induce_steps, use_indirect=use_indirect,
                              seed=task_seed(master_seed, task_id))
    induced = inf.induce(bundle, demos, config)
    verdict = jd.judge_induction(induced.k_hat, task)
    method = ("indirect" if use_indirect else "direct-z") + f"-n{n_demos}"
    detail = (f"{jd.induction_detail(induced.k_hat, task)} "
              f"J:{induced.trace[0]:.3f}->{induced.trace[-1]:.3f}")
    rec = jd.EvalRecord("induction", task_id, tag, method,
                        " ".join(induced.k_hat), verdict, detail)
    line = {"task_id": task_id, "n": n_demos, "k_hat": " ".join(induced.k_hat),
            "parse": jd.induction_detail(induced.k_hat, task),
            "trace_first": induced.trace[0], "trace_last": induced.trace[-1],
            "seed": config.seed}
    return [rec], line


def _reason_one(bundle, split, task_id, master_seed, induce_steps):
    task = split.task(task_id)
    tag = _split_tag(split, task_id)
    insts = split.test[task_id]
    demos = [(i.x, i.y) for i in insts[:-1]]
    query = insts[-1]
    config = inf.InduceConfig(steps=induce_steps,
                              seed=task_seed(master_seed, task_id))
    induced = inf.induce(bundle, demos, config)
    records = []
    for mode in ("sft", "refined", "context"):
        res = inf.reason(bundle, demos, query.x, mode, induced=induced,
                         induce_config=config)
        records.append(jd.EvalRecord(
            "reasoning", task_id, tag, mode, " ".join(res.y_tokens),
            jd.judge_deduction(res.y_tokens, query.y),
            f"x={''.join(query.x)}"))
    return records


_JOB_KIND = {"deduction": _dedu_one, "induction": _induct_one,
             "reasoning": _reason_one}


def _eval_job(payload):
    kind, checkpoint, corpus, task_id, kwargs = payload
    bundle, _, _ = md.load_checkpoint(checkpoint)
    split = cp.load_corpus(corpus)
    return task_id, _JOB_KIND[kind](bundle, split, task_id, **kwargs)


def _run_jobs(kind, args, bundle, split, task_ids, per_task_kwargs):
    """Run one job per task, inline or in a process pool; merge by task id
    so the output never depends on worker scheduling."""
    if args.jobs > 1:
        payloads = [(kind, args.checkpoint, args.corpus, tid, per_task_kwargs)
                    for tid in task_ids]
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = dict(pool.map(_eval_job, payloads))
    else:
        results = {tid: _JOB_KIND[kind](bundle, split, tid, **per_task_kwargs)
                   for tid in task_ids}
    return [results[tid] for tid in sorted(task_ids)]


def cmd_eval(args) -> int:
    started = time.time()
    out = _out_dir(args)
    bundle, split = _load_pair(args)  # validates the pairing up front
    task_ids = sorted(split.seen_ids) + sorted(split.unseen_ids)
    records, extra_lines = [], []
    if args.kind == "deduction":
        for chunk in _run_jobs("deduction", args, bundle, split, task_ids, {}):
            records.extend(chunk)
    elif args.kind == "induction":
        kwargs = dict(n_demos=args.n_demos, use_indirect=not args.no_indirect,
                      master_seed=args.seed, induce_steps=args.induce_steps)
        for chunk, line in _run_jobs("induction", args, bundle, split,
                                     task_ids, kwargs):
            records.extend(chunk)
            extra_lines.append(line)
    else:
        reason_kwargs = {"master_seed": args.seed,
                         "induce_steps": args.induce_steps}
        for chunk in _run_jobs("reasoning", args, bundle, split, task_ids,
                               reason_kwargs):
            records.extend(chunk)

    prefix = out / f"{args.kind}"
    records_path = Path(f"{prefix}-records.jsonl")
    records_path.write_text(jd.records_jsonl(records), encoding="utf-8")
    rows = jd.aggregate(records)
    csv_path = Path(f"{prefix}.csv")
    csv_path.write_text(jd.table_csv(rows), encoding="utf-8")
    txt_path = Path(f"{prefix}.txt")
    txt_path.write_text(jd.table_text(rows), encoding="utf-8")
    outputs = [records_path, csv_path, txt_path]
    if extra_lines:
        induced_path = Path(f"{prefix}-induced.jsonl")
        induced_path.write_text(
            "".join(json.dumps(line, sort_keys=True) + "\n"
                    for line in extra_lines), encoding="utf-8")
        outputs.append(induced_path)
    print(jd.table_text(rows), end="")
    write_manifest(out, f"eval-{args.kind}",
                   {k: v for k, v in vars(args).items()
                    if not k.startswith("_") and k not in ("func", "kind")},
                   [args.seed], cp.split_hash(split), [args.checkpoint],
                   outputs, started)
    return 0


# ---------------------------------------------------------------------------
# analyze

def cmd_analyze(args) -> int:
    started = time.time()
    out = _out_dir(args)
    bundle, split = _load_pair(args)
    ids = sorted(split.seen_ids)
    if args.tasks is not None:
        if args.tasks < 5:
            raise CliError("latent analysis needs at least 5 tasks")
        ids = ids[:args.tasks]
    config = inf.InduceConfig(steps=args.induce_steps, seed=args.seed)
    triples = an.collect_latents(bundle, split, demos_per_task=args.demos,
                                 task_ids=ids, induce_config=config)
    csv_path = out / "latents.csv"
    csv_path.write_text(an.latents_csv(triples), encoding="utf-8")
    svg_path = out / "latents.svg"
    svg_path.write_text(sp.scatter(an.scatter_groups(triples),
                                   "latents by kind"), encoding="utf-8")
    report = an.distance_report(triples)
    report_path = out / "distance-report.txt"
    report_path.write_text(report.text(), encoding="utf-8")
    print(report.text(), end="")
    write_manifest(out, "analyze",
                   {"tasks": len(ids), "demos": args.demos}, [args.seed],
                   cp.split_hash(split), [args.checkpoint],
                   [csv_path, svg_path, report_path], started)
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ship",
        description="instruction<->parameter shuttling on a synthetic corpus")
    sub = parser.add_subparsers(dest="command", required=True)
    default_out = os.environ.get("SHIP_OUT_DIR", ".")

    def shared(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None,
                       help="key=value file; explicit flags win")
        p.add_argument("--out-dir", default=default_out)
        p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("gen", help="generate the task corpus")
    shared(p)
    p.add_argument("--alphabet", type=int, default=16)
    p.add_argument("--train-per-task", type=int, default=64)
    p.set_defaults(func=cmd_gen, _parser=p)

    p = sub.add_parser("train", help="train a model bundle")
    shared(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--d-model", type=int, default=md.ModelConfig.d_model)
    p.add_argument("--m-soft", type=int, default=md.ModelConfig.m_soft)
    p.add_argument("--n-layers", type=int, default=md.ModelConfig.n_layers)
    p.add_argument("--n-heads", type=int, default=md.ModelConfig.n_heads)
    p.add_argument("--d-ff", type=int, default=md.ModelConfig.d_ff)
    p.add_argument("--epochs", type=int, default=tr.TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=tr.TrainConfig.batch_size)
    p.add_argument("--lr", type=float, default=tr.TrainConfig.lr)
    p.add_argument("--optimizer", choices=("adam", "sgd"),
                   default=tr.TrainConfig.optimizer)
    p.add_argument("--k-dropout", type=float, default=tr.TrainConfig.k_dropout)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-xy-cond", action="store_true",
                   help="ablation: train the decoder without its (x, y) pair")
    p.add_argument("--no-k-cond", action="store_true",
                   help="ablation: train the task model without instructions")
    p.add_argument("--resume", default=None)
    p.set_defaults(func=cmd_train, _parser=p)

    p = sub.add_parser("eval", help="evaluate a trained bundle")
    shared(p)
    p.add_argument("kind", choices=("deduction", "induction", "reasoning"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--n-demos", type=int, default=5)
    p.add_argument("--induce-steps", type=int, default=inf.InduceConfig.steps)
    p.add_argument("--no-indirect", action="store_true",
                   help="ablation: fit the latent directly, not through the encoder")
    p.set_defaults(func=cmd_eval, _parser=p)

    p = sub.add_parser("analyze", help="latent-space analysis")
    shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--tasks", type=int, default=None,
                   help="restrict to the first N seen tasks (min 5)")
    p.add_argument("--demos", type=int, default=5)
    p.add_argument("--induce-steps", type=int, default=inf.InduceConfig.steps)
    p.set_defaults(func=cmd_analyze, _parser=p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_config_file(args)
        return args.func(args)
    except (CliError, cp.CorpusError, md.ModelError, md.CheckpointError,
            inf.InferenceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
