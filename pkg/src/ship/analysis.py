"""Latent-space analysis: how close fitted and refined latents come to the
latent of the true instruction.

For each evaluated task three latents are collected: the encoding of the
annotated instruction, the latent fitted to demonstrations, and the latent
obtained by decoding the fitted latent into text and re-encoding it. The
report compares distances to the true latent; the 2D projection exists for
the scatter artifact only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import corpus as cp
from . import inference as inf
from . import models as md


@dataclass(frozen=True)
class LatentTriple:
    task_id: str
    z_truth: np.ndarray
    z_sft: np.ndarray
    z_refined: np.ndarray
    k_hat: tuple = ()  # instruction decoded during induction


def collect_latents(bundle: md.ModelBundle, split: cp.CorpusSplit,
                    demos_per_task: int = 5,
                    task_ids=None,
                    induce_config: inf.InduceConfig = inf.InduceConfig()) -> list:
    """One LatentTriple per seen task (or per requested task id)."""
    ids = sorted(split.seen_ids) if task_ids is None else list(task_ids)
    triples = []
    for task_id in ids:
        task = split.task(task_id)
        k = cp.render_instruction(task, 0).tokens
        with ad.no_grad():
            dist = md.encode(bundle, [bundle.vocab.encode(k)])
        z_truth = dist.mu.value[0].copy()
        demos = inf.demos_for_task(split, task_id, demos_per_task)
        induced = inf.induce(bundle, demos, induce_config)
        z_refined, k_hat = inf.refined_latent(bundle, demos, induced)
        triples.append(LatentTriple(task_id, z_truth, induced.z[0].copy(),
                                    z_refined[0].copy(), tuple(k_hat)))
    return triples


def project_2d(vectors) -> np.ndarray:
    """Top-2 principal components of mean-centered rows, (n, 2).

    Sign convention: within each component, the loading with the largest
    magnitude is made positive, so the projection is deterministic.
    """
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 3:
        raise ValueError("projection needs at least 3 vectors")
    centered = arr - arr.mean(axis=0)
    if not centered.any():
        warnings.warn("all latent vectors identical; projecting to zeros")
        return np.zeros((arr.shape[0], 2))
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:  # rank-1 input: pad with a zero component
        comps = np.vstack([comps, np.zeros_like(comps[0])])
    for i in range(2):
        if comps[i][np.argmax(np.abs(comps[i]))] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


@dataclass(frozen=True)
class DistanceReport:
    n_tasks: int
    mean_sft: float
    mean_refined: float
    median_sft: float
    median_refined: float
    refined_wins: int  # tasks where the refined latent is strictly closer

    @property
    def win_rate(self) -> float:
        return self.refined_wins / self.n_tasks

    def text(self) -> str:
        return (
            f"tasks evaluated        {self.n_tasks}\n"
            f"mean   |z_sft - z_truth|      {self.mean_sft:.4f}\n"
            f"mean   |z_refined - z_truth|  {self.mean_refined:.4f}\n"
            f"median |z_sft - z_truth|      {self.median_sft:.4f}\n"
            f"median |z_refined - z_truth|  {self.median_refined:.4f}\n"
            f"refined closer on      {self.refined_wins}/{self.n_tasks} tasks "
            f"({100.0 * self.win_rate:.1f}%)\n"
        )


def distance_report(triples) -> DistanceReport:
    if len(triples) < 5:
        raise ValueError("distance report needs at least 5 tasks")
    d_sft = np.array([np.linalg.norm(t.z_sft - t.z_truth) for t in triples])
    d_ref = np.array([np.linalg.norm(t.z_refined - t.z_truth) for t in triples])
    return DistanceReport(
        n_tasks=len(triples),
        mean_sft=float(d_sft.mean()),
        mean_refined=float(d_ref.mean()),
        median_sft=float(np.median(d_sft)),
        median_refined=float(np.median(d_ref)),
        refined_wins=int((d_ref < d_sft).sum()),
    )


def latents_csv(triples) -> str:
    """CSV rows (task_id, kind, v0..v{D-1}) for all three latent kinds."""
    if not triples:
        return "task_id,kind\n"
    dim = triples[0].z_truth.shape[0]
    header = "task_id,kind," + ",".join(f"v{i}" for i in range(dim))
    lines = [header]
    for t in triples:
        for kind, z in (("truth", t.z_truth), ("sft", t.z_sft),
                        ("refined", t.z_refined)):
            lines.append(f"{t.task_id},{kind}," + ",".join(f"{v:.8g}" for v in z))
    return "\n".join(lines) + "\n"


def scatter_groups(triples):
    """(label, 2D points) groups for the latent scatter, shared projection."""
    stacked = np.vstack([[t.z_truth, t.z_sft, t.z_refined] for t in triples])
    coords = project_2d(stacked)
    out = []
    for j, label in enumerate(("truth", "sft", "refined")):
        pts = [(float(coords[3 * i + j, 0]), float(coords[3 * i + j, 1]))
               for i in range(len(triples))]
        out.append((label, pts))
    return out
