"""Conflict anatomy tools: trajectory PCA, adapter similarity, utilization.

These analyses consume checkpoints and metric logs after training. The
PCA is fit jointly over all runs' checkpoints so trajectories share one
basis; adapter similarity compares dense effective deltas (B @ A scaled),
which are invariant to the non-unique low-rank factorization.
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass

import numpy as np

from .data import PairDataset
from .encoder import Encoder
from .moe_lora import LoraExpert, MoeLoraLayer, extract_signature, layer_mask_for_coverage

logger = logging.getLogger(__name__)


@dataclass
class TrajectoryProjection:
    """2-d PCA coordinates of checkpoint vectors, grouped by run label."""

    points: dict[str, np.ndarray]  # label -> (n_checkpoints, 2)
    explained_variance: float
    degenerate: bool = False


def pca_project(checkpoints: dict[str, np.ndarray]) -> TrajectoryProjection:
    """Project per-run checkpoint matrices into the joint top-2 PC plane.

    Centers the pooled matrix, factorizes it, and reports the fraction of
    total variance the two retained components carry. Sign convention: the
    largest-magnitude loading of each component is positive. Fully
    degenerate input (all checkpoints identical) yields zero coordinates
    with explained_variance 0 and the degenerate flag set.
    """
    labels = list(checkpoints)
    if not labels:
        raise ValueError("no checkpoint groups given")
    mats = [np.atleast_2d(np.asarray(checkpoints[k], dtype=np.float64)) for k in labels]
    dim = mats[0].shape[1]
    if any(m.shape[1] != dim for m in mats):
        raise ValueError("checkpoint vectors have differing lengths")
    x = np.concatenate(mats, axis=0)
    if x.shape[0] < 3:
        raise ValueError(f"need at least 3 checkpoints total, got {x.shape[0]}")

    centered = x - x.mean(axis=0, keepdims=True)
    if np.abs(centered).max() == 0.0:
        zero = {k: np.zeros((m.shape[0], 2)) for k, m in zip(labels, mats)}
        return TrajectoryProjection(points=zero, explained_variance=0.0, degenerate=True)

    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    if comps.shape[0] < 2:  # single sample direction; pad a null component
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], dim))])
    for c in range(2):
        if comps[c].any():
            lead = np.argmax(np.abs(comps[c]))
            if comps[c][lead] < 0:
                comps[c] = -comps[c]
    coords = centered @ comps.T
    total = float((s * s).sum())
    top2 = float((s[:2] ** 2).sum())
    ev = top2 / total if total > 0 else 0.0

    points: dict[str, np.ndarray] = {}
    off = 0
    for k, m in zip(labels, mats):
        points[k] = coords[off:off + m.shape[0]]
        off += m.shape[0]
    return TrajectoryProjection(points=points, explained_variance=ev)


def adapter_vector(records: dict[str, np.ndarray]) -> np.ndarray:
    """Flatten a checkpoint's adapter parameters into one vector.

    Concatenates all `param.*` records in sorted name order, so vectors
    from checkpoints of the same architecture are comparable.
    """
    names = sorted(n for n in records if n.startswith("param."))
    if not names:
        raise ValueError("checkpoint contains no adapter parameters")
    return np.concatenate([records[n].reshape(-1) for n in names])


# ---------------------------------------------------------------------------
# layer-wise adapter similarity


@dataclass
class SimilarityProfile:
    """Per-layer cosine between two runs' adapter deltas; None where undefined."""

    values: list[float | None]


def layer_delta_vectors(encoder: Encoder) -> dict[int, np.ndarray]:
    """Per layer: concatenated dense effective deltas of all attached sites.

    For a mixture site the per-expert deltas are concatenated in expert
    order, so two architectures compare slot by slot.
    """
    out: dict[int, np.ndarray] = {}
    for layer in range(encoder.config.num_layers):
        parts: list[np.ndarray] = []
        for proj in encoder.config.adapter_projections:
            adapter = encoder.adapters.get((layer, proj))
            if adapter is None:
                raise ValueError(f"no adapter attached at site ({layer}, {proj!r})")
            if isinstance(adapter, MoeLoraLayer):
                parts.extend(e.delta().reshape(-1) for e in adapter.experts)
            elif isinstance(adapter, LoraExpert):
                parts.append(adapter.delta().reshape(-1))
            else:
                raise ValueError(f"unknown adapter type at ({layer}, {proj!r})")
        out[layer] = np.concatenate(parts)
    return out


def layer_cosine(encoder_a: Encoder, encoder_b: Encoder) -> SimilarityProfile:
    """Layer-wise cosine similarity between two runs' effective deltas."""
    if encoder_a.config.num_layers != encoder_b.config.num_layers:
        raise ValueError("encoders have different layer counts")
    da = layer_delta_vectors(encoder_a)
    db = layer_delta_vectors(encoder_b)
    values: list[float | None] = []
    for layer in range(encoder_a.config.num_layers):
        va, vb = da[layer], db[layer]
        if va.shape != vb.shape:
            raise ValueError(f"layer {layer}: delta shapes differ ({va.shape} vs {vb.shape})")
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na == 0.0 or nb == 0.0:
            values.append(None)
        else:
            values.append(float(np.dot(va, vb) / (na * nb)))
    return SimilarityProfile(values=values)


# ---------------------------------------------------------------------------
# expert utilization


def expert_utilization(
    encoder: Encoder,
    dataset: PairDataset,
    layer_coverage: float = 1.0,
    pooling: str = "mean",
    embed_batch_size: int = 64,
) -> dict:
    """Mean routing per task and site, with dominant expert and entropy.

    Averages the routing signatures of each task's queries; per (task,
    layer, site) reports the mean distribution, its argmax expert, and its
    entropy (0 for one-hot routing up to ln N for uniform).
    """
    if not encoder.has_moe():
        raise ValueError("expert utilization requires MoE adapters")
    mask = layer_mask_for_coverage(encoder.config.num_layers, layer_coverage)
    report: dict = {"tasks": {}, "layer_mask": mask.astype(int).tolist()}
    for task in range(dataset.task_count):
        recs = dataset.task_records(task)
        if not recs:
            logger.warning("task %d has no records; excluded from utilization", task)
            continue
        sig_sum = None
        for lo in range(0, len(recs), embed_batch_size):
            chunk = [r.query for r in recs[lo:lo + embed_batch_size]]
            _, routing = encoder.embed_batch(chunk)
            for sample, rt in zip(chunk, routing):
                sig = extract_signature(rt, len(sample.tokens), mask, pooling=pooling)
                sig_sum = sig.values if sig_sum is None else sig_sum + sig.values
        mean = sig_sum / len(recs)
        p = np.clip(mean, 1e-12, 1.0)
        entropy = np.where(mask[:, None], -(p * np.log(p)).sum(axis=-1), 0.0)
        report["tasks"][task] = {
            "count": len(recs),
            "mean_routing": mean.tolist(),
            "dominant_expert": np.argmax(mean, axis=-1).tolist(),
            "entropy": entropy.tolist(),
        }
    return report


def dominant_expert_disagreement(report: dict, task_a: int, task_b: int) -> float:
    """Fraction of included sites where two tasks' dominant experts differ."""
    mask = np.asarray(report["layer_mask"], dtype=bool)
    da = np.asarray(report["tasks"][task_a]["dominant_expert"])[mask]
    db = np.asarray(report["tasks"][task_b]["dominant_expert"])[mask]
    return float((da != db).mean())


# ---------------------------------------------------------------------------
# convergence tables


def convergence_export(
    series: dict[str, list[tuple[int, float]]],
    resample: bool = False,
) -> str:
    """Merge step-indexed series from several runs into one CSV table.

    All series must share a step grid unless `resample` is set, in which
    case each is linearly interpolated onto the union grid (flat beyond
    its endpoints).
    """
    if not series:
        raise ValueError("no series given")
    grids = {label: [int(s) for s, _ in pts] for label, pts in series.items()}
    for label, g in grids.items():
        if not g:
            raise ValueError(f"series {label!r} is empty")
        if sorted(g) != g:
            raise ValueError(f"series {label!r} steps are not increasing")
    union = sorted({s for g in grids.values() for s in g})
    shared = all(g == union for g in grids.values())
    if not shared and not resample:
        raise ValueError("series have different step grids; pass resample=True")

    columns: dict[str, np.ndarray] = {}
    for label, pts in series.items():
        steps = np.array([s for s, _ in pts], dtype=np.float64)
        vals = np.array([v for _, v in pts], dtype=np.float64)
        columns[label] = vals if shared else np.interp(union, steps, vals)

    buf = io.StringIO()
    labels = list(series)
    buf.write("step," + ",".join(labels) + "\n")
    for i, step in enumerate(union):
        row = ",".join(format(columns[label][i], ".10g") for label in labels)
        buf.write(f"{step},{row}\n")
    return buf.getvalue()
