"""Pair datasets, the synthetic task-conflict generator, retrieval metrics.

The conflict generator builds K tasks over one shared pool of key tokens.
Every task maps each key to a positive key through its own bijection, and
the bijections disagree on every key, so the correct query -> positive
mapping flips with the task while the query's key token stays the same.
Task identity is only recoverable from context: filler (distractor) tokens
are drawn from per-task disjoint pools. A monolithic adapter must encode
all K contradictory mappings at once; that tension is the phenomenon the
training experiments measure.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import Encoder, Sample
from .numcore import RngState, derive_seed


@dataclass(frozen=True)
class PairRecord:
    task_id: int
    query: Sample
    positive: Sample


@dataclass
class PairDataset:
    records: list[PairRecord]
    task_count: int

    def __post_init__(self):
        for rec in self.records:
            if not (0 <= rec.task_id < max(self.task_count, 1)):
                raise ValueError(f"task_id {rec.task_id} outside [0, {self.task_count})")

    def __len__(self) -> int:
        return len(self.records)

    def task_records(self, task_id: int) -> list[PairRecord]:
        return [r for r in self.records if r.task_id == task_id]

    def restrict_to_task(self, task_id: int) -> "PairDataset":
        recs = self.task_records(task_id)
        if not recs:
            raise ValueError(f"no records for task {task_id}")
        return PairDataset(records=recs, task_count=self.task_count)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(json.dumps(
                [r.task_id, list(r.query.tokens), list(r.positive.tokens)]
            ).encode())
        return h.hexdigest()


def generate_conflict_dataset(
    num_tasks: int,
    samples_per_task: int,
    vocab_size: int,
    seed: int,
    seq_len: int = 8,
    eos_id: int = 0,
    distractor_pool: int = 16,
) -> PairDataset:
    """Deterministic K-task dataset with cross-task mapping conflict.

    Token layout: eos, then `samples_per_task` shared key tokens, then K
    disjoint distractor pools. Task k maps key j to key (rho[j] + k) mod S
    for a seeded permutation rho, so (a) within a task the mapping is a
    bijection and (b) any two tasks map every key differently.
    """
    if num_tasks < 2:
        raise ValueError("need at least 2 tasks")
    if samples_per_task < 1:
        raise ValueError("samples_per_task must be >= 1")
    if num_tasks > samples_per_task:
        raise ValueError("num_tasks must not exceed samples_per_task (shifted bijections)")
    if seq_len < 3:
        raise ValueError("seq_len must be >= 3 (distractor + key + eos)")
    needed = 1 + samples_per_task + num_tasks * distractor_pool
    if vocab_size < needed:
        raise ValueError(
            f"vocab_size {vocab_size} too small: need {needed} "
            f"(1 eos + {samples_per_task} keys + {num_tasks}x{distractor_pool} distractors)"
        )

    keys = np.arange(1, 1 + samples_per_task)
    rho = RngState(derive_seed(seed, "mapping")).permutation(samples_per_task)
    key_slot = (seq_len - 1) // 2

    records: list[PairRecord] = []
    for task in range(num_tasks):
        pool_lo = 1 + samples_per_task + task * distractor_pool
        pool = np.arange(pool_lo, pool_lo + distractor_pool)
        rng = RngState(derive_seed(seed, "fillers", task))
        order = RngState(derive_seed(seed, "order", task)).permutation(samples_per_task)
        for j in order:
            q_key = int(keys[j])
            p_key = int(keys[(rho[j] + task) % samples_per_task])
            q_tokens = pool[rng.integers(seq_len - 1, distractor_pool)].tolist()
            p_tokens = pool[rng.integers(seq_len - 1, distractor_pool)].tolist()
            q_tokens[key_slot] = q_key
            p_tokens[key_slot] = p_key
            q_tokens[-1] = eos_id
            p_tokens[-1] = eos_id
            records.append(
                PairRecord(
                    task_id=task,
                    query=Sample(task_id=task, tokens=tuple(q_tokens)),
                    positive=Sample(task_id=task, tokens=tuple(p_tokens)),
                )
            )
    return PairDataset(records=records, task_count=num_tasks)


# ---------------------------------------------------------------------------
# JSONL I/O — one object per line: {"task_id": int, "query": [...], "positive": [...]}


class DatasetFormatError(ValueError):
    """Raised for malformed dataset files, with the offending line number."""


def save_jsonl(path: str | Path, dataset: PairDataset) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in dataset.records:
            fh.write(json.dumps({
                "task_id": r.task_id,
                "query": list(r.query.tokens),
                "positive": list(r.positive.tokens),
            }) + "\n")


def load_jsonl(path: str | Path) -> PairDataset:
    records: list[PairRecord] = []
    max_task = -1
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: invalid JSON ({exc})") from exc
            if not isinstance(obj, dict):
                raise DatasetFormatError(f"{path}: line {lineno}: expected an object")
            for key in ("task_id", "query", "positive"):
                if key not in obj:
                    raise DatasetFormatError(f"{path}: line {lineno}: missing key {key!r}")
            task_id = obj["task_id"]
            if not isinstance(task_id, int):
                raise DatasetFormatError(f"{path}: line {lineno}: task_id must be an integer")
            for key in ("query", "positive"):
                toks = obj[key]
                if not isinstance(toks, list) or not all(isinstance(t, int) for t in toks) or not toks:
                    raise DatasetFormatError(
                        f"{path}: line {lineno}: {key} must be a non-empty list of token ids"
                    )
            try:
                records.append(PairRecord(
                    task_id=task_id,
                    query=Sample(task_id=task_id, tokens=tuple(obj["query"])),
                    positive=Sample(task_id=task_id, tokens=tuple(obj["positive"])),
                ))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
            max_task = max(max_task, task_id)
    return PairDataset(records=records, task_count=max_task + 1)


# ---------------------------------------------------------------------------
# retrieval evaluation


@dataclass
class EvalResult:
    overall: dict[str, float]
    per_task: dict[int, dict[str, float]]
    pool_size: int
    query_count: int

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_task": {str(k): v for k, v in sorted(self.per_task.items())},
            "pool_size": self.pool_size,
            "query_count": self.query_count,
        }


def rank_of_own_positive(similarities: np.ndarray, own_index: np.ndarray) -> np.ndarray:
    """1-based rank of each query's own positive in the candidate pool.

    Ties break by candidate index: an equal-scored candidate outranks the
    own positive only if it comes earlier in the pool.
    """
    n = similarities.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        own = own_index[i]
        s_own = similarities[i, own]
        row = similarities[i]
        better = int((row > s_own).sum())
        tied_earlier = int((row[:own] == s_own).sum())
        ranks[i] = 1 + better + tied_earlier
    return ranks


def metrics_from_ranks(ranks: np.ndarray, k_values: Sequence[int], pool_size: int) -> dict[str, float]:
    out: dict[str, float] = {"hit@1": float((ranks == 1).mean())}
    for k in k_values:
        out[f"recall@{k}"] = float((ranks <= k).mean())
        gains = np.where(ranks <= k, 1.0 / np.log2(1.0 + ranks), 0.0)
        out[f"ndcg@{k}"] = float(gains.mean())
    out["mean_rank"] = float(ranks.mean())
    out["pool_size"] = float(pool_size)
    return out


def evaluate(
    encoder: Encoder,
    dataset: PairDataset,
    k_values: Sequence[int] = (1, 5),
    embed_batch_size: int = 64,
) -> EvalResult:
    """Rank every query against the pool of all positives in the dataset.

    hit@1 is the fraction of queries whose own positive comes first;
    recall@k and NDCG@k use the single-relevant-item convention
    (gain 1/log2(1+rank) when rank <= k, else 0).
    """
    if len(dataset.records) == 0:
        raise ValueError("dataset is empty")
    k_values = sorted({int(k) for k in k_values})
    if any(k < 1 for k in k_values):
        raise ValueError("k values must be >= 1")

    def embed_all(samples: list[Sample]) -> np.ndarray:
        chunks = []
        for lo in range(0, len(samples), embed_batch_size):
            emb, _ = encoder.embed_batch(samples[lo:lo + embed_batch_size])
            chunks.append(emb.data)
        return np.concatenate(chunks, axis=0)

    queries = [r.query for r in dataset.records]
    positives = [r.positive for r in dataset.records]
    q = embed_all(queries)
    p = embed_all(positives)
    sims = q @ p.T
    own = np.arange(len(dataset.records))
    ranks = rank_of_own_positive(sims, own)

    overall = metrics_from_ranks(ranks, k_values, pool_size=len(positives))
    per_task: dict[int, dict[str, float]] = {}
    task_ids = np.array([r.task_id for r in dataset.records])
    for task in sorted(set(task_ids.tolist())):
        sel = task_ids == task
        per_task[task] = metrics_from_ranks(ranks[sel], k_values, pool_size=len(positives))
    return EvalResult(
        overall=overall,
        per_task=per_task,
        pool_size=len(positives),
        query_count=len(queries),
    )
