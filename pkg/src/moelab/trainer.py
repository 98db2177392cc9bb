"""Two-stage training loop: AdamW over adapter parameters only.

Stage 1 warms the experts up under plain InfoNCE; once the step counter
reaches t_warmup the loop switches to the expert-aware weighted loss.
Batch selection is a pure function of (seed, step), so a run resumed from
any checkpoint replays the exact batch sequence and reproduces the
uninterrupted run bit for bit.

Checkpoint container (little-endian): magic "TSEM", format version u32,
32-byte config digest, then named records of
(name_len u32, name bytes, rank u32, dims u64[rank], float64 payload).
Metric log: JSON lines with keys step, stage, loss, lr, mean_w, max_w,
router_entropy.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .data import PairDataset
from .encoder import Encoder, EncoderConfig, Sample, build_frozen
from .losses import (
    ContrastiveBatch,
    EansParams,
    eans_weight_matrix,
    infonce,
    eans,
    signature_distance_matrix,
)
from .moe_lora import (
    MoeLoraLayer,
    extract_signature,
    layer_mask_for_coverage,
    make_lora_expert,
    make_moe_layer,
    signature_from_values,
)
from .numcore import RngState, Tensor, backward, derive_seed, take_rows

CHECKPOINT_MAGIC = b"TSEM"
CHECKPOINT_VERSION = 1

ADAPTER_KINDS = ("lora", "moe")
LOSS_KINDS = ("infonce", "eans", "staged")
POOLING_KINDS = ("mean", "eos")


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file cannot be parsed."""


class IncompatibleCheckpointError(ValueError):
    """Raised when a checkpoint does not match the supplied config."""


@dataclass(frozen=True)
class TrainConfig:
    # optimization
    learning_rate: float = 5e-5
    total_steps: int = 2000
    batch_size: int = 64
    t_warmup: int = 600
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    linear_decay: bool = True
    seed: int = 0
    # adapters
    adapter: str = "moe"
    num_experts: int = 4
    rank: int = 16
    alpha: float = 64.0
    router_temperature: float = 1.0
    # loss
    loss: str = "staged"
    tau: float = 0.05
    w_min: float = 0.1
    w_max: float = 10.0
    sigma: float = 0.002
    layer_coverage: float = 1.0
    signature_pooling: str = "mean"
    # frozen backbone
    vocab_size: int = 256
    model_dim: int = 64
    num_layers: int = 4
    projections_per_layer: int = 3
    max_seq_len: int = 32
    eos_id: int = 0
    encoder_seed: int = 12345

    def __post_init__(self):
        if self.adapter not in ADAPTER_KINDS:
            raise ValueError(f"adapter must be one of {ADAPTER_KINDS}, got {self.adapter!r}")
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.signature_pooling not in POOLING_KINDS:
            raise ValueError(f"signature_pooling must be one of {POOLING_KINDS}")
        if self.adapter == "lora" and self.loss != "infonce":
            raise ValueError("the signature-weighted losses need a routed adapter; use adapter='moe'")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if not (0 <= self.t_warmup <= max(self.total_steps, self.t_warmup)):
            raise ValueError("t_warmup must be >= 0")
        if self.loss == "staged" and self.t_warmup > self.total_steps:
            raise ValueError("t_warmup must not exceed total_steps")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        # delegate range checks
        EansParams(self.w_min, self.w_max, self.sigma)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self.encoder_config()  # validates backbone fields

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            vocab_size=self.vocab_size,
            model_dim=self.model_dim,
            num_layers=self.num_layers,
            projections_per_layer=self.projections_per_layer,
            max_seq_len=self.max_seq_len,
            init_seed=self.encoder_seed,
            eos_id=self.eos_id,
        )

    def eans_params(self) -> EansParams:
        return EansParams(w_min=self.w_min, w_max=self.w_max, sigma=self.sigma)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        return cls.from_dict(json.loads(text))

    def digest(self) -> bytes:
        canonical = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()


def build_model(config: TrainConfig) -> tuple[Encoder, list[tuple[str, Tensor]]]:
    """Frozen encoder with one fresh adapter per injection site.

    Returns the encoder and the ordered (name, tensor) list of trainable
    parameters.
    """
    enc = build_frozen(config.encoder_config())
    d = config.model_dim
    rng = RngState(derive_seed(config.seed, "adapters"))
    params: list[tuple[str, Tensor]] = []
    for layer, proj in enc.config.sites():
        if config.adapter == "moe":
            adapter = make_moe_layer(
                d, d, config.rank, config.alpha, config.num_experts, rng,
                router_temperature=config.router_temperature,
            )
        else:
            adapter = make_lora_expert(d, d, config.rank, config.alpha, rng)
        enc.attach_adapter(layer, proj, adapter)
        for sub, tensor in adapter.parameters():
            params.append((f"layer{layer}.{proj}.{sub}", tensor))
    return enc, params


class AdamW:
    """Adaptive moments with decoupled weight decay over named tensors."""

    def __init__(self, params: list[tuple[str, Tensor]], config: TrainConfig):
        self.params = params
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self.m = {name: np.zeros(p.size) for name, p in params}
        self.v = {name: np.zeros(p.size) for name, p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad.reshape(-1) if p.grad is not None else np.zeros(p.size)
            flat = p.data.reshape(-1)
            kernels.adamw_update(
                flat, np.ascontiguousarray(g), self.m[name], self.v[name],
                lr, self.beta1, self.beta2, self.eps, self.weight_decay, bc1, bc2,
            )

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


@dataclass
class TrainState:
    config: TrainConfig
    encoder: Encoder
    params: list[tuple[str, Tensor]]
    optimizer: AdamW
    rng: RngState
    step: int = 0


def init_state(config: TrainConfig) -> TrainState:
    encoder, params = build_model(config)
    rng = RngState(derive_seed(config.seed, "train"))
    return TrainState(config, encoder, params, AdamW(params, config), rng)


def select_batch(dataset: PairDataset, config: TrainConfig, step: int) -> tuple[list[Sample], list[Sample]]:
    """Deterministic batch for a given step (stateless in the loop)."""
    n = len(dataset.records)
    if n < 2:
        raise ValueError("dataset needs at least 2 records")
    take = min(config.batch_size, n)
    perm = RngState(derive_seed(config.seed, "batch", step)).permutation(n)[:take]
    queries = [dataset.records[i].query for i in perm]
    positives = [dataset.records[i].positive for i in perm]
    return queries, positives


def learning_rate_at(config: TrainConfig, step: int) -> float:
    if config.linear_decay and config.total_steps > 0:
        return config.learning_rate * (1.0 - step / config.total_steps)
    return config.learning_rate


def _stage_at(config: TrainConfig, step: int) -> str:
    if config.loss == "infonce":
        return "infonce"
    if config.loss == "eans":
        return "eans"
    return "infonce" if step < config.t_warmup else "eans"


def _signatures(state: TrainState, samples, routing):
    """Batched signature extraction (same pooling as extract_signature)."""
    config = state.config
    mask = layer_mask_for_coverage(config.num_layers, config.layer_coverage)
    pooling = config.signature_pooling
    sigs: list = [None] * len(samples)
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(len(s.tokens), []).append(i)
    for t_len, idx in groups.items():
        sites = routing[idx[0]].keys()
        num_experts = next(iter(routing[idx[0]].values())).shape[1]
        g_index = {p: gi for gi, p in enumerate(state.encoder.config.adapter_projections)}
        vals = np.zeros((len(idx), config.num_layers, len(g_index), num_experts))
        for layer, proj in sites:
            if not mask[layer]:
                continue
            stacked = np.stack([routing[i][(layer, proj)] for i in idx])
            pooled = stacked.mean(axis=1) if pooling == "mean" else stacked[:, t_len - 1]
            vals[:, layer, g_index[proj]] = pooled
        for row, i in enumerate(idx):
            sigs[i] = signature_from_values(vals[row], mask)
    return sigs


def train_step(state: TrainState, batch: tuple[list[Sample], list[Sample]]) -> dict:
    """One optimization step; returns the step's metric record."""
    config = state.config
    queries, positives = batch
    b = len(queries)
    stage = _stage_at(config, state.step)
    try:
        # queries and positives share one forward pass (per-sample
        # arithmetic is batch-independent, so this changes nothing
        # numerically)
        emb, routing = state.encoder.embed_batch(list(queries) + list(positives))
        q_emb = take_rows(emb, np.arange(b))
        t_emb = take_rows(emb, np.arange(b, 2 * b))
        q_routing, t_routing = routing[:b], routing[b:]

        is_moe = config.adapter == "moe"
        q_sigs = _signatures(state, queries, q_routing) if is_moe else None
        t_sigs = _signatures(state, positives, t_routing) if is_moe else None

        cb = ContrastiveBatch(
            query_embeddings=q_emb,
            target_embeddings=t_emb,
            temperature=config.tau,
            query_signatures=q_sigs,
            target_signatures=t_sigs,
        )
        loss = infonce(cb) if stage == "infonce" else eans(cb, config.eans_params())
        loss_val = float(loss.data)
    except ValueError as exc:
        # a non-finite forward (diverged parameters) surfaces as op-level
        # validation; at the step boundary that is a numeric failure
        if "finite" not in str(exc) and "normalized" not in str(exc):
            raise
        raise FloatingPointError(
            f"non-finite forward at step {state.step} (stage={stage}): {exc}; "
            f"param norms: {_param_norm_summary(state)}"
        ) from exc
    if not math.isfinite(loss_val):
        raise FloatingPointError(
            f"non-finite loss {loss_val} at step {state.step} "
            f"(stage={stage}, lr={learning_rate_at(config, state.step)}); "
            f"param norms: {_param_norm_summary(state)}"
        )

    backward(loss)
    lr = learning_rate_at(config, state.step)
    state.optimizer.step(lr)
    state.optimizer.zero_grad()

    mean_w, max_w = 1.0, 1.0
    if stage == "eans":
        dist = signature_distance_matrix(q_sigs, t_sigs)
        weights = eans_weight_matrix(dist, config.eans_params())
        off = ~np.eye(weights.shape[0], dtype=bool)
        mean_w = float(weights[off].mean())
        max_w = float(weights[off].max())
    entropy = _router_entropy(q_sigs) if is_moe else 0.0

    state.step += 1
    return {
        "step": state.step - 1,
        "stage": stage,
        "loss": loss_val,
        "lr": lr,
        "mean_w": mean_w,
        "max_w": max_w,
        "router_entropy": entropy,
    }


def _router_entropy(sigs) -> float:
    vals = np.stack([s.values[s.layer_mask] for s in sigs])  # (B, L_inc, G, N)
    p = np.clip(vals, 1e-12, 1.0)
    ent = -(p * np.log(p)).sum(axis=-1)
    return float(ent.mean())


def _param_norm_summary(state: TrainState) -> str:
    norms = {name: float(np.linalg.norm(p.data)) for name, p in state.params[:4]}
    return ", ".join(f"{k}={v:.3g}" for k, v in norms.items())


# ---------------------------------------------------------------------------
# checkpoint container


def _state_records(state: TrainState) -> dict[str, np.ndarray]:
    records: dict[str, np.ndarray] = {
        "meta.step": np.array([float(state.step)]),
        "meta.opt_t": np.array([float(state.optimizer.t)]),
        "meta.rng_seed": np.array([float(state.rng.seed)]),
        "meta.rng_counter": np.array([float(state.rng.counter)]),
    }
    for name, p in state.params:
        records[f"param.{name}"] = p.data
        records[f"opt.m.{name}"] = state.optimizer.m[name]
        records[f"opt.v.{name}"] = state.optimizer.v[name]
    return records


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = _state_records(state)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(state.config.digest())
        for name in sorted(records):
            arr = np.ascontiguousarray(records[name], dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint_records(path: str | Path) -> tuple[bytes, dict[str, np.ndarray]]:
    """Parse a checkpoint file into (config digest, named arrays)."""
    blob = Path(path).read_bytes()
    if len(blob) < 40 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported format version {version}")
    digest = blob[8:40]
    records: dict[str, np.ndarray] = {}
    off = 40
    try:
        while off < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).copy()
            off += 8 * count
            records[name] = arr.reshape(dims)
    except (struct.error, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: truncated or corrupt record ({exc})") from exc
    if off != len(blob):
        raise CheckpointFormatError(f"{path}: trailing bytes after last record")
    return digest, records


def load_checkpoint(path: str | Path, config: TrainConfig) -> TrainState:
    """Rebuild a TrainState from a checkpoint; digest must match config."""
    digest, records = read_checkpoint_records(path)
    if digest != config.digest():
        raise IncompatibleCheckpointError(
            f"{path}: checkpoint config digest does not match the supplied config"
        )
    state = init_state(config)
    for name, p in state.params:
        key = f"param.{name}"
        if key not in records:
            raise CheckpointFormatError(f"{path}: missing record {key}")
        if records[key].shape != p.shape:
            raise IncompatibleCheckpointError(
                f"{path}: record {key} has shape {records[key].shape}, expected {p.shape}"
            )
        p.data[...] = records[key]
        state.optimizer.m[name][...] = records[f"opt.m.{name}"].reshape(-1)
        state.optimizer.v[name][...] = records[f"opt.v.{name}"].reshape(-1)
    state.step = int(records["meta.step"][0])
    state.optimizer.t = int(records["meta.opt_t"][0])
    state.rng = RngState(int(records["meta.rng_seed"][0]), int(records["meta.rng_counter"][0]))
    return state


# ---------------------------------------------------------------------------
# full runs


def run(
    config: TrainConfig,
    dataset: PairDataset,
    out_dir: str | Path | None = None,
    checkpoint_every: int = 100,
    resume_from: str | Path | None = None,
) -> tuple[TrainState, list[dict]]:
    """Train for config.total_steps; emit checkpoints and the metric log.

    Checkpoints land at every multiple of `checkpoint_every` completed
    steps (including step 0) plus the final step. Returns the final state
    and the list of per-step metric records.
    """
    if len(dataset.records) == 0:
        raise ValueError("dataset is empty")
    if checkpoint_every < 1:
        raise ValueError("checkpoint_every must be >= 1")

    state = load_checkpoint(resume_from, config) if resume_from else init_state(config)

    ckpt_dir = metrics_path = None
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt_dir = out_dir / "checkpoints"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_fh = open(metrics_path, "a" if resume_from else "w")

    def maybe_checkpoint(completed: int) -> None:
        if ckpt_dir is None:
            return
        if completed % checkpoint_every == 0 or completed == config.total_steps:
            save_checkpoint(ckpt_dir / f"step{completed:06d}.ckpt", state)

    metrics: list[dict] = []
    try:
        if state.step == 0:
            maybe_checkpoint(0)
        for step in range(state.step, config.total_steps):
            batch = select_batch(dataset, config, step)
            record = train_step(state, batch)
            metrics.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            maybe_checkpoint(state.step)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return state, metrics
