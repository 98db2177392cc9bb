"""Frozen seeded toy encoder: token sequences -> unit embeddings.

A small causal transformer (token embedding + sinusoidal positions +
single-head attention blocks with tanh feed-forwards) whose projection
matrices expose adapter injection sites. The backbone itself never trains:
all weights are derived from `init_seed` and stay constant, so any change
in behaviour comes from attached adapters.

The embedding of a sample is the last-token (end-of-sequence) hidden state
of the final layer, L2-normalized. Batches are forwarded per length bucket
with stacked matmuls, which keeps every sample's arithmetic independent of
its batchmates — embeddings are bit-identical whether a sample is embedded
alone or inside any batch.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numcore import (
    RngState,
    Tensor,
    affine,
    derive_seed,
    l2_normalize_rows,
    matmul,
    randn,
    rmsnorm,
    softmax_rows,
    take_positions,
    take_rows,
    concat_rows,
)
from . import moe_lora

PROJECTION_NAMES = ("q", "k", "v", "o")
_MASK_FILL = -1e30


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 256
    model_dim: int = 64
    num_layers: int = 4
    projections_per_layer: int = 3  # first G of (q, k, v, o)
    max_seq_len: int = 32
    init_seed: int = 12345
    eos_id: int = 0

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if not (1 <= self.projections_per_layer <= len(PROJECTION_NAMES)):
            raise ValueError("projections_per_layer must be in 1..4")
        if self.model_dim < 2:
            raise ValueError("model_dim must be >= 2")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.max_seq_len < 1:
            raise ValueError("max_seq_len must be >= 1")
        if not (0 <= self.eos_id < self.vocab_size):
            raise ValueError("eos_id must be a valid token id")

    @property
    def adapter_projections(self) -> tuple[str, ...]:
        return PROJECTION_NAMES[: self.projections_per_layer]

    @property
    def num_sites(self) -> int:
        return self.num_layers * self.projections_per_layer

    def sites(self) -> list[tuple[int, str]]:
        """All (layer, projection) adapter injection sites, in order."""
        return [
            (layer, proj)
            for layer in range(self.num_layers)
            for proj in self.adapter_projections
        ]


@dataclass(frozen=True)
class Sample:
    task_id: int
    tokens: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) == 0:
            raise ValueError("tokens must be non-empty")


def _sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    half = (dim + 1) // 2
    pos = np.arange(max_len)[:, None]
    freq = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    table = np.zeros((max_len, 2 * half))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)
    return table[:, :dim]


class Encoder:
    """Frozen backbone with per-site adapter slots."""

    def __init__(self, config: EncoderConfig):
        self.config = config
        d = config.model_dim
        hidden = 2 * d
        rng = RngState(derive_seed(config.init_seed, "encoder"))
        self.token_emb = randn((config.vocab_size, d), d ** -0.5, rng).data
        self.pos_table = _sinusoidal_positions(config.max_seq_len, d)
        # projection weights kept in (d_out, d_in) orientation, matching the
        # adapter API; forward computes x @ W.T
        self.layers: list[dict[str, Tensor]] = []
        for _ in range(config.num_layers):
            self.layers.append(
                {
                    "q": randn((d, d), d ** -0.5, rng),
                    "k": randn((d, d), d ** -0.5, rng),
                    "v": randn((d, d), d ** -0.5, rng),
                    "o": randn((d, d), d ** -0.5, rng),
                    "f1": randn((hidden, d), d ** -0.5, rng),
                    "f2": randn((d, hidden), hidden ** -0.5, rng),
                }
            )
        # transposed frozen copies so the hot path skips transpose nodes
        self._layers_t: list[dict[str, Tensor]] = [
            {name: Tensor(np.ascontiguousarray(w.data.T)) for name, w in layer.items()}
            for layer in self.layers
        ]
        self.adapters: dict[tuple[int, str], object] = {}
        self._scale = d ** -0.5

    # -- adapter management -------------------------------------------

    def attach_adapter(self, layer: int, proj: str, adapter) -> None:
        site = (layer, proj)
        if site not in set(self.config.sites()):
            raise ValueError(f"{site} is not a configured injection site")
        if site in self.adapters:
            raise ValueError(f"site {site} already has an adapter attached")
        self.adapters[site] = adapter
    def clear_adapters(self) -> None:
        self.adapters.clear()

    def has_moe(self) -> bool:
        return any(
            isinstance(a, moe_lora.MoeLoraLayer) for a in self.adapters.values()
        )

    def frozen_checksum(self) -> str:
        """Digest of all backbone weights; constant across training."""
        h = hashlib.sha256()
        h.update(self.token_emb.tobytes())
        h.update(self.pos_table.tobytes())
        for layer in self.layers:
            for name in ("q", "k", "v", "o", "f1", "f2"):
                h.update(layer[name].data.tobytes())
        return h.hexdigest()

    # -- forward -------------------------------------------------------

    def _validate(self, sample: Sample) -> None:
        cfg = self.config
        if len(sample.tokens) > cfg.max_seq_len:
            raise ValueError(
                f"sequence length {len(sample.tokens)} exceeds max_seq_len {cfg.max_seq_len}"
            )
        if sample.tokens[-1] != cfg.eos_id:
            raise ValueError("last token must be the end-of-sequence id")
        for t in sample.tokens:
            if not (0 <= t < cfg.vocab_size):
                raise ValueError(f"token id {t} out of range [0, {cfg.vocab_size})")

    def _project(self, layer: int, proj: str, x: Tensor, captures: dict) -> Tensor:
        adapter = self.adapters.get((layer, proj))
        if adapter is None:
            return matmul(x, self._layers_t[layer][proj])
        w0 = self.layers[layer][proj]
        if isinstance(adapter, moe_lora.MoeLoraLayer):
            out, routing = moe_lora.moe_forward(w0, adapter, x)
            captures[(layer, proj)] = routing.data.copy()
            return out
        return moe_lora.lora_forward(w0, adapter, x)

    def _forward_block(self, tokens: np.ndarray) -> tuple[Tensor, dict]:
        """Forward a [B, T] token block; returns final hidden [B, T, d]."""
        b, t = tokens.shape
        captures: dict[tuple[int, str], np.ndarray] = {}
        x = Tensor(self.token_emb[tokens] + self.pos_table[:t])
        causal = np.triu(np.full((t, t), _MASK_FILL), k=1)
        for layer in range(self.config.num_layers):
            a = rmsnorm(x)
            q = self._project(layer, "q", a, captures)
            k = self._project(layer, "k", a, captures)
            v = self._project(layer, "v", a, captures)
            scores = affine(matmul(q, k.transpose_last2()), self._scale, causal)
            attn = softmax_rows(scores)
            x = x + self._project(layer, "o", matmul(attn, v), captures)
            h = rmsnorm(x)
            wt = self._layers_t[layer]
            x = x + matmul(matmul(h, wt["f1"]).tanh(), wt["f2"])
        return rmsnorm(x), captures

    def embed_batch(
        self, samples: Sequence[Sample]
    ) -> tuple[Tensor, list[dict[tuple[int, str], np.ndarray] | None]]:
        """Embed samples; returns unit embeddings [B, d] and, when MoE
        adapters are attached, each sample's per-site per-token routing."""
        if len(samples) == 0:
            raise ValueError("empty batch")
        for s in samples:
            self._validate(s)
        moe_attached = self.has_moe()
        routing: list = [None] * len(samples)

        # bucket by sequence length so no padding is ever needed
        buckets: dict[int, list[int]] = {}
        for i, s in enumerate(samples):
            buckets.setdefault(len(s.tokens), []).append(i)

        parts: list[Tensor] = []
        order: list[int] = []
        for t_len in sorted(buckets):
            idx = buckets[t_len]
            tokens = np.array([samples[i].tokens for i in idx], dtype=np.int64)
            hidden, captures = self._forward_block(tokens)
            eos_pos = np.full(len(idx), t_len - 1)
            parts.append(take_positions(hidden, eos_pos))
            order.extend(idx)
            if moe_attached:
                for row, i in enumerate(idx):
                    routing[i] = {
                        site: cap[row] for site, cap in captures.items()
                    }
        stacked = concat_rows(parts) if len(parts) > 1 else parts[0]
        # restore original sample order
        inv = np.empty(len(order), dtype=np.int64)
        inv[np.asarray(order)] = np.arange(len(order))
        emb = l2_normalize_rows(take_rows(stacked, inv))
        return emb, routing

    def embed(self, sample: Sample) -> tuple[Tensor, dict | None]:
        """Embed one sample: unit vector [d] plus its routing capture."""
        emb, routing = self.embed_batch([sample])
        flat = emb.reshape(self.config.model_dim)
        return flat, routing[0]


def build_frozen(config: EncoderConfig) -> Encoder:
    """Construct the frozen encoder for a config (all weights from init_seed)."""
    return Encoder(config)


def similarity(a, b) -> float:
    """Dot product of two unit vectors, in [-1, 1].

    Raises if either argument deviates from unit norm by more than 1e-6.
    """
    av = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    for name, v in (("a", av), ("b", bv)):
        norm = float(np.sqrt((v * v).sum()))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"{name} is not L2-normalized (norm={norm})")
    return float(np.clip(np.dot(av.reshape(-1), bv.reshape(-1)), -1.0, 1.0))
