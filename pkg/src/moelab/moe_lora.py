"""Low-rank adapters, the expert mixture, and routing signatures.

A LoraExpert adds a trainable rank-r residual (alpha/r) * B @ A to one
frozen projection. A MoeLoraLayer holds N such experts plus a linear gate
whose softmax output blends them per token (dense mixture: every expert is
evaluated, no top-k). The per-token gate distributions, pooled over a
sample's tokens at every (layer, projection) site, form the sample's
routing signature — the semantic proxy the weighted loss consumes.

Parameter shapes follow the column-vector convention (A: [r, k],
B: [d_out, r], gate: [N, k]) while forward passes act on row-stacked
inputs x[..., k].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .numcore import RngState, Tensor, matmul, randn, softmax_rows, zeros


@dataclass
class LoraExpert:
    A: Tensor  # (rank, d_in)
    B: Tensor  # (d_out, rank)
    rank: int
    alpha: float

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        r_a, d_in = self.A.shape
        d_out, r_b = self.B.shape
        if r_a != self.rank or r_b != self.rank:
            raise ValueError(f"A/B shapes {self.A.shape}/{self.B.shape} disagree with rank {self.rank}")
        if self.rank > min(d_out, d_in):
            raise ValueError(f"rank {self.rank} exceeds min(d_out, d_in)={min(d_out, d_in)}")

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        """Dense effective residual (alpha/r) * B @ A as a plain array."""
        return self.scaling * (self.B.data @ self.A.data)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("A", self.A), ("B", self.B)]


def make_lora_expert(
    d_out: int, d_in: int, rank: int, alpha: float, rng: RngState
) -> LoraExpert:
    """A ~ N(0, 1/sqrt(d_in)), B = 0: training starts at the frozen backbone."""
    a = randn((rank, d_in), d_in ** -0.5, rng)
    a.requires_grad = True
    b = zeros((d_out, rank), requires_grad=True)
    return LoraExpert(A=a, B=b, rank=rank, alpha=alpha)


@dataclass
class MoeLoraLayer:
    experts: list[LoraExpert]
    gate: Tensor  # (N, d_in)
    router_temperature: float = 1.0

    def __post_init__(self):
        if len(self.experts) < 1:
            raise ValueError("need at least one expert")
        if self.router_temperature <= 0:
            raise ValueError("router_temperature must be positive")
        shapes = {(e.rank, e.d_in, e.d_out) for e in self.experts}
        if len(shapes) != 1:
            raise ValueError(f"experts disagree on (rank, d_in, d_out): {shapes}")
        n, d_in = self.gate.shape
        if n != len(self.experts) or d_in != self.experts[0].d_in:
            raise ValueError(f"gate shape {self.gate.shape} does not match {len(self.experts)} experts")

    @property
    def num_experts(self) -> int:
        return len(self.experts)

    def parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, e in enumerate(self.experts):
            out.append((f"expert{i}.A", e.A))
            out.append((f"expert{i}.B", e.B))
        out.append(("gate", self.gate))
        return out


def make_moe_layer(
    d_out: int,
    d_in: int,
    rank: int,
    alpha: float,
    num_experts: int,
    rng: RngState,
    router_temperature: float = 1.0,
) -> MoeLoraLayer:
    """N fresh experts plus a zero gate (uniform routing at step 0)."""
    experts = [make_lora_expert(d_out, d_in, rank, alpha, rng) for _ in range(num_experts)]
    g = zeros((num_experts, d_in), requires_grad=True)
    return MoeLoraLayer(experts=experts, gate=g, router_temperature=router_temperature)


def _as_rows(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 1:
        return x.reshape(1, x.shape[0]), True
    return x, False


def _apply_experts(
    w0: Tensor, experts: list[LoraExpert], routing: Tensor | None, x: Tensor
) -> Tensor:
    """Fused adapted projection: x W0^T + sum_i g_i * (alpha/r) (x A_i^T) B_i^T.

    One tape node covering the frozen base and every expert; the backward
    closure emits the per-expert GEMMs directly. With routing=None the
    expert weights are implicitly 1 (plain low-rank residual). Flattening
    the leading axes into a single GEMM keeps each output row a function
    of its own input row only.
    """
    d_in = x.shape[-1]
    d_out = w0.shape[0]
    m = x.size // d_in
    x2 = x.data.reshape(m, d_in)
    g2 = routing.data.reshape(m, len(experts)) if routing is not None else None

    # contiguous transpose keeps the GEMM layout identical to the
    # unadapted projection, so zeroed experts reproduce it bit for bit
    out2 = x2 @ np.ascontiguousarray(w0.data.T)
    cache: list[tuple[np.ndarray, np.ndarray]] = []
    for i, e in enumerate(experts):
        low = x2 @ e.A.data.T
        y = low @ e.B.data.T
        if g2 is None:
            out2 += e.scaling * y
        else:
            out2 += (e.scaling * g2[:, i:i + 1]) * y
        cache.append((low, y))

    parents = [x] + ([] if routing is None else [routing])
    for e in experts:
        parents.extend((e.A, e.B))
    req = any(p.requires_grad for p in parents)
    out = Tensor(out2.reshape(x.shape[:-1] + (d_out,)), req, tuple(parents))
    if req:
        def bw():
            g_out = out.grad.reshape(m, d_out)
            dx2 = g_out @ w0.data if x.requires_grad else None
            dg2 = np.empty((m, len(experts))) if routing is not None and routing.requires_grad else None
            for i, e in enumerate(experts):
                low, y = cache[i]
                coef = e.scaling if g2 is None else e.scaling * g2[:, i:i + 1]
                dy = coef * g_out
                if dg2 is not None:
                    dg2[:, i] = e.scaling * np.einsum("md,md->m", g_out, y)
                dlow = dy @ e.B.data
                if e.B.requires_grad:
                    e.B._accum(dy.T @ low, owned=True)
                if e.A.requires_grad:
                    e.A._accum(dlow.T @ x2, owned=True)
                if dx2 is not None:
                    dx2 += dlow @ e.A.data
            if dx2 is not None:
                x._accum(dx2.reshape(x.shape), owned=True)
            if dg2 is not None:
                routing._accum(dg2.reshape(routing.shape), owned=True)
        out._backward = bw
    return out


def lora_forward(w0: Tensor, expert: LoraExpert, x: Tensor) -> Tensor:
    """Adapted projection: x W0^T + (alpha/r) * ((x A^T) B^T).

    Gradient reaches A and B only; w0 stays frozen.
    """
    if x.shape[-1] != w0.shape[1] or x.shape[-1] != expert.d_in:
        raise ValueError(f"input dim {x.shape[-1]} does not match W0 {w0.shape} / expert d_in {expert.d_in}")
    if expert.d_out != w0.shape[0]:
        raise ValueError(f"expert d_out {expert.d_out} does not match W0 {w0.shape}")
    rows, squeeze = _as_rows(x)
    out = _apply_experts(w0, [expert], None, rows)
    return out.reshape(expert.d_out) if squeeze else out


def gate(layer: MoeLoraLayer, x: Tensor) -> Tensor:
    """Routing distribution softmax(W_g x / tau') over experts; sums to 1."""
    if x.shape[-1] != layer.gate.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match gate {layer.gate.shape}")
    rows, squeeze = _as_rows(x)
    logits = matmul(rows, layer.gate.transpose_last2())
    probs = softmax_rows(logits, temperature=layer.router_temperature)
    return probs.reshape(layer.num_experts) if squeeze else probs


def moe_forward(w0: Tensor, layer: MoeLoraLayer, x: Tensor) -> tuple[Tensor, Tensor]:
    """Mixture projection: x W0^T + sum_i g_i(x) * (alpha/r) (x A_i^T) B_i^T.

    Dense (soft) routing: all experts run and are blended by the gate, so
    gradient flows to every A_i, B_i and to the gate. Returns the output
    and the routing distribution for signature capture.
    """
    expert0 = layer.experts[0]
    if x.shape[-1] != w0.shape[1] or x.shape[-1] != expert0.d_in:
        raise ValueError(f"input dim {x.shape[-1]} does not match W0 {w0.shape} / experts d_in {expert0.d_in}")
    if expert0.d_out != w0.shape[0]:
        raise ValueError(f"expert d_out {expert0.d_out} does not match W0 {w0.shape}")
    rows, squeeze = _as_rows(x)
    routing = gate(layer, rows)
    out = _apply_experts(w0, layer.experts, routing, rows)
    if squeeze:
        return out.reshape(expert0.d_out), routing.reshape(layer.num_experts)
    return out, routing


# ---------------------------------------------------------------------------
# routing signatures


@dataclass
class RoutingSignature:
    """Per-sample routing record: values[L, G, N] with a layer inclusion mask.

    Every included (layer, site) slice is a probability vector; excluded
    layers are zero-filled and ignored by distances.
    """

    values: np.ndarray
    layer_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.layer_mask = np.asarray(self.layer_mask, dtype=bool)
        if self.values.ndim != 3:
            raise ValueError(f"values must be [L, G, N], got {self.values.shape}")
        if self.layer_mask.shape != (self.values.shape[0],):
            raise ValueError("layer_mask length must equal the layer count")
        if self.values.min() < -1e-9 or self.values.max() > 1.0 + 1e-9:
            raise ValueError("signature entries must lie in [0, 1]")
        included = self.values[self.layer_mask]
        if included.size:
            sums = included.sum(axis=-1)
            if np.abs(sums - 1.0).max() > 1e-6:
                raise ValueError("included signature slices must sum to 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def num_experts(self) -> int:
        return self.values.shape[2]

    def included_flat(self) -> np.ndarray:
        """Flattened values of the included layers (distance input)."""
        return self.values[self.layer_mask].reshape(-1)

    def included_denominator(self) -> int:
        lgn = int(self.layer_mask.sum()) * self.values.shape[1] * self.values.shape[2]
        if lgn == 0:
            raise ValueError("layer mask excludes every layer")
        return lgn


def signature_from_values(values: np.ndarray, layer_mask: np.ndarray) -> RoutingSignature:
    """Wrap precomputed pooled values without re-validating.

    Internal fast path for batched extraction, where values come straight
    from softmax outputs and already satisfy the invariants.
    """
    sig = object.__new__(RoutingSignature)
    sig.values = values
    sig.layer_mask = layer_mask
    return sig


def layer_mask_for_coverage(num_layers: int, fraction: float) -> np.ndarray:
    """Mask selecting the deepest `fraction` of layers (at least one)."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"coverage fraction must be in (0, 1], got {fraction}")
    n_inc = max(1, int(round(num_layers * fraction)))
    mask = np.zeros(num_layers, dtype=bool)
    mask[num_layers - n_inc:] = True
    return mask


def extract_signature(
    per_token_routing: Mapping[tuple[int, str], np.ndarray],
    valid_token_count: int,
    layer_mask: np.ndarray | Sequence[bool],
    pooling: str = "mean",
) -> RoutingSignature:
    """Pool one sample's per-token gate distributions into its signature.

    `per_token_routing` maps (layer, projection) to a [T, N] array. With
    pooling="mean" each slot is the arithmetic mean over the first
    `valid_token_count` tokens; "eos" keeps only the terminal token's
    distribution. Layers masked out are zero-filled.
    """
    layer_mask = np.asarray(layer_mask, dtype=bool)
    if pooling not in ("mean", "eos"):
        raise ValueError(f"pooling must be 'mean' or 'eos', got {pooling!r}")
    if valid_token_count < 1:
        raise ValueError("valid_token_count must be >= 1")
    if not per_token_routing:
        raise RuntimeError("no routing captured: are MoE adapters attached?")
    projections = sorted({proj for (_, proj) in per_token_routing},
                         key=["q", "k", "v", "o"].index)
    num_layers = layer_mask.shape[0]
    num_experts = next(iter(per_token_routing.values())).shape[1]
    values = np.zeros((num_layers, len(projections), num_experts))
    for layer in range(num_layers):
        if not layer_mask[layer]:
            continue
        for g_idx, proj in enumerate(projections):
            key = (layer, proj)
            if key not in per_token_routing:
                raise RuntimeError(f"missing routing capture for masked site {key}")
            tok = per_token_routing[key]
            if tok.shape[0] < valid_token_count:
                raise RuntimeError(f"capture at {key} has {tok.shape[0]} tokens < {valid_token_count}")
            if pooling == "mean":
                values[layer, g_idx] = tok[:valid_token_count].mean(axis=0)
            else:
                values[layer, g_idx] = tok[valid_token_count - 1]
    return RoutingSignature(values=values, layer_mask=layer_mask)
