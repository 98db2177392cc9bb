"""Desk-scale lab for routed low-rank adapter embedding training."""

from .numcore import RngState, Tensor, backward, derive_seed, finite_diff_check, randn
from .encoder import Encoder, EncoderConfig, Sample, build_frozen, similarity
from .moe_lora import (
    LoraExpert,
    MoeLoraLayer,
    RoutingSignature,
    extract_signature,
    gate,
    layer_mask_for_coverage,
    lora_forward,
    make_lora_expert,
    make_moe_layer,
    moe_forward,
)
from .losses import (
    ContrastiveBatch,
    EansParams,
    decay_weight,
    eans,
    infonce,
    normalize_weights,
    routing_distance,
    staged_loss,
)
from .trainer import TrainConfig, TrainState, init_state, load_checkpoint, run, save_checkpoint, train_step
from .data import PairDataset, PairRecord, evaluate, generate_conflict_dataset, load_jsonl, save_jsonl
from . import diagnostics, kernels

__version__ = "0.1.0"
