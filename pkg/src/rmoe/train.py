"""Masked-reconstruction pretraining loop with AdamW."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data
from .model import EncoderConfig, Modality, RMoEModel, bind, init_model, reconstruct
from .numkit import NonFiniteError, SeededRng
from .objectives import recon_loss, total_balance_loss, total_loss

log = logging.getLogger(__name__)

_MODEL_FIELDS = {f.name for f in dataclasses.fields(EncoderConfig)} - {
    "block_kinds", "collab_experts", "collab_gate_columns"
}


@dataclass
class TrainConfig:
    dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    expansion: int = 4
    patch_size: int = 8
    image_size: int = 32
    n_specialized: int = 4
    n_collaborative: int = 4
    top_k: int = 1
    init_std: float = 0.02
    alpha: float = 0.01
    mask_ratio: float = data.DEFAULT_MASK_RATIO
    lr: float = 2e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    modalities: list[str] = field(default_factory=lambda: [m.value for m in Modality])

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not 0 <= self.mask_ratio <= 1:
            raise ValueError("mask_ratio must lie in [0, 1]")
        self.betas = tuple(self.betas)
        self.modalities = [Modality.parse(m).value for m in self.modalities]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in _MODEL_FIELDS})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ AdamW


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adamw_update(params: dict, grads: dict, moments: AdamState, lr: float, weight_decay: float = 0.05,
                 betas=(0.9, 0.999), eps: float = 1e-8):
    """One AdamW step; returns ``(new_params, new_moments)`` without mutating inputs.

    Weight decay is decoupled and applied multiplicatively before the
    bias-corrected adaptive step.
    """
    b1, b2 = betas
    t = moments.t + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        dt = p.dtype.type
        m = dt(b1) * moments.m[name] + dt(1 - b1) * g
        v = dt(b2) * moments.v[name] + dt(1 - b2) * g * g
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        q = p * dt(1.0 - lr * weight_decay)
        new_p[name] = (q - dt(lr) * (m_hat / (np.sqrt(v_hat) + dt(eps)))).astype(p.dtype)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


def clip_by_global_norm(grads: dict, max_norm: float):
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-6)
        grads = {k: (g * g.dtype.type(s)).astype(g.dtype) for k, g in grads.items()}
    return grads, total


# ------------------------------------------------------------------ state


@dataclass
class TrainState:
    model: RMoEModel
    optimizer: AdamState
    norm: data.NormStats
    step: int = 0
    config: TrainConfig | None = None


class TrainingDiverged(FloatingPointError):
    pass


def init_state(cfg: TrainConfig) -> TrainState:
    model = init_model(cfg.encoder_config(), cfg.seed)
    norm = data.compute_norm_stats(cfg.modalities, size=cfg.image_size)
    return TrainState(model, AdamState.zeros_like(model.named_tensors()), norm, 0, cfg)


def forward_loss(model: RMoEModel, batch: data.MultiModalBatch, rng: SeededRng | None, train: bool,
                 alpha: float, dtype=np.float32):
    """Build the full objective on a fresh graph.

    Returns ``(graph, loss, recon, balance, terms)``.
    """
    graph = ad.CompGraph(dtype)
    bound = bind(graph, model)
    preds, targets, records = {}, {}, []
    for m, part in batch.parts.items():
        x_hat, _, recs = reconstruct(bound, part.tokens, part.mask, m, rng, train, graph)
        preds[m] = x_hat
        targets[m] = part.recon_target()
        records.extend(recs)
    recon = recon_loss(preds, targets)
    balance, terms = total_balance_loss(records)
    loss = total_loss(recon, balance, alpha)
    return graph, loss, recon, balance, terms


def train_step(state: TrainState, batch: data.MultiModalBatch, rng: SeededRng, cfg: TrainConfig):
    """Forward, backward and one AdamW update. Returns ``(new_state, metrics)``."""
    try:
        graph, loss, recon, balance, terms = forward_loss(state.model, batch, rng, True, cfg.alpha)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value at step {state.step + 1}: {exc}") from exc
    if not np.isfinite(loss.value):
        raise TrainingDiverged(f"loss {loss.value} at step {state.step + 1}")
    grads = ad.backward(graph, loss)
    grads, gnorm = clip_by_global_norm(grads, cfg.grad_clip)
    params, opt = adamw_update(
        state.model.named_tensors(), grads, state.optimizer, cfg.lr, cfg.weight_decay, cfg.betas, cfg.adam_eps
    )
    new_state = TrainState(state.model.with_tensors(params), opt, state.norm, state.step + 1, state.config)
    metrics = {
        "step": new_state.step,
        "modalities": sorted(batch.counts),
        "loss": float(loss.value),
        "recon": float(recon.value),
        "balance": float(balance.value) if balance is not None else 0.0,
        "grad_norm": gnorm,
        "f": {_bank_label(k): t.f.tolist() for k, t in terms.items()},
    }
    return new_state, metrics


def _bank_label(key: tuple) -> str:
    return ".".join(str(k) for k in key)


# ------------------------------------------------------------------ data feed


def step_modality(cfg: TrainConfig, step: int) -> Modality:
    """Round-robin single-modality schedule."""
    return Modality(cfg.modalities[step % len(cfg.modalities)])


def synth_batch(cfg: TrainConfig, norm: data.NormStats, step: int) -> data.MultiModalBatch:
    m = step_modality(cfg, step)
    root = SeededRng(cfg.seed).spawn(0xDA7A, step)
    seeds = root.integers(0, 2**62, shape=cfg.batch_size)
    images = [data.synth_scene(m, int(s), cfg.image_size) for s in seeds]
    return data.make_batch(images, norm, cfg.patch_size, cfg.mask_ratio, int(root.integers(0, 2**62)))


def eval_batch(cfg: TrainConfig, norm: data.NormStats, m: Modality, count: int = 16,
               seed: int = 987654321) -> data.MultiModalBatch:
    images = [data.synth_scene(m, seed + i, cfg.image_size) for i in range(count)]
    return data.make_batch(images, norm, cfg.patch_size, cfg.mask_ratio, seed)


def eval_recon(model: RMoEModel, batch: data.MultiModalBatch) -> float:
    """Masked reconstruction loss in evaluation mode (no gating noise)."""
    _, _, recon, _, _ = forward_loss(model, batch, None, False, 0.0)
    return float(recon.value)


def pretrain(cfg: TrainConfig, steps: int | None = None, state: TrainState | None = None, callback=None):
    """Run ``steps`` training steps; returns ``(state, metrics_history)``."""
    steps = cfg.steps if steps is None else steps
    state = init_state(cfg) if state is None else state
    history = []
    for _ in range(steps):
        batch = synth_batch(cfg, state.norm, state.step)
        rng = SeededRng(cfg.seed).spawn(0x6A7E, state.step)
        state, metrics = train_step(state, batch, rng, cfg)
        history.append(metrics)
        if callback is not None:
            callback(state, metrics)
        if state.step % 50 == 0:
            log.info("step %d loss %.4f recon %.4f balance %.4f", state.step, metrics["loss"],
                     metrics["recon"], metrics["balance"])
    return state, history


def coefficient_of_variation(f) -> float:
    f = np.asarray(f, dtype=np.float64)
    return float(f.std() / f.mean())
