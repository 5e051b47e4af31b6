"""Post-training model transforms.

All functions return new models and leave their inputs untouched.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .data import NormStats, SceneImage, make_batch
from .model import (
    ExpertFFN,
    GatingNetwork,
    Modality,
    ModalityError,
    RMoELayer,
    RMoEModel,
    encoder_forward,
)

DEFAULT_PERCENTILE = 75.0


# --------------------------------------------------------------- profiling


@dataclass
class ActivationStats:
    """Collaborative-expert dispatch counts per ``(block, modality)``.

    ``layers[block][modality]`` holds ``experts`` (ids), ``counts`` and
    ``tokens``; frequencies count ``1/K`` per selection so they sum to one.
    """

    top_k: int
    layers: dict[int, dict[str, dict]] = field(default_factory=dict)

    def freqs(self, block: int, m) -> dict[int, float]:
        rec = self.layers[block][Modality.parse(m).value]
        denom = rec["tokens"] * self.top_k
        return {e: c / denom for e, c in zip(rec["experts"], rec["counts"])}

    def modalities(self, block: int) -> list[str]:
        return list(self.layers[block])

    def to_dict(self) -> dict:
        return {
            "top_k": self.top_k,
            "layers": {
                str(b): {
                    m: {**rec, "freq": [c / (rec["tokens"] * self.top_k) for c in rec["counts"]]}
                    for m, rec in mods.items()
                }
                for b, mods in self.layers.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActivationStats":
        layers = {
            int(b): {m: {k: rec[k] for k in ("experts", "counts", "tokens")} for m, rec in mods.items()}
            for b, mods in d["layers"].items()
        }
        return cls(int(d["top_k"]), layers)


def profile_activations(model: RMoEModel, images: list[SceneImage], norm: NormStats, mask_ratio: float = 0.0,
                        seed: int = 0, chunk: int = 32) -> ActivationStats:
    """Exact collaborative dispatch counts over a corpus, in evaluation mode."""
    if not images:
        raise ValueError("cannot profile an empty corpus")
    cfg = model.config
    stats = ActivationStats(cfg.top_k)
    for start in range(0, len(images), chunk):
        batch = make_batch(images[start:start + chunk], norm, cfg.patch_size, mask_ratio, seed + start)
        for m, part in batch.parts.items():
            _, records = encoder_forward(model, part.tokens, part.mask, m, None, False)
            for r in records:
                if r.bank != "collaborative":
                    continue
                slot = stats.layers.setdefault(r.block, {}).setdefault(
                    m.value, {"experts": list(r.expert_ids), "counts": [0] * len(r.expert_ids), "tokens": 0}
                )
                slot["counts"] = [a + int(b) for a, b in zip(slot["counts"], r.counts)]
                slot["tokens"] += r.selected.shape[0]
    return stats


# ----------------------------------------------------------------- pruning


def percentile_threshold(freqs, percentile: float = DEFAULT_PERCENTILE) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * N)``-th smallest value."""
    vals = np.sort(np.asarray(freqs, dtype=np.float64))
    if vals.size == 0:
        raise ValueError("no frequencies")
    rank = max(1, math.ceil(percentile / 100.0 * vals.size))
    return float(vals[rank - 1])


@dataclass
class PruneReport:
    layers: dict[int, dict] = field(default_factory=dict)
    params_before: int = 0
    params_after: int = 0

    def to_dict(self) -> dict:
        return {
            "layers": {str(k): v for k, v in self.layers.items()},
            "params_before": self.params_before,
            "params_after": self.params_after,
        }


def retained_experts(freqs: dict[int, float], percentile: float = DEFAULT_PERCENTILE):
    """Return ``(threshold, kept_ids)`` with kept ids strictly above the threshold."""
    phi = percentile_threshold(list(freqs.values()), percentile)
    return phi, sorted(e for e, f in freqs.items() if f > phi)


def sparse_prune(model: RMoEModel, stats: ActivationStats, percentile: float = DEFAULT_PERCENTILE,
                 modalities=None, drop_gate_columns: bool = False, keep: dict[int, list[int]] | None = None):
    """Drop rarely used collaborative experts; specialized and shared experts stay.

    Per block the kept set is the union over modalities of experts whose
    frequency exceeds that modality's percentile threshold. If the union is
    empty the most frequent expert of each modality is kept instead. ``keep``
    overrides the computed sets (block -> expert ids).

    By default the pruned experts' gate columns stay in the softmax (but can
    no longer be selected), so surviving gate values are unchanged.
    ``drop_gate_columns=True`` deletes them instead.
    """
    cfg = model.config
    mods = [Modality.parse(m).value for m in (modalities or cfg.modalities)]
    report = PruneReport(params_before=model.num_params())
    new_blocks = []
    experts_cfg = [list(x) for x in cfg.collab_experts]
    cols_cfg = [list(x) for x in cfg.collab_gate_columns]
    for bi, block in enumerate(model.blocks):
        if not isinstance(block.ffn, RMoELayer):
            new_blocks.append(block)
            continue
        layer = block.ffn
        entry = {"thresholds": {}, "retained": {}, "rescued": False}
        if keep is not None:
            union = sorted(keep[bi])
        else:
            if bi not in stats.layers:
                raise KeyError(f"activation stats missing block {bi}")
            union = set()
            for m in mods:
                if m not in stats.layers[bi]:
                    raise KeyError(f"activation stats missing modality {m} at block {bi}")
                phi, kept = retained_experts(stats.freqs(bi, m), percentile)
                entry["thresholds"][m] = phi
                entry["retained"][m] = kept
                union.update(kept)
            if not union:
                entry["rescued"] = True
                for m in mods:
                    fr = stats.freqs(bi, m)
                    union.add(max(fr, key=lambda e: (fr[e], -e)))
            union = sorted(union)
        entry["union"] = union
        report.layers[bi] = entry
        gate = layer.collaborative_gate
        if gate.top_k > len(union):
            raise ValueError(f"block {bi}: {len(union)} experts left but top_k={gate.top_k}")
        experts = [e for e, eid in zip(layer.collaborative, gate.experts) if eid in union]
        if drop_gate_columns:
            cols = [i for i, c in enumerate(gate.columns) if c in union]
            new_gate = GatingNetwork(gate.w_gate[:, cols].copy(), gate.w_noise[:, cols].copy(), gate.top_k,
                                     list(union), list(union))
        else:
            new_gate = GatingNetwork(gate.w_gate.copy(), gate.w_noise.copy(), gate.top_k, list(gate.columns),
                                     list(union))
        experts_cfg[bi] = list(union)
        cols_cfg[bi] = list(new_gate.columns)
        new_layer = dataclasses.replace(
            layer, collaborative=[_copy_expert(e) for e in experts], collaborative_gate=new_gate
        )
        new_blocks.append(dataclasses.replace(block, ffn=new_layer))
    config = dataclasses.replace(cfg, collab_experts=experts_cfg, collab_gate_columns=cols_cfg)
    pruned = dataclasses.replace(model, config=config, blocks=new_blocks).copy()
    report.params_after = pruned.num_params()
    return pruned, report


def _copy_expert(e: ExpertFFN) -> ExpertFFN:
    return ExpertFFN(e.w1.copy(), e.b1.copy(), e.w2.copy(), e.b2.copy())


def decompose_modality(model: RMoEModel, m) -> RMoEModel:
    """Sub-model keeping only modality ``m``'s specialized bank, embedder and decoder."""
    m = Modality.parse(m)
    if m not in model.embed:
        raise ModalityError(f"model has no modality {m.value}")
    blocks = []
    for block in model.blocks:
        if isinstance(block.ffn, RMoELayer):
            layer = block.ffn
            block = dataclasses.replace(
                block,
                ffn=dataclasses.replace(
                    layer,
                    specialized={m: layer.specialized[m]},
                    specialized_gates={m: layer.specialized_gates[m]},
                ),
            )
        blocks.append(block)
    config = dataclasses.replace(model.config, modalities=[m.value])
    return dataclasses.replace(
        model,
        config=config,
        embed={m: model.embed[m]},
        decoders={m: model.decoders[m]} if m in model.decoders else {},
        blocks=blocks,
    ).copy()


# ----------------------------------------------------------------- fusion


@dataclass
class FusedFFN:
    ffn: ExpertFFN
    provenance: str  # "sum" | "average" | "compress"


def _all_experts(layer: RMoELayer) -> list[ExpertFFN]:
    experts = [e for bank in layer.specialized.values() for e in bank]
    experts += list(layer.collaborative)
    experts.append(layer.shared)
    shapes = {tuple(getattr(e, f).shape for f in ("w1", "b1", "w2", "b2")) for e in experts}
    if len(shapes) != 1:
        raise nk.ShapeError("experts in a layer must share shapes to be fused")
    return experts


def _sum(arrays):
    out = np.array(arrays[0], dtype=np.float64)
    for a in arrays[1:]:
        out = out + a
    return out


def knowledge_sum(layer: RMoELayer) -> FusedFFN:
    experts = _all_experts(layer)
    fused = ExpertFFN(*(_sum([getattr(e, f) for e in experts]).astype(np.float32) for f in ("w1", "b1", "w2", "b2")))
    return FusedFFN(fused, "sum")


def knowledge_average(layer: RMoELayer) -> FusedFFN:
    experts = _all_experts(layer)
    n = len(experts)
    fused = ExpertFFN(
        *((_sum([getattr(e, f) for e in experts]) / n).astype(np.float32) for f in ("w1", "b1", "w2", "b2"))
    )
    return FusedFFN(fused, "average")


def truncated_factors(w: np.ndarray, rank: int):
    """Rank-``rank`` SVD factors ``(U_K, S_K, V_K)`` of ``w`` in float64."""
    u, s, v = nk.svd(np.asarray(w, dtype=np.float64))
    rank = min(rank, s.size)
    return u[:, :rank], s[:rank], v[:, :rank]


def block_concat_product(factors) -> np.ndarray:
    """``[U_1 ... U_n] blockdiag(S_1 ... S_n) [V_1^T; ...; V_n^T]``."""
    u = np.concatenate([f[0] for f in factors], axis=1)
    s = np.concatenate([f[1] for f in factors])
    vt = np.concatenate([f[2].T for f in factors], axis=0)
    return nk.matmul(u * s, vt)


def sum_of_truncations(factors) -> np.ndarray:
    return _sum([nk.matmul(u * s, np.ascontiguousarray(v.T)) for u, s, v in factors])


def _compress_rank(hidden: int, n: int) -> int:
    if hidden % n:
        raise ValueError(f"hidden width {hidden} not divisible by bank size {n}")
    return hidden // n


def knowledge_compress(layer: RMoELayer) -> FusedFFN:
    """Low-rank fusion: each gated expert truncated to rank ``hidden / bank_size``, then summed with the shared expert."""
    hidden = layer.shared.w1.shape[1]
    groups = [(bank, _compress_rank(hidden, len(bank))) for bank in layer.specialized.values()]
    groups.append((layer.collaborative, _compress_rank(hidden, len(layer.collaborative))))
    _all_experts(layer)
    fused = {}
    for f in ("w1", "w2"):
        parts = []
        for bank, rank in groups:
            parts.append(block_concat_product([truncated_factors(getattr(e, f), rank) for e in bank]))
        fused[f] = (_sum(parts) + getattr(layer.shared, f)).astype(np.float32)
    experts = _all_experts(layer)
    for f in ("b1", "b2"):
        fused[f] = _sum([getattr(e, f) for e in experts]).astype(np.float32)
    return FusedFFN(ExpertFFN(fused["w1"], fused["b1"], fused["w2"], fused["b2"]), "compress")


FUSERS = {"ks": knowledge_sum, "ka": knowledge_average, "kc": knowledge_compress}


def fuse_model(model: RMoEModel, strategy: str) -> RMoEModel:
    """Replace every mixture layer by a single dense FFN (``ks``/``ka``/``kc``)."""
    fuser = FUSERS[strategy]
    blocks, kinds = [], list(model.config.block_kinds)
    for bi, block in enumerate(model.blocks):
        if isinstance(block.ffn, RMoELayer):
            block = dataclasses.replace(block, ffn=fuser(block.ffn).ffn)
            kinds[bi] = "dense"
        blocks.append(block)
    config = dataclasses.replace(model.config, block_kinds=kinds)
    return dataclasses.replace(model, config=config, blocks=blocks).copy()


def count_params(model: RMoEModel) -> dict[str, int]:
    """Parameter counts by component, recounted from tensor sizes."""
    out = {"total": 0, "specialized": 0, "collaborative": 0, "shared": 0, "gates": 0, "other": 0}
    for name, arr in model.named_tensors().items():
        out["total"] += arr.size
        if ".ffn.specialized_gates." in name or ".ffn.collaborative_gate." in name:
            out["gates"] += arr.size
        elif ".ffn.specialized." in name:
            out["specialized"] += arr.size
        elif ".ffn.collaborative." in name:
            out["collaborative"] += arr.size
        elif ".ffn.shared." in name:
            out["shared"] += arr.size
        else:
            out["other"] += arr.size
    return out
