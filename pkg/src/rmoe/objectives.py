"""Training objectives: load balance, reconstruction targets, masked MSE."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import BankDispatch, Modality

DEFAULT_ALPHA = 0.01

# channel layout of an SAR-L1 pixel: (HH, HV, VH, VV) x (re, im)
POLARIZATIONS = ("HH", "HV", "VH", "VV")


@dataclass
class BalanceTerms:
    f: np.ndarray  # dispatch fraction per expert, sums to 1
    P: np.ndarray  # mean soft probability per expert
    n_experts: int
    loss: ad.Node

    @property
    def value(self) -> float:
        return float(self.loss.value)


def _as_node(x, dtype=np.float64, graph: ad.CompGraph | None = None) -> ad.Node:
    if isinstance(x, ad.Node):
        return x
    return (graph or ad.CompGraph(dtype)).const(x)


def balance_loss_bank(selected, probs, top_k: int | None = None) -> BalanceTerms:
    """``N * sum_k f_k P_k`` for one gated bank.

    ``selected`` holds the (n, K) column positions chosen per token, ``probs``
    the (n, N) soft probabilities. Each selection counts ``1/K`` toward
    ``f``. Gradients reach ``probs`` only; ``f`` is a constant.
    """
    return _balance([(np.asarray(selected), _as_node(probs))], top_k)


def _balance(parts, top_k=None) -> BalanceTerms:
    n_tokens = sum(sel.shape[0] for sel, _ in parts)
    if n_tokens == 0:
        raise ValueError("balance loss needs at least one token")
    n_exp = parts[0][1].shape[1]
    k = top_k or parts[0][0].shape[1]
    counts = np.zeros(n_exp, np.float64)
    prob_sum = None
    for sel, probs in parts:
        np.add.at(counts, sel.reshape(-1), 1.0)
        s = ad.sum(probs, axis=0)
        prob_sum = s if prob_sum is None else prob_sum + s
    g = prob_sum.graph
    f = counts / (n_tokens * k)
    P = ad.scale(prob_sum, 1.0 / n_tokens)
    loss = ad.scale(ad.sum(P * g.const(f)), float(n_exp))
    return BalanceTerms(f=f, P=P.value.astype(np.float64), n_experts=n_exp, loss=loss)


def _positions(rec: BankDispatch) -> np.ndarray:
    lookup = {e: i for i, e in enumerate(rec.expert_ids)}
    return np.vectorize(lookup.__getitem__, otypes=[np.int64])(rec.selected)


def bank_terms(records: list[BankDispatch]) -> dict[tuple, BalanceTerms]:
    """Group dispatch records into banks and compute each bank's terms.

    Collaborative banks pool every modality's tokens for a block; specialized
    banks are keyed by ``(block, "specialized", modality)``.
    """
    groups: dict[tuple, list[BankDispatch]] = defaultdict(list)
    for r in records:
        key = (r.block, r.bank) if r.bank == "collaborative" else (r.block, r.bank, r.modality.value)
        groups[key].append(r)
    return {
        key: _balance([(_positions(r), r.probs) for r in recs], recs[0].top_k)
        for key, recs in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0])))
    }


def total_balance_loss(records: list[BankDispatch]):
    """Collaborative-bank loss plus each present modality's specialized-bank loss, summed over blocks.

    Returns ``(loss_node_or_None, terms_by_bank)``.
    """
    terms = bank_terms(records)
    total = None
    for t in terms.values():
        total = t.loss if total is None else total + t.loss
    return total, terms


# ------------------------------------------------------------ reconstruction


def power_target(pixels: np.ndarray) -> np.ndarray:
    """Per-pixel polarimetric power ``|HH|^2 + |HV|^2 + |VH|^2 + |VV|^2``.

    ``pixels`` is channel-last with 8 channels ordered
    ``(HH_re, HH_im, HV_re, HV_im, VH_re, VH_im, VV_re, VV_im)``.
    """
    pixels = np.asarray(pixels)
    if pixels.shape[-1] != 8:
        raise ValueError(f"SAR-L1 power needs 8 channels, got {pixels.shape[-1]}")
    sq = pixels.astype(np.float64) ** 2
    return sq[..., 0] + sq[..., 1] + sq[..., 2] + sq[..., 3] + sq[..., 4] + sq[..., 5] + sq[..., 6] + sq[..., 7]


@dataclass
class ReconTarget:
    modality: Modality
    target: np.ndarray  # (n_tokens, target_dim)
    mask: np.ndarray  # (n_tokens,) bool, True where masked

    @property
    def omega(self) -> int:
        return int(self.mask.sum()) * self.target.shape[1]


def recon_loss(preds: dict, targets: dict) -> ad.Node:
    """Sum over modalities of the mean squared error over masked elements."""
    total = None
    graph = next((p.graph for p in preds.values() if isinstance(p, ad.Node)), None) or ad.CompGraph(np.float64)
    for m, tgt in targets.items():
        pred = _as_node(preds[m], graph=graph)
        if pred.shape != tgt.target.shape:
            raise ValueError(f"prediction {pred.shape} and target {tgt.target.shape} disagree for {m}")
        if tgt.omega == 0:
            raise ValueError(f"nothing masked for modality {Modality.parse(m).value}")
        rows = np.nonzero(tgt.mask)[0]
        diff = ad.gather_rows(pred, rows) - tgt.target[rows]
        term = ad.scale(ad.sum(ad.square(diff)), 1.0 / tgt.omega)
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no modalities to reconstruct")
    return total


def total_loss(recon, balance, alpha: float = DEFAULT_ALPHA):
    if balance is None or alpha == 0:
        return recon
    if isinstance(recon, ad.Node) or isinstance(balance, ad.Node):
        return recon + ad.scale(balance, alpha)
    return recon + alpha * balance
