"""Hierarchical mixture-of-modality-experts encoder.

Structures hold plain arrays. To run a forward pass, :func:`bind` copies a
structure onto a :class:`~rmoe.autodiff.CompGraph`, replacing each array by a
named leaf node; the forward functions below then operate on nodes.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

from . import autodiff as ad
from . import numkit as nk


class Modality(str, enum.Enum):
    OPT = "opt"
    MS = "ms"
    SAR_L1 = "sar_l1"
    SAR_L2 = "sar_l2"

    @property
    def channels(self) -> int:
        return _CHANNELS[self]

    @property
    def target_channels(self) -> int:
        # SAR-L1 is reconstructed as one power value per pixel
        return 1 if self is Modality.SAR_L1 else self.channels

    @property
    def code(self) -> int:
        return _CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "Modality":
        for m, c in _CODES.items():
            if c == code:
                return m
        raise ValueError(f"unknown modality code {code}")

    @classmethod
    def parse(cls, value) -> "Modality":
        if isinstance(value, Modality):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ModalityError(f"unknown modality {value!r}") from None


_CHANNELS = {Modality.OPT: 3, Modality.MS: 4, Modality.SAR_L1: 8, Modality.SAR_L2: 1}
_CODES = {Modality.OPT: 0, Modality.MS: 1, Modality.SAR_L1: 2, Modality.SAR_L2: 3}
ALL_MODALITIES = (Modality.OPT, Modality.MS, Modality.SAR_L1, Modality.SAR_L2)


class ModalityError(KeyError):
    pass


# ------------------------------------------------------------------ config


@dataclass
class EncoderConfig:
    dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    expansion: int = 4
    patch_size: int = 8
    image_size: int = 32
    n_specialized: int = 4
    n_collaborative: int = 4
    top_k: int = 1
    modalities: list[str] = field(default_factory=lambda: [m.value for m in ALL_MODALITIES])
    init_std: float = 0.02
    ln_eps: float = 1e-5
    # per-block structure; filled in by __post_init__ and rewritten by surgery
    block_kinds: list[str] | None = None
    collab_experts: list[list[int]] | None = None
    collab_gate_columns: list[list[int]] | None = None

    def __post_init__(self):
        if self.dim % self.num_heads:
            raise ValueError("dim must be divisible by num_heads")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if not 1 <= self.top_k <= min(self.n_specialized, self.n_collaborative):
            raise ValueError("top_k must be in [1, min(n_specialized, n_collaborative)]")
        self.modalities = [Modality.parse(m).value for m in self.modalities]
        if self.block_kinds is None:
            self.block_kinds = ["moe"] * self.num_blocks
        if self.collab_experts is None:
            self.collab_experts = [list(range(self.n_collaborative)) for _ in range(self.num_blocks)]
        if self.collab_gate_columns is None:
            self.collab_gate_columns = [list(ids) for ids in self.collab_experts]

    @property
    def hidden(self) -> int:
        return self.dim * self.expansion

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def mods(self) -> list[Modality]:
        return [Modality(m) for m in self.modalities]

    def token_dim(self, m: Modality) -> int:
        return self.patch_size**2 * m.channels

    def target_dim(self, m: Modality) -> int:
        return self.patch_size**2 * m.target_channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -------------------------------------------------------------- structures


@dataclass
class Linear:
    w: Any
    b: Any


ModalDecoder = Linear


@dataclass
class ExpertFFN:
    w1: Any
    b1: Any
    w2: Any
    b2: Any


@dataclass
class GatingNetwork:
    """Noisy top-K router.

    ``columns`` lists the expert id behind each logit column; only ids in
    ``experts`` may be selected. Pruned experts can keep their columns so the
    softmax normaliser is unchanged.
    """

    w_gate: Any
    w_noise: Any
    top_k: int
    columns: list[int]
    experts: list[int]

    @property
    def selectable(self) -> np.ndarray:
        keep = set(self.experts)
        return np.array([c in keep for c in self.columns], dtype=bool)


@dataclass
class RMoELayer:
    specialized: dict[Modality, list[ExpertFFN]]
    specialized_gates: dict[Modality, GatingNetwork]
    collaborative: list[ExpertFFN]
    collaborative_gate: GatingNetwork
    shared: ExpertFFN


@dataclass
class Attention:
    # no key bias: it shifts every score of a query equally, so softmax ignores it
    wq: Any
    bq: Any
    wk: Any
    wv: Any
    bv: Any
    wo: Any
    bo: Any


@dataclass
class Block:
    ln1_g: Any
    ln1_b: Any
    attn: Attention
    ln2_g: Any
    ln2_b: Any
    ffn: RMoELayer | ExpertFFN


@dataclass
class RMoEModel:
    config: EncoderConfig
    embed: dict[Modality, Linear]
    pos: Any
    mask_token: Any
    blocks: list[Block]
    decoders: dict[Modality, ModalDecoder]

    def named_tensors(self) -> dict[str, np.ndarray]:
        return dict(tree_leaves(self))

    def num_params(self) -> int:
        return int(np.sum([v.size for _, v in tree_leaves(self)]))

    def astype(self, dtype) -> "RMoEModel":
        return tree_map(self, lambda _, a: np.asarray(a, dtype=dtype).copy())

    def copy(self) -> "RMoEModel":
        return tree_map(self, lambda _, a: a.copy())

    def with_tensors(self, tensors: dict[str, np.ndarray]) -> "RMoEModel":
        missing = set(self.named_tensors()) - set(tensors)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)[:5]}")
        return tree_map(self, lambda name, _: tensors[name])


# ------------------------------------------------------------ tree helpers


def _is_leaf(x) -> bool:
    return isinstance(x, (np.ndarray, ad.Node))


def _walk(obj, prefix: str = ""):
    if _is_leaf(obj):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, EncoderConfig):
        for f in dataclasses.fields(obj):
            yield from _walk(getattr(obj, f.name), f"{prefix}{f.name}.")
    elif isinstance(obj, dict):
        for k, v in obj.items():
            key = k.value if isinstance(k, Modality) else str(k)
            yield from _walk(v, f"{prefix}{key}.")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _walk(v, f"{prefix}{i}.")


def tree_map(obj, fn: Callable[[str, Any], Any], prefix: str = ""):
    if _is_leaf(obj):
        return fn(prefix.rstrip("."), obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, EncoderConfig):
        changes = {f.name: tree_map(getattr(obj, f.name), fn, f"{prefix}{f.name}.") for f in dataclasses.fields(obj)}
        if isinstance(obj, RMoEModel):
            changes["config"] = EncoderConfig.from_dict(obj.config.to_dict())
        return dataclasses.replace(obj, **changes)
    if isinstance(obj, dict):
        return {
            k: tree_map(v, fn, f"{prefix}{k.value if isinstance(k, Modality) else k}.") for k, v in obj.items()
        }
    if isinstance(obj, list):
        if obj and not isinstance(obj[0], (int, np.integer)):
            return [tree_map(v, fn, f"{prefix}{i}.") for i, v in enumerate(obj)]
        return list(obj)
    return obj


def tree_leaves(obj, prefix: str = ""):
    """Yield ``(dotted_name, leaf)`` pairs in a fixed structural order."""
    for name, leaf in _walk(obj, prefix):
        yield name.rstrip("."), leaf


def bind(graph: ad.CompGraph, obj, prefix: str = "", trainable: bool = True):
    """Copy ``obj`` with each array replaced by a named graph leaf."""
    return tree_map(obj, lambda name, a: graph.param(name, a, trainable=trainable), prefix)


# ------------------------------------------------------------------- init


def _expert(rng: nk.SeededRng, d: int, h: int, std: float) -> ExpertFFN:
    return ExpertFFN(
        w1=(rng.normal((d, h)) * std).astype(np.float32),
        b1=np.zeros(h, np.float32),
        w2=(rng.normal((h, d)) * std).astype(np.float32),
        b2=np.zeros(d, np.float32),
    )


def _gate(rng: nk.SeededRng, d: int, ids: list[int], k: int, std: float) -> GatingNetwork:
    n = len(ids)
    return GatingNetwork(
        w_gate=(rng.normal((d, n)) * std).astype(np.float32),
        w_noise=(rng.normal((d, n)) * std).astype(np.float32),
        top_k=k,
        columns=list(ids),
        experts=list(ids),
    )


def init_model(config: EncoderConfig, seed: int = 0) -> RMoEModel:
    """Random initialisation: N(0, init_std) weights, zero biases, unit LN gains."""
    root = nk.SeededRng(seed)
    d, h, std = config.dim, config.hidden, config.init_std
    mods = config.mods
    counter = iter(range(1 << 30))

    def rng():
        return root.spawn(next(counter))

    embed = {
        m: Linear((rng().normal((config.token_dim(m), d)) * std).astype(np.float32), np.zeros(d, np.float32))
        for m in mods
    }
    blocks = []
    for bi in range(config.num_blocks):
        w = [(rng().normal((d, d)) * std).astype(np.float32) for _ in range(4)]
        attn = Attention(w[0], np.zeros(d, np.float32), w[1], w[2], np.zeros(d, np.float32), w[3],
                         np.zeros(d, np.float32))
        ids = list(range(config.n_collaborative))
        layer = RMoELayer(
            specialized={m: [_expert(rng(), d, h, std) for _ in range(config.n_specialized)] for m in mods},
            specialized_gates={
                m: _gate(rng(), d, list(range(config.n_specialized)), config.top_k, std) for m in mods
            },
            collaborative=[_expert(rng(), d, h, std) for _ in ids],
            collaborative_gate=_gate(rng(), d, ids, config.top_k, std),
            shared=_expert(rng(), d, h, std),
        )
        blocks.append(
            Block(
                np.ones(d, np.float32),
                np.zeros(d, np.float32),
                attn,
                np.ones(d, np.float32),
                np.zeros(d, np.float32),
                layer,
            )
        )
    decoders = {
        m: Linear((rng().normal((d, config.target_dim(m))) * std).astype(np.float32),
                  np.zeros(config.target_dim(m), np.float32))
        for m in mods
    }
    return RMoEModel(
        config=config,
        embed=embed,
        pos=(rng().normal((config.num_patches, d)) * std).astype(np.float32),
        mask_token=(rng().normal((d,)) * std).astype(np.float32),
        blocks=blocks,
        decoders=decoders,
    )


def skeleton(config: EncoderConfig) -> RMoEModel:
    """Zero-filled model whose structure follows ``config`` exactly."""
    model = init_model(
        EncoderConfig.from_dict({**config.to_dict(), "block_kinds": None, "collab_experts": None,
                                 "collab_gate_columns": None}),
        0,
    )
    blocks = []
    for bi, block in enumerate(model.blocks):
        if config.block_kinds[bi] == "dense":
            block = dataclasses.replace(block, ffn=block.ffn.shared)
        else:
            layer = block.ffn
            experts = config.collab_experts[bi]
            cols = config.collab_gate_columns[bi]
            d = config.dim
            gate = GatingNetwork(np.zeros((d, len(cols)), np.float32), np.zeros((d, len(cols)), np.float32),
                                 config.top_k, list(cols), list(experts))
            layer = dataclasses.replace(
                layer, collaborative=[_zero_like(layer.collaborative[0]) for _ in experts], collaborative_gate=gate
            )
            block = dataclasses.replace(block, ffn=layer)
        blocks.append(block)
    model = dataclasses.replace(model, blocks=blocks, config=EncoderConfig.from_dict(config.to_dict()))
    return tree_map(model, lambda _, a: np.zeros_like(a))


def _zero_like(e: ExpertFFN) -> ExpertFFN:
    return ExpertFFN(*(np.zeros_like(getattr(e, f)) for f in ("w1", "b1", "w2", "b2")))


# ---------------------------------------------------------------- forward


@dataclass
class BankDispatch:
    """Routing decisions of one gated bank for one modality's tokens."""

    block: int
    bank: str  # "specialized" or "collaborative"
    modality: Modality
    expert_ids: list[int]  # selectable expert ids, in column order
    selected: np.ndarray  # (n, K) expert ids chosen per token
    probs: ad.Node  # (n, N) soft probabilities over selectable experts
    top_k: int

    @property
    def counts(self) -> np.ndarray:
        lookup = {e: i for i, e in enumerate(self.expert_ids)}
        out = np.zeros(len(self.expert_ids), np.int64)
        for e in self.selected.reshape(-1):
            out[lookup[int(e)]] += 1
        return out


def expert_forward(e: ExpertFFN, x: ad.Node) -> ad.Node:
    if x.shape[-1] != e.w1.shape[0]:
        raise nk.ShapeError(f"expert expects last extent {e.w1.shape[0]}, got {x.shape[-1]}")
    return ad.gelu(x @ e.w1 + e.b1) @ e.w2 + e.b2


def noisy_topk_gate(g: GatingNetwork, x: ad.Node, rng: nk.SeededRng | None = None, train: bool = False):
    """Return ``(weights, selected, probs)``.

    ``weights`` is ``TopK(softmax(logits))`` with the rest zeroed and no
    renormalisation; ``selected`` holds column positions (n x K), ties going
    to the lowest column; ``probs`` is the full softmax.
    """
    selectable = g.selectable
    k = g.top_k
    if k > int(selectable.sum()):
        raise ValueError(f"top_k={k} exceeds the {int(selectable.sum())} selectable experts")
    logits = x @ g.w_gate
    if train:
        if rng is None:
            raise ValueError("noisy gating needs an rng")
        noise = rng.normal(logits.shape, dtype=x.graph.dtype)
        logits = logits + noise * ad.softplus(x @ g.w_noise)
    probs = ad.softmax(logits, axis=-1)
    h = np.where(selectable, probs.value, -np.inf)
    selected = np.argsort(-h, axis=-1, kind="stable")[:, :k]
    mask = np.zeros(h.shape, dtype=x.graph.dtype)
    np.put_along_axis(mask, selected, 1.0, axis=-1)
    return probs * mask, selected, probs


def _bank_forward(experts, gate: GatingNetwork, x: ad.Node, rng, train, block, bank, modality):
    weights, selected, probs = noisy_topk_gate(gate, x, rng, train)
    n = x.shape[0]
    col_of = {e: c for c, e in enumerate(gate.columns)}
    chosen = np.zeros(weights.shape, dtype=bool)
    np.put_along_axis(chosen, selected, True, axis=-1)
    out = None
    for eid, expert in zip(gate.experts, experts):
        col = col_of[eid]
        rows = np.nonzero(chosen[:, col])[0]
        if rows.size == 0:
            continue
        ye = expert_forward(expert, ad.gather_rows(x, rows))
        wk = ad.getitem(weights, (rows, slice(col, col + 1)))
        contrib = ad.scatter_rows(ye * wk, rows, n)
        out = contrib if out is None else out + contrib
    if out is None:
        out = x.graph.const(np.zeros(x.shape, x.graph.dtype))
    sel_cols = gate.selectable
    record = BankDispatch(
        block=block,
        bank=bank,
        modality=modality,
        expert_ids=[c for c, s in zip(gate.columns, sel_cols) if s],
        selected=np.asarray(gate.columns)[selected],
        probs=probs if sel_cols.all() else ad.getitem(probs, (slice(None), np.nonzero(sel_cols)[0])),
        top_k=gate.top_k,
    )
    return out, record


def _bank_rng(rng, block, bank, m):
    if rng is None:
        return None
    return rng.spawn(block, 0 if bank == "collaborative" else 1, m.code)


def rmoe_forward(layer: RMoELayer, x: ad.Node, m: Modality, rng=None, train: bool = False, block: int = 0):
    """``y = y_spec + y_collab + shared(x)``; returns ``(y, [spec_record, collab_record])``."""
    m = Modality.parse(m)
    if m not in layer.specialized:
        raise ModalityError(f"no specialized bank for modality {m.value}")
    ys, rs = _bank_forward(
        layer.specialized[m], layer.specialized_gates[m], x, _bank_rng(rng, block, "specialized", m), train,
        block, "specialized", m,
    )
    yc, rc = _bank_forward(
        layer.collaborative, layer.collaborative_gate, x, _bank_rng(rng, block, "collaborative", m), train,
        block, "collaborative", m,
    )
    return ys + yc + expert_forward(layer.shared, x), [rs, rc]


def attention_forward(attn: Attention, x: ad.Node, batch: int, num_heads: int) -> ad.Node:
    n, d = x.shape
    p = n // batch
    dh = d // num_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (batch, p, num_heads, dh)), (0, 2, 1, 3))

    q = heads(x @ attn.wq + attn.bq)
    k = ad.transpose(ad.reshape(x @ attn.wk, (batch, p, num_heads, dh)), (0, 2, 3, 1))
    v = heads(x @ attn.wv + attn.bv)
    scores = ad.scale(ad.bmm(q, k), 1.0 / math.sqrt(dh))
    ctx = ad.bmm(ad.softmax(scores, axis=-1), v)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (n, d))
    return merged @ attn.wo + attn.bo


def encoder_forward(model: RMoEModel, tokens: np.ndarray, mask: np.ndarray, m: Modality, rng=None,
                    train: bool = False, graph: ad.CompGraph | None = None):
    """Encode one modality's tokens ``(B, P, D_in)`` with mask ``(B, P)``.

    ``model`` may be array-backed (a fresh constant graph is built) or already
    bound to ``graph``. Returns ``(z, records)`` with ``z`` of shape
    ``(B*P, d)``.
    """
    m = Modality.parse(m)
    cfg = model.config
    if m not in model.embed:
        raise ModalityError(f"model has no embedder for modality {m.value}")
    b, p, din = tokens.shape
    if p != cfg.num_patches or din != cfg.token_dim(m):
        raise nk.ShapeError(f"tokens {tokens.shape} do not match config (P={cfg.num_patches}, D={cfg.token_dim(m)})")
    if graph is None:
        graph = ad.CompGraph(np.asarray(model.pos).dtype)
        model = bind(graph, model, trainable=False)
    x = graph.const(tokens.reshape(b * p, din))
    emb = model.embed[m]
    h = x @ emb.w + emb.b
    h = ad.where(np.asarray(mask, bool).reshape(b * p, 1), model.mask_token, h)
    h = ad.reshape(ad.reshape(h, (b, p, cfg.dim)) + model.pos, (b * p, cfg.dim))
    records = []
    for bi, block in enumerate(model.blocks):
        a = attention_forward(block.attn, ad.layer_norm(h, block.ln1_g, block.ln1_b, cfg.ln_eps), b, cfg.num_heads)
        h = h + a
        u = ad.layer_norm(h, block.ln2_g, block.ln2_b, cfg.ln_eps)
        if isinstance(block.ffn, RMoELayer):
            f, recs = rmoe_forward(block.ffn, u, m, rng, train, bi)
            records.extend(recs)
        else:
            f = expert_forward(block.ffn, u)
        h = h + f
    return h, records


def decode(dec: ModalDecoder, z: ad.Node) -> ad.Node:
    return z @ dec.w + dec.b


def reconstruct(model: RMoEModel, tokens, mask, m, rng=None, train=False, graph=None):
    """Encoder + modal decoder; returns ``(x_hat, z, records)``."""
    m = Modality.parse(m)
    if m not in model.decoders:
        raise ModalityError(f"model has no decoder for modality {m.value}")
    if graph is None:
        graph = ad.CompGraph(np.asarray(model.pos).dtype)
        model = bind(graph, model, trainable=False)
    z, records = encoder_forward(model, tokens, mask, m, rng, train, graph)
    return decode(model.decoders[m], z), z, records
