import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import small_config
from rmoe import data
from rmoe import surgery as sg
from rmoe.model import ExpertFFN, Modality, ModalityError, encoder_forward, init_model


def _corpus(mods, n, seed=100):
    return [data.synth_scene(m, seed + i) for i in range(n) for m in mods]


def _snapshot(model):
    return {k: v.tobytes() for k, v in model.named_tensors().items()}


def _stats(freqs_by_mod, top_k=1, tokens=100):
    layers = {0: {}}
    for m, fr in freqs_by_mod.items():
        layers[0][m] = {"experts": list(range(len(fr))), "counts": [round(f * tokens) for f in fr], "tokens": tokens}
    return sg.ActivationStats(top_k, layers)


# -------------------------------------------------------------- percentile


def test_percentile_examples():
    assert sg.percentile_threshold([0.05, 0.15, 0.30, 0.50]) == 0.30
    assert sg.percentile_threshold([0.50, 0.05, 0.30, 0.15]) == 0.30
    assert sg.percentile_threshold([0.25] * 4) == 0.25
    assert sg.percentile_threshold([1.0]) == 1.0
    with pytest.raises(ValueError):
        sg.percentile_threshold([])


def test_retained_examples():
    assert sg.retained_experts({0: 0.5, 1: 0.3, 2: 0.15, 3: 0.05}) == (0.3, [0])
    assert sg.retained_experts({i: 0.25 for i in range(4)}) == (0.25, [])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_percentile_is_a_member_at_nearest_rank(vals):
    phi = sg.percentile_threshold(vals)
    assert phi in vals
    rank = int(np.ceil(0.75 * len(vals)))
    assert sum(v <= phi for v in vals) >= rank
    assert sum(v < phi for v in vals) < rank


# ---------------------------------------------------------------- profiling


@pytest.fixture(scope="module")
def profiled():
    cfg = small_config(modalities=["opt", "sar_l2"])
    model = init_model(cfg, 1)
    norm = data.compute_norm_stats(cfg.modalities, count=4)
    corpus = _corpus(cfg.mods, 8)
    return model, norm, corpus, sg.profile_activations(model, corpus, norm)


def test_profile_frequencies_sum_to_one(profiled):
    model, _, corpus, stats = profiled
    for b in range(model.config.num_blocks):
        for m in ("opt", "sar_l2"):
            assert sum(stats.freqs(b, m).values()) == pytest.approx(1.0)
            assert stats.layers[b][m]["tokens"] == 8 * model.config.num_patches


def test_profile_matches_recount(profiled):
    """Straightline recount: per token argmax of the gate softmax, counted with bincount."""
    model, norm, corpus, stats = profiled
    cfg = model.config
    for m in cfg.mods:
        imgs = [im for im in corpus if im.modality is m]
        part = data.make_batch(imgs, norm, cfg.patch_size, 0.0, 0).parts[m]
        _, recs = encoder_forward(model, part.tokens, part.mask, m)
        for r in recs:
            if r.bank != "collaborative":
                continue
            top = np.argmax(r.probs.value, axis=1)
            counts = np.bincount(top, minlength=cfg.n_collaborative)
            assert counts.tolist() == stats.layers[r.block][m.value]["counts"]


def test_profile_deterministic_and_serialisable(profiled):
    model, norm, corpus, stats = profiled
    again = sg.profile_activations(model, corpus, norm)
    assert again.layers == stats.layers
    assert sg.ActivationStats.from_dict(stats.to_dict()).layers == stats.layers
    with pytest.raises(ValueError):
        sg.profile_activations(model, [], norm)


def test_profile_single_expert():
    cfg = small_config(n_collaborative=1, modalities=["ms"])
    model = init_model(cfg, 0)
    norm = data.compute_norm_stats(cfg.modalities, count=2)
    stats = sg.profile_activations(model, _corpus(cfg.mods, 2), norm)
    assert stats.freqs(0, "ms") == {0: 1.0}


def test_profile_rigged_routing():
    cfg = small_config(modalities=["opt"])
    model = init_model(cfg, 0)
    for blk in model.blocks:
        # constant normalised input for the mixture, and a gate that favours expert 2
        blk.ln2_g[:] = 0
        blk.ln2_b[:] = 1
        blk.ffn.collaborative_gate.w_gate[:] = 0
        blk.ffn.collaborative_gate.w_gate[:, 2] = 1
    norm = data.compute_norm_stats(cfg.modalities, count=2)
    stats = sg.profile_activations(model, _corpus(cfg.mods, 3), norm)
    for b in range(cfg.num_blocks):
        assert stats.freqs(b, "opt") == {0: 0.0, 1: 0.0, 2: 1.0, 3: 0.0}


# ------------------------------------------------------------------ pruning


def test_prune_union_rule():
    model = init_model(small_config(num_blocks=1, modalities=["opt", "ms"]), 0)
    stats = _stats({"opt": [0.1, 0.6, 0.2, 0.1], "ms": [0.1, 0.2, 0.6, 0.1]})
    pruned, report = sg.sparse_prune(model, stats)
    assert report.layers[0]["retained"] == {"opt": [1], "ms": [2]}
    assert report.layers[0]["union"] == [1, 2]
    assert pruned.blocks[0].ffn.collaborative_gate.experts == [1, 2]
    assert pruned.config.collab_experts == [[1, 2]]
    kept = pruned.blocks[0].ffn.collaborative
    assert kept[0].w1.tobytes() == model.blocks[0].ffn.collaborative[1].w1.tobytes()
    # specialized and shared experts stay as they were
    for m in (Modality.OPT, Modality.MS):
        assert pruned.blocks[0].ffn.specialized[m][0].w2.tobytes() == model.blocks[0].ffn.specialized[m][0].w2.tobytes()


def test_prune_rescue_on_ties():
    model = init_model(small_config(num_blocks=1, modalities=["opt"]), 0)
    pruned, report = sg.sparse_prune(model, _stats({"opt": [0.25] * 4}))
    assert report.layers[0]["rescued"] and report.layers[0]["union"] == [0]
    assert len(pruned.blocks[0].ffn.collaborative) == 1


def test_prune_errors():
    model = init_model(small_config(num_blocks=1, top_k=2, modalities=["opt"]), 0)
    with pytest.raises(ValueError):
        sg.sparse_prune(model, _stats({"opt": [0.6, 0.2, 0.1, 0.1]}, top_k=2))
    with pytest.raises(KeyError):
        sg.sparse_prune(init_model(small_config(num_blocks=1, modalities=["opt", "ms"]), 0),
                        _stats({"opt": [0.6, 0.2, 0.1, 0.1]}))


def test_prune_drop_gate_columns():
    model = init_model(small_config(num_blocks=1, modalities=["opt"]), 0)
    pruned, _ = sg.sparse_prune(model, _stats({"opt": [0.7, 0.1, 0.1, 0.1]}), drop_gate_columns=True)
    gate = pruned.blocks[0].ffn.collaborative_gate
    assert gate.columns == [0] and gate.w_gate.shape == (16, 1)


def _rig_dead_expert(model, dead=3, twin=1):
    # a duplicated gate column always ties with the earlier one, which wins, so ``dead`` is never chosen
    for blk in model.blocks:
        blk.ffn.collaborative_gate.w_gate[:, dead] = blk.ffn.collaborative_gate.w_gate[:, twin]
    return model


def test_zero_frequency_prune_is_bit_identical():
    cfg = small_config(modalities=["opt", "sar_l1"])
    model = _rig_dead_expert(init_model(cfg, 2))
    norm = data.compute_norm_stats(cfg.modalities, count=4)
    corpus = _corpus(cfg.mods, 6)
    stats = sg.profile_activations(model, corpus, norm)
    keep = {}
    for b, per_mod in stats.layers.items():
        used = np.sum([rec["counts"] for rec in per_mod.values()], axis=0)
        keep[b] = [e for e, c in zip(range(cfg.n_collaborative), used) if c]
    assert all(3 not in k for k in keep.values())
    before = _snapshot(model)
    pruned, report = sg.sparse_prune(model, stats, keep=keep)
    assert _snapshot(model) == before
    assert report.params_after < report.params_before
    for m in cfg.mods:
        part = data.make_batch([im for im in corpus if im.modality is m], norm, cfg.patch_size, 0.0, 0).parts[m]
        a, _ = encoder_forward(model, part.tokens, part.mask, m)
        b, _ = encoder_forward(pruned, part.tokens, part.mask, m)
        assert a.value.tobytes() == b.value.tobytes()


def test_prune_report_param_accounting():
    model = init_model(small_config(num_blocks=1, modalities=["opt"]), 0)
    pruned, report = sg.sparse_prune(model, _stats({"opt": [0.7, 0.1, 0.1, 0.1]}))
    recount = lambda mdl: sum(v.size for v in mdl.named_tensors().values())
    assert report.params_before == recount(model)
    assert report.params_after == recount(pruned)
    d, h = 16, 64
    assert report.params_before - report.params_after == 3 * (d * h + h + h * d + d)
    counts = sg.count_params(pruned)
    assert counts["total"] == sum(v for k, v in counts.items() if k != "total")


# ------------------------------------------------------------ decomposition


def test_decompose_equivalence_and_size():
    cfg = small_config()
    model = init_model(cfg, 5)
    before = _snapshot(model)
    for m in cfg.mods:
        sub = sg.decompose_modality(model, m)
        assert sub.num_params() < model.num_params()
        assert sub.config.modalities == [m.value]
        rng = np.random.default_rng(m.code)
        for _ in range(3):
            x = rng.standard_normal((2, cfg.num_patches, cfg.token_dim(m))).astype(np.float32)
            mask = rng.random((2, cfg.num_patches)) < 0.5
            a, _ = encoder_forward(model, x, mask, m)
            b, _ = encoder_forward(sub, x, mask, m)
            assert a.value.tobytes() == b.value.tobytes()
        twice = sg.decompose_modality(sub, m)
        assert _snapshot(twice) == _snapshot(sub) and twice.config == sub.config
    assert _snapshot(model) == before
    with pytest.raises(ModalityError):
        sg.decompose_modality(sg.decompose_modality(model, "opt"), "ms")


# ------------------------------------------------------------------- fusion


def _layer(seed=0, **kw):
    return init_model(small_config(num_blocks=1, **kw), seed).blocks[0].ffn


def _all(layer):
    return [e for bank in layer.specialized.values() for e in bank] + list(layer.collaborative) + [layer.shared]


def test_knowledge_sum_cancellation():
    layer = _layer(modalities=["opt"], n_specialized=1, n_collaborative=1)
    e = layer.specialized[Modality.OPT][0]
    neg = ExpertFFN(-e.w1, -e.b1, -e.w2, -e.b2)
    zero = ExpertFFN(*(np.zeros_like(getattr(e, f)) for f in ("w1", "b1", "w2", "b2")))
    layer = dataclasses.replace(layer, collaborative=[neg], shared=zero)
    fused = sg.knowledge_sum(layer).ffn
    assert all(not getattr(fused, f).any() for f in ("w1", "b1", "w2", "b2"))


def test_identical_experts_sum_and_average():
    layer = _layer(1)
    e = layer.shared
    n_total = len(_all(layer))
    same = lambda: ExpertFFN(e.w1.copy(), e.b1 + 0.5, e.w2.copy(), e.b2 - 0.25)
    layer = dataclasses.replace(layer, specialized={m: [same() for _ in bank] for m, bank in layer.specialized.items()},
                                collaborative=[same() for _ in layer.collaborative], shared=same())
    ks, ka = sg.knowledge_sum(layer).ffn, sg.knowledge_average(layer).ffn
    np.testing.assert_allclose(ks.w1, n_total * e.w1, rtol=1e-6)
    np.testing.assert_allclose(ka.w1, e.w1, rtol=1e-6)
    np.testing.assert_allclose(ka.b1, e.b1 + 0.5, rtol=1e-6)
    assert n_total == 4 * 4 + 4 + 1


def test_knowledge_sum_and_average_straightline():
    layer = _layer(3)
    experts = _all(layer)
    ks, ka = sg.knowledge_sum(layer), sg.knowledge_average(layer)
    assert (ks.provenance, ka.provenance) == ("sum", "average")
    for f in ("w1", "b1", "w2", "b2"):
        total = np.zeros(getattr(experts[0], f).shape)
        for e in experts:
            total += getattr(e, f)
        np.testing.assert_array_equal(getattr(ks.ffn, f), total.astype(np.float32))
        np.testing.assert_array_equal(getattr(ka.ffn, f), (total / len(experts)).astype(np.float32))
        assert getattr(ks.ffn, f).shape == getattr(layer.shared, f).shape


def test_fusion_shape_mismatch():
    layer = _layer(0)
    bad = dataclasses.replace(layer, shared=ExpertFFN(np.zeros((16, 8)), np.zeros(8), np.zeros((8, 16)), np.zeros(16)))
    for fn in (sg.knowledge_sum, sg.knowledge_average, sg.knowledge_compress):
        with pytest.raises(Exception):
            fn(bad)


def test_truncation_diag_example():
    u, s, v = sg.truncated_factors(np.diag([3.0, 2, 1, 0]), 2)
    w = sg.sum_of_truncations([(u, s, v)])
    np.testing.assert_allclose(w, np.diag([3.0, 2, 0, 0]), atol=1e-12)
    assert np.linalg.norm(np.diag([3.0, 2, 1, 0]) - w) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(2, 8), st.integers(2, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_block_product_equals_sum_of_truncations(n, d1, d2, rank, seed):
    rng = np.random.default_rng(seed)
    ws = [rng.standard_normal((d1, d2)) for _ in range(n)]
    factors = [sg.truncated_factors(w, rank) for w in ws]
    np.testing.assert_allclose(sg.block_concat_product(factors), sg.sum_of_truncations(factors), atol=1e-8)
    # mass bound: the fused error is at most the sum of per-expert Eckart-Young tails
    tails = [np.sqrt(np.sum(np.linalg.svd(w, compute_uv=False)[rank:] ** 2)) for w in ws]
    err = np.linalg.norm(sg.sum_of_truncations(factors) - np.sum(ws, 0))
    assert err <= sum(tails) + 1e-9


def test_compress_equals_sum_when_rank_is_enough():
    # hidden 64 over 4 experts gives rank 16 = d, so every 16x64 weight is kept exactly
    layer = _layer(4)
    kc, ks = sg.knowledge_compress(layer).ffn, sg.knowledge_sum(layer).ffn
    assert sg.knowledge_compress(layer).provenance == "compress"
    for f in ("w1", "b1", "w2", "b2"):
        np.testing.assert_allclose(getattr(kc, f), getattr(ks, f), atol=1e-5)


def test_compress_truncates_when_rank_is_short():
    layer = _layer(4, dim=16, expansion=2, n_specialized=4, n_collaborative=4)  # rank 8 < 16
    kc, ks = sg.knowledge_compress(layer).ffn, sg.knowledge_sum(layer).ffn
    experts = [e for bank in layer.specialized.values() for e in bank] + list(layer.collaborative)
    tails = sum(np.sqrt(np.sum(np.linalg.svd(e.w1.astype(np.float64), compute_uv=False)[8:] ** 2)) for e in experts)
    err = np.linalg.norm(kc.w1.astype(np.float64) - ks.w1.astype(np.float64))
    assert 0 < err <= tails + 1e-4


def test_fuse_model_outputs_dense_blocks():
    cfg = small_config()
    model = init_model(cfg, 0)
    before = _snapshot(model)
    for strategy in ("ks", "ka", "kc"):
        fused = sg.fuse_model(model, strategy)
        assert fused.config.block_kinds == ["dense"] * cfg.num_blocks
        counts = sg.count_params(fused)
        assert counts["specialized"] == counts["collaborative"] == counts["gates"] == 0
        x = np.zeros((1, cfg.num_patches, cfg.token_dim(Modality.OPT)), np.float32)
        z, recs = encoder_forward(fused, x, np.zeros((1, cfg.num_patches), bool), Modality.OPT)
        assert recs == [] and np.isfinite(z.value).all()
    assert _snapshot(model) == before
