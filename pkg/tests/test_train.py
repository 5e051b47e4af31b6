import numpy as np
import pytest

from rmoe import data
from rmoe import train as tr
from rmoe.model import Modality
from rmoe.numkit import SeededRng


def tiny_train_config(**kw):
    base = dict(dim=16, num_heads=2, num_blocks=1, batch_size=2, init_std=0.1, steps=3, seed=1)
    base.update(kw)
    return tr.TrainConfig(**base)


# ------------------------------------------------------------------- AdamW


def _adam(p, g, **kw):
    params, grads = {"p": np.array([p], np.float64)}, {"p": np.array([g], np.float64)}
    new, state = tr.adamw_update(params, grads, tr.AdamState.zeros_like(params), **kw)
    return new["p"][0], state


def test_adamw_scalar_step():
    p, state = _adam(1.0, 1.0, lr=0.1, weight_decay=0.0)
    assert p == pytest.approx(0.9, abs=1e-6)
    assert state.t == 1


def test_adamw_decay_only():
    p, _ = _adam(2.0, 0.0, lr=0.1, weight_decay=0.05)
    assert p == pytest.approx(2.0 * (1 - 0.1 * 0.05), rel=1e-12)


def test_adamw_zero_grad_no_decay_is_identity():
    p, _ = _adam(1.5, 0.0, lr=0.1, weight_decay=0.0)
    assert p == 1.5


def test_adamw_matches_reference_over_steps():
    rng = np.random.default_rng(0)
    p = rng.standard_normal(5)
    params, state = {"p": p.copy()}, tr.AdamState.zeros_like({"p": p})
    m = v = np.zeros(5)
    ref = p.copy()
    for t in range(1, 6):
        g = rng.standard_normal(5)
        params, state = tr.adamw_update(params, {"p": g}, state, lr=0.01, weight_decay=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 0.01 * 0.05) - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(params["p"], ref, rtol=1e-12)


def test_adamw_does_not_mutate_inputs():
    params = {"p": np.ones(3)}
    state = tr.AdamState.zeros_like(params)
    tr.adamw_update(params, {"p": np.ones(3)}, state, lr=0.1)
    assert params["p"].tolist() == [1, 1, 1] and state.t == 0 and not state.m["p"].any()


def test_clip_by_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = tr.clip_by_global_norm(grads, 1.0)
    assert norm == 5.0
    assert np.sqrt(clipped["a"] ** 2 + clipped["b"] ** 2)[0] == pytest.approx(1.0, rel=1e-6)
    same, _ = tr.clip_by_global_norm(grads, 10.0)
    assert same["a"][0] == 3.0


# ------------------------------------------------------------------ config


def test_train_config_validation(tmp_path):
    with pytest.raises(ValueError):
        tr.TrainConfig(lr=-1)
    with pytest.raises(ValueError):
        tr.TrainConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        tr.TrainConfig(mask_ratio=1.2)
    with pytest.raises(ValueError):
        tr.TrainConfig.from_dict({"learning_rate": 1})
    cfg = tiny_train_config(modalities=["opt", "SAR_L1"])
    assert cfg.modalities == ["opt", "sar_l1"]
    assert tr.TrainConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "c.json"
    path.write_text('{"dim": 16, "num_heads": 2, "steps": 4}')
    assert tr.TrainConfig.from_json(path).steps == 4
    enc = cfg.encoder_config()
    assert enc.dim == 16 and enc.modalities == ["opt", "sar_l1"]


def test_defaults_follow_training_recipe():
    cfg = tr.TrainConfig()
    assert (cfg.lr, cfg.weight_decay, cfg.betas, cfg.alpha, cfg.grad_clip) == (2e-4, 0.05, (0.9, 0.999), 0.01, 1.0)


# -------------------------------------------------------------------- steps


def test_round_robin_schedule():
    cfg = tiny_train_config(modalities=["opt", "ms", "sar_l2"])
    assert [tr.step_modality(cfg, s).value for s in range(4)] == ["opt", "ms", "sar_l2", "opt"]
    norm = data.compute_norm_stats(cfg.modalities, count=2)
    assert tr.synth_batch(cfg, norm, 1).counts == {"ms": 2}


def test_no_op_update_leaves_params():
    cfg = tiny_train_config(lr=0.0, alpha=0.0, weight_decay=0.0)
    state = tr.init_state(cfg)
    batch = tr.synth_batch(cfg, state.norm, 0)
    new, metrics = tr.train_step(state, batch, SeededRng(0), cfg)
    old_t = state.model.named_tensors()
    assert all(v.tobytes() == old_t[k].tobytes() for k, v in new.model.named_tensors().items())
    assert np.isfinite(metrics["loss"]) and metrics["loss"] == metrics["recon"]
    assert new.step == 1


def test_metrics_report_bank_fractions():
    cfg = tiny_train_config()
    state = tr.init_state(cfg)
    _, metrics = tr.train_step(state, tr.synth_batch(cfg, state.norm, 0), SeededRng(0), cfg)
    assert set(metrics["f"]) == {"0.collaborative", "0.specialized.opt"}
    assert all(sum(f) == pytest.approx(1.0) for f in metrics["f"].values())
    assert metrics["loss"] == pytest.approx(metrics["recon"] + cfg.alpha * metrics["balance"], rel=1e-6)


def test_training_is_deterministic():
    cfg = tiny_train_config(modalities=["opt", "sar_l1"])
    _, h1 = tr.pretrain(cfg, 3)
    s2, h2 = tr.pretrain(cfg, 3)
    assert h1 == h2
    assert s2.step == 3


def test_divergence_is_reported():
    cfg = tiny_train_config()
    state = tr.init_state(cfg)
    t = state.model.named_tensors()
    t["decoders.opt.w"] = np.full_like(t["decoders.opt.w"], 3e38)
    state.model = state.model.with_tensors(t)
    with pytest.raises(tr.TrainingDiverged):
        tr.train_step(state, tr.synth_batch(cfg, state.norm, 0), SeededRng(0), cfg)


def test_coefficient_of_variation():
    assert tr.coefficient_of_variation([0.25] * 4) == 0
    assert tr.coefficient_of_variation([1, 0, 0, 0]) == pytest.approx(np.sqrt(3))


def test_eval_recon_uses_fixed_corpus():
    cfg = tiny_train_config()
    state = tr.init_state(cfg)
    eb = tr.eval_batch(cfg, state.norm, Modality.OPT, count=2)
    assert tr.eval_recon(state.model, eb) == tr.eval_recon(state.model, eb)
