import math

import numpy as np
import pytest
import torch

import cigan.training as training
from cigan.data import build_unpaired_dataset
from cigan.imaging import make_rng
from cigan.spectral import constrained_layers
from cigan.training import (
    LOG_COLUMNS,
    NonFiniteLossError,
    TrainConfig,
    degrade,
    enhance,
    fit,
    init_state,
    load_checkpoint,
    load_model,
    lr_schedule,
    read_loss_log,
    save_checkpoint,
    train_step,
)
from oracles import top_singular_value


def _batches(seed=0, n=2, size=32):
    g = torch.Generator().manual_seed(seed)
    normal = torch.rand(n, 3, size, size, generator=g) * 0.6 + 0.3
    low = torch.rand(n, 3, size, size, generator=g) * 0.15
    return normal, low


# ---------------------------------------------------------------- config and schedule


def test_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch, cfg.crop) == (100, 10, 224)
    assert (cfg.adam_beta1, cfg.adam_beta2, cfg.lr, cfg.lr_fixed_epochs) == (0.0, 0.999, 1e-4, 50)
    assert cfg.loss_weights == (10.0, 10.0, 1.0)
    assert (cfg.exp_target, cfg.exp_sigma, cfg.exp_window, cfg.lip_lambda) == (0.1, 0.1, 7, 1.0)
    assert all(getattr(cfg, t) for t in training.TOGGLES)


def test_config_round_trip_and_unknown_key():
    cfg = TrainConfig(seed=3, lgt=False)
    again = TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.hash() == cfg.hash()
    assert TrainConfig(seed=4).hash() != cfg.hash()
    with pytest.raises(KeyError, match="learning_rate"):
        TrainConfig.from_dict({"learning_rate": 1})


@pytest.mark.parametrize("epoch,want", [(1, 1e-4), (25, 1e-4), (50, 1e-4), (51, 9.8e-5), (75, 5e-5), (100, 0.0)])
def test_lr_schedule(epoch, want):
    assert abs(lr_schedule(epoch, TrainConfig()) - want) <= 1e-15


def test_lr_schedule_is_linear_after_plateau():
    cfg = TrainConfig()
    rates = [lr_schedule(e, cfg) for e in range(50, 101)]
    assert np.allclose(np.diff(rates), -cfg.lr / 50, atol=1e-18)
    for bad in (0, 101):
        with pytest.raises(ValueError):
            lr_schedule(bad, cfg)


# ---------------------------------------------------------------- model


def test_backbone_excluded_from_optimizers(tiny_cfg, encoder):
    state = init_state(tiny_cfg(), encoder)
    opt_ids = {id(p) for o in (state.opt_g, state.opt_d) for g in o.param_groups for p in g["params"]}
    assert not any(id(t) in opt_ids for t in state.model.encoder.tensors().values())
    assert not any(k.startswith("encoder.") for k in state.model.state_dict())
    assert len(opt_ids) == sum(1 for _ in state.model.parameters())


def test_discriminators_independent(tiny_cfg, encoder):
    m = init_state(tiny_cfg(), encoder).model
    dl = dict(m.d_low.named_parameters())
    dn = dict(m.d_normal.named_parameters())
    assert dl.keys() == dn.keys()
    assert all(dl[k] is not dn[k] for k in dl)
    assert any(not torch.equal(dl[k], dn[k]) for k in dl)


def test_model_degrade_enhance_contract(tiny_cfg, encoder):
    m = init_state(tiny_cfg(), encoder).model
    n, lo = _batches()
    out_l = degrade(n, lo, m, rng=make_rng(0))
    out_n = enhance(lo, m)
    for out in (out_l, out_n):
        assert out.shape == n.shape and out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        degrade(n, lo[..., :16], m)


# ---------------------------------------------------------------- train_step


def test_train_step_deterministic(tiny_cfg, encoder):
    n, lo = _batches()
    bundles = []
    for _ in range(2):
        state = init_state(tiny_cfg(), encoder)
        state, b = train_step(n, lo, state, tiny_cfg())
        bundles.append(b)
    a, b = (np.array(list(x.as_dict().values())) for x in bundles)
    assert np.all(np.isfinite(a))
    assert np.abs(a - b).max() <= 1e-6


def test_zero_init_heads_give_ld_total_four(tiny_cfg, encoder):
    cfg = tiny_cfg(zero_init_heads=True)
    state = init_state(cfg, encoder)
    _, b = train_step(*_batches(), state, cfg)
    assert b.lg_adv_L == pytest.approx(2.0, abs=1e-6) and b.lg_adv_N == pytest.approx(2.0, abs=1e-6)
    assert b.ld_L == pytest.approx(2.0, abs=1e-6) and b.ld_N == pytest.approx(2.0, abs=1e-6)
    assert b.ld_total == pytest.approx(4.0, abs=1e-6)


def test_toggles_off_remove_terms_and_parameters(tiny_cfg, encoder):
    cfg = tiny_cfg(lgt=False, frp=False, exp_loss=False)
    state = init_state(cfg, encoder)
    names = [n for n, _ in state.model.named_parameters()]
    assert not any(".lgt." in n or "theta" in n for n in names)
    _, b = train_step(*_batches(), state, cfg)
    assert b.l_exp == 0
    want = b.lg_adv_L + b.lg_adv_N + 10 * b.l_con + 1 * b.l_per
    assert abs(b.lg_total - want) <= 1e-5


def test_exposure_toggle_has_zero_gradient_contribution(tiny_cfg, encoder, monkeypatch):
    cfg = tiny_cfg(exp_loss=False)
    calls = []
    monkeypatch.setattr(training, "exposure_loss", lambda *a, **k: calls.append(1))
    train_step(*_batches(), init_state(cfg, encoder), cfg)
    assert calls == []


def test_alternating_update_contract(tiny_cfg, encoder):
    cfg = tiny_cfg()
    state = init_state(cfg, encoder)
    gens, discs = state.model.generators, state.model.discriminators

    def snap(mod):
        return [p.detach().clone() for p in mod.parameters()]

    d_before = snap(discs)
    seen = {}
    g_step, d_step = state.opt_g.step, state.opt_d.step

    def wrapped_g_step(*a, **k):
        # no discriminator gradient exists during the generator update
        seen["d_grads_at_g"] = [p.grad for p in discs.parameters()]
        seen["d_at_g"] = snap(discs)
        out = g_step(*a, **k)
        seen["g_after_g"] = snap(gens)
        return out

    def wrapped_d_step(*a, **k):
        seen["g_at_d"] = snap(gens)
        out = d_step(*a, **k)
        seen["g_after_d"] = snap(gens)
        return out

    state.opt_g.step, state.opt_d.step = wrapped_g_step, wrapped_d_step
    train_step(*_batches(), state, cfg)
    assert all(g is None for g in seen["d_grads_at_g"])
    assert all(torch.equal(a, b) for a, b in zip(d_before, seen["d_at_g"]))
    assert all(torch.equal(a, b) for a, b in zip(seen["g_after_g"], seen["g_at_d"]))
    assert all(torch.equal(a, b) for a, b in zip(seen["g_at_d"], seen["g_after_d"]))
    assert any(not torch.equal(a, b) for a, b in zip(d_before, snap(discs)))


def test_spectral_bound_after_steps(tiny_cfg, encoder):
    cfg = tiny_cfg()
    state = init_state(cfg, encoder)
    for s in range(3):
        train_step(*_batches(s), state, cfg)
        for _, m, _ in constrained_layers(state.model):
            w = m.weight.detach().double()
            assert top_singular_value(w.reshape(w.shape[0], -1).numpy()) <= 1.05


def test_batch_size_mismatch(tiny_cfg, encoder):
    cfg = tiny_cfg()
    n, lo = _batches()
    with pytest.raises(ValueError):
        train_step(n, lo[..., :16, :16], init_state(cfg, encoder), cfg)


def test_non_finite_loss_aborts(tiny_cfg, encoder, monkeypatch):
    cfg = tiny_cfg()
    monkeypatch.setattr(training, "exposure_loss", lambda *a, **k: torch.tensor(float("nan")))
    with pytest.raises(NonFiniteLossError) as err:
        train_step(*_batches(), init_state(cfg, encoder), cfg)
    assert err.value.step == 1 and math.isnan(err.value.bundle.l_exp)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_reproduces_next_step(tiny_cfg, encoder, tmp_path):
    cfg = tiny_cfg()
    state = init_state(cfg, encoder)
    train_step(*_batches(0), state, cfg)
    path = save_checkpoint(tmp_path / "s.ckpt", state, cfg)
    restored, cfg2 = load_checkpoint(path, encoder=encoder)
    assert cfg2 == cfg and restored.step == 1
    _, live = train_step(*_batches(1), state, cfg)
    _, again = train_step(*_batches(1), restored, cfg2)
    a, b = np.array(list(live.as_dict().values())), np.array(list(again.as_dict().values()))
    assert np.abs(a - b).max() <= 1e-6


def test_checkpoint_stores_every_trainable_tensor(tiny_cfg, encoder, tmp_path):
    cfg = tiny_cfg()
    state = init_state(cfg, encoder)
    path = save_checkpoint(tmp_path / "s.ckpt", state, cfg)
    model, _ = load_model(path, encoder=encoder)
    for (k, v), (k2, v2) in zip(state.model.state_dict().items(), model.state_dict().items()):
        assert k == k2 and torch.equal(v, v2)
    assert not model.training


# ---------------------------------------------------------------- fit


def test_fit_one_epoch_bookkeeping(tiny_cfg, tiny_dirs, encoder, tmp_path):
    ds = build_unpaired_dataset(*tiny_dirs, 32)
    before = {k: v.clone() for k, v in encoder.tensors().items()}
    final = fit(tiny_cfg(), ds, tmp_path / "run", encoder=encoder)
    assert final.name == "final.ckpt" and final.exists()
    assert [p.name for p in (tmp_path / "run" / "checkpoints").iterdir()] == ["epoch_001.ckpt"]
    lines = (tmp_path / "run" / "losses.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_COLUMNS)
    assert len(lines) == 1 + 2
    rows = read_loss_log(tmp_path / "run" / "losses.csv")
    assert [r["step"] for r in rows] == [1, 2]
    assert all(math.isfinite(v) for r in rows for v in r.values())
    assert all(torch.equal(v, before[k]) for k, v in encoder.tensors().items())


def test_fit_csv_byte_identical_across_runs(tiny_cfg, tiny_dirs, encoder, tmp_path):
    ds = build_unpaired_dataset(*tiny_dirs, 32)
    for name in ("a", "b"):
        fit(tiny_cfg(epochs=2), ds, tmp_path / name, encoder=encoder, keep_checkpoints=False)
    a = (tmp_path / "a" / "losses.csv").read_bytes()
    assert a == (tmp_path / "b" / "losses.csv").read_bytes()
    assert len(a.splitlines()) == 1 + 4


def test_fit_resume_matches_uninterrupted(tiny_cfg, tiny_dirs, encoder, tmp_path):
    ds = build_unpaired_dataset(*tiny_dirs, 32)
    cfg = tiny_cfg(epochs=3)
    fit(cfg, ds, tmp_path / "full", encoder=encoder)
    fit(cfg, ds, tmp_path / "resumed", encoder=encoder,
        resume=tmp_path / "full" / "checkpoints" / "epoch_001.ckpt")
    full = (tmp_path / "full" / "losses.csv").read_text().splitlines()
    resumed = (tmp_path / "resumed" / "losses.csv").read_text().splitlines()
    # a fresh output directory has no earlier rows: header, then steps 3..6
    assert resumed[0] == full[0]
    assert resumed[1:] == full[3:]
    assert len(full) == 1 + 6


def test_fit_resume_in_place(tiny_cfg, tiny_dirs, encoder, tmp_path):
    ds = build_unpaired_dataset(*tiny_dirs, 32)
    cfg = tiny_cfg(epochs=2)
    fit(cfg, ds, tmp_path / "a", encoder=encoder)
    want = (tmp_path / "a" / "losses.csv").read_bytes()
    fit(cfg, ds, tmp_path / "a", encoder=encoder, resume=tmp_path / "a" / "checkpoints" / "epoch_001.ckpt")
    assert (tmp_path / "a" / "losses.csv").read_bytes() == want


def test_fit_honours_max_steps(tiny_cfg, tiny_dirs, encoder, tmp_path):
    ds = build_unpaired_dataset(*tiny_dirs, 32)
    fit(tiny_cfg(epochs=5, max_steps=3), ds, tmp_path / "r", encoder=encoder, keep_checkpoints=False)
    assert len(read_loss_log(tmp_path / "r" / "losses.csv")) == 3


def test_fit_non_finite_reports_last_checkpoint(tiny_cfg, tiny_dirs, encoder, tmp_path, monkeypatch):
    ds = build_unpaired_dataset(*tiny_dirs, 32)
    real = training.exposure_loss
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        return torch.tensor(float("inf")) if calls["n"] == 3 else real(*a, **k)

    monkeypatch.setattr(training, "exposure_loss", flaky)
    with pytest.raises(NonFiniteLossError) as err:
        fit(tiny_cfg(epochs=2), ds, tmp_path / "r", encoder=encoder)
    assert err.value.step == 3
    assert err.value.last_checkpoint == tmp_path / "r" / "checkpoints" / "epoch_001.ckpt"
