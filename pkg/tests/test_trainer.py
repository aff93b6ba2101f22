import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from srdiff.diffusion import DivergenceError, sample
from srdiff.highlighter import grad_cam, mean_fam, train_highlighter
from srdiff.io import FormatError
from srdiff.trainer import (
    Phase,
    PhaseSchedule,
    TrainConfig,
    Trainer,
    load_config,
    load_highlighter,
    load_model,
    phase_of,
    read_log,
    refresh_mfam,
    run_training,
)


# -- config and schedule ----------------------------------------------------------------


def test_phase_of_examples():
    cfg = TrainConfig(total_steps=500_000, base_steps=250_000)
    assert phase_of(0, cfg) is Phase.BASE
    assert phase_of(249_999, cfg) is Phase.BASE
    assert phase_of(250_000, cfg) is Phase.REFINE
    all_refine = TrainConfig(total_steps=10, base_steps=0)
    assert all(phase_of(s, all_refine) is Phase.REFINE for s in range(10))
    all_base = TrainConfig(total_steps=10, base_steps=10)
    assert all(phase_of(s, all_base) is Phase.BASE for s in range(10))
    for bad in (-1, 10):
        with pytest.raises(IndexError):
            phase_of(bad, all_base)


@given(total=st.integers(1, 3000), frac=st.floats(0, 1), cycle=st.integers(1, 700))
@settings(max_examples=60, deadline=None)
def test_phase_partition_and_refresh_count(total, frac, cycle):
    cfg = TrainConfig(total_steps=total, base_steps=int(frac * total), cycle=cycle)
    ps = PhaseSchedule(cfg)
    phases = [ps.phase_of(s) for s in range(total)]
    assert phases.count(Phase.BASE) == cfg.base_steps
    due = [s for s in range(total) if ps.refresh_due(s)]
    assert due == ps.refresh_steps()
    assert len(due) == ps.n_refreshes() == math.ceil((total - cfg.base_steps) / cycle)


@pytest.mark.parametrize("bad", [
    dict(base_steps=50, total_steps=40), dict(cycle=0), dict(lambda_fwd=-0.1), dict(lambda_rev=-1),
    dict(learning_rate=0), dict(guidance="blur"), dict(batch_size=0), dict(total_steps=2.5),
])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


def test_config_dict_roundtrip_and_unknown_keys():
    cfg = TrainConfig(total_steps=10, base_steps=5, highlighter_channels=[4, 8])
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"total_steps": 10, "lr": 1})


def test_load_config_sections(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("total_steps: 10\nbase_steps: 4\ndenoiser:\n  base_channels: 4\ndata:\n  n: 8\n")
    cfg, den, data = load_config(p)
    assert (cfg.total_steps, cfg.base_steps) == (10, 4)
    assert den == {"base_channels": 4} and data == {"n": 8}
    p.write_text("total_steps: 10\nbogus: 1\n")
    with pytest.raises(ValueError):
        load_config(p)


# -- refresh ----------------------------------------------------------------------------


@pytest.fixture
def refresh_parts(small_model, faces8):
    model = small_model
    real = faces8[:32]
    cfg = TrainConfig(total_steps=10, base_steps=0, T=10, refresh_sample_count=6)
    fake = sample(model, cfg.schedule(), (1, 8, 8), 0, 32).clamp(-1, 1).numpy()
    hl = train_highlighter(real, fake, channels=(4, 8), epochs=3)
    return model, hl, cfg


def test_refresh_is_deterministic_and_valid(refresh_parts):
    model, hl, cfg = refresh_parts
    a = refresh_mfam(model, hl, cfg, 11)
    b = refresh_mfam(model, hl, cfg, torch.Generator().manual_seed(11))
    assert np.array_equal(a, b)
    assert a.shape == (8, 8) and a.min() >= 0 and a.max() <= 1


def test_refresh_equals_manual_pipeline(refresh_parts):
    model, hl, cfg = refresh_parts
    samples = sample(model, cfg.schedule(), (1, 8, 8), torch.Generator().manual_seed(5), 6).clamp(-1, 1)
    manual = mean_fam(grad_cam(hl, samples.numpy()))
    assert np.array_equal(refresh_mfam(model, hl, cfg, 5), manual)


# -- training loop ----------------------------------------------------------------------


def test_refresh_steps_and_staleness(faces8, small_cfg, make_train_cfg):
    cfg = make_train_cfg(total_steps=50, base_steps=20, cycle=10)
    tr = Trainer(cfg, faces8, small_cfg)
    tr.run(until=20)
    assert tr.highlighter is None and tr.cycle.mfam is None
    seen = []
    while tr.step < cfg.total_steps:
        rec = tr.train_step()
        seen.append((rec.step, rec.refresh, id(tr.cycle.mfam), tr.cycle.last_refresh))
    assert [s for s, r, _, _ in seen if r] == [20, 30, 40]
    for step, _, ident, last in seen:
        assert last == 20 + 10 * ((step - 20) // 10)
    ids = {}
    for step, _, ident, last in seen:
        ids.setdefault(last, set()).add(ident)
    assert all(len(v) == 1 for v in ids.values())
    assert tr.cycle.n_refreshes == 3


@pytest.mark.parametrize("kind", ["center-gaussian", "inverted-gaussian", "edge", "fam"])
def test_every_guidance_kind_trains(faces8, small_cfg, make_train_cfg, kind):
    cfg = make_train_cfg(total_steps=24, base_steps=20, cycle=2, guidance=kind)
    tr = Trainer(cfg, faces8, small_cfg).run()
    assert tr.cycle.mfam.shape == (8, 8) and tr.cycle.n_refreshes == 2
    assert (tr.highlighter is not None) == (kind == "fam")
    assert all(np.isfinite(tr.losses))


def test_checkpoint_roundtrip_bitwise(tmp_path, faces8, small_cfg, make_train_cfg):
    tr = Trainer(make_train_cfg(), faces8, small_cfg).run(until=40)
    path = tr.save(tmp_path / "c.srdf")
    back = Trainer.load(path, faces8)
    for (n1, p1), (n2, p2) in zip(tr.model.state_dict().items(), back.model.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    assert back.step == 40 and np.array_equal(back.cycle.mfam, tr.cycle.mfam)
    assert torch.equal(back.train_rng.get_state(), tr.train_rng.get_state())
    X = faces8[:4]
    assert np.array_equal(back.highlighter.transform(X), tr.highlighter.transform(X))
    tr.run()
    back.run()
    assert tr.losses[40:] == back.losses


def test_checkpoint_rejections(tmp_path, faces8, small_cfg, make_train_cfg):
    tr = Trainer(make_train_cfg(), faces8, small_cfg)
    path = tr.save(tmp_path / "c.srdf")
    raw = path.read_bytes()
    (tmp_path / "magic.srdf").write_bytes(b"JUNK" + raw[4:])
    with pytest.raises(FormatError):
        Trainer.load(tmp_path / "magic.srdf", faces8)
    with pytest.raises(ValueError, match="dataset"):
        Trainer.load(path, np.zeros((4, 2, 8, 8), np.float32))
    with pytest.raises(ValueError):
        Trainer.load(path, faces8, overrides={"learning_rate": 0.1})


def test_branching_is_base_phase_only(tmp_path, faces8, small_cfg, make_train_cfg):
    tr = Trainer(make_train_cfg(), faces8, small_cfg).run(until=40)
    with pytest.raises(ValueError, match="base phase"):
        Trainer.load(tr.save(tmp_path / "late.srdf"), faces8, overrides={"lambda_fwd": 0.0})


def test_divergence_keeps_last_good_checkpoint(tmp_path, faces8, small_cfg, make_train_cfg):
    tr = Trainer(make_train_cfg(total_steps=10, base_steps=10), faces8, small_cfg)
    tr.run(until=5)
    good = {k: v.clone() for k, v in tr.model.state_dict().items()}
    orig = tr.model.forward
    tr.model.forward = lambda *a, **k: orig(*a, **k) * float("nan")
    with pytest.raises(DivergenceError):
        tr.run(checkpoint_dir=tmp_path)
    kept = Trainer.load(tmp_path / "last_good.srdf", faces8)
    assert all(torch.equal(kept.model.state_dict()[k], v) for k, v in good.items())


def test_run_training_outputs_and_resume(tmp_path, faces8, small_cfg, make_train_cfg):
    cfg = make_train_cfg(checkpoint_every=20)
    full = run_training(cfg, faces8, small_cfg, out_dir=tmp_path / "a")
    assert (tmp_path / "a" / "step_0000040.srdf").exists()
    log = read_log(full.paths["log"])
    assert [r.step for r in log] == list(range(60))
    assert [r.loss for r in log] == full.trainer.losses
    assert {r.phase for r in log[:30]} == {Phase.BASE} and {r.phase for r in log[30:]} == {Phase.REFINE}
    resumed = run_training(cfg, faces8, small_cfg, out_dir=tmp_path / "a", resume=tmp_path / "a" / "step_0000040.srdf")
    assert [r.loss for r in read_log(tmp_path / "a" / "metrics.csv")] == [r.loss for r in log]
    assert resumed.trainer.losses == full.trainer.losses[40:]
    model, sched, meta = load_model(full.paths["checkpoint"])
    assert sched.T == cfg.T and meta["step"] == 60
    assert load_highlighter(full.paths["highlighter"]).image_shape_ == (1, 8, 8)
