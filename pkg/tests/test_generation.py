import math

import numpy as np
import pytest
import torch

from comets.data import MultivariateSeries, apply_preprocess, fit_preprocess, stock_layout
from comets.gan import CriticConfig, GanModel, GanTrainConfig, GeneratorConfig
from comets.nn import make_generator
from comets.seeding import substream_seed
from comets.generation import (
    CURVES,
    PerturbationSpec,
    RolloutAborted,
    RolloutConfig,
    apply_perturbation,
    reactivity_experiment,
    rollout,
)


def _model(P=8, F=8, C=2, seed=0):
    gc = GeneratorConfig(P, F, C, hidden=8, time_dim=8)
    cc = CriticConfig(P, F, C, conv_channels=(4, 8), linear=(8,), time_dim=8)
    return GanModel.init(gc, cc, GanTrainConfig(seed=seed))


def _past(P=8, C=2, seed=0):
    return np.random.default_rng(seed).standard_normal((P, C))


# --------------------------------------------------------------------------- rollout


def test_single_call_when_total_equals_F():
    res = rollout(_model(), RolloutConfig(8, 0, _past()))
    assert res.calls == 1 and res.series.T == 8


def test_long_rollout_call_count_and_length():
    m = _model(P=16, F=150)
    res = rollout(m, RolloutConfig(9360, 1, _past(16)))
    assert res.calls == 63 == math.ceil(9360 / 150)
    assert res.series.values.shape == (9360, 2)
    assert np.all(np.isfinite(res.series.values))


def test_rollout_determinism_and_diversity():
    m = _model()
    a = rollout(m, RolloutConfig(50, 3, _past())).series.values
    b = rollout(m, RolloutConfig(50, 3, _past())).series.values
    c = rollout(m, RolloutConfig(50, 4, _past())).series.values
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rollout_feeds_back_its_own_output():
    m = _model()
    full = rollout(m, RolloutConfig(24, 2, _past())).series.values
    # second block, regenerated from the first block as its past, with the same rng state
    rng = make_generator(substream_seed(2, "rollout"))
    minutes = torch.arange(16)
    b1 = m.generate(torch.as_tensor(_past(), dtype=torch.float32)[None], minutes, rng)[0].double().numpy()
    b2 = m.generate(torch.as_tensor(b1, dtype=torch.float32)[None], (minutes + 8) % 390, rng)[0].double().numpy()
    np.testing.assert_array_equal(full[:8], b1)
    np.testing.assert_array_equal(full[8:16], b2)


def test_minute_of_day_wraps():
    res = rollout(_model(), RolloutConfig(20, 0, _past(), start_minute=385))
    assert res.series.minute_offset == (385 + 8) % 390
    assert list(res.series.minute_of_day()[:3]) == [3, 4, 5]


def test_rollout_validation():
    m = _model()
    with pytest.raises(ValueError):
        rollout(m, RolloutConfig(0, 0, _past()))
    with pytest.raises(ValueError, match="starting window"):
        rollout(m, RolloutConfig(8, 0, _past(P=5)))
    bad = _past()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        rollout(m, RolloutConfig(8, 0, bad))


def test_rollout_aborts_on_non_finite_output():
    m = _model()
    with torch.no_grad():
        m.generator.out.bias.fill_(float("inf"))
    with pytest.raises(RolloutAborted) as ei:
        rollout(m, RolloutConfig(30, 0, _past()))
    assert ei.value.step == 0


def test_rollout_raw_space_via_state():
    rng = np.random.default_rng(0)
    T = 400
    vals = np.empty((T, 2))
    vals[:, 0] = 100 * np.exp(np.cumsum(rng.standard_normal(T) * 1e-3))
    vals[:, 1] = rng.integers(100, 1000, T)
    raw = MultivariateSeries(vals, stock_layout(["AAA"]))
    state = fit_preprocess(raw)
    model_space = apply_preprocess(raw, state)
    res = rollout(_model(), RolloutConfig(40, 0, model_space.values[-8:], channel_meta=raw.channel_meta), state=state)
    assert res.raw is not None and res.raw.values.shape == (40, 2)
    assert np.all(res.raw.values[:, 0] > 0) and np.all(res.raw.values[:, 1] >= 0)
    expect_first = vals[-1, 0] * math.exp(state.ret_mean[0] + state.ret_std[0] * res.series.values[0, 0])
    assert math.isclose(res.raw.values[0, 0], expect_first, rel_tol=1e-12)


# --------------------------------------------------------------------------- perturbation


def test_perturbation_population_std_example():
    seg = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
    out = apply_perturbation(seg, PerturbationSpec((0,), 0, 3, 1.0))
    np.testing.assert_allclose(out[:, 0], [1.0, 2.0, 3.0] + np.sqrt(2.0 / 3.0), rtol=0, atol=1e-15)
    assert abs(out[0, 0] - 1.0 - 0.8165) < 1e-4
    np.testing.assert_array_equal(out[:, 1], seg[:, 1])


def test_perturbation_identity_and_constant_channel():
    seg = np.random.default_rng(0).standard_normal((6, 3))
    seg[:, 2] = 4.0
    np.testing.assert_array_equal(apply_perturbation(seg, PerturbationSpec((0, 1), 0, 6, 0.0)), seg)
    out = apply_perturbation(seg, PerturbationSpec((2,), 0, 6, 7.5))
    np.testing.assert_array_equal(out, seg)


def test_perturbation_touches_only_targets_inside_window():
    seg = np.random.default_rng(1).standard_normal((10, 3))
    out = apply_perturbation(seg, PerturbationSpec((1,), 12, 16, 2.0), offset=10)
    mask = np.zeros_like(seg, dtype=bool)
    mask[2:6, 1] = True
    np.testing.assert_array_equal(out[~mask], seg[~mask])
    assert np.all(out[mask] != seg[mask])
    assert np.allclose(out[2:6, 1] - seg[2:6, 1], 2.0 * seg[2:6, 1].std())


def test_perturbation_validation():
    seg = np.zeros((4, 2))
    with pytest.raises(ValueError, match="empty"):
        apply_perturbation(seg, PerturbationSpec((0,), 3, 3, 1.0))
    with pytest.raises(ValueError, match="out of range"):
        apply_perturbation(seg, PerturbationSpec((2,), 0, 2, 1.0))
    with pytest.raises(ValueError, match="finite"):
        apply_perturbation(seg, PerturbationSpec((0,), 0, 2, float("nan")))
    with pytest.raises(ValueError, match="beyond"):
        PerturbationSpec((0,), 0, 50, 1.0).validate(total_steps=40)
    with pytest.raises(ValueError, match="target"):
        PerturbationSpec((), 0, 5, 1.0).validate()


def test_perturbed_values_are_fed_back():
    m = _model()
    cfg = RolloutConfig(32, 0, _past())
    base = rollout(m, cfg).series.values
    shocked = rollout(m, cfg, PerturbationSpec((0,), 8, 16, 3.0)).series.values
    np.testing.assert_array_equal(shocked[:8], base[:8])
    np.testing.assert_array_equal(shocked[8:16, 1], base[8:16, 1])
    assert not np.array_equal(shocked[16:], base[16:])


# --------------------------------------------------------------------------- reactivity


def test_reactivity_zero_intensity_curves_coincide():
    m = _model()
    real = np.random.default_rng(0).standard_normal((200, 2))
    rep = reactivity_experiment(m, RolloutConfig(48, 0, _past()), PerturbationSpec((0,), 16, 32, 1.0),
                                [0.0, 2.0], seeds=[0, 1, 2], real=real, pad=8)
    assert len(rep) == 2 * 4
    assert {r["curve"] for r in rep} == set(CURVES)
    for r in rep:
        assert set(r) == {"curve", "pair", "intensity", "mean_corr", "stderr", "n_seeds"}
        assert math.isfinite(r["mean_corr"]) and math.isfinite(r["stderr"])
    zero = {r["curve"]: r["mean_corr"] for r in rep if r["intensity"] == 0.0}
    assert zero["synth_synth"] == zero["perturbed_vs_frozen"] == zero["perturbed_vs_reactive"]
    assert all(r["n_seeds"] == 3 for r in rep if r["curve"] != "real_real")


def test_reactivity_entry_per_intensity_and_pair():
    m = _model(C=3)
    rep = reactivity_experiment(m, RolloutConfig(24, 0, _past(C=3)), PerturbationSpec((1,), 8, 16, 1.0),
                                [0.5, 1.0, 2.0], seeds=[0, 1])
    assert len(rep) == 3 * 2 * 3
    assert sorted({tuple(r["pair"]) for r in rep}) == [(1, 0), (1, 2)]


def test_reactivity_errors():
    m = _model()
    cfg = RolloutConfig(24, 0, _past())
    with pytest.raises(ValueError, match="seed"):
        reactivity_experiment(m, cfg, PerturbationSpec((0,), 8, 16, 1.0), [1.0], seeds=[])
    with pytest.raises(ValueError, match="every channel"):
        reactivity_experiment(m, cfg, PerturbationSpec((0, 1), 8, 16, 1.0), [1.0], seeds=[0])
    with pytest.raises(ValueError, match="out of range"):
        reactivity_experiment(m, cfg, PerturbationSpec((5,), 8, 16, 1.0), [1.0], seeds=[0])
