import numpy as np
import pytest
from scipy.stats import chisquare

from resilinet.engine import ModelGraph, batchnorm, build_model, conv, fc, flatten, relu
from resilinet.faults import (
    BER_LADDER,
    CampaignConfig,
    Flip,
    FlipPlan,
    apply_flips,
    bitflip,
    flip_count,
    plan_flips,
    resolve_workers,
    run_campaign,
)
from resilinet.modelio import Dataset


def bits(v):
    return int(np.array([v], np.float32).view(np.uint32)[0])


def test_bitflip_examples():
    assert bits(bitflip(1.0, 31)) == 0xBF800000
    assert bits(bitflip(1.0, 30)) == 0x7F800000 and np.isposinf(bitflip(1.0, 30))
    assert bits(bitflip(1.0, 0)) == 0x3F800001
    for b in (-1, 32):
        with pytest.raises(ValueError):
            bitflip(1.0, b)


def test_bitflip_touches_one_bit():
    rng = np.random.default_rng(0)
    for v in rng.standard_normal(50).astype(np.float32):
        for b in range(32):
            assert bin(bits(v) ^ bits(bitflip(v, b))).count("1") == 1


def fc_model(n_in, n_out, bias=True):
    layers = [fc(n_in, n_out, bias=bias)]
    p = {"weight": np.random.default_rng(0).standard_normal((n_out, n_in)).astype(np.float32)}
    if bias:
        p["bias"] = np.zeros(n_out, np.float32)
    return ModelGraph(layers, [p], (n_in,), n_out)


def test_ten_thousand_params_at_1e4_gives_32_flips():
    m = fc_model(100, 100, bias=False)  # 10,000 params
    plan = plan_flips(m, 1e-4, seed=1)
    assert len(plan) == 32
    assert len({(f.tensor, f.index, f.bit) for f in plan.flips}) == 32


def test_rounding_to_zero_gives_no_flips():
    m = fc_model(10, 10)
    assert flip_count(1e-8, 110) == 0
    assert len(plan_flips(m, 1e-8, seed=0)) == 0


def test_round_half_even():
    assert flip_count(1 / 64, 1) == 0  # 0.5
    assert flip_count(3 / 64, 1) == 2  # 1.5
    assert flip_count(5 / 64, 1) == 2  # 2.5


def mixed_model():
    return build_model(
        [conv(1, 4, 3, padding=1), batchnorm(4), relu(), flatten(), fc(4 * 4 * 4, 3)], (1, 4, 4), 3, seed=0
    )


def test_counts_per_layer_over_ladder():
    m = mixed_model()
    sizes = [sum(v.size for v in p.values()) for p in m.params]
    for ber in BER_LADDER + (0.01, 0.3):
        plan = plan_flips(m, ber, seed=5, trial=2)
        per = plan.per_layer()
        for li, n in enumerate(sizes):
            assert per.get(li, 0) == int(round(ber * n * 32))


def test_batchnorm_and_bias_tensors_are_targets():
    m = mixed_model()
    seen = set()
    for t in range(20):
        seen |= {(f.layer, f.tensor) for f in plan_flips(m, 0.05, seed=0, trial=t).flips}
    assert {(1, "running_mean"), (1, "running_var"), (1, "weight"), (0, "bias"), (4, "bias")} <= seen


def test_plan_is_deterministic_and_trial_dependent():
    m = mixed_model()
    a = plan_flips(m, 0.01, seed=42, trial=3)
    assert a.to_bytes() == plan_flips(m.copy(), 0.01, seed=42, trial=3).to_bytes()
    assert a.to_bytes() != plan_flips(m, 0.01, seed=42, trial=4).to_bytes()
    assert a.to_bytes() != plan_flips(m, 0.01, seed=43, trial=3).to_bytes()


def test_positions_are_uniform():
    m = fc_model(8, 8, bias=False)  # 64 params, 2048 bits
    counts = np.zeros(32)
    for t in range(400):
        for f in plan_flips(m, 0.05, seed=9, trial=t).flips:
            counts[f.bit] += 1
    assert chisquare(counts).pvalue > 1e-3


def test_rejects_bad_ber():
    for ber in (0.0, -1e-3, 1.5):
        with pytest.raises(ValueError):
            plan_flips(mixed_model(), ber, seed=0)


def params_bytes(m):
    return b"".join(v.tobytes() for p in m.params for v in p.values())


def test_involution_and_original_untouched():
    m = mixed_model()
    before = params_bytes(m)
    plan = plan_flips(m, 0.02, seed=1)
    once = apply_flips(m, plan)
    assert params_bytes(m) == before
    assert params_bytes(once) != before
    assert params_bytes(apply_flips(once, plan)) == before


def test_empty_plan_and_single_flip():
    m = mixed_model()
    assert params_bytes(apply_flips(m, FlipPlan())) == params_bytes(m)
    one = apply_flips(m, FlipPlan([Flip(4, "weight", 17, 30)]))
    diff = one.params[4]["weight"].reshape(-1) != m.params[4]["weight"].reshape(-1)
    assert diff.sum() == 1 and diff[17]
    for i in range(4):
        assert all(one.params[i][k].tobytes() == v.tobytes() for k, v in m.params[i].items())


def test_out_of_bounds_flip_rejected():
    m = mixed_model()
    with pytest.raises(IndexError):
        apply_flips(m, FlipPlan([Flip(4, "weight", 10_000, 0)]))
    with pytest.raises(IndexError):
        apply_flips(m, FlipPlan([Flip(2, "weight", 0, 0)]))


def tiny_campaign_setup():
    m = mixed_model()
    x = np.random.default_rng(0).standard_normal((40, 1, 4, 4)).astype(np.float32)
    from resilinet.modelio import predict

    return m, Dataset(x, predict(m, x), 3)


def test_zero_flip_campaign_has_zero_drop():
    m, ds = tiny_campaign_setup()
    res = run_campaign(CampaignConfig([1e-8], trials=5, seed=0, workers=1), m, ds)
    assert res.clean_accuracy == 100.0
    assert np.all(res.accuracies == 100.0) and res.mean_drop[0] == 0.0


def test_campaign_is_reproducible_and_worker_independent():
    m, ds = tiny_campaign_setup()
    cfg = CampaignConfig([1e-3, 1e-2], trials=6, seed=7, workers=1)
    a = run_campaign(cfg, m, ds)
    b = run_campaign(cfg, m, ds)
    c = run_campaign(CampaignConfig([1e-3, 1e-2], trials=6, seed=7, workers=2), m, ds)
    assert a.accuracies.tobytes() == b.accuracies.tobytes() == c.accuracies.tobytes()
    assert list(a.summary_rows()) == list(c.summary_rows())
    assert len(list(a.trial_rows())) == 12


def test_corrupted_models_never_abort():
    m, ds = tiny_campaign_setup()
    res = run_campaign(CampaignConfig([0.2], trials=3, seed=0, workers=1), m, ds)
    assert np.all((res.accuracies >= 0) & (res.accuracies <= 100))


def test_campaign_config_validation():
    with pytest.raises(ValueError):
        CampaignConfig([], 1, 0)
    with pytest.raises(ValueError):
        CampaignConfig([1e-4], 0, 0)
    with pytest.raises(ValueError):
        CampaignConfig([2.0], 1, 0)


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("RESILINET_THREADS", "1")
    assert resolve_workers(8) == 1
    monkeypatch.delenv("RESILINET_THREADS")
    assert resolve_workers(3) == 3
