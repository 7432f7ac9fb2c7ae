import numpy as np
import pytest

from resilinet.edac import DUPLICATED_ONLY
from resilinet.engine import EDAC, VOTER, build_model, conv, count_params_macs, fc, flatten, forward, relu
from resilinet.hardening import (
    DUPLICATE,
    TRIPLICATE,
    HardeningPlan,
    full_plan,
    harden_model,
    interval_param_count,
    make_plan,
    overhead_report,
)
from resilinet.modelio import Dataset, evaluate, load_model, predict, profile_intervals, save_model
from resilinet.vulnerability import ChannelId, channel_vulnerability


def small():
    m = build_model([conv(1, 8, 3, padding=1), relu(), flatten(), fc(8 * 4 * 4, 3)], (1, 4, 4), 3, seed=0)
    x = np.random.default_rng(0).standard_normal((20, 1, 4, 4)).astype(np.float32)
    ds = Dataset(x, np.zeros(20, np.int64), 3)
    return m, ds, profile_intervals(m, ds)


def logits_plan(m, extra=(), mode=DUPLICATE):
    last = m.logit_layer()
    chans = {ChannelId(last, c) for c in range(m.num_classes)} | {ChannelId(*e) for e in extra}
    return HardeningPlan(mode, chans)


def test_two_duplicated_of_eight():
    m, ds, iv = small()
    h = harden_model(m, logits_plan(m, [(0, 2), (0, 5)]), iv)
    assert h.layers[0].geometry["out_channels"] == 10
    assert h.layers[1].kind == EDAC
    assert h.layers[1].geometry["groups"][2] == [2, 8]
    assert h.layers[1].geometry["groups"][5] == [5, 9]
    shapes = h.layer_shapes()
    assert shapes[0] == (10, 4, 4) and shapes[1] == (8, 4, 4)
    assert h.params[0]["weight"][8].tobytes() == m.params[0]["weight"][2].tobytes()


def test_channel_count_restored_after_every_edac():
    m, ds, iv = small()
    h = harden_model(m, full_plan(m), iv)
    base = m.layer_shapes()
    mapped = [h.layer_shapes()[j + 1] for j in h.meta["hardening"]["layer_map"] if h.layers[j].kind in ("Conv2D", "FullyConnected")]
    assert mapped == [base[i] for i in m.parametric_layers()]


def test_full_duplication_doubles_layer_params():
    m, ds, iv = small()
    h = harden_model(m, full_plan(m), iv)
    for i in m.parametric_layers():
        j = h.meta["hardening"]["layer_map"][i]
        for name, v in m.params[i].items():
            assert h.params[j][name].size == 2 * v.size
    p, mac = overhead_report(m, h)
    base = count_params_macs(m)[0]
    assert p == pytest.approx(100.0 + 100.0 * interval_param_count(h) / base)
    assert mac == pytest.approx(100.0)


def test_triplication_surplus_is_twice_duplication():
    m, ds, iv = small()
    base = count_params_macs(m)[0]
    plan = logits_plan(m, [(0, 1), (0, 3), (0, 4)])
    dup = harden_model(m, plan, iv)
    trip = harden_model(m, HardeningPlan(TRIPLICATE, plan.hardened), iv)
    dup_surplus = count_params_macs(dup)[0] - interval_param_count(dup) - base
    trip_surplus = count_params_macs(trip)[0] - base
    assert interval_param_count(trip) == 0
    assert trip_surplus == 2 * dup_surplus
    assert any(s.kind == VOTER for s in trip.layers)


@pytest.mark.parametrize("mode", [DUPLICATE, TRIPLICATE])
def test_fault_free_transparency(mode):
    m, ds, iv = small()
    h = harden_model(m, logits_plan(m, [(0, 0), (0, 7)], mode), iv)
    assert forward(h, ds.images).tobytes() == forward(m, ds.images).tobytes()


def _conv_output(model, x, layer):
    seen = {}
    forward(model, x, observer=lambda i, y: seen.setdefault(i, y))
    return seen[layer]


def test_scope_controls_non_duplicated_channels():
    m, ds, iv = small()
    # far outside the profiled range
    x = np.random.default_rng(9).standard_normal((30, 1, 4, 4)).astype(np.float32) * 50
    raw = _conv_output(m, x, 0)
    loose = harden_model(m, HardeningPlan(DUPLICATE, logits_plan(m).hardened, DUPLICATED_ONLY), iv)
    assert _conv_output(loose, x, 1).tobytes() == raw.tobytes()
    strict = harden_model(m, logits_plan(m), iv)
    lo, up = iv[0]
    out = _conv_output(strict, x, 1)
    outside = (raw < lo[None, :, None, None]) | (raw > up[None, :, None, None])
    assert outside.any()
    assert np.all(out[outside] == 0) and np.array_equal(out[~outside], raw[~outside])


def test_plan_validation():
    m, ds, iv = small()
    with pytest.raises(ValueError, match="missing channel"):
        harden_model(m, logits_plan(m, [(0, 8)]), iv)
    with pytest.raises(ValueError, match="not a CONV/FC"):
        harden_model(m, logits_plan(m, [(1, 0)]), iv)
    with pytest.raises(ValueError, match="logit layer"):
        harden_model(m, HardeningPlan(DUPLICATE, {ChannelId(0, 0)}), iv)
    with pytest.raises(ValueError, match="intervals"):
        harden_model(m, logits_plan(m))
    with pytest.raises(ValueError, match="mode"):
        HardeningPlan("quadruplicate")
    h = harden_model(m, logits_plan(m), iv)
    with pytest.raises(ValueError, match="already hardened"):
        harden_model(h, logits_plan(m), iv)


def test_identical_models_have_zero_overhead():
    m, _, _ = small()
    assert overhead_report(m, m.copy()) == (0.0, 0.0)


def test_make_plan_adds_logit_layer_and_ratio():
    m, ds, iv = small()
    rep = channel_vulnerability(m, ds.images[:5])
    plan = make_plan(m, rep, 0.25)
    assert sum(1 for c in plan.hardened if c.layer == 0) == 2
    assert sum(1 for c in plan.hardened if c.layer == 3) == 3
    plan0 = make_plan(m, rep, 0.0)
    assert {c.layer for c in plan0.hardened} == {3}


def test_hardened_model_round_trips(tmp_path):
    m, ds, iv = small()
    h = harden_model(m, logits_plan(m, [(0, 4)]), iv)
    save_model(h, tmp_path / "h.nnhm")
    back = load_model(tmp_path / "h.nnhm")
    assert HardeningPlan.from_dict(back.meta["hardening"]).hardened == HardeningPlan.from_dict(h.meta["hardening"]).hardened
    assert forward(back, ds.images).tobytes() == forward(h, ds.images).tobytes()


def test_desk_transparency(desk):
    plan = make_plan(desk.model, desk.report, 0.15)
    h = harden_model(desk.model, plan, desk.intervals)
    assert np.array_equal(predict(h, desk.train.images), predict(desk.model, desk.train.images))
    assert forward(h, desk.train.images).tobytes() == forward(desk.model, desk.train.images).tobytes()
    assert abs(evaluate(h, desk.test) - evaluate(desk.model, desk.test)) <= 0.5
