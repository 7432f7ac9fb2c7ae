import numpy as np
import pytest

from resilinet.desk import desk_cnn
from resilinet.engine import ModelGraph, build_model, conv, count_params_macs, fc, flatten, forward, relu
from resilinet.modelio import Dataset
from resilinet.pruning import L1, PruneConfig, channels_to_keep, fine_tune, l1_scores, prune
from resilinet.training import TrainingDiverged, mean_loss
from resilinet.vulnerability import ChannelId


def params_bytes(m):
    return [v.tobytes() for p in m.params for v in p.values()]


def test_l1_definition_and_homogeneity():
    w = np.array([[1, -2, 3], [0, 0, 0]], np.float32)
    m = ModelGraph([fc(3, 2)], [{"weight": w, "bias": np.array([100, 100], np.float32)}], (3,), 2)
    s = l1_scores(m).scores
    assert s[ChannelId(0, 0)] == 6.0 and s[ChannelId(0, 1)] == 0.0
    m.params[0]["weight"][0] *= 2
    assert l1_scores(m).scores[ChannelId(0, 0)] == 12.0


def test_zero_ratio_is_identity():
    m = desk_cnn(seed=1)
    out = prune(m, l1_scores(m), PruneConfig(0.0, 0.0, L1))
    assert params_bytes(out) == params_bytes(m)
    assert [s.geometry for s in out.layers] == [s.geometry for s in m.layers]


def test_fc_hundred_to_ten_halved():
    m = build_model([fc(100, 10), relu(), fc(10, 3)], (100,), 3, seed=0)
    out = prune(m, l1_scores(m), PruneConfig(0.0, 0.5, L1))
    assert out.params[0]["weight"].shape == (5, 100)
    assert sum(v.size for v in out.params[0].values()) == 505
    assert out.params[2]["weight"].shape == (3, 5)
    # removed = 505 in the pruned layer + 5 * 3 next-layer input columns
    assert count_params_macs(m)[0] - count_params_macs(out)[0] == 505 + 15


def test_removes_lowest_and_keeps_lower_index_on_ties():
    w = np.array([[1], [5], [1], [3]], np.float32)
    m = ModelGraph([fc(1, 4), relu(), fc(4, 2)],
                   [{"weight": w, "bias": np.zeros(4, np.float32)}, {},
                    {"weight": np.ones((2, 4), np.float32), "bias": np.zeros(2, np.float32)}], (1,), 2)
    keep = channels_to_keep(m, l1_scores(m), PruneConfig(0.0, 0.25, L1))
    assert keep[0].tolist() == [0, 1, 3]  # tie between 0 and 2: channel 2 goes
    assert keep[2].tolist() == [0, 1]


def test_desk_pruning_structure_and_accounting():
    m = desk_cnn(seed=0)
    cfg = PruneConfig(0.25, 0.5, L1)
    out = prune(m, l1_scores(m), cfg)
    assert out.params[0]["weight"].shape == (12, 1, 3, 3)
    assert out.params[1]["running_var"].shape == (12,)
    assert out.params[4]["weight"].shape == (24, 12, 3, 3)
    assert out.params[9]["weight"].shape == (32, 24 * 4)
    assert out.params[11]["weight"].shape == (10, 32)
    expected = (12 * 10) + 4 * 12 + (24 * (12 * 9 + 1)) + 4 * 24 + (32 * 97) + (10 * 33)
    assert count_params_macs(out)[0] == expected
    p0, m0 = count_params_macs(m)
    p1, m1 = count_params_macs(out)
    assert p1 < p0 and m1 < m0
    x = np.random.default_rng(0).random((3, 1, 8, 8), dtype=np.float32)
    assert forward(out, x).shape == (3, 10)
    assert out.meta["pruning"]["score_source"] == L1


def test_flatten_mapping_keeps_surviving_features():
    m = desk_cnn(seed=2)
    out = prune(m, l1_scores(m), PruneConfig(0.25, 0.0, L1))
    x = np.random.default_rng(1).random((4, 1, 8, 8), dtype=np.float32)
    keep4 = channels_to_keep(m, l1_scores(m), PruneConfig(0.25, 0.0, L1))[4]
    # zero the dropped conv-2 channels in the baseline: both models must then agree
    ref = m.copy()
    drop = np.setdiff1d(np.arange(32), keep4)
    ref.params[5]["weight"][drop] = 0
    ref.params[5]["bias"][drop] = 0
    keep0 = channels_to_keep(m, l1_scores(m), PruneConfig(0.25, 0.0, L1))[0]
    drop0 = np.setdiff1d(np.arange(16), keep0)
    ref.params[1]["weight"][drop0] = 0
    ref.params[1]["bias"][drop0] = 0
    np.testing.assert_allclose(forward(out, x), forward(ref, x), rtol=1e-5, atol=1e-5)


def test_logit_layer_never_pruned():
    m = desk_cnn(seed=0)
    out = prune(m, l1_scores(m), PruneConfig(0.5, 0.9, L1))
    assert out.params[11]["weight"].shape[0] == 10


def test_config_validation():
    with pytest.raises(ValueError):
        PruneConfig(1.0, 0.0)
    with pytest.raises(ValueError):
        PruneConfig(0.0, -0.1)
    with pytest.raises(ValueError):
        PruneConfig(0.1, 0.1, "random")
    m = build_model([fc(3, 1), relu(), fc(1, 2)], (3,), 2, seed=0)
    with pytest.raises(ValueError, match="remove all"):
        prune(m, l1_scores(m), PruneConfig(0.0, 1 - 1e-12, L1))  # snaps to the whole layer


def toy_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, 8, 8)).astype(np.float32)
    y = (x.mean(axis=(1, 2, 3)) > 0).astype(np.int64) + 2 * (x[:, 0, 0, 0] > 0)
    return Dataset(x, y, 10)


def test_fine_tune_zero_lr_is_identity():
    m = desk_cnn(seed=0)
    out = fine_tune(m, toy_data(), PruneConfig(epochs=3, lr=0.0))
    assert params_bytes(out) == params_bytes(m)


def test_fine_tune_is_deterministic():
    m = desk_cnn(seed=0)
    cfg = PruneConfig(epochs=2, lr=0.01, seed=5)
    assert params_bytes(fine_tune(m, toy_data(), cfg)) == params_bytes(fine_tune(m, toy_data(), cfg))


def test_nan_loss_aborts():
    m = desk_cnn(seed=0)
    m.params[11]["bias"][0] = np.nan
    with pytest.raises(TrainingDiverged, match="loss"):
        fine_tune(m, toy_data(), PruneConfig(epochs=1, lr=0.01))


def test_desk_fine_tune_lowers_training_loss(desk):
    cfg = PruneConfig(0.05, 0.5, L1, epochs=10, lr=0.001)
    pruned = prune(desk.model, l1_scores(desk.model), cfg)
    tuned = fine_tune(pruned, desk.train, cfg)
    assert mean_loss(tuned, desk.train) <= mean_loss(pruned, desk.train)
