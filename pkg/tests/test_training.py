import numpy as np
import pytest

from gradprune.data import LabeledDataset, generate_synthetic
from gradprune.errors import DimensionError, InputError, NumericDivergenceError
from gradprune.metrics import eval_asr
from gradprune.models import FilterId, build_model, prune_filter
from gradprune.training import SgdConfig, mean_loss, train

from conftest import SHAPE


def test_zero_learning_rate_leaves_parameters(fresh_model, small_data):
    trained, _ = train(fresh_model, small_data, SgdConfig(0.0, 0.9, 16, 2))
    assert all(np.array_equal(trained.params[k], fresh_model.params[k]) for k in trained.params)


def test_single_sample_is_memorised(fresh_model):
    one = LabeledDataset(generate_synthetic(4, 1, SHAPE, seed=0).images[:1], np.array([2]), 4)
    trained, history = train(fresh_model, one, SgdConfig(0.05, 0.9, 1, 200))
    assert history[-1] < 0.01
    assert trained.predict(one.images)[0] == 2


def test_training_is_deterministic(fresh_model, small_data):
    cfg = SgdConfig(0.05, 0.9, 16, 2, seed=4)
    a, ha = train(fresh_model, small_data, cfg)
    b, hb = train(fresh_model, small_data, cfg)
    assert ha == hb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_pruned_filters_never_move(fresh_model, small_data):
    m = prune_filter(prune_filter(fresh_model, FilterId(0, 2)), FilterId(1, 9))
    trained, _ = train(m, small_data, SgdConfig(0.05, 0.9, 16, 3))
    assert not trained.params["conv0.weight"][2].any() and trained.params["conv0.bias"][2] == 0.0
    assert not trained.params["conv1.weight"][9].any() and trained.params["conv1.bias"][9] == 0.0
    assert trained.mask == m.mask


def test_divergence_reports_location(fresh_model, small_data):
    m = fresh_model.copy()
    m.params["dense0.weight"][:] = 1e308
    m.params["dense0.weight"][:, 0] = -1e308
    with pytest.raises(NumericDivergenceError) as info, np.errstate(all="ignore"):
        train(m, small_data, SgdConfig(0.01, 0.9, 16, 2))
    assert (info.value.epoch, info.value.batch) == (0, 0)


def test_loss_trends_down(fresh_model, small_data):
    before = mean_loss(fresh_model, small_data)
    trained, history = train(fresh_model, small_data, SgdConfig(0.05, 0.9, 16, 8))
    assert np.mean(history[-3:]) < np.mean(history[:3])
    assert mean_loss(trained, small_data) < before


def test_clean_model_has_low_asr(fresh_model, small_data, small_test, trig):
    trained, _ = train(fresh_model, small_data, SgdConfig(0.05, 0.9, 16, 8))
    assert eval_asr(trained, small_test, trig) <= 0.25


def test_config_and_shape_validation(fresh_model):
    for kwargs in ({"learning_rate": -1}, {"momentum": 1.0}, {"batch_size": 0}, {"epochs": 0}):
        with pytest.raises(InputError):
            SgdConfig(**kwargs)
    wrong = generate_synthetic(4, 2, (1, 8, 8), seed=0)
    with pytest.raises(DimensionError):
        train(fresh_model, wrong, SgdConfig(epochs=1))
    with pytest.raises(DimensionError):
        train(build_model("cnn-small", 2, SHAPE, 0), generate_synthetic(4, 2, SHAPE, 0), SgdConfig(epochs=1))
