import csv
import io
import json

import numpy as np
import pytest

from gradprune.data import write_idx
from gradprune.errors import ConfigError
from gradprune.experiment import (ExperimentConfig, ExperimentFailed, aggregate_runs, build_data, parse_config,
                                  run_experiment, summarize)
from gradprune.metrics import MetricsReport, read_jsonl

TINY = """
# quick settings for tests
train_per_class = 30
test_per_class = 20
pool_per_class = 100
attack_epochs = 2
attack_batch_size = 16
ft_max_epochs = 2
patience_p = 2
spc = 2, 10
trials = 2
"""


def tiny(tmp_path, name="run", **overrides):
    return parse_config(TINY, output_dir=str(tmp_path / name), cache_dir=str(tmp_path / "cache"), **overrides)


# -- config ------------------------------------------------------------------------------

def test_parse_types_and_defaults():
    cfg = parse_config("alpha = 0.2\nspc = 2,10\ninclude_bias = false\nimage_shape = 1, 8, 8  # comment\n")
    assert cfg.alpha == 0.2 and cfg.spc == (2, 10) and cfg.include_bias is False and cfg.image_shape == (1, 8, 8)
    assert cfg.trials == 5 and cfg.defense == "ours" and cfg.ft_max_epochs == 100
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize("text", ["alpah = 0.1", "alpha = 0.1\nalpha = 0.2", "trials = many", "no equals sign",
                                  "defense = magic", "spc = 1,10", "alpha_mode = relative", "patience_t = 0",
                                  "include_bias = maybe", "dataset = idx"])
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_overrides_win():
    assert parse_config("trials = 3", trials=7, defense=None).trials == 7
    with pytest.raises(ConfigError):
        parse_config("", bogus=1)


def test_attack_key_tracks_attack_settings():
    a = parse_config("")
    assert a.attack_key() == parse_config("defense = ft\nspc = 2").attack_key()
    assert a.attack_key() != parse_config("poison_ratio = 0.2").attack_key()
    assert a.attack_key() != parse_config("base_seed = 1").attack_key()


# -- data ---------------------------------------------------------------------------------

def test_synthetic_splits_are_disjoint(tmp_path):
    data = build_data(tiny(tmp_path))
    seen = {img.tobytes() for img in data.train.images}
    assert not any(img.tobytes() in seen for img in data.pool.images)
    assert not any(img.tobytes() in seen for img in data.test.images)


def test_idx_pool_carved_from_training_file(tmp_path):
    rng = np.random.default_rng(0)
    imgs, labs = rng.integers(0, 256, (40, 16, 16)), np.repeat(np.arange(4), 10)
    write_idx(tmp_path / "tri", tmp_path / "trl", imgs, labs)
    write_idx(tmp_path / "tei", tmp_path / "tel", imgs[:8], labs[:8])
    cfg = parse_config(f"dataset = idx\npool_per_class = 3\nidx_train_images = {tmp_path / 'tri'}\n"
                       f"idx_train_labels = {tmp_path / 'trl'}\nidx_test_images = {tmp_path / 'tei'}\n"
                       f"idx_test_labels = {tmp_path / 'tel'}\n")
    data = build_data(cfg)
    assert len(data.pool) == 12 and len(data.train) == 28 and len(data.test) == 8
    assert data.pool.class_counts().tolist() == [3, 3, 3, 3]
    pool_bytes = {i.tobytes() for i in data.pool.images}
    assert not any(i.tobytes() in pool_bytes for i in data.train.images)


# -- runs ----------------------------------------------------------------------------------

def _summary(path):
    return list(csv.DictReader(io.StringIO((path / "summary.csv").read_text())))


def test_full_protocol_runs_every_trial(tmp_path):
    out = run_experiment(tiny(tmp_path, spc=(2, 10, 100), trials=5))
    reports = read_jsonl((out / "metrics.jsonl").read_text())
    finals = [r for r in reports if r.stage == "post-finetune"]
    assert len(finals) == 15 and len(reports) == 45
    assert sorted({(r.spc, r.trial) for r in finals}) == [(s, t) for s in (2, 10, 100) for t in range(5)]
    assert all(r.seed == r.trial for r in reports)
    assert len(list((out / "traces").glob("*.prune.jsonl"))) == 15
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_trials_ok"] == 15 and manifest["n_trials_failed"] == 0
    assert (out / "failures.jsonl").read_text() == ""
    assert all(row["n"] == "5" for row in _summary(out))
    assert not list(out.rglob(".tmp-*"))


def test_defense_none_keeps_baseline(tmp_path):
    out = run_experiment(tiny(tmp_path, defense="none"))
    rows = {(r["stage"], r["spc"]): r for r in _summary(out)}
    for spc in ("2", "10"):
        for key in ("acc_mean", "asr_mean", "ra_mean"):
            assert rows[("post-finetune", spc)][key] == rows[("baseline", spc)][key]


def test_runs_are_reproducible(tmp_path):
    a = run_experiment(tiny(tmp_path, "a"))
    b = run_experiment(tiny(tmp_path, "b", jobs=2))
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()
    assert (a / "summary.csv").read_bytes() == (b / "summary.csv").read_bytes()
    for ckpt in (a / "checkpoints").iterdir():
        assert ckpt.read_bytes() == (b / "checkpoints" / ckpt.name).read_bytes()
    assert json.loads((b / "manifest.json").read_text())["attack_cached"] is True


def test_trial_results_do_not_depend_on_other_trials(tmp_path):
    both = read_jsonl((run_experiment(tiny(tmp_path, "both")) / "metrics.jsonl").read_text())
    alone = read_jsonl((run_experiment(tiny(tmp_path, "alone", spc=(10,), trials=1)) / "metrics.jsonl").read_text())
    match = [r for r in both if r.spc == 10 and r.trial == 0]
    assert sorted(alone, key=lambda r: r.stage) == sorted(match, key=lambda r: r.stage)


def test_all_trials_failing_raises(tmp_path):
    with pytest.raises(ExperimentFailed):
        run_experiment(tiny(tmp_path, spc=(200,)))
    failures = (tmp_path / "run" / "failures.jsonl").read_text().splitlines()
    assert len(failures) == 2 and "DataError" in json.loads(failures[0])["error"]


# -- summary --------------------------------------------------------------------------------

def test_summary_uses_sample_std():
    reps = [MetricsReport(a, 0.0, 1.0, 1, 1, stage="post-finetune", trial=t, spc=10, attack="badnets",
                          defense="ours") for t, a in enumerate([0.5, 0.7, 0.9])]
    row = list(csv.DictReader(io.StringIO(summarize(reps))))[0]
    assert float(row["acc_mean"]) == pytest.approx(0.7, abs=1e-15)
    assert float(row["acc_std"]) == pytest.approx(0.2, abs=1e-15)
    assert float(row["asr_std"]) == 0.0 and row["n"] == "3"


def test_aggregate_identical_runs_has_zero_std(tmp_path):
    a = run_experiment(tiny(tmp_path, "a", trials=1))
    rows = list(csv.DictReader(io.StringIO(aggregate_runs([a, a / "metrics.jsonl"]))))
    assert rows and all(float(r[k]) == 0.0 for r in rows for k in ("acc_std", "asr_std", "ra_std"))
    with pytest.raises(ConfigError):
        aggregate_runs([tmp_path / "missing"])
