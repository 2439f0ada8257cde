import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedcybgd.compression import CompressorSpec
from fedcybgd.config import (DataSpec, ExperimentConfig, apply_overrides, from_dict, load_config,
                             save_config, to_dict)
from fedcybgd.data import holdout_split, make_synthetic_dataset, mean_tv_distance, partition_data
from fedcybgd.model import ConfigError, ModelConfig, build_model, forward_loss, model_gradients
from fedcybgd.optim import OptimizerState, optimizer_update


@pytest.mark.parametrize("task", ["char-lm", "cluster-classify"])
def test_same_seed_identical_bytes(task):
    a, b = make_synthetic_dataset(task, 64, 5), make_synthetic_dataset(task, 64, 5)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert a.x.tobytes() != make_synthetic_dataset(task, 64, 6).x.tobytes()


def test_char_lm_shape_and_alphabet():
    ds = make_synthetic_dataset("char-lm", 20, 0, seq_len=9)
    assert ds.x.shape == ds.y.shape == (20, 9)
    assert ds.x.min() >= 0 and ds.x.max() < 64
    np.testing.assert_array_equal(ds.x[:, 1:], ds.y[:, :-1])


def test_central_training_beats_unigram_entropy():
    full = make_synthetic_dataset("char-lm", 384, 0, seq_len=16)
    train, held = holdout_split(full, 128, 0)
    cfg = ModelConfig(family="tiny-transformer", n_layers=2, width=32, n_heads=2, vocab_size=64, seq_len=16)
    model, opt = build_model(cfg, 0), OptimizerState("adam", lr=1e-2)
    names = list(model.named_parameters())
    for _ in range(30):
        _, trace = forward_loss(model, train.batch())
        upd = optimizer_update(opt, model.named_parameters(), model_gradients(model, trace, names))
        model = model.with_parameters({k: model.named_parameters()[k] + u for k, u in upd.items()})
    held_loss = forward_loss(model, held.batch())[0]
    assert held_loss < full.meta["unigram_entropy"]
    assert full.meta["conditional_entropy"] < full.meta["unigram_entropy"]


def test_linear_probe_on_separated_clusters():
    ds = make_synthetic_dataset("cluster-classify", 2000, 0, separation=6.0)
    train, test = holdout_split(ds, 500, 0)
    X = np.c_[train.x, np.ones(len(train))]
    w, *_ = np.linalg.lstsq(X, np.eye(8)[train.y], rcond=None)
    acc = np.mean((np.c_[test.x, np.ones(len(test))] @ w).argmax(1) == test.y)
    assert acc > 0.95


def test_iid_equal_sizes():
    ds = make_synthetic_dataset("cluster-classify", 1000, 0)
    assert [len(s) for s in partition_data(ds, 4, "iid", seed=0)] == [250] * 4


def test_large_alpha_close_to_global():
    ds = make_synthetic_dataset("cluster-classify", 2000, 0)
    tvs = [mean_tv_distance(ds, partition_data(ds, 4, "dirichlet", 1000.0, seed=s)) for s in range(10)]
    assert np.mean(tvs) < 0.05


def test_small_alpha_skewed():
    ds = make_synthetic_dataset("cluster-classify", 800, 0)
    tvs = [mean_tv_distance(ds, partition_data(ds, 8, "dirichlet", 0.1, seed=s)) for s in range(100)]
    assert np.mean(tvs) > 0.3


def test_char_lm_dirichlet_skews_sources():
    ds = make_synthetic_dataset("char-lm", 1600, 0)
    assert mean_tv_distance(ds, partition_data(ds, 8, "dirichlet", 0.1, seed=0)) > 0.3


def test_partition_errors():
    ds = make_synthetic_dataset("cluster-classify", 10, 0)
    for alpha in (0.0, -1.0):
        with pytest.raises(ValueError, match="alpha"):
            partition_data(ds, 2, "dirichlet", alpha)
    with pytest.raises(ValueError):
        partition_data(ds, 11)
    with pytest.raises(ValueError):
        partition_data(ds, 2, "zipf")


@settings(max_examples=40)
@given(m=st.integers(1, 12), seed=st.integers(0, 10_000), scheme=st.sampled_from(["iid", "dirichlet"]),
       alpha=st.sampled_from([0.05, 0.5, 5.0]))
def test_shards_disjoint_and_exhaustive(m, seed, scheme, alpha):
    ds = make_synthetic_dataset("cluster-classify", 60, 1)
    shards = partition_data(ds, m, scheme, alpha, seed)
    idx = np.concatenate([s.indices for s in shards])
    assert len(shards) == m and sorted(idx.tolist()) == list(range(60))
    for i, s in enumerate(shards):
        np.testing.assert_array_equal(s.x, ds.x[s.indices])
        assert s.client == i


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig(model=ModelConfig(family="mlp", n_layers=3), data=DataSpec(task="cluster-classify"),
                           compressor=CompressorSpec(0.3, prune_ratio=0.25, scaled=True), method="fedbavg",
                           budget=48, batch_size=None, seed=11)
    path = save_config(cfg, tmp_path / "c.yaml")
    assert load_config(path) == cfg
    assert from_dict(to_dict(cfg)) == cfg


def test_config_lists_every_violation():
    cfg = ExperimentConfig(method="magic", clients=0, local_epochs=0, local_lr=-1.0,
                           compressor=CompressorSpec(1.5), data=DataSpec(scheme="dirichlet", alpha=0.0))
    with pytest.raises(ConfigError) as exc:
        cfg.validate()
    text = " | ".join(exc.value.problems)
    for fragment in ("method", "clients", "local_epochs", "local_lr", "compressor", "alpha"):
        assert fragment in text
    assert len(exc.value.problems) >= 6


def test_from_dict_rejects_unknown_keys_and_version():
    d = to_dict(ExperimentConfig())
    d["bogus"] = 1
    d["model"]["nope"] = 2
    d["schema_version"] = 99
    with pytest.raises(ConfigError) as exc:
        from_dict(d)
    assert len(exc.value.problems) == 3


def test_overrides():
    cfg = apply_overrides(ExperimentConfig(), ["rounds=3", "model.width=16", "compressor.drop_probability=0.5",
                                               "budget=null"])
    assert cfg.rounds == 3 and cfg.model.width == 16 and cfg.compressor.drop_probability == 0.5
    assert cfg.budget is None
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), ["nosuch=1", "rounds"])
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), ["clients=-2"])
