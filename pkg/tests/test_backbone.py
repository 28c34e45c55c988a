import json

import numpy as np
import pytest

from core.autograd import Tensor
from core.hco import FveTable
from model.backbone import ALIGN_STRATEGIES, build_model, count_parameters, forward
from model.config import PRESETS, ModelConfig, get_preset, load_model_config
from tests.conftest import perturb


def _images(rng, b=2, extent=32):
    return Tensor(rng.normal(size=(b, 3, extent, extent)), dtype="f32")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(layers=(2, 2, 2)).validate()
    with pytest.raises(ValueError):
        ModelConfig(channels=(96, 96, 384, 768)).validate()
    with pytest.raises(ValueError):
        ModelConfig(input_extent=100).validate()
    with pytest.raises(ValueError):
        ModelConfig(k_mode="magic").validate()
    with pytest.raises(ValueError, match="gate"):
        ModelConfig(gate="tanh").validate()
    with pytest.raises(ValueError, match="k_source_extent"):
        ModelConfig(k_source_extent=48).validate()
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"layers": [2, 2, 6, 2], "depth": 3})
    with pytest.raises(ValueError):
        get_preset("huge")


def test_config_dict_and_file(tmp_path):
    cfg = get_preset("micro")
    assert ModelConfig.from_dict(json.loads(cfg.to_json())) == cfg
    path = tmp_path / "m.json"
    path.write_text(json.dumps({"preset": "micro", "num_classes": 4}), encoding="utf-8")
    loaded = load_model_config(str(path))
    assert loaded.num_classes == 4
    assert loaded.channels == cfg.channels
    assert load_model_config("tiny") is PRESETS["tiny"]


def test_stage_extents():
    cfg = get_preset("tiny")
    assert [cfg.stage_extent(s) for s in range(4)] == [56, 28, 14, 7]
    assert cfg.stage_extent(0, 512) == 128


def test_micro_forward_shapes(micro_model, rng):
    feats = micro_model.forward_features(_images(rng))
    assert [f.shape for f in feats] == [(2, 16, 8, 8), (2, 32, 4, 4), (2, 64, 2, 2), (2, 128, 1, 1)]
    logits = forward(micro_model, _images(rng))
    assert logits.shape == (2, 10)
    assert np.all(logits.data == 0)


def test_perturbed_model_gives_distinct_logits(trained_like_model, rng):
    logits = trained_like_model(_images(rng, b=3)).data
    assert np.isfinite(logits).all()
    assert np.abs(logits[0] - logits[1]).max() > 1e-6


def test_same_seed_same_parameters(micro_cfg):
    a = dict(build_model(micro_cfg, seed=4).named_parameters())
    b = dict(build_model(micro_cfg, seed=4).named_parameters())
    c = dict(build_model(micro_cfg, seed=5).named_parameters())
    assert list(a) == list(b)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a)
    assert not np.array_equal(a["stages.0.layers.0.in_w"].data, c["stages.0.layers.0.in_w"].data)


def test_parameter_names(micro_model):
    names = [n for n, _ in micro_model.named_parameters()]
    assert len(names) == len(set(names))
    assert names[0].startswith("stem.")
    assert names[-1] == "head.fc_b"
    for expected in ("stages.0.fve", "stages.1.downsample.conv_w", "stages.3.layers.1.fc2_w"):
        assert expected in names
    assert "stages.0.downsample.conv_w" not in names


def test_input_checks(micro_model, rng):
    with pytest.raises(ValueError, match="32"):
        micro_model(Tensor(np.zeros((1, 3, 48, 48))))
    with pytest.raises(ValueError, match="resize_fves"):
        micro_model(_images(rng, extent=64))
    with pytest.raises(ValueError):
        micro_model(Tensor(np.zeros((1, 1, 32, 32))))


def test_resize_fves_enables_new_extent(rng):
    model = perturb(build_model(get_preset("micro"), seed=0))
    before = model.stages[0].fve.embeddings.data.copy()
    model.resize_fves(64)
    assert model.cfg.input_extent == 64
    assert model.stages[0].fve.extent == (16, 16)
    assert dict(model.named_parameters())["stages.0.fve"] is model.stages[0].fve.embeddings
    np.testing.assert_array_equal(model.stages[0].fve.embeddings.data[:8, :8], before)
    assert model(_images(rng, b=1, extent=64)).shape == (1, 10)


@pytest.mark.parametrize("overrides", [
    {"k_mode": "individual_fve"},
    {"k_mode": "learnable"},
    {"k_mode": "fixed", "fixed_k": 10.0},
    {"use_dwconv": False},
    {"gate": "relu"},
    {"gate": "none"},
])
def test_variants_build_and_run(overrides, rng):
    model = perturb(build_model(get_preset("micro").with_overrides(**overrides), seed=1))
    assert model(_images(rng)).shape == (2, 10)
    model.resize_fves(64)
    assert model(_images(rng, b=1, extent=64)).shape == (1, 10)


def test_drop_path_rates_increase_linearly():
    model = build_model(get_preset("micro").with_overrides(drop_path=0.3), seed=0)
    rates = [layer.drop_path for stage in model.stages for layer in stage.layers]
    np.testing.assert_allclose(rates, np.linspace(0.0, 0.3, 8))


def test_tiny_parameter_count():
    n = count_parameters(build_model(get_preset("tiny"), seed=0))
    assert abs(n - 29e6) / 29e6 < 0.10


def test_stage_tables_stay_fve_tables(rng):
    cfg = ModelConfig(layers=(1, 1, 1, 1), channels=(8, 16, 32, 64), num_classes=5,
                      input_extent=32, fve_canonical=16)
    assert cfg.k_mode == "shared_fve"
    model = perturb(build_model(cfg, seed=2))
    assert all(isinstance(stage.fve, FveTable) for stage in model.stages)
    logits = model(_images(rng, b=3)).data
    assert logits.shape == (3, 5)
    assert np.isfinite(logits).all()
    assert np.abs(logits[0] - logits[1]).max() > 1e-6

    model.resize_fves(64)
    assert all(isinstance(stage.fve, FveTable) for stage in model.stages)
    params = dict(model.named_parameters())
    assert all(params[f"stages.{s}.fve"] is model.stages[s].fve.embeddings for s in range(4))
    assert np.isfinite(model(_images(rng, b=1, extent=64)).data).all()


def _f64_model(micro_cfg):
    return perturb(build_model(micro_cfg.with_overrides(dtype="f64"), seed=6))


def test_logits_do_not_depend_on_batch_composition(micro_cfg, rng):
    model = _f64_model(micro_cfg)
    x = rng.normal(size=(8, 3, 32, 32))
    batched = model(Tensor(x, dtype="f64")).data
    for i in range(8):
        single = model(Tensor(x[i:i + 1], dtype="f64")).data
        np.testing.assert_allclose(single[0], batched[i], atol=1e-6)


def test_logits_follow_batch_permutation(micro_cfg, rng):
    model = _f64_model(micro_cfg)
    x = rng.normal(size=(6, 3, 32, 32))
    perm = np.random.default_rng(9).permutation(6)
    base = model(Tensor(x, dtype="f64")).data
    shuffled = model(Tensor(x[perm], dtype="f64")).data
    np.testing.assert_allclose(shuffled, base[perm], atol=1e-10)


@pytest.mark.parametrize("extent", [32, 64, 96])
def test_feature_shapes_follow_input_extent(micro_model, extent, rng):
    if extent != 32:
        micro_model.resize_fves(extent)
    feats = micro_model.forward_features(_images(rng, b=1, extent=extent))
    stage0 = extent // 4
    expected = [(1, c, stage0 >> s, stage0 >> s) for s, c in enumerate(micro_model.cfg.channels)]
    assert [f.shape for f in feats] == expected
    assert [micro_model.stages[s].fve.extent for s in range(4)] == [(e[2], e[3]) for e in expected]
    assert micro_model(_images(rng, b=1, extent=extent)).shape == (1, 10)


def test_shape_audit_at_96(micro_model, rng):
    micro_model.resize_fves(96)
    feats = micro_model.forward_features(_images(rng, b=1, extent=96))
    assert [f.shape[2] for f in feats] == [24, 12, 6, 3]


@pytest.mark.parametrize("k_mode", ["shared_fve", "individual_fve", "learnable"])
def test_interpolate_k_keeps_tables(k_mode, rng):
    model = perturb(build_model(get_preset("micro").with_overrides(k_mode=k_mode), seed=1))
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    model.resize_fves(64, "interpolate_k")
    assert model.cfg.input_extent == 64
    assert model.cfg.k_source_extent == 32
    after = dict(model.named_parameters())
    assert list(after) == list(before)
    assert all(np.array_equal(after[n].data, before[n]) for n in before)
    logits = model(_images(rng, b=1, extent=64)).data
    assert logits.shape == (1, 10)
    assert np.isfinite(logits).all()

    model.resize_fves(96, "interpolate_k")
    assert model.cfg.k_source_extent == 32
    assert model(_images(rng, b=1, extent=96)).shape == (1, 10)


def test_table_resize_after_interpolate_k(micro_model, rng):
    micro_model.resize_fves(64, "interpolate_k")
    assert micro_model.stages[0].fve.extent == (8, 8)
    micro_model.resize_fves(64)
    assert micro_model.cfg.k_source_extent == 0
    assert micro_model.stages[0].fve.extent == (16, 16)
    assert not any(layer.k_interp for stage in micro_model.stages for layer in stage.layers)
    assert micro_model(_images(rng, b=1, extent=64)).shape == (1, 10)


def test_unknown_alignment_strategy(micro_model):
    assert "interpolate_k" in ALIGN_STRATEGIES
    with pytest.raises(ValueError, match="策略"):
        micro_model.resize_fves(64, "nearest")
    assert micro_model.cfg.input_extent == 32
