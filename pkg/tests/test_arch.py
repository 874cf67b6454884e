import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from med2d.arch import (
    LAYER_IDS,
    VARIANTS,
    MedBlockConfig,
    ModelConfig,
    build_model,
    complexity_ledger,
    count_parameters,
    decoder_stage_forward,
    default_repeats,
    enumerate_parameters,
    filter_schedule,
    init_med_block,
    ledger_totals,
    med_block_forward,
)
from med2d.tensor import Tensor
from oracles import HAND_SCHEDULE


def test_filter_schedule_matches_hand_values():
    assert list(filter_schedule().values) == HAND_SCHEDULE
    assert filter_schedule().values == filter_schedule().values


def test_filter_schedule_constant_ratio_and_errors():
    assert set(filter_schedule(1.0, 8, 8).values) == {8}
    for bad in (dict(r=0), dict(f1=0), dict(f2=-1), dict(depth=1)):
        with pytest.raises(ValueError):
            filter_schedule(**bad)


@pytest.mark.parametrize("size,expected", [(256, (2, 2, 2, 2)), (512, (3, 3, 3, 3)), (1024, (4, 4, 4, 4)),
                                           (128, (2, 2, 2, 2)), (32, (2, 2, 2, 2))])
def test_default_repeats(size, expected):
    assert default_repeats(size) == expected


def _block_input(c, h, w, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal((1, h, w, c)).astype(np.float64))


@st.composite
def block_params(draw):
    return draw(st.integers(1, 16)), draw(st.sampled_from([4, 8, 16])), draw(st.sampled_from([4, 8, 16]))


@given(block_params(), st.booleans())
def test_med_block_preserves_shape(params, randomize):
    c, h, w = params
    cfg = MedBlockConfig(channels=c)
    weights = init_med_block(cfg, seed=c)
    if randomize:
        rng = np.random.default_rng(h * w)
        weights = {k: rng.standard_normal(v.shape) * 0.2 for k, v in weights.items()}
    out = med_block_forward(_block_input(c, h, w), {k: Tensor(v) for k, v in weights.items()}, cfg)
    assert out.shape == (1, h, w, c)


@pytest.mark.parametrize("c", range(1, 17))
def test_med_block_internal_widths(c):
    cfg = MedBlockConfig(channels=c)
    assert cfg.expanded == 6 * c
    assert cfg.squeeze == max(1, (6 * c) // 24)
    w = init_med_block(cfg)
    assert w["expand.w"].shape == (1, 1, c, 6 * c)
    assert w["dw.w"].shape == (7, 7, 6 * c)
    assert w["gate_reduce.w"].shape == (1, 1, 6 * c, cfg.squeeze)
    assert w["gate_expand.w"].shape == (1, 1, cfg.squeeze, 6 * c)
    assert w["project.w"].shape == (1, 1, 6 * c, c)


@pytest.mark.parametrize("use_norm", [True, False])
def test_med_block_is_identity_at_build_time(use_norm):
    for c in (1, 5, 16):
        cfg = MedBlockConfig(channels=c)
        x = _block_input(c, 8, 8, seed=c)
        weights = {k: Tensor(v) for k, v in init_med_block(cfg, seed=1, use_norm=use_norm).items()}
        out = med_block_forward(x, weights, cfg, use_norm=use_norm)
        np.testing.assert_array_equal(out.data, x.data)


def test_med_block_channel_mismatch():
    cfg = MedBlockConfig(channels=4)
    with pytest.raises(ValueError):
        med_block_forward(_block_input(3, 4, 4), {k: Tensor(v) for k, v in init_med_block(cfg).items()}, cfg)


def _symmetrize(weights):
    # mirror every spatial kernel left-right so the block commutes with horizontal flip
    out = {}
    for k, v in weights.items():
        if v.ndim >= 3 and v.shape[0] > 1:
            v = 0.5 * (v + v[:, ::-1])
        out[k] = v
    return out


def test_med_block_commutes_with_hflip_for_symmetric_kernels():
    cfg = MedBlockConfig(channels=6)
    rng = np.random.default_rng(9)
    weights = _symmetrize({k: rng.standard_normal(v.shape) * 0.3 for k, v in init_med_block(cfg).items()})
    tw = {k: Tensor(v) for k, v in weights.items()}
    x = rng.standard_normal((2, 12, 10, 6))
    a = med_block_forward(Tensor(x[:, :, ::-1].copy()), tw, cfg).data
    b = med_block_forward(Tensor(x), tw, cfg).data[:, :, ::-1]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_decoder_stage_commutes_with_hflip_for_symmetric_kernels():
    rng = np.random.default_rng(10)
    k = rng.standard_normal((3, 3, 4, 3))
    weights = {"conv.w": Tensor(0.5 * (k + k[:, ::-1])), "conv.b": Tensor(rng.standard_normal(3)),
               "conv.norm.scale": Tensor(np.ones(3)), "conv.norm.shift": Tensor(np.zeros(3))}
    x = rng.standard_normal((1, 4, 6, 4))
    skip = rng.standard_normal((1, 8, 12, 3))
    a = decoder_stage_forward(Tensor(x[:, :, ::-1].copy()), Tensor(skip[:, :, ::-1].copy()), weights).data
    b = decoder_stage_forward(Tensor(x), Tensor(skip), weights).data[:, :, ::-1]
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@st.composite
def model_configs(draw):
    return ModelConfig(
        input_size=draw(st.sampled_from([16, 32, 48, 64, 256, 512])),
        input_channels=draw(st.integers(1, 4)),
        num_classes=draw(st.integers(1, 7)),
        stem_width=draw(st.integers(1, 40)),
        stage_widths=tuple(draw(st.lists(st.integers(1, 64), min_size=4, max_size=4))),
        stage_repeats=tuple(draw(st.lists(st.integers(1, 3), min_size=4, max_size=4))),
        expansion_factor=draw(st.integers(1, 8)),
        depthwise_kernel=draw(st.sampled_from([3, 5, 7])),
        reduction_divisor=draw(st.sampled_from([4, 24, 48])),
        use_norm=draw(st.booleans()),
    ).with_ablation(draw(st.sampled_from(sorted(VARIANTS))))


@given(model_configs())
def test_count_parameters_equals_enumeration(cfg):
    assert count_parameters(cfg).total == enumerate_parameters(build_model(cfg, seed=0))


def test_fifty_random_configs_exactly():
    rng = np.random.default_rng(2024)
    for _ in range(50):
        cfg = ModelConfig(
            input_size=int(rng.choice([32, 64, 256])),
            num_classes=int(rng.integers(1, 5)),
            stem_width=int(rng.integers(1, 33)),
            stage_widths=tuple(int(v) for v in rng.integers(1, 80, 4)),
            stage_repeats=tuple(int(v) for v in rng.integers(1, 4, 4)),
            use_norm=bool(rng.integers(2)),
        ).with_ablation(str(rng.choice(sorted(VARIANTS))))
        assert count_parameters(cfg).total == enumerate_parameters(build_model(cfg))


def test_default_total_and_ablation_ordering():
    cfg = ModelConfig()
    totals = ledger_totals(complexity_ledger(cfg))
    assert totals["baseline"] == count_parameters(cfg).total == 1_369_225
    assert totals["no-expansion"] < totals["baseline"]
    assert totals["no-reduction-gate"] < totals["baseline"]


def test_ledger_cumulative_column():
    rows = complexity_ledger(ModelConfig.tiny(64), ["baseline"])
    running = 0
    for _, _, _, n, cumulative in rows:
        running += n
        assert cumulative == running


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        ModelConfig(input_size=20)
    with pytest.raises(ValueError):
        ModelConfig(stage_widths=(8, 8, 8))
    cfg = ModelConfig.tiny(64, num_classes=3).with_ablation("no-expansion")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_forward_shapes_taps_and_probabilities():
    model = build_model(ModelConfig.tiny(32, num_classes=3), seed=2)
    x = np.random.default_rng(0).uniform(0, 1, (2, 32, 32, 3)).astype(np.float32)
    out = model.forward(x)
    assert out.probs.shape == (2, 32, 32, 3)
    assert set(out.taps) == set(LAYER_IDS)
    assert out.taps["enc4"].shape == (2, 2, 2, 24)
    np.testing.assert_allclose(out.probs.data.sum(axis=-1), 1.0, rtol=1e-5)

    binary = build_model(ModelConfig.tiny(32), seed=2)
    p = binary.forward(x).probs.data
    assert p.shape == (2, 32, 32, 1) and p.min() >= 0 and p.max() <= 1


def test_forward_input_checks():
    model = build_model(ModelConfig.tiny(32))
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 32, 32, 1), np.float32))
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 24, 32, 3), np.float32))


def test_predict_independent_of_batch_size():
    model = build_model(ModelConfig.tiny(32), seed=4)
    x = np.random.default_rng(1).uniform(0, 1, (5, 32, 32, 3)).astype(np.float32)
    np.testing.assert_allclose(model.predict(x, batch_size=1), model.predict(x, batch_size=4), rtol=1e-5, atol=1e-6)


def test_build_is_deterministic_and_seed_sensitive():
    cfg = ModelConfig.tiny(32)
    assert build_model(cfg, 3).weight_hash() == build_model(cfg, 3).weight_hash()
    assert build_model(cfg, 3).weight_hash() != build_model(cfg, 4).weight_hash()


def test_plain_variant_replaces_every_med_block():
    model = build_model(ModelConfig.tiny(32).with_ablation("plain-cnn-encoder"))
    assert not any(".expand." in k or ".gate_" in k for k in model.params)
    assert "bottleneck.plain0.w" in model.params
