import pytest
import torch
from hypothesis import given, settings, strategies as st

from fsner.errors import AdapterFormatError, ChecksumError, NumericAbort, StageTagError
from fsner.lora import (
    CompositionWeights,
    LoRAAdapter,
    apply_adapter,
    load_adapter,
    merge_adapters,
    optimize_weights,
    save_adapter,
)

SHAPES = {"layers.0.attn.q": (6, 6), "layers.0.mlp.fc1": (6, 10)}


def _random_adapter(seed, rank=3, dtype=torch.float64, **kw):
    g = torch.Generator().manual_seed(seed)
    ad = LoRAAdapter.create(SHAPES, rank, alpha=6.0, seed=seed, dtype=dtype, **kw)
    for s, (a, b) in ad.factors.items():
        ad.factors[s] = (a, torch.randn(b.shape, generator=g, dtype=dtype))
    return ad


def test_full_rank_correction_matches_dense_oracle():
    g = torch.Generator().manual_seed(0)
    d = k = 4
    delta = torch.randn(d, k, generator=g, dtype=torch.float64)
    ad = LoRAAdapter({"s": (torch.eye(d, dtype=torch.float64), delta.clone())}, rank=4, alpha=2.0)
    x = torch.randn(5, d, generator=g, dtype=torch.float64)
    base = torch.randn(5, k, generator=g, dtype=torch.float64)
    out = apply_adapter(x, base, ad, "s")
    assert torch.allclose(out, base + 0.5 * x @ delta, atol=1e-6)


def test_dropout_only_in_training():
    ad = _random_adapter(0)
    ad.dropout = 0.5
    x, base = torch.randn(4, 6, dtype=torch.float64), torch.zeros(4, 6, dtype=torch.float64)
    assert torch.equal(apply_adapter(x, base, ad, "layers.0.attn.q"), apply_adapter(x, base, ad, "layers.0.attn.q"))
    torch.manual_seed(0)
    assert not torch.equal(apply_adapter(x, base, ad, "layers.0.attn.q", training=True), apply_adapter(x, base, ad, "layers.0.attn.q"))


def test_one_hot_merge_returns_the_adapter():
    ads = [_random_adapter(s) for s in range(3)]
    merged = merge_adapters(ads, [0.0, 1.0, 0.0])
    for s in SHAPES:
        assert (merged.delta(s) - ads[1].delta(s)).abs().max() <= 1e-9


@settings(max_examples=50, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2))
def test_merge_is_product_of_sums(w1, w2):
    a, b = _random_adapter(1), _random_adapter(2)
    merged = merge_adapters([a, b], [w1, w2])
    for s in SHAPES:
        A = w1 * a.factors[s][0] + w2 * b.factors[s][0]
        B = w1 * a.factors[s][1] + w2 * b.factors[s][1]
        assert torch.allclose(merged.delta(s), a.scale * A @ B, atol=1e-9)


def test_duplicate_adapter_cross_term():
    a = _random_adapter(5)
    for w in (0.3, -0.7, 1.2):
        merged = merge_adapters([a, a.clone()], [w, w])
        for s in SHAPES:
            assert torch.allclose(merged.delta(s), 4 * w * w * a.delta(s), atol=1e-6)


def test_merge_validation():
    a = _random_adapter(0)
    with pytest.raises(ValueError):
        merge_adapters([a, _random_adapter(1, rank=2)], [0.5, 0.5])
    with pytest.raises(ValueError):
        merge_adapters([a], [0.5, 0.5])


def test_optimizer_finds_quadratic_minimum():
    target = [0.7, -0.4, 1.1]
    loss = lambda w: sum((wi - ti) ** 2 for wi, ti in zip(w, target))
    res = optimize_weights([None] * 3, loss, CompositionWeights(l1_coefficient=0.0, search_budget=500))
    assert max(abs(a - b) for a, b in zip(res.w, target)) < 1e-2
    assert res.evaluations <= 500


def test_optimizer_with_l1_shrinks_and_never_worsens():
    loss = lambda w: (w[0] - 1.0) ** 2 + (w[1] - 0.02) ** 2
    cfg = CompositionWeights(l1_coefficient=0.1, search_budget=300)
    res = optimize_weights([None, None], loss, cfg)
    # soft-threshold optimum: w0 = 1 - l1/2, w1 = 0
    assert abs(res.w[0] - 0.95) < 1e-2 and abs(res.w[1]) < 1e-2
    init_obj = loss([0.5, 0.5]) + 0.1
    assert res.objective <= init_obj


def test_optimizer_is_seeded_and_aborts_on_nan():
    loss = lambda w: (w[0] + 0.3) ** 2
    a = optimize_weights([None], loss, CompositionWeights(seed=3, search_budget=50))
    b = optimize_weights([None], loss, CompositionWeights(seed=3, search_budget=50))
    assert a.w == b.w
    with pytest.raises(NumericAbort):
        optimize_weights([None], lambda w: float("nan"))


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_file_round_trip(tmp_path, dtype):
    ad = _random_adapter(3, dtype=dtype, stage_tag="type", domain_tag="news")
    ad.meta = {"config": {"lr": 0.1}}
    save_adapter(ad, tmp_path / "a.lora")
    back = load_adapter(tmp_path / "a.lora", expected_stage="type")
    assert back.equal(ad) and back.domain_tag == "news" and back.meta == ad.meta


def test_file_corruption_and_stage_checks(tmp_path):
    p = tmp_path / "a.lora"
    save_adapter(_random_adapter(0), p)
    with pytest.raises(StageTagError):
        load_adapter(p, expected_stage="type")
    with pytest.raises(AdapterFormatError):
        load_adapter(p, expected_shapes={"layers.0.attn.q": (6, 6), "layers.0.mlp.fc1": (6, 9)})
    data = bytearray(p.read_bytes())
    data[-3] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(ChecksumError):
        load_adapter(p)
    p.write_bytes(b"garbage!")
    with pytest.raises(AdapterFormatError):
        load_adapter(p)
