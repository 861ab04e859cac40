import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tiny_model
from fsner.backbone import (
    BackboneConfig,
    GenerationParams,
    TinyTransformer,
    default_layer,
    forward_hidden,
    gather_indices,
    generate,
    load_backbone,
    pad_batch,
    save_backbone,
    select_layer,
    sequence_logprob,
    train_lm,
)
from fsner.errors import CapacityError, ConfigError
from fsner.lora import LoRAAdapter

V = 30


def _model(seed=0, **kw):
    return tiny_model(V, seed=seed, **kw)


def test_causality_under_future_perturbation():
    m = _model()
    ids = torch.randint(0, V, (1, 12), generator=torch.Generator().manual_seed(0))
    H, logp = forward_hidden(m, ids)
    changed = ids.clone()
    changed[0, 8:] = (changed[0, 8:] + 1) % V
    H2, logp2 = forward_hidden(m, changed)
    for a, b in zip(H, H2):
        assert torch.equal(a[:, :8], b[:, :8])
    assert torch.equal(logp[:, :8], logp2[:, :8])
    assert not torch.equal(logp[:, 8:], logp2[:, 8:])


def test_right_padding_does_not_leak():
    m = _model()
    seqs = [[1, 2, 3, 4, 5], [6, 7]]
    H, logp = forward_hidden(m, seqs)
    _, alone = forward_hidden(m, [[6, 7]])
    assert torch.allclose(logp[1, :2], alone[0], atol=1e-6)


def test_hidden_layer_count_and_selection():
    m = _model()
    H, _ = forward_hidden(m, [[1, 2, 3]])
    assert len(H) == 3 and H[0].shape == (1, 3, 16)
    assert default_layer(32) == 25 and default_layer(2) == 2 and default_layer(4) == 3
    assert select_layer(H) is H[2]
    with pytest.raises(ConfigError):
        select_layer(H, 5)


def test_sequence_logprob_matches_manual_sum():
    m = _model()
    prompt, target = [1, 2, 3], [4, 5]
    _, logp = forward_hidden(m, [prompt + target])
    manual = float(logp[0, 2, 4] + logp[0, 3, 5])
    assert sequence_logprob(m, prompt, target) == pytest.approx(manual, abs=1e-6)
    with pytest.warns(UserWarning):
        assert sequence_logprob(m, prompt, []) == 0.0


def _loop_gather(H, idx, mask):
    out = torch.zeros(idx.shape[0], idx.shape[1], H.shape[-1], dtype=H.dtype)
    for b in range(idx.shape[0]):
        for j in range(idx.shape[1]):
            if mask[b][j]:
                out[b, j] = H[b, idx[b][j]]
    return out


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 4), st.integers(1, 9), st.integers(1, 6), st.integers(0, 10**6))
def test_gather_matches_loop(B, T, J, seed):
    g = torch.Generator().manual_seed(seed)
    H = torch.randn(B, T, 5, generator=g, dtype=torch.float64)
    idx = torch.randint(-2, T + 2, (B, J), generator=g)
    mask = (idx >= 0) & (idx < T)
    out, m = gather_indices(H, idx, mask)
    assert torch.equal(out, _loop_gather(H, idx, mask))
    assert torch.equal(m, mask)


def test_gather_rejects_unmasked_out_of_range():
    with pytest.raises(IndexError, match="row 0, slot 1"):
        gather_indices(torch.zeros(1, 3, 2), [[0, 3]])


def _greedy(m, prompt, eos, n):
    out = []
    for _ in range(n):
        _, logp = forward_hidden(m, [prompt + out])
        t = int(logp[0, -1].argmax())
        out.append(t)
        if t == eos:
            break
    return out


@pytest.mark.parametrize("seed", range(10))
def test_single_beam_is_greedy(seed):
    m = _model(seed)
    prompt = torch.randint(0, V, (6,), generator=torch.Generator().manual_seed(seed)).tolist()
    g = generate(m, prompt, GenerationParams(num_beams=1, max_new_tokens=10), eos_id=3)
    assert g.tokens == _greedy(m, prompt, 3, 10)


def test_wider_beam_never_scores_worse():
    m = _model(1)
    gen = torch.Generator().manual_seed(7)
    for _ in range(100):
        prompt = torch.randint(0, V, (5,), generator=gen).tolist()
        b1 = generate(m, prompt, GenerationParams(num_beams=1, max_new_tokens=6), eos_id=3)
        b4 = generate(m, prompt, GenerationParams(num_beams=4, max_new_tokens=6), eos_id=3)
        if b1.finished:
            assert b4.finished and b4.logprob >= b1.logprob - 1e-6


def test_generation_reports_rescored_logprob():
    m = _model(2)
    g = generate(m, [1, 2, 3], GenerationParams(num_beams=2, max_new_tokens=5), eos_id=4)
    assert g.logprob == pytest.approx(sum(g.token_logprobs), abs=1e-5)
    assert g.logprob == pytest.approx(sequence_logprob(m, [1, 2, 3], g.tokens), abs=1e-5)


def test_sampling_is_seeded():
    m = _model(3)
    p = GenerationParams(temperature=1.0, num_beams=1, max_new_tokens=8, seed=11)
    assert generate(m, [1, 2], p, 3).tokens == generate(m, [1, 2], p, 3).tokens


def test_capacity_limits():
    m = _model()
    with pytest.raises(CapacityError):
        forward_hidden(m, torch.zeros(1, 200, dtype=torch.long))
    with pytest.raises(CapacityError):
        generate(m, [1] * 128, GenerationParams(), 3)
    with pytest.raises(ValueError):
        forward_hidden(m, [[V + 1]])


def test_zero_adapter_is_identity():
    m = _model()
    ad = LoRAAdapter.create(m.config.site_shapes(["attn.q", "mlp.fc1"]), rank=4, alpha=8)
    ids = torch.tensor([[1, 2, 3, 4]])
    assert torch.equal(forward_hidden(m, ids)[1], forward_hidden(m, ids, ad)[1])


def test_checkpoint_round_trip(tmp_path):
    m = _model(4)
    save_backbone(m, tmp_path / "b.npz")
    m2 = load_backbone(tmp_path / "b.npz")
    assert m2.parameter_hash() == m.parameter_hash()
    assert m2.config == m.config


def test_lm_training_reduces_loss():
    m = TinyTransformer(BackboneConfig(V, 1, 16, 2, 32), seed=0)
    seqs = [[1, 2, 3, 4, 5, 6]] * 32
    losses = train_lm(m, seqs, epochs=20, lr=1e-2, batch_size=8)
    assert losses[-1] < 0.5 * losses[0]


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(10, hidden_dim=10, n_heads=3)
    with pytest.raises(ConfigError):
        GenerationParams(top_p=0)
    with pytest.raises(ConfigError):
        BackboneConfig(10).site_shapes(["attn.x"])
