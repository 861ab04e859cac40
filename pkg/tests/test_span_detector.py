import math
from dataclasses import replace

import pytest
import torch

from conftest import tiny_model
from fsner.backbone import GenerationParams, sequence_logprob
from fsner.corpus import LabeledSentence
from fsner.errors import NumericAbort, StageTagError
from fsner.lora import LoRAConfig
from fsner.prompting import render_span_prompt
from fsner.span_detector import (
    ContrastiveBatch,
    SpanTrainConfig,
    contrastive_loss,
    detect_spans,
    fine_tune_support,
    generation_loss,
    match_items,
    new_span_adapter,
    train_on_prompts,
    train_span_stage,
)
from fsner.type_classifier import new_type_adapter

ALL_SITES = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2")


def _prompts(corpus, tokenizer, templates, catalog, n=12):
    return [render_span_prompt(s, templates[0], tokenizer, catalog) for s in corpus[:n]]


def test_generation_loss_is_mean_negative_logprob(synth_corpus, tokenizer, templates, synth_catalog, model):
    prompts = _prompts(synth_corpus, tokenizer, templates, synth_catalog, 4)
    lp = [sequence_logprob(model, p.prompt_ids, p.target_ids) for p in prompts]
    loss = float(generation_loss(prompts, model))
    assert loss == pytest.approx(-sum(lp) / len(lp), rel=1e-5)


def test_generation_loss_rejects_fully_masked_batch(synth_corpus, tokenizer, templates, synth_catalog, model):
    p = render_span_prompt(synth_corpus[0], templates[0], tokenizer, synth_catalog, with_target=False)
    with pytest.raises(ValueError):
        generation_loss([p], model)


def _batch(o, pos, neg, neg_mask=None):
    S = o.shape[0]
    return ContrastiveBatch(
        o, pos, neg, torch.ones(S, 2, dtype=torch.bool),
        torch.ones(S, 4, dtype=torch.bool) if neg_mask is None else neg_mask,
        torch.arange(S), S,
    )


def test_contrastive_loss_direction():
    o = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    near = o.expand(1, 2, 2)[None][0]
    far = -o.expand(1, 4, 2)
    good = contrastive_loss(_batch(o, near.reshape(1, 2, 2), far.reshape(1, 4, 2)))
    bad = contrastive_loss(_batch(o, -near.reshape(1, 2, 2), -far.reshape(1, 4, 2)))
    assert good < math.log(2) < bad
    assert float(good) == pytest.approx(-math.log(1 / (1 + math.exp(-6))), rel=1e-9)


def test_masked_negatives_do_not_count():
    g = torch.Generator().manual_seed(0)
    o = torch.randn(1, 4, generator=g, dtype=torch.float64)
    pos = torch.randn(1, 2, 4, generator=g, dtype=torch.float64)
    neg = torch.randn(1, 4, 4, generator=g, dtype=torch.float64)
    mask = torch.tensor([[True, False, True, False]])
    a = contrastive_loss(_batch(o, pos, neg, mask))
    neg2 = neg.clone()
    neg2[0, 1] = 100.0
    neg2[0, 3] = -3.0
    assert float(contrastive_loss(_batch(o, pos, neg2, mask))) == float(a)


def test_lambda_zero_matches_pure_generation_run(synth_corpus, tokenizer, templates, synth_catalog, model):
    prompts = _prompts(synth_corpus, tokenizer, templates, synth_catalog)
    no_spans = [replace(p, span_index_map=[], span_type=[]) for p in prompts]
    cfg = SpanTrainConfig(learning_rate=1e-2, epochs=2, batch_size=3, lam=0.0, lora=LoRAConfig(4, 8, 0.0))
    log_a, log_b = [], []
    a = train_on_prompts(prompts, model, cfg, log=log_a)
    b = train_on_prompts(no_spans, model, cfg, log=log_b)
    assert [r["L_g"] for r in log_a] == [r["L_g"] for r in log_b]
    assert a.equal(b)
    assert any(r["L_cl"] != 0 for r in log_a)


def test_training_leaves_base_untouched(synth_corpus, tokenizer, templates, synth_catalog):
    model = tiny_model(len(tokenizer), hidden=32)
    before = model.parameter_hash()
    cfg = SpanTrainConfig(learning_rate=1e-2, epochs=2, batch_size=4, lora=LoRAConfig(8, 8, 0.0, ALL_SITES))
    log = []
    ad = train_span_stage(synth_corpus, model, tokenizer, templates[0], synth_catalog, cfg, log=log)
    assert model.parameter_hash() == before
    assert not any(t.requires_grad for t in ad.parameters())
    assert not any(p.requires_grad for p in model.parameters()) and not model.training
    assert len(log) == 2 * 15
    assert {"step", "epoch", "L_g", "L_cl", "combined", "lr", "lambda", "seed"} <= set(log[0])


def test_training_is_deterministic(synth_corpus, tokenizer, templates, synth_catalog, model):
    prompts = _prompts(synth_corpus, tokenizer, templates, synth_catalog, 6)
    cfg = SpanTrainConfig(learning_rate=1e-2, epochs=1, batch_size=2, lora=LoRAConfig(4, 8, 0.05))
    assert train_on_prompts(prompts, model, cfg).equal(train_on_prompts(prompts, model, cfg))


def test_non_finite_loss_aborts(synth_corpus, tokenizer, templates, synth_catalog, model):
    prompts = _prompts(synth_corpus, tokenizer, templates, synth_catalog, 2)
    cfg = SpanTrainConfig(lora=LoRAConfig(2, 2, 0.0))
    init = new_span_adapter(model, cfg.lora)
    a, b = next(iter(init.factors.values()))
    b.fill_(float("nan"))
    with pytest.raises(NumericAbort, match="epoch 0"):
        train_on_prompts(prompts, model, cfg, init=init)


def test_disabled_support_tuning_returns_same_adapter(synth_corpus, tokenizer, templates, synth_catalog, model):
    ad = new_span_adapter(model, LoRAConfig(2, 2))
    assert fine_tune_support(synth_corpus[:3], model, ad, tokenizer, templates[0], synth_catalog, SpanTrainConfig(), enabled=False) is ad
    assert fine_tune_support([], model, ad, tokenizer, templates[0], synth_catalog, SpanTrainConfig()) is ad


def test_match_items_leftmost_unused():
    words = ["a", "b", "a", "b", "c"]
    hits, dropped = match_items(words, ["a b", "a b", "a b", "c", "x"])
    assert hits == [(0, 2), (2, 4), None, (4, 5), None] and dropped == 2


def test_detect_spans_output_is_valid(synth_corpus, tokenizer, templates, synth_catalog, model):
    params = GenerationParams(num_beams=2, max_new_tokens=12)
    for s in synth_corpus[:5]:
        det = detect_spans(s, model, None, params, tokenizer, templates[0], synth_catalog)
        assert det.spans == sorted(det.spans)
        assert len(det.span_logprobs) == len(det.spans)
        for a, b in zip(det.spans, det.spans[1:]):
            assert a.end <= b.begin
        assert det.sequence_logprob <= 0


def test_detect_spans_rejects_type_adapter(synth_corpus, tokenizer, templates, synth_catalog, model):
    with pytest.raises(StageTagError):
        detect_spans(synth_corpus[0], model, new_type_adapter(model, LoRAConfig(2, 2), "d"), GenerationParams(),
                     tokenizer, templates[0], synth_catalog)
