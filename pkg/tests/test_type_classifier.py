import math
import statistics

import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import tiny_model
from fsner.corpus import LabeledSentence, sample_episode, spans_from_tags
from fsner.errors import StageTagError, ValidationError
from fsner.lora import LoRAConfig, merge_adapters
from fsner.span_detector import new_span_adapter
from fsner.type_classifier import (
    TypeTrainConfig,
    build_prototypes,
    class_scores,
    classify_candidates,
    classify_span,
    composition_objective,
    episode_loss,
    fine_tune_type_support,
    leave_one_out_loss,
    new_type_adapter,
    prompt_representations,
    prototype_matrix,
    span_representation,
    support_prompts,
    tune_domain_adapter,
    type_loss,
)

ALL_SITES = ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2")


def test_two_class_probability():
    p = classify_span(torch.tensor([1.0, 0.0]), torch.tensor([[2.0, 0.0], [0.0, 3.0]]))
    assert float(p[0]) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-4)
    assert float(p[0]) == pytest.approx(0.7311, abs=1e-4)


def test_uniform_scores_give_log_c_loss():
    protos = torch.eye(5)[:4]
    probs = classify_span(torch.tensor([[0.0, 0, 0, 0, 1]]), protos)
    assert torch.allclose(probs, torch.full((1, 4), 0.25))
    assert float(type_loss(probs.log(), [2])) == pytest.approx(math.log(4), abs=1e-6)


def test_verbatim_sign_prefers_least_similar():
    protos = torch.tensor([[1.0, 0.0], [-1.0, 0.1]])
    v = torch.tensor([0.9, 0.05])
    assert int(classify_span(v, protos).argmax()) == 0
    assert int(classify_span(v, protos, verbatim_sign=True).argmax()) == 1


def test_type_loss_validates_gold():
    with pytest.raises(ValidationError):
        type_loss(torch.zeros(1, 3), [3])
    with pytest.raises(ValueError):
        span_representation(torch.zeros(4, 2), (2, 2))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(1, 12), st.integers(0, 10**6), st.booleans())
def test_prototypes_match_loop_oracle(C, S, seed, with_names):
    g = torch.Generator().manual_seed(seed)
    vecs = torch.randn(S, 3, generator=g, dtype=torch.float64)
    cls = torch.randint(0, C, (S,), generator=g)
    names = torch.randn(C, 3, generator=g, dtype=torch.float64) if with_names else None
    protos, counts = prototype_matrix(vecs, cls, C, names)
    for c in range(C):
        members = [vecs[i] for i in range(S) if cls[i] == c] + ([names[c]] if with_names else [])
        assert int(counts[c]) == len(members)
        expect = torch.stack(members).mean(0) if members else torch.zeros(3, dtype=torch.float64)
        assert torch.allclose(protos[c], expect, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10**6))
def test_argmax_matches_brute_force(C, seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(4, generator=g, dtype=torch.float64)
    protos = torch.randn(C, 4, generator=g, dtype=torch.float64)
    cos = [float(v @ p / (v.norm() * p.norm())) for p in protos]
    assert int(classify_span(v, protos).argmax()) == max(range(C), key=lambda c: cos[c])


@pytest.fixture
def episode(synth_corpus):
    return sample_episode(synth_corpus, 3, 2, 2, seed=1)


def _sub(catalog, ep):
    return catalog.subset(ep.classes)


def test_prototype_set_contents(episode, synth_catalog, tokenizer, templates, model):
    cat = _sub(synth_catalog, episode)
    prompts = support_prompts(episode.support, cat, templates[1], tokenizer)
    ps = build_prototypes(prompts, model, None, catalog=cat, domain_tag="d0")
    assert ps.labels == cat.labels and ps.layer == 2 and ps.domain_tag == "d0"
    counts = {lab: sum(sp.label == lab for s in episode.support for sp in spans_from_tags(s)) for lab in cat.labels}
    assert [p.support_count for p in ps.prototypes] == [counts[l] for l in cat.labels]
    names_only = build_prototypes(prompts, model, None, use_support_spans=False, catalog=cat)
    assert all(p.support_count == 0 and p.uses_name for p in names_only.prototypes)
    lonely = LabeledSentence(episode.support[0].tokens[:1], (f"B-{cat.labels[0]}",))
    one_class = support_prompts([lonely], cat, templates[1], tokenizer)
    with pytest.raises(ValidationError, match="no support span"):
        build_prototypes(one_class, model, None, use_type_names=False, catalog=cat)


def test_leave_one_out_matches_loop(episode, synth_catalog, tokenizer, templates, model):
    cat = _sub(synth_catalog, episode)
    prompts = support_prompts(episode.support, cat, templates[1], tokenizer)
    cfg = TypeTrainConfig()
    with torch.no_grad():
        fast = leave_one_out_loss(prompts, model, None, cfg)
        reps = prompt_representations(prompts, model, None)
    terms = []
    for i in range(reps.span_vecs.shape[0]):
        others = reps.span_prompt != reps.span_prompt[i]
        protos, counts = prototype_matrix(reps.span_vecs[others], reps.span_class[others], len(cat), reps.name_vecs)
        logits = class_scores(reps.span_vecs[i:i + 1], protos)[0]
        terms.append(-float(logits.log_softmax(-1)[reps.span_class[i]]))
    assert float(fast) == pytest.approx(statistics.fmean(terms), rel=1e-5)


def test_domain_tuning_reduces_type_loss(synth_corpus, synth_catalog, tokenizer, templates):
    model = tiny_model(len(tokenizer), hidden=32)
    eps = [sample_episode(synth_corpus, 3, 2, 2, seed=s) for s in range(8)]
    cfg = TypeTrainConfig(learning_rate=1e-2, epochs=6, lora=LoRAConfig(8, 8, 0.0, ALL_SITES))
    log = []
    ad = tune_domain_adapter(eps, model, tokenizer, templates[1], synth_catalog, cfg, domain_tag="d", log=log)
    first = statistics.fmean(r["L_type"] for r in log if r["epoch"] == 0)
    last = statistics.fmean(r["L_type"] for r in log if r["epoch"] == cfg.epochs - 1)
    assert last <= 0.7 * first
    assert ad.stage_tag == "type" and ad.domain_tag == "d"


def test_disabled_tuning_passes_adapter_through(episode, synth_catalog, tokenizer, templates, model):
    ad = new_type_adapter(model, LoRAConfig(2, 2), "x")
    cfg = TypeTrainConfig()
    assert tune_domain_adapter([episode], model, tokenizer, templates[1], synth_catalog, cfg, init=ad, enabled=False) is ad
    assert fine_tune_type_support(episode.support, model, ad, tokenizer, templates[1], _sub(synth_catalog, episode), cfg,
                                  enabled=False) is ad
    with pytest.raises(StageTagError):
        tune_domain_adapter([episode], model, tokenizer, templates[1], synth_catalog, cfg, init=new_span_adapter(model, LoRAConfig(2, 2)))


def test_composition_objective_endpoints(episode, synth_catalog, tokenizer, templates, model):
    cat = _sub(synth_catalog, episode)
    prompts = support_prompts(episode.support, cat, templates[1], tokenizer)
    ad = new_type_adapter(model, LoRAConfig(2, 2), "x")
    ad.factors = {k: (a, torch.randn_like(b)) for k, (a, b) in ad.factors.items()}
    loss_fn = composition_objective([ad], prompts, model, TypeTrainConfig())
    with torch.no_grad():
        assert loss_fn([1.0]) == pytest.approx(float(leave_one_out_loss(prompts, model, ad, TypeTrainConfig())), rel=1e-6)
        assert loss_fn([0.0]) == pytest.approx(float(leave_one_out_loss(prompts, model, None, TypeTrainConfig())), rel=1e-5)


def test_classify_candidates(episode, synth_catalog, tokenizer, templates, model):
    cat = _sub(synth_catalog, episode)
    prompts = support_prompts(episode.support, cat, templates[1], tokenizer)
    ps = build_prototypes(prompts, model, None, catalog=cat)
    s = episode.query[0]
    gold = spans_from_tags(s)
    out = classify_candidates(s, gold, model, None, ps, tokenizer, templates[1], cat)
    assert [(c.span.begin, c.span.end) for c in out] == [(g.begin, g.end) for g in gold]
    for c in out:
        assert c.span.label in cat.labels and c.log_prob <= 0
        assert sum(c.probs) == pytest.approx(1.0, abs=1e-5)
        assert c.log_prob == pytest.approx(math.log(max(c.probs)), abs=1e-5)
    assert classify_candidates(s, [], model, None, ps, tokenizer, templates[1], cat) == []
    with pytest.raises(StageTagError):
        classify_candidates(s, gold, model, new_span_adapter(model, LoRAConfig(2, 2)), ps, tokenizer, templates[1], cat)


def test_episode_loss_is_finite_and_differentiable(episode, synth_catalog, tokenizer, templates, model):
    cat = _sub(synth_catalog, episode)
    sup = support_prompts(episode.support, cat, templates[1], tokenizer)
    qry = support_prompts(episode.query, cat, templates[1], tokenizer)
    ad = new_type_adapter(model, LoRAConfig(2, 2), "x").requires_grad_(True)
    loss = episode_loss(sup, qry, model, ad, TypeTrainConfig())
    loss.backward()
    assert torch.isfinite(loss) and any(t.grad is not None and t.grad.abs().sum() > 0 for t in ad.parameters())


def test_config_needs_a_prototype_source():
    with pytest.raises(ValueError):
        TypeTrainConfig(use_type_names=False, use_support_spans=False)
