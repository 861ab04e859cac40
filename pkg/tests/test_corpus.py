import random
from collections import Counter

import pytest
from hypothesis import given, settings, strategies as st

from fsner.corpus import (
    EntitySpan,
    Episode,
    LabeledSentence,
    SyntheticSpec,
    TypeCatalog,
    convert_scheme,
    domain_vocabularies,
    generate_synthetic_corpus,
    label_counts,
    load_column_corpus,
    load_episodes,
    sample_episode,
    sample_support_set,
    save_episodes,
    spans_from_tags,
    tags_from_spans,
    write_column_corpus,
)
from fsner.errors import (
    CatalogError,
    CorpusParseError,
    SamplingError,
    SpecError,
    TagValidationError,
)

LABELS = ("PER", "LOC", "ORG")


@st.composite
def span_layouts(draw, labels=LABELS):
    """Random non-overlapping spans over a random length."""
    n = draw(st.integers(1, 25))
    cuts = sorted(draw(st.sets(st.integers(0, n), max_size=12)) | {0, n})
    spans = []
    for b, e in zip(cuts, cuts[1:]):
        if e > b and draw(st.booleans()):
            spans.append(EntitySpan(b, e, draw(st.sampled_from(labels))))
    return n, spans


@settings(max_examples=200, deadline=None)
@given(span_layouts())
def test_bio_round_trip(layout):
    n, spans = layout
    assert spans_from_tags(tags_from_spans(n, spans, "BIO"), "BIO") == spans


@settings(max_examples=200, deadline=None)
@given(span_layouts())
def test_io_round_trip_when_representable(layout):
    n, spans = layout
    clash = any(a.end == b.begin and a.label == b.label for a, b in zip(spans, spans[1:]))
    if clash:
        with pytest.raises(TagValidationError):
            tags_from_spans(n, spans, "IO")
    else:
        assert spans_from_tags(tags_from_spans(n, spans, "IO"), "IO") == spans


def test_strict_bio_rejects_orphan_inside_tag():
    with pytest.raises(TagValidationError, match="position 1"):
        spans_from_tags(["O", "I-PER"])
    assert spans_from_tags(["O", "I-PER"], lenient=True) == [EntitySpan(1, 2, "PER")]


def test_io_rejects_begin_tags():
    with pytest.raises(TagValidationError):
        spans_from_tags(["B-PER"], "IO")


def test_convert_scheme_bio_to_io():
    s = LabeledSentence(("a", "b", "c"), ("B-PER", "I-PER", "B-LOC"))
    assert convert_scheme(s, "IO").tags == ("I-PER", "I-PER", "I-LOC")


def test_sentence_validation():
    with pytest.raises(TagValidationError):
        LabeledSentence(("a", "b"), ("O",))
    with pytest.raises(TagValidationError):
        LabeledSentence((), ())


def test_catalog_bijection():
    with pytest.raises(CatalogError, match="duplicate type names"):
        TypeCatalog((("A", "x"), ("B", "x")))
    with pytest.raises(CatalogError):
        TypeCatalog((("O", "outside"),))
    cat = TypeCatalog.builtin("fewnerd")
    assert len(cat) == 66
    for lab in cat.labels:
        assert cat.label_of(cat.name_of(lab)) == lab


def test_column_corpus_round_trip(tmp_path, synth_corpus):
    p = tmp_path / "c.conll"
    write_column_corpus(synth_corpus[:10], p)
    back = load_column_corpus(p)
    assert [(s.tokens, s.tags) for s in back] == [(s.tokens, s.tags) for s in synth_corpus[:10]]


def test_column_corpus_errors(tmp_path):
    p = tmp_path / "bad.conll"
    p.write_text("word\tB-PER\nother\n")
    with pytest.raises(CorpusParseError, match=":2:"):
        load_column_corpus(p)
    p.write_text("word\tB-XYZ\n")
    with pytest.raises(CatalogError, match="B-XYZ"):
        load_column_corpus(p, TypeCatalog((("PER", "person"),)))


def test_episode_counts_and_relabelling(synth_corpus):
    ep = sample_episode(synth_corpus, 2, 2, 2, seed=5)
    assert len(ep.classes) == 2
    support = label_counts(ep.support)
    query = label_counts(ep.query)
    assert set(support) <= set(ep.classes) and set(query) <= set(ep.classes)
    assert all(support[c] >= 2 and query[c] >= 2 for c in ep.classes)
    assert not {s.source_id for s in ep.support} & {s.source_id for s in ep.query}


def test_episode_sampling_is_seeded(synth_corpus, tmp_path):
    a = sample_episode(synth_corpus, 2, 2, 2, seed=9)
    b = sample_episode(synth_corpus, 2, 2, 2, seed=9)
    assert a.to_record() == b.to_record()
    save_episodes([a], tmp_path / "e.jsonl")
    assert load_episodes(tmp_path / "e.jsonl")[0].to_record() == a.to_record()


def test_episode_range_bound_respected(synth_corpus):
    ep = sample_episode(synth_corpus, 3, (1, 4), 1, seed=2)
    assert all(1 <= ep.support_counts[c] <= 4 for c in ep.classes)


def test_sampling_errors(synth_corpus):
    with pytest.raises(SamplingError):
        sample_episode(synth_corpus, 10, 1, 1, seed=0)
    with pytest.raises(SamplingError, match="PER"):
        sample_support_set([LabeledSentence(("a",), ("B-PER",))], 2, seed=0)


def _brute_force_minimal(corpus, k):
    counts = [Counter(sp.label for sp in spans_from_tags(s)) for s in corpus]
    labels = sorted({l for c in counts for l in c})

    def ok(ids):
        tot = Counter()
        for i in ids:
            tot.update(counts[i])
        return all(tot[l] >= k for l in labels)

    return ok, counts


@pytest.mark.parametrize("seed", range(5))
def test_support_set_covers_and_is_minimal(synth_corpus, seed):
    support = sample_support_set(synth_corpus, 3, seed)
    ids = [synth_corpus.index(s) for s in support]
    ok, _ = _brute_force_minimal(synth_corpus, 3)
    assert ok(ids)
    for i in ids:
        assert not ok([j for j in ids if j != i])
    assert sample_support_set(synth_corpus, 3, seed) == support


def test_synthetic_corpus_is_separable(synth_spec):
    corpus = generate_synthetic_corpus(synth_spec, seed=1)
    owner = {}
    for s in corpus:
        for w, t in zip(s.tokens, s.tags):
            lab = t[2:] if t != "O" else "O"
            assert owner.setdefault(w, lab) == lab
            spans_from_tags(s)
    assert generate_synthetic_corpus(synth_spec, seed=1) == corpus


def test_synthetic_density_echo():
    dense = generate_synthetic_corpus(SyntheticSpec(n_sentences=300, entity_density=0.6), seed=0)
    sparse = generate_synthetic_corpus(SyntheticSpec(n_sentences=300, entity_density=0.2), seed=0)
    frac = lambda c: sum(t != "O" for s in c for t in s.tags) / sum(len(s) for s in c)
    assert abs(frac(dense) - 0.6) < 0.05 and abs(frac(sparse) - 0.2) < 0.05


def test_synthetic_spec_errors():
    with pytest.raises(SpecError):
        generate_synthetic_corpus(SyntheticSpec(n_classes=1), seed=0)
    with pytest.raises(SpecError):
        generate_synthetic_corpus(SyntheticSpec(entity_density=1.5), seed=0)
    with pytest.raises(SpecError, match="both"):
        generate_synthetic_corpus(SyntheticSpec(entity_vocab={"A": ["x", "y"], "B": ["y", "z"]}), seed=0)


def test_domain_vocabularies_share_pool_and_roles():
    spec = SyntheticSpec(n_classes=3, entity_vocab_size=4)
    vocabs, filler = domain_vocabularies(spec, 3, seed=0)
    pools = [sorted(w for ws in v.values() for w in ws) for v in vocabs]
    assert pools[0] == pools[1] == pools[2]
    heads = [{w for ws in v.values() for w in ws[:2]} for v in vocabs]
    assert heads[0] == heads[1] == heads[2]
    assert vocabs[0] != vocabs[1]
    assert not set(filler) & set(pools[0])
