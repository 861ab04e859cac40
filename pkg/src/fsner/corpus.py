"""Column-format corpora, tag/span conversion, episode sampling and synthetic data."""
from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import catalogs
from .errors import CatalogError, CorpusParseError, SamplingError, SpecError, TagValidationError

NON_ENTITY = "O"
SCHEMES = ("BIO", "IO")


@dataclass(frozen=True)
class LabeledSentence:
    tokens: tuple[str, ...]
    tags: tuple[str, ...]
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "tags", tuple(self.tags))
        if len(self.tokens) == 0:
            raise TagValidationError("sentence must contain at least one token")
        if len(self.tokens) != len(self.tags):
            raise TagValidationError(
                f"{self.source_id or 'sentence'}: {len(self.tokens)} tokens but {len(self.tags)} tags"
            )

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True, order=True)
class EntitySpan:
    """Token span ``[begin, end)`` carrying the raw dataset label."""

    begin: int
    end: int
    label: str

    def __post_init__(self):
        if not 0 <= self.begin < self.end:
            raise TagValidationError(f"invalid span bounds ({self.begin}, {self.end})")


@dataclass(frozen=True)
class TypeCatalog:
    """Ordered bijection between raw labels and natural-language type names."""

    entries: tuple[tuple[str, str], ...]
    non_entity_label: str = NON_ENTITY

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(r), str(n)) for r, n in self.entries))
        raws = [r for r, _ in self.entries]
        names = [n for _, n in self.entries]
        if len(set(raws)) != len(raws):
            dup = [r for r, c in Counter(raws).items() if c > 1]
            raise CatalogError(f"duplicate raw labels: {dup}")
        if len(set(names)) != len(names):
            dup = [n for n, c in Counter(names).items() if c > 1]
            raise CatalogError(f"duplicate type names: {dup}")
        if self.non_entity_label in raws:
            raise CatalogError(f"non-entity label {self.non_entity_label!r} listed as an entity type")

    @classmethod
    def builtin(cls, name: str) -> "TypeCatalog":
        try:
            return cls(catalogs.BUILTIN[name])
        except KeyError:
            raise CatalogError(f"unknown catalog {name!r}; known: {sorted(catalogs.BUILTIN)}") from None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(r for r, _ in self.entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(n for _, n in self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, label: str) -> bool:
        return label in self.labels

    def name_of(self, label: str) -> str:
        for raw, name in self.entries:
            if raw == label:
                return name
        raise CatalogError(f"label {label!r} not in catalog")

    def label_of(self, name: str) -> str:
        for raw, n in self.entries:
            if n == name:
                return raw
        raise CatalogError(f"type name {name!r} not in catalog")

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise CatalogError(f"label {label!r} not in catalog") from None

    def subset(self, labels: Iterable[str]) -> "TypeCatalog":
        """Catalog restricted to ``labels``, in the given order."""
        return TypeCatalog(tuple((l, self.name_of(l)) for l in labels), self.non_entity_label)

    def to_dict(self) -> dict:
        return {"entries": [list(e) for e in self.entries], "non_entity_label": self.non_entity_label}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TypeCatalog":
        return cls(tuple(tuple(e) for e in d["entries"]), d.get("non_entity_label", NON_ENTITY))


@dataclass
class Episode:
    support: list[LabeledSentence]
    query: list[LabeledSentence]
    classes: tuple[str, ...]
    n_way: int
    k_shot: int | tuple[int, int]
    query_classes: int
    query_shots: int
    seed: int
    support_counts: dict[str, int] = field(default_factory=dict)
    query_counts: dict[str, int] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "seed": self.seed,
            "n_way": self.n_way,
            "k_shot": list(self.k_shot) if isinstance(self.k_shot, tuple) else self.k_shot,
            "query_classes": self.query_classes,
            "query_shots": self.query_shots,
            "classes": list(self.classes),
            "support": [_sentence_record(s) for s in self.support],
            "query": [_sentence_record(s) for s in self.query],
            "support_counts": self.support_counts,
            "query_counts": self.query_counts,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "Episode":
        k = rec["k_shot"]
        return cls(
            support=[_sentence_from_record(r) for r in rec["support"]],
            query=[_sentence_from_record(r) for r in rec["query"]],
            classes=tuple(rec["classes"]),
            n_way=rec["n_way"],
            k_shot=tuple(k) if isinstance(k, list) else k,
            query_classes=rec["query_classes"],
            query_shots=rec["query_shots"],
            seed=rec["seed"],
            support_counts=dict(rec.get("support_counts", {})),
            query_counts=dict(rec.get("query_counts", {})),
        )


def _sentence_record(s: LabeledSentence) -> dict:
    return {"tokens": list(s.tokens), "tags": list(s.tags), "source_id": s.source_id}


def _sentence_from_record(r: Mapping) -> LabeledSentence:
    return LabeledSentence(tuple(r["tokens"]), tuple(r["tags"]), r.get("source_id", ""))


def save_episodes(episodes: Sequence[Episode], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ep in episodes:
            f.write(json.dumps(ep.to_record(), ensure_ascii=False) + "\n")


def load_episodes(path: str | Path) -> list[Episode]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(Episode.from_record(json.loads(line)))
    return out


# ---------------------------------------------------------------------------
# column files


def _split_tag(tag: str, non_entity: str = NON_ENTITY) -> tuple[str, str | None]:
    if tag == non_entity:
        return non_entity, None
    prefix, sep, label = tag.partition("-")
    if not sep or prefix not in ("B", "I") or not label:
        raise TagValidationError(f"malformed tag {tag!r}")
    return prefix, label


def load_column_corpus(path: str | Path, catalog: TypeCatalog | None = None) -> list[LabeledSentence]:
    """Read ``token<TAB>tag`` lines; blank lines separate sentences."""
    path = Path(path)
    sentences: list[LabeledSentence] = []
    tokens: list[str] = []
    tags: list[str] = []
    start_line = 1

    def flush():
        nonlocal tokens, tags
        if tokens:
            sentences.append(LabeledSentence(tuple(tokens), tuple(tags), f"{path.name}:{start_line}"))
        tokens, tags = [], []

    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                flush()
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise CorpusParseError(f"{path}:{lineno}: expected 'token<TAB>tag', got {line!r}")
            token, tag = parts
            try:
                _, label = _split_tag(tag, catalog.non_entity_label if catalog else NON_ENTITY)
            except TagValidationError as exc:
                raise CorpusParseError(f"{path}:{lineno}: {exc}") from None
            if catalog is not None and label is not None and label not in catalog:
                raise CatalogError(f"{path}:{lineno}: unknown tag {tag!r} (label {label!r} not in catalog)")
            if not tokens:
                start_line = lineno
            tokens.append(token)
            tags.append(tag)
    flush()
    return sentences


def write_column_corpus(sentences: Iterable[LabeledSentence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in sentences:
            for tok, tag in zip(s.tokens, s.tags):
                f.write(f"{tok}\t{tag}\n")
            f.write("\n")


# ---------------------------------------------------------------------------
# tags <-> spans


def spans_from_tags(
    sentence: LabeledSentence | Sequence[str],
    scheme: str = "BIO",
    lenient: bool = False,
) -> list[EntitySpan]:
    """Convert a tag sequence to spans.

    Under strict BIO an ``I-X`` that does not continue an open ``X`` span is an
    error; ``lenient=True`` repairs it to ``B-X``. Under IO every maximal run
    of the same label is one span.
    """
    if scheme not in SCHEMES:
        raise ValueError(f"unknown tag scheme {scheme!r}")
    tags = sentence.tags if isinstance(sentence, LabeledSentence) else tuple(sentence)
    spans: list[EntitySpan] = []
    start: int | None = None
    cur: str | None = None
    for i, tag in enumerate(tags):
        prefix, label = _split_tag(tag)
        if label is None:
            if cur is not None:
                spans.append(EntitySpan(start, i, cur))
            start, cur = None, None
            continue
        if scheme == "IO" and prefix == "B":
            raise TagValidationError(f"B- tag {tag!r} at position {i} under IO scheme")
        continues = prefix == "I" and cur == label
        if scheme == "BIO" and prefix == "I" and not continues and not lenient:
            raise TagValidationError(f"I- tag {tag!r} at position {i} does not continue a {label} span")
        if not continues:
            if cur is not None:
                spans.append(EntitySpan(start, i, cur))
            start, cur = i, label
    if cur is not None:
        spans.append(EntitySpan(start, len(tags), cur))
    return spans


def tags_from_spans(length: int, spans: Iterable[EntitySpan], scheme: str = "BIO") -> list[str]:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown tag scheme {scheme!r}")
    tags = [NON_ENTITY] * length
    ordered = sorted(spans)
    for prev, span in zip([None] + ordered[:-1], ordered):
        if span.end > length:
            raise TagValidationError(f"span {span} exceeds sentence length {length}")
        if prev is not None and span.begin < prev.end:
            raise TagValidationError(f"overlapping spans {prev} and {span}")
        if scheme == "IO" and prev is not None and prev.end == span.begin and prev.label == span.label:
            raise TagValidationError(f"adjacent same-label spans {prev} and {span} are not representable in IO")
        for i in range(span.begin, span.end):
            first = i == span.begin and scheme == "BIO"
            tags[i] = f"{'B' if first else 'I'}-{span.label}"
    return tags


def convert_scheme(sentence: LabeledSentence, scheme: str, source_scheme: str = "BIO") -> LabeledSentence:
    spans = spans_from_tags(sentence, source_scheme)
    return LabeledSentence(sentence.tokens, tuple(tags_from_spans(len(sentence), spans, scheme)), sentence.source_id)


def relabel(sentence: LabeledSentence, mapping: Mapping[str, str | None]) -> LabeledSentence:
    """Rename span labels; labels mapped to ``None`` (or missing) become non-entities."""
    spans = []
    for sp in spans_from_tags(sentence):
        new = mapping.get(sp.label)
        if new is not None:
            spans.append(EntitySpan(sp.begin, sp.end, new))
    return LabeledSentence(sentence.tokens, tuple(tags_from_spans(len(sentence), spans)), sentence.source_id)


def label_counts(sentences: Iterable[LabeledSentence]) -> Counter:
    counts: Counter = Counter()
    for s in sentences:
        counts.update(sp.label for sp in spans_from_tags(s))
    return counts


# ---------------------------------------------------------------------------
# sampling


def _k_bounds(k_shot: int | tuple[int, int]) -> tuple[int, int | None]:
    if isinstance(k_shot, tuple):
        lo, hi = k_shot
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid shot range {k_shot}")
        return lo, hi
    if k_shot < 1:
        raise ValueError("k_shot must be >= 1")
    return k_shot, None


def _greedy_fill(
    candidates: list[int],
    sentence_counts: list[Counter],
    classes: Sequence[str],
    k_min: int,
    k_max: int | None,
    exclude: set[int],
) -> tuple[list[int], Counter]:
    chosen: list[int] = []
    counts: Counter = Counter({c: 0 for c in classes})
    for idx in candidates:
        if all(counts[c] >= k_min for c in classes):
            break
        if idx in exclude:
            continue
        sc = sentence_counts[idx]
        if not any(sc[c] > 0 and counts[c] < k_min for c in classes):
            continue
        if k_max is not None and any(counts[c] + sc[c] > k_max for c in classes):
            continue
        chosen.append(idx)
        for c in classes:
            counts[c] += sc[c]
    return chosen, counts


def sample_episode(
    corpus: Sequence[LabeledSentence],
    n_way: int,
    k_shot: int | tuple[int, int],
    query_shots: int,
    seed: int,
) -> Episode:
    """Greedy N-way K-shot episode sampler.

    Classes are drawn uniformly; sentences are visited in a seeded random
    order and kept whenever they contribute an instance to a class still
    below its bound. Entities of classes outside the episode are relabelled
    as non-entities in the returned copies. ``k_shot`` may be a
    ``(k_min, k_max)`` range, in which case sentences that would push any
    class above ``k_max`` are skipped.
    """
    if n_way < 1 or query_shots < 1:
        raise ValueError("n_way and query_shots must be >= 1")
    k_min, k_max = _k_bounds(k_shot)
    rng = random.Random(seed)
    sentence_counts = [Counter(sp.label for sp in spans_from_tags(s)) for s in corpus]
    totals: Counter = Counter()
    for sc in sentence_counts:
        totals.update(sc)
    all_classes = sorted(totals)
    if len(all_classes) < n_way:
        raise SamplingError(f"corpus has {len(all_classes)} classes, need {n_way}")
    classes = tuple(sorted(rng.sample(all_classes, n_way)))
    for c in classes:
        if totals[c] < k_min + query_shots:
            raise SamplingError(f"class {c!r} has {totals[c]} instances, needs {k_min + query_shots}")

    order = list(range(len(corpus)))
    rng.shuffle(order)
    support_idx, support_counts = _greedy_fill(order, sentence_counts, classes, k_min, k_max, set())
    for c in classes:
        if support_counts[c] < k_min:
            raise SamplingError(f"support: class {c!r} reached {support_counts[c]} < {k_min} instances")
    query_idx, query_counts = _greedy_fill(order, sentence_counts, classes, query_shots, None, set(support_idx))
    for c in classes:
        if query_counts[c] < query_shots:
            raise SamplingError(f"query: class {c!r} reached {query_counts[c]} < {query_shots} instances")

    keep = {c: c for c in classes}
    return Episode(
        support=[relabel(corpus[i], keep) for i in support_idx],
        query=[relabel(corpus[i], keep) for i in query_idx],
        classes=classes,
        n_way=n_way,
        k_shot=k_shot,
        query_classes=n_way,
        query_shots=query_shots,
        seed=seed,
        support_counts=dict(support_counts),
        query_counts=dict(query_counts),
    )


def sample_support_set(
    test_corpus: Sequence[LabeledSentence],
    k_shot: int,
    seed: int,
    labels: Sequence[str] | None = None,
) -> list[LabeledSentence]:
    """Greedy set-cover support sampler: at least ``k_shot`` instances per label.

    Each step takes the sentence that reduces the remaining per-label deficit
    the most (ties broken by a seeded shuffle); redundant picks are then
    pruned so the result is minimal with respect to single removals.
    """
    rng = random.Random(seed)
    sentence_counts = [Counter(sp.label for sp in spans_from_tags(s)) for s in test_corpus]
    totals: Counter = Counter()
    for sc in sentence_counts:
        totals.update(sc)
    labels = sorted(totals) if labels is None else list(labels)
    for lab in labels:
        if totals[lab] < k_shot:
            raise SamplingError(f"label {lab!r} has {totals[lab]} instances, needs {k_shot}")

    order = list(range(len(test_corpus)))
    rng.shuffle(order)
    need = {lab: k_shot for lab in labels}
    chosen: list[int] = []
    used: set[int] = set()
    while any(v > 0 for v in need.values()):
        best, best_gain = None, 0
        for idx in order:
            if idx in used:
                continue
            gain = sum(min(sentence_counts[idx][lab], need[lab]) for lab in labels if need[lab] > 0)
            if gain > best_gain:
                best, best_gain = idx, gain
        assert best is not None  # guaranteed by the totals check
        chosen.append(best)
        used.add(best)
        for lab in labels:
            need[lab] = max(0, need[lab] - sentence_counts[best][lab])

    def satisfied(ids: list[int]) -> bool:
        c: Counter = Counter()
        for i in ids:
            c.update(sentence_counts[i])
        return all(c[lab] >= k_shot for lab in labels)

    for idx in reversed(list(chosen)):
        trial = [i for i in chosen if i != idx]
        if satisfied(trial):
            chosen = trial
    return [test_corpus[i] for i in chosen]


# ---------------------------------------------------------------------------
# synthetic corpora

_SYLLABLES = (
    "ba be bi bo bu da de di do du fa fe fi fo fu ga ge gi go gu ka ke ki ko ku "
    "la le li lo lu ma me mi mo mu na ne ni no nu pa pe pi po pu ra re ri ro ru "
    "sa se si so su ta te ti to tu va ve vi vo vu za ze zi zo zu"
).split()

SYNTHETIC_TYPES = (
    ("PER", "person"),
    ("LOC", "location"),
    ("ORG", "organization"),
    ("DATE", "date"),
    ("PROD", "product"),
    ("EVT", "event"),
    ("DIS", "disease"),
    ("AWD", "award"),
    ("LANG", "language"),
    ("ANIM", "animal"),
)


@dataclass(frozen=True)
class SyntheticSpec:
    """Grammar for a separable synthetic NER corpus.

    Each class owns a vocabulary split into head words (always first token of
    an entity) and tail words (continuations), so both entity identity and
    boundaries are decidable from the surface tokens alone.
    """

    n_classes: int = 4
    n_sentences: int = 200
    entity_vocab_size: int = 12
    filler_vocab_size: int = 40
    entity_density: float = 0.3
    length_range: tuple[int, int] = (6, 12)
    entity_length_range: tuple[int, int] = (1, 3)
    entity_vocab: Mapping[str, Sequence[str]] | None = None
    filler_vocab: Sequence[str] | None = None
    type_names: Sequence[tuple[str, str]] | None = None

    def catalog(self) -> TypeCatalog:
        if self.type_names is not None:
            return TypeCatalog(tuple(self.type_names))
        if self.entity_vocab is not None:
            return TypeCatalog(tuple((lab, lab.lower()) for lab in self.entity_vocab))
        if self.n_classes > len(SYNTHETIC_TYPES):
            return TypeCatalog(tuple((f"T{i}", f"type {i}") for i in range(self.n_classes)))
        return TypeCatalog(SYNTHETIC_TYPES[: self.n_classes])


def _pseudo_words(rng: random.Random, n: int, syllables: int, taken: set[str]) -> list[str]:
    out: list[str] = []
    while len(out) < n:
        w = "".join(rng.choice(_SYLLABLES) for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def synthetic_vocab(spec: SyntheticSpec, seed: int) -> tuple[dict[str, list[str]], list[str]]:
    """Resolve (or generate) the per-class and filler vocabularies, checking disjointness."""
    labels = spec.catalog().labels
    if spec.entity_vocab is not None:
        ent = {lab: list(spec.entity_vocab[lab]) for lab in labels}
    else:
        rng = random.Random(f"vocab:{seed}")
        taken: set[str] = set()
        ent = {lab: _pseudo_words(rng, spec.entity_vocab_size, 3, taken) for lab in labels}
    if spec.filler_vocab is not None:
        filler = list(spec.filler_vocab)
    else:
        rng = random.Random(f"filler:{seed}")
        taken = {w for ws in ent.values() for w in ws}
        filler = _pseudo_words(rng, spec.filler_vocab_size, 2, taken)

    seen: dict[str, str] = {}
    for lab, words in list(ent.items()) + [("<filler>", filler)]:
        if len(words) < (2 if lab != "<filler>" else 1):
            raise SpecError(f"vocabulary for {lab} too small")
        for w in words:
            if w in seen and seen[w] != lab:
                raise SpecError(f"word {w!r} appears in both {seen[w]} and {lab} vocabularies")
            seen[w] = lab
    return ent, filler


def generate_synthetic_corpus(spec: SyntheticSpec, seed: int) -> list[LabeledSentence]:
    if spec.n_classes < 2 and spec.entity_vocab is None:
        raise SpecError("need at least 2 classes")
    if not 0.0 <= spec.entity_density <= 1.0:
        raise SpecError("entity_density must be in [0, 1]")
    lo, hi = spec.length_range
    elo, ehi = spec.entity_length_range
    if not (1 <= lo <= hi and 1 <= elo <= ehi):
        raise SpecError("invalid length ranges")
    ent_vocab, filler = synthetic_vocab(spec, seed)
    if len(ent_vocab) < 2:
        raise SpecError("need at least 2 classes")
    labels = list(ent_vocab)
    heads = {lab: ws[: math.ceil(len(ws) / 2)] for lab, ws in ent_vocab.items()}
    tails = {lab: ws[math.ceil(len(ws) / 2):] for lab, ws in ent_vocab.items()}

    rng = random.Random(seed)
    out = []
    for n in range(spec.n_sentences):
        length = rng.randint(lo, hi)
        n_ent = min(length, math.floor(spec.entity_density * length + rng.random()))
        blocks: list[list[tuple[str, str]]] = []
        remaining = n_ent
        while remaining > 0:
            size = min(rng.randint(elo, ehi), remaining)
            lab = rng.choice(labels)
            words = [rng.choice(heads[lab])] + [rng.choice(tails[lab]) for _ in range(size - 1)]
            blocks.append([(w, ("B-" if i == 0 else "I-") + lab) for i, w in enumerate(words)])
            remaining -= size
        items: list[list[tuple[str, str]]] = blocks + [[(rng.choice(filler), NON_ENTITY)] for _ in range(length - n_ent)]
        rng.shuffle(items)
        flat = [pair for item in items for pair in item]
        out.append(LabeledSentence(tuple(w for w, _ in flat), tuple(t for _, t in flat), f"synth-{seed}-{n}"))
    return out


def domain_vocabularies(spec: SyntheticSpec, n_domains: int, seed: int) -> tuple[list[dict[str, list[str]]], list[str]]:
    """Class vocabularies for ``n_domains`` domains that share one word pool.

    Head and tail words keep their role in every domain, but each domain
    deals them out to the classes in its own random order, so the same word
    can mean a different class in another domain.
    """
    labels = spec.catalog().labels
    n_heads = math.ceil(spec.entity_vocab_size / 2)
    n_tails = spec.entity_vocab_size - n_heads
    rng = random.Random(f"pool:{seed}")
    taken: set[str] = set()
    heads = _pseudo_words(rng, n_heads * len(labels), 3, taken)
    tails = _pseudo_words(rng, n_tails * len(labels), 3, taken)
    filler = _pseudo_words(random.Random(f"filler:{seed}"), spec.filler_vocab_size, 2, taken)
    out = []
    for d in range(n_domains):
        drng = random.Random(f"domain:{seed}:{d}")
        h, t = list(heads), list(tails)
        if d:
            drng.shuffle(h)
            drng.shuffle(t)
        out.append({
            lab: h[i * n_heads:(i + 1) * n_heads] + t[i * n_tails:(i + 1) * n_tails]
            for i, lab in enumerate(labels)
        })
    return out, filler
