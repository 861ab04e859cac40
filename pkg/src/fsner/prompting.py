"""Prompt rendering with index tracking, contrastive index tuples and the output grammar.

Output grammar (bit-exact)::

    output := "<im_start>" body "<im_end>"
    body   := ""                                  # no items
            | item                                # exactly one item, unwrapped
            | "<<<" item ">>>" (" <<<" item ">>>")+   # two or more, single-space separated
    item   := span | span " | " type_name

Items are non-empty, carry no leading/trailing whitespace and contain none
of the four markers.
"""
from __future__ import annotations

import re
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

from .corpus import EntitySpan, LabeledSentence, TypeCatalog, spans_from_tags
from .errors import AlignmentError, CatalogError, PromptOverflowError
from .tokenizer import IM_END, IM_START, ITEM_CLOSE, ITEM_OPEN, MARKERS, Tokenizer

DEFAULT_CUTOFF = 256
PAIR_SEP = " | "
ITEM_SEP = " "
SCHEMA_SEP = " ; "


@dataclass(frozen=True)
class Template:
    """Plain-text template with ``{schema}``, ``{sentence}`` and (type stage) ``{candidates}``.

    The answer region starts right after the rendered text.
    """

    text: str
    name: str = "custom"

    def __post_init__(self):
        fields = {f for _, f, _, _ in string.Formatter().parse(self.text) if f is not None}
        unknown = fields - {"schema", "sentence", "candidates"}
        if unknown:
            raise ValueError(f"unknown template placeholders: {sorted(unknown)}")
        if "sentence" not in fields:
            raise ValueError("template needs a {sentence} placeholder")

    @classmethod
    def builtin(cls, name: str) -> "Template":
        text = resources.files("fsner").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
        return cls(text, name)

    @classmethod
    def from_file(cls, path: str | Path) -> "Template":
        return cls(Path(path).read_text(encoding="utf-8"), Path(path).stem)

    def segments(self) -> list[tuple[str, str | None]]:
        return [(lit, f) for lit, f, _, _ in string.Formatter().parse(self.text)]


@dataclass
class RenderedPrompt:
    token_ids: list[int]
    prompt_mask: list[bool]
    span_index_map: list[tuple[int, int]]
    type_index_map: list[tuple[int, int]]
    target_ids: list[int]
    type_names: tuple[str, ...] = ()
    span_type: list[int] = field(default_factory=list)
    spans: list[EntitySpan] = field(default_factory=list)
    sentence_offsets: list[tuple[int, int]] = field(default_factory=list)

    @property
    def prompt_len(self) -> int:
        return len(self.token_ids) - len(self.target_ids)

    @property
    def prompt_ids(self) -> list[int]:
        return self.token_ids[: self.prompt_len]

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class ContrastiveIndices:
    pos: list[tuple[int, int]]
    neg: list[tuple[int, int, int, int]]
    neg_valid_mask: list[tuple[bool, bool, bool, bool]]
    type_anchor: list[tuple[int, int]]


@dataclass
class StructuredOutput:
    items: list = field(default_factory=list)
    raw: str = ""
    malformed: bool = False
    dropped: int = 0
    diagnostics: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# output grammar


def _item_text(item) -> str:
    if isinstance(item, tuple):
        span, type_name = item
        return f"{span}{PAIR_SEP}{type_name}"
    return item


def serialize_output(items) -> str:
    if isinstance(items, StructuredOutput):
        items = items.items
    texts = [_item_text(it) for it in items]
    if len(texts) == 1:
        return IM_START + texts[0] + IM_END
    return IM_START + ITEM_SEP.join(ITEM_OPEN + t + ITEM_CLOSE for t in texts) + IM_END


_BLOCK_RE = re.compile(re.escape(ITEM_OPEN) + "(.*?)" + re.escape(ITEM_CLOSE), re.S)


def _clean_item(text: str, pairs: bool):
    if not text or text != text.strip() or any(m in text for m in MARKERS):
        return None
    if not pairs:
        return text
    span, sep, type_name = text.rpartition(PAIR_SEP)
    if not sep or not span.strip() or not type_name.strip():
        return None
    return (span.strip(), type_name.strip())


def parse_generation(raw: str, pairs: bool = False) -> StructuredOutput:
    """Parse generated text; never raises.

    Items that do not fit the grammar are dropped and counted; a missing
    start marker yields an empty, malformed result; a missing end marker
    (truncated generation) keeps every complete item and flags the output.
    """
    out = StructuredOutput(raw=raw)
    start = raw.find(IM_START)
    if start < 0:
        out.malformed = True
        out.diagnostics.append("missing start marker")
        return out
    body = raw[start + len(IM_START):]
    end = body.find(IM_END)
    if end < 0:
        out.malformed = True
        out.diagnostics.append("missing end marker (truncated)")
    else:
        if body[end + len(IM_END):].strip():
            out.diagnostics.append("trailing text after end marker ignored")
        body = body[:end]

    if ITEM_OPEN not in body and ITEM_CLOSE not in body:
        if end < 0:
            # unterminated single item: cannot tell whether it is complete
            if body.strip():
                out.dropped += 1
            return out
        if body:
            item = _clean_item(body, pairs)
            if item is None:
                out.dropped += 1
                out.diagnostics.append(f"bad item {body!r}")
            else:
                out.items.append(item)
        return out

    pos = 0
    for m in _BLOCK_RE.finditer(body):
        gap = body[pos:m.start()]
        expected_gap = "" if pos == 0 else ITEM_SEP
        if gap != expected_gap:
            out.diagnostics.append(f"unexpected text {gap!r} between items")
            if gap.strip():
                out.dropped += 1
        item = _clean_item(m.group(1), pairs)
        if item is None:
            out.dropped += 1
            out.diagnostics.append(f"bad item {m.group(1)!r}")
        else:
            out.items.append(item)
        pos = m.end()
    rest = body[pos:]
    if rest.strip():
        out.dropped += 1
        if ITEM_OPEN in rest:
            out.diagnostics.append("unbalanced <<< at end of output")
        else:
            out.diagnostics.append(f"unexpected trailing text {rest!r}")
        out.malformed = True
    return out


# ---------------------------------------------------------------------------
# rendering


def _schema_tokens(names: Sequence[str], tokenizer: Tokenizer) -> tuple[list[int], list[tuple[int, int]]]:
    ids: list[int] = []
    spans = []
    sep = tokenizer.encode(SCHEMA_SEP)
    for i, name in enumerate(names):
        if i:
            ids.extend(sep)
        begin = len(ids)
        ids.extend(tokenizer.encode(name))
        spans.append((begin, len(ids)))
    return ids, spans


def _align(span: EntitySpan, offsets: list[tuple[int, int]]) -> tuple[int, int]:
    """First subword of the first word to one past the last subword of the last word."""
    b, e = offsets[span.begin][0], offsets[span.end - 1][1]
    if span.begin > 0 and offsets[span.begin - 1][1] > b:
        raise AlignmentError(f"span {span} begins inside a token merged with the preceding word")
    if span.end < len(offsets) and offsets[span.end][0] < e:
        raise AlignmentError(f"span {span} ends inside a token merged with the following word")
    return b, e


def _render(
    sentence: LabeledSentence,
    spans: Sequence[EntitySpan],
    type_names: Sequence[str],
    span_type: list[int],
    candidates_text: str,
    target: str | None,
    template: Template,
    tokenizer: Tokenizer,
    cutoff: int,
) -> RenderedPrompt:
    ids: list[int] = []
    type_index_map: list[tuple[int, int]] = []
    sent_offsets: list[tuple[int, int]] = []
    for literal, name in template.segments():
        if literal:
            ids.extend(tokenizer.encode(literal))
        if name == "schema":
            sub, pos = _schema_tokens(type_names, tokenizer)
            type_index_map = [(len(ids) + b, len(ids) + e) for b, e in pos]
            ids.extend(sub)
        elif name == "sentence":
            sub, offs = tokenizer.encode_words(sentence.tokens)
            sent_offsets = [(len(ids) + b, len(ids) + e) for b, e in offs]
            ids.extend(sub)
        elif name == "candidates":
            ids.extend(tokenizer.encode(candidates_text))
    span_index_map = [_align(sp, sent_offsets) for sp in spans]
    target_ids = tokenizer.encode(target) if target is not None else []
    total = len(ids) + len(target_ids)
    if total > cutoff:
        raise PromptOverflowError(f"rendered prompt has {total} tokens > cutoff {cutoff} ({sentence.source_id})")
    return RenderedPrompt(
        token_ids=ids + target_ids,
        prompt_mask=[True] * len(ids) + [False] * len(target_ids),
        span_index_map=span_index_map,
        type_index_map=type_index_map,
        target_ids=target_ids,
        type_names=tuple(type_names),
        span_type=span_type,
        spans=list(spans),
        sentence_offsets=sent_offsets,
    )


def _surface(sentence: LabeledSentence, span: EntitySpan) -> str:
    return " ".join(sentence.tokens[span.begin:span.end])


def _typed_spans(sentence, spans, catalog):
    if spans is None:
        spans = spans_from_tags(sentence)
    span_type = []
    for sp in spans:
        if sp.label not in catalog:
            raise CatalogError(f"span label {sp.label!r} not in prompt schema")
        span_type.append(catalog.index(sp.label))
    return list(spans), span_type


def render_span_prompt(
    sentence: LabeledSentence,
    template: Template,
    tokenizer: Tokenizer,
    catalog: TypeCatalog,
    spans: Sequence[EntitySpan] | None = None,
    cutoff: int = DEFAULT_CUTOFF,
    with_target: bool = True,
) -> RenderedPrompt:
    """Span-detection prompt; gold spans default to the sentence tags."""
    spans, span_type = _typed_spans(sentence, spans, catalog)
    target = serialize_output([_surface(sentence, sp) for sp in spans]) if with_target else None
    return _render(sentence, spans, catalog.names, span_type, "", target, template, tokenizer, cutoff)


def render_type_prompt(
    sentence: LabeledSentence,
    candidate_spans: Sequence[EntitySpan],
    catalog: TypeCatalog,
    template: Template,
    tokenizer: Tokenizer,
    cutoff: int = DEFAULT_CUTOFF,
    with_target: bool = True,
) -> RenderedPrompt:
    """Type-classification prompt; candidate spans may be unlabelled (``label=""``)."""
    if len(catalog) == 0:
        raise CatalogError("type prompt needs a non-empty catalog")
    for sp in candidate_spans:
        if sp.end > len(sentence):
            raise AlignmentError(f"candidate {sp} outside sentence of length {len(sentence)}")
    typed = all(sp.label in catalog for sp in candidate_spans)
    span_type = [catalog.index(sp.label) for sp in candidate_spans] if typed else []
    candidates = " ".join(ITEM_OPEN + _surface(sentence, sp) + ITEM_CLOSE for sp in candidate_spans)
    target = None
    if with_target and typed:
        target = serialize_output([(_surface(sentence, sp), catalog.name_of(sp.label)) for sp in candidate_spans])
    return _render(sentence, candidate_spans, catalog.names, span_type, candidates, target, template, tokenizer, cutoff)


def build_contrastive_indices(prompt: RenderedPrompt) -> ContrastiveIndices:
    """Interior boundary positives and exterior boundary negatives per span.

    Negatives falling outside ``[0, len(prompt))`` are masked, never clamped.
    """
    n = len(prompt.token_ids)
    if prompt.span_type and not prompt.type_index_map:
        raise ValueError("prompt has no rendered schema to anchor the type names")
    pos, neg, valid, anchors = [], [], [], []
    for i, (b, e) in enumerate(prompt.span_index_map):
        pos.append((b, e - 1))
        quad = (b - 1, b - 2, e, e + 1)
        neg.append(quad)
        valid.append(tuple(0 <= q < n for q in quad))
        t = prompt.span_type[i] if prompt.span_type else None
        anchors.append(prompt.type_index_map[t] if t is not None else (0, 0))
    return ContrastiveIndices(pos, neg, valid, anchors)
