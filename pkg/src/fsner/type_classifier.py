"""Stage two: prototype-based type classification with per-domain adapters.

A class prototype averages two optional sources read from the selected hidden
layer of the rendered type prompt: the mention of the type name in the
schema and the support spans of that class. Candidates are scored by a
softmax over cosine similarity to each prototype.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .backbone import TinyTransformer, default_layer, pad_batch, select_layer
from .corpus import EntitySpan, Episode, LabeledSentence, TypeCatalog, spans_from_tags
from .errors import NumericAbort, StageTagError, ValidationError
from .lora import LoRAAdapter, LoRAConfig, merge_adapters
from .prompting import DEFAULT_CUTOFF, RenderedPrompt, Template, render_type_prompt
from .tokenizer import Tokenizer

EPS = 1e-12


@dataclass(frozen=True)
class TypeTrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 5
    support_epochs: int = 5
    cutoff: int = DEFAULT_CUTOFF
    layer: int | None = None
    weight_decay: float = 0.01
    seed: int = 0
    use_type_names: bool = True
    use_support_spans: bool = True
    verbatim_sign: bool = False
    lora: LoRAConfig = LoRAConfig()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.use_type_names or self.use_support_spans):
            raise ValueError("prototypes need at least one source")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prototype:
    class_id: str
    type_name: str
    vector: torch.Tensor
    support_count: int
    uses_name: bool = True


@dataclass
class PrototypeSet:
    prototypes: list[Prototype]
    layer: int
    domain_tag: str = ""

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(p.class_id for p in self.prototypes)

    @property
    def vectors(self) -> torch.Tensor:
        return torch.stack([p.vector for p in self.prototypes])

    def __len__(self) -> int:
        return len(self.prototypes)

    def to_records(self) -> list[dict]:
        return [
            {
                "class_id": p.class_id,
                "type_name": p.type_name,
                "dim": int(p.vector.numel()),
                "vector": [float(x) for x in p.vector],
                "support_count": p.support_count,
                "uses_name": p.uses_name,
                "layer": self.layer,
                "domain_tag": self.domain_tag,
            }
            for p in self.prototypes
        ]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.to_records():
                f.write(json.dumps(rec) + "\n")


@dataclass
class TypedCandidate:
    span: EntitySpan
    log_prob: float
    probs: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# scoring primitives


def span_representation(hidden: torch.Tensor, span: tuple[int, int]) -> torch.Tensor:
    """Mean of ``hidden[begin:end]`` for a (T, D) layer."""
    b, e = span
    if not 0 <= b < e <= hidden.shape[0]:
        raise ValueError(f"empty or out-of-range span {span} for length {hidden.shape[0]}")
    return hidden[b:e].mean(0)


def prototype_matrix(
    span_vecs: torch.Tensor,
    span_class: torch.Tensor,
    n_classes: int,
    name_vecs: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-class mean over span vectors (and the name vector, counted once when given).

    Returns ``(prototypes (C, D), contributing counts (C,))``; classes with no
    contribution get a zero row and count 0.
    """
    D = span_vecs.shape[-1] if span_vecs.numel() else name_vecs.shape[-1]
    sums = span_vecs.new_zeros(n_classes, D) if span_vecs.numel() else name_vecs.new_zeros(n_classes, D)
    counts = sums.new_zeros(n_classes)
    if span_vecs.numel():
        sums = sums.index_add(0, span_class, span_vecs)
        counts = counts.index_add(0, span_class, torch.ones_like(span_class, dtype=sums.dtype))
    if name_vecs is not None:
        sums = sums + name_vecs
        counts = counts + 1
    return sums / counts.clamp(min=1)[:, None], counts


def class_scores(span_vecs: torch.Tensor, protos: torch.Tensor, verbatim_sign: bool = False) -> torch.Tensor:
    """Cosine similarity of each span vector to each prototype, (N, C).

    ``verbatim_sign`` negates the scores, so the softmax favours the least
    similar prototype.
    """
    s = F.normalize(span_vecs, dim=-1, eps=EPS)
    p = F.normalize(protos, dim=-1, eps=EPS)
    cos = s @ p.t()
    return -cos if verbatim_sign else cos


def classify_span(
    span_vec: torch.Tensor,
    prototypes: PrototypeSet | torch.Tensor,
    verbatim_sign: bool = False,
) -> torch.Tensor:
    """Class probabilities for one (D,) vector or a batch (N, D)."""
    protos = prototypes.vectors if isinstance(prototypes, PrototypeSet) else prototypes
    if protos.shape[0] == 0:
        raise ValueError("empty prototype set")
    single = span_vec.dim() == 1
    logits = class_scores(span_vec[None] if single else span_vec, protos, verbatim_sign)
    probs = logits.softmax(-1)
    return probs[0] if single else probs


def type_loss(log_probs: torch.Tensor, gold: torch.Tensor | Sequence[int]) -> torch.Tensor:
    """Mean negative log-probability of the gold class, log_probs is (N, C)."""
    gold = torch.as_tensor(gold, dtype=torch.long)
    if gold.numel() == 0:
        raise ValueError("type_loss needs at least one query span")
    if bool(((gold < 0) | (gold >= log_probs.shape[-1])).any()):
        raise ValidationError(f"gold class outside the prototype set of size {log_probs.shape[-1]}")
    return -log_probs.gather(-1, gold[:, None]).mean()


# ---------------------------------------------------------------------------
# reading representations from rendered prompts


@dataclass
class _Reps:
    span_vecs: torch.Tensor  # (S, D)
    span_class: torch.Tensor  # (S,) class index, -1 for unlabelled candidates
    span_prompt: torch.Tensor  # (S,) prompt row
    name_vecs: torch.Tensor  # (C, D)


def prompt_representations(
    prompts: Sequence[RenderedPrompt],
    model: TinyTransformer,
    adapter: LoRAAdapter | None,
    layer: int | None = None,
) -> _Reps:
    """Span and type-name vectors from one batched forward pass."""
    names = prompts[0].type_names
    if any(p.type_names != names for p in prompts):
        raise ValidationError("prompts in one batch must share the type schema")
    ids, attn = pad_batch([p.token_ids for p in prompts], model.config.pad_id)
    H, _ = model(ids, attn, adapter)
    h = select_layer(H, layer)
    vecs, cls, rows = [], [], []
    for r, p in enumerate(prompts):
        for i, span in enumerate(p.span_index_map):
            vecs.append(span_representation(h[r], span))
            cls.append(p.span_type[i] if p.span_type else -1)
            rows.append(r)
    name_vecs = torch.stack([
        torch.stack([span_representation(h[r], p.type_index_map[c]) for r, p in enumerate(prompts)]).mean(0)
        for c in range(len(names))
    ])
    D = h.shape[-1]
    return _Reps(
        torch.stack(vecs) if vecs else h.new_zeros(0, D),
        torch.tensor(cls, dtype=torch.long),
        torch.tensor(rows, dtype=torch.long),
        name_vecs,
    )


def _type_prompts(sentences, catalog, template, tokenizer, cutoff) -> list[RenderedPrompt]:
    return [
        render_type_prompt(s, spans_from_tags(s), catalog, template, tokenizer, cutoff, with_target=False)
        for s in sentences
    ]


def build_prototypes(
    support: Sequence[RenderedPrompt],
    model: TinyTransformer,
    adapter: LoRAAdapter | None,
    layer: int | None = None,
    use_type_names: bool = True,
    use_support_spans: bool = True,
    domain_tag: str = "",
    catalog: TypeCatalog | None = None,
) -> PrototypeSet:
    """One prototype per schema class from support prompts rendered with gold spans."""
    if not support:
        raise ValidationError("build_prototypes needs at least one support prompt")
    names = support[0].type_names
    with torch.no_grad():
        reps = prompt_representations(support, model, adapter, layer)
    if use_support_spans:
        spans, cls = reps.span_vecs, reps.span_class
    else:
        spans, cls = reps.span_vecs[:0], reps.span_class[:0]
    protos, counts = prototype_matrix(spans, cls, len(names), reps.name_vecs if use_type_names else None)
    span_counts = torch.bincount(cls, minlength=len(names)) if cls.numel() else torch.zeros(len(names), dtype=torch.long)
    missing = [names[c] for c in range(len(names)) if counts[c] == 0]
    if missing:
        raise ValidationError(f"no support span for class(es) {missing}")
    labels = catalog.labels if catalog is not None else names
    used_layer = default_layer(len(model.blocks)) if layer is None else layer
    return PrototypeSet(
        [Prototype(labels[c], names[c], protos[c].clone(), int(span_counts[c]), use_type_names) for c in range(len(names))],
        used_layer,
        domain_tag,
    )


def episode_loss(
    support: Sequence[RenderedPrompt],
    query: Sequence[RenderedPrompt],
    model: TinyTransformer,
    adapter: LoRAAdapter | None,
    config: TypeTrainConfig,
) -> torch.Tensor | None:
    """Cross-entropy of query gold spans against prototypes built from ``support``."""
    reps = prompt_representations(list(support) + list(query), model, adapter, config.layer)
    n_sup = len(support)
    sup = reps.span_prompt < n_sup
    qry = ~sup
    if not bool(qry.any()):
        return None
    C = reps.name_vecs.shape[0]
    spans = reps.span_vecs[sup] if config.use_support_spans else reps.span_vecs[:0]
    cls = reps.span_class[sup] if config.use_support_spans else reps.span_class[:0]
    protos, counts = prototype_matrix(spans, cls, C, reps.name_vecs if config.use_type_names else None)
    gold = reps.span_class[qry]
    keep = counts[gold] > 0
    if not bool(keep.any()):
        return None
    logp = class_scores(reps.span_vecs[qry][keep], protos, config.verbatim_sign).log_softmax(-1)
    return type_loss(logp, gold[keep])


def leave_one_out_loss(
    support: Sequence[RenderedPrompt],
    model: TinyTransformer,
    adapter: LoRAAdapter | None,
    config: TypeTrainConfig,
) -> torch.Tensor | None:
    """Classify each support sentence's spans against prototypes built from the others."""
    reps = prompt_representations(support, model, adapter, config.layer)
    if reps.span_vecs.shape[0] == 0:
        return None
    C = reps.name_vecs.shape[0]
    S = reps.span_vecs.shape[0]
    onehot = F.one_hot(reps.span_class, C).to(reps.span_vecs.dtype)  # (S, C)
    own = F.one_hot(reps.span_prompt, len(support)).to(onehot.dtype)  # (S, P)
    total_sum = onehot.t() @ reps.span_vecs  # (C, D)
    total_cnt = onehot.sum(0)  # (C,)
    # per-prompt class sums, then each span sees totals minus its own prompt
    prompt_sum = torch.einsum("sp,sc,sd->pcd", own, onehot, reps.span_vecs)
    prompt_cnt = own.t() @ onehot  # (P, C)
    rest_sum = total_sum[None] - prompt_sum[reps.span_prompt]  # (S, C, D)
    rest_cnt = total_cnt[None] - prompt_cnt[reps.span_prompt]  # (S, C)
    if not config.use_support_spans:
        rest_sum = torch.zeros_like(rest_sum)
        rest_cnt = torch.zeros_like(rest_cnt)
    if config.use_type_names:
        rest_sum = rest_sum + reps.name_vecs[None]
        rest_cnt = rest_cnt + 1
    protos = rest_sum / rest_cnt.clamp(min=1)[..., None]
    s = F.normalize(reps.span_vecs, dim=-1, eps=EPS)
    p = F.normalize(protos, dim=-1, eps=EPS)
    logits = torch.einsum("sd,scd->sc", s, p)
    if config.verbatim_sign:
        logits = -logits
    logits = logits.masked_fill(rest_cnt == 0, float("-inf"))
    gold = reps.span_class
    keep = rest_cnt[torch.arange(S), gold] > 0
    if not bool(keep.any()):
        return None
    return type_loss(logits[keep].log_softmax(-1), gold[keep])


# ---------------------------------------------------------------------------
# training


def new_type_adapter(model: TinyTransformer, lora: LoRAConfig, domain_tag: str, seed: int = 0) -> LoRAAdapter:
    shapes = model.config.site_shapes(lora.sites)
    return LoRAAdapter.create(shapes, lora.rank, lora.alpha, lora.dropout, "type", domain_tag, seed, model.tok.weight.dtype)


def _optimise(loss_fn, n_items: int, model, adapter, config: TypeTrainConfig, log, what: str) -> LoRAAdapter:
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    adapter.requires_grad_(True)
    model.freeze()
    model.train()
    opt = torch.optim.AdamW(adapter.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    step = 0
    try:
        for epoch in range(config.epochs):
            for i in torch.randperm(n_items, generator=gen).tolist():
                loss = loss_fn(i, adapter)
                if loss is None:
                    continue
                if not torch.isfinite(loss):
                    raise NumericAbort(f"non-finite {what} loss at epoch {epoch} step {step}: {float(loss)}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                if log is not None:
                    log.append({"stage": what, "step": step, "epoch": epoch, "L_type": float(loss.detach()), "lr": config.learning_rate,
                                "seed": config.seed, "domain": adapter.domain_tag})
                step += 1
    finally:
        model.eval()
        adapter.requires_grad_(False)
    return adapter


def tune_domain_adapter(
    domain_episodes: Sequence[Episode],
    model: TinyTransformer,
    tokenizer: Tokenizer,
    template: Template,
    catalog: TypeCatalog,
    config: TypeTrainConfig = TypeTrainConfig(),
    domain_tag: str = "",
    init: LoRAAdapter | None = None,
    enabled: bool = True,
    log: list | None = None,
) -> LoRAAdapter:
    """Episodic prototype training of one type-stage adapter for one domain."""
    if init is not None and init.stage_tag != "type":
        raise StageTagError(f"type-stage training got a {init.stage_tag!r} adapter")
    if not enabled:
        if init is None:
            raise ValidationError("a disabled tuning pass needs an adapter to return")
        return init
    if not domain_episodes:
        raise ValidationError("tune_domain_adapter needs at least one episode")
    rendered = []
    for ep in domain_episodes:
        sub = catalog.subset(ep.classes)
        rendered.append((
            _type_prompts(ep.support, sub, template, tokenizer, config.cutoff),
            _type_prompts(ep.query, sub, template, tokenizer, config.cutoff),
        ))
    adapter = init.clone() if init is not None else new_type_adapter(model, config.lora, domain_tag, config.seed)
    adapter.domain_tag = domain_tag or adapter.domain_tag

    def loss_fn(i, a):
        sup, qry = rendered[i]
        return episode_loss(sup, qry, model, a, config)

    return _optimise(loss_fn, len(rendered), model, adapter, config, log, "type")


def support_prompts(
    support: Sequence[LabeledSentence],
    catalog: TypeCatalog,
    template: Template,
    tokenizer: Tokenizer,
    cutoff: int = DEFAULT_CUTOFF,
) -> list[RenderedPrompt]:
    return _type_prompts(support, catalog, template, tokenizer, cutoff)


def fine_tune_type_support(
    support: Sequence[LabeledSentence],
    model: TinyTransformer,
    adapter: LoRAAdapter | None,
    tokenizer: Tokenizer,
    template: Template,
    catalog: TypeCatalog,
    config: TypeTrainConfig,
    enabled: bool = True,
    log: list | None = None,
) -> LoRAAdapter | None:
    """Leave-one-sentence-out tuning on the target support set; disabled returns ``adapter`` itself."""
    if not enabled or adapter is None or len(support) < 2:
        return adapter
    prompts = support_prompts(support, catalog, template, tokenizer, config.cutoff)
    tuned = adapter.clone()
    cfg = replace(config, epochs=config.support_epochs)
    return _optimise(lambda i, a: leave_one_out_loss(prompts, model, a, config), 1, model, tuned, cfg, log, "support type")


def composition_objective(
    adapters: Sequence[LoRAAdapter],
    support: Sequence[RenderedPrompt],
    model: TinyTransformer,
    config: TypeTrainConfig,
):
    """Loss of a weight vector for the search: leave-one-out support cross-entropy of the merge."""

    def loss_fn(w: Sequence[float]) -> float:
        with torch.no_grad():
            loss = leave_one_out_loss(support, model, merge_adapters(adapters, w), config)
        return 0.0 if loss is None else float(loss)

    return loss_fn


# ---------------------------------------------------------------------------
# inference


def classify_candidates(
    sentence: LabeledSentence,
    spans: Sequence[EntitySpan],
    model: TinyTransformer,
    adapter: LoRAAdapter | None,
    prototypes: PrototypeSet,
    tokenizer: Tokenizer,
    template: Template,
    catalog: TypeCatalog,
    cutoff: int = DEFAULT_CUTOFF,
    verbatim_sign: bool = False,
) -> list[TypedCandidate]:
    """Type and class log-probability for every candidate span (same order)."""
    if adapter is not None and adapter.stage_tag != "type":
        raise StageTagError(f"classify_candidates needs a type-stage adapter, got {adapter.stage_tag!r}")
    if not spans:
        return []
    bare = [EntitySpan(sp.begin, sp.end, "") for sp in spans]
    prompt = render_type_prompt(sentence, bare, catalog, template, tokenizer, cutoff, with_target=False)
    with torch.no_grad():
        reps = prompt_representations([prompt], model, adapter, prototypes.layer)
        logp = class_scores(reps.span_vecs, prototypes.vectors, verbatim_sign).log_softmax(-1)
    out = []
    for i, sp in enumerate(bare):
        k = int(logp[i].argmax())
        out.append(TypedCandidate(replace(sp, label=prototypes.labels[k]), float(logp[i, k]), logp[i].exp().tolist()))
    return out
