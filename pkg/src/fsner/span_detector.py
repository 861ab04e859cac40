"""Stage one: span generation trained with a boundary-aware contrastive auxiliary loss."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import torch
import torch.nn.functional as F

from .backbone import GenerationParams, TinyTransformer, gather_indices, generate, pad_batch, select_layer
from .corpus import EntitySpan, Episode, LabeledSentence, TypeCatalog
from .errors import NumericAbort, StageTagError
from .lora import LoRAAdapter, LoRAConfig
from .prompting import (
    DEFAULT_CUTOFF,
    RenderedPrompt,
    Template,
    build_contrastive_indices,
    parse_generation,
    render_span_prompt,
)
from .tokenizer import IM_END, IM_START, ITEM_CLOSE, ITEM_OPEN, Tokenizer

EPS = 1e-12


@dataclass(frozen=True)
class SpanTrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 5
    batch_size: int = 1
    cutoff: int = DEFAULT_CUTOFF
    lam: float = 0.001
    contrastive_layer: int | None = None
    weight_decay: float = 0.01
    seed: int = 0
    sim_reduction: str = "sum"
    lora: LoRAConfig = LoRAConfig()

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.sim_reduction not in ("sum", "mean"):
            raise ValueError("sim_reduction must be 'sum' or 'mean'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ContrastiveBatch:
    """Span-major contrastive inputs; ``example[i]`` is the batch row of span ``i``."""

    e_o: torch.Tensor  # (S, D) type-anchor vectors
    e_pos: torch.Tensor  # (S, 2, D)
    e_neg: torch.Tensor  # (S, 4, D)
    pos_mask: torch.Tensor  # (S, 2)
    neg_mask: torch.Tensor  # (S, 4)
    example: torch.Tensor  # (S,)
    batch_size: int


# ---------------------------------------------------------------------------
# losses


def encode_prompts(prompts: Sequence[RenderedPrompt], pad_id: int):
    """Padded ids, attention mask, next-token labels and the target-only loss mask."""
    ids, attn = pad_batch([p.token_ids for p in prompts], pad_id)
    labels = ids[:, 1:]
    loss_mask = torch.zeros_like(labels, dtype=torch.bool)
    for b, p in enumerate(prompts):
        for t in range(1, len(p.token_ids)):
            loss_mask[b, t - 1] = not p.prompt_mask[t]
    return ids, attn, labels, loss_mask


def masked_nll(logp: torch.Tensor, labels: torch.Tensor, loss_mask: torch.Tensor) -> torch.Tensor:
    """Per-example summed negative log-likelihood over unmasked positions."""
    lp = logp[:, : labels.shape[1]]
    safe = torch.where(loss_mask, labels, torch.zeros_like(labels))
    nll = -lp.gather(-1, safe[..., None]).squeeze(-1)
    return (nll * loss_mask.to(nll.dtype)).sum(-1)


def generation_loss(
    prompts: Sequence[RenderedPrompt],
    model: TinyTransformer,
    adapter: LoRAAdapter | None = None,
) -> torch.Tensor:
    """Target-token NLL summed per example and averaged over the batch."""
    ids, attn, labels, loss_mask = encode_prompts(prompts, model.config.pad_id)
    if not bool(loss_mask.any()):
        raise ValueError("every position in the batch is prompt-masked")
    _, logp = model(ids, attn, adapter)
    return masked_nll(logp, labels, loss_mask).mean()


def contrastive_batch(H: torch.Tensor, prompts: Sequence[RenderedPrompt]) -> ContrastiveBatch:
    """Gather anchor / positive / negative vectors from one hidden layer ``H`` (B, T, D)."""
    pos, neg, pmask, nmask, example, anchors = [], [], [], [], [], []
    for b, p in enumerate(prompts):
        ci = build_contrastive_indices(p)
        for i in range(len(ci.pos)):
            pos.append(list(ci.pos[i]))
            neg.append(list(ci.neg[i]))
            pmask.append([True, True])
            nmask.append(list(ci.neg_valid_mask[i]))
            example.append(b)
            o_b, o_e = ci.type_anchor[i]
            anchors.append(H[b, o_b:o_e].mean(0))
    D = H.shape[-1]
    if not example:
        empty = H.new_zeros((0, D))
        return ContrastiveBatch(
            empty, H.new_zeros((0, 2, D)), H.new_zeros((0, 4, D)),
            torch.zeros(0, 2, dtype=torch.bool), torch.zeros(0, 4, dtype=torch.bool),
            torch.zeros(0, dtype=torch.long), len(prompts),
        )
    ex = torch.tensor(example)
    rows = H[ex]
    e_pos, pm = gather_indices(rows, pos, pmask)
    e_neg, nm = gather_indices(rows, neg, nmask)
    return ContrastiveBatch(torch.stack(anchors), e_pos, e_neg, pm, nm, ex, len(prompts))


def similarity_terms(batch: ContrastiveBatch, reduction: str = "sum") -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Per-example ``sim(o, pos)``, ``sim(o, neg)`` and a flag for examples with spans."""
    o = F.normalize(batch.e_o, dim=-1, eps=EPS)
    pos = F.normalize(batch.e_pos, dim=-1, eps=EPS)
    neg = F.normalize(batch.e_neg, dim=-1, eps=EPS)
    cos_pos = (pos * o[:, None]).sum(-1) * batch.pos_mask.to(o.dtype)
    cos_neg = (neg * o[:, None]).sum(-1) * batch.neg_mask.to(o.dtype)
    span_pos, span_neg = cos_pos.sum(-1), cos_neg.sum(-1)
    if reduction == "mean":
        span_pos = span_pos / batch.pos_mask.sum(-1).clamp(min=1)
        span_neg = span_neg / batch.neg_mask.sum(-1).clamp(min=1)
    B = batch.batch_size
    sim_pos = o.new_zeros(B).index_add(0, batch.example, span_pos)
    sim_neg = o.new_zeros(B).index_add(0, batch.example, span_neg)
    has = torch.zeros(B, dtype=torch.bool)
    has[batch.example] = True
    return sim_pos, sim_neg, has


def contrastive_loss(batch: ContrastiveBatch, reduction: str = "sum") -> torch.Tensor:
    """``-mean_b log sigmoid(sim(o,pos)_b - sim(o,neg)_b)`` over examples holding spans.

    ``sim`` sums anchor/slot cosines over every span of the example and every
    valid slot (``reduction="mean"`` averages over valid slots instead).
    """
    if batch.example.numel() == 0:
        raise ValueError("contrastive loss needs at least one span in the batch")
    sim_pos, sim_neg, has = similarity_terms(batch, reduction)
    return -F.logsigmoid(sim_pos[has] - sim_neg[has]).mean()


# ---------------------------------------------------------------------------
# training


def _span_prompts(corpus, tokenizer, template, catalog, cutoff) -> list[RenderedPrompt]:
    prompts = []
    for item in corpus:
        if isinstance(item, Episode):
            sub = catalog.subset(item.classes)
            prompts += [render_span_prompt(s, template, tokenizer, sub, cutoff=cutoff) for s in item.support + item.query]
        else:
            prompts.append(render_span_prompt(item, template, tokenizer, catalog, cutoff=cutoff))
    return prompts


def new_span_adapter(model: TinyTransformer, lora: LoRAConfig, seed: int = 0) -> LoRAAdapter:
    shapes = model.config.site_shapes(lora.sites)
    dtype = model.tok.weight.dtype
    return LoRAAdapter.create(shapes, lora.rank, lora.alpha, lora.dropout, "span", "", seed, dtype)


def train_on_prompts(
    prompts: Sequence[RenderedPrompt],
    model: TinyTransformer,
    config: SpanTrainConfig,
    init: LoRAAdapter | None = None,
    log: list | None = None,
) -> LoRAAdapter:
    """Adapter-only optimisation of ``L_g + lambda * L_cl``; the base stays frozen."""
    if not prompts:
        raise ValueError("no training prompts")
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    adapter = init.clone() if init is not None else new_span_adapter(model, config.lora, config.seed)
    adapter.requires_grad_(True)
    model.freeze()
    model.train()
    opt = torch.optim.AdamW(adapter.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)
    step = 0
    try:
        for epoch in range(config.epochs):
            order = torch.randperm(len(prompts), generator=gen).tolist()
            for start in range(0, len(order), config.batch_size):
                batch = [prompts[i] for i in order[start : start + config.batch_size]]
                ids, attn, labels, loss_mask = encode_prompts(batch, model.config.pad_id)
                H, logp = model(ids, attn, adapter)
                l_g = masked_nll(logp, labels, loss_mask).mean()
                has_spans = any(p.span_index_map for p in batch)
                l_cl = torch.zeros((), dtype=l_g.dtype)
                if has_spans:
                    cb = contrastive_batch(select_layer(H, config.contrastive_layer), batch)
                    if config.lam > 0:
                        l_cl = contrastive_loss(cb, config.sim_reduction)
                    else:
                        with torch.no_grad():
                            l_cl = contrastive_loss(cb, config.sim_reduction)
                loss = l_g + config.lam * l_cl if config.lam > 0 else l_g
                if not torch.isfinite(loss):
                    raise NumericAbort(
                        f"non-finite span loss at epoch {epoch} step {step}: L_g={float(l_g.detach())} L_cl={float(l_cl.detach())}"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                if log is not None:
                    log.append({
                        "stage": "span",
                        "step": step,
                        "epoch": epoch,
                        "L_g": float(l_g.detach()),
                        "L_cl": float(l_cl.detach()),
                        "combined": float(loss.detach()),
                        "lr": config.learning_rate,
                        "lambda": config.lam,
                        "seed": config.seed,
                    })
                step += 1
    finally:
        model.eval()
        adapter.requires_grad_(False)
    return adapter


def train_span_stage(
    corpus: Sequence[LabeledSentence] | Sequence[Episode],
    model: TinyTransformer,
    tokenizer: Tokenizer,
    template: Template,
    catalog: TypeCatalog,
    config: SpanTrainConfig = SpanTrainConfig(),
    init: LoRAAdapter | None = None,
    log: list | None = None,
) -> LoRAAdapter:
    prompts = _span_prompts(corpus, tokenizer, template, catalog, config.cutoff)
    return train_on_prompts(prompts, model, config, init, log)


def fine_tune_support(
    support: Sequence[LabeledSentence],
    model: TinyTransformer,
    adapter: LoRAAdapter,
    tokenizer: Tokenizer,
    template: Template,
    catalog: TypeCatalog,
    config: SpanTrainConfig,
    enabled: bool = True,
    log: list | None = None,
) -> LoRAAdapter:
    """Adapt the span adapter on a target support set; a disabled pass returns ``adapter`` itself."""
    if not enabled or not support:
        return adapter
    cfg = replace(config, batch_size=max(1, min(config.batch_size, len(support))))
    return train_span_stage(support, model, tokenizer, template, catalog, cfg, init=adapter, log=log)


# ---------------------------------------------------------------------------
# inference


@dataclass
class SpanDetection:
    spans: list[EntitySpan] = field(default_factory=list)
    span_logprobs: list[float] = field(default_factory=list)
    sequence_logprob: float = 0.0
    dropped: int = 0
    malformed: bool = False
    raw: str = ""


def _item_segments(tokens: list[int], lps: list[float], tokenizer: Tokenizer) -> list[tuple[str, float]]:
    """Decoded text and summed log-prob of each generated item, in order."""
    ids = {name: tokenizer.id_of(name) for name in (IM_START, IM_END, ITEM_OPEN, ITEM_CLOSE)}
    if ids[IM_START] not in tokens:
        return []
    start = tokens.index(ids[IM_START]) + 1
    end = tokens.index(ids[IM_END], start) if ids[IM_END] in tokens[start:] else len(tokens)
    body, body_lp = tokens[start:end], lps[start:end]
    if ids[ITEM_OPEN] not in body:
        return [(tokenizer.decode(body), float(sum(body_lp)))] if body else []
    segs, cur, cur_lp = [], None, 0.0
    for t, lp in zip(body, body_lp):
        if t == ids[ITEM_OPEN]:
            cur, cur_lp = [], lp
        elif t == ids[ITEM_CLOSE] and cur is not None:
            segs.append((tokenizer.decode(cur), cur_lp + lp))
            cur = None
        elif cur is not None:
            cur.append(t)
            cur_lp += lp
    return segs


def match_items(words: Sequence[str], items: Sequence[str]) -> tuple[list[tuple[int, int] | None], int]:
    """Leftmost non-overlapping exact token match for each item; ``None`` when unresolvable."""
    used = [False] * len(words)
    out: list[tuple[int, int] | None] = []
    dropped = 0
    for item in items:
        target = item.split()
        n = len(target)
        hit = None
        for s in range(len(words) - n + 1):
            if list(words[s : s + n]) == target and not any(used[s : s + n]):
                hit = (s, s + n)
                break
        if hit is None:
            dropped += 1
        else:
            for i in range(*hit):
                used[i] = True
        out.append(hit)
    return out, dropped


def detect_spans(
    sentence: LabeledSentence,
    model: TinyTransformer,
    adapter: LoRAAdapter | None,
    params: GenerationParams,
    tokenizer: Tokenizer,
    template: Template,
    catalog: TypeCatalog,
    cutoff: int = DEFAULT_CUTOFF,
) -> SpanDetection:
    if adapter is not None and adapter.stage_tag != "span":
        raise StageTagError(f"detect_spans needs a span-stage adapter, got {adapter.stage_tag!r}")
    prompt = render_span_prompt(sentence, template, tokenizer, catalog, spans=[], cutoff=cutoff, with_target=False)
    gen = generate(model, prompt.token_ids, params, tokenizer.id_of(IM_END), adapter)
    raw = tokenizer.decode(gen.tokens)
    parsed = parse_generation(raw)
    det = SpanDetection(sequence_logprob=gen.logprob, raw=raw, malformed=parsed.malformed or not gen.finished)
    det.dropped = parsed.dropped
    segments = _item_segments(gen.tokens, gen.token_logprobs, tokenizer)
    hits, dropped = match_items(sentence.tokens, parsed.items)
    det.dropped += dropped
    seg_used = [False] * len(segments)
    for item, hit in zip(parsed.items, hits):
        if hit is None:
            continue
        lp = gen.logprob
        for j, (text, seg_lp) in enumerate(segments):
            if not seg_used[j] and text == item:
                seg_used[j] = True
                lp = seg_lp
                break
        det.spans.append(EntitySpan(hit[0], hit[1], ""))
        det.span_logprobs.append(lp)
    order = sorted(range(len(det.spans)), key=lambda i: det.spans[i].begin)
    det.spans = [det.spans[i] for i in order]
    det.span_logprobs = [det.span_logprobs[i] for i in order]
    return det
