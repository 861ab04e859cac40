"""Two-stage inference, micro-F1 scoring, evaluation protocols and the ablation grid."""
from __future__ import annotations

import csv
import json
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import torch

from .backbone import GenerationParams, TinyTransformer
from .corpus import Episode, LabeledSentence, TypeCatalog, sample_support_set, spans_from_tags
from .lora import CompositionWeights, LoRAAdapter, merge_adapters, optimize_weights
from .prompting import Template
from .span_detector import SpanTrainConfig, detect_spans, fine_tune_support, train_span_stage
from .tokenizer import Tokenizer
from .type_classifier import (
    PrototypeSet,
    TypeTrainConfig,
    build_prototypes,
    classify_candidates,
    composition_objective,
    fine_tune_type_support,
    support_prompts,
    tune_domain_adapter,
)


@dataclass(frozen=True)
class AblationConfig:
    basd_enabled: bool = True
    dal_enabled: bool = True
    sdf_enabled: bool = True
    tcf_enabled: bool = True

    @property
    def all_off(self) -> bool:
        return not (self.basd_enabled or self.dal_enabled or self.sdf_enabled or self.tcf_enabled)


VARIANTS: dict[str, AblationConfig] = {
    "full": AblationConfig(),
    "basd-off": AblationConfig(basd_enabled=False),
    "dal-off": AblationConfig(dal_enabled=False),
    "sdf-off": AblationConfig(sdf_enabled=False),
    "tcf-off": AblationConfig(tcf_enabled=False),
    "all-off": AblationConfig(False, False, False, False),
}
VARIANT_LABELS = {
    "full": "full",
    "basd-off": "w/o BASD",
    "dal-off": "w/o DAL",
    "sdf-off": "w/o SDF",
    "tcf-off": "w/o TCF",
    "all-off": "w/o ALL",
}


@dataclass(frozen=True)
class PipelineConfig:
    span: SpanTrainConfig = SpanTrainConfig()
    type: TypeTrainConfig = TypeTrainConfig()
    generation: GenerationParams = GenerationParams()
    composition: CompositionWeights = field(default_factory=CompositionWeights)

    def to_dict(self) -> dict:
        return {
            "span": self.span.to_dict(),
            "type": self.type.to_dict(),
            "generation": asdict(self.generation),
            "composition": self.composition.to_dict(),
        }


@dataclass
class ModelBundle:
    """Frozen backbone plus the source-trained adapters of one ablation variant."""

    model: TinyTransformer
    tokenizer: Tokenizer
    catalog: TypeCatalog
    span_template: Template
    type_template: Template
    config: PipelineConfig
    ablation: AblationConfig = AblationConfig()
    span_adapter: LoRAAdapter | None = None
    type_adapters: list[LoRAAdapter] = field(default_factory=list)

    def snapshot(self) -> dict:
        cfg = self.config.to_dict()
        if not self.ablation.basd_enabled:
            cfg["span"]["lam"] = 0.0
        return {"pipeline": cfg, "ablation": asdict(self.ablation)}


@dataclass
class AdaptedEpisode:
    catalog: TypeCatalog
    span_adapter: LoRAAdapter | None
    type_adapter: LoRAAdapter | None
    prototypes: PrototypeSet
    weights: CompositionWeights | None = None


@dataclass(frozen=True)
class PredictedSpan:
    begin: int
    end: int
    label: str
    log_score: float
    span_logprob: float = 0.0
    type_logprob: float = 0.0


@dataclass
class Prediction:
    sentence_id: str
    spans: list[PredictedSpan] = field(default_factory=list)
    malformed: bool = False
    dropped: int = 0

    def to_record(self) -> dict:
        return {
            "sentence_id": self.sentence_id,
            "spans": [asdict(s) for s in self.spans],
            "malformed": self.malformed,
            "dropped": self.dropped,
        }


# ---------------------------------------------------------------------------
# training and adaptation


def effective_span_config(config: PipelineConfig, ablation: AblationConfig, seed: int | None = None) -> SpanTrainConfig:
    cfg = config.span if ablation.basd_enabled else replace(config.span, lam=0.0)
    return cfg if seed is None else replace(cfg, seed=seed)


def train_bundle(
    model: TinyTransformer,
    tokenizer: Tokenizer,
    catalog: TypeCatalog,
    span_corpus: Sequence[LabeledSentence],
    type_domains: Mapping[str, Sequence[Episode]],
    config: PipelineConfig,
    ablation: AblationConfig = AblationConfig(),
    span_template: Template | None = None,
    type_template: Template | None = None,
    log: list | None = None,
    reuse: ModelBundle | None = None,
) -> ModelBundle:
    """Source-domain training of the span adapter and the type adapters.

    ``reuse`` lends already trained adapters whose training would be identical
    (same effective lambda, same domain split), which keeps ablation grids cheap.
    """
    span_template = span_template or Template.builtin("span")
    type_template = type_template or Template.builtin("type")
    bundle = ModelBundle(model, tokenizer, catalog, span_template, type_template, config, ablation)
    if ablation.all_off:
        return bundle
    span_cfg = effective_span_config(config, ablation)
    if reuse is not None and reuse.span_adapter is not None and effective_span_config(config, reuse.ablation) == span_cfg:
        bundle.span_adapter = reuse.span_adapter
    else:
        bundle.span_adapter = train_span_stage(span_corpus, model, tokenizer, span_template, catalog, span_cfg, log=log)
    if reuse is not None and reuse.type_adapters and reuse.ablation.dal_enabled == ablation.dal_enabled:
        bundle.type_adapters = reuse.type_adapters
    elif ablation.dal_enabled:
        bundle.type_adapters = [
            tune_domain_adapter(eps, model, tokenizer, type_template, catalog, config.type, domain_tag=name, log=log)
            for name, eps in type_domains.items()
        ]
    else:
        pooled = [ep for eps in type_domains.values() for ep in eps]
        bundle.type_adapters = [
            tune_domain_adapter(pooled, model, tokenizer, type_template, catalog, config.type, domain_tag="pooled", log=log)
        ]
    return bundle


def compose(
    adapters: Sequence[LoRAAdapter],
    loss_fn: Callable[[list[float]], float],
    config: CompositionWeights,
) -> tuple[LoRAAdapter, CompositionWeights]:
    """Weight search plus merge; a single adapter is returned as is with weight 1."""
    if len(adapters) == 1:
        loss = float(loss_fn([1.0]))
        w = replace(config, w=[1.0], loss=loss, objective=loss + config.l1_coefficient, evaluations=1)
        return adapters[0], w
    weights = optimize_weights(adapters, loss_fn, config)
    return merge_adapters(adapters, weights), weights


def adapt_episode(
    bundle: ModelBundle,
    support: Sequence[LabeledSentence],
    catalog: TypeCatalog,
    seed: int = 0,
) -> AdaptedEpisode:
    """Target-side adaptation on a support set according to the ablation flags."""
    ab, cfg, m = bundle.ablation, bundle.config, bundle.model
    tcfg = replace(cfg.type, seed=seed)
    prompts = support_prompts(support, catalog, bundle.type_template, bundle.tokenizer, tcfg.cutoff)
    span_ad = type_ad = None
    weights = None
    if not ab.all_off:
        span_ad = fine_tune_support(
            support, m, bundle.span_adapter, bundle.tokenizer, bundle.span_template, catalog,
            effective_span_config(cfg, ab, seed), enabled=ab.sdf_enabled,
        )
        if ab.dal_enabled:
            loss_fn = composition_objective(bundle.type_adapters, prompts, m, tcfg)
            type_ad, weights = compose(bundle.type_adapters, loss_fn, replace(cfg.composition, seed=seed))
        else:
            type_ad = bundle.type_adapters[0]
        type_ad = fine_tune_type_support(
            support, m, type_ad, bundle.tokenizer, bundle.type_template, catalog, tcfg, enabled=ab.tcf_enabled,
        )
    protos = build_prototypes(
        prompts, m, type_ad, tcfg.layer, tcfg.use_type_names, tcfg.use_support_spans,
        domain_tag=type_ad.domain_tag if type_ad is not None else "", catalog=catalog,
    )
    return AdaptedEpisode(catalog, span_ad, type_ad, protos, weights)


def resolve_overlaps(spans: Sequence[PredictedSpan]) -> list[PredictedSpan]:
    """Keep the higher span-stage log-probability whenever two predictions overlap."""
    kept: list[PredictedSpan] = []
    for sp in sorted(spans, key=lambda s: (-s.span_logprob, s.begin, s.end)):
        if all(sp.end <= k.begin or k.end <= sp.begin for k in kept):
            kept.append(sp)
    return sorted(kept, key=lambda s: s.begin)


def infer(
    sentence: LabeledSentence,
    bundle: ModelBundle,
    adapted: AdaptedEpisode,
    params: GenerationParams | None = None,
) -> Prediction:
    """Detect spans, type them, and score each as ``log P(spans) + log P(type)``."""
    params = params or bundle.config.generation
    det = detect_spans(
        sentence, bundle.model, adapted.span_adapter, params, bundle.tokenizer, bundle.span_template,
        adapted.catalog, bundle.config.span.cutoff,
    )
    typed = classify_candidates(
        sentence, det.spans, bundle.model, adapted.type_adapter, adapted.prototypes, bundle.tokenizer,
        bundle.type_template, adapted.catalog, bundle.config.type.cutoff, bundle.config.type.verbatim_sign,
    )
    spans = [
        PredictedSpan(c.span.begin, c.span.end, c.span.label, det.sequence_logprob + c.log_prob, span_lp, c.log_prob)
        for c, span_lp in zip(typed, det.span_logprobs)
    ]
    return Prediction(sentence.source_id, resolve_overlaps(spans), det.malformed, det.dropped)


# ---------------------------------------------------------------------------
# scoring


@dataclass
class Counts:
    tp: int = 0
    n_pred: int = 0
    n_gold: int = 0

    def __iadd__(self, other: "Counts") -> "Counts":
        self.tp += other.tp
        self.n_pred += other.n_pred
        self.n_gold += other.n_gold
        return self

    def prf(self) -> tuple[float, float, float]:
        p = self.tp / self.n_pred if self.n_pred else 0.0
        r = self.tp / self.n_gold if self.n_gold else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return p, r, f


def match_counts(predictions: Sequence[Prediction], gold: Sequence[LabeledSentence]) -> Counts:
    gold_by_id = {g.source_id: g for g in gold}
    if len(gold_by_id) != len(gold):
        raise ValueError("duplicate sentence ids in gold")
    pred_ids = [p.sentence_id for p in predictions]
    if len(set(pred_ids)) != len(pred_ids) or set(pred_ids) != set(gold_by_id):
        missing = sorted(set(gold_by_id) ^ set(pred_ids))[:5]
        raise ValueError(f"prediction / gold sentence ids do not align (e.g. {missing})")
    c = Counts()
    for p in predictions:
        g = {(s.begin, s.end, s.label) for s in spans_from_tags(gold_by_id[p.sentence_id])}
        pr = {(s.begin, s.end, s.label) for s in p.spans}
        c += Counts(len(g & pr), len(pr), len(g))
    return c


def micro_f1(predictions: Sequence[Prediction], gold: Sequence[LabeledSentence]) -> tuple[float, float, float]:
    """Exact-match micro precision, recall and F1 over (begin, end, type) triples."""
    return match_counts(predictions, gold).prf()


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation."""
    vals = [float(v) for v in values]
    return statistics.fmean(vals), statistics.pstdev(vals)


@dataclass
class EvalReport:
    per_seed: list[dict]
    protocol: str
    variant: str = "full"
    config: dict = field(default_factory=dict)

    @property
    def seeds(self) -> list[int]:
        return [r["seed"] for r in self.per_seed]

    def metric(self, name: str) -> tuple[float, float]:
        return mean_std([r[name] for r in self.per_seed])

    @property
    def mean_f1(self) -> float:
        return self.metric("f1")[0]

    @property
    def std_f1(self) -> float:
        return self.metric("f1")[1]

    @property
    def median_f1(self) -> float:
        return statistics.median(r["f1"] for r in self.per_seed)

    def cell(self, name: str = "f1") -> str:
        mean, std = self.metric(name)
        return format_cell(mean, std)

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "variant": self.variant,
            "seeds": self.seeds,
            "std": "population",
            "per_seed": self.per_seed,
            "mean": {k: self.metric(k)[0] for k in ("precision", "recall", "f1")},
            "stdev": {k: self.metric(k)[1] for k in ("precision", "recall", "f1")},
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(list(d["per_seed"]), d["protocol"], d.get("variant", "full"), dict(d.get("config", {})))


def format_cell(mean: float, std: float) -> str:
    """Percentages with two decimals, e.g. ``64.95±0.85``."""
    return f"{100 * mean:.2f}±{100 * std:.2f}"


def _seed_record(seed: int, counts: Counts, malformed: int, dropped: int, n_sentences: int) -> dict:
    p, r, f = counts.prf()
    return {
        "seed": seed,
        "precision": p,
        "recall": r,
        "f1": f,
        "tp": counts.tp,
        "n_pred": counts.n_pred,
        "n_gold": counts.n_gold,
        "malformed": malformed,
        "dropped": dropped,
        "sentences": n_sentences,
    }


def _score_sentences(bundle, adapted, sentences, params) -> tuple[Counts, int, int]:
    preds = [infer(s, bundle, adapted, params) for s in sentences]
    return match_counts(preds, sentences), sum(p.malformed for p in preds), sum(p.dropped for p in preds)


def _episode_seed(bundle: ModelBundle, episodes, params, seed: int) -> dict:
    torch.set_num_threads(1)
    eps = episodes(seed) if callable(episodes) else episodes[seed] if isinstance(episodes, Mapping) else episodes
    total, malformed, dropped, n = Counts(), 0, 0, 0
    for ep in eps:
        sub = bundle.catalog.subset(ep.classes)
        adapted = adapt_episode(bundle, ep.support, sub, seed)
        c, mal, drop = _score_sentences(bundle, adapted, ep.query, params)
        total += c
        malformed += mal
        dropped += drop
        n += len(ep.query)
    return _seed_record(seed, total, malformed, dropped, n)


def _dataset_seed(bundle: ModelBundle, test_corpus, k_shot, params, seed: int) -> dict:
    torch.set_num_threads(1)
    support = sample_support_set(test_corpus, k_shot, seed, labels=bundle.catalog.labels)
    adapted = adapt_episode(bundle, support, bundle.catalog, seed)
    c, mal, drop = _score_sentences(bundle, adapted, test_corpus, params)
    return _seed_record(seed, c, mal, drop, len(test_corpus))


def _run_seeds(fn, seeds: Sequence[int], jobs: int) -> list[dict]:
    if jobs <= 1:
        return [fn(s) for s in seeds]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, seeds))


DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def episode_evaluation(
    bundle: ModelBundle,
    episodes: Sequence[Episode] | Mapping[int, Sequence[Episode]] | Callable[[int], Sequence[Episode]],
    seeds: Sequence[int] = DEFAULT_SEEDS,
    params: GenerationParams | None = None,
    jobs: int = 1,
    variant: str = "full",
) -> EvalReport:
    """Per seed: adapt on every episode's support, predict its query, pool micro-F1 over episodes."""
    if not callable(episodes) and not episodes:
        raise ValueError("no episodes to evaluate")
    records = _run_seeds(partial(_episode_seed, bundle, episodes, params), seeds, jobs)
    return EvalReport(records, "episode", variant, bundle.snapshot())


def dataset_evaluation(
    bundle: ModelBundle,
    test_corpus: Sequence[LabeledSentence],
    k_shot: int,
    seeds: Sequence[int] = DEFAULT_SEEDS,
    params: GenerationParams | None = None,
    jobs: int = 1,
    variant: str = "full",
) -> EvalReport:
    """Per seed: sample a support set from the test corpus, adapt, score the whole corpus as is."""
    records = _run_seeds(partial(_dataset_seed, bundle, test_corpus, k_shot, params), seeds, jobs)
    return EvalReport(records, "dataset", variant, bundle.snapshot())


def run_ablation(
    variants: Iterable[str],
    train: Callable[[AblationConfig, ModelBundle | None], ModelBundle],
    evaluate: Callable[[ModelBundle, str], EvalReport],
) -> dict[str, EvalReport]:
    """Train (reusing identical adapters across variants) and evaluate each named variant."""
    reports: dict[str, EvalReport] = {}
    trained: list[ModelBundle] = []
    for name in variants:
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}; known: {list(VARIANTS)}")
        ab = VARIANTS[name]
        reuse = next((b for b in trained if b.ablation.basd_enabled == ab.basd_enabled and not b.ablation.all_off), None)
        if reuse is None:
            reuse = next((b for b in trained if not b.ablation.all_off), None)
        bundle = train(ab, reuse)
        trained.append(bundle)
        reports[name] = evaluate(bundle, name)
    return reports


# ---------------------------------------------------------------------------
# report files


def ablation_table(reports: Mapping[str, EvalReport]) -> str:
    lines = ["| variant | precision | recall | F1 |", "|---|---|---|---|"]
    for name, rep in reports.items():
        label = VARIANT_LABELS.get(name, name)
        lines.append(f"| {label} | {rep.cell('precision')} | {rep.cell('recall')} | {rep.cell('f1')} |")
    return "\n".join(lines) + "\n"


def write_reports(reports: Mapping[str, EvalReport], out_dir: str | Path) -> dict[str, Path]:
    """Human table, per-seed JSON lines and a ``seed,variant,P,R,F1`` CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "table.md", "records": out / "per_seed.jsonl", "plot": out / "plot.csv", "report": out / "report.json"}
    paths["table"].write_text(ablation_table(reports), encoding="utf-8")
    with open(paths["records"], "w", encoding="utf-8") as f:
        for name, rep in reports.items():
            for r in rep.per_seed:
                f.write(json.dumps({"variant": name, **r}) + "\n")
    with open(paths["plot"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["seed", "variant", "P", "R", "F1"])
        for name, rep in reports.items():
            for r in rep.per_seed:
                w.writerow([r["seed"], name, repr(r["precision"]), repr(r["recall"]), repr(r["f1"])])
    paths["report"].write_text(json.dumps({k: v.to_dict() for k, v in reports.items()}, indent=1), encoding="utf-8")
    return paths
