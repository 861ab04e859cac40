"""Run configuration and the reproducible experiment driver behind the CLI.

Configuration is a flat mapping of sectioned keys (``stage.span.lr``). The
built-in defaults are overridden by an INI file (section ``[stage.span]``,
key ``lr``), which is in turn overridden by explicit flags. Every run writes
the fully resolved mapping back out as ``config.ini`` so a run can be
repeated from its snapshot.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import random
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Mapping, Sequence

import torch

from .backbone import BackboneConfig, GenerationParams, TinyTransformer, load_backbone, save_backbone, train_lm
from .corpus import (
    SYNTHETIC_TYPES,
    Episode,
    LabeledSentence,
    SyntheticSpec,
    TypeCatalog,
    domain_vocabularies,
    generate_synthetic_corpus,
    load_column_corpus,
    sample_episode,
    spans_from_tags,
)
from .errors import ConfigError
from .inference_eval import (
    VARIANTS,
    AblationConfig,
    EvalReport,
    ModelBundle,
    PipelineConfig,
    dataset_evaluation,
    episode_evaluation,
    run_ablation,
    train_bundle,
)
from .lora import CompositionWeights, LoRAConfig
from .prompting import SCHEMA_SEP, PAIR_SEP, Template, serialize_output
from .span_detector import SpanTrainConfig
from .tokenizer import Tokenizer
from .type_classifier import TypeTrainConfig

# Built-in defaults, sized for the tiny reference backbone. Decoding, lambda,
# epochs, cutoff and weight decay are the reference method's values; learning
# rates, batch size and adapter shape are rescaled because a 2-layer, 64-wide
# model with a frozen tied output layer does not learn at the 7B settings.
DEFAULTS: dict[str, Any] = {
    "run.seed": 0,
    "run.seeds": "0,1,2,3,4",
    "run.jobs": 1,
    "run.protocol": "episode",
    "run.variants": "full",
    "backbone.checkpoint": "",
    "backbone.tokenizer": "",
    "backbone.n_layers": 2,
    "backbone.hidden_dim": 64,
    "backbone.n_heads": 4,
    "backbone.max_positions": 256,
    "backbone.pretrain_sequences": 24000,
    "backbone.pretrain_epochs": 4,
    "backbone.pretrain_lr": 3e-3,
    "backbone.pretrain_batch": 16,
    "stage.span.lr": 3e-3,
    "stage.span.epochs": 5,
    "stage.span.batch_size": 8,
    "stage.span.cutoff": 256,
    "stage.span.lambda": 0.001,
    "stage.span.layer": "",
    "stage.span.weight_decay": 0.01,
    "stage.span.reduction": "sum",
    "stage.span.template": "span_compact",
    "stage.type.lr": 1e-2,
    "stage.type.epochs": 5,
    "stage.type.support_epochs": 5,
    "stage.type.cutoff": 256,
    "stage.type.layer": "",
    "stage.type.weight_decay": 0.01,
    "stage.type.use_type_names": True,
    "stage.type.use_support_spans": True,
    "stage.type.verbatim_sign": False,
    "stage.type.template": "type_compact",
    "lora.rank": 8,
    "lora.alpha": 4.0,
    "lora.dropout": 0.05,
    "lora.sites": "attn.q,attn.k,attn.v,attn.o,mlp.fc1,mlp.fc2",
    "generation.temperature": 0.0,
    "generation.top_p": 1.0,
    "generation.top_k": 65536,
    "generation.num_beams": 4,
    "generation.max_new_tokens": 128,
    "compose.l1": 0.05,
    "compose.budget": 200,
    "compose.bound": 1.5,
    "ablation.basd": True,
    "ablation.dal": True,
    "ablation.sdf": True,
    "ablation.tcf": True,
    "data.train": "",
    "data.test": "",
    "data.catalog": "",
    "synth.n_classes": 4,
    "synth.n_domains": 1,
    "synth.sentences_per_domain": 1000,
    "synth.test_sentences": 200,
    "synth.entity_vocab_size": 12,
    "synth.filler_vocab_size": 40,
    "synth.entity_density": 0.3,
    "synth.length_min": 6,
    "synth.length_max": 12,
    "synth.entity_length_min": 1,
    "synth.entity_length_max": 3,
    "synth.target_domain": 0,
    "eval.n_way": 4,
    "eval.k_shot": 5,
    "eval.query_shots": 5,
    "eval.episodes": 2,
    "eval.type_episodes": 100,
}


def _parse_value(key: str, raw: Any) -> Any:
    default = DEFAULTS[key]
    if not isinstance(raw, str):
        if isinstance(default, bool) and not isinstance(raw, bool):
            raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
        if isinstance(default, float) and isinstance(raw, int) and not isinstance(raw, bool):
            return float(raw)
        return raw
    text = raw.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return text


@dataclass(frozen=True)
class RunConfig:
    values: Mapping[str, Any]

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(dict(DEFAULTS))

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Mapping[str, Any] | None = None) -> "RunConfig":
        cfg = cls.default()
        if path:
            cfg = cfg.merged(read_ini(path))
        if overrides:
            cfg = cfg.merged(overrides)
        return cfg

    def merged(self, updates: Mapping[str, Any]) -> "RunConfig":
        vals = dict(self.values)
        for k, v in updates.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown configuration key {k!r}")
            vals[k] = _parse_value(k, v)
        return RunConfig(vals)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def opt_int(self, key: str) -> int | None:
        v = self.values[key]
        return None if v in ("", None) else int(v)

    def seeds(self) -> list[int]:
        return [int(s) for s in str(self["run.seeds"]).split(",") if s.strip()]

    def to_ini(self) -> str:
        sections: dict[str, dict[str, str]] = {}
        for k in DEFAULTS:
            sec, _, name = k.rpartition(".")
            v = self.values[k]
            sections.setdefault(sec, {})[name] = str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_dict(sections)
        lines = []
        for sec in parser.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in parser[sec].items()]
            lines.append("")
        return "\n".join(lines)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_ini(), encoding="utf-8")

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]

    # typed views -----------------------------------------------------------

    def lora(self) -> LoRAConfig:
        sites = tuple(s.strip() for s in self["lora.sites"].split(",") if s.strip())
        return LoRAConfig(self["lora.rank"], self["lora.alpha"], self["lora.dropout"], sites)

    def span_config(self) -> SpanTrainConfig:
        return SpanTrainConfig(
            learning_rate=self["stage.span.lr"],
            epochs=self["stage.span.epochs"],
            batch_size=self["stage.span.batch_size"],
            cutoff=self["stage.span.cutoff"],
            lam=self["stage.span.lambda"],
            contrastive_layer=self.opt_int("stage.span.layer"),
            weight_decay=self["stage.span.weight_decay"],
            seed=self["run.seed"],
            sim_reduction=self["stage.span.reduction"],
            lora=self.lora(),
        )

    def type_config(self) -> TypeTrainConfig:
        return TypeTrainConfig(
            learning_rate=self["stage.type.lr"],
            epochs=self["stage.type.epochs"],
            support_epochs=self["stage.type.support_epochs"],
            cutoff=self["stage.type.cutoff"],
            layer=self.opt_int("stage.type.layer"),
            weight_decay=self["stage.type.weight_decay"],
            seed=self["run.seed"],
            use_type_names=self["stage.type.use_type_names"],
            use_support_spans=self["stage.type.use_support_spans"],
            verbatim_sign=self["stage.type.verbatim_sign"],
            lora=self.lora(),
        )

    def generation(self) -> GenerationParams:
        return GenerationParams(
            temperature=self["generation.temperature"],
            top_p=self["generation.top_p"],
            top_k=self["generation.top_k"],
            num_beams=self["generation.num_beams"],
            max_new_tokens=self["generation.max_new_tokens"],
            seed=self["run.seed"],
        )

    def composition(self) -> CompositionWeights:
        return CompositionWeights(
            l1_coefficient=self["compose.l1"], search_budget=self["compose.budget"], seed=self["run.seed"], bound=self["compose.bound"],
        )

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.span_config(), self.type_config(), self.generation(), self.composition())

    def ablation(self) -> AblationConfig:
        return AblationConfig(self["ablation.basd"], self["ablation.dal"], self["ablation.sdf"], self["ablation.tcf"])

    def synthetic_spec(self) -> SyntheticSpec:
        n = self["synth.n_classes"]
        return SyntheticSpec(
            n_classes=n,
            n_sentences=self["synth.sentences_per_domain"],
            entity_vocab_size=self["synth.entity_vocab_size"],
            filler_vocab_size=self["synth.filler_vocab_size"],
            entity_density=self["synth.entity_density"],
            length_range=(self["synth.length_min"], self["synth.length_max"]),
            entity_length_range=(self["synth.entity_length_min"], self["synth.entity_length_max"]),
            type_names=SYNTHETIC_TYPES[:n] if n <= len(SYNTHETIC_TYPES) else None,
        )


def read_ini(path: str | Path) -> dict[str, str]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(p, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{p}: {e}") from None
    out = {}
    for sec in parser.sections():
        for k, v in parser[sec].items():
            out[f"{sec}.{k}"] = v
    return out


# ---------------------------------------------------------------------------
# data


@dataclass
class ExperimentData:
    catalog: TypeCatalog
    domains: dict[str, list[LabeledSentence]]
    test: list[LabeledSentence]

    @property
    def span_corpus(self) -> list[LabeledSentence]:
        return [s for sents in self.domains.values() for s in sents]


def synthetic_data(cfg: RunConfig) -> ExperimentData:
    """Source domains sharing one word pool plus a held-out test split of the target domain."""
    spec = cfg.synthetic_spec()
    seed = cfg["run.seed"]
    n_domains = cfg["synth.n_domains"]
    vocabs, filler = domain_vocabularies(spec, n_domains, seed)
    domains = {}
    for d, vocab in enumerate(vocabs):
        dspec = replace(spec, entity_vocab=vocab, filler_vocab=filler)
        domains[f"domain{d}"] = generate_synthetic_corpus(dspec, seed=1000 * seed + d)
    target = cfg["synth.target_domain"]
    if not 0 <= target < n_domains:
        raise ConfigError(f"synth.target_domain {target} outside [0, {n_domains})")
    tspec = replace(spec, entity_vocab=vocabs[target], filler_vocab=filler, n_sentences=cfg["synth.test_sentences"])
    test = generate_synthetic_corpus(tspec, seed=1000 * seed + 500 + target)
    return ExperimentData(spec.catalog(), domains, test)


def file_data(cfg: RunConfig) -> ExperimentData:
    for key in ("data.train", "data.test"):
        if not cfg[key]:
            raise ConfigError(f"{key} must be set when no synthetic corpus is used")
    name = cfg["data.catalog"]
    if not name:
        raise ConfigError("data.catalog must name a built-in catalog or a JSON catalog file")
    catalog = TypeCatalog.from_dict(json.loads(Path(name).read_text())) if Path(name).exists() else TypeCatalog.builtin(name)
    domains = {}
    for i, path in enumerate(p.strip() for p in cfg["data.train"].split(",")):
        domains[Path(path).stem or f"domain{i}"] = load_column_corpus(path, catalog)
    return ExperimentData(catalog, domains, load_column_corpus(cfg["data.test"], catalog))


def load_data(cfg: RunConfig) -> ExperimentData:
    return file_data(cfg) if cfg["data.train"] else synthetic_data(cfg)


def type_episodes(cfg: RunConfig, data: ExperimentData) -> dict[str, list[Episode]]:
    out = {}
    n_way = min(cfg["eval.n_way"], len(data.catalog))
    for d, (name, sents) in enumerate(data.domains.items()):
        out[name] = [
            sample_episode(sents, n_way, cfg["eval.k_shot"], cfg["eval.query_shots"], seed=10_000 * cfg["run.seed"] + 100 * d + i)
            for i in range(cfg["eval.type_episodes"])
        ]
    return out


def eval_episodes(cfg: RunConfig, data: ExperimentData, seed: int) -> list[Episode]:
    n_way = min(cfg["eval.n_way"], len(data.catalog))
    return [
        sample_episode(data.test, n_way, cfg["eval.k_shot"], cfg["eval.query_shots"], seed=7919 * seed + j)
        for j in range(cfg["eval.episodes"])
    ]


# ---------------------------------------------------------------------------
# backbone


def build_tokenizer(data: ExperimentData, templates: Sequence[Template]) -> Tokenizer:
    texts = [t.text for t in templates] + list(data.catalog.names) + [SCHEMA_SEP, PAIR_SEP]
    words = [w for sents in list(data.domains.values()) + [data.test] for s in sents for w in s.tokens]
    return Tokenizer.build(texts, words)


def pretraining_sequences(
    tokenizer: Tokenizer,
    sentences: Sequence[LabeledSentence],
    type_names: Sequence[str],
    template: Template,
    n: int,
    seed: int,
    spec: SyntheticSpec = SyntheticSpec(),
) -> tuple[list[list[int]], list[list[bool]]]:
    """Generic span-listing corpus for pre-training the reference backbone.

    Entity words (split into starting and continuing words) and filler words
    are taken from ``sentences``; fresh sentences are assembled from them with
    at least one filler between entities, and the answer lists every entity
    surface without types. The backbone thus learns the output format, copying
    and which words tend to be names, but never sees two adjacent entities
    and never sees a type.
    """
    heads: dict[str, None] = {}
    tails: dict[str, None] = {}
    filler: dict[str, None] = {}
    for sent in sentences:
        for w, t in zip(sent.tokens, sent.tags):
            (heads if t.startswith("B-") else tails if t.startswith("I-") else filler).setdefault(w)
    heads_l, tails_l, filler_l = list(heads), list(tails) or list(heads), list(filler)
    if not heads_l or not filler_l:
        raise ConfigError("pre-training needs entity and non-entity words in the training corpus")
    rng = random.Random(f"pretrain:{seed}")
    lo, hi = spec.length_range
    elo, ehi = spec.entity_length_range
    seqs, masks = [], []
    for _ in range(n):
        n_fill = rng.randint(max(1, lo // 2), hi)
        fill = [rng.choice(filler_l) for _ in range(n_fill)]
        n_blocks = min(n_fill + 1, max(0, round(spec.entity_density * n_fill / max(1e-9, 1 - spec.entity_density) / ((elo + ehi) / 2) + rng.random() - 0.5)))
        gaps = sorted(rng.sample(range(n_fill + 1), n_blocks))
        blocks = [[rng.choice(heads_l)] + [rng.choice(tails_l) for _ in range(rng.randint(elo, ehi) - 1)] for _ in gaps]
        words: list[str] = []
        spans = []
        bi = 0
        for g in range(n_fill + 1):
            if bi < len(gaps) and gaps[bi] == g:
                spans.append(" ".join(blocks[bi]))
                words += blocks[bi]
                bi += 1
            if g < n_fill:
                words.append(fill[g])
        names = rng.sample(list(type_names), rng.randint(1, len(type_names)))
        prompt = tokenizer.encode(template.text.format(schema=SCHEMA_SEP.join(names), sentence=" ".join(words), candidates=""))
        target = tokenizer.encode(serialize_output(spans))
        seqs.append(prompt + target)
        masks.append([False] * len(prompt) + [True] * len(target))
    return seqs, masks


def build_backbone(cfg: RunConfig, data: ExperimentData, span_template: Template, type_template: Template, log: list | None = None):
    """Load a checkpoint, or pre-train the reference backbone on the generic listing task."""
    if cfg["backbone.checkpoint"]:
        if not cfg["backbone.tokenizer"]:
            raise ConfigError("backbone.tokenizer is required with backbone.checkpoint")
        for key in ("backbone.checkpoint", "backbone.tokenizer"):
            if not Path(cfg[key]).exists():
                raise ConfigError(f"{key} not found: {cfg[key]}")
        return load_backbone(cfg["backbone.checkpoint"]), Tokenizer.load(cfg["backbone.tokenizer"])
    tok = build_tokenizer(data, [span_template, type_template])
    bcfg = BackboneConfig(
        vocab_size=len(tok),
        n_layers=cfg["backbone.n_layers"],
        hidden_dim=cfg["backbone.hidden_dim"],
        n_heads=cfg["backbone.n_heads"],
        max_positions=cfg["backbone.max_positions"],
        pad_id=tok.pad_id,
    )
    model = TinyTransformer(bcfg, seed=cfg["run.seed"])
    spec = cfg.synthetic_spec()
    seqs, masks = pretraining_sequences(tok, data.span_corpus, data.catalog.names, span_template, cfg["backbone.pretrain_sequences"], cfg["run.seed"], spec)
    if seqs and cfg["backbone.pretrain_epochs"] > 0:
        train_lm(model, seqs, cfg["backbone.pretrain_epochs"], cfg["backbone.pretrain_lr"], cfg["backbone.pretrain_batch"],
                 cfg["run.seed"], masks, log)
    model.freeze()
    return model, tok


# ---------------------------------------------------------------------------
# driver


@dataclass
class Experiment:
    cfg: RunConfig
    data: ExperimentData
    model: TinyTransformer
    tokenizer: Tokenizer
    span_template: Template
    type_template: Template
    type_domains: dict[str, list[Episode]]

    @classmethod
    def setup(cls, cfg: RunConfig, log: list | None = None) -> "Experiment":
        torch.set_num_threads(1)
        span_t = Template.builtin(cfg["stage.span.template"])
        type_t = Template.builtin(cfg["stage.type.template"])
        data = load_data(cfg)
        model, tok = build_backbone(cfg, data, span_t, type_t, log)
        return cls(cfg, data, model, tok, span_t, type_t, type_episodes(cfg, data))

    def train(self, ablation: AblationConfig, reuse: ModelBundle | None = None, log: list | None = None) -> ModelBundle:
        return train_bundle(
            self.model, self.tokenizer, self.data.catalog, self.data.span_corpus, self.type_domains,
            self.cfg.pipeline(), ablation, self.span_template, self.type_template, log=log, reuse=reuse,
        )

    def evaluate(self, bundle: ModelBundle, variant: str = "full") -> EvalReport:
        cfg = self.cfg
        if cfg["run.protocol"] == "dataset":
            rep = dataset_evaluation(bundle, self.data.test, cfg["eval.k_shot"], cfg.seeds(), jobs=cfg["run.jobs"], variant=variant)
        elif cfg["run.protocol"] == "episode":
            episodes = {s: eval_episodes(cfg, self.data, s) for s in cfg.seeds()}
            rep = episode_evaluation(bundle, episodes, cfg.seeds(), jobs=cfg["run.jobs"], variant=variant)
        else:
            raise ConfigError(f"unknown run.protocol {cfg['run.protocol']!r}")
        rep.config["run_config"] = dict(cfg.values)
        return rep

    def run(self, variants: Sequence[str] | None = None, log: list | None = None) -> dict[str, EvalReport]:
        names = list(variants or [v.strip() for v in self.cfg["run.variants"].split(",") if v.strip()])
        if names == ["full"]:
            ab = self.cfg.ablation()
            return {"full": self.evaluate(self.train(ab, log=log), "full")}
        return run_ablation(names, lambda ab, reuse: self.train(ab, reuse, log), self.evaluate)


def run_experiment(cfg: RunConfig, variants: Sequence[str] | None = None, log: list | None = None) -> dict[str, EvalReport]:
    return Experiment.setup(cfg, log).run(variants, log)


def save_backbone_files(exp: Experiment, out_dir: str | Path) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, vocab = out / "backbone.npz", out / "vocab.json"
    save_backbone(exp.model, ckpt)
    exp.tokenizer.save(vocab)
    return ckpt, vocab


__all__ = ["DEFAULTS", "RunConfig", "Experiment", "ExperimentData", "VARIANTS", "run_experiment", "read_ini"]
