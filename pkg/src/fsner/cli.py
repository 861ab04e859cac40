"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config or input
files), 2 runtime error, 3 numeric abort during training.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .corpus import (
    LabeledSentence,
    SyntheticSpec,
    TypeCatalog,
    domain_vocabularies,
    generate_synthetic_corpus,
    load_column_corpus,
    write_column_corpus,
)
from .errors import ConfigError, FsnerError, ValidationError
from .experiment import DEFAULTS, Experiment, ExperimentData, RunConfig, build_backbone, save_backbone_files, type_episodes
from .inference_eval import VARIANTS, ModelBundle, adapt_episode, compose, infer, write_reports
from .lora import load_adapter, save_adapter
from .prompting import Template
from .span_detector import train_span_stage
from .type_classifier import composition_objective, support_prompts, tune_domain_adapter


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output directory bookkeeping: config snapshot, outputs and the manifest."""

    def __init__(self, command: str, cfg: RunConfig, out: str | Path, inputs: Sequence[str | Path] = ()):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs = [Path(p) for p in inputs if p]
        self.outputs: list[Path] = []
        self.start = time.perf_counter()
        cfg.write(self.out / "config.ini")

    def output(self, name: str) -> Path:
        path = self.out / name
        self.outputs.append(path)
        return path

    def finish(self, extra: dict | None = None) -> None:
        manifest = {
            "command": self.command,
            "version": __version__,
            "seed": self.cfg["run.seed"],
            "config_digest": self.cfg.digest(),
            "config": dict(self.cfg.values),
            "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in self.inputs if p.is_file()],
            "outputs": [{"path": str(p), "sha256": _sha256(p)} for p in self.outputs if p.is_file()],
            "wall_time_s": round(time.perf_counter() - self.start, 3),
        }
        if extra:
            manifest.update(extra)
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")


# ---------------------------------------------------------------------------
# config assembly


def _parse_sets(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value
    return out


FLAG_KEYS = {
    "seed": "run.seed",
    "seeds": "run.seeds",
    "jobs": "run.jobs",
    "protocol": "run.protocol",
    "variants": "run.variants",
    "lam": "stage.span.lambda",
    "budget": "compose.budget",
    "l1": "compose.l1",
    "backbone": "backbone.checkpoint",
    "vocab": "backbone.tokenizer",
    "catalog": "data.catalog",
}


def _config(args) -> RunConfig:
    # precedence: defaults < --config file < --set < dedicated flags
    overrides = _parse_sets(getattr(args, "set", None) or [])
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            overrides[key] = v
    cfg = RunConfig.load(args.config, overrides)
    for key in ("backbone.checkpoint", "backbone.tokenizer"):
        if cfg[key] and not Path(cfg[key]).exists():
            raise ConfigError(f"{key} not found: {cfg[key]}")
    return cfg


def _require(paths: Sequence[str | None]) -> None:
    for p in paths:
        if p and not Path(p).exists():
            raise ValidationError(f"path not found: {p}")


def _catalog(cfg: RunConfig) -> TypeCatalog:
    name = cfg["data.catalog"]
    if not name:
        raise ConfigError("a type catalog is required (--catalog NAME|FILE)")
    if Path(name).exists():
        return TypeCatalog.from_dict(json.loads(Path(name).read_text(encoding="utf-8")))
    return TypeCatalog.builtin(name)


def _backbone(cfg: RunConfig, data: ExperimentData, run: Run | None = None):
    span_t = Template.builtin(cfg["stage.span.template"])
    type_t = Template.builtin(cfg["stage.type.template"])
    model, tok = build_backbone(cfg, data, span_t, type_t)
    if run is not None and not cfg["backbone.checkpoint"]:
        holder = Experiment(cfg, data, model, tok, span_t, type_t, {})
        for p in save_backbone_files(holder, run.out):
            run.outputs.append(p)
    return model, tok, span_t, type_t


def _write_log(path: Path, header: dict, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps({"type": "header", **header}) + "\n")
        for r in records:
            f.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_train_span(args) -> int:
    _require(args.train)
    cfg = _config(args)
    catalog = _catalog(cfg)
    domains = {Path(p).stem: load_column_corpus(p, catalog) for p in args.train}
    data = ExperimentData(catalog, domains, [])
    run = Run("train-span", cfg, args.out, args.train)
    model, tok, span_t, _ = _backbone(cfg, data, run)
    span_cfg = cfg.span_config()
    log: list[dict] = []
    adapter = train_span_stage(data.span_corpus, model, tok, span_t, catalog, span_cfg, log=log)
    adapter.meta = {"config": dict(cfg.values), "catalog": catalog.to_dict()}
    save_adapter(adapter, run.output("span.lora"))
    _write_log(run.output("train_span.log.jsonl"), {"lambda": span_cfg.lam, "config": dict(cfg.values)}, log)
    run.finish({"steps": len(log)})
    print(f"span adapter: {run.out / 'span.lora'} ({len(log)} steps, lambda={span_cfg.lam})")
    return 0


def cmd_train_type(args) -> int:
    _require(args.train)
    cfg = _config(args)
    catalog = _catalog(cfg)
    domains = {Path(p).stem: load_column_corpus(p, catalog) for p in args.train}
    data = ExperimentData(catalog, domains, [])
    run = Run("train-type", cfg, args.out, args.train)
    model, tok, _, type_t = _backbone(cfg, data, run)
    episodes = type_episodes(cfg, data)
    log: list[dict] = []
    written = []
    for name, eps in episodes.items():
        adapter = tune_domain_adapter(eps, model, tok, type_t, catalog, cfg.type_config(), domain_tag=name, log=log)
        adapter.meta = {"config": dict(cfg.values), "catalog": catalog.to_dict()}
        path = run.output(f"type_{name}.lora")
        save_adapter(adapter, path)
        written.append(path)
    _write_log(run.output("train_type.log.jsonl"), {"config": dict(cfg.values)}, log)
    run.finish({"domains": list(episodes)})
    for p in written:
        print(f"type adapter: {p}")
    return 0


def _load_bundle_parts(cfg: RunConfig, support_path: str, catalog: TypeCatalog, run: Run):
    if not cfg["backbone.checkpoint"]:
        raise ConfigError("--backbone and --vocab are required: adapters only fit the backbone they were trained on")
    support = load_column_corpus(support_path, catalog)
    data = ExperimentData(catalog, {"support": support}, [])
    model, tok, span_t, type_t = _backbone(cfg, data, run)
    return support, model, tok, span_t, type_t


def cmd_compose(args) -> int:
    _require(list(args.adapters) + [args.support])
    cfg = _config(args)
    catalog = _catalog(cfg)
    run = Run("compose", cfg, args.out, list(args.adapters) + [args.support])
    support, model, tok, _, type_t = _load_bundle_parts(cfg, args.support, catalog, run)
    shapes = model.config.site_shapes(cfg.lora().sites)
    adapters = [load_adapter(p, expected_stage="type") for p in args.adapters]
    for a in adapters:
        load_shapes = {s: (a.factors[s][0].shape[0], a.factors[s][1].shape[1]) for s in a.sites}
        if any(shapes.get(s) != v for s, v in load_shapes.items()):
            raise ValidationError("adapter shapes do not match the backbone")
    prompts = support_prompts(support, catalog, type_t, tok, cfg["stage.type.cutoff"])
    loss_fn = composition_objective(adapters, prompts, model, cfg.type_config())
    merged, weights = compose(adapters, loss_fn, cfg.composition())
    merged.meta = {"config": dict(cfg.values), "weights": weights.to_dict()}
    save_adapter(merged, run.output("composed.lora"))
    report = {
        "adapters": [str(p) for p in args.adapters],
        "domains": [a.domain_tag for a in adapters],
        "weights": dict(zip([a.domain_tag or str(p) for a, p in zip(adapters, args.adapters)], weights.w)),
        "search_budget": weights.search_budget,
        "l1_coefficient": weights.l1_coefficient,
        "evaluations": weights.evaluations,
        "loss": weights.loss,
        "objective": weights.objective,
    }
    run.output("weights.json").write_text(json.dumps(report, indent=1), encoding="utf-8")
    run.finish()
    print(json.dumps(report, indent=1))
    return 0


def cmd_infer(args) -> int:
    _require([args.span_adapter, args.support, args.input] + list(args.type_adapter))
    cfg = _config(args)
    catalog = _catalog(cfg)
    run = Run("infer", cfg, args.out, [args.span_adapter, args.support, args.input] + list(args.type_adapter))
    support, model, tok, span_t, type_t = _load_bundle_parts(cfg, args.support, catalog, run)
    sentences = load_column_corpus(args.input, catalog)
    span_ad = load_adapter(args.span_adapter, expected_stage="span")
    type_ads = [load_adapter(p, expected_stage="type") for p in args.type_adapter]
    ab = cfg.ablation()
    bundle = ModelBundle(model, tok, catalog, span_t, type_t, cfg.pipeline(), ab, span_ad, type_ads)
    adapted = adapt_episode(bundle, support, catalog, cfg["run.seed"])
    out = run.output("predictions.jsonl")
    malformed = dropped = n_spans = 0
    with open(out, "w", encoding="utf-8") as f:
        for s in sentences:
            pred = infer(s, bundle, adapted)
            malformed += pred.malformed
            dropped += pred.dropped
            n_spans += len(pred.spans)
            f.write(json.dumps(pred.to_record()) + "\n")
    summary = {"sentences": len(sentences), "spans": n_spans, "malformed": malformed, "dropped": dropped}
    run.output("summary.json").write_text(json.dumps(summary, indent=1), encoding="utf-8")
    run.finish(summary)
    print(json.dumps(summary))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    for key in ("data.train", "data.test"):
        if cfg[key]:
            _require([p.strip() for p in cfg[key].split(",")])
    if args.variants == "all":
        cfg = cfg.merged({"run.variants": ",".join(VARIANTS)})
    run = Run("evaluate", cfg, args.out)
    log: list[dict] = []
    exp = Experiment.setup(cfg, log)
    reports = exp.run(log=log)
    for p in write_reports(reports, run.out).values():
        run.outputs.append(p)
    _write_log(run.output("train.log.jsonl"), {"lambda": cfg["stage.span.lambda"], "config": dict(cfg.values)}, log)
    run.finish({"variants": list(reports)})
    print((run.out / "table.md").read_text(encoding="utf-8"), end="")
    return 0


def cmd_synth(args) -> int:
    overrides = {
        "synth.n_classes": args.classes,
        "synth.sentences_per_domain": args.sentences,
        "synth.entity_density": args.density,
        "synth.n_domains": args.domains,
    }
    args.set = list(args.set or []) + [f"{k}={v}" for k, v in overrides.items() if v is not None]
    cfg = _config(args)
    spec = cfg.synthetic_spec()
    run = Run("synth", cfg, args.out)
    vocabs, filler = domain_vocabularies(spec, cfg["synth.n_domains"], cfg["run.seed"])
    counts = {}
    for d, vocab in enumerate(vocabs):
        sents = generate_synthetic_corpus(replace(spec, entity_vocab=vocab, filler_vocab=filler), seed=1000 * cfg["run.seed"] + d)
        path = run.output(f"domain{d}.conll")
        write_column_corpus(sents, path)
        counts[path.name] = len(sents)
    run.output("catalog.json").write_text(json.dumps(spec.catalog().to_dict(), indent=1), encoding="utf-8")
    run.finish({"density": spec.entity_density, "files": counts})
    print(json.dumps({"out": str(run.out), "density": spec.entity_density, "files": counts}))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fsner", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"fsner {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default: str):
        p.add_argument("--config", help="INI file with sectioned keys")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)
        p.add_argument("--backbone", help="backbone checkpoint (.npz)")
        p.add_argument("--vocab", help="tokenizer vocabulary (.json)")
        p.add_argument("--catalog", help="built-in catalog name or JSON catalog file")

    p = sub.add_parser("train-span", help="train the span-detection adapter")
    common(p, "runs/span")
    p.add_argument("--train", nargs="+", required=True, help="column-format training corpora")
    p.add_argument("--lambda", dest="lam", type=float, help="contrastive loss weight")
    p.set_defaults(func=cmd_train_span)

    p = sub.add_parser("train-type", help="train one type-classification adapter per domain")
    common(p, "runs/type")
    p.add_argument("--train", nargs="+", required=True, help="one column-format corpus per domain")
    p.set_defaults(func=cmd_train_type)

    p = sub.add_parser("compose", help="search composition weights on a support set and merge")
    common(p, "runs/compose")
    p.add_argument("adapters", nargs="+", help="type-stage adapter files")
    p.add_argument("--support", required=True, help="column-format support set")
    p.add_argument("--budget", type=int, help="loss evaluations for the weight search")
    p.add_argument("--l1", type=float, help="L1 penalty on the weights")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("infer", help="predict entities for a column-format file")
    common(p, "runs/infer")
    p.add_argument("--span-adapter", required=True)
    p.add_argument("--type-adapter", nargs="+", required=True, help="one or more type adapters (composed when several)")
    p.add_argument("--support", required=True, help="column-format support set")
    p.add_argument("--input", required=True, help="column-format sentences to label")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="train, adapt and score over seeds; write report files")
    common(p, "runs/eval")
    p.add_argument("--seeds", help="comma-separated evaluation seeds")
    p.add_argument("--protocol", choices=("episode", "dataset"))
    p.add_argument("--variants", help="comma-separated ablation variants, or 'all'")
    p.add_argument("--lambda", dest="lam", type=float, help="contrastive loss weight")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="write synthetic column-format corpora")
    common(p, "runs/synth")
    p.add_argument("--classes", type=int)
    p.add_argument("--sentences", type=int)
    p.add_argument("--density", type=float)
    p.add_argument("--domains", type=int)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except FsnerError as e:
        print(f"fsner: error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, KeyError, ValueError) as e:
        print(f"fsner: error: {e}", file=sys.stderr)
        return 1 if isinstance(e, (OSError, ValueError)) else 2
    except RuntimeError as e:
        print(f"fsner: runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
