"""Command-line entry point.

    pacrnn generate CONFIG   write toy corpora
    pacrnn train    CONFIG   train one variant; model, metrics and timing logs
    pacrnn adapt    CONFIG   closest-language transfer, or adapt a saved model
    pacrnn lid      CONFIG   train LID and print the closest-language decision
    pacrnn eval     CONFIG   print mean J and FER for a model/corpus pair
    pacrnn plot     LOG...   learning-curve image and summary tables

Experiments are described by a YAML config file (see ``RunConfig`` and the
annotated example in the README); ``--seed`` and ``--output-dir`` are the
only overrides.  Relative output directories live under
``$PACRNN_OUTPUT_ROOT`` (default ``runs``).  Every command writes the fully
resolved config to ``resolved_config.json`` in its output directory.

Failures print one line ``error: <ErrorClass>: <message>`` on stderr and
exit with status 2.
"""

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import yaml

from .data import (FeatureRecipe, FeatureStats, feature_stats, generate_toy_corpus,
                   make_toy_spec, normalize, perturb_spec, prepare_for_variant, read_corpus,
                   toy_language_family, write_corpus)
from .errors import ConfigError, PacRnnError
from .model import TOY_SIZES, PacRnnConfig, build_model
from .modelfile import load_model, save_model
from .multilingual import (LidModel, NetSpec, TransferSettings, adapt_network,
                           closest_language_pipeline, select_closest_language, train_lid)
from .tensor import Rng
from .trainer import BpttPlan, Schedule, evaluate, read_metrics, train

OUTPUT_ROOT_ENV = "PACRNN_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"


# ----------------------------------------------------------------------------
# config
# ----------------------------------------------------------------------------

@dataclass
class DataSection:
    language: str = "toy"
    phoneme_count: int = 10
    states_per_phoneme: int = 3
    feature_dim: int = 24
    separation: float = 0.6
    dominance: float = 0.75
    train_utterances: int = 200
    dev_utterances: int = 50
    length_range: list = field(default_factory=lambda: [80, 200])
    train: str = None
    dev: str = None


@dataclass
class FeatureSection:
    half_window: int = 15
    step: int = 5
    label_delay: int = 5


@dataclass
class ScheduleSection:
    base_lr: float = None
    ramp: float = 10.0
    main_momentum: float = 0.9
    max_epochs: int = 15
    lr_floor_divisor: float = 64.0


@dataclass
class TrainingSection:
    chunk_frames: int = 20
    parallel_utterances: int = 20
    normalization: str = "frame"
    clip: float = 0.3
    stop_fer: float = None


@dataclass
class TransferSection:
    sources: list = field(default_factory=lambda: ["src-a", "src-b", "src-c"])
    magnitudes: dict = field(default_factory=lambda: {"src-a": 0.4, "src-b": 0.8,
                                                      "src-c": 1.2})
    target: str = "tgt"
    target_parent: str = "src-a"
    target_magnitude: float = 0.2
    source_train_utterances: int = 150
    source_dev_utterances: int = 30
    target_train_utterances: int = 40
    target_dev_utterances: int = 30
    stage1_hidden: list = field(default_factory=lambda: [128, 128])
    stage1_bottleneck: int = 32
    stage1_post: list = field(default_factory=lambda: [128])
    lid_hidden: int = 64
    stage1_epochs: int = 8
    stage1_adapt_epochs: int = 3
    lid_epochs: int = 5
    closest_epochs: int = 10
    adapt_epochs: int = 12
    fer_threshold: float = 0.5
    donor_model: str = None
    mode: str = "replace_head"


@dataclass
class EvalSection:
    model: str = None
    corpus: str = None
    untrained: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "pacrnn-run"
    data: DataSection = field(default_factory=DataSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    model: dict = field(default_factory=dict)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    transfer: TransferSection = field(default_factory=TransferSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self):
        return asdict(self)


_SECTIONS = {"data": DataSection, "features": FeatureSection, "schedule": ScheduleSection,
             "training": TrainingSection, "transfer": TransferSection, "eval": EvalSection}


def _strict(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    return cls(**data)


def _model_defaults():
    base = PacRnnConfig(variant="dnn", **TOY_SIZES).to_dict()
    # these follow from the data unless set explicitly
    for key in ("feature_dim", "state_classes", "phoneme_classes"):
        base[key] = None
    return base


def parse_config(data):
    """RunConfig from a mapping; unknown keys anywhere are errors."""
    data = dict(data or {})
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = _strict(cls, data.pop(name, None), name)
    model = data.pop("model", None) or {}
    if not isinstance(model, dict):
        raise ConfigError("model: expected a mapping")
    resolved_model = _model_defaults()
    unknown = sorted(set(model) - set(resolved_model))
    if unknown:
        raise ConfigError(f"model: unknown keys {unknown}")
    resolved_model.update(model)
    top = _strict(RunConfig, {k: v for k, v in data.items()}, "config")
    cfg = replace(top, model=resolved_model, **sections)
    if cfg.training.normalization not in ("frame", "sum"):
        raise ConfigError("training.normalization must be 'frame' or 'sum'")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})".replace("\n", " ")) from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data)


def output_dir(cfg):
    path = cfg.output_dir
    if not os.path.isabs(path):
        path = os.path.join(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT), path)
    os.makedirs(path, exist_ok=True)
    return path


def write_resolved(cfg, out):
    path = os.path.join(out, "resolved_config.json")
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ----------------------------------------------------------------------------
# shared plumbing
# ----------------------------------------------------------------------------

def toy_spec(cfg):
    d = cfg.data
    return make_toy_spec(d.language, seed=cfg.seed, phoneme_count=d.phoneme_count,
                         states_per_phoneme=d.states_per_phoneme, feature_dim=d.feature_dim,
                         separation=d.separation, dominance=d.dominance)


def toy_corpora(cfg):
    """Raw (train, dev) corpora: from files if configured, else generated."""
    d = cfg.data
    if d.train or d.dev:
        if not (d.train and d.dev):
            raise ConfigError("data.train and data.dev must be given together")
        return read_corpus(d.train), read_corpus(d.dev)
    spec = toy_spec(cfg)
    lr = tuple(d.length_range)
    train_c = generate_toy_corpus(spec, d.train_utterances, lr, seed=cfg.seed * 1000 + 1,
                                  prefix=f"{d.language}-train")
    dev_c = generate_toy_corpus(spec, d.dev_utterances, lr, seed=cfg.seed * 1000 + 2,
                                prefix=f"{d.language}-dev")
    return train_c, dev_c


def transfer_corpora(cfg):
    """Raw ({tag: (train, dev)}, (target train, target dev)) for the toy family."""
    t, d = cfg.transfer, cfg.data
    if t.target_parent not in t.sources:
        raise ConfigError(f"transfer.target_parent {t.target_parent!r} is not a source")
    family = toy_language_family(t.sources, seed=cfg.seed, magnitudes=t.magnitudes,
                                 phoneme_count=d.phoneme_count,
                                 states_per_phoneme=d.states_per_phoneme,
                                 feature_dim=d.feature_dim, separation=d.separation,
                                 dominance=d.dominance)
    lr = tuple(d.length_range)
    sources = {}
    for k, tag in enumerate(sorted(family)):
        base = cfg.seed * 1000 + 10 * (k + 1)
        sources[tag] = (
            generate_toy_corpus(family[tag], t.source_train_utterances, lr, seed=base,
                                prefix=f"{tag}-train"),
            generate_toy_corpus(family[tag], t.source_dev_utterances, lr, seed=base + 1,
                                prefix=f"{tag}-dev"))
    tspec = perturb_spec(family[t.target_parent], t.target, cfg.seed + 100, t.target_magnitude)
    target = (generate_toy_corpus(tspec, t.target_train_utterances, lr, seed=cfg.seed * 1000 + 5,
                                  prefix=f"{t.target}-train"),
              generate_toy_corpus(tspec, t.target_dev_utterances, lr, seed=cfg.seed * 1000 + 6,
                                  prefix=f"{t.target}-dev"))
    return sources, target


def pooled_stats(corpora):
    first = corpora[0]
    return feature_stats(first.with_utterances([u for c in corpora for u in c.utterances]))


def recipe(cfg):
    f = cfg.features
    return FeatureRecipe(f.half_window, f.step, f.label_delay)


def model_config(cfg, corpus):
    values = dict(cfg.model)
    if values.get("feature_dim") is None:
        values["feature_dim"] = corpus.feature_dim
    if values.get("state_classes") is None:
        values["state_classes"] = corpus.state_classes
    if values.get("phoneme_classes") is None:
        values["phoneme_classes"] = corpus.phoneme_classes
    return PacRnnConfig.from_dict(values).validate()


def schedule(cfg, variant):
    s = {k: v for k, v in asdict(cfg.schedule).items() if v is not None}
    return Schedule.for_variant(variant, **s)


def plan(cfg):
    return BpttPlan(cfg.training.chunk_frames, cfg.training.parallel_utterances)


def stats_extra(stats):
    return {"feature_mean": [float(v) for v in stats.mean],
            "feature_std": [float(v) for v in stats.std]}


def stats_from_extra(extra):
    if "feature_mean" not in extra:
        return None
    return FeatureStats(np.asarray(extra["feature_mean"]), np.asarray(extra["feature_std"]))


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_generate(cfg):
    out = output_dir(cfg)
    train_c, dev_c = toy_corpora(cfg)
    written = {"train": os.path.join(out, "train.corpus"), "dev": os.path.join(out, "dev.corpus")}
    write_corpus(train_c, written["train"])
    write_corpus(dev_c, written["dev"])
    sources, (tt, td) = transfer_corpora(cfg)
    for tag, (a, b) in sources.items():
        for part, corpus in (("train", a), ("dev", b)):
            written[f"{tag}.{part}"] = os.path.join(out, f"{tag}.{part}.corpus")
            write_corpus(corpus, written[f"{tag}.{part}"])
    for part, corpus in (("train", tt), ("dev", td)):
        key = f"{cfg.transfer.target}.{part}"
        written[key] = os.path.join(out, f"{key}.corpus")
        write_corpus(corpus, written[key])
    write_resolved(cfg, out)
    _emit({"command": "generate", "written": written})
    return 0


def cmd_train(cfg):
    out = output_dir(cfg)
    write_resolved(cfg, out)
    train_raw, dev_raw = toy_corpora(cfg)
    train_n, stats = normalize(train_raw)
    dev_n, _ = normalize(dev_raw, stats)
    variant = cfg.model["variant"]
    train_v = prepare_for_variant(train_n, variant, recipe(cfg))
    dev_v = prepare_for_variant(dev_n, variant, recipe(cfg))
    mcfg = model_config(cfg, train_v)
    model = build_model(mcfg, Rng(cfg.seed).child("model"))
    metrics = os.path.join(out, "metrics.jsonl")
    run = train(model, train_v, dev_v, schedule(cfg, variant), plan(cfg), seed=cfg.seed,
                normalization=cfg.training.normalization, clip=cfg.training.clip,
                metrics_path=metrics, timing_path=os.path.join(out, "timing.jsonl"),
                stop_fer=cfg.training.stop_fer)
    model_path = os.path.join(out, "model.pacrnn")
    save_model(model, model_path, extra={**stats_extra(stats), "recipe": asdict(recipe(cfg))})
    _emit({"command": "train", "variant": variant, "epochs": len(run.records),
           "final_dev_FER": run.records[-1]["dev_FER"] if run.records else None,
           "model": model_path, "metrics": metrics})
    return 0


def _settings(cfg):
    t = cfg.transfer
    sizes = {k: v for k, v in cfg.model.items()
             if k not in ("variant", "feature_dim", "state_classes", "phoneme_classes")}
    return TransferSettings(
        variant=cfg.model["variant"], model=sizes,
        stage1=NetSpec(hidden=tuple(t.stage1_hidden), bottleneck=t.stage1_bottleneck,
                       post=tuple(t.stage1_post), half_window=cfg.features.half_window,
                       step=cfg.features.step),
        lid_hidden=t.lid_hidden, stage1_epochs=t.stage1_epochs,
        stage1_adapt_epochs=t.stage1_adapt_epochs, lid_epochs=t.lid_epochs,
        closest_epochs=t.closest_epochs, adapt_epochs=t.adapt_epochs,
        fer_threshold=t.fer_threshold, clip=cfg.training.clip, seed=cfg.seed,
        recipe=recipe(cfg))


def _normalized_family(cfg):
    sources, (tt, td) = transfer_corpora(cfg)
    stats = pooled_stats([a for a, _ in sources.values()])
    sources = {tag: (normalize(a, stats)[0], normalize(b, stats)[0])
               for tag, (a, b) in sources.items()}
    return sources, (normalize(tt, stats)[0], normalize(td, stats)[0]), stats


def cmd_adapt(cfg):
    out = output_dir(cfg)
    write_resolved(cfg, out)
    t = cfg.transfer
    metrics = os.path.join(out, "metrics.jsonl")
    if t.donor_model:
        donor, extra = load_model(t.donor_model)
        stats = stats_from_extra(extra)
        train_raw, dev_raw = toy_corpora(cfg)
        train_n, stats = normalize(train_raw, stats)
        dev_n, _ = normalize(dev_raw, stats)
        variant = getattr(getattr(donor, "config", None), "variant", "dnn")
        if hasattr(donor, "config"):
            train_n = prepare_for_variant(train_n, variant, recipe(cfg))
            dev_n = prepare_for_variant(dev_n, variant, recipe(cfg))
        adapted, run = adapt_network(donor, train_n, dev_n, t.mode, schedule(cfg, variant),
                                     cfg.seed, cfg.training.clip, metrics_path=metrics)
        model_path = os.path.join(out, "model.pacrnn")
        save_model(adapted, model_path, extra=extra)
        _emit({"command": "adapt", "mode": t.mode, "epochs": len(run.records),
               "model": model_path})
        return 0
    sources, target, stats = _normalized_family(cfg)
    result = closest_language_pipeline(sources, target, _settings(cfg))
    with open(metrics, "w") as fh:
        for r in result.adapt_run.records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    model_path = os.path.join(out, "model.pacrnn")
    save_model(result.model, model_path, extra={"provenance_steps": len(result.provenance["steps"])})
    save_model(result.stage1, os.path.join(out, "stage1.pacrnn"), extra=stats_extra(stats))
    prov = os.path.join(out, "provenance.json")
    result.write_provenance(prov)
    _emit({"command": "adapt", "closest": result.closest, "scores": result.scores,
           "epochs_to_threshold": result.adapt_run.epochs_to(t.fer_threshold),
           "final_dev_FER": result.adapt_run.records[-1]["dev_FER"], "model": model_path,
           "provenance": prov})
    return 0


def cmd_lid(cfg):
    out = output_dir(cfg)
    write_resolved(cfg, out)
    sources, (tt, _), stats = _normalized_family(cfg)
    tags = sorted(sources)
    t = cfg.transfer
    lid, run = train_lid([sources[k][0] for k in tags], [sources[k][1] for k in tags],
                         t.lid_hidden, Schedule.for_variant("dnn", max_epochs=t.lid_epochs), cfg.seed,
                         (cfg.features.half_window, cfg.features.step), cfg.training.clip)
    closest, scores = select_closest_language(lid, tt)
    save_model(lid, os.path.join(out, "lid.pacrnn"), extra=stats_extra(stats))
    _emit({"command": "lid", "target": tt.language, "closest": closest, "scores": scores,
           "lid_dev_FER": run.records[-1]["dev_FER"] if run.records else None})
    return 0


def cmd_eval(cfg):
    out = output_dir(cfg)
    write_resolved(cfg, out)
    e = cfg.eval
    if e.untrained:
        model, extra = None, {}
    else:
        path = e.model or os.path.join(out, "model.pacrnn")
        model, extra = load_model(path)
        if isinstance(model, LidModel) or not hasattr(model, "config"):
            raise ConfigError(f"{path} is not a hybrid acoustic model")
    if e.corpus:
        corpus = read_corpus(e.corpus)
    else:
        corpus = toy_corpora(cfg)[1]
    corpus, _ = normalize(corpus, stats_from_extra(extra))
    variant = model.config.variant if model is not None else cfg.model["variant"]
    corpus = prepare_for_variant(corpus, variant, recipe(cfg))
    if model is None:
        model = build_model(model_config(cfg, corpus), Rng(cfg.seed).child("model"))
    loss, fer = evaluate(model, corpus, plan=plan(cfg))
    _emit({"command": "eval", "variant": variant, "corpus": corpus.language, "J": -loss,
           "FER": fer, "frames": corpus.frames})
    return 0


def cmd_plot(logs, out):
    """Learning curves plus ``summary.tsv`` (one row per epoch and run) and
    ``table.tsv`` (final dev FER, variants x corpora)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out, exist_ok=True)
    runs = []
    for path in logs:
        records = read_metrics(path)
        if not records:
            raise ConfigError(f"{path}: empty metrics log")
        runs.append((path, records))
    fig, ax = plt.subplots(figsize=(6, 4))
    for path, records in runs:
        label = f"{records[0].get('variant', '?')} / {records[0].get('corpus', '?')}"
        ax.plot([r["epoch"] for r in records], [r["dev_FER"] for r in records], marker="o",
                label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("dev frame error rate")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    image = os.path.join(out, "learning_curve.png")
    fig.savefig(image, dpi=100)
    plt.close(fig)

    summary = os.path.join(out, "summary.tsv")
    cols = ["log", "variant", "corpus", "epoch", "lr", "momentum", "train_J", "dev_J", "dev_FER"]
    with open(summary, "w") as fh:
        fh.write("\t".join(cols) + "\n")
        for path, records in runs:
            for r in records:
                row = [path] + [r.get(c, "") for c in cols[1:]]
                fh.write("\t".join(_fmt(v) for v in row) + "\n")

    table = os.path.join(out, "table.tsv")
    final = {}
    for _, records in runs:
        final[(records[0].get("variant", "?"), records[0].get("corpus", "?"))] = \
            records[-1]["dev_FER"]
    write_table(final, table)
    _emit({"command": "plot", "image": image, "summary": summary, "table": table,
           "rows": sum(len(r) for _, r in runs)})
    return 0


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


VARIANT_ORDER = ("dnn", "lstm", "pacrnn-dnn", "pacrnn-lstm")


def format_table(final):
    """Rows are variants, columns corpora; cells are dev FER in percent."""
    corpora = sorted({c for _, c in final})
    variants = [v for v in VARIANT_ORDER if any(k[0] == v for k in final)]
    variants += sorted({v for v, _ in final} - set(variants))
    lines = ["\t".join(["variant"] + corpora)]
    for v in variants:
        cells = [f"{100 * final[(v, c)]:.1f}" if (v, c) in final else "-" for c in corpora]
        lines.append("\t".join([v] + cells))
    return "\n".join(lines) + "\n"


def write_table(final, path):
    with open(path, "w") as fh:
        fh.write(format_table(final))


# ----------------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------------

COMMANDS = {"generate": cmd_generate, "train": cmd_train, "adapt": cmd_adapt,
            "lid": cmd_lid, "eval": cmd_eval}


def build_parser():
    parser = argparse.ArgumentParser(prog="pacrnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="YAML run description")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--output-dir", help="override the config output directory")
    p = sub.add_parser("plot")
    p.add_argument("logs", nargs="+", help="metrics JSONL logs")
    p.add_argument("--output-dir", help="where to write the image and tables "
                                        "(default: next to the first log)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "plot":
            out = args.output_dir or os.path.dirname(os.path.abspath(args.logs[0]))
            return cmd_plot(args.logs, out)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.output_dir is not None:
            cfg.output_dir = args.output_dir
        return COMMANDS[args.command](cfg)
    except (PacRnnError, ValueError, OSError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
