"""
The `crossrec` command line. Every subcommand reads one config file, writes its
outputs to the run directory and leaves a `manifest-<command>.json` next to them.
"""
import argparse
import logging
import pathlib

from crossrec.config import canonical_json, fingerprint, load_config, write_manifest
from crossrec.embedding import FeatureSet, fallback_missing, load_frozen_embeddings
from crossrec.errors import ConfigError
from crossrec.evaluation import ablation_preset, evaluate, run_ablation
from crossrec.interactions import DatasetSplit, Interactions, ItemCatalog, read_items
from crossrec.metrics import format_table
from crossrec.model import load_checkpoint
from crossrec.providers import CachedProvider, TagCache, make_provider
from crossrec.synth import SynthConfig, generate, write_dataset
from crossrec.tags import (
    SharedVocabulary,
    catalog_tag_vectors,
    generate_domain_tags,
    keyword_tag_vectors,
    match_catalog,
    read_item_entries,
    read_tag_vectors,
    read_vocabularies,
    write_item_entries,
    write_tag_vectors,
    write_vocabularies,
)
from crossrec.training import train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(levelname)s - %(name)s - %(message)s"

# flag -> dotted config key
FLAG_KEYS = {
    "R": "hyper.R",
    "N": "hyper.N",
    "theta": "hyper.theta",
    "M": "hyper.M",
    "strategy": "hyper.strategy",
    "seed": "hyper.seed",
    "workers": "tagging.workers",
}


def configure_logging(verbose=False):
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger("crossrec")
    root.handlers = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    root.propagate = False


def _load(args):
    overrides = list(args.set)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    config = load_config(args.config, overrides)
    out = pathlib.Path(args.out) if args.out else config.out_dir
    out.mkdir(parents=True, exist_ok=True)
    return config, out


def _require(path, produced_by):
    if not pathlib.Path(path).exists():
        raise ConfigError(str(path), f"missing, run `crossrec {produced_by}` first.")
    return path


def _provider(config, records):
    affinities = {r["item"]: r["affinity"] for r in records if "affinity" in r}
    domains = {r["item"]: r.get("domain") for r in records}
    inner = make_provider(
        config.tagging.provider,
        seed=config.tagging.seed,
        affinities=affinities if config.tagging.provider == "planted" else None,
        item_domains=domains,
        model=config.tagging.model,
    )
    return CachedProvider(inner, TagCache(config.path("tag_cache")), retries=config.tagging.retries)


def _dataset(out):
    return DatasetSplit.read(_require(out / "split.jsonl", "data preprocess"), out / "catalog.jsonl")


def _features(out, catalog):
    vocabulary = SharedVocabulary.from_domains(read_vocabularies(_require(out / "vocab.jsonl", "tags generate")))
    vectors = read_tag_vectors(_require(out / "item_tags.jsonl", "tags match"))
    return FeatureSet(
        catalog=catalog,
        image=load_frozen_embeddings(_require(out / "image.bin", "features build"), catalog, "image"),
        text=load_frozen_embeddings(_require(out / "text.bin", "features build"), catalog, "text"),
        vocabulary=vocabulary,
        tag_vectors=fallback_missing(vectors, catalog, vocabulary),
    )


def _feature_inputs(out):
    return [out / name for name in ("catalog.jsonl", "vocab.jsonl", "item_tags.jsonl", "image.bin", "text.bin")]


def cmd_preprocess(args, config, out):
    config.check_inputs("interactions")
    log = Interactions.read_tsv(config.path("interactions"), domains=config.domains)
    log = log.drop_rare_items(config.filter.min_item_interactions).filter_users(
        min_total=config.filter.min_total, min_per_domain=config.filter.min_per_domain
    )
    if len(log) == 0:
        raise ValueError("No users survive filtering.")
    dataset = log.split()
    dataset.write(out / "split.jsonl", out / "catalog.jsonl")
    logger.info("split %d users over %s items", len(dataset.users), dataset.item_catalog.sizes)
    return [config.path("interactions")], [out / "split.jsonl", out / "catalog.jsonl"]


def cmd_tags_generate(args, config, out):
    config.check_inputs("items")
    if args.domain is not None and args.domain not in config.domains:
        raise ConfigError("--domain", f"must be one of {list(config.domains)}, got '{args.domain}'.")
    records = read_items(config.path("items"))
    provider = _provider(config, records)
    path = out / "vocab.jsonl"
    vocabularies = {}
    if args.domain is not None and path.exists():
        vocabularies = {v.domain: v for v in read_vocabularies(path)}
    for name in [args.domain] if args.domain else config.domains:
        vocabularies[name] = generate_domain_tags(
            provider, name, R=config.hyper.R, N=config.hyper.N, transcript_path=out / f"transcript-{name}.json"
        )
        logger.info("domain %s: %d tags", name, len(vocabularies[name]))
    write_vocabularies([vocabularies[n] for n in config.domains if n in vocabularies], path)
    return [config.path("items")], [path]


def cmd_tags_match(args, config, out):
    config.check_inputs("items")
    catalog = ItemCatalog.read(_require(out / "catalog.jsonl", "data preprocess"))
    vocabulary = SharedVocabulary.from_domains(read_vocabularies(_require(out / "vocab.jsonl", "tags generate")))
    records = [r for r in read_items(config.path("items")) if r["item"] in catalog]
    items = catalog.all_items()
    if config.tagging.source == "keyword":
        raw = {}
        vectors = keyword_tag_vectors({r["item"]: r["title"] for r in records}, items, vocabulary)
    else:
        provider = _provider(config, records)
        raw = match_catalog(provider, records, vocabulary, workers=config.tagging.workers)
        vectors = catalog_tag_vectors(
            raw, items, config.hyper.selection(), vocabulary, config.tagging.representation
        )
    write_item_entries(raw, out / "item_scores_raw.jsonl")
    write_tag_vectors(vectors, out / "item_tags.jsonl")
    return (
        [config.path("items"), out / "catalog.jsonl", out / "vocab.jsonl"],
        [out / "item_scores_raw.jsonl", out / "item_tags.jsonl"],
    )


def cmd_features_build(args, config, out):
    config.check_inputs("image", "text")
    catalog = ItemCatalog.read(_require(out / "catalog.jsonl", "data preprocess"))
    for modality in ("image", "text"):
        store = load_frozen_embeddings(config.path(modality), catalog, modality, dim=config.hyper.e)
        store.write(out / f"{modality}.bin")
    return (
        [config.path("image"), config.path("text"), out / "catalog.jsonl"],
        [out / "image.bin", out / "text.bin"],
    )


def cmd_train(args, config, out):
    dataset = _dataset(out)
    features = _features(out, dataset.item_catalog)
    report = train(dataset, features, config.hyper, out_dir=out, mode=config.mode.mode, threads=config.mode.threads)
    report.write_json(out / "report.json")
    report.write_csv(out / "epochs.csv")
    if report.aborted:
        raise RuntimeError(report.aborted)
    logger.info("best epoch %d of %d, valid loss %.5f", report.best_epoch, report.stopping_epoch, report.best_valid_loss)
    return [out / "split.jsonl"] + _feature_inputs(out), [out / "checkpoint.bin", out / "epochs.csv"]


def cmd_evaluate(args, config, out):
    domain = args.domain or config.domains[0]
    if domain not in config.domains:
        raise ConfigError("--domain", f"must be one of {list(config.domains)}, got '{domain}'.")
    checkpoint = pathlib.Path(args.checkpoint) if args.checkpoint else out / "checkpoint.bin"
    _require(checkpoint, "train")
    dataset = _dataset(out)
    model = load_checkpoint(checkpoint).bind(_features(out, dataset.item_catalog))
    model.eval()
    report = evaluate(model, dataset, domain=domain, split=args.split, fingerprint=fingerprint(config))
    path = out / f"metrics-{domain}-{args.split}.json"
    path.write_text(canonical_json(report.to_dict()))
    print(
        format_table(
            [(report.domain, args.split, report.mrr, report.ndcg5, report.ndcg10, report.users, report.skipped)],
            headers=["domain", "split", "MRR", "NDCG@5", "NDCG@10", "users", "skipped"],
        ),
        end="",
    )
    return [checkpoint, out / "split.jsonl"] + _feature_inputs(out), [path]


def cmd_ablate(args, config, out):
    domain = args.domain or config.domains[0]
    if domain not in config.domains:
        raise ConfigError("--domain", f"must be one of {list(config.domains)}, got '{domain}'.")
    try:
        spec = ablation_preset(args.grid, seeds=tuple(args.seeds))
    except ValueError as err:
        raise ConfigError("--grid", str(err)) from None
    dataset = _dataset(out)
    features = _features(out, dataset.item_catalog)
    raw_path = out / "item_scores_raw.jsonl"
    raw = read_item_entries(raw_path) if raw_path.exists() else None
    titles = None
    if config.path("items").exists():
        titles = {r["item"]: r["title"] for r in read_items(config.path("items"))}
    table = run_ablation(
        spec, dataset, features, config.hyper, raw_scores=raw, titles=titles, domain=domain,
        mode=config.mode.mode, threads=config.mode.threads,
    )
    table.write(out)
    print(table.to_text(), end="")
    outputs = [out / f"ablation-{spec.name}.csv", out / f"ablation-{spec.name}.txt"]
    inputs = [out / "split.jsonl"] + _feature_inputs(out) + ([raw_path] if raw is not None else [])
    return inputs, outputs


def cmd_synth_generate(args):
    out = pathlib.Path(args.out)
    data = generate(
        SynthConfig(users=args.users, items_per_domain=args.items, seed=args.seed, e=args.e)
    )
    paths = write_dataset(data, out)
    config = load_config(paths["config"])
    write_manifest(out, "synth generate", config, inputs=[], outputs=list(paths.values()))
    return 0


def _runner(command, func):
    def run(args):
        config, out = _load(args)
        inputs, outputs = func(args, config, out)
        write_manifest(out, command, config, inputs=inputs, outputs=outputs)
        return 0

    return run


def _common(parser):
    parser.add_argument("--config", default=None, help="path to the run config JSON")
    parser.add_argument("--out", default=None, help="run directory, defaults to `paths.out_dir`")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")


def build_parser():
    parser = argparse.ArgumentParser(prog="crossrec", description="Cross-domain sequential recommendation pipeline.")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    groups = parser.add_subparsers(dest="group", metavar="command")
    groups.required = True

    data = groups.add_parser("data", help="interaction log preprocessing").add_subparsers(dest="command")
    data.required = True
    preprocess = data.add_parser("preprocess", help="filter, sequence and split the interaction log")
    _common(preprocess)
    preprocess.set_defaults(func=_runner("data preprocess", cmd_preprocess))

    tags = groups.add_parser("tags", help="LLM tag vocabulary and item matching").add_subparsers(dest="command")
    tags.required = True
    tags_generate = tags.add_parser("generate", help="vote a tag vocabulary per domain")
    _common(tags_generate)
    tags_generate.add_argument("--R", type=int, default=None, help="number of queries per domain")
    tags_generate.add_argument("--N", type=int, default=None, help="number of tags per domain")
    tags_generate.add_argument("--domain", default=None, help="only (re)generate this domain")
    tags_generate.set_defaults(func=_runner("tags generate", cmd_tags_generate))
    tags_match = tags.add_parser("match", help="score every item against the shared vocabulary")
    _common(tags_match)
    tags_match.add_argument("--strategy", default=None, choices=["top_r", "threshold", "hybrid"])
    tags_match.add_argument("--R", type=int, default=None)
    tags_match.add_argument("--theta", type=float, default=None)
    tags_match.add_argument("--M", type=int, default=None)
    tags_match.add_argument("--workers", type=int, default=None)
    tags_match.set_defaults(func=_runner("tags match", cmd_tags_match))

    features = groups.add_parser("features", help="frozen image and text vectors").add_subparsers(dest="command")
    features.required = True
    build = features.add_parser("build", help="align the frozen vectors to the catalog")
    _common(build)
    build.set_defaults(func=_runner("features build", cmd_features_build))

    train_parser = groups.add_parser("train", help="train the model")
    _common(train_parser)
    train_parser.add_argument("--seed", type=int, default=None)
    train_parser.set_defaults(func=_runner("train", cmd_train))

    evaluate_parser = groups.add_parser("evaluate", help="rank held-out items")
    _common(evaluate_parser)
    evaluate_parser.add_argument("--checkpoint", default=None)
    evaluate_parser.add_argument("--domain", default=None)
    evaluate_parser.add_argument("--split", default="test", choices=["train", "valid", "test"])
    evaluate_parser.set_defaults(func=_runner("evaluate", cmd_evaluate))

    ablate = groups.add_parser("ablate", help="train and test an ablation grid")
    _common(ablate)
    ablate.add_argument("--grid", required=True, help="tableIV, tableV or tableVI")
    ablate.add_argument("--seeds", type=int, nargs="+", default=[0])
    ablate.add_argument("--domain", default=None)
    ablate.set_defaults(func=_runner("ablate", cmd_ablate))

    synth = groups.add_parser("synth", help="planted synthetic data").add_subparsers(dest="command")
    synth.required = True
    synth_generate = synth.add_parser("generate", help="write a planted dataset and its config")
    synth_generate.add_argument("--out", required=True)
    synth_generate.add_argument("--seed", type=int, default=7)
    synth_generate.add_argument("--users", type=int, default=60)
    synth_generate.add_argument("--items", type=int, default=80, help="items per domain")
    synth_generate.add_argument("--e", type=int, default=32, help="frozen vector dimension")
    synth_generate.set_defaults(func=cmd_synth_generate)
    return parser


def run_subcommand(argv=None):
    """
    Runs one subcommand and returns its exit status: 0 on success, 2 on a usage or
    config error and 1 on any other error.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return int(exit_.code or 0)
    configure_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as err:
        logger.error("%s", err)
        return 2
    except Exception as err:
        logger.error("%s failed: %s", " ".join(filter(None, [args.group, getattr(args, "command", None)])), err)
        return 1


def main(argv=None):
    return run_subcommand(argv)
