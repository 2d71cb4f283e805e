"""Command-line entry point: ``advcap <command> [options]``.

Every hyperparameter lives in an INI file with [data], [model], [train],
[eval] and [experiment] sections; ``--set section.key=value`` and the
dedicated flags override it. Each command writes the resolved config and
its hash next to its outputs.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .data.corpus import group_by_image, load_caption_records
from .data.toyworld import (ToyWorldConfig, generate_toy_dataset, load_dataset, read_manifest,
                            save_dataset)
from .data.vocab import TOKENIZER_VERSION, tokenize
from .discriminator import Discriminator, DiscriminatorConfig
from .errors import AdvcapError, ConfigError, IntegrityError, PreconditionError
from .experiment import ExperimentConfig, rank_captions, run_experiment, sample_sets
from .generator import Generator, GeneratorConfig
from .metrics import count_ratios, diversity_report, repeated_caption_table
from .training import TrainConfig, TrainLog, gan_train, pretrain_discriminator, pretrain_generator

log = logging.getLogger("advcap")

_MODEL_KEYS = {
    # generator
    "embed_dim": 64, "hidden_dim": 128, "num_layers": 3, "beta": 3.0, "gumbel_temperature": 0.5,
    "noise_dim": 8, "max_len": 16, "init_scale": 0.08,
    # discriminator
    "d_word_embed_dim": 32, "d_sentence_embed_dim": 32, "d_kernel_inner_dim": 8,
    "d_num_kernels": 16, "p": 5,
}
_DATA_SKIP = {"attributes", "templates", "determiners"}


def _defaults() -> dict:
    data = {f.name: f.default for f in fields(ToyWorldConfig) if f.name not in _DATA_SKIP}
    data.update(seed=0, grammar="")
    train = {f.name: f.default for f in fields(TrainConfig)}
    exp = {f.name: f.default for f in fields(ExperimentConfig)}
    exp["seeds"] = ",".join(map(str, exp["seeds"]))
    return {
        "data": data,
        "model": dict(_MODEL_KEYS),
        "train": train,
        "eval": {"split": "test", "mode": "sample", "p": 5, "beam_width": 5, "seed": 0,
                 "min_train_count": 5},
        "experiment": exp,
    }


def _coerce(default, raw: str, where: str):
    try:
        if isinstance(default, bool):
            value = raw.strip().lower()
            if value in ("1", "true", "yes", "on"):
                return True
            if value in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}") from None
    return raw


def resolve_config(path=None, overrides=()) -> dict:
    """Defaults, then the INI file, then ``section.key=value`` overrides."""
    cfg = _defaults()
    entries = []
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        if not parser.read(path, encoding="utf-8"):
            raise PreconditionError(f"config file {path} not found")
        for section in parser.sections():
            for key, raw in parser.items(section):
                entries.append((section, key, raw, f"{path} [{section}] {key}"))
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        name, raw = item.split("=", 1)
        section, key = name.split(".", 1)
        entries.append((section, key, raw, f"override {name}"))
    for section, key, raw, where in entries:
        if section not in cfg:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if key not in cfg[section]:
            raise ConfigError(f"{where}: unknown key {key!r}")
        cfg[section][key] = _coerce(cfg[section][key], raw, where)
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode("utf-8")).hexdigest()


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _echo_config(out: Path, command: str, cfg: dict) -> str:
    digest = config_hash(cfg)
    _write_json(out / f"{command}.config.json", {"command": command, "config": cfg,
                                                 "config_hash": digest, "version": __version__})
    print(f"config_hash {digest}")
    return digest


def _toy_config(section: dict) -> ToyWorldConfig:
    kwargs = {k: v for k, v in section.items() if k not in ("seed", "grammar")}
    if section["grammar"]:
        path = Path(section["grammar"])
        if not path.exists():
            raise PreconditionError(f"grammar file {path} not found")
        grammar = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(grammar) - _DATA_SKIP
        if unknown:
            raise ConfigError(f"grammar file {path}: unknown keys {sorted(unknown)}")
        kwargs.update(grammar)
    config = ToyWorldConfig(**kwargs)
    config.validate()
    return config


def _generator_config(dataset, model: dict) -> GeneratorConfig:
    keys = ("embed_dim", "hidden_dim", "num_layers", "beta", "gumbel_temperature", "noise_dim",
            "max_len", "init_scale")
    return GeneratorConfig(len(dataset.vocab.tokens), dataset.image_dim, dataset.object_dim,
                           **{k: model[k] for k in keys})


def _discriminator_config(dataset, model: dict) -> DiscriminatorConfig:
    return DiscriminatorConfig(len(dataset.vocab.tokens), dataset.image_dim,
                               word_embed_dim=model["d_word_embed_dim"],
                               sentence_embed_dim=model["d_sentence_embed_dim"],
                               kernel_inner_dim=model["d_kernel_inner_dim"],
                               num_kernels=model["d_num_kernels"], set_size=model["p"],
                               init_scale=model["init_scale"])


def _load_data(path) -> tuple:
    if path is None or not (Path(path) / "manifest.json").exists():
        raise PreconditionError(f"dataset {path} not found (run make-data first)")
    return load_dataset(path), read_manifest(path)


def _load_generator(path, dataset) -> tuple[Generator, dict]:
    try:
        header, params = read_checkpoint(path, dataset.vocab.hash(), kind="generator")
    except PreconditionError as exc:
        raise PreconditionError(f"pretrain required: {exc}") from None
    G = Generator(GeneratorConfig(**header["config"]), dataset.vocab)
    load_into(G, params)
    return G, header


def _load_discriminator(path, dataset) -> Discriminator:
    try:
        header, params = read_checkpoint(path, dataset.vocab.hash(), kind="discriminator")
    except PreconditionError as exc:
        raise PreconditionError(f"pretrain required: {exc}") from None
    D = Discriminator(DiscriminatorConfig(**header["config"]))
    load_into(D, params)
    return D


def _save_pair(out: Path, G, D, dataset, digest: str):
    save_checkpoint(out / "generator.ckpt", "generator", G.config_dict(), dataset.vocab.hash(),
                    G.params, {"config_hash": digest})
    save_checkpoint(out / "discriminator.ckpt", "discriminator", D.config_dict(),
                    dataset.vocab.hash(), D.params, {"config_hash": digest})


def _train_config(cfg: dict) -> TrainConfig:
    tc = TrainConfig(**cfg["train"])
    tc.validate()
    return tc


# commands

def cmd_make_data(args, cfg) -> int:
    config = _toy_config(cfg["data"])
    out = Path(args.out)
    dataset = generate_toy_dataset(config, seed=cfg["data"]["seed"])
    save_dataset(dataset, out)
    _echo_config(out, "make-data", cfg)
    print(f"wrote {len(dataset.train)}/{len(dataset.val)}/{len(dataset.test)} scenes, "
          f"vocabulary {len(dataset.vocab.tokens)} to {out}")
    return 0


def cmd_pretrain(args, cfg) -> int:
    dataset, _ = _load_data(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = _echo_config(out, "pretrain", cfg)
    tc = _train_config(cfg)
    G = Generator(_generator_config(dataset, cfg["model"]), dataset.vocab, seed=tc.seed)
    D = Discriminator(_discriminator_config(dataset, cfg["model"]), seed=tc.seed)
    with (out / "pretrain_log.jsonl").open("w", encoding="utf-8") as stream:
        tlog = TrainLog(tc.record_time, stream)
        pretrain_generator(dataset, G, tc, tlog)
        pretrain_discriminator(dataset, G, D, tc, tlog)
    _save_pair(out, G, D, dataset, digest)
    print(f"pretrained checkpoints in {out}")
    return 0


def cmd_train_gan(args, cfg) -> int:
    dataset, _ = _load_data(args.data)
    ckpt = Path(args.checkpoints)
    G, _ = _load_generator(ckpt / "generator.ckpt", dataset)
    D = _load_discriminator(ckpt / "discriminator.ckpt", dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    digest = _echo_config(out, "train-gan", cfg)
    tc = _train_config(cfg)
    with (out / "gan_log.jsonl").open("w", encoding="utf-8") as stream:
        tlog = TrainLog(tc.record_time, stream)
        gan_train(dataset, G, D, tc, tlog)
    _save_pair(out, G, D, dataset, digest)
    print(f"adversarial checkpoints in {out} after {tlog.updates} updates")
    return 0


def cmd_generate(args, cfg) -> int:
    dataset, manifest = _load_data(args.data)
    G, header = _load_generator(args.checkpoint, dataset)
    ev = cfg["eval"]
    split = getattr(dataset, ev["split"], None) if ev["split"] in ("train", "val", "test") else None
    if split is None:
        raise ConfigError(f"unknown split {ev['split']!r}")
    mode, p = ev["mode"], ev["p"]
    if p < 1:
        raise ConfigError("p must be >= 1")
    if mode == "sample":
        ranked = sample_sets(G, split, p, ev["seed"])
    elif mode == "greedy":
        p = 1
        ranked = sample_sets(G, split, 1, ev["seed"], greedy=True)
    elif mode == "beam":
        if ev["beam_width"] < p:
            raise ConfigError(f"beam_width {ev['beam_width']} cannot return {p} captions")
        x_c, x_o = split.features()
        ranked = {item.image_id: rank_captions(G.beam_search(x_c[i], x_o[i], ev["beam_width"], p))
                  for i, item in enumerate(split.items)}
    else:
        raise ConfigError(f"unknown mode {mode!r}; use sample, greedy or beam")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for image_id, caps in ranked.items():
            for rank, (cap, logp) in enumerate(caps, 1):
                fh.write(json.dumps({"image_id": image_id, "rank": rank,
                                     "caption": dataset.vocab.decode(cap),
                                     "log_prob": round(float(logp), 10)}, sort_keys=True) + "\n")
    sidecar = {
        "tokenizer_version": TOKENIZER_VERSION,
        "vocab_hash": dataset.vocab.hash(),
        "dataset_seed": manifest["seed"],
        "split": ev["split"], "mode": mode, "p": p, "beam_width": ev["beam_width"], "seed": ev["seed"],
        "checkpoint_sha256": hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest(),
        "config_hash": config_hash(cfg),
    }
    _write_json(out.with_suffix(".manifest.json"), sidecar)
    print(f"config_hash {sidecar['config_hash']}")
    print(f"wrote {sum(len(v) for v in ranked.values())} captions to {out}")
    return 0


def _tokenizer_version(path: Path) -> str | None:
    side = path.with_suffix(".manifest.json")
    if side.exists():
        return json.loads(side.read_text(encoding="utf-8")).get("tokenizer_version")
    return None


def _fmt(v):
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)


def cmd_stats(args, cfg) -> int:
    dataset, manifest = _load_data(args.data)
    ev = cfg["eval"]
    training = [tuple(tokenize(r)) for it in dataset.train.items for r in it.references]
    corpora = {}
    for name in args.generated or []:
        path = Path(name)
        version = _tokenizer_version(path)
        if version is not None and version != manifest["tokenizer_version"]:
            raise IntegrityError(f"{path} was tokenized with version {version}, the training corpus "
                                 f"with {manifest['tokenizer_version']}")
        groups = group_by_image(load_caption_records(path))
        corpora[path.stem] = {k: [tuple(tokenize(c)) for c in v] for k, v in groups.items()}
    for tag in args.human or []:
        split = getattr(dataset, tag)
        corpora[f"human-{tag}"] = {it.image_id: [tuple(tokenize(r)) for r in it.references]
                                   for it in split.items}
    if not corpora:
        raise ConfigError("stats needs --generated files or --human splits")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, "stats", cfg)
    plot = {}
    report_rows = []
    ratio_rows = []
    repeats = []
    for name, sets in corpora.items():
        p = min(len(v) for v in sets.values())
        entry = {}
        for variant in (f"1 of {p}", f"{p} of {p}"):
            rep = diversity_report(sets, training, variant)
            report_rows.append({"corpus": name, **rep.row()})
            entry[variant] = {"vocab_curve": {str(k): v for k, v in sorted(rep.vocab_curve.items())}}
        flat = [caps[0] for caps in sets.values()]
        entry["count_ratios"] = {}
        for n in (1, 2, 3):
            table = count_ratios(flat, training, n, ev["min_train_count"])
            entry["count_ratios"][str(n)] = {"mean_ratio": table.mean_ratio(),
                                             "bins": table.bins, "hist_edges": table.hist_edges,
                                             "hist_counts": table.hist_counts}
            ratio_rows += [(name, n, " ".join(r.ngram), r.train_count, r.test_count,
                            f"{r.expected:.6f}", f"{r.ratio:.6f}") for r in table.rows]
        repeats += [(name, text, count) for text, count in
                    repeated_caption_table(flat)[:args.top]]
        plot[name] = entry
    columns = ["corpus", "variant", "n_images", "div1", "div2", "mbleu4", "vocab_size", "pct_novel"]
    with (out / "diversity.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in report_rows:
            w.writerow([_fmt(row[c]) for c in columns])
    with (out / "count_ratios.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["corpus", "n", "ngram", "train_count", "test_count", "expected", "ratio"])
        w.writerows(ratio_rows)
    with (out / "repeated_captions.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["corpus", "caption", "count"])
        w.writerows(repeats)
    _write_json(out / "plot_data.json", plot)
    for row in report_rows:
        print(" ".join(f"{c}={_fmt(row[c])}" for c in columns))
    return 0


def cmd_reproduce(args, cfg) -> int:
    exp = dict(cfg["experiment"])
    exp["seeds"] = tuple(int(s) for s in str(exp["seeds"]).split(",") if s.strip())
    ecfg = ExperimentConfig(**exp)
    dataset = generate_toy_dataset(_toy_config(cfg["data"]), seed=ecfg.data_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(out, "reproduce", cfg)
    result = run_experiment(ecfg, dataset)
    for r in result.per_seed:
        for name, tlog in r["logs"].items():
            tlog.to_jsonl(out / f"seed{r['seed']}_{name}_log.jsonl")
    _write_json(out / "summary.json", result.summary())
    med = result.medians
    for variant in med:
        row = med[variant]["5 of 5"]
        print(f"{variant:12s} " + " ".join(f"{k}={row[k]:.4f}" for k in ("div2", "mbleu4",
                                                                          "vocab_size", "pct_novel")))
    return 0


COMMANDS = {
    "make-data": cmd_make_data,
    "pretrain": cmd_pretrain,
    "train-gan": cmd_train_gan,
    "generate": cmd_generate,
    "stats": cmd_stats,
    "reproduce": cmd_reproduce,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advcap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed_help):
        p.add_argument("--config", help="INI file with [data]/[model]/[train]/[eval] sections")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--seed", type=int, help=seed_help)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("make-data", help="generate the toy caption dataset")
    common(p, "dataset seed")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="maximum-likelihood generator and matched-pair discriminator")
    common(p, "training seed")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-gan", help="adversarial training from pretrained checkpoints")
    common(p, "training seed")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", required=True, help="directory holding the pretrain outputs")
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="write ranked captions as line-delimited JSON")
    common(p, "sampling seed")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("sample", "greedy", "beam"))
    p.add_argument("--beam-width", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--split", choices=("train", "val", "test"))

    p = sub.add_parser("stats", help="diversity reports, count ratios and plot data")
    common(p, "unused")
    p.add_argument("--data", required=True)
    p.add_argument("--generated", nargs="*", help="caption JSONL files from generate")
    p.add_argument("--human", nargs="*", choices=("val", "test"), help="score human references")
    p.add_argument("--top", type=int, default=20, help="rows of the repeated-caption table")
    p.add_argument("--out", required=True)

    p = sub.add_parser("reproduce", help="baseline vs adversarial comparison over several seeds")
    common(p, "dataset seed")
    p.add_argument("--out", required=True)
    return parser


def _apply_flags(args, cfg: dict):
    seed_section = {"make-data": "data", "pretrain": "train", "train-gan": "train",
                    "generate": "eval", "reproduce": "experiment"}.get(args.command)
    if args.seed is not None and seed_section:
        key = "data_seed" if seed_section == "experiment" else "seed"
        cfg[seed_section][key] = args.seed
    for flag, key in (("mode", "mode"), ("beam_width", "beam_width"), ("p", "p"), ("split", "split")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg["eval"][key] = value


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.set)
        _apply_flags(args, cfg)
        return COMMANDS[args.command](args, cfg)
    except AdvcapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
