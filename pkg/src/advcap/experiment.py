"""Desk-scale comparison of the ML baseline with adversarial training.

For every seed the generator is pretrained by maximum likelihood (the
baseline), then copied and trained adversarially twice: once with sets of
size p=5 and feature matching, once with single captions and no feature
matching (the ablation). All three are sampled at the same peakiness on the
test split and scored with the diversity metrics.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data.toyworld import DatasetSplit, ToyDataset, ToyWorldConfig, encode_references, generate_toy_dataset
from .discriminator import Discriminator, DiscriminatorConfig
from .generator import Generator, GeneratorConfig
from .metrics import diversity_report
from .training import TrainConfig, TrainLog, gan_train, pretrain_discriminator, pretrain_generator

log = logging.getLogger(__name__)

METRICS = ("div2", "mbleu4", "vocab_size", "pct_novel")
# direction in which the adversarial model should beat the baseline
HIGHER_IS_MORE_DIVERSE = {"div2": True, "mbleu4": False, "vocab_size": True, "pct_novel": True}


@dataclass
class ExperimentConfig:
    seeds: tuple = (0, 1, 2)
    data_seed: int = 0
    embed_dim: int = 32
    hidden_dim: int = 64
    beta: float = 3.0
    p: int = 5
    ablation_p: int = 1
    pretrain_g_epochs: int = 6
    gan_g_steps: int = 150
    lr_g: float = 4e-4
    lr_d: float = 4e-4
    eval_split: str = "test"
    run_ablation: bool = True

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        return TrainConfig(seed=seed, pretrain_g_epochs=self.pretrain_g_epochs,
                           gan_g_steps=self.gan_g_steps, lr_g=self.lr_g, lr_d=self.lr_d, **overrides)


def rank_captions(samples) -> list:
    """Sort (caption, log_prob) pairs best first; ties broken by token ids."""
    return sorted(samples, key=lambda cs: (-cs[1], cs[0].tokens))


def sample_sets(G: Generator, split: DatasetSplit, p: int, seed: int, beta: float | None = None,
                greedy: bool = False) -> dict:
    """``p`` samples per image of ``split``, ranked by total log probability."""
    x_c, x_o = split.features()
    rng = np.random.default_rng([seed, 7])
    out = G.sample_batch(np.repeat(x_c, p, axis=0), np.repeat(x_o, p, axis=0), rng,
                         beta=beta, greedy=greedy)
    return {item.image_id: rank_captions(out[i * p:(i + 1) * p]) for i, item in enumerate(split.items)}


def training_tokens(dataset: ToyDataset, max_words: int) -> list[tuple]:
    return [c.tokens for refs in encode_references(dataset.train, dataset.vocab, max_words) for c in refs]


def evaluate(ranked: dict, training: list) -> dict:
    sets = {k: [c.tokens for c, _ in v] for k, v in ranked.items()}
    p = min(len(v) for v in sets.values())
    return {f"1 of {p}": diversity_report(sets, training, f"1 of {p}").row(),
            f"{p} of {p}": diversity_report(sets, training, f"{p} of {p}").row()}


def build_models(dataset: ToyDataset, cfg: ExperimentConfig, seed: int, set_size: int):
    V = len(dataset.vocab.tokens)
    G = Generator(GeneratorConfig(V, dataset.image_dim, dataset.object_dim, embed_dim=cfg.embed_dim,
                                  hidden_dim=cfg.hidden_dim, beta=cfg.beta), dataset.vocab, seed=seed)
    D = Discriminator(DiscriminatorConfig(V, dataset.image_dim, set_size=set_size), seed=seed)
    return G, D


def run_seed(dataset: ToyDataset, cfg: ExperimentConfig, seed: int) -> dict:
    G, D = build_models(dataset, cfg, seed, cfg.p)
    split = getattr(dataset, cfg.eval_split)
    training = training_tokens(dataset, G.config.max_len - 1)
    tc = cfg.train_config(seed)
    pretrain_generator(dataset, G, tc)
    results = {"baseline": evaluate(sample_sets(G, split, cfg.p, seed), training)}
    log.info("seed %d baseline %s", seed, results["baseline"])
    logs = {}
    variants = [("adversarial", cfg.p, True)]
    if cfg.run_ablation:
        variants.append(("ablation", cfg.ablation_p, False))
    for name, set_size, fm in variants:
        G_v = copy.deepcopy(G)
        _, D_v = build_models(dataset, cfg, seed, set_size)
        tc_v = cfg.train_config(seed, feature_matching=fm)
        tlog = TrainLog()
        pretrain_discriminator(dataset, G_v, D_v, tc_v, tlog)
        gan_train(dataset, G_v, D_v, tc_v, tlog)
        results[name] = evaluate(sample_sets(G_v, split, cfg.p, seed), training)
        logs[name] = tlog
        log.info("seed %d %s %s", seed, name, results[name])
    return {"seed": seed, "reports": results, "logs": logs}


@dataclass
class ExperimentResult:
    config: dict
    per_seed: list
    medians: dict = field(default_factory=dict)

    def median(self, variant: str, metric: str, report: str = "5 of 5") -> float:
        return self.medians[variant][report][metric]

    def summary(self) -> dict:
        return {"config": self.config, "medians": self.medians,
                "per_seed": [{"seed": r["seed"], "reports": r["reports"]} for r in self.per_seed]}


def _medians(per_seed: list) -> dict:
    out: dict = {}
    for variant in per_seed[0]["reports"]:
        out[variant] = {}
        for report in per_seed[0]["reports"][variant]:
            keys = [k for k, v in per_seed[0]["reports"][variant][report].items()
                    if isinstance(v, (int, float)) and v is not None and k != "n_images"]
            out[variant][report] = {k: float(np.median([r["reports"][variant][report][k] for r in per_seed]))
                                    for k in keys}
    return out


def run_experiment(cfg: ExperimentConfig | None = None, dataset: ToyDataset | None = None) -> ExperimentResult:
    cfg = cfg or ExperimentConfig()
    dataset = dataset or generate_toy_dataset(ToyWorldConfig(), seed=cfg.data_seed)
    per_seed = [run_seed(dataset, cfg, seed) for seed in cfg.seeds]
    return ExperimentResult(asdict(cfg), per_seed, _medians(per_seed))
