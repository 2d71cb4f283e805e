"""Pretraining and the alternating adversarial schedule.

The schedule runs ``n_d`` discriminator updates per generator update. Before
a generator update, if ``monitor_every`` updates have passed since the last
probe, discriminator accuracy is measured on a fixed held-out batch; below
``acc_gate`` the generator waits while the discriminator trains until the
accuracy recovers (or ``gate_max_steps`` is exhausted, which aborts).
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data.toyworld import DatasetSplit, ToyDataset, encode_references
from .discriminator import Discriminator
from .errors import AdvcapError, ConfigError, ContractError, NumericalError
from .generator import Generator, pad_captions
from .losses import (batch_distance_stats, discriminator_loss, generator_loss,
                     pretrain_discriminator_loss)
from .optim import Adam, frozen

log = logging.getLogger(__name__)


class TrainingAbort(AdvcapError):
    exit_code = 4


@dataclass
class TrainConfig:
    seed: int = 0
    # maximum-likelihood pretraining of the generator
    batch_size: int = 64
    pretrain_g_epochs: int = 8
    pretrain_lr: float = 2e-3
    pretrain_beta: float = 1.0
    # discriminator pretraining on matched vs mismatched reference sets
    pretrain_d_steps: int = 300
    pretrain_d_lr: float = 3e-3
    # adversarial phase
    gan_batch_size: int = 16
    gan_g_steps: int = 200
    lr_d: float = 2e-4
    lr_g: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    clip_norm: float = 5.0
    n_d: int = 5
    acc_gate: float = 0.75
    monitor_every: int = 25
    gate_max_steps: int = 200
    probe_size: int = 32
    feature_matching: bool = True
    record_time: bool = False

    def validate(self):
        if self.n_d < 1:
            raise ConfigError("n_d must be >= 1")
        if not 0.5 < self.acc_gate < 1:
            raise ConfigError("acc_gate must lie in (0.5, 1)")
        if self.monitor_every < 1 or self.gate_max_steps < 1:
            raise ConfigError("monitor_every and gate_max_steps must be positive")
        if self.gan_batch_size < 2:
            raise ConfigError("gan_batch_size must be >= 2 to build mismatched sets")


class TrainLog:
    """Update-level records. Wall time is kept only when ``record_time`` is set."""

    def __init__(self, record_time: bool = False, stream=None):
        self.records: list[dict] = []
        self.updates = 0
        self.record_time = record_time
        self.stream = stream
        self._t0 = time.perf_counter()

    def add(self, kind: str, update: bool = False, **fields) -> dict:
        if update:
            self.updates += 1
        rec = {"update": self.updates, "kind": kind, **fields}
        if self.record_time:
            rec["wall_time"] = round(time.perf_counter() - self._t0, 3)
        self.records.append(rec)
        if self.stream is not None:
            self.stream.write(json.dumps(rec, sort_keys=True) + "\n")
            self.stream.flush()
        return rec

    def of_kind(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["kind"] == kind]

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records if "loss" in r]

    def to_jsonl(self, path):
        with Path(path).open("w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _finite(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise NumericalError(f"non-finite loss during {where}")
    return value


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random permutation without fixed points."""
    if n < 2:
        raise ContractError("a derangement needs at least two items")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


class ReferenceSets:
    """Padded reference ids for a split: ids/mask of shape (images, k, steps)."""

    def __init__(self, split: DatasetSplit, dataset: ToyDataset, steps: int):
        refs = encode_references(split, dataset.vocab, steps - 1)
        self.k = min(len(r) for r in refs)
        flat_ids, flat_mask = pad_captions([c for r in refs for c in r[: self.k]], steps)
        n = len(refs)
        self.ids = flat_ids.reshape(n, self.k, steps)
        self.mask = flat_mask.reshape(n, self.k, steps)
        self.x_c, self.x_o = split.features()
        self.captions = refs

    def __len__(self):
        return self.ids.shape[0]

    def sample(self, idx: np.ndarray, p: int, rng: np.random.Generator):
        """p references per image (without replacement when p <= k), image-major."""
        rows = []
        for i in idx:
            pick = rng.choice(self.k, size=p, replace=p > self.k)
            rows.append(pick)
        pick = np.array(rows)
        ids = self.ids[idx[:, None], pick].reshape(len(idx) * p, -1)
        mask = self.mask[idx[:, None], pick].reshape(len(idx) * p, -1)
        return ids, mask


# generator pretraining

def _ml_batches(n_images: int, k: int, batch: int, rng):
    pairs = np.array([(i, j) for i in range(n_images) for j in range(k)])
    order = rng.permutation(len(pairs))
    for s in range(0, len(order), batch):
        yield pairs[order[s:s + batch]]


def _ml_eval(G: Generator, sets: ReferenceSets, beta: float, z_rng, batch: int = 256) -> float:
    caps = [(i, c) for i, r in enumerate(sets.captions) for c in r[: sets.k]]
    total = 0.0
    with ad.no_grad():
        for s in range(0, len(caps), batch):
            chunk = caps[s:s + batch]
            rows = np.array([i for i, _ in chunk])
            z = G.sample_noise(z_rng, len(rows))
            loss = G.ml_loss(sets.x_c[rows], sets.x_o[rows], [c for _, c in chunk], beta, z)
            total += loss.item() * len(chunk)
    return total / len(caps)


def pretrain_generator(dataset: ToyDataset, G: Generator, config: TrainConfig,
                       log_: TrainLog | None = None) -> TrainLog:
    """Teacher-forced maximum likelihood; keeps the parameters with the best held-out loss."""
    config.validate()
    tlog = log_ or TrainLog(config.record_time)
    if len(dataset.train) == 0:
        raise ContractError("pretraining needs a non-empty training split")
    rng = np.random.default_rng([config.seed, 1])
    steps = G.config.steps
    train = ReferenceSets(dataset.train, dataset, steps)
    val = ReferenceSets(dataset.val, dataset, steps)
    opt = Adam(G.parameters(), config.pretrain_lr, 0.9, 0.999, clip_norm=config.clip_norm)
    best = None
    if config.pretrain_g_epochs > 0:
        best = (_ml_eval(G, val, config.pretrain_beta, np.random.default_rng([config.seed, 2])),
                {k: v.data.copy() for k, v in G.params.items()})
        tlog.add("pretrain_g_eval", epoch=0, val_loss=best[0])
    for epoch in range(1, config.pretrain_g_epochs + 1):
        running, count = 0.0, 0
        for pairs in _ml_batches(len(train), train.k, config.batch_size, rng):
            imgs = pairs[:, 0]
            caps = [train.captions[i][j] for i, j in pairs]
            z = G.sample_noise(rng, len(pairs))
            with ad.Tape() as tape:
                loss = G.ml_loss(train.x_c[imgs], train.x_o[imgs], caps, config.pretrain_beta, z)
            value = _finite(loss.item(), f"generator pretraining epoch {epoch}")
            opt.step(tape.backward(loss))
            tlog.updates += 1
            running += value * len(pairs)
            count += len(pairs)
        val_loss = _finite(_ml_eval(G, val, config.pretrain_beta,
                                    np.random.default_rng([config.seed, 2])), "validation")
        tlog.add("pretrain_g_eval", epoch=epoch, loss=running / count, val_loss=val_loss)
        log.info("pretrain G epoch %d: train %.4f val %.4f", epoch, running / count, val_loss)
        if val_loss < best[0]:
            best = (val_loss, {k: v.data.copy() for k, v in G.params.items()})
    if best is not None:
        for k, v in best[1].items():
            G.params[k].data[...] = v
    return tlog


# discriminator pretraining

def _score_ids(D: Discriminator, ids, mask, x_c):
    return D.score(ids, mask, x_c)


def discriminator_accuracy(D: Discriminator, sets: ReferenceSets, idx: np.ndarray,
                           rng: np.random.Generator) -> float:
    """Matched sets classified real and mismatched sets classified fake, at 0.5."""
    p = D.config.set_size
    with ad.no_grad():
        ids, mask = sets.sample(idx, p, rng)
        perm = derangement(len(idx), rng)
        f_ids, f_mask = sets.sample(idx[perm], p, rng)
        dr = _score_ids(D, ids, mask, sets.x_c[idx]).prob.data
        df = _score_ids(D, f_ids, f_mask, sets.x_c[idx]).prob.data
    return float((np.sum(dr > 0.5) + np.sum(df <= 0.5)) / (2 * len(idx)))


def pretrain_discriminator(dataset: ToyDataset, G: Generator, D: Discriminator,
                           config: TrainConfig, log_: TrainLog | None = None) -> TrainLog:
    """Matched image/reference-set pairs against mismatched ones."""
    config.validate()
    tlog = log_ or TrainLog(config.record_time)
    rng = np.random.default_rng([config.seed, 3])
    steps = G.config.steps
    train = ReferenceSets(dataset.train, dataset, steps)
    val = ReferenceSets(dataset.val, dataset, steps)
    p = D.config.set_size
    B = config.gan_batch_size
    opt = Adam(D.parameters(), config.pretrain_d_lr, 0.9, 0.999, clip_norm=config.clip_norm)
    probe_idx = np.arange(min(len(val), max(config.probe_size, 2)))
    for step in range(1, config.pretrain_d_steps + 1):
        idx = rng.choice(len(train), size=B, replace=False)
        ids, mask = train.sample(idx, p, rng)
        perm = derangement(B, rng)
        f_ids, f_mask = train.sample(idx[perm], p, rng)
        with ad.Tape() as tape:
            dm = _score_ids(D, ids, mask, train.x_c[idx]).prob
            dx = _score_ids(D, f_ids, f_mask, train.x_c[idx]).prob
            loss = pretrain_discriminator_loss(dm, dx)
        value = _finite(loss.item(), f"discriminator pretraining step {step}")
        opt.step(tape.backward(loss))
        tlog.add("pretrain_d", update=True, loss=value)
    acc = discriminator_accuracy(D, val, probe_idx, np.random.default_rng([config.seed, 4]))
    tlog.add("pretrain_d_eval", accuracy=acc)
    if config.pretrain_d_steps and acc <= 0.5:
        log.warning("discriminator pretraining ended at chance accuracy %.3f", acc)
    return tlog


# adversarial schedule

def run_schedule(n_g_updates: int, n_d: int, monitor_every: int, acc_gate: float,
                 gate_max_steps: int, d_step: Callable[[str], float], g_step: Callable[[], float],
                 probe: Callable[[], float], tlog: TrainLog) -> TrainLog:
    """Drive ``n_g_updates`` generator updates with ``n_d`` discriminator updates before each."""
    since_probe = monitor_every
    last_acc = None
    g_done = 0
    while g_done < n_g_updates:
        for _ in range(n_d):
            tlog.add("d", update=True, loss=d_step("gan"))
            since_probe += 1
        if since_probe >= monitor_every:
            last_acc = probe()
            since_probe = 0
            tlog.add("probe", accuracy=last_acc)
            if last_acc < acc_gate:
                pre = last_acc
                spent = 0
                while last_acc < acc_gate:
                    if spent >= gate_max_steps:
                        tlog.add("gate", pre_acc=pre, post_acc=last_acc, steps=spent, aborted=True)
                        raise TrainingAbort(f"discriminator accuracy stuck at {last_acc:.3f} after "
                                            f"{spent} recovery updates")
                    for _ in range(min(n_d, gate_max_steps - spent)):
                        tlog.add("gate_d", update=True, loss=d_step("gate"))
                        spent += 1
                    last_acc = probe()
                    tlog.add("probe", accuracy=last_acc)
                tlog.add("gate", pre_acc=pre, post_acc=last_acc, steps=spent)
        if last_acc is not None and last_acc < acc_gate:
            raise AssertionError("generator update attempted below the accuracy gate")
        tlog.add("g", update=True, loss=g_step())
        since_probe += 1
        g_done += 1
    return tlog


class AdversarialTrainer:
    def __init__(self, dataset: ToyDataset, G: Generator, D: Discriminator, config: TrainConfig,
                 tlog: TrainLog | None = None):
        config.validate()
        self.G, self.D, self.config = G, D, config
        self.log = tlog or TrainLog(config.record_time)
        steps = G.config.steps
        self.train = ReferenceSets(dataset.train, dataset, steps)
        self.val = ReferenceSets(dataset.val, dataset, steps)
        self.rng = np.random.default_rng([config.seed, 5])
        self.opt_d = Adam(D.parameters(), config.lr_d, config.adam_beta1, config.adam_beta2,
                          clip_norm=config.clip_norm)
        self.opt_g = Adam(G.parameters(), config.lr_g, config.adam_beta1, config.adam_beta2,
                          clip_norm=config.clip_norm)
        self.p = D.config.set_size
        self.probe_idx = np.arange(min(len(self.val), max(config.probe_size, 2)))
        self.n_probes = 0

    def _generated(self, sets: ReferenceSets, idx, rng):
        """Hard Gumbel samples for each image, repeated p times, no tape."""
        p = self.p
        x_c = np.repeat(sets.x_c[idx], p, axis=0)
        x_o = np.repeat(sets.x_o[idx], p, axis=0)
        with ad.no_grad():
            ro = self.G.unroll_gumbel(x_c, x_o, self.G.sample_noise(rng, len(x_c)), rng)
        return ro.ids, ro.mask

    def d_step(self, phase: str = "gan") -> float:
        B, p, rng = self.config.gan_batch_size, self.p, self.rng
        idx = rng.choice(len(self.train), size=B, replace=False)
        r_ids, r_mask = self.train.sample(idx, p, rng)
        f_ids, f_mask = self.train.sample(idx[derangement(B, rng)], p, rng)
        g_ids, g_mask = self._generated(self.train, idx, rng)
        x_c = self.train.x_c[idx]
        with ad.Tape() as tape:
            dr = _score_ids(self.D, r_ids, r_mask, x_c).prob
            dg = _score_ids(self.D, g_ids, g_mask, x_c).prob
            df = _score_ids(self.D, f_ids, f_mask, x_c).prob
            loss = discriminator_loss(dr, dg, df)
        grads = tape.backward(loss)
        if any(p_ in grads for p_ in self.G.parameters()):
            raise AssertionError("discriminator loss leaked gradients into the generator")
        self.opt_d.step(grads)
        return _finite(loss.item(), f"discriminator update ({phase})")

    def g_step(self) -> float:
        B, p, rng = self.config.gan_batch_size, self.p, self.rng
        idx = rng.choice(len(self.train), size=B, replace=False)
        r_ids, r_mask = self.train.sample(idx, p, rng)
        x_c = self.train.x_c[idx]
        xr_c = np.repeat(x_c, p, axis=0)
        xr_o = np.repeat(self.train.x_o[idx], p, axis=0)
        with frozen(self.D.parameters()):
            with ad.no_grad():
                real = _score_ids(self.D, r_ids, r_mask, x_c)
            with ad.Tape() as tape:
                ro = self.G.unroll_gumbel(xr_c, xr_o, self.G.sample_noise(rng, B * p), rng)
                gen = self.D.score(ro.onehots, ro.mask, x_c)
                loss = generator_loss(
                    gen.prob,
                    batch_distance_stats(gen.pooled_s, gen.pooled_x, "generated"),
                    batch_distance_stats(real.pooled_s, real.pooled_x, "real"),
                    feature_matching=self.config.feature_matching)
            grads = tape.backward(loss)
        if any(p_ in grads for p_ in self.D.parameters()):
            raise AssertionError("generator loss leaked gradients into the discriminator")
        self.opt_g.step(grads)
        return _finite(loss.item(), "generator update")

    def probe(self) -> float:
        """Accuracy over real (as real), generated and mismatched (as fake) sets."""
        self.n_probes += 1
        rng = np.random.default_rng([self.config.seed, 6, self.n_probes])
        idx = self.probe_idx
        p = self.p
        r_ids, r_mask = self.val.sample(idx, p, rng)
        f_ids, f_mask = self.val.sample(idx[derangement(len(idx), rng)], p, rng)
        g_ids, g_mask = self._generated(self.val, idx, rng)
        x_c = self.val.x_c[idx]
        with ad.no_grad():
            dr = _score_ids(self.D, r_ids, r_mask, x_c).prob.data
            dg = _score_ids(self.D, g_ids, g_mask, x_c).prob.data
            df = _score_ids(self.D, f_ids, f_mask, x_c).prob.data
        correct = np.sum(dr > 0.5) + np.sum(dg <= 0.5) + np.sum(df <= 0.5)
        return float(correct / (3 * len(idx)))

    def run(self) -> TrainLog:
        c = self.config
        return run_schedule(c.gan_g_steps, c.n_d, c.monitor_every, c.acc_gate, c.gate_max_steps,
                            self.d_step, self.g_step, self.probe, self.log)


def gan_train(dataset: ToyDataset, G: Generator, D: Discriminator, config: TrainConfig,
              tlog: TrainLog | None = None) -> TrainLog:
    return AdversarialTrainer(dataset, G, D, config, tlog).run()


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
