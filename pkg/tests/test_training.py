import math

import numpy as np
import pytest

from advcap import autodiff as ad
from advcap.data import ToyWorldConfig, generate_toy_dataset
from advcap.discriminator import Discriminator, DiscriminatorConfig
from advcap.errors import ConfigError, NumericalError
from advcap.training import (AdversarialTrainer, ReferenceSets, TrainConfig, TrainingAbort, TrainLog,
                             derangement, gan_train, pretrain_discriminator, pretrain_generator,
                             run_schedule)
from conftest import tiny_models


def _schedule(n_g, accs, gate=0.75, n_d=5, monitor_every=25, cap=200):
    """Run the schedule with scripted probe accuracies; returns (log, counters)."""
    calls = {"d": 0, "gate": 0, "g": 0, "probe": 0}
    state = {"acc": None}
    acc_iter = iter(accs)

    def d_step(phase):
        calls["gate" if phase == "gate" else "d"] += 1
        return 0.0

    def g_step():
        assert state["acc"] is None or state["acc"] >= gate
        calls["g"] += 1
        return 0.0

    def probe():
        calls["probe"] += 1
        state["acc"] = next(acc_iter, 1.0)
        return state["acc"]

    tlog = TrainLog()
    run_schedule(n_g, n_d, monitor_every, gate, cap, d_step, g_step, probe, tlog)
    return tlog, calls


def test_five_to_one_ratio():
    tlog, calls = _schedule(12, [])
    assert calls["d"] == 60 and calls["g"] == 12 and calls["gate"] == 0
    kinds = [r["kind"] for r in tlog.records if r["kind"] in ("d", "g")]
    assert kinds == (["d"] * 5 + ["g"]) * 12


def test_update_counter_monotone():
    tlog, _ = _schedule(6, [0.6, 0.7, 0.8])
    ups = [r["update"] for r in tlog.records]
    assert ups == sorted(ups) and tlog.updates == len(tlog.of_kind("d")) + len(tlog.of_kind("g")) + len(
        tlog.of_kind("gate_d"))


def test_gate_pauses_generator():
    tlog, calls = _schedule(3, [0.60, 0.65, 0.80])
    gate = tlog.of_kind("gate")
    assert len(gate) == 1 and gate[0]["pre_acc"] == 0.60 and gate[0]["post_acc"] == 0.80
    assert calls["gate"] == 10 and calls["g"] == 3
    # no generator record between the failing probe and the recovery
    kinds = [r["kind"] for r in tlog.records]
    first = kinds.index("probe")
    end = kinds.index("gate")
    assert "g" not in kinds[first:end]


def test_gate_cap_aborts():
    with pytest.raises(TrainingAbort):
        _schedule(3, [0.5] * 100, cap=12)


def test_probes_every_monitor_period():
    tlog, calls = _schedule(10, [], n_d=5, monitor_every=12)
    # first probe before the first generator update, then once per 12 updates
    probes = [r["update"] for r in tlog.of_kind("probe")]
    assert probes[0] == 5
    assert all(b - a >= 12 for a, b in zip(probes, probes[1:]))


def test_derangement():
    rng = np.random.default_rng(0)
    for n in (2, 3, 8, 16):
        for _ in range(50):
            perm = derangement(n, rng)
            assert sorted(perm) == list(range(n)) and np.all(perm != np.arange(n))


def test_config_validation():
    for bad in (dict(n_d=0), dict(acc_gate=0.5), dict(acc_gate=1.0), dict(gan_batch_size=1)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_reference_sets_sample_layout(small_dataset, rng):
    sets = ReferenceSets(small_dataset.train, small_dataset, 8)
    idx = np.array([3, 7])
    ids, mask = sets.sample(idx, 5, rng)
    assert ids.shape == (10, 8)
    # rows are image-major and come from the right images
    own = {tuple(r) for r in sets.ids[3]}
    assert all(tuple(r) in own for r in ids[:5])
    assert len({tuple(r) for r in ids[:5]}) == len({tuple(r) for r in sets.ids[3]} & {tuple(r) for r in ids[:5]})


def test_pretrain_zero_epochs_is_identity(small_dataset):
    G, D = tiny_models(small_dataset)
    before_g = {k: v.data.copy() for k, v in G.params.items()}
    before_d = {k: v.data.copy() for k, v in D.params.items()}
    cfg = TrainConfig(pretrain_g_epochs=0, pretrain_d_steps=0)
    pretrain_generator(small_dataset, G, cfg)
    pretrain_discriminator(small_dataset, G, D, cfg)
    assert all(np.array_equal(before_g[k], G.params[k].data) for k in before_g)
    assert all(np.array_equal(before_d[k], D.params[k].data) for k in before_d)


def test_pretrain_generator_memorizes_single_caption():
    cfg_w = ToyWorldConfig(n_train=1, n_val=1, n_test=1, k=1, use_synonyms=False)
    ds = generate_toy_dataset(cfg_w, seed=0)
    # held-out split is the training split
    ds.splits["val"] = ds.splits["train"]
    G, _ = tiny_models(ds)
    tlog = pretrain_generator(ds, G, TrainConfig(pretrain_g_epochs=300, pretrain_lr=1e-2, pretrain_beta=1.0))
    evals = tlog.of_kind("pretrain_g_eval")
    V = len(ds.vocab.tokens)
    assert min(r["val_loss"] for r in evals) < 0.1 * math.log(V)


def test_pretrain_generator_improves_and_is_deterministic(small_dataset):
    results = []
    for _ in range(2):
        G, _ = tiny_models(small_dataset)
        tlog = pretrain_generator(small_dataset, G, TrainConfig(pretrain_g_epochs=2, batch_size=32))
        results.append((tlog.records, {k: v.data.copy() for k, v in G.params.items()}))
    evals = [r for r in results[0][0] if r["kind"] == "pretrain_g_eval"]
    assert min(r["val_loss"] for r in evals[1:]) < evals[0]["val_loss"]
    assert results[0][0] == results[1][0]
    assert all(np.array_equal(results[0][1][k], results[1][1][k]) for k in results[0][1])


def test_pretrain_generator_nan_aborts(small_dataset):
    G, _ = tiny_models(small_dataset)
    G.params["out.bias"].data[0] = np.nan
    with pytest.raises(NumericalError):
        pretrain_generator(small_dataset, G, TrainConfig(pretrain_g_epochs=1))


def test_pretrain_discriminator_separable():
    # one attribute, one phrasing per value, noiseless features: matching is a lookup.
    # Mismatched pairs share an object with probability 1/12, which caps accuracy near 0.96
    words = ("dog", "cat", "bus", "kite", "tree", "boat", "car", "cup", "bird", "horse", "train", "sheep")
    attrs = {"object": {w: [w] for w in words}}
    cfg = ToyWorldConfig(attributes=attrs, templates=["{det} {object}"], feature_noise=0.0,
                         n_train=200, n_val=40, n_test=10)
    ds = generate_toy_dataset(cfg, seed=1)
    G, _ = tiny_models(ds)
    D = Discriminator(DiscriminatorConfig(len(ds.vocab), ds.image_dim), seed=0)
    tlog = pretrain_discriminator(ds, G, D, TrainConfig(pretrain_d_steps=200, pretrain_d_lr=3e-3, probe_size=40))
    assert tlog.of_kind("pretrain_d_eval")[0]["accuracy"] > 0.9


def test_pretrain_discriminator_shuffled_labels_near_chance():
    ds = generate_toy_dataset(ToyWorldConfig(n_train=200, n_val=200, n_test=10), seed=1)
    rng = np.random.default_rng(0)
    # shuffling features across scenes removes any image/caption relation
    feats = [it.x_c for it in ds.train.items]
    for it, j in zip(ds.train.items, rng.permutation(len(feats))):
        it.x_c = feats[j]
    vfeats = [it.x_c for it in ds.val.items]
    for it, j in zip(ds.val.items, rng.permutation(len(vfeats))):
        it.x_c = vfeats[j]
    G, D = tiny_models(ds)
    tlog = pretrain_discriminator(ds, G, D, TrainConfig(pretrain_d_steps=150, pretrain_d_lr=3e-3, probe_size=200))
    assert abs(tlog.of_kind("pretrain_d_eval")[0]["accuracy"] - 0.5) < 0.05


def _gan_run(ds, seed=0, steps=3, **kw):
    G, D = tiny_models(ds, seed=seed)
    cfg = TrainConfig(seed=seed, gan_g_steps=steps, gan_batch_size=4, probe_size=6, monitor_every=4,
                      acc_gate=0.51, gate_max_steps=50, **kw)
    tlog = gan_train(ds, G, D, cfg)
    return tlog, G, D


def test_gan_train_deterministic_losses(small_dataset):
    a, _, _ = _gan_run(small_dataset)
    b, _, _ = _gan_run(small_dataset)
    assert a.losses() == b.losses() and a.records == b.records
    assert len(a.of_kind("g")) == 3


def test_parameter_isolation(small_dataset):
    G, D = tiny_models(small_dataset)
    trainer = AdversarialTrainer(small_dataset, G, D, TrainConfig(gan_batch_size=4, probe_size=4))
    g_before = {k: v.data.copy() for k, v in G.params.items()}
    trainer.d_step()
    assert all(np.array_equal(g_before[k], G.params[k].data) for k in g_before)
    d_before = {k: v.data.copy() for k, v in D.params.items()}
    trainer.g_step()
    assert all(np.array_equal(d_before[k], D.params[k].data) for k in d_before)
    assert any(not np.array_equal(g_before[k], G.params[k].data) for k in g_before)
    assert all(p.requires_grad for p in D.parameters())


def test_generator_update_sees_discriminator_gradient(small_dataset):
    """The straight-through path carries a nonzero gradient from D's verdict into G."""
    G, D = tiny_models(small_dataset)
    rng = np.random.default_rng(0)
    x_c, x_o = small_dataset.train.features()
    xc, xo = np.repeat(x_c[:2], 5, 0), np.repeat(x_o[:2], 5, 0)
    with ad.Tape() as tape:
        ro = G.unroll_gumbel(xc, xo, G.sample_noise(rng, 10), rng)
        loss = ad.tsum(ad.log(D.score(ro.onehots, ro.mask, x_c[:2]).prob))
    grads = tape.backward(loss)
    assert np.abs(grads[G.params["out.weight"]]).sum() > 0


def test_probe_accuracy_range(small_dataset):
    G, D = tiny_models(small_dataset)
    trainer = AdversarialTrainer(small_dataset, G, D, TrainConfig(gan_batch_size=4, probe_size=6))
    acc = trainer.probe()
    assert 0.0 <= acc <= 1.0 and (acc * 18) == pytest.approx(round(acc * 18))


def test_train_log_jsonl(tmp_path):
    tlog = TrainLog()
    tlog.add("d", update=True, loss=1.5)
    tlog.add("probe", accuracy=0.8)
    tlog.to_jsonl(tmp_path / "log.jsonl")
    lines = (tmp_path / "log.jsonl").read_text().splitlines()
    assert lines[0] == '{"kind": "d", "loss": 1.5, "update": 1}'
    assert "wall_time" not in lines[1]
    assert "wall_time" in TrainLog(record_time=True).add("x")
