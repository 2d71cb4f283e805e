"""Conditional LSTM caption generator with a straight-through Gumbel path.

The first LSTM layer sees, at every step, the previous word embedding
(the object-feature embedding at step 0), the global image feature and a
per-caption noise vector, each through its own input matrix. Layers 2..L add
their input to their output (residual). Word distributions are
``softmax(beta * logits)``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data.vocab import END_ID, PAD_ID, Caption, Vocabulary
from .errors import ConfigError, ContractError, DataError, ParameterError


@dataclass
class GeneratorConfig:
    vocab_size: int
    image_dim: int
    object_dim: int
    embed_dim: int = 64
    hidden_dim: int = 128
    num_layers: int = 3
    beta: float = 3.0
    gumbel_temperature: float = 0.5
    noise_dim: int = 8
    max_len: int = 16
    init_scale: float = 0.08
    forget_bias: float = 1.0
    allow_any_temperature: bool = False

    def validate(self):
        for name in ("vocab_size", "image_dim", "object_dim", "embed_dim", "hidden_dim",
                     "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.noise_dim < 0:
            raise ConfigError("noise_dim must be non-negative")
        if self.max_len < 2:
            raise ConfigError("max_len must leave room for START and END (>= 2)")
        if not self.beta > 0:
            raise ParameterError(f"beta must be positive, got {self.beta}")
        tau = self.gumbel_temperature
        if not tau > 0:
            raise ParameterError(f"gumbel temperature must be positive, got {tau}")
        if not self.allow_any_temperature and not 0.1 < tau <= 0.8:
            raise ParameterError(f"gumbel temperature {tau} outside the stable range (0.1, 0.8]")

    @property
    def steps(self) -> int:
        """Decoder steps per caption: every position after START."""
        return self.max_len - 1


@dataclass
class GeneratorState:
    h: list
    c: list
    t: int = 0


@dataclass
class GumbelSample:
    hard: np.ndarray
    soft: Tensor
    gumbel_noise: np.ndarray


@dataclass
class Rollout:
    """Fixed-length adversarial unroll: one-hot rows, ids and validity mask."""

    onehots: Tensor          # (N, T, V); straight-through in training
    ids: np.ndarray          # (N, T); PAD after END
    mask: np.ndarray         # (N, T); 1 up to and including END

    def captions(self) -> list[Caption]:
        out = []
        for row, m in zip(self.ids, self.mask):
            words = [int(i) for i, keep in zip(row, m) if keep and i != END_ID]
            ended = bool((row[m > 0] == END_ID).any())
            out.append(Caption(tuple(words), truncated=not ended))
        return out


@dataclass
class CaptionSet:
    image_id: object
    captions: list
    log_probs: list = field(default_factory=list)

    def __len__(self):
        return len(self.captions)


def gumbel_softmax_sample(probs, tau: float, rng: np.random.Generator,
                          noise: np.ndarray | None = None) -> GumbelSample:
    """Gumbel-Max hard sample and its temperature-``tau`` relaxation.

    Both share one Gumbel draw, so their argmaxes agree. Zero-probability
    categories get log-probability -inf and are never selected.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    theta = ad.as_tensor(probs)
    if theta.data.min() < 0 or np.any(np.abs(theta.data.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("probs must be a normalized probability vector (within 1e-6)")
    g = rng.gumbel(size=theta.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    with np.errstate(divide="ignore"):
        log_theta = np.log(theta.data)
    hard = _one_hot(np.argmax(g + log_theta, axis=-1), theta.shape[-1])
    # clamp keeps the tape finite; clamped entries carry no gradient
    safe_log = ad.log(ad.clamp(theta, 1e-300, 1.0))
    masked = ad.add(safe_log, np.where(np.isneginf(log_theta), -np.inf, 0.0))
    soft = ad.scaled_softmax(masked + g, 1.0 / tau)
    return GumbelSample(hard, soft, g)


def _as_row(x) -> Tensor:
    return ad.reshape(ad.as_tensor(x), (1, -1))


def _one_hot(ids: np.ndarray, depth: int) -> np.ndarray:
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (depth,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def pad_captions(captions: Sequence[Caption], steps: int, vocab_size: int | None = None):
    """Targets (words then END, PAD after) and masks, shape (N, steps)."""
    ids = np.full((len(captions), steps), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(captions), steps))
    for r, cap in enumerate(captions):
        words = list(cap.tokens[: steps - 1]) + [END_ID]
        if vocab_size is not None and any(not 0 <= w < vocab_size for w in words):
            raise DataError(f"caption {r} contains an out-of-vocabulary id")
        ids[r, : len(words)] = words
        mask[r, : len(words)] = 1.0
    return ids, mask


class Generator:
    def __init__(self, config: GeneratorConfig, vocab: Vocabulary, seed: int = 0):
        config.validate()
        if config.vocab_size != len(vocab):
            raise ConfigError(f"vocab_size {config.vocab_size} != vocabulary size {len(vocab)}")
        if config.object_dim != len(vocab.object_words):
            raise ConfigError(f"object_dim {config.object_dim} != "
                              f"{len(vocab.object_words)} object words")
        self.config = config
        self.vocab = vocab
        self.object_ids = np.array(vocab.object_ids, dtype=np.int64)
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> "OrderedDict[str, Tensor]":
        c = self.config
        H, E = c.hidden_dim, c.embed_dim

        def u(*shape):
            return rng.uniform(-c.init_scale, c.init_scale, size=shape)

        def gate_bias():
            b = u(4 * H)
            b[H:2 * H] = c.forget_bias
            return b

        p = OrderedDict()
        p["embed"] = u(c.vocab_size, E)
        p["l0.w_word"] = u(E, 4 * H)
        p["l0.w_image"] = u(c.image_dim, 4 * H)
        if c.noise_dim:
            p["l0.w_noise"] = u(c.noise_dim, 4 * H)
        p["l0.w_hidden"] = u(H, 4 * H)
        p["l0.bias"] = gate_bias()
        for layer in range(1, c.num_layers):
            p[f"l{layer}.w_input"] = u(H, 4 * H)
            p[f"l{layer}.w_hidden"] = u(H, 4 * H)
            p[f"l{layer}.bias"] = gate_bias()
        p["out.weight"] = u(H, c.vocab_size)
        p["out.bias"] = u(c.vocab_size)
        return OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in p.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    # building blocks

    def initial_state(self, batch: int) -> GeneratorState:
        H = self.config.hidden_dim
        zeros = [Tensor(np.zeros((batch, H))) for _ in range(self.config.num_layers)]
        return GeneratorState(list(zeros), list(zeros), 0)

    def embed_objects(self, x_o) -> Tensor:
        """Probability-weighted sum of the object words' embedding rows."""
        x_o = ad.as_tensor(x_o)
        if x_o.shape[-1] != len(self.object_ids):
            raise ConfigError(f"x_o has {x_o.shape[-1]} entries, expected {len(self.object_ids)}")
        if x_o.data.min() < 0 or x_o.data.max() > 1:
            raise ContractError("object probabilities must lie in [0, 1]")
        return ad.matmul(x_o, ad.getitem(self.params["embed"], self.object_ids))

    def sample_noise(self, rng: np.random.Generator, batch: int) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=(batch, self.config.noise_dim))

    def context(self, x_c, z=None) -> Tensor:
        """Step-invariant first-layer input: image and noise projections plus bias."""
        p = self.params
        x_c = ad.as_tensor(x_c)
        if x_c.shape[-1] != self.config.image_dim:
            raise ConfigError(f"x_c has {x_c.shape[-1]} entries, expected {self.config.image_dim}")
        ctx = ad.matmul(x_c, p["l0.w_image"]) + p["l0.bias"]
        if self.config.noise_dim:
            if z is None:
                z = np.zeros((x_c.shape[0], self.config.noise_dim))
            z = ad.as_tensor(z)
            if z.shape[-1] != self.config.noise_dim:
                raise ConfigError(f"z has {z.shape[-1]} entries, expected {self.config.noise_dim}")
            ctx = ctx + ad.matmul(z, p["l0.w_noise"])
        return ctx

    def step(self, word_embedding: Tensor, ctx: Tensor, state: GeneratorState):
        p = self.params
        H = self.config.hidden_dim
        inp = word_embedding
        hs, cs = [], []
        for layer in range(self.config.num_layers):
            h_prev, c_prev = state.h[layer], state.c[layer]
            if layer == 0:
                gates = ad.matmul(inp, p["l0.w_word"]) + ad.matmul(h_prev, p["l0.w_hidden"]) + ctx
            else:
                gates = (ad.matmul(inp, p[f"l{layer}.w_input"])
                         + ad.matmul(h_prev, p[f"l{layer}.w_hidden"]) + p[f"l{layer}.bias"])
            i = ad.sigmoid(gates[:, :H])
            f = ad.sigmoid(gates[:, H:2 * H])
            g = ad.tanh(gates[:, 2 * H:3 * H])
            o = ad.sigmoid(gates[:, 3 * H:])
            c = f * c_prev + i * g
            h = o * ad.tanh(c)
            out = h + inp if layer > 0 else h
            hs.append(h)
            cs.append(c)
            inp = out
        return inp, GeneratorState(hs, cs, state.t + 1)

    def logits(self, top_output: Tensor) -> Tensor:
        return ad.affine(top_output, self.params["out.weight"], self.params["out.bias"])

    def lstm_step(self, prev_word_embedding, x_c, z, state: GeneratorState):
        """One decoder step; returns pre-softmax logits and the advanced state."""
        if state.t < 0:
            raise ContractError("state.t must be non-negative")
        prev = ad.as_tensor(prev_word_embedding)
        if prev.shape[-1] != self.config.embed_dim:
            raise ConfigError(f"word embedding has {prev.shape[-1]} entries, "
                              f"expected {self.config.embed_dim}")
        squeeze = prev.ndim == 1
        if squeeze:
            prev, x_c = _as_row(prev), _as_row(x_c)
            z = None if z is None else _as_row(z)
        top, new_state = self.step(prev, self.context(x_c, z), state)
        logits = self.logits(top)
        if squeeze:
            logits = ad.reshape(logits, (-1,))
        return logits, new_state

    # maximum likelihood

    def ml_loss(self, x_c, x_o, references: Sequence[Caption] | Caption, beta: float | None = None,
                z=None) -> Tensor:
        """Teacher-forced negative log-likelihood, averaged per caption then over the batch."""
        if isinstance(references, Caption):
            references = [references]
            x_c = np.asarray(x_c, dtype=np.float64).reshape(1, -1)
            x_o = np.asarray(x_o, dtype=np.float64).reshape(1, -1)
        if not references:
            raise ContractError("ml_loss needs at least one reference")
        beta = self.config.beta if beta is None else beta
        steps = min(self.config.steps, max(len(r) for r in references) + 1)
        targets, mask = pad_captions(references, steps, self.config.vocab_size)
        B = len(references)
        ctx = self.context(x_c, z)
        state = self.initial_state(B)
        inp = self.embed_objects(x_o)
        tops = []
        for t in range(steps):
            top, state = self.step(inp, ctx, state)
            tops.append(top)
            if t + 1 < steps:
                inp = ad.embedding(self.params["embed"], targets[:, t])
        outs = ad.stack(tops, axis=1)                        # (B, T, H)
        logp = ad.log_softmax(self.logits(outs), beta)       # (B, T, V)
        picked = ad.gather(logp, targets)                    # (B, T)
        per_caption = ad.tsum(picked * mask, axis=1) / mask.sum(axis=1)
        return -ad.mean(per_caption)

    # decoding

    def _decode(self, x_c: np.ndarray, x_o: np.ndarray, z: np.ndarray, rng, greedy: bool,
                beta: float, max_len: int | None = None) -> list[tuple[Caption, float]]:
        steps = (max_len or self.config.max_len) - 1
        B = x_c.shape[0]
        embed = self.params["embed"].data
        with ad.no_grad():
            ctx = self.context(x_c, z)
            state = self.initial_state(B)
            inp = self.embed_objects(x_o)
            alive = np.ones(B, dtype=bool)
            words: list[list[int]] = [[] for _ in range(B)]
            total = np.zeros(B)
            for _ in range(steps):
                top, state = self.step(inp, ctx, state)
                lp = ad.log_softmax(self.logits(top), beta).data
                if greedy:
                    ids = np.argmax(lp, axis=1)
                elif isinstance(rng, (list, tuple)):
                    ids = np.array([np.argmax(lp[r] + rng[r].gumbel(size=lp.shape[1]))
                                    for r in range(B)])
                else:
                    ids = np.argmax(lp + rng.gumbel(size=lp.shape), axis=1)
                for r in np.flatnonzero(alive):
                    total[r] += lp[r, ids[r]]
                    if ids[r] == END_ID:
                        alive[r] = False
                    else:
                        words[r].append(int(ids[r]))
                if not alive.any():
                    break
                inp = Tensor(embed[ids])
        return [(Caption(tuple(w), truncated=bool(a)), float(s))
                for w, a, s in zip(words, alive, total)]

    def _beam(self, x_c: np.ndarray, x_o: np.ndarray, width: int, beta: float,
              n_best: int = 1, max_len: int | None = None) -> list[tuple[Caption, float]]:
        steps = (max_len or self.config.max_len) - 1
        embed = self.params["embed"].data
        V = self.config.vocab_size
        finished: list[tuple[float, tuple, bool]] = []
        with ad.no_grad():
            ctx_row = self.context(x_c[None, :], None).data
            state = self.initial_state(1)
            inp = self.embed_objects(x_o[None, :])
            scores = np.zeros(1)
            seqs: list[tuple[int, ...]] = [()]
            for t in range(steps):
                A = len(seqs)
                ctx = Tensor(np.repeat(ctx_row, A, axis=0))
                top, state = self.step(inp, ctx, state)
                lp = ad.log_softmax(self.logits(top), beta).data
                cand = (scores[:, None] + lp).reshape(-1)
                beam_idx = np.repeat(np.arange(A), V)
                tok = np.tile(np.arange(V), A)
                order = np.lexsort((beam_idx, tok, -cand))[:width]
                keep_rows, keep_tok, keep_scores, keep_seqs = [], [], [], []
                for k in order:
                    b, w, s = int(beam_idx[k]), int(tok[k]), float(cand[k])
                    if w == END_ID:
                        finished.append((s, seqs[b], False))
                    else:
                        keep_rows.append(b)
                        keep_tok.append(w)
                        keep_scores.append(s)
                        keep_seqs.append(seqs[b] + (w,))
                if not keep_rows:
                    break
                rows = np.array(keep_rows)
                state = GeneratorState([Tensor(h.data[rows]) for h in state.h],
                                       [Tensor(c.data[rows]) for c in state.c], state.t)
                scores = np.array(keep_scores)
                seqs = keep_seqs
                inp = Tensor(embed[np.array(keep_tok)])
            else:
                finished.extend((float(s), q, True) for s, q in zip(scores, seqs))
        finished.sort(key=lambda f: (-f[0], f[1]))
        return [(Caption(q, truncated=tr), s) for s, q, tr in finished[:n_best]]

    def generate_caption(self, x_c, x_o, mode: str = "sample", rng=None, max_len: int | None = None,
                         beam_width: int = 5, beta: float | None = None) -> tuple[Caption, float]:
        """One caption and its total log-probability under ``softmax(beta * logits)``."""
        beta = self.config.beta if beta is None else beta
        x_c = np.asarray(x_c, dtype=np.float64).reshape(-1)
        x_o = np.asarray(x_o, dtype=np.float64).reshape(-1)
        if max_len is not None and max_len < 2:
            raise ContractError("max_len must be >= 2")
        if mode == "beam":
            return self._beam(x_c, x_o, beam_width, beta, 1, max_len)[0]
        if mode == "greedy":
            z = np.zeros((1, self.config.noise_dim))
            return self._decode(x_c[None], x_o[None], z, None, True, beta, max_len)[0]
        if mode == "sample":
            if rng is None:
                raise ContractError("sample mode needs an rng")
            z = self.sample_noise(rng, 1)
            return self._decode(x_c[None], x_o[None], z, rng, False, beta, max_len)[0]
        raise ParameterError(f"unknown decoding mode {mode!r}")

    def generate_set(self, x_c, x_o, p: int, rng: np.random.Generator, image_id=None,
                     beta: float | None = None) -> CaptionSet:
        """``p`` sampled captions, each from its own child stream (noise and words)."""
        if p < 1:
            raise ContractError("p must be >= 1")
        beta = self.config.beta if beta is None else beta
        children = rng.spawn(p)
        z = np.stack([self.sample_noise(child, 1)[0] for child in children])
        x_c = np.repeat(np.asarray(x_c, dtype=np.float64).reshape(1, -1), p, axis=0)
        x_o = np.repeat(np.asarray(x_o, dtype=np.float64).reshape(1, -1), p, axis=0)
        out = self._decode(x_c, x_o, z, children, False, beta)
        return CaptionSet(image_id, [c for c, _ in out], [s for _, s in out])

    def sample_batch(self, x_c: np.ndarray, x_o: np.ndarray, rng: np.random.Generator,
                     beta: float | None = None, greedy: bool = False) -> list[tuple[Caption, float]]:
        """Batched sampling with one shared stream; rows are (image, copy) pairs."""
        beta = self.config.beta if beta is None else beta
        z = (np.zeros((len(x_c), self.config.noise_dim)) if greedy
             else self.sample_noise(rng, len(x_c)))
        return self._decode(np.asarray(x_c), np.asarray(x_o), z, rng, greedy, beta)

    def beam_search(self, x_c, x_o, width: int, n_best: int = 1,
                    beta: float | None = None) -> list[tuple[Caption, float]]:
        beta = self.config.beta if beta is None else beta
        return self._beam(np.asarray(x_c, dtype=np.float64).reshape(-1),
                          np.asarray(x_o, dtype=np.float64).reshape(-1), width, beta, n_best)

    # adversarial unroll

    def unroll_gumbel(self, x_c, x_o, z, rng: np.random.Generator, tau: float | None = None,
                      beta: float | None = None, relaxed: bool = False,
                      steps: int | None = None) -> Rollout:
        """Unroll to the full length, feeding back Gumbel samples.

        Forward values are hard one-hot rows (PAD after END); gradients
        follow the soft relaxation. ``relaxed=True`` feeds the soft rows
        forward as well and skips END masking, giving a smooth function for
        gradient checks.
        """
        tau = self.config.gumbel_temperature if tau is None else tau
        beta = self.config.beta if beta is None else beta
        steps = self.config.steps if steps is None else steps
        V = self.config.vocab_size
        x_c = ad.as_tensor(x_c)
        N = x_c.shape[0]
        ctx = self.context(x_c, z)
        state = self.initial_state(N)
        inp = self.embed_objects(x_o)
        alive = np.ones(N)
        pad_row = _one_hot(np.full(N, PAD_ID), V)
        rows, ids, mask = [], np.full((N, steps), PAD_ID, dtype=np.int64), np.zeros((N, steps))
        for t in range(steps):
            top, state = self.step(inp, ctx, state)
            logits = self.logits(top)
            g = rng.gumbel(size=(N, V))
            # softmax((g + log softmax(beta*l)) / tau) == softmax((beta*l + g) / tau)
            soft = ad.scaled_softmax(logits + g / beta, beta / tau)
            hard_ids = np.argmax(beta * logits.data + g, axis=1)
            if relaxed:
                out = soft
                ids[:, t] = hard_ids
                mask[:, t] = 1.0
            else:
                st = ad.straight_through(_one_hot(hard_ids, V), soft)
                live = alive[:, None]
                out = st * live + pad_row * (1.0 - live)
                ids[:, t] = np.where(alive > 0, hard_ids, PAD_ID)
                mask[:, t] = alive
                alive = alive * (hard_ids != END_ID)
            rows.append(out)
            inp = ad.matmul(out, self.params["embed"])
        return Rollout(ad.stack(rows, axis=1), ids, mask)

    # persistence helpers

    def config_dict(self) -> dict:
        return asdict(self.config)
