"""Set-level discriminator: sentence encoder, image embedder and two distance kernels.

For a caption set of size p the sentence kernel compares every caption
with every other caption of the same image (self term included); the image
kernel compares each caption with the image embedding. Each kernel projects
an M-dim embedding through an (M, N*O) tensor, takes the L1 distance over
the N axis of every one of the O slices, and sums ``exp(-distance)``.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError


@dataclass
class DiscriminatorConfig:
    vocab_size: int
    image_dim: int
    word_embed_dim: int = 32
    sentence_embed_dim: int = 32     # M
    kernel_inner_dim: int = 8        # N
    num_kernels: int = 16            # O
    set_size: int = 5                # p
    init_scale: float = 0.08
    kernel_init_scale: float = 0.3
    forget_bias: float = 1.0

    def validate(self):
        for name in ("vocab_size", "image_dim", "word_embed_dim", "sentence_embed_dim",
                     "kernel_inner_dim", "num_kernels", "set_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")


@dataclass
class KernelTensor:
    values: Tensor           # (M, N * O)
    role: str                # "sentence" or "image"
    inner_dim: int
    num_kernels: int


@dataclass
class DiscriminatorOutput:
    prob: Tensor             # (B,) probability of "real"
    dist_s: Tensor           # (B, p, O)
    dist_x: Tensor           # (B, p, O)
    pooled_s: Tensor         # (B, O)
    pooled_x: Tensor         # (B, O)


def distance_features(anchors, others, kernel: KernelTensor) -> Tensor:
    """Entry (b, i, l) = sum_j exp(-||K[b,i,:,l] - K'[b,j,:,l]||_1).

    ``anchors`` is (B, p, M) and ``others`` (B, q, M); pass the anchors again
    for the sentence kernel and the (B, 1, M) image embedding for the image
    kernel. Sets never interact across the batch axis.
    """
    anchors, others = ad.as_tensor(anchors), ad.as_tensor(others)
    M = kernel.values.shape[0]
    if anchors.shape[-1] != M or others.shape[-1] != M:
        raise ConfigError(f"embeddings must have {M} entries, got {anchors.shape[-1]} "
                          f"and {others.shape[-1]}")
    if anchors.ndim != 3 or others.ndim != 3 or anchors.shape[0] != others.shape[0]:
        raise ConfigError(f"expected (B, p, M) and (B, q, M), got {anchors.shape} and {others.shape}")
    B, p, _ = anchors.shape
    q = others.shape[1]
    N, O = kernel.inner_dim, kernel.num_kernels
    ka = ad.reshape(ad.matmul(anchors, kernel.values), (B, p, 1, N, O))
    ko = ad.reshape(ad.matmul(others, kernel.values), (B, 1, q, N, O))
    l1 = ad.tsum(ad.absolute(ka - ko), axis=3)            # (B, p, q, O)
    return ad.tsum(ad.exp(-l1), axis=2)                    # (B, p, O)


class Discriminator:
    def __init__(self, config: DiscriminatorConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.params = self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> "OrderedDict[str, Tensor]":
        c = self.config
        M, N, O = c.sentence_embed_dim, c.kernel_inner_dim, c.num_kernels

        def u(*shape, scale=c.init_scale):
            return rng.uniform(-scale, scale, size=shape)

        bias = u(4 * M)
        bias[M:2 * M] = c.forget_bias
        p = OrderedDict()
        p["enc.embed"] = u(c.vocab_size, c.word_embed_dim)
        p["enc.w_input"] = u(c.word_embed_dim, 4 * M)
        p["enc.w_hidden"] = u(M, 4 * M)
        p["enc.bias"] = bias
        p["img.weight"] = u(c.image_dim, M)
        p["img.bias"] = u(M)
        p["kernel_s"] = u(M, N * O, scale=c.kernel_init_scale)
        p["kernel_x"] = u(M, N * O, scale=c.kernel_init_scale)
        p["out.weight"] = u(2 * O, 2)
        p["out.bias"] = np.zeros(2)
        return OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in p.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    @property
    def kernel_s(self) -> KernelTensor:
        c = self.config
        return KernelTensor(self.params["kernel_s"], "sentence", c.kernel_inner_dim, c.num_kernels)

    @property
    def kernel_x(self) -> KernelTensor:
        c = self.config
        return KernelTensor(self.params["kernel_x"], "image", c.kernel_inner_dim, c.num_kernels)

    def encode_sentence(self, tokens, mask=None) -> Tensor:
        """Final hidden state of the encoder LSTM, one row per sequence.

        ``tokens`` is either integer ids (S, T) or one-hot/soft rows
        (S, T, V) as a Tensor; ``mask`` marks valid positions (default all).
        """
        p = self.params
        M = self.config.sentence_embed_dim
        if isinstance(tokens, Tensor):
            if tokens.shape[-1] != self.config.vocab_size:
                raise ConfigError(f"token rows have {tokens.shape[-1]} entries, "
                                  f"expected {self.config.vocab_size}")
            words = ad.matmul(tokens, p["enc.embed"])
        else:
            ids = np.asarray(tokens, dtype=np.int64)
            words = ad.embedding(p["enc.embed"], ids)
        S, T = words.shape[0], words.shape[1]
        mask = np.ones((S, T)) if mask is None else np.asarray(mask, dtype=np.float64)
        if T == 0 or np.any(mask.sum(axis=1) == 0):
            raise ContractError("encode_sentence needs a non-empty sequence in every row")
        last = int(np.max(np.nonzero(mask.any(axis=0))[0])) + 1
        pre = ad.transpose(ad.matmul(words, p["enc.w_input"]) + p["enc.bias"], (1, 0, 2))
        h = c = Tensor(np.zeros((S, M)))
        for t in range(last):
            gates = pre[t] + ad.matmul(h, p["enc.w_hidden"])
            i = ad.sigmoid(gates[:, :M])
            f = ad.sigmoid(gates[:, M:2 * M])
            g = ad.tanh(gates[:, 2 * M:3 * M])
            o = ad.sigmoid(gates[:, 3 * M:])
            c_new = f * c + i * g
            h_new = o * ad.tanh(c_new)
            m = mask[:, t:t + 1]
            if m.all():
                h, c = h_new, c_new
            else:
                h = h + m * (h_new - h)
                c = c + m * (c_new - c)
        return h

    def embed_image(self, x_c) -> Tensor:
        x_c = ad.as_tensor(x_c)
        if x_c.shape[-1] != self.config.image_dim:
            raise ConfigError(f"x_c has {x_c.shape[-1]} entries, expected {self.config.image_dim}")
        return ad.affine(x_c, self.params["img.weight"], self.params["img.bias"])

    def discriminate(self, sentence_embeddings, x_c) -> DiscriminatorOutput:
        """Score (B, p, M) caption-set embeddings against (B, C) image features."""
        emb = ad.as_tensor(sentence_embeddings)
        if emb.ndim != 3 or emb.shape[1] != self.config.set_size:
            raise ContractError(f"expected sets of size {self.config.set_size}, got shape {emb.shape}")
        img = ad.reshape(self.embed_image(x_c), (emb.shape[0], 1, -1))
        dist_s = distance_features(emb, emb, self.kernel_s)
        dist_x = distance_features(emb, img, self.kernel_x)
        pooled_s = ad.mean(dist_s, axis=1)
        pooled_x = ad.mean(dist_x, axis=1)
        features = ad.concat([pooled_s, pooled_x], axis=1)
        logits = ad.affine(features, self.params["out.weight"], self.params["out.bias"])
        prob = ad.softmax(logits)[:, 1]
        return DiscriminatorOutput(prob, dist_s, dist_x, pooled_s, pooled_x)

    def score(self, tokens, mask, x_c) -> DiscriminatorOutput:
        """Encode B*p sequences laid out image-major, then discriminate."""
        x_c = np.asarray(x_c, dtype=np.float64) if not isinstance(x_c, Tensor) else x_c
        B = x_c.shape[0]
        p = self.config.set_size
        n_seq = tokens.shape[0]
        if n_seq != B * p:
            raise ContractError(f"got {n_seq} sequences for {B} images of set size {p}")
        emb = self.encode_sentence(tokens, mask)
        return self.discriminate(ad.reshape(emb, (B, p, -1)), x_c)

    def config_dict(self) -> dict:
        return asdict(self.config)
