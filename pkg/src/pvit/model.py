"""The prior-token vision transformer.

An image is cut into patches, linearly embedded, and prefixed with a
learnable class token; positions 0..N carry learned positional
encodings.  One extra token, built by projecting the softmax of a prior
classifier's logits through a trained linear map and scaling by alpha,
is appended at the end without positional encoding, giving an N+2 token
sequence.  A stack of pre-layer-norm encoder blocks (multi-head
self-attention, then a GELU MLP, both with residual connections)
processes the sequence; the class token's final representation, layer
normalized, feeds the classifier head.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import FormatError, ShapeError
from .rng import philox, truncated_normal
from .tensor import Tensor

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class PViTConfig:
    """Architecture hyperparameters.

    ``alpha`` scales the prior token; ``prior_broadcast`` selects whether
    each batch element gets a token from its own prior logits
    ("sample", the default) or the whole batch shares the first
    element's token ("batch").
    """

    image_h: int = 28
    image_w: int = 28
    channels: int = 1
    patch_size: int = 7
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_dim: int = 128
    num_classes: int = 4
    alpha: float = 0.1
    prior_broadcast: str = "sample"

    def __post_init__(self):
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ShapeError(
                f"image {self.image_h}x{self.image_w} not divisible by patch size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ShapeError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.alpha < 0:
            raise ShapeError(f"alpha must be nonnegative, got {self.alpha}")
        if self.prior_broadcast not in ("sample", "batch"):
            raise ShapeError(f"prior_broadcast must be 'sample' or 'batch', got {self.prior_broadcast!r}")

    @property
    def num_patches(self) -> int:
        return (self.image_h * self.image_w) // (self.patch_size**2)

    @property
    def seq_len(self) -> int:
        # class token + patches + prior token
        return self.num_patches + 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class ForwardTrace:
    """Per-sample record of one forward pass.

    ``attentions`` has one (heads, S, S) array per layer, S = N + 2;
    ``y`` is the normalized final class-token representation; ``logits``
    is filled in by :func:`classify`.
    """

    attentions: list[np.ndarray]
    y: Tensor
    logits: Optional[Tensor] = None


@dataclass
class BatchForward:
    """Batched forward result used by training and scoring."""

    logits: Tensor  # (B, K)
    y: Tensor  # (B, D)
    attentions: Optional[list[np.ndarray]] = None  # per layer (B, H, S, S)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut an H x W x C image into N rows of row-major flattened patches."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeError(f"patchify expects H x W x C, got shape {image.shape}")
    h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    blocks = image.reshape(h // p, p, w // p, p, c)
    return np.ascontiguousarray(blocks.transpose(0, 2, 1, 3, 4)).reshape((h // p) * (w // p), p * p * c)


def _patchify_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    b, h, w, c = images.shape
    p = patch_size
    blocks = images.reshape(b, h // p, p, w // p, p, c)
    return np.ascontiguousarray(blocks.transpose(0, 1, 3, 2, 4, 5)).reshape(
        b, (h // p) * (w // p), p * p * c
    )


class PViTModel:
    """Parameter set plus forward passes for the prior-token transformer."""

    def __init__(self, config: PViTConfig, seed: int = 0):
        self.config = config
        c = config
        gen = philox(seed, 0x1417)
        params: dict[str, Tensor] = {}

        def param(name: str, shape: tuple[int, ...], init: str = "trunc") -> None:
            if init == "trunc":
                value = truncated_normal(gen, shape, std=0.02)
            elif init == "zeros":
                value = np.zeros(shape)
            else:
                value = np.ones(shape)
            params[name] = Tensor(value, requires_grad=True)

        param("patch_embed.weight", (c.patch_dim, c.embed_dim))
        param("patch_embed.bias", (c.embed_dim,), "zeros")
        param("cls_token", (1, c.embed_dim))
        param("pos_embed", (c.num_patches + 1, c.embed_dim))
        param("prior_proj", (c.num_classes, c.embed_dim))
        for i in range(c.depth):
            blk = f"blocks.{i}"
            param(f"{blk}.ln1.gain", (c.embed_dim,), "ones")
            param(f"{blk}.ln1.bias", (c.embed_dim,), "zeros")
            for proj in ("q", "k", "v", "out"):
                param(f"{blk}.attn.{proj}.weight", (c.embed_dim, c.embed_dim))
                param(f"{blk}.attn.{proj}.bias", (c.embed_dim,), "zeros")
            param(f"{blk}.ln2.gain", (c.embed_dim,), "ones")
            param(f"{blk}.ln2.bias", (c.embed_dim,), "zeros")
            param(f"{blk}.mlp.fc1.weight", (c.embed_dim, c.mlp_dim))
            param(f"{blk}.mlp.fc1.bias", (c.mlp_dim,), "zeros")
            param(f"{blk}.mlp.fc2.weight", (c.mlp_dim, c.embed_dim))
            param(f"{blk}.mlp.fc2.bias", (c.embed_dim,), "zeros")
        param("final_norm.gain", (c.embed_dim,), "ones")
        param("final_norm.bias", (c.embed_dim,), "zeros")
        param("head.weight", (c.embed_dim, c.num_classes))
        param("head.bias", (c.num_classes,), "zeros")
        self.params = params

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    # ------------------------------------------------------------------
    # forward pieces

    def make_prior_token(self, prior_logits, alpha: Optional[float] = None) -> Tensor:
        """alpha * (softmax(prior logits) projected into the embedding space).

        The projection is a trained parameter, so the token participates
        in the gradient tape; the result is exactly linear in alpha.
        """
        alpha = self.config.alpha if alpha is None else float(alpha)
        p = prior_logits if isinstance(prior_logits, Tensor) else Tensor(prior_logits)
        if p.shape != (self.config.num_classes,):
            raise ShapeError(
                f"prior logits must have length {self.config.num_classes}, got shape {p.shape}"
            )
        if not np.all(np.isfinite(p.data)):
            raise ShapeError("prior logits must be finite")
        weights = T.softmax(T.reshape(p, (1, self.config.num_classes)), axis=1)
        return T.mul(T.matmul(weights, self._p("prior_proj")), alpha)

    def embed_patches(self, patch_rows) -> Tensor:
        rows = patch_rows if isinstance(patch_rows, Tensor) else Tensor(patch_rows)
        return T.add(T.matmul(rows, self._p("patch_embed.weight")), self._p("patch_embed.bias"))

    def assemble_sequence(self, patch_emb: Tensor, prior_token: Tensor) -> Tensor:
        """[class token; patch embeddings] + positions, then the prior token.

        The prior token sits at index N+1 and receives no positional
        encoding.
        """
        n = self.config.num_patches
        if patch_emb.shape != (n, self.config.embed_dim):
            raise ShapeError(f"patch embeddings must be ({n}, {self.config.embed_dim}), got {patch_emb.shape}")
        if prior_token.shape != (1, self.config.embed_dim):
            raise ShapeError(f"prior token must be (1, {self.config.embed_dim}), got {prior_token.shape}")
        body = T.add(T.concat([self._p("cls_token"), patch_emb], axis=0), self._p("pos_embed"))
        return T.concat([body, prior_token], axis=0)

    def _encode(self, seq: Tensor, want_attention: bool) -> tuple[Tensor, list[np.ndarray]]:
        """Shared encoder over a (..., S, D) sequence stack."""
        c = self.config
        head_dim = c.embed_dim // c.heads
        scale = 1.0 / np.sqrt(head_dim)
        batched = seq.ndim == 3
        attentions: list[np.ndarray] = []
        z = seq
        for i in range(c.depth):
            blk = f"blocks.{i}"
            normed = T.layer_norm(z, self._p(f"{blk}.ln1.gain"), self._p(f"{blk}.ln1.bias"), LAYER_NORM_EPS)
            qkv = []
            for proj in ("q", "k", "v"):
                x = T.add(
                    T.matmul(normed, self._p(f"{blk}.attn.{proj}.weight")),
                    self._p(f"{blk}.attn.{proj}.bias"),
                )
                s = x.shape[-2]
                if batched:
                    x = T.transpose(T.reshape(x, (x.shape[0], s, c.heads, head_dim)), (0, 2, 1, 3))
                else:
                    x = T.transpose(T.reshape(x, (s, c.heads, head_dim)), (1, 0, 2))
                qkv.append(x)
            q, k, v = qkv
            scores = T.mul(T.matmul(q, T.transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))), scale)
            attn = T.softmax(scores, axis=-1)
            if want_attention:
                attentions.append(attn.numpy())
            ctx = T.matmul(attn, v)
            if batched:
                merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (ctx.shape[0], ctx.shape[2], c.embed_dim))
            else:
                merged = T.reshape(T.transpose(ctx, (1, 0, 2)), (ctx.shape[1], c.embed_dim))
            msa = T.add(T.matmul(merged, self._p(f"{blk}.attn.out.weight")), self._p(f"{blk}.attn.out.bias"))
            z = T.add(msa, z)
            normed2 = T.layer_norm(z, self._p(f"{blk}.ln2.gain"), self._p(f"{blk}.ln2.bias"), LAYER_NORM_EPS)
            hidden = T.gelu(T.add(T.matmul(normed2, self._p(f"{blk}.mlp.fc1.weight")), self._p(f"{blk}.mlp.fc1.bias")))
            mlp = T.add(T.matmul(hidden, self._p(f"{blk}.mlp.fc2.weight")), self._p(f"{blk}.mlp.fc2.bias"))
            z = T.add(mlp, z)
        cls_out = z[:, 0, :] if batched else z[0, :]
        y = T.layer_norm(cls_out, self._p("final_norm.gain"), self._p("final_norm.bias"), LAYER_NORM_EPS)
        return y, attentions

    def encoder_forward(self, seq: Tensor, want_attention: bool = True) -> ForwardTrace:
        """Run the block stack on one (N+2) x D sequence."""
        if seq.shape != (self.config.seq_len, self.config.embed_dim):
            raise ShapeError(
                f"sequence must be ({self.config.seq_len}, {self.config.embed_dim}), got {seq.shape}"
            )
        y, attentions = self._encode(seq, want_attention)
        return ForwardTrace(attentions=attentions, y=y)

    def classify(self, trace: ForwardTrace) -> Tensor:
        """Head logits from the final class-token representation."""
        logits = T.add(
            T.matmul(T.reshape(trace.y, (1, self.config.embed_dim)), self._p("head.weight")),
            self._p("head.bias"),
        )
        trace.logits = T.reshape(logits, (self.config.num_classes,))
        return trace.logits

    def forward_sample(
        self, image: np.ndarray, prior_logits, alpha: Optional[float] = None, want_attention: bool = True
    ) -> ForwardTrace:
        """Full per-sample pass: patchify, embed, assemble, encode, classify."""
        patch_emb = self.embed_patches(patchify(image, self.config.patch_size))
        token = self.make_prior_token(prior_logits, alpha)
        trace = self.encoder_forward(self.assemble_sequence(patch_emb, token), want_attention)
        self.classify(trace)
        return trace

    def forward_batch(
        self,
        images: np.ndarray,
        prior_logits: np.ndarray,
        alpha: Optional[float] = None,
        want_attention: bool = False,
    ) -> BatchForward:
        """Vectorized pass over (B, H, W, C) images and (B, K) prior logits."""
        c = self.config
        alpha = c.alpha if alpha is None else float(alpha)
        images = np.asarray(images, dtype=np.float64)
        priors = np.asarray(prior_logits, dtype=np.float64)
        b = images.shape[0]
        if priors.shape != (b, c.num_classes):
            raise ShapeError(f"prior logits must be ({b}, {c.num_classes}), got {priors.shape}")
        if not np.all(np.isfinite(priors)):
            raise ShapeError("prior logits must be finite")
        if c.prior_broadcast == "batch":
            # literal replication: every row shares the first sample's priors
            priors = np.broadcast_to(priors[0], priors.shape)

        patch_emb = self.embed_patches(_patchify_batch(images, c.patch_size))  # (B, N, D)
        cls = T.broadcast_to(T.reshape(self._p("cls_token"), (1, 1, c.embed_dim)), (b, 1, c.embed_dim))
        body = T.add(T.concat([cls, patch_emb], axis=1), self._p("pos_embed"))
        weights = T.softmax(Tensor(priors), axis=1)
        tokens = T.mul(T.matmul(weights, self._p("prior_proj")), alpha)  # (B, D)
        seq = T.concat([body, T.reshape(tokens, (b, 1, c.embed_dim))], axis=1)
        y, attentions = self._encode(seq, want_attention)
        logits = T.add(T.matmul(y, self._p("head.weight")), self._p("head.bias"))
        return BatchForward(logits=logits, y=y, attentions=attentions or None)

    def batch_loss(self, images, labels, prior_logits, alpha: Optional[float] = None):
        """(cross-entropy loss, correct-prediction count) for one batch."""
        out = self.forward_batch(images, prior_logits, alpha)
        loss = T.cross_entropy(out.logits, labels)
        correct = int(np.sum(np.argmax(out.logits.data, axis=1) == np.asarray(labels)))
        return loss, correct

    # ------------------------------------------------------------------
    # persistence

    def save(self, path: str, step: int = 0, epoch: int = 0, extra_tensors: Optional[dict] = None) -> None:
        header = {
            "kind": "pvit",
            "config": asdict(self.config),
            "step": int(step),
            "epoch": int(epoch),
        }
        tensors: dict[str, np.ndarray] = {name: p.data for name, p in self.params.items()}
        if extra_tensors:
            tensors.update(extra_tensors)
        save_checkpoint(path, header, tensors)

    @classmethod
    def load(cls, path: str) -> tuple["PViTModel", dict, dict[str, np.ndarray]]:
        """Returns (model, header, leftover tensors such as optimizer state)."""
        header, tensors = load_checkpoint(path)
        if header.get("kind") != "pvit":
            raise FormatError(f"{path}: checkpoint kind {header.get('kind')!r} is not a pvit model")
        model = cls(PViTConfig(**header["config"]))
        extra: dict[str, np.ndarray] = {}
        for name, arr in tensors.items():
            if name in model.params:
                if model.params[name].shape != arr.shape:
                    raise FormatError(f"{path}: tensor {name!r} has shape {arr.shape}, expected {model.params[name].shape}")
                model.params[name].data = np.ascontiguousarray(arr)
            else:
                extra[name] = arr
        missing = set(model.params) - set(tensors)
        if missing:
            raise FormatError(f"{path}: checkpoint is missing tensors {sorted(missing)}")
        return model, header, extra


def predicted_class(logits: np.ndarray) -> int:
    """Argmax with ties broken to the lowest class index."""
    return int(np.argmax(np.asarray(logits)))


def extract_attention(trace: ForwardTrace, layer: int, head: int) -> tuple[np.ndarray, float]:
    """One stored attention matrix plus the class-token row's weight on the
    prior token (the last column)."""
    if not 0 <= layer < len(trace.attentions):
        raise ShapeError(f"layer {layer} out of range, valid 0..{len(trace.attentions) - 1}")
    per_layer = trace.attentions[layer]
    if not 0 <= head < per_layer.shape[0]:
        raise ShapeError(f"head {head} out of range, valid 0..{per_layer.shape[0] - 1}")
    matrix = per_layer[head]
    return matrix, float(matrix[0, -1])
