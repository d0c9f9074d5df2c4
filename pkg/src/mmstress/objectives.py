"""Training objectives: projected cosine similarity, inter-modality contrastive
loss, cross-entropy, and their per-scheme combination."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

EPS = 1e-12
LOSS_SCHEMES = ("supervised", "contrastive-only", "regularized")

# number of true-class probabilities clamped at EPS by cross_entropy
clamp_events = 0


@dataclass
class ContrastiveConfig:
    temperature: float = 0.1
    lambda_reg: float = 0.1

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not self.lambda_reg >= 0:
            raise ValueError(f"lambda_reg must be non-negative, got {self.lambda_reg}")


class ProjectionHead:
    """Shared two-layer tanh perceptron ``h`` applied before cosine similarity.

    ``ProjectionHead.identity()`` skips the projection, which makes closed-form
    checks possible.
    """

    def __init__(self, params=None, prefix: str = "proj"):
        self.params = params
        self.prefix = prefix

    @classmethod
    def identity(cls) -> "ProjectionHead":
        return cls(None)

    @property
    def is_identity(self) -> bool:
        return self.params is None

    def __call__(self, x: Tensor) -> Tensor:
        if self.params is None:
            return x
        p = self.params
        hidden = ad.tanh(ad.matmul(x, p[f"{self.prefix}.l1.w"]) + p[f"{self.prefix}.l1.b"])
        return ad.matmul(hidden, p[f"{self.prefix}.l2.w"]) + p[f"{self.prefix}.l2.b"]


def _as_rows(x) -> Tensor:
    x = x if isinstance(x, Tensor) else ad.constant(x)
    return ad.reshape(x, (1, x.size)) if x.value.ndim == 1 else x


def similarity_matrix(a, b, head: ProjectionHead) -> Tensor:
    """``S[i, j] = phi(a_i, b_j)`` for row batches ``a [n, E]`` and ``b [k, E]``."""
    ua = ad.l2_normalize_rows(head(_as_rows(a)), EPS)
    ub = ad.l2_normalize_rows(head(_as_rows(b)), EPS)
    return ad.matmul(ua, ad.transpose(ub))


def cosine_similarity(u, v, head: ProjectionHead) -> Tensor:
    return ad.reshape(similarity_matrix(u, v, head), ())


def _inverse(temperature: Union[float, Tensor]):
    if isinstance(temperature, Tensor):
        return ad.exp(-ad.log(temperature))
    return 1.0 / float(temperature)


def contrastive_loss(embeddings: Sequence[Tensor], z: Tensor, head: ProjectionHead,
                     temperature: Union[float, Tensor] = 0.1) -> Tensor:
    """Mean over instances and modalities of
    ``-log(exp(phi(z_i^m, z_i)/t) / sum_{j != i} exp(phi(z_i^m, z_j)/t))``.

    The anchor is each instance's own aggregate; negatives are the other
    instances' aggregates only.
    """
    n = z.shape[0]
    if n < 2:
        raise ValueError("contrastive loss undefined for singleton batch")
    if not embeddings:
        raise ValueError("contrastive loss needs at least one modality embedding")
    inv_t = _inverse(temperature)
    anchors = ad.transpose(ad.l2_normalize_rows(head(z), EPS))
    off_diag = ~np.eye(n, dtype=bool)
    terms = []
    for z_m in embeddings:
        u = ad.l2_normalize_rows(head(z_m), EPS)
        logits = ad.matmul(u, anchors) * inv_t
        terms.append(ad.logsumexp_rows(logits, off_diag) - ad.diagonal(logits))
    return ad.reduce(ad.concat(terms, axis=0), "mean")


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Batch mean of ``-ln p[true class]``; probabilities below 1e-12 are clamped."""
    global clamp_events
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    probs = probs if isinstance(probs, Tensor) else ad.constant(probs)
    if probs.value.ndim == 1:
        probs = ad.reshape(probs, (1, probs.size))
    n, c = probs.shape
    if len(labels) != n or labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels {labels} do not match probabilities of shape {probs.shape}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    picked = ad.reduce(probs * ad.constant(onehot), "sum", axis=1)
    low = int(np.sum(picked.value < EPS))
    if low:
        clamp_events += low
        logger.warning("cross_entropy: clamped %d true-class probabilities at %g", low, EPS)
    return -ad.reduce(ad.log(ad.clip_min(picked, EPS)), "mean")


def combined_loss(latent, probs: Optional[Tensor], labels, config: ContrastiveConfig,
                  scheme: str, head: ProjectionHead) -> tuple:
    """Return ``(total, {"cross_entropy": float, "contrastive": float})`` for ``scheme``.

    Components that the scheme does not use are omitted from the dict.
    """
    if scheme not in LOSS_SCHEMES:
        raise ValueError(f"unknown loss scheme {scheme!r}; expected one of {LOSS_SCHEMES}")
    parts = {}
    if scheme == "supervised":
        total = cross_entropy(probs, labels)
        parts["cross_entropy"] = float(total.value)
    elif scheme == "contrastive-only":
        total = contrastive_loss(latent.embeddings, latent.z, head, config.temperature)
        parts["contrastive"] = float(total.value)
    else:
        ce = cross_entropy(probs, labels)
        cl = contrastive_loss(latent.embeddings, latent.z, head, config.temperature)
        total = ce + cl * config.lambda_reg
        parts["cross_entropy"] = float(ce.value)
        parts["contrastive"] = float(cl.value)
    return total, parts
