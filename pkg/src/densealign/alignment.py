"""Concept pooling in both modalities and the two-term alignment objective.

Text concepts are arithmetic means of the dense text rows covered by a noun
phrase. Visual concepts are temperature-softmax weighted averages of patch
features, weighted by similarity to the text concept. Training minimizes a
CLIP-style symmetric contrastive loss between global representations plus a
concept-level cross-entropy, combined as L_total = L_global + lambda * L_concept.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


class ContractError(ValueError):
    pass


def pool_text_concept(z_t, indices):
    """Mean of the dense text rows at ``indices`` (a concept's token span)."""
    if len(indices) == 0:
        raise ContractError("empty concept index set; caller must drop the concept")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.max() >= z_t.data.shape[0]:
        raise ContractError(
            f"concept index {idx.max()} out of range for {z_t.data.shape[0]} tokens"
        )
    return T.tmean(T.take(z_t, idx, axis=0), axis=0)


def pool_visual_concept(z_v, c_t, tau):
    """Soft pooling of patch features by similarity to a text concept.

    weights = softmax(z_v . c_t / tau) over patches; returns z_v^T weights.
    """
    if tau <= 0:
        raise T.ParameterError(f"pooling temperature must be > 0, got {tau}")
    scores = T.matmul(z_v, T.reshape(c_t, (-1, 1)))  # n_v x 1
    weights = T.softmax(scores, axis=0, temperature=tau)
    pooled = T.matmul(T.swapaxes(z_v, 0, 1), weights)  # d x 1
    return T.reshape(pooled, (-1,))


def visual_pool_weights(z_v, c_t, tau):
    """The softmax attention weights used by pool_visual_concept (n_v,)."""
    scores = T.matmul(z_v, T.reshape(c_t, (-1, 1)))
    return T.reshape(T.softmax(scores, axis=0, temperature=tau), (-1,))


def global_contrastive_loss(z_bar_v, z_bar_t, scale):
    """Symmetric InfoNCE between L2-normalized global representations.

    ``scale`` multiplies the cosine logits; it may be a learnable Tensor.
    """
    b = z_bar_v.data.shape[0]
    if b < 2:
        raise ContractError(f"global contrastive loss needs a batch >= 2, got {b}")
    zv = T.l2_normalize(z_bar_v, axis=-1)
    zt = T.l2_normalize(z_bar_t, axis=-1)
    scale = scale if isinstance(scale, T.Tensor) else T.tensor(float(scale))
    logits = T.mul(T.matmul(zv, T.swapaxes(zt, 0, 1)), scale)
    labels = np.arange(b)
    loss_v = T.cross_entropy(logits, labels)
    loss_t = T.cross_entropy(T.swapaxes(logits, 0, 1), labels)
    return T.mul(T.add(loss_v, loss_t), T.tensor(0.5))


def concept_loss(visual_concepts, labels, h, normalize=False):
    """Mean cross-entropy of visual concepts classified by the linear head.

    ``visual_concepts`` is a list of d-vectors, ``labels`` their concept ids,
    ``h`` the C x d classifier matrix. Zero concepts yields an exact zero with
    no gradient (degenerate batch, caller logs it).
    """
    if len(visual_concepts) == 0:
        return T.tensor(0.0)
    cv = T.stack(visual_concepts, axis=0)  # N x d
    if normalize:
        cv = T.l2_normalize(cv, axis=-1)
        h = T.l2_normalize(h, axis=-1)
    logits = T.matmul(cv, T.swapaxes(h, 0, 1))  # N x C
    return T.cross_entropy(logits, labels)


def total_loss(loss_global, loss_concept, lam):
    """Weighted sum L_g + lambda * L_l."""
    if lam < 0:
        raise T.ParameterError(f"lambda must be >= 0, got {lam}")
    return T.add(loss_global, T.mul(loss_concept, T.tensor(float(lam))))


class AlignmentHead:
    """Concept classifier matrix plus the learnable global logit scale."""

    SCALE_MAX = 100.0

    def __init__(self, num_concepts, dim, seed=0, lam=1.0, tau=0.1, normalize=False):
        if tau <= 0:
            raise T.ParameterError(f"tau must be > 0, got {tau}")
        rng = np.random.default_rng(np.random.PCG64(seed))
        self.h = T.tensor(rng.normal(0.0, 0.02, size=(num_concepts, dim)),
                          requires_grad=True)
        # CLIP-style init 1/0.07, clamped to <= 100 in forward
        self.logit_scale = T.tensor(np.asarray(1.0 / 0.07), requires_grad=True)
        self.lam = float(lam)
        self.tau = float(tau)
        self.normalize = bool(normalize)

    def parameters(self):
        return {"head.h": self.h, "head.logit_scale": self.logit_scale}

    def clamped_scale(self):
        return T.clamp(self.logit_scale, None, self.SCALE_MAX)

    def global_loss(self, z_bar_v, z_bar_t):
        return global_contrastive_loss(z_bar_v, z_bar_t, self.clamped_scale())

    def concept_loss(self, visual_concepts, labels):
        return concept_loss(visual_concepts, labels, self.h, normalize=self.normalize)

    def total(self, loss_global, loss_concept):
        return total_loss(loss_global, loss_concept, self.lam)
