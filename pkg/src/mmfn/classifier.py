"""Uni-modal branches, the fake-news classifier and its loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    DTYPE,
    Linear,
    Module,
    ProjectionHead,
    ReLU,
    Sequential,
    concat_last,
    mean_pool,
)

REAL, FAKE = 0, 1
FAKE_INDEX = 1
PROB_EPS = 1e-7


@dataclass
class RepresentationBundle:
    f_m: np.ndarray | None
    f_t: np.ndarray | None
    f_v: np.ndarray | None
    sim: np.ndarray | float | None = None

    def concat(self) -> np.ndarray:
        parts = [p for p in (self.f_m, self.f_t, self.f_v) if p is not None]
        if not parts:
            raise ValueError("bundle holds no representations")
        return concat_last(parts)


class UniModalBranches(Module):
    """Phi_T and Phi_V: same architecture, separate parameters.

    Either branch can be disabled by passing ``None`` for its input width.
    """

    def __init__(
        self,
        text_in: int | None,
        visual_in: int | None,
        rng: np.random.Generator,
        hidden: int = 256,
        out_dim: int = 16,
    ):
        self.phi_t = ProjectionHead(text_in, rng, hidden, out_dim) if text_in else None
        self.phi_v = ProjectionHead(visual_in, rng, hidden, out_dim) if visual_in else None

    def forward(self, text_in, visual_in):
        f_t = c_t = f_v = c_v = None
        if self.phi_t is not None:
            f_t, c_t = self.phi_t.forward(text_in)
        if self.phi_v is not None:
            f_v, c_v = self.phi_v.forward(visual_in)
        return (f_t, f_v), (c_t, c_v)

    def backward(self, grad, cache):
        g_t, g_v = grad
        c_t, c_v = cache
        d_t = self.phi_t.backward(g_t, c_t) if self.phi_t is not None else None
        d_v = self.phi_v.backward(g_v, c_v) if self.phi_v is not None else None
        return d_t, d_v


def branch_forward(branches: UniModalBranches, t_b, v_s, t_c, v_c):
    """F_t from pooled tokens + aligned text, F_v from pooled patches + aligned image."""
    text_in = concat_last([mean_pool(t_b), np.asarray(t_c, dtype=DTYPE)])
    visual_in = concat_last([mean_pool(v_s), np.asarray(v_c, dtype=DTYPE)])
    return branches(text_in, visual_in)


class Classifier(Sequential):
    """Two fully connected layers (hidden 48 by default) producing two logits."""

    def __init__(self, in_dim: int, rng: np.random.Generator, hidden: int = 48, n_classes: int = 2):
        super().__init__(Linear(in_dim, hidden, rng), ReLU(), Linear(hidden, n_classes, rng))
        self.in_dim = in_dim


def fake_probability(logits, fake_index: int = FAKE_INDEX) -> np.ndarray:
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True))[..., fake_index]


def classify(clf: Classifier, bundle: RepresentationBundle, eps: float = PROB_EPS) -> np.ndarray | float:
    """Fake probability for a bundle, clamped to [eps, 1 - eps] so it never saturates."""
    x = bundle.concat()
    if x.shape[-1] != clf.in_dim:
        raise ValueError(f"classifier expects width {clf.in_dim}, bundle has {x.shape[-1]}")
    p = np.clip(fake_probability(clf(x)), eps, 1.0 - eps)
    return float(p) if np.ndim(p) == 0 else p


def bce_loss(p_fake, y, eps: float = PROB_EPS):
    """Binary cross-entropy of the fake probability, elementwise."""
    p = np.clip(np.asarray(p_fake, dtype=DTYPE), eps, 1.0 - eps)
    y = np.asarray(y, dtype=DTYPE)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(loss) if loss.ndim == 0 else loss


def bce_logits_grad(logits, y, eps: float = PROB_EPS, fake_index: int = FAKE_INDEX):
    """Mean BCE over the batch and its gradient w.r.t. the 2-way logits."""
    p = fake_probability(logits, fake_index)
    y = np.asarray(y, dtype=DTYPE)
    n = p.shape[0]
    loss = float(np.mean(bce_loss(p, y, eps)))
    # the clamp zeroes the gradient once p leaves [eps, 1 - eps]
    inside = (p >= eps) & (p <= 1.0 - eps)
    g_fake = np.where(inside, p - y, 0.0) / n
    grad = np.empty_like(np.asarray(logits, dtype=DTYPE))
    grad[..., fake_index] = g_fake
    grad[..., 1 - fake_index] = -g_fake
    return loss, grad
