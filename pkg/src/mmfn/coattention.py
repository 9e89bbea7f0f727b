"""Shared-weight co-attention Transformer block and the fine-grained fusion path."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    DTYPE,
    LayerNorm,
    Linear,
    Module,
    ReLU,
    Sequential,
    mean_pool,
    mean_pool_backward,
    softmax_rows,
    softmax_rows_backward,
)

SCALE_MODES = ("inv_sqrt", "inv_linear")


@dataclass(frozen=True)
class CTConfig:
    d_m: int = 512
    heads: int = 8
    ffn_hidden: int | None = None
    scale_mode: str = "inv_sqrt"
    eps: float = 1e-5

    def __post_init__(self):
        if self.d_m < 1 or self.heads < 1 or self.d_m % self.heads:
            raise ValueError(f"d_m={self.d_m} is not divisible by heads={self.heads}")
        if self.scale_mode not in SCALE_MODES:
            raise ValueError(f"scale_mode must be one of {SCALE_MODES}")

    @property
    def d_h(self) -> int:
        return self.d_m // self.heads

    @property
    def hidden(self) -> int:
        return self.ffn_hidden or self.d_m

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.d_h) if self.scale_mode == "inv_sqrt" else 1.0 / self.d_h


class CTBlock(Module):
    """Multi-head co-attention followed by a feed-forward layer.

    Queries come from ``i1``; keys and values from ``i2``. There is no
    self-attention. The per-head query/key/value maps are bias-free: a key
    bias would cancel inside the softmax and never affect the output. The output is the row-mean of::

        x1 = Norm(i1 + MultiHead(i1, i2))
        out = Norm(i1 + FFN(x1))
    """

    def __init__(self, config: CTConfig, rng: np.random.Generator):
        self.config = config
        d_m, d_h = config.d_m, config.d_h
        self.query = [Linear(d_m, d_h, rng, bias=False) for _ in range(config.heads)]
        self.key = [Linear(d_m, d_h, rng, bias=False) for _ in range(config.heads)]
        self.value = [Linear(d_m, d_h, rng, bias=False) for _ in range(config.heads)]
        self.out = Linear(d_m, d_m, rng)
        self.norm1 = LayerNorm(d_m, config.eps)
        self.ffn = Sequential(Linear(d_m, config.hidden, rng), ReLU(), Linear(config.hidden, d_m, rng))
        self.norm2 = LayerNorm(d_m, config.eps)

    def _check(self, i1, i2):
        i1 = np.asarray(i1, dtype=DTYPE)
        i2 = np.asarray(i2, dtype=DTYPE)
        d_m = self.config.d_m
        for name, x in (("i1", i1), ("i2", i2)):
            if x.ndim < 2:
                raise ValueError(f"{name} must be a matrix, got shape {x.shape}")
            if x.shape[-1] != d_m:
                raise ValueError(f"{name} has width {x.shape[-1]}, expected d_m={d_m}")
            if x.shape[-2] == 0:
                raise ValueError(f"{name} has no rows")
        return i1, i2

    def attention_maps(self, i1, i2) -> list[np.ndarray]:
        """Per-head attention weights, each (..., r1, r2)."""
        i1, i2 = self._check(i1, i2)
        return [
            softmax_rows((q(i1) @ np.swapaxes(k(i2), -1, -2)) * self.config.scale)
            for q, k in zip(self.query, self.key)
        ]

    def forward(self, i1, i2):
        i1, i2 = self._check(i1, i2)
        scale = self.config.scale
        heads, head_caches = [], []
        for q_map, k_map, v_map in zip(self.query, self.key, self.value):
            q, cq = q_map.forward(i1)
            k, ck = k_map.forward(i2)
            v, cv = v_map.forward(i2)
            attn = softmax_rows((q @ np.swapaxes(k, -1, -2)) * scale)
            heads.append(attn @ v)
            head_caches.append((q, k, v, attn, cq, ck, cv))
        mixed, c_out = self.out.forward(np.concatenate(heads, axis=-1))
        x1, c_n1 = self.norm1.forward(i1 + mixed)
        f, c_ffn = self.ffn.forward(x1)
        y, c_n2 = self.norm2.forward(i1 + f)
        cache = (head_caches, c_out, c_n1, c_ffn, c_n2, i1.shape[-2])
        return mean_pool(y), cache

    def backward(self, grad, cache):
        head_caches, c_out, c_n1, c_ffn, c_n2, rows = cache
        scale = self.config.scale
        g_y = mean_pool_backward(grad, rows)
        g_res2 = self.norm2.backward(g_y, c_n2)
        d_i1 = g_res2.copy()
        g_x1 = self.ffn.backward(g_res2, c_ffn)
        g_res1 = self.norm1.backward(g_x1, c_n1)
        d_i1 += g_res1
        g_cat = self.out.backward(g_res1, c_out)
        d_i2 = 0.0
        g_heads = np.split(g_cat, self.config.heads, axis=-1)
        for maps, g_h, hc in zip(zip(self.query, self.key, self.value), g_heads, head_caches):
            q_map, k_map, v_map = maps
            q, k, v, attn, cq, ck, cv = hc
            g_attn = g_h @ np.swapaxes(v, -1, -2)
            g_v = np.swapaxes(attn, -1, -2) @ g_h
            g_scores = softmax_rows_backward(attn, g_attn) * scale
            g_q = g_scores @ k
            g_k = np.swapaxes(g_scores, -1, -2) @ q
            d_i1 = d_i1 + q_map.backward(g_q, cq)
            d_i2 = d_i2 + k_map.backward(g_k, ck) + v_map.backward(g_v, cv)
        return d_i1, d_i2


def ct_forward(block: CTBlock, i1, i2) -> np.ndarray:
    return block(i1, i2)


class ModalProjections(Module):
    """Map token features (d_b) and patch features (d_s) to the model width."""

    def __init__(self, d_b: int, d_s: int, d_m: int, rng: np.random.Generator):
        self.text = Linear(d_b, d_m, rng)
        self.image = Linear(d_s, d_m, rng)


class FineGrainedFusion(Module):
    """Both co-attention directions through one CTBlock instance.

    ``forward(t_b, v_s)`` returns ``(F_vt, F_tv)``: text queries attending
    over image patches, and image queries attending over text tokens.
    """

    def __init__(self, d_b: int, d_s: int, config: CTConfig, rng: np.random.Generator):
        self.proj = ModalProjections(d_b, d_s, config.d_m, rng)
        self.ct = CTBlock(config, rng)

    @property
    def out_dim(self) -> int:
        return 2 * self.ct.config.d_m

    def forward(self, t_b, v_s):
        t, ct_ = self.proj.text.forward(t_b)
        v, cv_ = self.proj.image.forward(v_s)
        f_vt, c_vt = self.ct.forward(t, v)
        f_tv, c_tv = self.ct.forward(v, t)
        return (f_vt, f_tv), (ct_, cv_, c_vt, c_tv)

    def backward(self, grad, cache):
        g_vt, g_tv = grad
        ct_, cv_, c_vt, c_tv = cache
        g_t1, g_v1 = self.ct.backward(g_vt, c_vt)
        g_v2, g_t2 = self.ct.backward(g_tv, c_tv)
        return self.proj.text.backward(g_t1 + g_t2, ct_), self.proj.image.backward(g_v1 + g_v2, cv_)


class PooledFinePath(Module):
    """Fine path without co-attention: pooled projected features, side by side."""

    def __init__(self, d_b: int, d_s: int, d_m: int, rng: np.random.Generator):
        self.proj = ModalProjections(d_b, d_s, d_m, rng)
        self.d_m = d_m

    @property
    def out_dim(self) -> int:
        return 2 * self.d_m

    def forward(self, t_b, v_s):
        t, ct_ = self.proj.text.forward(t_b)
        v, cv_ = self.proj.image.forward(v_s)
        return (mean_pool(t), mean_pool(v)), (ct_, cv_, t.shape[-2], v.shape[-2])

    def backward(self, grad, cache):
        g_t, g_v = grad
        ct_, cv_, rt, rv = cache
        return (
            self.proj.text.backward(mean_pool_backward(g_t, rt), ct_),
            self.proj.image.backward(mean_pool_backward(g_v, rv), cv_),
        )


def fine_grained_pair(proj: ModalProjections, block: CTBlock, t_b, v_s) -> tuple[np.ndarray, np.ndarray]:
    t = proj.text(t_b)
    v = proj.image(v_s)
    return block(t, v), block(v, t)
