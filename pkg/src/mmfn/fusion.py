"""Coarse/fine fusion heads and similarity weighting of the multimodal representation."""

from __future__ import annotations

import numpy as np

from .nn import DTYPE, FusionFFN, Module, ProjectionHead, concat_last, split_last


def cosine_similarity(t_c, v_c) -> np.ndarray | float:
    """Cosine of the angle between aligned text and image vectors (last axis).

    Works on single vectors (returns a float) or batches. Raises on a
    zero-norm input.
    """
    t_c = np.asarray(t_c, dtype=DTYPE)
    v_c = np.asarray(v_c, dtype=DTYPE)
    if t_c.shape != v_c.shape:
        raise ValueError(f"aligned vectors differ in shape: {t_c.shape} vs {v_c.shape}")
    nt = np.linalg.norm(t_c, axis=-1)
    nv = np.linalg.norm(v_c, axis=-1)
    if np.any(nt == 0) or np.any(nv == 0):
        raise ValueError("degenerate aligned embedding")
    sim = np.clip(np.sum(t_c * v_c, axis=-1) / (nt * nv), -1.0, 1.0)
    return float(sim) if sim.ndim == 0 else sim


def remap_similarity(sim):
    return (1.0 + np.asarray(sim)) / 2.0


class FusionHeads(Module):
    """FFN_1 over the fine pair, FFN_2 over the aligned pair, then Phi_M.

    Either path may be absent (``fine_in``/``coarse_in`` set to ``None``) for
    ablations. ``forward(fine, coarse, sim)`` takes the already-concatenated
    inputs; ``sim`` (shape ``(batch,)`` or scalar) multiplies the projected
    output and is treated as a constant, or pass ``None`` to skip weighting.
    """

    def __init__(
        self,
        fine_in: int | None,
        coarse_in: int | None,
        rng: np.random.Generator,
        ffn_dim: int = 256,
        hidden: int = 256,
        out_dim: int = 16,
    ):
        if fine_in is None and coarse_in is None:
            raise ValueError("FusionHeads needs at least one of the fine or coarse inputs")
        self.ffn1 = FusionFFN(fine_in, rng, ffn_dim) if fine_in else None
        self.ffn2 = FusionFFN(coarse_in, rng, ffn_dim) if coarse_in else None
        n_paths = (self.ffn1 is not None) + (self.ffn2 is not None)
        self.phi_m = ProjectionHead(n_paths * ffn_dim, rng, hidden, out_dim)
        self.out_dim = out_dim

    def forward(self, fine, coarse, sim=None):
        parts, caches = [], {}
        if self.ffn1 is not None:
            m_f, caches["ffn1"] = self.ffn1.forward(fine)
            parts.append(m_f)
        if self.ffn2 is not None:
            m_c, caches["ffn2"] = self.ffn2.forward(coarse)
            parts.append(m_c)
        base, caches["phi"] = self.phi_m.forward(concat_last(parts))
        weight = None if sim is None else np.asarray(sim, dtype=DTYPE)[..., None]
        out = base if weight is None else weight * base
        return out, (caches, weight)

    def backward(self, grad, cache):
        caches, weight = cache
        if weight is not None:
            grad = grad * weight
        g_cat = self.phi_m.backward(grad, caches["phi"])
        widths = [f.out_dim for f in (self.ffn1, self.ffn2) if f is not None]
        g_parts = iter(split_last(g_cat, widths))
        d_fine = self.ffn1.backward(next(g_parts), caches["ffn1"]) if self.ffn1 is not None else None
        d_coarse = self.ffn2.backward(next(g_parts), caches["ffn2"]) if self.ffn2 is not None else None
        return d_fine, d_coarse


def fuse(
    heads: FusionHeads,
    f_vt,
    f_tv,
    t_c,
    v_c,
    weighting_enabled: bool = True,
    remap: bool = False,
):
    """Multimodal representation F_m and the aligned-pair similarity.

    Returns ``(F_m, sim)``. With weighting enabled, F_m is the projected
    fusion scaled by the raw cosine (or by ``(1 + cos) / 2`` with ``remap``).
    """
    single = np.ndim(t_c) == 1
    f_vt, f_tv, t_c, v_c = (np.atleast_2d(np.asarray(a, dtype=DTYPE)) for a in (f_vt, f_tv, t_c, v_c))
    sim = cosine_similarity(t_c, v_c)
    weight = (remap_similarity(sim) if remap else sim) if weighting_enabled else None
    f_m = heads(concat_last([f_vt, f_tv]), concat_last([t_c, v_c]), weight)
    if single:
        return f_m[0], float(sim[0])
    return f_m, sim
