"""The assembled network and its ablation variants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .classifier import Classifier, RepresentationBundle, UniModalBranches
from .coattention import CTConfig, FineGrainedFusion, PooledFinePath
from .fusion import FusionHeads, cosine_similarity, remap_similarity
from .nn import (
    DTYPE,
    LayerNorm,
    Module,
    concat_last,
    mean_pool,
    mean_pool_backward,
    split_last,
)


@dataclass(frozen=True)
class Dims:
    """Feature and layer sizes. Defaults are the full-size configuration."""

    n_w: int = 300
    d_b: int = 768
    n_p: int = 49
    d_s: int = 1024
    d_c: int = 512
    d_m: int = 512
    heads: int = 8
    ct_ffn_hidden: int | None = None
    scale_mode: str = "inv_sqrt"
    ffn_dim: int = 256
    proj_hidden: int = 256
    rep_dim: int = 16
    clf_hidden: int = 48
    n_classes: int = 2

    @classmethod
    def desk(cls, **overrides) -> Dims:
        """Small encoder/model widths for fast CPU runs; head sizes unchanged."""
        base = {"n_w": 16, "d_b": 32, "n_p": 9, "d_s": 32, "d_c": 64, "d_m": 32, "heads": 4}
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict | str | None) -> Dims:
        if d is None or d == "full":
            return cls()
        if d == "desk":
            return cls.desk()
        d = dict(d)
        preset = d.pop("preset", "full")
        return cls.desk(**d) if preset == "desk" else cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def ct_config(self) -> CTConfig:
        return CTConfig(self.d_m, self.heads, self.ct_ffn_hidden, self.scale_mode)


@dataclass(frozen=True)
class Wiring:
    text: bool = True
    visual: bool = True
    fine: bool = True
    coarse: bool = True
    ct: bool = True
    unimodal: bool = True
    weighting: bool = True

    @property
    def multimodal(self) -> bool:
        return self.text and self.visual and (self.fine or self.coarse)


VARIANT_WIRING: dict[str, Wiring] = {
    "full": Wiring(),
    "wo_T": Wiring(text=False),
    "wo_V": Wiring(visual=False),
    "wo_F": Wiring(fine=False, ct=False),
    "wo_C": Wiring(coarse=False, weighting=False),
    "wo_CT": Wiring(ct=False),
    "wo_U": Wiring(unimodal=False),
    "wo_W": Wiring(weighting=False),
}
VARIANT_NAMES = tuple(VARIANT_WIRING)


def check_variant(name: str) -> str:
    if name not in VARIANT_WIRING:
        raise ValueError(f"unknown variant {name!r}; valid names: {', '.join(VARIANT_NAMES)}")
    return name


@dataclass
class Batch:
    """Stacked encoder features for a mini-batch."""

    t_b: np.ndarray  # (B, n_w, d_b)
    v_s: np.ndarray  # (B, n_p, d_s)
    t_c: np.ndarray  # (B, d_c)
    v_c: np.ndarray  # (B, d_c)
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.t_c)


class MMFN(Module):
    """Multi-grained fusion network for one wiring.

    ``forward(batch)`` returns ``(logits, cache)``; the cache carries the
    representation bundle (``cache["bundle"]``) for inspection.
    """

    def __init__(
        self,
        dims: Dims,
        wiring: Wiring,
        rng: np.random.Generator,
        remap_similarity: bool = False,
        encoder_tuning: bool = True,
    ):
        self.dims = dims
        self.wiring = wiring
        self.remap = remap_similarity
        w = wiring
        uses_tokens = w.text and w.fine
        uses_patches = w.visual and w.fine
        # stand-ins for the fine-tunable last layer of the token/patch encoders
        self.text_tuning = LayerNorm(dims.d_b) if uses_tokens and encoder_tuning else None
        self.image_tuning = LayerNorm(dims.d_s) if uses_patches and encoder_tuning else None

        self.fine = None
        if w.multimodal and w.fine:
            if w.ct:
                self.fine = FineGrainedFusion(dims.d_b, dims.d_s, dims.ct_config, rng)
            else:
                self.fine = PooledFinePath(dims.d_b, dims.d_s, dims.d_m, rng)
        self.heads = None
        if w.multimodal:
            self.heads = FusionHeads(
                self.fine.out_dim if self.fine is not None else None,
                2 * dims.d_c if w.coarse else None,
                rng,
                dims.ffn_dim,
                dims.proj_hidden,
                dims.rep_dim,
            )

        text_in = (dims.d_b if w.fine else 0) + (dims.d_c if w.coarse else 0)
        visual_in = (dims.d_s if w.fine else 0) + (dims.d_c if w.coarse else 0)
        self.branches = None
        if w.unimodal or not w.multimodal:
            self.branches = UniModalBranches(
                text_in if w.text else None,
                visual_in if w.visual else None,
                rng,
                dims.proj_hidden,
                dims.rep_dim,
            )
        self.classifier = Classifier(self.input_width, rng, dims.clf_hidden, dims.n_classes)

    @property
    def weighted(self) -> bool:
        return self.heads is not None and self.wiring.weighting and self.wiring.coarse

    def input_spec(self) -> list[tuple[str, int]]:
        spec = []
        if self.wiring.multimodal:
            spec.append(("F_m", self.dims.rep_dim))
        if self.wiring.unimodal or not self.wiring.multimodal:
            if self.wiring.text:
                spec.append(("F_t", self.dims.rep_dim))
            if self.wiring.visual:
                spec.append(("F_v", self.dims.rep_dim))
        return spec

    @property
    def input_width(self) -> int:
        return sum(w for _, w in self.input_spec())

    def encoder_parameters(self) -> dict[str, list]:
        groups = {"text": [], "image": []}
        if self.text_tuning is not None:
            groups["text"] = self.text_tuning.parameters()
        if self.image_tuning is not None:
            groups["image"] = self.image_tuning.parameters()
        return groups

    def forward(self, batch: Batch):
        d = self.dims
        w = self.wiring
        cache: dict = {}
        t_b = v_s = None
        if self.text_tuning is not None:
            t_b, cache["tt"] = self.text_tuning.forward(batch.t_b)
        elif w.text and w.fine:
            t_b = np.asarray(batch.t_b, dtype=DTYPE)
        if self.image_tuning is not None:
            v_s, cache["it"] = self.image_tuning.forward(batch.v_s)
        elif w.visual and w.fine:
            v_s = np.asarray(batch.v_s, dtype=DTYPE)
        t_c = np.asarray(batch.t_c, dtype=DTYPE)
        v_c = np.asarray(batch.v_c, dtype=DTYPE)

        sim = cosine_similarity(t_c, v_c) if w.coarse and w.text and w.visual else None
        f_m = f_t = f_v = None
        if self.heads is not None:
            fine_vec = None
            if self.fine is not None:
                (f_vt, f_tv), cache["fine"] = self.fine.forward(t_b, v_s)
                fine_vec = concat_last([f_vt, f_tv])
            coarse_vec = concat_last([t_c, v_c]) if w.coarse else None
            weight = None
            if self.weighted:
                weight = remap_similarity(sim) if self.remap else sim
            f_m, cache["heads"] = self.heads.forward(fine_vec, coarse_vec, weight)
        if self.branches is not None:
            text_in = visual_in = None
            if w.text:
                text_in = concat_last(
                    ([mean_pool(t_b)] if w.fine else []) + ([t_c] if w.coarse else [])
                )
            if w.visual:
                visual_in = concat_last(
                    ([mean_pool(v_s)] if w.fine else []) + ([v_c] if w.coarse else [])
                )
            (f_t, f_v), cache["branches"] = self.branches.forward(text_in, visual_in)

        bundle = RepresentationBundle(f_m, f_t, f_v, sim)
        logits, cache["clf"] = self.classifier.forward(bundle.concat())
        cache["bundle"] = bundle
        cache["rows"] = (d.n_w if t_b is None else t_b.shape[-2], d.n_p if v_s is None else v_s.shape[-2])
        return logits, cache

    def backward(self, grad, cache):
        w = self.wiring
        g_rep = self.classifier.backward(grad, cache["clf"])
        spec = self.input_spec()
        g_parts = dict(zip([n for n, _ in spec], split_last(g_rep, [k for _, k in spec])))
        rows_t, rows_v = cache["rows"]
        g_tb = g_vs = 0.0

        if self.heads is not None:
            g_fine, _ = self.heads.backward(g_parts["F_m"], cache["heads"])
            if self.fine is not None:
                half = self.fine.out_dim // 2
                d_tb, d_vs = self.fine.backward((g_fine[..., :half], g_fine[..., half:]), cache["fine"])
                g_tb = g_tb + d_tb
                g_vs = g_vs + d_vs
        if self.branches is not None:
            d_text, d_visual = self.branches.backward(
                (g_parts.get("F_t"), g_parts.get("F_v")), cache["branches"]
            )
            if w.fine and d_text is not None:
                g_tb = g_tb + mean_pool_backward(d_text[..., : self.dims.d_b], rows_t)
            if w.fine and d_visual is not None:
                g_vs = g_vs + mean_pool_backward(d_visual[..., : self.dims.d_s], rows_v)
        # gradients stop at the aligned-pair features: that encoder is frozen
        if self.text_tuning is not None:
            g_tb = self.text_tuning.backward(g_tb, cache["tt"])
        if self.image_tuning is not None:
            g_vs = self.image_tuning.backward(g_vs, cache["it"])
        return g_tb, g_vs


@dataclass
class AblationVariant:
    name: str
    wiring: Wiring
    classifier_input_spec: list[tuple[str, int]] = field(default_factory=list)

    @property
    def input_width(self) -> int:
        return sum(w for _, w in self.classifier_input_spec)


def make_variant(
    name: str,
    dims: Dims | None = None,
    seed: int = 0,
    *,
    remap_similarity: bool = False,
    encoder_tuning: bool = True,
) -> tuple[AblationVariant, MMFN]:
    """Build the named variant with freshly seeded parameters."""
    check_variant(name)
    dims = dims or Dims()
    wiring = VARIANT_WIRING[name]
    model = MMFN(
        dims,
        wiring,
        np.random.default_rng(seed),
        remap_similarity=remap_similarity,
        encoder_tuning=encoder_tuning,
    )
    return AblationVariant(name, wiring, model.input_spec()), model
