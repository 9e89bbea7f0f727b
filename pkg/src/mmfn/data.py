"""Corpus loading, splitting, synthetic data, and feature caches."""

from __future__ import annotations

import json
import logging
from collections import Counter
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoders import (
    Features,
    NewsItem,
    StubTextEncoder,
    paired_vector,
    preprocess_text,
    read_array,
    write_array,
)
from .model import Batch

log = logging.getLogger(__name__)

REQUIRED_FIELDS = ("id", "text", "image_path", "label")
SPLIT_TAGS = ("train", "test")


class CorpusError(ValueError):
    pass


@dataclass
class CorpusRecord:
    id: str
    text: str
    image_path: str
    label: int
    ocr_text: str = ""
    split: str | None = None

    def to_item(self) -> NewsItem:
        return NewsItem(self.id, self.text, self.ocr_text, self.image_path, self.label)

    def to_json(self) -> str:
        d = asdict(self)
        if d["split"] is None:
            del d["split"]
        return json.dumps(d, ensure_ascii=False, sort_keys=True)


class LoadedCorpus(list):
    """List of records plus a counter of dropped lines by reason."""

    def __init__(self, records: Iterable[CorpusRecord] = (), dropped: Counter | None = None):
        super().__init__(records)
        self.dropped = dropped if dropped is not None else Counter()

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())


def _invalid_reason(rec: CorpusRecord) -> str | None:
    if rec.label not in (0, 1):
        return "bad_label"
    if not rec.image_path:
        return "no_image"
    if not rec.text and not rec.ocr_text:
        return "empty_text"
    if rec.split is not None and rec.split not in SPLIT_TAGS:
        return "bad_split"
    return None


def load_corpus(
    path: str | Path,
    preprocess: bool = True,
    keep: Callable[[CorpusRecord], bool] | None = None,
) -> LoadedCorpus:
    """Read a JSON Lines corpus.

    Malformed JSON and missing required fields raise :class:`CorpusError`
    with the 1-based line number. Records that parse but violate the
    record invariants (label outside {0, 1}, no image, no text left after
    preprocessing) are dropped and counted in ``result.dropped``. ``keep``
    is an optional extra filter, e.g. for language or video screening.
    """
    records: list[CorpusRecord] = []
    dropped: Counter = Counter()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")
            for name in REQUIRED_FIELDS:
                if name not in raw:
                    raise CorpusError(f"line {lineno}: missing required field {name!r}")
            text = str(raw["text"])
            ocr = str(raw.get("ocr_text") or "")
            if preprocess:
                text, ocr = preprocess_text(text), preprocess_text(ocr)
            label = raw["label"]
            rec = CorpusRecord(
                id=str(raw["id"]),
                text=text,
                image_path=str(raw["image_path"] or ""),
                label=label if isinstance(label, int) and not isinstance(label, bool) else -1,
                ocr_text=ocr,
                split=raw.get("split"),
            )
            reason = _invalid_reason(rec)
            if reason is None and keep is not None and not keep(rec):
                reason = "filtered"
            if reason is not None:
                dropped[reason] += 1
                continue
            records.append(rec)
    if dropped:
        log.warning("dropped %d record(s) from %s: %s", sum(dropped.values()), path, dict(dropped))
    return LoadedCorpus(records, dropped)


def save_corpus(records: Iterable[CorpusRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(rec.to_json() + "\n" for rec in records)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[NewsItem]
    val: list[NewsItem]
    test: list[NewsItem]
    features: dict[str, Features] = field(default_factory=dict)

    @property
    def stats(self) -> dict[str, dict[str, int]]:
        out = {}
        for name in ("train", "val", "test"):
            counts = Counter(i.label for i in getattr(self, name))
            out[name] = {"real": counts.get(0, 0), "fake": counts.get(1, 0)}
        return out

    def batch(self, items: Sequence[NewsItem]) -> Batch:
        feats = [self.features[i.id] for i in items]
        return Batch(
            t_b=np.stack([f.t_b for f in feats]),
            v_s=np.stack([f.v_s for f in feats]),
            t_c=np.stack([f.t_c for f in feats]),
            v_c=np.stack([f.v_c for f in feats]),
            labels=np.array([i.label for i in items]),
        )


def _stratified_take(items: list, fraction: float, rng: np.random.Generator) -> tuple[list, list]:
    """Split ``items`` into (taken, rest), taking round(fraction * n) per label."""
    taken, rest = [], []
    for label in (0, 1):
        group = [x for x in items if x.label == label]
        order = rng.permutation(len(group))
        k = round(fraction * len(group))
        taken += [group[i] for i in order[:k]]
        rest += [group[i] for i in order[k:]]
    # keep input order within each side for readability
    pos = {id(x): n for n, x in enumerate(items)}
    return sorted(taken, key=lambda x: pos[id(x)]), sorted(rest, key=lambda x: pos[id(x)])


def make_splits(
    records: Sequence[CorpusRecord],
    val_fraction: float,
    seed: int,
    test_fraction: float | None = None,
) -> DatasetSplit:
    """Stratified, seeded train/val/test split.

    Records tagged ``split: test`` form the test set; otherwise
    ``test_fraction`` carves one out of the untagged records. The validation
    set is drawn from what remains for training.
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError("val_fraction must lie in [0, 1)")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted(k for k, v in Counter(ids).items() if v > 1)
        raise ValueError(f"duplicate record ids: {dupes[:5]}")
    rng = np.random.default_rng(seed)
    tagged_test = [r for r in records if r.split == "test"]
    pool = [r for r in records if r.split != "test"]
    if tagged_test:
        test = tagged_test
    elif test_fraction is not None:
        test, pool = _stratified_take(pool, test_fraction, rng)
    else:
        raise ValueError("records carry no test tags and no test_fraction was given")
    val, train = _stratified_take(pool, val_fraction, rng)
    split = DatasetSplit(
        [r.to_item() for r in train], [r.to_item() for r in val], [r.to_item() for r in test]
    )
    for name, counts in split.stats.items():
        n = counts["real"] + counts["fake"]
        if n and (counts["real"] == 0 or counts["fake"] == 0):
            log.warning("%s split has only one class (%s)", name, counts)
    return split


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    n_items: int = 200
    cosine_real: float = 1.0
    cosine_fake: float = 0.0
    text_vocab: int = 50
    seed: int = 0
    noise: float = 0.0

    def __post_init__(self):
        for name in ("cosine_real", "cosine_fake"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [-1, 1], got {v}")
        if self.n_items < 2:
            raise ValueError("n_items must be at least 2 so both labels appear")
        if self.text_vocab < 1 or self.noise < 0:
            raise ValueError("text_vocab must be positive and noise nonnegative")


def generate_synthetic(spec: SyntheticSpec, dims) -> tuple[list[CorpusRecord], dict[str, Features]]:
    """Items whose only label signal is the cosine of their aligned pair.

    Labels alternate real/fake. Token features come from the stub text
    encoder over random words; patch features are seeded Gaussian noise;
    the aligned text vector is a random unit vector and the image vector is
    built at the per-class target cosine, then perturbed by isotropic noise
    of expected norm ``spec.noise``.
    """
    rng = np.random.default_rng([11, spec.seed])
    text_enc = StubTextEncoder(dims.n_w, dims.d_b, spec.seed)
    records, features = [], {}
    for i in range(spec.n_items):
        label = i % 2
        item_id = f"syn-{i:05d}"
        n_words = int(rng.integers(3, max(4, dims.n_w) + 1))
        text = " ".join(f"w{int(k)}" for k in rng.integers(0, spec.text_vocab, size=n_words))
        rec = CorpusRecord(item_id, text, f"synthetic/{item_id}.png", label)
        t_c = rng.standard_normal(dims.d_c)
        t_c /= np.linalg.norm(t_c)
        rho = spec.cosine_fake if label else spec.cosine_real
        v_c = paired_vector(t_c, rho, rng)
        if spec.noise:
            v_c = v_c + spec.noise * rng.standard_normal(dims.d_c) / np.sqrt(dims.d_c)
        features[item_id] = Features(
            t_b=text_enc.encode(text),
            v_s=rng.standard_normal((dims.n_p, dims.d_s)),
            t_c=t_c,
            v_c=v_c,
        )
        records.append(rec)
    return records, features


# ---------------------------------------------------------------------------
# feature cache sidecar
# ---------------------------------------------------------------------------


def save_feature_cache(path: str | Path, ids: Sequence[str], features: dict[str, Features]) -> None:
    """Write t_b, v_s and the (2, d_c) aligned pair per item, in ``ids`` order."""
    with open(path, "wb") as fh:
        for item_id in ids:
            f = features[item_id]
            write_array(fh, f.t_b)
            write_array(fh, f.v_s)
            write_array(fh, np.stack([f.t_c, f.v_c]))


def load_feature_cache(path: str | Path, ids: Sequence[str]) -> dict[str, Features]:
    out = {}
    with open(path, "rb") as fh:
        for item_id in ids:
            t_b, v_s, pair = read_array(fh), read_array(fh), read_array(fh)
            out[item_id] = Features(t_b, v_s, pair[0], pair[1])
        if fh.read(1):
            raise ValueError(f"{path} holds more entries than the {len(ids)} ids given")
    return out
