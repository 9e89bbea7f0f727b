"""Feature encoders: text preprocessing, deterministic stubs, and the external adapter.

The stub encoders stand in for the pretrained token, patch and aligned
(contrastive) encoders. They are pure functions of ``(input, seed)`` and
produce correctly shaped features, which is all the fusion network needs.

Real encoders run out of process. The host writes items as JSON Lines on the
child's stdin and reads one array per item back from stdout, each framed as::

    int32 rows, int32 cols   (little-endian)
    rows * cols float32      (little-endian, row-major)
"""

from __future__ import annotations

import hashlib
import io
import json
import subprocess
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import BinaryIO

import numpy as np

ImageRef = str | Path | bytes

DROP_PREFIXES = ("@", "#", "http:")
HASH_BUCKETS = 1 << 20


@dataclass
class NewsItem:
    id: str
    text: str
    ocr_text: str = ""
    image_ref: ImageRef = ""
    label: int = 0

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 (real) or 1 (fake), got {self.label!r}")

    @property
    def content(self) -> str:
        """Post text followed by OCR text."""
        return " ".join(p for p in (self.text.strip(), self.ocr_text.strip()) if p)


@dataclass
class Features:
    """Encoder outputs for one item."""

    t_b: np.ndarray  # (n_w, d_b) token features
    v_s: np.ndarray  # (n_p, d_s) patch features
    t_c: np.ndarray  # (d_c,) aligned text vector
    v_c: np.ndarray  # (d_c,) aligned image vector


# ---------------------------------------------------------------------------
# text preparation
# ---------------------------------------------------------------------------


def preprocess_text(raw: str) -> str:
    """Drop tokens starting with '@', '#' or 'http:' and normalise whitespace."""
    return " ".join(tok for tok in raw.split() if not tok.startswith(DROP_PREFIXES))


def head_truncate(text: str, max_words: int) -> str:
    return " ".join(text.split()[:max_words])


def clip_text_prepare(
    text: str,
    max_words: int = 50,
    summarizer: Callable[[str, int], str] | None = None,
    translator: Callable[[str], str] | None = None,
) -> str:
    """Fit text to the aligned encoder's input budget.

    ``translator`` defaults to identity. Texts longer than ``max_words`` go
    through ``summarizer`` (default: keep the first ``max_words`` words).
    """
    if translator is not None:
        text = translator(text)
    if len(text.split()) <= max_words:
        return text
    return (summarizer or head_truncate)(text, max_words)


# ---------------------------------------------------------------------------
# stub encoders
# ---------------------------------------------------------------------------


def token_index(token: str) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % HASH_BUCKETS


def _bytes_key(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


@lru_cache(maxsize=1 << 16)
def _table_row(stream: int, seed: int, index: int, dim: int) -> np.ndarray:
    # one row of a fixed virtual table; generated on demand so the table
    # never has to be materialised
    row = np.random.default_rng([stream, seed, index]).standard_normal(dim)
    row.setflags(write=False)
    return row


class StubTextEncoder:
    """Hashed token lookup into a seeded random embedding table."""

    stream = 1

    def __init__(self, n_w: int = 300, d_b: int = 768, seed: int = 0):
        self.n_w, self.d_b, self.seed = n_w, d_b, seed

    def encode(self, text: str) -> np.ndarray:
        out = np.zeros((self.n_w, self.d_b))
        for row, tok in enumerate(text.split()[: self.n_w]):
            out[row] = _table_row(self.stream, self.seed, token_index(tok), self.d_b)
        return out


def load_image_bytes(image_ref: ImageRef) -> bytes:
    if isinstance(image_ref, (bytes, bytearray)):
        return bytes(image_ref)
    try:
        return Path(image_ref).read_bytes()
    except OSError as exc:
        raise ValueError(f"bad image: cannot read {image_ref}") from exc


class StubImageEncoder:
    """Per-patch colour statistics on a grid, projected by a seeded random map.

    The image is resized to ``grid * 32`` pixels square and cut into
    ``grid x grid`` patches (49 for the default 7x7 grid). Each patch is
    summarised by the mean and standard deviation of each RGB channel.
    """

    n_stats = 6

    def __init__(self, d_s: int = 1024, seed: int = 0, grid: int = 7):
        self.d_s, self.seed, self.grid = d_s, seed, grid
        self.projection = np.random.default_rng([2, seed]).standard_normal((self.n_stats, d_s))

    @property
    def n_p(self) -> int:
        return self.grid * self.grid

    def patch_stats(self, image_ref: ImageRef) -> np.ndarray:
        from PIL import Image, UnidentifiedImageError

        data = load_image_bytes(image_ref)
        side = self.grid * 32
        try:
            with Image.open(io.BytesIO(data)) as img:
                pixels = np.asarray(img.convert("RGB").resize((side, side)), dtype=np.float64) / 255.0
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise ValueError("bad image") from exc
        patches = pixels.reshape(self.grid, 32, self.grid, 32, 3).transpose(0, 2, 1, 3, 4)
        patches = patches.reshape(self.n_p, 32 * 32, 3)
        return np.concatenate([patches.mean(axis=1), patches.std(axis=1)], axis=1)

    def encode(self, image_ref: ImageRef) -> np.ndarray:
        return self.patch_stats(image_ref) @ self.projection


def paired_vector(t_c: np.ndarray, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Unit vector whose cosine with ``t_c`` is exactly ``rho``."""
    if not -1.0 <= rho <= 1.0:
        raise ValueError(f"target cosine must lie in [-1, 1], got {rho}")
    t_hat = t_c / np.linalg.norm(t_c)
    n = rng.standard_normal(t_c.shape[0])
    n -= (n @ t_hat) * t_hat
    n /= np.linalg.norm(n)
    return rho * t_hat + np.sqrt(max(0.0, 1.0 - rho * rho)) * n


class StubAlignedEncoder:
    """Frozen stand-in for a jointly trained text/image encoder pair.

    ``t_c`` is the normalised sum of hashed token vectors of the prepared
    text; ``v_c`` is a seeded vector keyed by the image bytes, unless a
    target cosine ``rho`` is given, in which case ``v_c`` is built to have
    exactly that cosine with ``t_c``.
    """

    text_stream, image_stream, pair_stream = 3, 4, 5

    def __init__(self, d_c: int = 512, seed: int = 0, max_words: int = 50, summarizer=None, translator=None):
        self.d_c, self.seed = d_c, seed
        self.max_words = max_words
        self.summarizer, self.translator = summarizer, translator

    def encode_text(self, text: str) -> np.ndarray:
        tokens = clip_text_prepare(text, self.max_words, self.summarizer, self.translator).split()
        if not tokens:
            return _table_row(self.text_stream, self.seed, HASH_BUCKETS, self.d_c).copy()
        v = sum(_table_row(self.text_stream, self.seed, token_index(t), self.d_c) for t in tokens)
        return v / np.linalg.norm(v)

    def encode_image(self, image_ref: ImageRef) -> np.ndarray:
        key = _bytes_key(load_image_bytes(image_ref))
        v = np.random.default_rng([self.image_stream, self.seed, key]).standard_normal(self.d_c)
        return v / np.linalg.norm(v)

    def encode(self, item: NewsItem, rho: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        if rho is not None and not -1.0 <= rho <= 1.0:
            raise ValueError(f"target cosine must lie in [-1, 1], got {rho}")
        t_c = self.encode_text(item.content)
        if rho is None:
            return t_c, self.encode_image(item.image_ref)
        key = _bytes_key(item.id.encode("utf-8"))
        return t_c, paired_vector(t_c, rho, np.random.default_rng([self.pair_stream, self.seed, key]))


def encode_text_stub(text: str, seed: int, n_w: int = 300, d_b: int = 768) -> np.ndarray:
    return StubTextEncoder(n_w, d_b, seed).encode(text)


def encode_image_stub(image_ref: ImageRef, seed: int, d_s: int = 1024, grid: int = 7) -> np.ndarray:
    return StubImageEncoder(d_s, seed, grid).encode(image_ref)


def encode_aligned_stub(item: NewsItem, seed: int, rho: float | None = None, d_c: int = 512):
    return StubAlignedEncoder(d_c, seed).encode(item, rho)


# ---------------------------------------------------------------------------
# binary array framing and the out-of-process adapter
# ---------------------------------------------------------------------------

_HEADER = np.dtype("<i4")
_PAYLOAD = np.dtype("<f4")


def write_array(stream: BinaryIO, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"only 1-D or 2-D arrays can be framed, got shape {a.shape}")
    stream.write(np.array(a.shape, dtype=_HEADER).tobytes())
    stream.write(np.ascontiguousarray(a, dtype=_PAYLOAD).tobytes())


def _read_exact(stream: BinaryIO, n: int) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise EOFError(f"expected {n} bytes, got {len(buf)}")
    return buf


def read_array(stream: BinaryIO) -> np.ndarray:
    rows, cols = np.frombuffer(_read_exact(stream, 8), dtype=_HEADER)
    if rows < 0 or cols < 0:
        raise ValueError(f"corrupt array header ({rows}, {cols})")
    data = _read_exact(stream, int(rows) * int(cols) * _PAYLOAD.itemsize)
    return np.frombuffer(data, dtype=_PAYLOAD).reshape(int(rows), int(cols)).astype(np.float64)


def item_to_json(item: NewsItem) -> str:
    d = asdict(item)
    if isinstance(item.image_ref, (bytes, bytearray)):
        d["image_ref"] = None
        d["image_hex"] = bytes(item.image_ref).hex()
    else:
        d["image_ref"] = str(item.image_ref)
    return json.dumps(d, ensure_ascii=False, sort_keys=True)


def write_items_jsonl(items: Iterable[NewsItem], stream: BinaryIO) -> None:
    stream.writelines(item_to_json(item).encode("utf-8") + b"\n" for item in items)


class ExternalEncoder:
    """Runs ``command`` once per batch; one framed array per item comes back."""

    def __init__(self, command: Sequence[str], timeout: float | None = None):
        self.command = list(command)
        self.timeout = timeout

    def encode_batch(self, items: Sequence[NewsItem]) -> list[np.ndarray]:
        payload = io.BytesIO()
        write_items_jsonl(items, payload)
        proc = subprocess.run(
            self.command, input=payload.getvalue(), capture_output=True, timeout=self.timeout, check=False
        )
        if proc.returncode != 0:
            raise RuntimeError(
                f"external encoder {self.command[0]!r} exited with {proc.returncode}: "
                f"{proc.stderr.decode(errors='replace').strip()}"
            )
        out = io.BytesIO(proc.stdout)
        arrays = [read_array(out) for _ in items]
        if out.read(1):
            raise ValueError("external encoder returned more arrays than items")
        return arrays


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------


@dataclass
class EncoderSuite:
    """Text, image and aligned encoders used together.

    In ``external`` mode each encoder is an :class:`ExternalEncoder`; the
    aligned one returns a (2, d_c) array per item (text row, image row).
    """

    text_encoder: object
    image_encoder: object
    aligned_encoder: object
    mode: str = "stub"
    image_root: Path | None = None

    @classmethod
    def stub(cls, n_w=300, d_b=768, d_s=1024, d_c=512, seed=0, grid=7, image_root=None) -> EncoderSuite:
        return cls(
            StubTextEncoder(n_w, d_b, seed),
            StubImageEncoder(d_s, seed, grid),
            StubAlignedEncoder(d_c, seed),
            "stub",
            Path(image_root) if image_root else None,
        )

    def _resolve(self, item: NewsItem) -> NewsItem:
        ref = item.image_ref
        if self.image_root is not None and isinstance(ref, (str, Path)) and not Path(ref).is_absolute():
            item = NewsItem(item.id, item.text, item.ocr_text, self.image_root / ref, item.label)
        return item

    def encode(self, item: NewsItem) -> Features:
        return self.encode_batch([item])[0]

    def encode_batch(self, items: Sequence[NewsItem]) -> list[Features]:
        items = [self._resolve(i) for i in items]
        if self.mode == "external":
            t_bs = self.text_encoder.encode_batch(items)
            v_ss = self.image_encoder.encode_batch(items)
            pairs = self.aligned_encoder.encode_batch(items)
            return [Features(t, v, p[0], p[1]) for t, v, p in zip(t_bs, v_ss, pairs)]
        out = []
        for item in items:
            t_c, v_c = self.aligned_encoder.encode(item)
            out.append(
                Features(
                    self.text_encoder.encode(item.content),
                    self.image_encoder.encode(item.image_ref),
                    t_c,
                    v_c,
                )
            )
        return out
