"""Command-line entry point: train, eval, ablate, visualize.

Run settings come from a YAML (or JSON) file::

    variant: full
    seed: 0
    output_dir: runs/full          # relative paths resolve under $MMFN_OUTPUT_ROOT
    dims: desk                     # "full", "desk", or a mapping of overrides
    encoder_mode: stub
    dataset:
      synthetic: {n_items: 200, cosine_real: 1.0, cosine_fake: 0.0, noise: 0.1}
      test_fraction: 0.2
    train: {max_epochs: 30}

A corpus dataset replaces ``synthetic`` with ``path: corpus.jsonl`` (plus
optional ``image_root``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import (
    DatasetSplit,
    SyntheticSpec,
    generate_synthetic,
    load_corpus,
    make_splits,
)
from .encoders import EncoderSuite, ExternalEncoder
from .metrics import format_table
from .model import VARIANT_NAMES, Dims, check_variant, make_variant
from .training import (
    TrainConfig,
    config_echo,
    evaluate,
    history_dict,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    train,
)
from .tsne import MAX_POINTS, tsne

log = logging.getLogger("mmfn")

OUTPUT_ROOT_ENV = "MMFN_OUTPUT_ROOT"
REPRESENTATIONS = ("text", "visual", "multimodal", "completed")
CHECKPOINT_NAME = "model.ckpt"


@dataclass
class RunConfig:
    dataset: dict
    variant: str = "full"
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder_mode: str = "stub"
    output_dir: Path = Path("runs")
    dims: Dims = field(default_factory=Dims.desk)
    seed: int = 0
    remap_similarity: bool = False
    encoders: dict = field(default_factory=dict)

    def __post_init__(self):
        check_variant(self.variant)
        if self.encoder_mode not in ("stub", "external"):
            raise ValueError("encoder_mode must be 'stub' or 'external'")
        if "synthetic" not in self.dataset and "path" not in self.dataset:
            raise ValueError("dataset needs either a 'synthetic' spec or a corpus 'path'")

    def echo(self) -> dict:
        return config_echo(
            variant=self.variant,
            seed=self.seed,
            dims=self.dims,
            train=self.train,
            dataset=self.dataset,
            encoder_mode=self.encoder_mode,
            encoders=self.encoders,
            remap_similarity=self.remap_similarity,
        )


def resolve_output(path: str | Path) -> Path:
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def run_config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    raw = dict(raw)
    dataset = dict(raw.pop("dataset"))
    for key in ("path", "image_root"):
        if key in dataset and base_dir is not None and not Path(dataset[key]).is_absolute():
            dataset[key] = str((base_dir / dataset[key]).resolve())
    train_raw = dict(raw.pop("train", {}) or {})
    seed = int(raw.pop("seed", train_raw.get("seed", 0)))
    train_raw.setdefault("seed", seed)
    variant = raw.pop("variant", "full")
    cfg = RunConfig(
        dataset=dataset,
        variant=variant,
        train=TrainConfig.from_dict(train_raw),
        encoder_mode=raw.pop("encoder_mode", "stub"),
        output_dir=resolve_output(raw.pop("output_dir", f"runs/{variant}")),
        dims=Dims.from_dict(raw.pop("dims", "desk")),
        seed=seed,
        remap_similarity=bool(raw.pop("remap_similarity", False)),
        encoders=dict(raw.pop("encoders", {}) or {}),
    )
    if raw:
        raise ValueError(f"unknown config keys: {sorted(raw)}")
    return cfg


def load_run_config(path: str | Path) -> RunConfig:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")  # noqa: TRY004
    return run_config_from_dict(raw, path.parent)


def _encoder_suite(echo: dict) -> EncoderSuite:
    dims = Dims(**echo["dims"]) if isinstance(echo["dims"], dict) else echo["dims"]
    enc = echo.get("encoders", {}) or {}
    image_root = echo["dataset"].get("image_root")
    if echo.get("encoder_mode", "stub") == "external":
        return EncoderSuite(
            ExternalEncoder(enc["text_command"]),
            ExternalEncoder(enc["image_command"]),
            ExternalEncoder(enc["aligned_command"]),
            "external",
            Path(image_root) if image_root else None,
        )
    grid = math.isqrt(dims.n_p)
    if grid * grid != dims.n_p:
        raise ValueError(f"stub image encoder needs a square patch count, got n_p={dims.n_p}")
    return EncoderSuite.stub(
        dims.n_w, dims.d_b, dims.d_s, dims.d_c, enc.get("seed", 0), grid, image_root
    )


def build_dataset(echo: dict) -> DatasetSplit:
    """Recreate the run's splits and features from its config echo."""
    ds = echo["dataset"]
    dims = Dims(**echo["dims"])
    seed = echo["seed"]
    val_fraction = echo["train"]["val_fraction"]
    if "synthetic" in ds:
        spec = SyntheticSpec(**ds["synthetic"])
        records, features = generate_synthetic(spec, dims)
        split = make_splits(records, val_fraction, seed, ds.get("test_fraction", 0.2))
        split.features = features
        return split
    records = load_corpus(ds["path"], preprocess=ds.get("preprocess", True))
    split = make_splits(records, val_fraction, seed, ds.get("test_fraction"))
    items = split.train + split.val + split.test
    suite = _encoder_suite(echo)
    split.features = {i.id: f for i, f in zip(items, suite.encode_batch(items))}
    return split


def ensure_writable(directory: Path) -> Path:
    try:
        directory.mkdir(parents=True, exist_ok=True)
        with tempfile.NamedTemporaryFile(dir=directory):
            pass
    except OSError as exc:
        raise OSError(f"output directory {directory} is not writable: {exc}") from exc
    return directory


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(cfg: RunConfig) -> dict:
    out = ensure_writable(cfg.output_dir)
    echo = cfg.echo()
    data = build_dataset(echo)
    _, model = make_variant(cfg.variant, cfg.dims, cfg.seed, remap_similarity=cfg.remap_similarity)
    result = train(model, data, cfg.train)
    report = evaluate(model, data, threshold=cfg.train.threshold)
    save_checkpoint(out / CHECKPOINT_NAME, model, echo, result.optimizer, result.best_epoch, result.rng)
    _write_json(out / "metrics.json", {"variant": cfg.variant, "split": data.stats, **report.to_dict()})
    (out / "metrics.txt").write_text(format_table({cfg.variant: report}), encoding="utf-8")
    _write_json(out / "history.json", history_dict(result))
    return {"checkpoint": out / CHECKPOINT_NAME, "report": report}


def cmd_eval(checkpoint: Path, data_path: Path | None = None, out: Path | None = None):
    ckpt = load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    if data_path is None:
        data = build_dataset(ckpt.config)
        items = data.test
    else:
        records = load_corpus(data_path, preprocess=ckpt.config["dataset"].get("preprocess", True))
        tagged = [r for r in records if r.split == "test"]
        items = [r.to_item() for r in (tagged or records)]
        data = DatasetSplit([], [], items)
        data.features = {i.id: f for i, f in zip(items, _encoder_suite(ckpt.config).encode_batch(items))}
    report = evaluate(model, data, items, threshold=ckpt.config["train"].get("threshold", 0.5))
    if out is not None:
        _write_json(Path(out), report.to_dict())
    return report


def cmd_ablate(cfg: RunConfig) -> dict:
    out = ensure_writable(cfg.output_dir)
    data = build_dataset(cfg.echo())
    reports, errors = {}, {}
    for name in VARIANT_NAMES:
        try:
            _, model = make_variant(name, cfg.dims, cfg.seed, remap_similarity=cfg.remap_similarity)
            train(model, data, cfg.train)
            reports[name] = evaluate(model, data, threshold=cfg.train.threshold)
        except Exception as exc:  # noqa: BLE001 - one broken variant must not sink the table
            log.error("variant %s failed: %s", name, exc)
            reports[name] = None
            errors[name] = f"{type(exc).__name__}: {exc}"
    table = {k: (r.row() if r is not None else None) for k, r in reports.items()}
    _write_json(out / "ablation.json", {"rows": table, "errors": errors})
    (out / "ablation.txt").write_text(format_table(reports), encoding="utf-8")
    return reports


def collect_representation(model, data: DatasetSplit, items, which: str) -> np.ndarray:
    if which not in REPRESENTATIONS:
        raise ValueError(f"unknown representation {which!r}; choose from {', '.join(REPRESENTATIONS)}")
    model.eval()
    chunks = []
    for i in range(0, len(items), 64):
        _, cache = model.forward(data.batch(items[i : i + 64]))
        b = cache["bundle"]
        vec = {"text": b.f_t, "visual": b.f_v, "multimodal": b.f_m}.get(which) if which != "completed" else b.concat()
        if vec is None:
            raise ValueError(f"variant {model.wiring} has no {which} representation")
        chunks.append(vec)
    return np.concatenate(chunks)


def cmd_visualize(checkpoint: Path, which: str, out: Path, seed: int = 0, perplexity: float = 30.0, n_iter: int = 1000):
    if which not in REPRESENTATIONS:
        raise ValueError(f"unknown representation {which!r}; choose from {', '.join(REPRESENTATIONS)}")
    ckpt = load_checkpoint(checkpoint)
    model = model_from_checkpoint(ckpt)
    data = build_dataset(ckpt.config)
    items = data.test
    if len(items) > MAX_POINTS:
        raise ValueError(
            f"test set has {len(items)} items; exact t-SNE is capped at {MAX_POINTS}, subsample first"
        )
    vectors = collect_representation(model, data, items, which)
    coords = tsne(vectors, perplexity=perplexity, n_iter=n_iter, seed=seed)
    labels = np.array([i.label for i in items])

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dump = out.with_suffix(".jsonl")
    with open(dump, "w", encoding="utf-8") as fh:
        for item, vec, xy in zip(items, vectors, coords):
            row = {"id": item.id, "label": item.label, "vector": vec.tolist(), "xy": xy.tolist()}
            fh.write(json.dumps(row) + "\n")
    _scatter(coords, labels, out, f"{which} representations")
    return {"plot": out, "dump": dump, "coords": coords, "labels": labels, "vectors": vectors}


def _scatter(coords: np.ndarray, labels: np.ndarray, path: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    for label, colour, name in ((0, "tab:blue", "real"), (1, "tab:red", "fake")):
        sel = labels == label
        ax.scatter(coords[sel, 0], coords[sel, 1], s=8, c=colour, label=name)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(title)
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)


def separation_ratio(coords: np.ndarray, labels: np.ndarray) -> float:
    """Mean inter-class distance over mean intra-class distance (> 1 means separated)."""
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(d[~same].mean() / d[same & off].mean())


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one variant and write checkpoint + metrics")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--variant", help="override the config's variant")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", type=Path, help="JSONL corpus; defaults to the run's own test split")
    p.add_argument("--out", type=Path, help="also write the report as JSON")

    p = sub.add_parser("ablate", help="train all variants and tabulate")
    p.add_argument("--config", required=True, type=Path)

    p = sub.add_parser("visualize", help="t-SNE scatter of learned representations")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--which", required=True, help=f"one of {', '.join(REPRESENTATIONS)}")
    p.add_argument("--out", required=True, type=Path, help="plot file (.png, .svg or .pdf)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perplexity", type=float, default=30.0)
    p.add_argument("--iterations", type=int, default=1000)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "train":
            cfg = load_run_config(args.config)
            if args.variant:
                cfg = RunConfig(**{**cfg.__dict__, "variant": args.variant})
            res = cmd_train(cfg)
            print(format_table({cfg.variant: res["report"]}), end="")
            print(f"checkpoint: {res['checkpoint']}")
        elif args.command == "eval":
            print(format_table({"eval": cmd_eval(args.checkpoint, args.data, args.out)}), end="")
        elif args.command == "ablate":
            cfg = load_run_config(args.config)
            print(format_table(cmd_ablate(cfg), title="Ablation"), end="")
        elif args.command == "visualize":
            res = cmd_visualize(args.checkpoint, args.which, args.out, args.seed, args.perplexity, args.iterations)
            print(f"plot: {res['plot']}\ndump: {res['dump']}")
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
