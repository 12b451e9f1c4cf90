"""Synthetic pixel-classification tasks, the toy per-pixel encoder, and dataset I/O.

Two task families are provided. The *separable* task draws well-separated
Gaussian clusters and is solvable by any per-pixel classifier. The *context*
task plants a per-image binary context whose value is encoded only in a cue
strip: a configurable fraction of the codebook is "ambiguous", meaning the
same local feature maps to different classes depending on the context. Any
classifier restricted to single-pixel features is therefore capped at an
exactly enumerable accuracy (`static_ceiling`), while a head that can move
information across pixels can exceed it.

Dataset files use a little-endian binary container (magic ``OSG1``) plus a
JSON manifest sidecar carrying the full config, split indices and, for
context tasks, the (codeword, context, label) joint table and the ceiling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .diff import MLPCache, MLPParams, mlp_forward
from .linalg import NARROW
from .seeding import substream

IGNORE_LABEL = 65535
DATASET_MAGIC = b"OSG1"
DATASET_VERSION = 1

_NO_TAG = 255  # context-tag byte for tasks without contexts

_SEPARATION_SIGMAS = 6.0  # minimum pairwise center distance, in units of sigma
_MAX_CENTER_RETRIES = 100


class TaskConfigError(ValueError):
    """Invalid synthetic-task configuration."""


@dataclass(frozen=True)
class SeparableTaskConfig:
    """Gaussian-cluster task: label is the cluster id, trivially per-pixel."""

    k: int = 6
    c0: int = 16
    sigma: float = 0.05
    height: int = 16
    width: int = 16
    n_samples: int = 100

    def __post_init__(self) -> None:
        if self.k < 2:
            raise TaskConfigError(f"need at least 2 classes, got k={self.k}")
        if min(self.c0, self.height, self.width, self.n_samples) < 1:
            raise TaskConfigError("c0, height, width, n_samples must be positive")
        if self.sigma < 0:
            raise TaskConfigError(f"sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class ContextTaskConfig:
    """Codebook task with a per-image context bit encoded in a cue strip.

    `p_amb * v` codewords are ambiguous: their label is a function of the
    image's context. The two context-only classes (when the geometry allows,
    the two highest class ids) receive label mass exclusively from ambiguous
    codewords, which makes their ideal prototypes maximally context-dependent.
    """

    k: int = 6
    v: int = 12
    c0: int = 16
    p_amb: float = 0.5
    sigma: float = 0.05
    cue_width: int = 1
    height: int = 16
    width: int = 16
    n_samples: int = 100
    context_priors: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self) -> None:
        if self.k < 2:
            raise TaskConfigError(f"need at least 2 classes, got k={self.k}")
        if self.v < self.k:
            raise TaskConfigError(f"codebook size v={self.v} must be >= k={self.k}")
        if not 0.0 <= self.p_amb <= 1.0:
            raise TaskConfigError(f"p_amb must lie in [0, 1], got {self.p_amb}")
        n_amb = self.p_amb * self.v
        if abs(n_amb - round(n_amb)) > 1e-9:
            raise TaskConfigError(
                f"p_amb * v = {n_amb} is not an integer (p_amb={self.p_amb}, v={self.v})"
            )
        if self.sigma < 0:
            raise TaskConfigError(f"sigma must be >= 0, got {self.sigma}")
        if not 1 <= self.cue_width < self.width:
            raise TaskConfigError(
                f"cue strip of width {self.cue_width} does not fit inside "
                f"image width {self.width} with non-cue pixels remaining"
            )
        if min(self.c0, self.height, self.n_samples) < 1:
            raise TaskConfigError("c0, height, n_samples must be positive")
        p0, p1 = self.context_priors
        if p0 <= 0 or p1 <= 0 or abs(p0 + p1 - 1.0) > 1e-9:
            raise TaskConfigError(
                f"context_priors must be positive and sum to 1, got {self.context_priors}"
            )

    @property
    def n_ambiguous(self) -> int:
        return int(round(self.p_amb * self.v))


@dataclass
class SegSample:
    """One image: per-pixel raw features plus an integer label mask."""

    height: int
    width: int
    features: np.ndarray  # [H*W, C0] float32, row-major over pixels
    labels: np.ndarray  # [H*W] int64, values in [0, K) or IGNORE_LABEL
    context_tag: int | None = None

    def __post_init__(self) -> None:
        hw = self.height * self.width
        if self.features.shape[0] != hw:
            raise ValueError(f"features rows {self.features.shape[0]} != H*W {hw}")
        if self.labels.shape != (hw,):
            raise ValueError(f"labels shape {self.labels.shape} != ({hw},)")


@dataclass
class Dataset:
    """Generated samples plus everything needed to reproduce and split them."""

    task: str  # "separable" | "context"
    config: SeparableTaskConfig | ContextTaskConfig
    seed: int
    samples: list[SegSample]
    train_indices: list[int]
    val_indices: list[int]
    # context-task extras (None for separable)
    label_table: np.ndarray | None = None  # [V, 2] label per (codeword, context)
    static_ceiling: float | None = None  # exact sigma=0 enumeration
    context_only_classes: list[int] = field(default_factory=list)

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def split(self, name: str) -> list[int]:
        if name == "train":
            return self.train_indices
        if name == "val":
            return self.val_indices
        if name == "all":
            return list(range(self.n_samples))
        raise ValueError(f"unknown split {name!r} (expected train/val/all)")

    def manifest_dict(self) -> dict:
        m = {
            "format_version": DATASET_VERSION,
            "task": self.task,
            "config": asdict(self.config),
            "seed": self.seed,
            "n_samples": self.n_samples,
            "split": {"train": self.train_indices, "val": self.val_indices},
        }
        if self.task == "context":
            m["joint_table"] = [
                {
                    "codeword": v,
                    "ambiguous": bool(self.label_table[v, 0] != self.label_table[v, 1]),
                    "label_z0": int(self.label_table[v, 0]),
                    "label_z1": int(self.label_table[v, 1]),
                }
                for v in range(self.label_table.shape[0])
            ]
            m["context_priors"] = list(self.config.context_priors)
            m["static_ceiling"] = self.static_ceiling
            m["context_only_classes"] = self.context_only_classes
        return m


def _split_80_20(n: int) -> tuple[list[int], list[int]]:
    n_train = (n * 8) // 10
    return list(range(n_train)), list(range(n_train, n))


def _separated_points(
    rng: np.random.Generator, count: int, dim: int, min_dist: float, what: str
) -> np.ndarray:
    """Draw `count` standard-normal points with pairwise distance >= min_dist."""
    for _ in range(_MAX_CENTER_RETRIES):
        pts = rng.normal(0.0, 1.0, (count, dim))
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= min_dist:
            return pts
    raise TaskConfigError(
        f"could not draw {count} {what} with pairwise separation {min_dist:g} "
        f"in {dim} dimensions"
    )


def gen_separable(config: SeparableTaskConfig, seed: int) -> Dataset:
    """K well-separated Gaussian clusters; label equals cluster id."""
    rng_centers = substream(seed, "data", "centers")
    centers = _separated_points(
        rng_centers, config.k, config.c0, _SEPARATION_SIGMAS * config.sigma, "centers"
    )
    hw = config.height * config.width
    rng = substream(seed, "data", "samples")
    samples = []
    for _ in range(config.n_samples):
        labels = rng.integers(0, config.k, size=hw)
        feats = centers[labels]
        if config.sigma > 0:
            feats = feats + rng.normal(0.0, config.sigma, (hw, config.c0))
        samples.append(
            SegSample(
                height=config.height,
                width=config.width,
                features=feats.astype(NARROW),
                labels=labels.astype(np.int64),
                context_tag=None,
            )
        )
    train_idx, val_idx = _split_80_20(config.n_samples)
    return Dataset(
        task="separable",
        config=config,
        seed=seed,
        samples=samples,
        train_indices=train_idx,
        val_indices=val_idx,
    )


def _context_label_table(k: int, v: int, n_amb: int) -> tuple[np.ndarray, list[int]]:
    """Label per (codeword, context); column 0 is context 0.

    Unambiguous codewords come first and map round-robin onto the base
    classes. When there are at least two ambiguous codewords and four
    classes, the two top class ids are reserved as context-only classes and
    every ambiguous codeword flips between them (alternating orientation, so
    both classes appear in both contexts). Context errors then concentrate
    in those two classes while the base classes stay a clean readout of
    per-pixel fitting quality. With fewer classes or a single ambiguous
    codeword, ambiguous codewords flip between adjacent base classes instead.
    """
    n_unamb = v - n_amb
    if n_amb > 0 and k < 2:
        raise TaskConfigError("ambiguous codewords need at least 2 classes")
    if n_amb >= 2 and k >= 4:
        context_only = [k - 2, k - 1]
        base = list(range(k - 2))
    else:
        context_only = []
        base = list(range(k))

    table = np.zeros((v, 2), dtype=np.int64)
    for i in range(n_unamb):
        table[i, :] = base[i % len(base)]
    for a in range(n_amb):
        row = n_unamb + a
        if context_only:
            pair = (context_only[0], context_only[1])
            table[row] = pair if a % 2 == 0 else pair[::-1]
        else:
            table[row] = (base[a % len(base)], base[(a + 1) % len(base)])
    return table, context_only


def static_ceiling_exact(
    label_table: np.ndarray, context_priors: tuple[float, float]
) -> float:
    """Bayes accuracy of any single-pixel classifier at sigma = 0.

    Codewords are equiprobable; for each one the best static guess takes the
    majority label mass over contexts.
    """
    priors = np.asarray(context_priors, dtype=np.float64)
    v = label_table.shape[0]
    total = 0.0
    for row in label_table:
        mass: dict[int, float] = {}
        for z in (0, 1):
            mass[row[z]] = mass.get(row[z], 0.0) + priors[z]
        total += max(mass.values())
    return total / v


@dataclass
class CeilingEstimate:
    value: float
    stderr: float
    exact: bool


def static_ceiling(
    config: ContextTaskConfig,
    codebook: np.ndarray | None = None,
    n_mc: int = 200_000,
    seed: int = 0,
) -> CeilingEstimate:
    """Best achievable single-pixel accuracy on non-cue pixels.

    With sigma = 0 this is the exact enumeration over the joint
    (codeword, context, label) table. With sigma > 0 a Monte-Carlo estimate
    of the Bayes-optimal accuracy is returned along with its standard error;
    `codebook` must then be supplied (the generated dataset's codebook).
    """
    table, _ = _context_label_table(config.k, config.v, config.n_ambiguous)
    exact = static_ceiling_exact(table, config.context_priors)
    if config.sigma == 0:
        return CeilingEstimate(value=exact, stderr=0.0, exact=True)
    if codebook is None:
        raise ValueError("sigma > 0 Monte-Carlo estimate needs the codebook")

    rng = substream(seed, "ceiling", "mc")
    priors = np.asarray(config.context_priors)
    # label mass per codeword: q[v, label] = sum_z prior_z * [g(v, z) = label]
    q = np.zeros((config.v, config.k))
    for v in range(config.v):
        for z in (0, 1):
            q[v, table[v, z]] += priors[z]
    centers = np.asarray(codebook, dtype=np.float64)

    hits = 0
    chunk = 4096
    done = 0
    while done < n_mc:
        m = min(chunk, n_mc - done)
        v_ids = rng.integers(0, config.v, size=m)
        z = (rng.random(m) < priors[1]).astype(np.int64)
        x = centers[v_ids] + rng.normal(0.0, config.sigma, (m, config.c0))
        # posterior over codewords: uniform prior, isotropic Gaussian likelihood
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        logp = -d2 / (2.0 * config.sigma**2)
        logp -= logp.max(axis=1, keepdims=True)
        post = np.exp(logp)
        post /= post.sum(axis=1, keepdims=True)
        pred = np.argmax(post @ q, axis=1)
        truth = table[v_ids, z]
        hits += int((pred == truth).sum())
        done += m
    acc = hits / n_mc
    stderr = float(np.sqrt(acc * (1.0 - acc) / n_mc))
    return CeilingEstimate(value=acc, stderr=stderr, exact=False)


_LINE_SPACING = 1.0  # raw-feature distance between adjacent unambiguous codewords


def _context_codebook(
    config: ContextTaskConfig, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Codebook plus cue pair, structured so each head branch has work to do.

    Unambiguous codewords sit evenly spaced on a random line. Combined with
    the round-robin class assignment this makes the class regions nonconvex
    in raw feature space, so a low-capacity per-pixel classifier underfits
    unless something downstream adds expressivity. Ambiguous and cue
    codewords are random well-separated Gaussian draws; resolving the
    ambiguous ones requires the cue context instead of extra capacity.
    """
    min_dist = _SEPARATION_SIGMAS * config.sigma
    if _LINE_SPACING < min_dist:
        raise TaskConfigError(
            f"sigma {config.sigma:g} too large: unambiguous codewords are "
            f"{_LINE_SPACING:g} apart but need {min_dist:g}"
        )
    n_unamb = config.v - config.n_ambiguous
    rng = substream(seed, "data", "codebook")
    direction = rng.normal(size=config.c0)
    direction /= np.linalg.norm(direction)
    offsets = (np.arange(n_unamb) - (n_unamb - 1) / 2.0) * _LINE_SPACING
    line = offsets[:, None] * direction[None, :]

    # ambiguous + cue codewords: random, separated from the line and each other
    for _ in range(_MAX_CENTER_RETRIES):
        rest = rng.normal(0.0, 1.0, (config.n_ambiguous + 2, config.c0))
        pts = np.concatenate([line, rest], axis=0)
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        np.fill_diagonal(dist, np.inf)
        if dist.min() >= min_dist:
            codebook = pts[: config.v]
            cue_pair = pts[config.v :]
            return codebook, cue_pair
    raise TaskConfigError(
        f"could not place {config.n_ambiguous + 2} codewords with separation "
        f"{min_dist:g} around the unambiguous line in {config.c0} dimensions"
    )


def gen_context(config: ContextTaskConfig, seed: int) -> Dataset:
    """Generate the context task.

    Per image: a context bit is drawn, the cue strip (leftmost columns) is
    filled with one of two dedicated cue codewords identifying the context,
    and every other pixel draws a codebook entry plus isotropic noise. Cue
    pixels keep clean features and carry the ignore label: they are markers,
    not prediction targets. The label of an ambiguous codeword depends on
    the context as recorded in the joint table.
    """
    table, context_only = _context_label_table(config.k, config.v, config.n_ambiguous)
    codebook, cue_pair = _context_codebook(config, seed)

    h, w = config.height, config.width
    hw = h * w
    cue_cols = np.arange(w) < config.cue_width
    cue_mask = np.tile(cue_cols, h)  # row-major pixel order
    n_noncue = int((~cue_mask).sum())

    rng = substream(seed, "data", "samples")
    p1 = config.context_priors[1]
    samples = []
    for _ in range(config.n_samples):
        z = int(rng.random() < p1)
        v_ids = rng.integers(0, config.v, size=n_noncue)
        feats = np.empty((hw, config.c0), dtype=np.float64)
        labels = np.full(hw, IGNORE_LABEL, dtype=np.int64)
        feats[cue_mask] = cue_pair[z]
        noncue_feats = codebook[v_ids]
        if config.sigma > 0:
            noncue_feats = noncue_feats + rng.normal(
                0.0, config.sigma, (n_noncue, config.c0)
            )
        feats[~cue_mask] = noncue_feats
        labels[~cue_mask] = table[v_ids, z]
        samples.append(
            SegSample(
                height=h,
                width=w,
                features=feats.astype(NARROW),
                labels=labels,
                context_tag=z,
            )
        )
    train_idx, val_idx = _split_80_20(config.n_samples)
    return Dataset(
        task="context",
        config=config,
        seed=seed,
        samples=samples,
        train_indices=train_idx,
        val_indices=val_idx,
        label_table=table,
        static_ceiling=static_ceiling_exact(table, config.context_priors),
        context_only_classes=context_only,
    )


# Per-pixel encoder: a plain two-layer MLP applied row-wise, so its receptive
# field is exactly one pixel and any cross-pixel information flow during
# training is attributable to the head.


def init_encoder(c0: int, hidden: int, c: int, seed: int, dtype=NARROW) -> MLPParams:
    """Seeded encoder init: normal(0, 1/sqrt(fan_in)) weights, zero biases."""
    if min(c0, hidden, c) < 1:
        raise ValueError("encoder dims must be positive")
    w1 = substream(seed, "encoder", "w1").normal(0.0, 1.0 / np.sqrt(c0), (c0, hidden))
    w2 = substream(seed, "encoder", "w2").normal(0.0, 1.0 / np.sqrt(hidden), (hidden, c))
    return MLPParams(
        w1=w1.astype(dtype),
        b1=np.zeros(hidden, dtype=dtype),
        w2=w2.astype(dtype),
        b2=np.zeros(c, dtype=dtype),
    )


def encoder_forward(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, MLPCache]:
    """Row-wise MLP producing the pixel features consumed by the heads."""
    return mlp_forward(params, x)


# Dataset container I/O.


def manifest_path(path: str | Path) -> Path:
    return Path(str(path) + ".manifest.json")


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write the binary container and its JSON manifest sidecar."""
    cfg = dataset.config
    c0 = cfg.c0
    parts = [
        DATASET_MAGIC,
        container.pack_u32(
            DATASET_VERSION,
            cfg.height,
            cfg.width,
            c0,
            cfg.k,
            dataset.n_samples,
        ),
    ]
    for s in dataset.samples:
        tag = _NO_TAG if s.context_tag is None else int(s.context_tag)
        parts.append(bytes([tag]))
        parts.append(container.array_bytes(s.features.astype(NARROW, copy=False)))
        parts.append(container.array_bytes(s.labels.astype(np.uint16)))
    Path(path).write_bytes(b"".join(parts))
    manifest_path(path).write_text(
        json.dumps(dataset.manifest_dict(), indent=2, sort_keys=True) + "\n"
    )


def read_dataset(path: str | Path) -> Dataset:
    """Read a dataset container; bit-exact inverse of write_dataset.

    Raises container.FormatError with a byte offset for malformed files and
    rejects manifests whose sample count disagrees with the payload.
    """
    r = container.read_file(path)
    r.magic(DATASET_MAGIC)
    r.version(DATASET_VERSION)
    h = r.u32("height")
    w = r.u32("width")
    c0 = r.u32("feature channels")
    k = r.u32("class count")
    n_samples = r.u32("sample count")
    hw = h * w

    mpath = manifest_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"dataset manifest missing: {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("n_samples") != n_samples:
        raise container.FormatError(
            f"{path}: manifest sample count {manifest.get('n_samples')} "
            f"!= payload sample count {n_samples}",
            8,
        )

    task = manifest.get("task")
    cfg_dict = dict(manifest["config"])
    if task == "separable":
        config: SeparableTaskConfig | ContextTaskConfig = SeparableTaskConfig(**cfg_dict)
    elif task == "context":
        cfg_dict["context_priors"] = tuple(cfg_dict["context_priors"])
        config = ContextTaskConfig(**cfg_dict)
    else:
        raise container.FormatError(f"{path}: manifest has unknown task {task!r}", 0)
    if (config.height, config.width, config.c0, config.k) != (h, w, c0, k):
        raise container.FormatError(
            f"{path}: manifest config dims disagree with payload header", 8
        )

    samples = []
    for i in range(n_samples):
        tag = r.u8(f"context tag of sample {i}")
        feats = r.array(np.float32, hw * c0, f"features of sample {i}").reshape(hw, c0)
        labels = r.array(np.uint16, hw, f"labels of sample {i}").astype(np.int64)
        bad = (labels != IGNORE_LABEL) & (labels >= k)
        if bad.any():
            raise container.FormatError(
                f"{path}: sample {i} has out-of-range label "
                f"{int(labels[bad.argmax()])} at pixel {int(bad.argmax())}",
                r.pos,
            )
        samples.append(
            SegSample(
                height=h,
                width=w,
                features=feats,
                labels=labels,
                context_tag=None if tag == _NO_TAG else int(tag),
            )
        )
    r.expect_eof()

    label_table = None
    ceiling = None
    context_only: list[int] = []
    if task == "context":
        table = manifest["joint_table"]
        label_table = np.zeros((len(table), 2), dtype=np.int64)
        for row in table:
            label_table[row["codeword"], 0] = row["label_z0"]
            label_table[row["codeword"], 1] = row["label_z1"]
        ceiling = manifest["static_ceiling"]
        context_only = list(manifest.get("context_only_classes", []))

    return Dataset(
        task=task,
        config=config,
        seed=manifest["seed"],
        samples=samples,
        train_indices=list(manifest["split"]["train"]),
        val_indices=list(manifest["split"]["val"]),
        label_table=label_table,
        static_ceiling=ceiling,
        context_only_classes=context_only,
    )
