"""Ideal class-prototype mining and the cross-image prototype similarity study.

Given a ground-truth mask and pixel features, the least-norm least-squares
class prototypes are recovered through the pseudoinverse of the feature
matrix. Mining always runs at wide precision regardless of how the features
were produced. The similarity study mines one class's prototype across many
images and reports how strongly it varies, grouped by the synthetic task's
context tag when available.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import IGNORE_LABEL, Dataset, encoder_forward
from .diff import MLPParams
from .linalg import WIDE, cosine_similarity_matrix, pinv, require_matrix
from .seeding import substream
from .train import confusion_matrix, metrics_from_confusion


@dataclass
class OneHotMask:
    """Class-indicator matrix [K, HW] with an explicit per-pixel ignore mask.

    Non-ignored columns contain exactly one 1; ignored columns are all zero.
    """

    matrix: np.ndarray
    ignored: np.ndarray

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.matrix.shape[1]

    def labels(self) -> np.ndarray:
        """Back to index form: argmax per column, IGNORE_LABEL where ignored."""
        lab = np.argmax(self.matrix, axis=0).astype(np.int64)
        lab[self.ignored] = IGNORE_LABEL
        return lab


def one_hot(labels: np.ndarray, k: int, ignore_value: int = IGNORE_LABEL) -> OneHotMask:
    """Build the one-hot mask; out-of-range labels are rejected with the index."""
    labels = np.asarray(labels).ravel()
    ignored = labels == ignore_value
    bad = ~ignored & ((labels < 0) | (labels >= k))
    if bad.any():
        i = int(bad.argmax())
        raise ValueError(f"label {int(labels[i])} out of range [0,{k}) at pixel {i}")
    m = np.zeros((k, labels.size), dtype=WIDE)
    cols = np.flatnonzero(~ignored)
    m[labels[cols], cols] = 1.0
    return OneHotMask(matrix=m, ignored=ignored)


def ideal_prototypes(
    mask: OneHotMask, features: np.ndarray, rtol: float | None = None
) -> np.ndarray:
    """Least-norm least-squares prototypes W* with W* E^T ~= M.

    Ignored pixels are removed from the linear system entirely (their feature
    rows and mask columns are dropped) rather than kept as zero targets, which
    would pull real features toward zero. Always solved at wide precision.
    """
    e = require_matrix(features, "features").astype(WIDE, copy=False)
    if mask.n_pixels != e.shape[0]:
        raise ValueError(
            f"mask has {mask.n_pixels} pixels but features have {e.shape[0]} rows"
        )
    keep = ~mask.ignored
    if not keep.any():
        raise ValueError("all pixels ignored; nothing to mine")
    m_v = mask.matrix[:, keep]
    e_v = e[keep]
    return m_v @ pinv(e_v.T, rtol=rtol)


def reconstruction_miou(
    mask: OneHotMask, features: np.ndarray, rtol: float | None = None
) -> float:
    """mIoU of the mask reconstructed from the mined prototypes.

    Predictions decode as the per-pixel argmax of W* E^T (ties to the lowest
    class index); ignored pixels are excluded via the shared metric path.
    """
    w_star = ideal_prototypes(mask, features, rtol=rtol)
    e = np.asarray(features, dtype=WIDE)
    pred = np.argmax(w_star @ e.T, axis=0)
    cm, ignored = confusion_matrix(mask.labels(), pred, mask.k)
    return metrics_from_confusion(cm, ignored).miou


@dataclass
class SimilarityStudy:
    """Cross-image prototype similarity for one class."""

    class_id: int
    image_ids: list[int]
    context_tags: list[int | None]
    similarity: np.ndarray  # [n, n] cosine matrix
    skipped: list[int]  # candidate images lacking the class
    summary: dict

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            names = [f"img{i}" for i in self.image_ids]
            writer.writerow(["id"] + names)
            for name, row in zip(names, self.similarity):
                writer.writerow([name] + [repr(float(x)) for x in row])


def read_similarity_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Parse a similarity CSV; malformed files report the offending line."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or not rows[0] or rows[0][0] != "id":
        raise ValueError(f"{path}: line 1: expected header starting with 'id'")
    names = rows[0][1:]
    n = len(names)
    if len(rows) - 1 != n:
        raise ValueError(
            f"{path}: line {len(rows)}: expected {n} data rows to match header, "
            f"got {len(rows) - 1}"
        )
    sim = np.zeros((n, n))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise ValueError(f"{path}: line {i}: expected {n + 1} cells, got {len(row)}")
        if row[0] != names[i - 2]:
            raise ValueError(
                f"{path}: line {i}: row label {row[0]!r} does not match "
                f"header column {names[i - 2]!r}"
            )
        try:
            sim[i - 2] = [float(x) for x in row[1:]]
        except ValueError as exc:
            raise ValueError(f"{path}: line {i}: bad float ({exc})") from None
    return names, sim


def _offdiag_pairs(sim: np.ndarray) -> list[tuple[int, int, float]]:
    n = sim.shape[0]
    return [(i, j, float(sim[i, j])) for i in range(n) for j in range(i + 1, n)]


def prototype_similarity_study(
    dataset: Dataset,
    encoder: MLPParams,
    class_id: int,
    n_images: int,
    seed: int = 0,
    rtol: float | None = None,
) -> SimilarityStudy:
    """Mine one class's prototype across images and compare them pairwise.

    Features come from the frozen encoder. On context-tagged datasets up to
    `n_images` images are drawn per context group (seeded, without
    replacement) and the off-diagonal similarities are summarized separately
    for same-context and cross-context pairs; untagged datasets pool
    everything. Images not containing the class are skipped (and listed);
    fewer than two usable images is an error.
    """
    if not 0 <= class_id < dataset.k:
        raise ValueError(f"class {class_id} outside [0, {dataset.k})")
    if n_images < 1:
        raise ValueError("n_images must be >= 1")

    usable = []
    skipped = []
    for i, s in enumerate(dataset.samples):
        present = ((s.labels == class_id) & (s.labels != IGNORE_LABEL)).any()
        (usable if present else skipped).append(i)

    rng = substream(seed, "mining", "selection")
    tagged = dataset.task == "context"
    if tagged:
        chosen: list[int] = []
        for tag in (0, 1):
            group = [i for i in usable if dataset.samples[i].context_tag == tag]
            take = min(n_images, len(group))
            picks = rng.choice(len(group), size=take, replace=False)
            chosen.extend(group[j] for j in sorted(picks))
    else:
        take = min(n_images, len(usable))
        picks = rng.choice(len(usable), size=take, replace=False)
        chosen = [usable[j] for j in sorted(picks)]
    if len(chosen) < 2:
        raise ValueError(
            f"need at least 2 images containing class {class_id}, got {len(chosen)}"
        )

    rows = []
    for i in chosen:
        s = dataset.samples[i]
        feats, _ = encoder_forward(encoder, s.features.astype(WIDE))
        mask = one_hot(s.labels, dataset.k)
        w_star = ideal_prototypes(mask, feats, rtol=rtol)
        rows.append(w_star[class_id])
    sim = cosine_similarity_matrix(np.stack(rows))

    tags = [dataset.samples[i].context_tag for i in chosen]
    same, cross, pooled = [], [], []
    for i, j, val in _offdiag_pairs(sim):
        pooled.append(val)
        if tagged:
            (same if tags[i] == tags[j] else cross).append(val)
    summary = {
        "class": class_id,
        "n": len(chosen),
        "median_same_context": float(np.median(same)) if same else None,
        "median_cross_context": float(np.median(cross)) if cross else None,
        "min": float(min(pooled)) if pooled else None,
        "max": float(max(pooled)) if pooled else None,
    }
    if not tagged:
        summary["median"] = float(np.median(pooled)) if pooled else None
    return SimilarityStudy(
        class_id=class_id,
        image_ids=chosen,
        context_tags=tags,
        similarity=sim,
        skipped=skipped,
        summary=summary,
    )
