"""The two classification heads: per-pixel baseline and the dual-branch offset head.

The baseline scores each pixel feature against fixed class embeddings. The
offset head computes a coupled class/pixel score matrix once, pools it two
ways (per-class attention over pixels, per-pixel attention over classes),
and predicts additive corrections for both the class embeddings and the
pixel features before the final product. With both correction branches
producing zeros the offset head reproduces the baseline bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import container
from .diff import MLPCache, MLPParams, mlp_backward, mlp_forward, vjp_softmax_rows
from .linalg import NARROW, NonFiniteError, require_matrix, softmax_rows
from .seeding import substream

CHECKPOINT_MAGIC = b"OSC1"
CHECKPOINT_VERSION = 1


@dataclass
class OffsetHeadParams:
    """Learnables of the offset head.

    `class_embed` is the [K, C] matrix of class embeddings; `class_mlp` and
    `feature_mlp` produce the class and feature corrections. `temperature`
    scales the coupled scores before both softmaxes. With both branch flags
    off the head is definitionally the per-pixel baseline.
    """

    class_embed: np.ndarray
    class_mlp: MLPParams
    feature_mlp: MLPParams
    temperature: float = 1.0
    enable_class_offset: bool = True
    enable_feature_offset: bool = True

    def __post_init__(self) -> None:
        require_matrix(self.class_embed, "class_embed")
        k, c = self.class_embed.shape
        if k < 2:
            raise ValueError(f"need at least 2 classes, got {k}")
        for name, mlp in (("class_mlp", self.class_mlp), ("feature_mlp", self.feature_mlp)):
            if mlp.d_in != c or mlp.d_out != c:
                raise ValueError(
                    f"{name} must map {c} -> {c}, got {mlp.d_in} -> {mlp.d_out}"
                )
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    @property
    def n_classes(self) -> int:
        return self.class_embed.shape[0]

    @property
    def channels(self) -> int:
        return self.class_embed.shape[1]

    def stored_param_count(self, count_disabled: bool = False) -> int:
        """Number of stored learnable scalars, honoring the branch flags."""
        n = self.class_embed.size
        if self.enable_class_offset or count_disabled:
            n += self.class_mlp.n_params()
        if self.enable_feature_offset or count_disabled:
            n += self.feature_mlp.n_params()
        return n


@dataclass
class OffsetTrace:
    """All intermediates of one offset-head forward pass."""

    features: np.ndarray        # E [HW, C], the unadjusted input
    scores: np.ndarray          # [K, HW] coupled class/pixel scores
    attn_over_pixels: np.ndarray   # [K, HW] row-stochastic, per-class spatial attention
    attn_over_classes: np.ndarray  # [HW, K] row-stochastic, per-pixel class attention
    pooled_feats: np.ndarray    # [K, C] spatially pooled features per class
    pooled_embeds: np.ndarray   # [HW, C] class-embedding mixture per pixel
    class_offset: np.ndarray    # [K, C]
    feature_offset: np.ndarray  # [HW, C]
    adj_class_embed: np.ndarray  # [K, C]
    adj_features: np.ndarray     # [HW, C]
    logits: np.ndarray           # [K, HW] final mask scores
    class_mlp_cache: MLPCache | None
    feature_mlp_cache: MLPCache | None


@dataclass
class HeadGrads:
    """Gradients of a scalar loss w.r.t. the head inputs and learnables.

    MLP entries are None when the corresponding branch is disabled.
    """

    class_embed: np.ndarray
    class_mlp: MLPParams | None
    feature_mlp: MLPParams | None
    features: np.ndarray


def _stage_finite(arr: np.ndarray, stage: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values at stage {stage!r}")
    return arr


def perpixel_forward(class_embed: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Baseline logits P = W E^T, no bias."""
    w = require_matrix(class_embed, "class_embed")
    e = require_matrix(features, "features")
    if w.shape[1] != e.shape[1]:
        raise ValueError(
            f"channel mismatch: class_embed {w.shape} vs features {e.shape}"
        )
    return _stage_finite(w @ e.T, "perpixel logits")


def offset_forward(params: OffsetHeadParams, features: np.ndarray) -> OffsetTrace:
    """Single forward pass of the offset head.

    Both attention maps are derived from the same coupled score matrix,
    computed once from the original class embeddings and features; the
    corrections are not fed back for a second round.
    """
    e = require_matrix(features, "features")
    w = params.class_embed
    if e.shape[1] != params.channels:
        raise ValueError(
            f"feature channels {e.shape[1]} != head channels {params.channels}"
        )

    scores = _stage_finite(w @ e.T, "coupled scores")
    scaled = scores / params.temperature

    attn_over_pixels = softmax_rows(scaled)
    pooled_feats = attn_over_pixels @ e
    if params.enable_class_offset:
        class_offset, cls_cache = mlp_forward(params.class_mlp, pooled_feats)
        _stage_finite(class_offset, "class offset")
        adj_class_embed = w + class_offset
    else:
        class_offset, cls_cache = np.zeros_like(w), None
        adj_class_embed = w

    attn_over_classes = softmax_rows(np.ascontiguousarray(scaled.T))
    pooled_embeds = attn_over_classes @ w
    if params.enable_feature_offset:
        feature_offset, pos_cache = mlp_forward(params.feature_mlp, pooled_embeds)
        _stage_finite(feature_offset, "feature offset")
        adj_features = e + feature_offset
    else:
        feature_offset, pos_cache = np.zeros_like(e), None
        adj_features = e

    logits = _stage_finite(adj_class_embed @ adj_features.T, "adjusted logits")
    return OffsetTrace(
        features=e,
        scores=scores,
        attn_over_pixels=attn_over_pixels,
        attn_over_classes=attn_over_classes,
        pooled_feats=pooled_feats,
        pooled_embeds=pooled_embeds,
        class_offset=class_offset,
        feature_offset=feature_offset,
        adj_class_embed=adj_class_embed,
        adj_features=adj_features,
        logits=logits,
        class_mlp_cache=cls_cache,
        feature_mlp_cache=pos_cache,
    )


def offset_backward(
    params: OffsetHeadParams, trace: OffsetTrace, dlogits: np.ndarray
) -> HeadGrads:
    """Exact reverse pass of offset_forward.

    The class embeddings and features each receive gradient through several
    paths: the direct final product, the coupled score matrix behind both
    attentions, and the two pooled intermediates.
    """
    if dlogits.shape != trace.logits.shape:
        raise ValueError(
            f"dlogits shape {dlogits.shape} != logits shape {trace.logits.shape}"
        )
    w = params.class_embed
    e = trace.features
    tau = params.temperature

    d_adj_class = dlogits @ trace.adj_features
    d_adj_feat = dlogits.T @ trace.adj_class_embed
    d_class_embed = d_adj_class.copy()
    d_features = d_adj_feat.copy()

    d_scaled = None
    g_class_mlp = None
    if params.enable_class_offset:
        d_pooled_feats, g_class_mlp = mlp_backward(trace.class_mlp_cache, d_adj_class)
        d_attn_pix = d_pooled_feats @ e.T
        d_features += trace.attn_over_pixels.T @ d_pooled_feats
        d_scaled = vjp_softmax_rows(trace.attn_over_pixels, d_attn_pix)

    g_feature_mlp = None
    if params.enable_feature_offset:
        d_pooled_emb, g_feature_mlp = mlp_backward(trace.feature_mlp_cache, d_adj_feat)
        d_attn_cls = d_pooled_emb @ w.T
        d_class_embed += trace.attn_over_classes.T @ d_pooled_emb
        d_scaled_t = vjp_softmax_rows(trace.attn_over_classes, d_attn_cls).T
        d_scaled = d_scaled_t if d_scaled is None else d_scaled + d_scaled_t

    if d_scaled is not None:
        d_scores = d_scaled / tau
        d_class_embed += d_scores @ e
        d_features += d_scores.T @ w

    return HeadGrads(
        class_embed=d_class_embed,
        class_mlp=g_class_mlp,
        feature_mlp=g_feature_mlp,
        features=d_features,
    )


def param_count(
    k: int,
    c: int,
    c_h: int,
    class_offset: bool = True,
    feature_offset: bool = True,
) -> int:
    """Learnable-parameter count: K*C base plus per enabled branch
    C*C_h + C_h + C_h*C + C."""
    if min(k, c, c_h) <= 0:
        raise ValueError("dimensions must be positive")
    branch = c * c_h + c_h + c_h * c + c
    return k * c + branch * (int(class_offset) + int(feature_offset))


def init_params(
    k: int,
    c: int,
    c_h: int,
    seed: int,
    temperature: float = 1.0,
    class_offset: bool = True,
    feature_offset: bool = True,
    dtype=NARROW,
) -> OffsetHeadParams:
    """Seeded initialization.

    Class embeddings and first MLP layers draw from normal(0, 1/sqrt(C));
    second MLP layers and all biases start at zero, so a freshly initialized
    offset head reproduces the baseline exactly. The same named substreams
    are used regardless of the branch flags, keeping the class embeddings
    identical across head configurations under one seed.
    """
    if min(k, c, c_h) <= 0:
        raise ValueError("dimensions must be positive")
    scale = 1.0 / np.sqrt(c)

    def draw(label: str, shape: tuple[int, ...]) -> np.ndarray:
        return substream(seed, "head", label).normal(0.0, scale, shape).astype(dtype)

    def branch_mlp(label: str) -> MLPParams:
        return MLPParams(
            w1=draw(f"{label}.w1", (c, c_h)),
            b1=np.zeros(c_h, dtype=dtype),
            w2=np.zeros((c_h, c), dtype=dtype),
            b2=np.zeros(c, dtype=dtype),
        )

    return OffsetHeadParams(
        class_embed=draw("class_embed", (k, c)),
        class_mlp=branch_mlp("class_mlp"),
        feature_mlp=branch_mlp("feature_mlp"),
        temperature=temperature,
        enable_class_offset=class_offset,
        enable_feature_offset=feature_offset,
    )


def decode_mask(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over classes; ties resolve to the lowest class index."""
    return np.argmax(logits, axis=0)


# Checkpoint serialization: a tensor container plus a JSON text manifest,
# following the same magic/version header discipline as dataset files.


@dataclass
class Checkpoint:
    head: OffsetHeadParams
    encoder: MLPParams | None
    manifest: dict


def _mlp_tensors(prefix: str, mlp: MLPParams) -> list[tuple[str, np.ndarray]]:
    return [(f"{prefix}.{name}", arr) for name, arr in mlp.items()]


def manifest_path(path: str | Path) -> Path:
    return Path(str(path) + ".manifest.json")


def save_checkpoint(
    path: str | Path,
    head: OffsetHeadParams,
    encoder: MLPParams | None = None,
    seed: int | None = None,
    extra: dict | None = None,
) -> None:
    """Write the parameter container at `path` and its manifest sidecar."""
    tensors = [("head.class_embed", head.class_embed)]
    tensors += _mlp_tensors("head.class_mlp", head.class_mlp)
    tensors += _mlp_tensors("head.feature_mlp", head.feature_mlp)
    if encoder is not None:
        tensors += _mlp_tensors("encoder", encoder)

    blob = [CHECKPOINT_MAGIC, container.pack_u32(CHECKPOINT_VERSION, len(tensors))]
    blob += [container.write_tensor_block(name, arr) for name, arr in tensors]
    Path(path).write_bytes(b"".join(blob))

    manifest = {
        "k": head.n_classes,
        "c": head.channels,
        "c_h": head.class_mlp.d_hidden,
        "enable_class_offset": head.enable_class_offset,
        "enable_feature_offset": head.enable_feature_offset,
        "temperature": head.temperature,
        "seed": seed,
        "dtype": str(head.class_embed.dtype),
        "encoder": None
        if encoder is None
        else {"c0": encoder.d_in, "hidden": encoder.d_hidden, "c": encoder.d_out},
    }
    if extra:
        manifest.update(extra)
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint container and its manifest; bit-exact round trip."""
    r = container.read_file(path)
    r.magic(CHECKPOINT_MAGIC)
    r.version(CHECKPOINT_VERSION)
    n_tensors = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name, arr = container.read_tensor_block(r)
        tensors[name] = arr
    r.expect_eof()

    mpath = manifest_path(path)
    if not mpath.exists():
        raise FileNotFoundError(f"checkpoint manifest missing: {mpath}")
    manifest = json.loads(mpath.read_text())

    def mlp_from(prefix: str) -> MLPParams:
        try:
            return MLPParams(
                w1=tensors[f"{prefix}.w1"],
                b1=tensors[f"{prefix}.b1"],
                w2=tensors[f"{prefix}.w2"],
                b2=tensors[f"{prefix}.b2"],
            )
        except KeyError as exc:
            raise container.FormatError(
                f"{path}: missing tensor {exc.args[0]!r}", 0
            ) from exc

    head = OffsetHeadParams(
        class_embed=tensors["head.class_embed"],
        class_mlp=mlp_from("head.class_mlp"),
        feature_mlp=mlp_from("head.feature_mlp"),
        temperature=float(manifest["temperature"]),
        enable_class_offset=bool(manifest["enable_class_offset"]),
        enable_feature_offset=bool(manifest["enable_feature_offset"]),
    )
    encoder = mlp_from("encoder") if manifest.get("encoder") else None
    return Checkpoint(head=head, encoder=encoder, manifest=manifest)
