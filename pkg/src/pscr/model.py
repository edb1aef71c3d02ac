"""Shared-weight backbone, per-image patch pooling, concatenation fusion and the score head."""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, ValidationError
from .preprocessing import (
    OverlapSample,
    PreprocessorKind,
    SamplerSpec,
    apply_preprocessor,
    format_preprocessor,
    parse_preprocessor,
    patch_side,
)


class Mode(str, Enum):
    DIRECT = "direct"
    CONTRASTIVE = "contrastive"


@dataclass(frozen=True)
class BackboneSpec:
    kind: str = "small_cnn"
    channels: tuple[int, ...] = (8, 16, 32)
    feature_dim: int = 32
    in_channels: int = 3

    def __post_init__(self):
        if self.kind not in ("small_cnn", "precomputed"):
            raise ValidationError(f"unknown backbone kind {self.kind!r}")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind == "small_cnn":
            if not self.channels or min(self.channels) < 1:
                raise ValidationError("small_cnn needs a non-empty list of positive channel counts")
            object.__setattr__(self, "feature_dim", self.channels[-1])
        if self.feature_dim < 1:
            raise ValidationError(f"feature_dim must be positive, got {self.feature_dim}")


class SmallCNN:
    """Blocks of 3x3 same-padded conv, ReLU and 2x2 max-pool, then global average pooling."""

    def __init__(self, channels: Sequence[int] = (8, 16, 32), in_channels: int = 3,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.convs = []
        prev = in_channels
        for i, c in enumerate(channels):
            self.convs.append(T.Conv2d(prev, c, 3, padding=1, rng=rng, name=f"backbone.conv{i}"))
            prev = c
        self.feature_dim = prev
        self.trainable = True

    @property
    def min_divisor(self) -> int:
        return 2 ** len(self.convs)

    def parameters(self) -> list[T.Parameter]:
        return [p for conv in self.convs for p in conv.parameters()]

    def forward(self, patches: np.ndarray):
        x = patches
        if x.ndim != 4:
            raise DimensionError(f"backbone expects [N,C,s,s] patches, got rank {x.ndim}")
        if x.shape[-1] % self.min_divisor or x.shape[-2] % self.min_divisor:
            raise DimensionError(
                f"patch side {x.shape[-1]} is not divisible by {self.min_divisor} "
                f"({len(self.convs)} pooling stages)"
            )
        caches = []
        for conv in self.convs:
            x, c_conv = conv.forward(x)
            x, c_relu = T.relu_forward(x)
            x, c_pool = T.maxpool2_forward(x)
            caches.append((c_conv, c_relu, c_pool))
        feats, c_gap = T.global_avg_pool_forward(x)
        return feats, (caches, c_gap)

    def backward(self, dfeats: np.ndarray, cache) -> None:
        caches, c_gap = cache
        dx = T.global_avg_pool_backward(dfeats, c_gap)
        for idx in range(len(self.convs) - 1, -1, -1):
            c_conv, c_relu, c_pool = caches[idx]
            dx = T.maxpool2_backward(dx, c_pool)
            dx = T.relu_backward(dx, c_relu)
            dx = self.convs[idx].backward(dx, c_conv, need_input_grad=idx > 0)


class PrecomputedFeatures:
    """Looks up externally computed feature vectors by image key; no trainable state."""

    def __init__(self, table: Mapping[str, np.ndarray], feature_dim: int | None = None):
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        dims = {v.shape for v in self.table.values()}
        if len(dims) > 1:
            raise DimensionError(f"feature table mixes vector shapes {sorted(dims)}")
        found = next(iter(dims))[0] if dims else feature_dim
        if feature_dim is not None and found != feature_dim:
            raise DimensionError(f"feature table has dimension {found}, expected {feature_dim}")
        self.feature_dim = found
        self.trainable = False

    def parameters(self) -> list[T.Parameter]:
        return []

    def lookup(self, key: str) -> np.ndarray:
        try:
            return self.table[key]
        except KeyError:
            raise ValidationError(f"no precomputed features for {key!r}") from None


class RegressionHead:
    """Two fully connected layers with a ReLU in between, emitting one scalar per row."""

    def __init__(self, in_width: int, hidden: int = 64, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = T.Linear(in_width, hidden, rng=rng, name="head.fc1")
        self.fc2 = T.Linear(hidden, 1, rng=rng, name="head.fc2")
        self.in_width = in_width
        self.hidden = hidden

    def parameters(self) -> list[T.Parameter]:
        return self.fc1.parameters() + self.fc2.parameters()

    def zero_(self) -> "RegressionHead":
        for p in self.parameters():
            p.value[...] = 0.0
        return self

    def forward(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_width:
            raise DimensionError(f"head expects width {self.in_width}, got {x.shape[-1]}")
        h, c1 = self.fc1.forward(x)
        a, cr = T.relu_forward(h)
        out, c2 = self.fc2.forward(a)
        return out[..., 0], (c1, cr, c2)

    def backward(self, dout: np.ndarray, cache) -> np.ndarray:
        c1, cr, c2 = cache
        da = self.fc2.backward(np.asarray(dout)[..., None], c2)
        dh = T.relu_backward(da, cr)
        return self.fc1.backward(dh, c1)


@dataclass
class ModelBundle:
    backbone: SmallCNN | PrecomputedFeatures
    head: RegressionHead
    preprocessor: PreprocessorKind | None
    mode: Mode
    backbone_spec: BackboneSpec = field(default_factory=BackboneSpec)

    def __post_init__(self):
        width = self.backbone.feature_dim * (2 if self.mode is Mode.CONTRASTIVE else 1)
        if self.head.in_width != width:
            raise ConfigurationError(
                f"head width {self.head.in_width} does not match {self.mode.value} mode "
                f"(expected {width})"
            )
        if isinstance(self.backbone, SmallCNN) and self.preprocessor is None:
            raise ConfigurationError("a pixel backbone needs a preprocessor")

    @property
    def sampler(self) -> SamplerSpec | None:
        return self.preprocessor.spec if isinstance(self.preprocessor, OverlapSample) else None

    def parameters(self, include_frozen: bool = True) -> list[T.Parameter]:
        params = self.backbone.parameters() if include_frozen or self.backbone.trainable else []
        return params + self.head.parameters()

    # -- feature extraction

    def encode(self, inputs: Sequence):
        """Mean backbone feature per input, shape ``[len(inputs), feature_dim]``.

        All patches from all inputs go through the backbone as a single batch.
        """
        if isinstance(self.backbone, PrecomputedFeatures):
            feats = np.stack([self.backbone.lookup(k) for k in inputs])
            return feats, None
        stacks = [apply_preprocessor(np.asarray(img, dtype=np.float64), self.preprocessor)
                  for img in inputs]
        counts = [len(s) for s in stacks]
        patch_feats, cache = self.backbone.forward(np.concatenate(stacks))
        bounds = np.cumsum([0] + counts)
        feats = np.stack([patch_feats[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])])
        return feats, (cache, counts)

    def encode_backward(self, dfeats: np.ndarray, cache) -> None:
        if cache is None or not self.backbone.trainable:
            return
        bb_cache, counts = cache
        dpatch = np.concatenate(
            [np.repeat(dfeats[i:i + 1] / n, n, axis=0) for i, n in enumerate(counts)]
        )
        self.backbone.backward(dpatch, bb_cache)

    # -- serialization

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise ValidationError(f"checkpoint lacks parameter {p.name}")
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise DimensionError(f"{p.name}: checkpoint shape {arr.shape} != model {p.value.shape}")
            p.value[...] = arr

    def describe(self) -> dict:
        return {
            "backbone": {
                "kind": self.backbone_spec.kind,
                "channels": list(self.backbone_spec.channels),
                "feature_dim": self.backbone.feature_dim,
                "in_channels": self.backbone_spec.in_channels,
            },
            "head_hidden": self.head.hidden,
            "mode": self.mode.value,
            "preprocessor": format_preprocessor(self.preprocessor) if self.preprocessor else None,
        }


def build_bundle(spec: BackboneSpec, preprocessor: PreprocessorKind | None, mode: Mode, *,
                 seed: int = 0, head_hidden: int = 64,
                 features: Mapping[str, np.ndarray] | None = None) -> ModelBundle:
    """Seeded construction; initialization does not depend on the preprocessor."""
    rng = np.random.default_rng([seed, 0])
    if spec.kind == "small_cnn":
        backbone = SmallCNN(spec.channels, spec.in_channels, rng=rng)
    else:
        if features is None:
            raise ConfigurationError("precomputed backbone needs a feature table")
        backbone = PrecomputedFeatures(features, spec.feature_dim)
        preprocessor = None
    if preprocessor is not None and isinstance(backbone, SmallCNN):
        side = patch_side(preprocessor)
        if side % backbone.min_divisor:
            raise ConfigurationError(
                f"patch side {side} must be divisible by {backbone.min_divisor} for "
                f"{len(spec.channels)} pooling stages"
            )
    width = backbone.feature_dim * (2 if mode is Mode.CONTRASTIVE else 1)
    head = RegressionHead(width, head_hidden, rng=rng)
    return ModelBundle(backbone, head, preprocessor, mode, spec)


def bundle_from_description(desc: Mapping, features=None) -> ModelBundle:
    bb = desc["backbone"]
    spec = BackboneSpec(bb["kind"], tuple(bb["channels"]), bb["feature_dim"], bb.get("in_channels", 3))
    pre = parse_preprocessor(desc["preprocessor"]) if desc.get("preprocessor") else None
    return build_bundle(spec, pre, Mode(desc["mode"]), head_hidden=desc["head_hidden"],
                        features=features)


# ---------------------------------------------------------------- functional surface

def extract_image_feature(image, bundle: ModelBundle) -> np.ndarray:
    return bundle.encode([image])[0][0]


def fuse(query_feat: np.ndarray, exemplar_feat: np.ndarray) -> np.ndarray:
    """Concatenate along the last axis, query first."""
    q = np.asarray(query_feat, dtype=np.float64)
    e = np.asarray(exemplar_feat, dtype=np.float64)
    if q.shape != e.shape:
        raise DimensionError(f"fuse: query feature shape {q.shape} != exemplar shape {e.shape}")
    return np.concatenate([q, e], axis=-1)


def regress(fused: np.ndarray, head: RegressionHead) -> float | np.ndarray:
    out = head.forward(fused)[0]
    return float(out) if np.ndim(out) == 0 else out


def predict_relative(query, exemplar, bundle: ModelBundle) -> float:
    if bundle.mode is not Mode.CONTRASTIVE:
        raise ConfigurationError("predict_relative needs a contrastive bundle")
    q = extract_image_feature(query, bundle)
    e = extract_image_feature(exemplar, bundle)
    return regress(fuse(q, e), bundle.head)


def predict_direct(image, bundle: ModelBundle) -> float:
    if bundle.mode is not Mode.DIRECT:
        raise ConfigurationError("predict_direct needs a direct-mode bundle")
    return regress(extract_image_feature(image, bundle), bundle.head)
