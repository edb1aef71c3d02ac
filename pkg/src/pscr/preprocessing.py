"""Patch extraction and the resize / non-overlapping-grid comparison preprocessors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import BoundsError, DimensionError, ValidationError


@dataclass(frozen=True)
class SamplerSpec:
    """Start offsets shared by both axes, plus the square window side."""

    start_indices: tuple[int, ...]
    window: int

    def __post_init__(self):
        starts = tuple(int(s) for s in self.start_indices)
        object.__setattr__(self, "start_indices", starts)
        if not starts:
            raise ValidationError("start_indices must not be empty")
        if starts[0] < 0:
            raise ValidationError(f"start index {starts[0]} is negative")
        for a, b in zip(starts, starts[1:]):
            if b <= a:
                raise ValidationError(f"start_indices must be strictly increasing: {a} then {b}")
        if int(self.window) <= 0:
            raise ValidationError(f"window must be positive, got {self.window}")
        object.__setattr__(self, "window", int(self.window))

    @property
    def patch_count(self) -> int:
        return len(self.start_indices) ** 2

    def check_bounds(self, height: int, width: int | None = None) -> None:
        width = height if width is None else width
        for start in self.start_indices:
            if start + self.window > height:
                raise BoundsError(
                    f"start index {start} + window {self.window} exceeds height {height}"
                )
            if start + self.window > width:
                raise BoundsError(
                    f"start index {start} + window {self.window} exceeds width {width}"
                )


@dataclass(frozen=True)
class Resize:
    target: int

    def __post_init__(self):
        if self.target < 1:
            raise ValidationError(f"resize target must be >= 1, got {self.target}")


@dataclass(frozen=True)
class NonOverlapGrid:
    patch: int

    def __post_init__(self):
        if self.patch < 1:
            raise ValidationError(f"grid patch must be >= 1, got {self.patch}")


@dataclass(frozen=True)
class OverlapSample:
    spec: SamplerSpec


PreprocessorKind = Union[Resize, NonOverlapGrid, OverlapSample]


@dataclass
class PatchSet:
    patches: list[np.ndarray]
    origins: list[tuple[int, int]]
    source_shape: tuple[int, int, int]

    def __len__(self) -> int:
        return len(self.patches)

    def stack(self) -> np.ndarray:
        return np.stack(self.patches)


def _check_image(image: np.ndarray, op: str) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3:
        raise DimensionError(f"{op}: expected [C,H,W] image, got rank {image.ndim}")
    return image


def sample_patches(image: np.ndarray, spec: SamplerSpec) -> PatchSet:
    """Overlapping sliding-window sampling; rows vary in the outer loop."""
    image = _check_image(image, "sample_patches")
    c, h, w = image.shape
    if h != w:
        raise DimensionError(f"sample_patches: image must be square, got {h}x{w}")
    spec.check_bounds(h, w)
    s = spec.window
    patches, origins = [], []
    for i in spec.start_indices:
        for j in spec.start_indices:
            patches.append(image[:, i:i + s, j:j + s].copy())
            origins.append((i, j))
    return PatchSet(patches, origins, (c, h, w))


def nonoverlap_grid(image: np.ndarray, patch: int) -> PatchSet:
    image = _check_image(image, "nonoverlap_grid")
    c, h, w = image.shape
    if h != w:
        raise DimensionError(f"nonoverlap_grid: image must be square, got {h}x{w}")
    if patch < 1 or h % patch:
        raise DimensionError(f"nonoverlap_grid: patch {patch} does not divide height {h}")
    if w % patch:
        raise DimensionError(f"nonoverlap_grid: patch {patch} does not divide width {w}")
    patches, origins = [], []
    for i in range(0, h, patch):
        for j in range(0, w, patch):
            patches.append(image[:, i:i + patch, j:j + patch].copy())
            origins.append((i, j))
    return PatchSet(patches, origins, (c, h, w))


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    # corner-aligned: output sample k sits at k*(src-1)/(dst-1) in source coordinates
    if dst == 1:
        pos = np.array([(src - 1) / 2.0])
    else:
        pos = np.arange(dst) * ((src - 1) / (dst - 1))
    lo = np.minimum(np.floor(pos).astype(int), src - 2)
    frac = pos - lo
    mat = np.zeros((dst, src))
    rows = np.arange(dst)
    mat[rows, lo] = 1.0 - frac
    mat[rows, lo + 1] += frac
    return mat


def resize_bilinear(image: np.ndarray, target: int) -> np.ndarray:
    image = _check_image(image, "resize_bilinear")
    if target < 1:
        raise ValidationError(f"resize target must be >= 1, got {target}")
    c, h, w = image.shape
    if h < 2 or w < 2:
        raise DimensionError(f"resize_bilinear: image {h}x{w} is smaller than 2x2")
    ry = _interp_matrix(h, target)
    rx = _interp_matrix(w, target)
    return ry @ np.asarray(image, dtype=np.float64) @ rx.T


def coverage_report(spec: SamplerSpec, side: int) -> tuple[float, int]:
    """Fraction of pixels under at least one window, and the deepest overlap."""
    spec.check_bounds(side)
    counts = np.zeros(side, dtype=np.int64)
    for start in spec.start_indices:
        counts[start:start + spec.window] += 1
    # the window grid is separable, so 2D multiplicity is the outer product
    covered_1d = np.count_nonzero(counts)
    return (covered_1d / side) ** 2, int(counts.max()) ** 2


def apply_preprocessor(image: np.ndarray, kind: PreprocessorKind) -> np.ndarray:
    """Patches as a stacked ``[N, C, s, s]`` array; resize yields ``N == 1``."""
    if isinstance(kind, Resize):
        return resize_bilinear(image, kind.target)[None]
    if isinstance(kind, NonOverlapGrid):
        return nonoverlap_grid(image, kind.patch).stack()
    if isinstance(kind, OverlapSample):
        return sample_patches(image, kind.spec).stack()
    raise ValidationError(f"unknown preprocessor {kind!r}")


def patch_side(kind: PreprocessorKind) -> int:
    if isinstance(kind, Resize):
        return kind.target
    if isinstance(kind, NonOverlapGrid):
        return kind.patch
    return kind.spec.window


def format_preprocessor(kind: PreprocessorKind) -> str:
    if isinstance(kind, Resize):
        return f"resize:{kind.target}"
    if isinstance(kind, NonOverlapGrid):
        return f"grid:{kind.patch}"
    starts = ",".join(str(s) for s in kind.spec.start_indices)
    return f"overlap:{starts}/{kind.spec.window}"


def parse_preprocessor(text: str) -> PreprocessorKind:
    """Inverse of :func:`format_preprocessor` (``resize:32``, ``grid:16``, ``overlap:0,16,32/32``)."""
    kind, _, arg = text.strip().partition(":")
    try:
        if kind == "resize":
            return Resize(int(arg))
        if kind == "grid":
            return NonOverlapGrid(int(arg))
        if kind == "overlap":
            starts, _, window = arg.partition("/")
            return OverlapSample(SamplerSpec(tuple(int(s) for s in starts.split(",")), int(window)))
    except ValueError as exc:
        raise ValidationError(f"malformed preprocessor {text!r}: {exc}") from exc
    raise ValidationError(f"unknown preprocessor {text!r}; use resize:N, grid:N or overlap:S/W")
