"""Manifest and image ingestion, seeded splits, feature tables and the synthetic blur/noise set."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError

log = logging.getLogger(__name__)

SCORE_TOP = 5.0
SCORE_BOTTOM = 1.0


@dataclass
class Manifest:
    root: Path
    dims: list[str]
    paths: list[str]
    scores: np.ndarray  # [n, len(dims)]
    _images: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(len(self.paths), len(self.dims))

    def __len__(self) -> int:
        return len(self.paths)

    def subset(self, indices: Sequence[int]) -> "Manifest":
        idx = list(indices)
        sub = Manifest(self.root, list(self.dims), [self.paths[i] for i in idx], self.scores[idx])
        sub._images = {self.paths[i]: self._images[self.paths[i]]
                       for i in idx if self.paths[i] in self._images}
        return sub

    def dim_index(self, dim: str | int) -> int:
        if isinstance(dim, int):
            return dim
        try:
            return self.dims.index(dim)
        except ValueError:
            raise ValidationError(f"unknown score dimension {dim!r}; have {self.dims}") from None

    def image(self, i: int) -> np.ndarray:
        path = self.paths[i]
        if path not in self._images:
            self._images[path] = load_image(self.root / path)
        return self._images[path]

    def images(self) -> list[np.ndarray]:
        return [self.image(i) for i in range(len(self))]


def load_manifest(path, *, check_files: bool = True) -> Manifest:
    """Parse ``path,<dim1>[,<dim2>...]`` CSV; image paths are relative to the CSV's folder."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    root = path.parent
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty manifest") from None
        if len(header) < 2 or header[0].strip() != "path":
            raise FormatError(f"{path}:1: header must be 'path,<dim>[,...]', got {header}")
        dims = [h.strip() for h in header[1:]]
        paths, scores = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{line}: expected {len(header)} columns, got {len(row)}")
            rel = row[0].strip()
            try:
                vals = [float(c) for c in row[1:]]
            except ValueError:
                raise FormatError(f"{path}:{line}: non-numeric score in {row[1:]}") from None
            if not all(math.isfinite(v) for v in vals):
                raise FormatError(f"{path}:{line}: non-finite score")
            if check_files and not (root / rel).is_file():
                raise FormatError(f"{path}:{line}: image not found: {root / rel}")
            paths.append(rel)
            scores.append(vals)
    return Manifest(root, dims, paths, np.array(scores, dtype=np.float64).reshape(len(paths), len(dims)))


def write_manifest(manifest: Manifest, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", *manifest.dims])
        for rel, row in zip(manifest.paths, manifest.scores):
            w.writerow([rel, *(repr(float(v)) for v in row)])


# ---------------------------------------------------------------- images

def _ppm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PPM header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1  # single whitespace byte ends the header


def load_image(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) to a ``[3, H, W]`` float array in [0, 1]."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read image {path}: {exc}") from exc
    if blob[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (magic {blob[:2]!r})")
    try:
        (_, w, h, maxval), offset = _ppm_tokens(blob, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    pixels = blob[offset:offset + need]
    if len(pixels) != need:
        raise FormatError(f"{path}: truncated pixel data ({len(pixels)} of {need} bytes)")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return arr.transpose(2, 0, 1).astype(np.float64) / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a ``[3, H, W]`` (or ``[1, H, W]``) float image in [0, 1] as P6."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValidationError(f"write_ppm expects [3,H,W] or [1,H,W], got shape {image.shape}")
    if image.shape[0] == 1:
        image = np.repeat(image, 3, axis=0)
    _, h, w = image.shape
    body = to_uint8(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + body)


# ---------------------------------------------------------------- splits

def split_indices(n: int, ratio: float, seed: int) -> tuple[list[int], list[int]]:
    if not 0.0 < ratio < 1.0:
        raise ValidationError(f"split ratio must lie in (0, 1), got {ratio}")
    n_train = int(round(ratio * n))
    if n_train < 1 or n_train >= n:
        raise ValidationError(f"split of {n} rows at ratio {ratio} leaves one side empty")
    perm = np.random.default_rng(seed).permutation(n)
    train = sorted(int(i) for i in perm[:n_train])
    test = sorted(int(i) for i in perm[n_train:])
    return train, test


def split(manifest: Manifest, ratio: float, seed: int) -> tuple[Manifest, Manifest]:
    train, test = split_indices(len(manifest), ratio, seed)
    overlap = set(manifest.paths[i] for i in train) & set(manifest.paths[i] for i in test)
    if overlap:
        raise ValidationError(f"duplicate image paths leak across the split: {sorted(overlap)[:3]}")
    log.info("split %d rows -> %d train / %d test (seed %d), no leakage",
             len(manifest), len(train), len(test), seed)
    return manifest.subset(train), manifest.subset(test)


# ---------------------------------------------------------------- features

def load_features(path) -> dict[str, np.ndarray]:
    """CSV ``path,f1..fd`` to an ordered mapping of image key to feature vector."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"feature file not found: {path}")
    table: dict[str, np.ndarray] = {}
    dim = None
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "path" or len(header) < 2:
            raise FormatError(f"{path}:1: header must be 'path,f1,...'")
        dim = len(header) - 1
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) - 1 != dim:
                raise FormatError(f"{path}:{line}: expected {dim} features, got {len(row) - 1}")
            try:
                vec = np.array([float(c) for c in row[1:]], dtype=np.float64)
            except ValueError:
                raise FormatError(f"{path}:{line}: non-numeric feature value") from None
            if not np.all(np.isfinite(vec)):
                raise FormatError(f"{path}:{line}: non-finite feature value")
            table[row[0].strip()] = vec
    return table


def write_features(table: Mapping[str, np.ndarray], path) -> None:
    items = list(table.items())
    dim = len(items[0][1]) if items else 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", *(f"f{i + 1}" for i in range(dim))])
        for key, vec in items:
            w.writerow([key, *(repr(float(v)) for v in vec)])


# ---------------------------------------------------------------- synthetic set

@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 64
    side: int = 64
    seed: int = 7
    score_fn: str = "blur"  # blur | noise | mixed
    max_radius: int = 5
    max_noise: float = 0.2

    def __post_init__(self):
        if self.count < 4:
            raise ValidationError(f"synthetic count must be >= 4, got {self.count}")
        if self.side < 16:
            raise ValidationError(f"synthetic side must be >= 16, got {self.side}")
        if self.score_fn not in ("blur", "noise", "mixed"):
            raise ValidationError(f"score_fn must be blur, noise or mixed, got {self.score_fn!r}")
        if self.max_radius < 1:
            raise ValidationError("max_radius must be >= 1")


def box_blur(image: np.ndarray, radius: int) -> np.ndarray:
    """Separable box blur of width ``2*radius+1`` with edge replication."""
    if radius <= 0:
        return image.copy()
    out = image
    width = 2 * radius + 1
    for axis in (1, 2):
        pad = [(0, 0)] * 3
        pad[axis] = (radius + 1, radius)
        padded = np.pad(out, pad, mode="edge")
        csum = np.cumsum(padded, axis=axis)
        n = out.shape[axis]
        hi = np.take(csum, np.arange(width, width + n), axis=axis)
        lo = np.take(csum, np.arange(0, n), axis=axis)
        out = (hi - lo) / width
    return out


def _base_content(rng: np.random.Generator, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) / side
    img = np.zeros((3, side, side))
    for _ in range(6):
        freq = rng.uniform(2.0, side / 4.0)
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        color = rng.uniform(-1, 1, size=3)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += color[:, None, None] * wave
    for _ in range(8):
        r0, c0 = rng.integers(0, side, size=2)
        hgt, wid = rng.integers(side // 8, side // 2, size=2)
        img[:, r0:r0 + hgt, c0:c0 + wid] += rng.uniform(-1.5, 1.5, size=3)[:, None, None]
    img += 0.3 * rng.standard_normal(img.shape)
    img -= img.min()
    img /= img.max()
    return img


def gen_synthetic(spec: SyntheticSpec, out_dir) -> Manifest:
    """Write PPM images plus ``manifest.csv`` and ``synthetic.json`` into ``out_dir``.

    Blur scores fall linearly from 5 (radius 0) to 1 (``max_radius``); noise
    scores likewise with noise level; mixed averages the two scales.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    levels = rng.permutation(np.arange(spec.count) % (spec.max_radius + 1))
    noise_levels = rng.permutation(np.arange(spec.count) % (spec.max_radius + 1))
    paths, scores, records = [], [], []
    span = SCORE_TOP - SCORE_BOTTOM
    for i in range(spec.count):
        img = _base_content(rng, spec.side)
        radius = int(levels[i]) if spec.score_fn in ("blur", "mixed") else 0
        nlevel = int(noise_levels[i]) if spec.score_fn in ("noise", "mixed") else 0
        img = box_blur(img, radius)
        sigma = spec.max_noise * nlevel / spec.max_radius
        if sigma:
            img = img + sigma * rng.standard_normal(img.shape)
        blur_score = SCORE_TOP - span * radius / spec.max_radius
        noise_score = SCORE_TOP - span * nlevel / spec.max_radius
        score = {"blur": blur_score, "noise": noise_score}.get(spec.score_fn,
                                                              0.5 * (blur_score + noise_score))
        rel = f"images/img_{i:04d}.ppm"
        write_ppm(out / rel, np.clip(img, 0.0, 1.0))
        paths.append(rel)
        scores.append([score])
        records.append({"path": rel, "radius": radius, "noise_sigma": sigma, "score": score})
    manifest = Manifest(out, ["MOS"], paths, np.array(scores))
    write_manifest(manifest, out / "manifest.csv")
    echo = {"spec": spec.__dict__, "images": records}
    (out / "synthetic.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    return manifest
