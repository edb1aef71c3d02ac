"""Multi-exemplar voting and split-level evaluation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import metrics
from .errors import ConfigurationError, ValidationError
from .model import Mode, ModelBundle, extract_image_feature, fuse, regress
from .training import ScoredSet


class Selection(str, Enum):
    UNIFORM = "uniform"
    STRATIFIED = "stratified"


@dataclass
class VoteConfig:
    num_exemplars: int = 10
    exemplar_seed: int = 0
    selection: Selection = Selection.UNIFORM
    shared: bool = False  # one exemplar set for every test image instead of a per-image draw

    def __post_init__(self):
        self.selection = Selection(self.selection)
        if self.num_exemplars < 1:
            raise ValidationError(f"num_exemplars must be >= 1, got {self.num_exemplars}")


def reconstruct_score(delta: float, exemplar_score: float) -> float:
    return delta + exemplar_score


def select_exemplars(scores: np.ndarray, cfg: VoteConfig, image_key: int = 0,
                     exclude: int | None = None) -> np.ndarray:
    """Seeded exemplar indices into ``scores``; ``exclude`` drops one candidate (self)."""
    scores = np.asarray(scores, dtype=np.float64)
    candidates = np.array([i for i in range(scores.size) if i != exclude], dtype=np.int64)
    n = cfg.num_exemplars
    if n > candidates.size:
        raise ValidationError(f"num_exemplars {n} exceeds the {candidates.size} available exemplars")
    seed = [cfg.exemplar_seed] if cfg.shared else [cfg.exemplar_seed, int(image_key)]
    rng = np.random.default_rng(seed)
    if cfg.selection is Selection.UNIFORM:
        return rng.choice(candidates, size=n, replace=False)
    # stratified: one uniform pick from each of n score-quantile bins
    ordered = candidates[np.lexsort((candidates, scores[candidates]))]
    return np.array([b[rng.integers(b.size)] for b in np.array_split(ordered, n)], dtype=np.int64)


@dataclass
class VoteResult:
    score: float
    indices: np.ndarray
    exemplar_scores: np.ndarray
    deltas: np.ndarray

    @property
    def terms(self) -> np.ndarray:
        return self.deltas + self.exemplar_scores


def _vote_from_features(test_feat: np.ndarray, ex_feats: np.ndarray, ex_scores: np.ndarray,
                        indices: np.ndarray, bundle: ModelBundle) -> VoteResult:
    deltas = np.array([regress(fuse(test_feat, f), bundle.head) for f in ex_feats])
    terms = [reconstruct_score(float(d), float(s)) for d, s in zip(deltas, ex_scores)]
    score = math.fsum(terms) / len(terms)
    return VoteResult(score, np.asarray(indices), np.asarray(ex_scores, dtype=np.float64), deltas)


def vote(test_input, train_set: ScoredSet, bundle: ModelBundle, cfg: VoteConfig, *,
         image_key: int = 0, exclude: int | None = None) -> VoteResult:
    """Mean of ``delta_j + s_j`` over the selected exemplars, with per-exemplar audit terms."""
    if bundle.mode is not Mode.CONTRASTIVE:
        raise ConfigurationError("voting needs a contrastive bundle")
    idx = select_exemplars(train_set.scores, cfg, image_key, exclude)
    test_feat = extract_image_feature(test_input, bundle)
    ex_feats = np.stack([extract_image_feature(train_set.inputs[i], bundle) for i in idx])
    return _vote_from_features(test_feat, ex_feats, train_set.scores[idx], idx, bundle)


@dataclass
class DimensionResult:
    truths: np.ndarray
    preds: np.ndarray
    audit: list[VoteResult] | None
    srcc: float
    plcc: float


@dataclass
class EvalReport:
    keys: list[str]
    dims: list[str]
    results: dict[str, DimensionResult]
    num_exemplars: int = 0

    def summary_rows(self) -> list[tuple[str, float, float]]:
        return [(d, self.results[d].srcc, self.results[d].plcc) for d in self.dims]

    def summary_table(self) -> str:
        lines = [f"{'dimension':<16} {'SRCC':>8} {'PLCC':>8}"]
        for d, s, p in self.summary_rows():
            lines.append(f"{d:<16} {s:>8.4f} {p:>8.4f}")
        return "\n".join(lines)

    def header(self) -> list[str]:
        cols = ["path"]
        for d in self.dims:
            cols += [f"truth_{d}", f"pred_{d}"]
        for d in self.dims:
            if self.results[d].audit is not None:
                for j in range(self.num_exemplars):
                    cols += [f"{d}_e{j}_index", f"{d}_e{j}_score", f"{d}_e{j}_delta"]
        return cols

    def write_csv(self, path) -> None:
        """One row per image, then ``SRCC`` and ``PLCC`` rows holding metrics in the pred columns."""
        cols = self.header()
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i, key in enumerate(self.keys):
                row = [key]
                for d in self.dims:
                    r = self.results[d]
                    row += [repr(float(r.truths[i])), repr(float(r.preds[i]))]
                for d in self.dims:
                    r = self.results[d]
                    if r.audit is None:
                        continue
                    v = r.audit[i]
                    for j in range(self.num_exemplars):
                        row += [str(int(v.indices[j])), repr(float(v.exemplar_scores[j])),
                                repr(float(v.deltas[j]))]
                w.writerow(row)
            for label in ("SRCC", "PLCC"):
                row = [label]
                for d in self.dims:
                    value = self.results[d].srcc if label == "SRCC" else self.results[d].plcc
                    row += ["", repr(float(value))]
                row += [""] * (len(cols) - len(row))
                w.writerow(row)


def read_report_columns(path) -> dict[str, list]:
    """Per-image columns of a report CSV, summary rows dropped."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    rows = [r for r in rows if r["path"] not in ("SRCC", "PLCC")]
    return {k: [r[k] for r in rows] for k in (rows[0].keys() if rows else [])}


def _encode_each(inputs: Sequence, bundle: ModelBundle) -> np.ndarray:
    # one image per backbone call keeps features independent of batch composition
    return np.stack([extract_image_feature(x, bundle) for x in inputs])


@dataclass
class LabeledSet:
    """Model inputs with keys and a ``[n, len(dims)]`` score matrix."""

    inputs: list
    keys: list[str]
    scores: np.ndarray
    dims: list[str]

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(len(self.keys), len(self.dims))
        if len(self.inputs) != len(self.keys):
            raise ValidationError(f"{len(self.inputs)} inputs but {len(self.keys)} keys")

    def __len__(self) -> int:
        return len(self.keys)

    def scored(self, dim: str | int) -> ScoredSet:
        k = dim if isinstance(dim, int) else self.dims.index(dim)
        return ScoredSet(list(self.inputs), self.scores[:, k], list(self.keys))


def evaluate_split(test: LabeledSet, train: LabeledSet, bundles: Mapping[str, ModelBundle],
                   cfg: VoteConfig | None = None, *, batch_size: int = 20,
                   self_exclude: bool = False) -> EvalReport:
    """Score every test item per dimension and compute SRCC/PLCC.

    Contrastive bundles vote against exemplars from ``train``; direct bundles
    regress directly. With ``self_exclude`` the test set must be the training
    set and each item is barred from voting for itself.
    """
    cfg = cfg or VoteConfig()
    if batch_size < 1:
        raise ValidationError(f"batch_size must be >= 1, got {batch_size}")
    if list(test.dims) != list(train.dims):
        raise ValidationError(f"dimension mismatch: test {test.dims} vs train {train.dims}")
    if self_exclude:
        if list(test.keys) != list(train.keys):
            raise ValidationError("self-excluding evaluation needs the test set to be the training set")
    else:
        leaked = set(test.keys) & set(train.keys)
        if leaked:
            raise ValidationError(f"train/test overlap on {len(leaked)} items, e.g. {sorted(leaked)[0]}")
    missing = [d for d in test.dims if d not in bundles]
    if missing:
        raise ConfigurationError(f"no model for dimension(s) {missing}")
    results: dict[str, DimensionResult] = {}
    n = len(test)
    for k, dim in enumerate(test.dims):
        bundle = bundles[dim]
        truths = test.scores[:, k]
        if bundle.mode is Mode.DIRECT:
            preds = []
            for start in range(0, n, batch_size):
                chunk = test.inputs[start:start + batch_size]
                preds.extend(float(regress(f, bundle.head)) for f in _encode_each(chunk, bundle))
            preds = np.array(preds)
            audit = None
        else:
            ex_scores = train.scores[:, k]
            selections = [select_exemplars(ex_scores, cfg, i, i if self_exclude else None)
                          for i in range(n)]
            # exemplar features are computed once and reused across test items
            needed = sorted({int(j) for sel in selections for j in sel})
            cache = dict(zip(needed, _encode_each([train.inputs[j] for j in needed], bundle)))
            audit = []
            for start in range(0, n, batch_size):
                chunk = range(start, min(start + batch_size, n))
                feats = _encode_each([test.inputs[i] for i in chunk], bundle)
                for i, f in zip(chunk, feats):
                    sel = selections[i]
                    audit.append(_vote_from_features(
                        f, np.stack([cache[int(j)] for j in sel]), ex_scores[sel], sel, bundle))
            preds = np.array([v.score for v in audit])
        results[dim] = DimensionResult(truths, preds, audit,
                                       metrics.srcc(truths, preds), metrics.plcc(truths, preds))
    return EvalReport(list(test.keys), list(test.dims), results, cfg.num_exemplars)
