"""Query/exemplar pairing and the direct and contrastive training loops."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, NonFiniteError, ValidationError
from .model import BackboneSpec, Mode, ModelBundle, build_bundle, fuse
from .preprocessing import OverlapSample, PreprocessorKind, Resize, SamplerSpec

log = logging.getLogger(__name__)

# seed-stream tags; keep init and pairing draws independent of each other
_PAIR_STREAM = 1
_SHUFFLE_STREAM = 2


class Arm(str, Enum):
    FR = "FR"
    FR_PS = "FR_PS"
    FR_CR = "FR_CR"
    FR_PSCR = "FR_PSCR"

    @property
    def mode(self) -> Mode:
        return Mode.CONTRASTIVE if self in (Arm.FR_CR, Arm.FR_PSCR) else Mode.DIRECT

    @property
    def patch_sampling(self) -> bool:
        return self in (Arm.FR_PS, Arm.FR_PSCR)

    def default_preprocessor(self, sampler: SamplerSpec, resize_target: int) -> PreprocessorKind:
        return OverlapSample(sampler) if self.patch_sampling else Resize(resize_target)


@dataclass
class ScoredSet:
    """Model inputs (images or feature keys) aligned with one score per item."""

    inputs: list
    scores: np.ndarray
    keys: list[str] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.inputs) != self.scores.size:
            raise ValidationError(f"{len(self.inputs)} inputs but {self.scores.size} scores")
        if self.keys is None:
            self.keys = [str(i) for i in range(len(self.inputs))]

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class PairBatch:
    query_index: list[int]
    exemplar_index: list[int]
    queries: list
    exemplars: list
    query_scores: np.ndarray
    exemplar_scores: np.ndarray

    def __post_init__(self):
        if len(self.query_index) != len(self.exemplar_index):
            raise ValidationError("query and exemplar lists differ in length")
        for q, e in zip(self.query_index, self.exemplar_index):
            if q == e:
                raise ValidationError(f"self-pair on item {q}")

    def __len__(self) -> int:
        return len(self.query_index)

    @property
    def targets(self) -> np.ndarray:
        return np.asarray(self.query_scores) - np.asarray(self.exemplar_scores)


@dataclass
class DirectBatch:
    index: list[int]
    inputs: list
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.index)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    adam: T.AdamConfig = field(default_factory=T.AdamConfig)
    arm: Arm = Arm.FR_PSCR
    exemplars_per_query: int = 1
    patience: int = 20
    freeze_backbone: bool = False

    def __post_init__(self):
        self.arm = Arm(self.arm)
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.exemplars_per_query < 1:
            raise ValidationError("exemplars_per_query must be >= 1")
        if self.patience < 0:
            raise ValidationError("patience must be >= 0")


def pair_indices(n: int, seed: int, epoch: int, exemplars_per_query: int = 1) -> list[tuple[int, int]]:
    """Every item is a query once per epoch (times ``exemplars_per_query``), in shuffled order."""
    if n < 2:
        raise ValidationError(f"pairing needs at least 2 training items, got {n}")
    if exemplars_per_query > n - 1:
        raise ValidationError(f"exemplars_per_query {exemplars_per_query} exceeds the {n - 1} candidates")
    rng = np.random.default_rng([seed, _PAIR_STREAM, epoch])
    pairs = []
    for q in rng.permutation(n):
        q = int(q)
        draws = rng.choice(n - 1, size=exemplars_per_query, replace=False)
        for e in draws:
            e = int(e)
            pairs.append((q, e + 1 if e >= q else e))
    return pairs


def make_pairs(train_set: ScoredSet, seed: int, epoch: int, *, batch_size: int = 8,
               exemplars_per_query: int = 1) -> Iterator[PairBatch]:
    pairs = pair_indices(len(train_set), seed, epoch, exemplars_per_query)
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        qi = [q for q, _ in chunk]
        ei = [e for _, e in chunk]
        yield PairBatch(qi, ei, [train_set.inputs[i] for i in qi], [train_set.inputs[i] for i in ei],
                        train_set.scores[qi], train_set.scores[ei])


def direct_batches(train_set: ScoredSet, seed: int, epoch: int, *,
                   batch_size: int = 8) -> Iterator[DirectBatch]:
    order = np.random.default_rng([seed, _SHUFFLE_STREAM, epoch]).permutation(len(train_set))
    for start in range(0, len(order), batch_size):
        idx = [int(i) for i in order[start:start + batch_size]]
        yield DirectBatch(idx, [train_set.inputs[i] for i in idx], train_set.scores[idx])


def _contrastive(batch: PairBatch, bundle: ModelBundle, backward: bool, train_backbone: bool):
    if bundle.mode is not Mode.CONTRASTIVE:
        raise ConfigurationError("contrastive loss needs a contrastive bundle")
    b = len(batch)
    feats, cache = bundle.encode(list(batch.queries) + list(batch.exemplars))
    fused = fuse(feats[:b], feats[b:])
    pred, hcache = bundle.head.forward(fused)
    loss, dpred = T.mse_loss(pred, batch.targets)
    if backward:
        dfused = bundle.head.backward(dpred, hcache)
        if train_backbone:
            d = feats.shape[1]
            bundle.encode_backward(np.concatenate([dfused[:, :d], dfused[:, d:]]), cache)
    return loss, (pred - batch.targets) ** 2


def _direct(batch: DirectBatch, bundle: ModelBundle, backward: bool, train_backbone: bool):
    if bundle.mode is not Mode.DIRECT:
        raise ConfigurationError("direct loss needs a direct-mode bundle")
    feats, cache = bundle.encode(batch.inputs)
    pred, hcache = bundle.head.forward(feats)
    loss, dpred = T.mse_loss(pred, batch.scores)
    if backward:
        dfeats = bundle.head.backward(dpred, hcache)
        if train_backbone:
            bundle.encode_backward(dfeats, cache)
    return loss, (pred - batch.scores) ** 2


def contrastive_loss(batch: PairBatch, bundle: ModelBundle, *, backward: bool = False) -> float:
    """Mean of ``(predicted delta - (s_q - s_e))**2``; accumulates grads when ``backward``."""
    return _contrastive(batch, bundle, backward, True)[0]


def direct_loss(batch: DirectBatch, bundle: ModelBundle, *, backward: bool = False) -> float:
    return _direct(batch, bundle, backward, True)[0]


@dataclass
class TrainResult:
    bundle: ModelBundle
    history: list[float]
    stopped_early: bool = False


def train(train_set: ScoredSet, cfg: TrainConfig, *, backbone: BackboneSpec | None = None,
          preprocessor: PreprocessorKind | None = None, sampler: SamplerSpec | None = None,
          resize_target: int = 32, head_hidden: int = 64, features=None,
          bundle: ModelBundle | None = None) -> TrainResult:
    """Seeded training of one arm; history holds the mean per-sample loss of each epoch.

    The preprocessor defaults to the arm's choice: overlap sampling with
    ``sampler`` for patch-sampling arms, bilinear resize otherwise.
    """
    if len(train_set) < 2:
        raise ValidationError(f"training needs at least 2 items, got {len(train_set)}")
    arm = cfg.arm
    if bundle is None:
        if preprocessor is None:
            sampler = sampler or SamplerSpec((0, 16, 32), 32)
            preprocessor = arm.default_preprocessor(sampler, resize_target)
        bundle = build_bundle(backbone or BackboneSpec(), preprocessor, arm.mode, seed=cfg.seed,
                              head_hidden=head_hidden, features=features)
    elif bundle.mode is not arm.mode:
        raise ConfigurationError(f"bundle mode {bundle.mode.value} does not fit arm {arm.value}")
    train_backbone = bundle.backbone.trainable and not cfg.freeze_backbone
    params = bundle.parameters() if train_backbone else bundle.head.parameters()

    history: list[float] = []
    best = math.inf
    stale = 0
    stopped = False
    for epoch in range(cfg.epochs):
        if arm.mode is Mode.CONTRASTIVE:
            batches = make_pairs(train_set, cfg.seed, epoch, batch_size=cfg.batch_size,
                                 exemplars_per_query=cfg.exemplars_per_query)
            step = _contrastive
        else:
            batches = direct_batches(train_set, cfg.seed, epoch, batch_size=cfg.batch_size)
            step = _direct
        sq_errors: list[float] = []
        for b, batch in enumerate(batches):
            T.zero_grads(params)
            with np.errstate(invalid="ignore", over="ignore"):  # reported just below instead
                loss, per_sample = step(batch, bundle, True, train_backbone)
            if not math.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            T.adam_step(params, cfg.adam)
            sq_errors.extend(per_sample.tolist())
        epoch_loss = math.fsum(sq_errors) / len(sq_errors)
        history.append(epoch_loss)
        log.debug("epoch %d loss %.6g", epoch, epoch_loss)
        if epoch_loss < best:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if cfg.patience and stale >= cfg.patience:
                log.info("early stop after epoch %d (no improvement for %d epochs)", epoch, stale)
                stopped = True
                break
    T.zero_grads(bundle.parameters())
    return TrainResult(bundle, history, stopped)
