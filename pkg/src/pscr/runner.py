"""Run orchestration shared by the train, eval and ablate subcommands."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import checkpoint, data
from .config import RunConfig
from .errors import ConfigurationError, ValidationError
from .inference import EvalReport, LabeledSet, Selection, VoteConfig, evaluate_split
from .model import BackboneSpec, ModelBundle, bundle_from_description
from .preprocessing import PreprocessorKind, SamplerSpec, format_preprocessor, parse_preprocessor
from .tensor import AdamConfig
from .training import Arm, TrainConfig, train

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.pscr"
RUN_MANIFEST_NAME = "run_manifest.json"


@dataclass
class RunData:
    manifest: data.Manifest
    train_idx: list[int]
    test_idx: list[int]
    features: dict | None

    @property
    def split_hash(self) -> str:
        blob = json.dumps([self.train_idx, self.test_idx]).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def labeled(self, indices) -> LabeledSet:
        sub = self.manifest.subset(indices)
        inputs = sub.paths if self.features is not None else sub.images()
        return LabeledSet(list(inputs), list(sub.paths), sub.scores, list(sub.dims))


def validate_paths(cfg: RunConfig) -> None:
    if not cfg["data.manifest"]:
        raise ConfigurationError("data.manifest is not set")
    if not Path(cfg["data.manifest"]).is_file():
        raise ConfigurationError(f"data.manifest: file not found: {cfg['data.manifest']}")
    if cfg["backbone.kind"] == "precomputed":
        if not cfg["data.features"] or not Path(cfg["data.features"]).is_file():
            raise ConfigurationError(f"data.features: file not found: {cfg['data.features']!r}")


def load_run_data(cfg: RunConfig) -> RunData:
    validate_paths(cfg)
    precomputed = cfg["backbone.kind"] == "precomputed"
    manifest = data.load_manifest(cfg["data.manifest"], check_files=not precomputed)
    features = data.load_features(cfg["data.features"]) if precomputed else None
    train_idx, test_idx = data.split_indices(len(manifest), cfg["data.split_ratio"], cfg["seed"])
    return RunData(manifest, train_idx, test_idx, features)


def backbone_spec(cfg: RunConfig) -> BackboneSpec:
    return BackboneSpec(cfg["backbone.kind"], cfg["backbone.channels"], cfg["backbone.feature_dim"])


def train_config(cfg: RunConfig, arm: Arm | None = None) -> TrainConfig:
    adam = AdamConfig(cfg["train.learning_rate"], cfg["train.weight_decay"], cfg["train.beta1"],
                      cfg["train.beta2"], cfg["train.epsilon"])
    return TrainConfig(
        batch_size=cfg["train.batch_size"], epochs=cfg["train.epochs"], seed=cfg["seed"], adam=adam,
        arm=arm or Arm(cfg["train.arm"]), exemplars_per_query=cfg["train.exemplars_per_query"],
        patience=cfg["train.patience"], freeze_backbone=cfg["train.freeze_backbone"],
    )


def vote_config(cfg: RunConfig) -> VoteConfig:
    return VoteConfig(cfg["vote.num_exemplars"], cfg["vote.seed"], Selection(cfg["vote.selection"]),
                      cfg["vote.shared"])


def resolve_preprocessor(cfg: RunConfig, arm: Arm) -> PreprocessorKind:
    if cfg["preprocess.override"]:
        return parse_preprocessor(cfg["preprocess.override"])
    sampler = SamplerSpec(cfg["sampler.start_indices"], cfg["sampler.window"])
    return arm.default_preprocessor(sampler, cfg["preprocess.resize_target"])


def train_dims(cfg: RunConfig, run: RunData, arm: Arm | None = None,
               preprocessor: PreprocessorKind | None = None):
    """One model per score dimension, each trained on the training split."""
    tcfg = train_config(cfg, arm)
    pre = preprocessor or resolve_preprocessor(cfg, tcfg.arm)
    labeled = run.labeled(run.train_idx)
    bundles, histories = {}, {}
    for k, dim in enumerate(labeled.dims):
        log.info("training %s on dimension %s (%d items, %s)", tcfg.arm.value, dim, len(labeled),
                 format_preprocessor(pre))
        result = train(labeled.scored(k), tcfg, backbone=backbone_spec(cfg), preprocessor=pre,
                       head_hidden=cfg["head.hidden"], features=run.features)
        bundles[dim] = result.bundle
        histories[dim] = result.history
    return bundles, histories


def save_checkpoint(path, bundles: dict[str, ModelBundle], arm: Arm) -> None:
    first = next(iter(bundles.values()))
    header = {"format": "pscr", "arm": arm.value, "dims": list(bundles), "model": first.describe()}
    tensors = {}
    for dim, bundle in bundles.items():
        for name, value in bundle.state().items():
            tensors[f"{dim}/{name}"] = value
    checkpoint.save(path, header, tensors)


def load_checkpoint(path, features: dict | None = None) -> tuple[dict, dict[str, ModelBundle]]:
    header, tensors = checkpoint.load(path)
    bundles = {}
    for dim in header["dims"]:
        bundle = bundle_from_description(header["model"], features=features)
        prefix = f"{dim}/"
        bundle.load_state({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        bundles[dim] = bundle
    return header, bundles


def write_train_outputs(out: Path, cfg: RunConfig, run: RunData, bundles, histories, arm: Arm) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / CHECKPOINT_NAME, bundles, arm)
    manifest = {
        "seed": cfg["seed"],
        "data_manifest": str(Path(cfg["data.manifest"]).resolve()),
        "data_features": str(Path(cfg["data.features"]).resolve()) if cfg["data.features"] else "",
        "split": {"ratio": cfg["data.split_ratio"], "train": run.train_idx, "test": run.test_idx,
                  "hash": run.split_hash},
        "train_paths": [run.manifest.paths[i] for i in run.train_idx],
        "config": cfg.dump(),
        "history": histories,
    }
    (out / RUN_MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (out / "config.effective").write_text(cfg.dump())
    dims = list(histories)
    lines = ["epoch," + ",".join(dims)]
    longest = max(len(h) for h in histories.values())
    for e in range(longest):
        cells = [repr(histories[d][e]) if e < len(histories[d]) else "" for d in dims]
        lines.append(f"{e + 1}," + ",".join(cells))
    (out / "loss_log.csv").write_text("\n".join(lines) + "\n")


def load_run_manifest(checkpoint_path) -> dict:
    path = Path(checkpoint_path).parent / RUN_MANIFEST_NAME
    if not path.is_file():
        raise ConfigurationError(f"run manifest not found next to checkpoint: {path}")
    return json.loads(path.read_text())


def evaluate_run(checkpoint_path, *, manifest_path: str | None = None, split: str = "test",
                 vote: VoteConfig | None = None, batch_size: int = 20) -> EvalReport:
    """Evaluate a trained checkpoint; exemplars always come from the run's training split."""
    run_info = load_run_manifest(checkpoint_path)
    features = data.load_features(run_info["data_features"]) if run_info["data_features"] else None
    _, bundles = load_checkpoint(checkpoint_path, features)
    source = data.load_manifest(run_info["data_manifest"], check_files=features is None)
    train_idx = run_info["split"]["train"]
    if [source.paths[i] for i in train_idx] != run_info["train_paths"]:
        raise ValidationError("data manifest changed since training; split indices no longer match")
    run = RunData(source, train_idx, run_info["split"]["test"], features)
    train_set = run.labeled(train_idx)
    if manifest_path:
        other = data.load_manifest(manifest_path, check_files=features is None)
        if other.dims != source.dims:
            raise ValidationError(f"manifest dimensions {other.dims} differ from checkpoint {source.dims}")
        train_files = {(source.root / p).resolve() for p in train_set.keys}
        leaked = [p for p in other.paths if (other.root / p).resolve() in train_files]
        if leaked:
            raise ValidationError(f"train/test leakage: {len(leaked)} images were used in training, "
                                  f"e.g. {leaked[0]}")
        ext = RunData(other, [], list(range(len(other))), features)
        test_set = ext.labeled(ext.test_idx)
        return evaluate_split(test_set, train_set, bundles, vote, batch_size=batch_size)
    if split == "train":
        return evaluate_split(train_set, train_set, bundles, vote, batch_size=batch_size,
                              self_exclude=True)
    if split != "test":
        raise ValidationError(f"split must be 'train' or 'test', got {split!r}")
    return evaluate_split(run.labeled(run.test_idx), train_set, bundles, vote, batch_size=batch_size)


@dataclass
class AblationCell:
    arm: Arm
    preprocessor: PreprocessorKind

    @property
    def label(self) -> str:
        return f"{self.arm.value}|{format_preprocessor(self.preprocessor)}"


def plan_cells(cfg: RunConfig) -> list[AblationCell]:
    arms = [Arm(a) for a in cfg["ablate.arms"]]
    if not arms:
        raise ConfigurationError("ablate.arms is empty")
    if cfg["ablate.preprocessors"]:
        pres = [parse_preprocessor(p) for p in cfg["ablate.preprocessors"]]
        return [AblationCell(a, p) for a in arms for p in pres]
    starts = [parse_preprocessor(f"overlap:{s}") for s in cfg["ablate.start_lists"]]
    cells = []
    for arm in arms:
        if arm.patch_sampling and starts:
            cells.extend(AblationCell(arm, p) for p in starts)
        else:
            cells.append(AblationCell(arm, resolve_preprocessor(cfg, arm)))
    return cells


def run_ablation(cfg: RunConfig) -> tuple[list[dict], list[str]]:
    """Train and evaluate every cell on one shared split; failures are recorded, not raised."""
    run = load_run_data(cfg)
    cells = plan_cells(cfg)
    dims = list(run.manifest.dims)
    train_set = run.labeled(run.train_idx)
    test_set = run.labeled(run.test_idx)
    rows, failures = [], []
    for cell in cells:
        row = {"arm": cell.arm.value, "preprocessor": format_preprocessor(cell.preprocessor),
               "split_hash": run.split_hash, "error": ""}
        try:
            bundles, histories = train_dims(cfg, run, cell.arm, cell.preprocessor)
            report = evaluate_split(test_set, train_set, bundles, vote_config(cfg),
                                    batch_size=cfg["eval.batch_size"])
            for dim, s, p in report.summary_rows():
                row[f"{dim}_SRCC"] = s
                row[f"{dim}_PLCC"] = p
            row["epochs"] = max(len(h) for h in histories.values())
        except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the plan
            log.exception("ablation cell %s failed", cell.label)
            row["error"] = f"{type(exc).__name__}: {exc}"
            failures.append(cell.label)
        rows.append(row)
    for row in rows:
        for dim in dims:
            row.setdefault(f"{dim}_SRCC", float("nan"))
            row.setdefault(f"{dim}_PLCC", float("nan"))
        row.setdefault("epochs", 0)
    return rows, failures


def ablation_columns(rows: list[dict]) -> list[str]:
    metric_cols = [k for k in rows[0] if k.endswith("_SRCC") or k.endswith("_PLCC")]
    return ["arm", "preprocessor", *metric_cols, "epochs", "split_hash", "error"]


def format_ablation_table(rows: list[dict]) -> str:
    cols = ablation_columns(rows)
    metric_cols = [c for c in cols if c.endswith("_SRCC") or c.endswith("_PLCC")]

    def cell(row, c):
        v = row[c]
        return f"{v:.4f}" if c in metric_cols else str(v)

    widths = {c: max(len(c), *(len(cell(r, c)) for r in rows)) for c in cols if c != "error"}
    lines = ["  ".join(c.ljust(widths[c]) for c in widths)]
    for r in rows:
        line = "  ".join(cell(r, c).ljust(widths[c]) for c in widths)
        if r["error"]:
            line += f"  FAILED: {r['error']}"
        lines.append(line.rstrip())
    return "\n".join(lines)


def write_ablation_csv(rows: list[dict], path) -> None:
    cols = ablation_columns(rows)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
