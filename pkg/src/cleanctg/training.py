"""Dataset assembly and the two-stage training protocol.

Stage 1 trains the detector with multilabel BCE. Stage 2 freezes it, caches
its gates and fused token features, and trains the reconstructor with mask
BCE plus reconstruction MSE.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .detector import ArtefactDetector, DetectorConfig, gates_from_probs
from .metrics import UndefinedMetricError, auroc
from .noise import CLASS_NAMES, N_CLASSES, Artefact, CorruptionRecord, InjectionConfig, inject
from .numeric import ops
from .numeric.state import AdamMoments, ModelState, adam_step, decode_checkpoint, encode_checkpoint
from .reconstructor import LOCATED_CLASSES, MATH_FACTORS, ReconstructorConfig, SignalReconstructor, slice_context
from .signal import SEGMENT_LEN, SLICE_LEN, SLICES_PER_SEGMENT, Segment10, normalize_array


class TrainingError(RuntimeError):
    pass


class StageOrderError(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "detector"
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    test_fraction: float = 0.05
    val_fraction: float = 0.10
    lambda_bce: float = 1.0
    lambda_mse: float = 1.0
    seed: int = 0
    max_steps: int | None = None
    eval_batch: int = 256
    dtype: str = "float32"
    # stage 1: up-weight the positives of rare classes by sqrt(negatives / positives)
    balance_classes: bool = True
    # stage 1: pick per-class gate thresholds on the validation split afterwards
    calibrate_thresholds: bool = False

    def __post_init__(self):
        if self.stage not in ("detector", "reconstructor"):
            raise ops.ConfigError(f"unknown stage {self.stage!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ops.ConfigError("lr, batch_size and max_epochs must be positive")
        if not 0.0 < self.test_fraction < 1.0 or not 0.0 < self.val_fraction < 1.0:
            raise ops.ConfigError("split fractions must lie in (0, 1)")

    @property
    def torch_dtype(self) -> torch.dtype:
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# dataset

_ARRAYS = ("x1", "m1", "x10", "m10", "u10", "offset", "labels", "masks", "clean1", "parent")


@dataclass
class Dataset:
    """One row per 1-minute slice; x10/m10 are the corrupted parent segment."""

    x1: np.ndarray       # (N, 60) normalized corrupted slice
    m1: np.ndarray       # (N, 60) missing flags
    x10: np.ndarray      # (N, 600)
    m10: np.ndarray      # (N, 600)
    u10: np.ndarray      # (N, 600) uint8 union of the parent's corruption masks
    offset: np.ndarray   # (N,) slice start within the parent
    labels: np.ndarray   # (N, 5) uint8
    masks: np.ndarray    # (N, 5, 60) uint8
    clean1: np.ndarray   # (N, 60) normalized clean target
    parent: np.ndarray   # (N,) parent segment index
    parent_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.x1.shape[0]

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return replace(self, **{k: getattr(self, k)[idx] for k in _ARRAYS})

    def to_bytes(self) -> bytes:
        return encode_checkpoint({k: getattr(self, k) for k in _ARRAYS})

    @classmethod
    def from_bytes(cls, blob: bytes, parent_ids: Sequence[str] = ()) -> Dataset:
        arrays = decode_checkpoint(blob)
        missing = set(_ARRAYS) - set(arrays)
        if missing:
            raise ValueError(f"dataset blob lacks {sorted(missing)}")
        return cls(**{k: arrays[k] for k in _ARRAYS}, parent_ids=list(parent_ids))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        Path(str(path) + ".json").write_text(json.dumps({"parent_ids": self.parent_ids, "examples": len(self)}) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> Dataset:
        path = Path(path)
        side = Path(str(path) + ".json")
        ids = json.loads(side.read_text())["parent_ids"] if side.exists() else []
        return cls.from_bytes(path.read_bytes(), ids)


def segment_seed(base: int, index: int) -> int:
    """Per-segment injection seed, independent of how segments are batched."""
    return int(np.random.SeedSequence([base, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def _inject_one(args) -> CorruptionRecord:
    seg, cfg = args
    return inject(seg, cfg)


def inject_all(segments: Sequence[Segment10], cfg: InjectionConfig, jobs: int = 1) -> list[CorruptionRecord]:
    work = [(seg, cfg.with_seed(segment_seed(cfg.seed, i))) for i, seg in enumerate(segments)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            return list(pool.map(_inject_one, work, chunksize=32))
    return [_inject_one(w) for w in work]


def dataset_from_records(records: Sequence[CorruptionRecord]) -> Dataset:
    n = len(records)
    k = SLICES_PER_SEGMENT
    corrupted = np.stack([r.corrupted for r in records])
    clean = np.stack([r.clean for r in records])
    masks = np.stack([r.masks for r in records])  # (n, 5, 600)
    x10, m10 = normalize_array(corrupted)
    c10, _ = normalize_array(clean)
    x1 = x10.reshape(n * k, SLICE_LEN)
    m1 = m10.reshape(n * k, SLICE_LEN)
    sl_masks = masks.reshape(n, N_CLASSES, k, SLICE_LEN).transpose(0, 2, 1, 3).reshape(n * k, N_CLASSES, SLICE_LEN)
    return Dataset(
        x1=x1.copy(),
        m1=m1.copy(),
        x10=np.repeat(x10, k, axis=0),
        m10=np.repeat(m10, k, axis=0),
        u10=np.repeat(masks.any(axis=1).astype(np.uint8), k, axis=0),
        offset=np.tile(np.arange(k, dtype=np.int64) * SLICE_LEN, n),
        labels=sl_masks.any(axis=2).astype(np.uint8),
        masks=sl_masks.astype(np.uint8),
        clean1=c10.reshape(n * k, SLICE_LEN).copy(),
        parent=np.repeat(np.arange(n, dtype=np.int64), k),
        parent_ids=[r.id for r in records],
    )


def build_dataset(segments: Sequence[Segment10], cfg: InjectionConfig = InjectionConfig(),
                  jobs: int = 1) -> Dataset:
    """Inject each 10-minute segment once and cut it into ten labelled examples."""
    if any(len(s.values) != SEGMENT_LEN for s in segments):
        raise ValueError(f"segments must have {SEGMENT_LEN} samples")
    return dataset_from_records(inject_all(segments, cfg, jobs))


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split_by_parent(parent: np.ndarray, cfg: TrainConfig) -> Split:
    """Example indices for train/val/test with every parent in exactly one part."""
    parents = np.unique(parent)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    order = rng.permutation(parents)
    n_test = max(1, int(round(cfg.test_fraction * parents.size)))
    rest = order[n_test:]
    n_val = max(1, int(round(cfg.val_fraction * rest.size)))
    groups = (rest[n_val:], rest[:n_val], order[:n_test])
    idx = [np.flatnonzero(np.isin(parent, np.sort(g))) for g in groups]
    return Split(*idx)


# ---------------------------------------------------------------------------
# optimisation loop


@dataclass
class TrainResult:
    state: ModelState
    history: list[dict]
    best_epoch: int
    best_score: float
    first_loss: float = math.nan
    last_loss: float = math.nan


def _t(a, dtype) -> torch.Tensor:
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def _check_finite(loss: torch.Tensor, model: torch.nn.Module, epoch: int, step: int) -> None:
    if torch.isfinite(loss):
        return
    norms = {n: float(p.detach().norm()) for n, p in model.named_parameters()}
    worst = sorted(norms.items(), key=lambda kv: -kv[1] if math.isfinite(kv[1]) else -math.inf)[:3]
    nonfinite = [n for n, v in norms.items() if not math.isfinite(v)]
    raise TrainingError(
        f"loss became {float(loss.detach())} at epoch {epoch} step {step}; "
        f"non-finite parameters: {nonfinite[:5]}; largest norms: {worst}"
    )


def _snapshot(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in model.named_parameters()}


def _fit(model: torch.nn.Module, n_train: int, batch_loss: Callable[[np.ndarray], torch.Tensor],
         validate: Callable[[], dict], score_key: str, cfg: TrainConfig,
         frozen: Sequence[str] = (), log: Callable[[str], None] | None = None) -> TrainResult:
    """Minibatch Adam with early stopping on validation loss.

    The returned parameters are those of the epoch with the best `score_key`
    (higher is better); validation loss breaks ties and stands in when the
    score is undefined.
    """
    state = ModelState.from_module(model, frozen=frozen)
    moments = AdamMoments()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    history: list[dict] = []
    best = (-math.inf, -math.inf)
    best_params, best_epoch = _snapshot(model), 0
    best_val_loss, stale = math.inf, 0
    step, first_loss, last_loss = 0, math.nan, math.nan
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = rng.permutation(n_train)
        total, count = 0.0, 0
        for start in range(0, n_train, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = batch_loss(idx)
            step += 1
            _check_finite(loss, model, epoch, step)
            model.zero_grad(set_to_none=True)
            loss.backward()
            grads = {k: p.grad for k, p in model.named_parameters()}
            adam_step(state, grads, moments, cfg.lr)
            value = float(loss.detach())
            if step == 1:
                first_loss = value
            last_loss = value
            total += value * idx.size
            count += idx.size
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        val = validate()
        row = {"epoch": epoch, "steps": step, "train_loss": total / max(count, 1), **val}
        history.append(row)
        score = val.get(score_key, math.nan)
        key = (score if score is not None and math.isfinite(score) else -math.inf, -val["val_loss"])
        if key > best:
            best, best_params, best_epoch = key, _snapshot(model), epoch
        if log:
            log(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        if val["val_loss"] < best_val_loss:
            best_val_loss, stale = val["val_loss"], 0
        else:
            stale += 1
        if stale >= cfg.patience or (cfg.max_steps is not None and step >= cfg.max_steps):
            break
    with torch.no_grad():
        for k, p in model.named_parameters():
            p.copy_(best_params[k])
    model.eval()
    return TrainResult(ModelState.from_module(model, frozen=frozen), history, best_epoch,
                       best[0], first_loss, last_loss)


def macro_auroc(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean over classes whose AU-ROC is defined; NaN if none is."""
    vals = []
    for c in range(labels.shape[1]):
        try:
            vals.append(auroc(probs[:, c], labels[:, c]))
        except UndefinedMetricError:
            pass
    return float(np.mean(vals)) if vals else math.nan


# ---------------------------------------------------------------------------
# stage 1


def _detector_inputs(ds: Dataset, idx, dtype):
    return (_t(ds.x1[idx], dtype), _t(ds.m1[idx], dtype), _t(ds.x10[idx], dtype),
            _t(ds.m10[idx], dtype), torch.as_tensor(ds.offset[idx]))


@torch.no_grad()
def predict_detector(model: ArtefactDetector, ds: Dataset, batch: int = 256,
                     with_features: bool = False) -> tuple[np.ndarray, np.ndarray | None]:
    """Probabilities (N, 5) and optionally fused token features (N, 60, d)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    probs, feats = [], []
    for s in range(0, len(ds), batch):
        idx = np.arange(s, min(s + batch, len(ds)))
        out = model(*_detector_inputs(ds, idx, dtype))
        probs.append(out["probs"].double().numpy())
        if with_features:
            feats.append(out["fused"].numpy())
    return np.concatenate(probs), (np.concatenate(feats) if with_features else None)


def train_stage1(train: Dataset, val: Dataset, cfg: TrainConfig = TrainConfig(),
                 det_cfg: DetectorConfig = DetectorConfig(), log=None) -> tuple[ArtefactDetector, TrainResult]:
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("training and validation sets must be nonempty")
    torch.manual_seed(cfg.seed)
    dtype = cfg.torch_dtype
    model = ArtefactDetector(det_cfg).to(dtype)

    pos_weight = _t(positive_weights(train.labels) if cfg.balance_classes else np.ones(N_CLASSES), dtype)

    def batch_loss(idx):
        out = model(*_detector_inputs(train, idx, dtype))
        y = _t(train.labels[idx], dtype)
        return ops.bce_loss(out["probs"], y, 1.0 + y * (pos_weight - 1.0))

    def validate():
        probs, _ = predict_detector(model, val, cfg.eval_batch)
        loss = float(ops.bce_loss(torch.as_tensor(probs), torch.as_tensor(val.labels, dtype=torch.float64)))
        return {"val_loss": loss, "val_macro_auroc": macro_auroc(probs, val.labels)}

    result = _fit(model, len(train), batch_loss, validate, "val_macro_auroc", cfg, log=log)
    if cfg.calibrate_thresholds:
        probs, _ = predict_detector(model, val, cfg.eval_batch)
        model.cfg = replace(model.cfg, class_thresholds=calibrate_thresholds(probs, val.labels))
        if log:
            log("gate thresholds " + " ".join(f"{n}={t:.3g}" for n, t in zip(CLASS_NAMES, model.cfg.thresholds())))
    return model, result


def positive_weights(labels: np.ndarray, cap: float = 20.0) -> np.ndarray:
    """Per-class weight sqrt(negatives / positives) for positive labels, within [1, cap]."""
    pos = labels.sum(axis=0).astype(np.float64)
    neg = labels.shape[0] - pos
    with np.errstate(divide="ignore"):
        w = np.sqrt(neg / pos)
    return np.clip(np.nan_to_num(w, nan=1.0, posinf=cap), 1.0, cap)


THRESHOLD_GRID = np.round(np.arange(0.05, 0.5001, 0.01), 2)


def calibrate_thresholds(probs: np.ndarray, labels: np.ndarray, grid: np.ndarray = THRESHOLD_GRID) -> tuple[float, ...]:
    """Per-class threshold maximising sensitivity + specificity over `grid`.

    The grid stops at 0.5 because a missed gate leaves an artefact in place,
    whereas a false gate only adds a candidate the fusion can ignore. When
    several thresholds tie, the middle one is taken, which keeps a margin on
    both sides of a clean separation. A class without both labels keeps 0.5.
    """
    out = []
    for c in range(labels.shape[1]):
        y = labels[:, c].astype(bool)
        if y.all() or not y.any():
            out.append(0.5)
            continue
        pred = probs[:, c][:, None] > grid[None, :]
        j = pred[y].mean(axis=0) + (~pred[~y]).mean(axis=0)
        tied = np.flatnonzero(j == j.max())
        best = tied[tied.size // 2]
        out.append(float(grid[best]))
    return tuple(out)


# ---------------------------------------------------------------------------
# stage 2


@dataclass
class StageTwoInputs:
    """Frozen-detector outputs cached for every example."""

    fused: np.ndarray   # (N, 60, d)
    gates: np.ndarray   # (N, 5) bool
    probs: np.ndarray   # (N, 5)


def detector_outputs(detector: ArtefactDetector, ds: Dataset, batch: int = 256) -> StageTwoInputs:
    probs, fused = predict_detector(detector, ds, batch, with_features=True)
    return StageTwoInputs(fused, gates_from_probs(probs, detector.cfg.thresholds(), ds.m1 > 0.5), probs)


def stage2_loss(out: dict, masks_true, clean, cfg: TrainConfig) -> torch.Tensor:
    """lambda_mse * MSE(output, clean) + lambda_bce * BCE(position masks).

    masks_true holds the ground-truth masks of the halving, doubling,
    maternal-rate and spike branches, in that order.
    """
    loss = cfg.lambda_mse * ops.mse_loss(out["output"], clean)
    if cfg.lambda_bce:
        pred = torch.cat([out["soft_masks"], out["position_masks"]], dim=1)
        loss = loss + cfg.lambda_bce * ops.bce_loss(pred, masks_true)
    return loss


MASKED_CLASSES = [int(a) for a in MATH_FACTORS] + [int(a) for a in LOCATED_CLASSES]


def _mask_targets(ds: Dataset, idx, dtype) -> torch.Tensor:
    return _t(ds.masks[idx][:, MASKED_CLASSES], dtype)


def train_stage2(train: Dataset, val: Dataset, detector: ArtefactDetector | None,
                 cfg: TrainConfig = TrainConfig(stage="reconstructor"),
                 rec_cfg: ReconstructorConfig = ReconstructorConfig(),
                 log=None) -> tuple[SignalReconstructor, TrainResult]:
    if detector is None:
        raise StageOrderError("stage 2 needs a trained stage-1 detector checkpoint")
    if len(train) == 0 or len(val) == 0:
        raise TrainingError("training and validation sets must be nonempty")
    before = ModelState.from_module(detector).digest()
    for p in detector.parameters():
        p.requires_grad_(False)
    feats_tr = detector_outputs(detector, train, cfg.eval_batch)
    feats_va = detector_outputs(detector, val, cfg.eval_batch)
    ctx_tr = slice_context(train.x10, train.m10, train.offset)
    ctx_va = slice_context(val.x10, val.m10, val.offset)

    torch.manual_seed(cfg.seed)
    dtype = cfg.torch_dtype
    rec_cfg = replace(rec_cfg, feature_dim=detector.cfg.d_model)
    model = SignalReconstructor(rec_cfg).to(dtype)

    def forward(ds, feats, ctx, idx):
        return model(_t(ds.x1[idx], dtype), _t(ds.m1[idx], dtype), _t(feats.fused[idx], dtype),
                     _t(feats.gates[idx], dtype), anchor=_t(ctx[0][idx], dtype), ref=_t(ctx[1][idx], dtype))

    def batch_loss(idx):
        out = forward(train, feats_tr, ctx_tr, idx)
        return stage2_loss(out, _mask_targets(train, idx, dtype), _t(train.clean1[idx], dtype), cfg)

    @torch.no_grad()
    def validate():
        model.eval()
        total, out_all = 0.0, []
        for s in range(0, len(val), cfg.eval_batch):
            idx = np.arange(s, min(s + cfg.eval_batch, len(val)))
            out = forward(val, feats_va, ctx_va, idx)
            total += float(stage2_loss(out, _mask_targets(val, idx, dtype), _t(val.clean1[idx], dtype), cfg)) * idx.size
            out_all.append(out["output"].double().numpy())
        cleaned = np.concatenate(out_all)
        union = val.masks.any(axis=1).astype(bool)
        sq = (cleaned - val.clean1) ** 2
        return {
            "val_loss": total / len(val),
            "val_mse_corrupt": float(sq[union].mean()) if union.any() else math.nan,
            "val_mse_clean": float(sq[~union].mean()),
        }

    # the validation loss itself is the selection score (negated so higher is better)
    def validate_scored():
        v = validate()
        v["neg_val_loss"] = -v["val_loss"]
        return v

    result = _fit(model, len(train), batch_loss, validate_scored, "neg_val_loss", cfg, log=log)
    after = ModelState.from_module(detector).digest()
    if after != before:
        raise TrainingError("detector parameters changed during stage 2")
    return model, result


# ---------------------------------------------------------------------------
# run directory


def history_csv(history: Sequence[dict]) -> str:
    if not history:
        return ""
    keys = list(history[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in history:
        w.writerow([repr(float(row[k])) if isinstance(row[k], float) else row[k] for k in keys])
    return buf.getvalue()


def config_from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ops.ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls.from_dict(d) if hasattr(cls, "from_dict") else cls(**d)


__all__ = [
    "Artefact", "Dataset", "Split", "StageOrderError", "StageTwoInputs", "TrainConfig", "TrainResult",
    "TrainingError", "build_dataset", "calibrate_thresholds", "dataset_from_records", "detector_outputs", "history_csv",
    "inject_all", "macro_auroc", "positive_weights", "predict_detector", "segment_seed", "split_by_parent",
    "train_stage1", "train_stage2",
]
