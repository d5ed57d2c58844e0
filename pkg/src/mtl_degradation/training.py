"""Dataset splitting, sample windows, masked MAE and the staged training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataprep import CellSeries, fleet_r_base, normalize, with_r_base
from .numeric import AdamState, NumericError, RegularizationSpec, adam_step, make_rng
from .seqmodel import ModelConfig, Seq2SeqModel, backward_batch, forward_batch, pad_input, resample_history
from .seqmodel.model import MIN_HISTORY_CYCLES

log = logging.getLogger(__name__)

SAMPLE_STRIDE_CYCLES = 20
CLIP_NORM = 5.0


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# splitting

@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[int, int, int] = (6, 2, 2)
    seed: int = 0


def split_dataset(cells: list, spec: SplitSpec = SplitSpec()):
    """Random split by cell. Validation and test each get round(0.2 N) cells (10 of 48)."""
    n = len(cells)
    if n < 5:
        raise ValueError(f"need at least 5 cells to split, got {n}")
    total = sum(spec.ratios)
    # round half up: 48 cells -> 28/10/10, 5 cells -> 3/1/1
    n_val = (2 * n * spec.ratios[1] + total) // (2 * total)
    n_test = (2 * n * spec.ratios[2] + total) // (2 * total)
    order = make_rng(spec.seed, "split").permutation(n)
    test = [cells[i] for i in order[:n_test]]
    val = [cells[i] for i in order[n_test:n_test + n_val]]
    train = [cells[i] for i in order[n_test + n_val:]]
    return train, val, test


def split_with_r_base(cells: list, spec: SplitSpec = SplitSpec()):
    """:func:`split_dataset`, then set every cell's ``r_base`` to the mean
    initial resistance of the training cells."""
    train, val, test = split_dataset(cells, spec)
    r_base = fleet_r_base(train)
    return tuple(with_r_base(part, r_base) for part in (train, val, test))


# ---------------------------------------------------------------------------
# samples

@dataclass
class TrainingSample:
    input: np.ndarray  # (input_len, 2) normalized, pre-padded
    valid_from: int
    target_cap: np.ndarray  # (output_len,) trailing zeros
    target_res: np.ndarray
    target_mask: np.ndarray  # (output_len,) bool
    present_cycle: int
    cell_id: str = ""


@dataclass
class SampleSet:
    """Stacked samples, ready for batching."""

    x: np.ndarray  # (N, input_len, 2)
    valid_from: np.ndarray  # (N,)
    targets: dict  # branch -> (N, output_len)
    mask: np.ndarray  # (N, output_len) bool
    present: np.ndarray
    cell_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.valid_from)

    def subset(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(self.x[idx], self.valid_from[idx], {k: v[idx] for k, v in self.targets.items()},
                         self.mask[idx], self.present[idx], [self.cell_ids[i] for i in idx])

    def channels(self, branches) -> np.ndarray:
        """Input channels for a model with the given branches (2 for MTL, 1 for STL)."""
        if len(branches) == 2:
            return self.x
        return self.x[..., [0]] if branches[0] == "capacity" else self.x[..., [1]]


def present_positions(last_cycle: int, stride: int = SAMPLE_STRIDE_CYCLES) -> list[int]:
    """Present-cycle positions 100, 120, ... up to end-of-data."""
    return list(range(MIN_HISTORY_CYCLES, last_cycle + 1, stride))


def make_sample(soh_c: np.ndarray, soh_r: np.ndarray, present: int, config: ModelConfig,
                cell_id: str = "") -> TrainingSample:
    hist_c = soh_c[:present + 1]
    hist_r = soh_r[:present + 1]
    pc = pad_input(resample_history(hist_c, config.in_step_cycles, config.input_len), config.input_len)
    pr = pad_input(resample_history(hist_r, config.in_step_cycles, config.input_len), config.input_len)
    L = len(soh_c) - 1
    step = config.out_step_cycles
    n = min((L - present) // step, config.output_len)
    idx = present + step * np.arange(1, n + 1)
    tc = np.zeros(config.output_len)
    tr = np.zeros(config.output_len)
    m = np.zeros(config.output_len, dtype=bool)
    tc[:n] = soh_c[idx]
    tr[:n] = soh_r[idx]
    m[:n] = True
    return TrainingSample(np.stack([pc.values, pr.values], axis=-1), pc.valid_from, tc, tr, m, present, cell_id)


def build_samples(cell: CellSeries, config: ModelConfig, stride: int = SAMPLE_STRIDE_CYCLES) -> list[TrainingSample]:
    """One sample per present cycle 100, 120, ..., end-of-data.

    Positions whose history outgrows the input window keep its most recent
    ``input_len`` steps (a sliding window).

    The sample at end-of-data has an all-false target mask; :func:`sample_set`
    drops such samples before training.
    """
    if cell.first_cycle != 0:
        raise ValueError(f"cell {cell.cell_id!r}: series must start at cycle 0")
    if cell.last_cycle < MIN_HISTORY_CYCLES:
        raise ValueError(f"cell {cell.cell_id!r}: series shorter than {MIN_HISTORY_CYCLES} cycles")
    soh = normalize(cell)
    return [make_sample(soh.soh_c, soh.soh_r, p, config, cell.cell_id)
            for p in present_positions(cell.last_cycle, stride)]


def stack_samples(samples: list[TrainingSample]) -> SampleSet:
    if not samples:
        raise ValueError("no samples")
    return SampleSet(
        np.stack([s.input for s in samples]),
        np.array([s.valid_from for s in samples]),
        {"capacity": np.stack([s.target_cap for s in samples]),
         "resistance": np.stack([s.target_res for s in samples])},
        np.stack([s.target_mask for s in samples]),
        np.array([s.present_cycle for s in samples]),
        [s.cell_id for s in samples],
    )


def sample_set(cells: list[CellSeries], config: ModelConfig) -> SampleSet:
    """Stacked samples with at least one real target."""
    return stack_samples([s for c in cells for s in build_samples(c, config) if s.target_mask.any()])


# ---------------------------------------------------------------------------
# loss

def masked_mae(pred, target, mask) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError("pred, target and mask must have equal shapes")
    if not mask.any():
        raise ValueError("mask selects no positions")
    return float(np.abs(pred[mask] - target[mask]).sum() / mask.sum())


def _batch_mae(pred, target, mask):
    """Mean over samples of per-sample masked MAE, plus d/dpred."""
    n = mask.sum(axis=1)
    if np.any(n == 0):
        raise ValueError("sample with empty target mask")
    r = pred - target
    per = (np.abs(r) * mask).sum(axis=1) / n
    d = np.sign(r) * mask / (n[:, None] * len(n))
    return float(per.mean()), d


def batch_objective(model: Seq2SeqModel, data: SampleSet, weights: dict, with_grad: bool = True,
                    include_penalty: bool = True, encoder_grad: bool = True):
    """Weighted masked-MAE objective (+ L1/L2 penalty) on ``data``.

    Returns ``(total, parts, grad)`` where ``parts`` maps branch -> MAE and
    ``"penalty"`` -> penalty value.
    """
    active = tuple(b for b in model.branches if weights.get(b, 0.0) > 0)
    if not active:
        raise ValueError("all loss weights are zero")
    outputs, cache = forward_batch(model, data.channels(model.branches), data.valid_from, active)
    parts = {}
    d_out = {}
    total = 0.0
    for br in active:
        mae, d = _batch_mae(outputs[br], data.targets[br], data.mask)
        parts[br] = mae
        total += weights[br] * mae
        d_out[br] = weights[br] * d
    grad = backward_batch(model, cache, d_out, encoder=encoder_grad) if with_grad else None
    if include_penalty:
        pen, pgrad = model.penalty()
        parts["penalty"] = pen
        total += pen
        if with_grad:
            grad += pgrad
    return total, parts, grad


def evaluate_loss(model: Seq2SeqModel, data: SampleSet, weights: dict, chunk: int = 256) -> float:
    """Weighted masked MAE without penalty, averaged over samples."""
    total = 0.0
    for s in range(0, len(data), chunk):
        part = data.subset(np.arange(s, min(s + chunk, len(data))))
        val, _, _ = batch_objective(model, part, weights, with_grad=False, include_penalty=False)
        total += val * len(part)
    return total / len(data)


# ---------------------------------------------------------------------------
# schedules

PARAM_GROUPS = {
    "encoder+capacity": ("encoder", "capacity"),
    "resistance": ("resistance",),
    "capacity": ("capacity",),
    "all": ("all",),
}


@dataclass(frozen=True)
class StageConfig:
    name: str
    lr: float
    max_epochs: int
    batch_size: int
    loss_weights: tuple[float, float]  # (capacity, resistance)
    params: str = "all"
    early_stop_patience: int = 32
    early_stop_min_delta: float = 1e-5
    # std of Gaussian noise added to valid input steps (SOH units), redrawn per batch
    input_noise: float = 0.0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ValueError("max_epochs and batch_size must be >= 1")
        if min(self.loss_weights) < 0 or max(self.loss_weights) <= 0:
            raise ValueError("loss weights must be >= 0 and not both zero")
        if self.params not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {self.params!r}")
        if not self.input_noise >= 0:
            raise ValueError("input_noise must be >= 0")

    @property
    def weights(self) -> dict:
        return {"capacity": self.loss_weights[0], "resistance": self.loss_weights[1]}

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["loss_weights"] = list(self.loss_weights)
        return d


MTL_STAGES = (
    StageConfig("stage1", 1e-4, 450, 384, (1.0, 0.0), "encoder+capacity"),
    StageConfig("stage2", 1e-4, 450, 384, (0.0, 1.0), "resistance"),
    StageConfig("stage3", 1e-5, 300, 512, (1.0, 1.0), "all"),
)
STL_CAPACITY_STAGE = StageConfig("stl-capacity", 1e-4, 450, 384, (1.0, 0.0), "all")
STL_RESISTANCE_STAGE = StageConfig("stl-resistance", 1e-4, 450, 384, (0.0, 1.0), "all")


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    train_loss: float
    val_loss: float
    lr: float


def _augment(batch: SampleSet, sigma: float, rng: np.random.Generator) -> SampleSet:
    """Copy of ``batch`` with Gaussian noise on the valid (unpadded) input steps."""
    valid = np.arange(batch.x.shape[1])[None, :] >= batch.valid_from[:, None]
    noise = rng.normal(0.0, sigma, batch.x.shape) * valid[:, :, None]
    return replace(batch, x=batch.x + noise)


def _clip(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.sqrt(np.dot(grad, grad)))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def train_stage(model: Seq2SeqModel, train: SampleSet, val: SampleSet, stage: StageConfig,
                reg: RegularizationSpec | None = None, seed: int = 0, clip_norm: float = CLIP_NORM,
                callback=None) -> tuple[Seq2SeqModel, list[EpochRecord]]:
    """Adam on the stage's parameter subset with early stopping on validation loss.

    Returns a new model holding the best-validation snapshot, and the history.
    """
    model = model.copy()
    if reg is not None:
        model.reg = reg
    weights = stage.weights
    subset = model.group_mask(*PARAM_GROUPS[stage.params])
    if stage.params == "resistance" and "resistance" not in model.branches:
        raise TrainingError("model has no resistance branch")
    rng = make_rng(seed, f"batches/{stage.name}")
    aug_rng = make_rng(seed, f"augment/{stage.name}")
    state = AdamState.for_params(model.flat[subset], lr=stage.lr)
    encoder_grad = bool(subset[model.group_mask("encoder")].any())
    best = evaluate_loss(model, val, weights)
    best_flat = model.flat.copy()
    wait = 0
    history: list[EpochRecord] = []
    n = len(train)
    for epoch in range(1, stage.max_epochs + 1):
        order = rng.permutation(n)
        run_loss = 0.0
        for s in range(0, n, stage.batch_size):
            idx = order[s:s + stage.batch_size]
            batch = train.subset(idx)
            if stage.input_noise > 0:
                batch = _augment(batch, stage.input_noise, aug_rng)
            try:
                loss, parts, grad = batch_objective(model, batch, weights, encoder_grad=encoder_grad)
            except NumericError as exc:
                raise TrainingError(f"{stage.name}: non-finite state at epoch {epoch}, "
                                    f"batch {s // stage.batch_size}: {exc}") from exc
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"{stage.name}: non-finite loss at epoch {epoch}, batch {s // stage.batch_size} "
                                    f"(parts={parts})")
            new, state = adam_step(model.flat[subset], _clip(grad[subset], clip_norm), state)
            model.flat[subset] = new
            run_loss += loss * len(idx)
        val_loss = evaluate_loss(model, val, weights)
        if not math.isfinite(val_loss):
            raise TrainingError(f"{stage.name}: non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, stage.name, run_loss / n, val_loss, stage.lr)
        history.append(rec)
        if callback is not None:
            callback(rec)
        log.debug("%s epoch %d train %.5f val %.5f", stage.name, epoch, rec.train_loss, val_loss)
        if val_loss < best - stage.early_stop_min_delta:
            best = val_loss
            best_flat = model.flat.copy()
            wait = 0
        else:
            wait += 1
            if wait >= stage.early_stop_patience:
                break
    model.set_flat(best_flat)
    return model, history


def train_multistage(model: Seq2SeqModel, train: SampleSet, val: SampleSet, stages=MTL_STAGES,
                     reg: RegularizationSpec | None = None, seed: int = 0, callback=None):
    """Capacity stage (encoder + capacity decoder), resistance stage (resistance
    decoder, encoder frozen), then joint fine-tuning on the weighted total."""
    if not model.is_multitask:
        raise TrainingError("multi-stage training needs a multi-task model")
    history = []
    for stage in stages:
        model, h = train_stage(model, train, val, stage, reg, seed, callback=callback)
        history += h
    return model, history


def train_stl(model: Seq2SeqModel, train: SampleSet, val: SampleSet, schedule: StageConfig | None = None,
              reg: RegularizationSpec | None = None, seed: int = 0, callback=None):
    if model.is_multitask:
        raise TrainingError("train_stl needs a single-task model")
    br = model.branches[0]
    if schedule is None:
        schedule = STL_CAPACITY_STAGE if br == "capacity" else STL_RESISTANCE_STAGE
    w = (1.0, 0.0) if br == "capacity" else (0.0, 1.0)
    schedule = replace(schedule, loss_weights=w, params="all")
    return train_stage(model, train, val, schedule, reg, seed, callback=callback)


def scaled_schedule(stages, epoch_caps=None, lr_scale: float = 1.0, batch_size=None, input_noise=None):
    """Copy of ``stages`` with overridden epoch caps / batch sizes / input noise and scaled learning rates."""
    out = []
    for k, st in enumerate(stages):
        kw = {"lr": st.lr * lr_scale}
        if input_noise is not None:
            kw["input_noise"] = float(input_noise)
        if epoch_caps is not None:
            kw["max_epochs"] = int(epoch_caps[k])
        if batch_size is not None:
            kw["batch_size"] = int(batch_size[k] if isinstance(batch_size, (list, tuple)) else batch_size)
        out.append(replace(st, **kw))
    return tuple(out)


# ---------------------------------------------------------------------------
# gradient check

MINI_CONFIG = ModelConfig(num_layers=2, hidden_size=4, input_len=12, output_len=6, input_channels=2,
                          in_step_cycles=10)


@dataclass
class GradcheckReport:
    n_checked: int
    max_rel_error: float
    worst_index: int
    worst_name: str
    analytic: float
    numeric: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def lines(self) -> list[str]:
        return [
            f"checked {self.n_checked} parameters in {self.seconds:.1f} s",
            f"max relative error {self.max_rel_error:.3e} (tolerance {self.tolerance:g})",
            f"worst coordinate {self.worst_index} ({self.worst_name}): analytic {self.analytic:.6e}, "
            f"numeric {self.numeric:.6e}",
            "PASS" if self.passed else "FAIL",
        ]


def random_sample_set(config: ModelConfig, n: int, seed: int = 0) -> SampleSet:
    """Random padded inputs and partially masked targets in SOH units."""
    rng = make_rng(seed, "gradcheck/data")
    x = rng.uniform(0.6, 1.3, (n, config.input_len, 2))
    valid_from = rng.integers(0, config.input_len - 1, n)
    for b in range(n):
        x[b, :valid_from[b]] = 0.0
    mask = rng.uniform(size=(n, config.output_len)) < 0.7
    mask[:, 0] = True
    targets = {br: rng.uniform(0.6, 1.3, (n, config.output_len)) * mask for br in ("capacity", "resistance")}
    return SampleSet(x, valid_from, targets, mask, np.zeros(n, dtype=int), [""] * n)


def gradient_check(config: ModelConfig = MINI_CONFIG, n_params: int | None = None, seed: int = 0,
                   batch: int = 3, step: float = 1e-5, floor: float = 1e-6, tolerance: float = 1e-4,
                   sign_flip: bool = False) -> GradcheckReport:
    """Analytic vs central-difference gradient of the stage-3 total loss
    (both masked MAEs plus the L1/L2 penalty) on a randomly initialized MTL model.

    ``floor`` bounds the relative-error denominator from below: in float64 the
    difference quotient carries ~1e-10 absolute round-off, which swamps
    coordinates whose true gradient is that small. ``sign_flip`` negates the
    analytic gradient (negative control).
    """
    import time
    from .numeric import finite_difference_gradient, relative_error
    from .seqmodel import mtl_model

    t0 = time.perf_counter()
    model = mtl_model(config, seed=seed)
    data = random_sample_set(config, batch, seed)
    weights = {"capacity": 1.0, "resistance": 1.0}

    def loss(flat):
        model.set_flat(flat)
        return batch_objective(model, data, weights, with_grad=False)[0]

    base = model.flat.copy()
    _, _, grad = batch_objective(model, data, weights)
    if sign_flip:
        grad = -grad
    n = base.size
    idx = np.arange(n) if n_params is None or n_params >= n else \
        np.sort(make_rng(seed, "gradcheck/indices").choice(n, n_params, replace=False))
    fd = finite_difference_gradient(loss, base, step, idx)
    model.set_flat(base)
    rel = relative_error(grad[idx], fd[idx], floor)
    k = int(np.argmax(rel))
    j = int(idx[k])
    name = next(nm for nm, sl in model.slices.items() if sl.start <= j < sl.stop)
    return GradcheckReport(len(idx), float(rel[k]), j, name, float(grad[j]), float(fd[j]), tolerance,
                           time.perf_counter() - t0)


def history_rows(history: list[EpochRecord]) -> list[dict]:
    return [dict(epoch=r.epoch, stage=r.stage, train_loss=r.train_loss, val_loss=r.val_loss, lr=r.lr)
            for r in history]


__all__ = [
    "SplitSpec", "split_dataset", "split_with_r_base", "TrainingSample", "SampleSet", "build_samples", "stack_samples", "sample_set",
    "masked_mae", "batch_objective", "evaluate_loss", "StageConfig", "MTL_STAGES", "STL_CAPACITY_STAGE",
    "STL_RESISTANCE_STAGE", "train_stage", "train_multistage", "train_stl", "scaled_schedule", "EpochRecord",
    "TrainingError", "NumericError", "MINI_CONFIG", "GradcheckReport", "gradient_check", "random_sample_set",
    "present_positions", "make_sample", "history_rows",
]
