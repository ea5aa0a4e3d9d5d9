"""AdamW with linear warmup/decay and the four training regimes."""

from __future__ import annotations

import copy
import csv
import hashlib
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import BatchStream, TaskDataset, Vocabulary
from .distill import LayerMap, LossReport, LossWeights, build_layer_map, mlm_loss, total_loss
from .eval import HeadSpec, TaskHead, TaskModel, evaluate, task_loss
from .model import ConfigError, Encoder, ModelConfig, Module, RecursiveStudent, TeacherModel, count_parameters
from .numerics import Tape, Tensor, no_grad
from .rng import derive_rng

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "mlm", "att", "hidden", "align", "out", "embed", "total", "wall_ms")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, model: Module, rows: list):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.model = model
        self.rows = rows


# ---- optimisation --------------------------------------------------------


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be nonnegative")


def lr_at(step: int, schedule: ScheduleConfig) -> float:
    """Linear ramp 0 -> peak over the warmup, then linear decay to 0 at total_steps."""
    s = min(max(step, 0), schedule.total_steps)
    if s < schedule.warmup_steps:
        return schedule.peak_lr * s / schedule.warmup_steps
    remaining = schedule.total_steps - schedule.warmup_steps
    if remaining == 0:
        return schedule.peak_lr
    return schedule.peak_lr * (schedule.total_steps - s) / remaining


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict[int, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[int, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Adam with decoupled weight decay. Parameters with ``requires_grad=False``
    are never touched."""

    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = OptimizerState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> bool:
        """Apply one update; returns False (and changes nothing) on a non-finite gradient."""
        live = [(i, p) for i, p in enumerate(self.params) if p.requires_grad and p.grad is not None]
        if any(not np.all(np.isfinite(p.grad)) for _, p in live):
            logger.warning("non-finite gradient: skipping optimizer step %d", self.state.step + 1)
            return False
        self.state.step += 1
        t = self.state.step
        b1, b2 = self.betas
        c1, c2 = 1.0 - b1**t, 1.0 - b2**t
        for i, p in live:
            g = p.grad
            m = self.state.exp_avg.get(i)
            if m is None:
                m = self.state.exp_avg[i] = np.zeros_like(p.data)
                self.state.exp_avg_sq[i] = np.zeros_like(p.data)
            v = self.state.exp_avg_sq[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


def adamw_step(optimizer: AdamW, lr_t: float) -> bool:
    return optimizer.step(lr_t)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.requires_grad and p.grad is not None]
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if math.isfinite(norm) and norm > max_norm > 0:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.requires_grad and p.grad is not None:
                p.grad = p.grad * scale
    return norm


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 500
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 50
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    seed: int = 0
    mask_prob: float = 0.15
    mask_split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    epochs: int = 3
    log_every: int = 1
    log_wall_time: bool = False
    snapshot_every: int = 50

    def schedule(self, total_steps: int | None = None) -> ScheduleConfig:
        total = self.steps if total_steps is None else total_steps
        return ScheduleConfig(self.peak_lr, min(self.warmup_steps, total), total)


PROFILES: dict[str, TrainSettings] = {
    "desk": TrainSettings(),
    "paper-pretrain": TrainSettings(steps=100_000, batch_size=192, peak_lr=5e-4, warmup_steps=5000, weight_decay=1e-4),
    "paper-finetune": TrainSettings(batch_size=16, peak_lr=5e-5, warmup_steps=0, weight_decay=0.01, epochs=5),
    "paper-adapter-tune": TrainSettings(batch_size=16, peak_lr=5e-4, warmup_steps=0, weight_decay=0.01, epochs=10),
}
FINETUNE_LR_GRID = (5e-5, 3e-5, 1e-5)
ADAPTER_TUNE_LR_GRID = (5e-5, 5e-4, 1e-3)


# ---- freezing ------------------------------------------------------------


@dataclass(frozen=True)
class FreezeSpec:
    """Selects the tunable subset of parameters by name."""

    tunable: Callable[[str], bool]

    def apply(self, model: Module) -> int:
        n = 0
        for name, p in model.named_parameters():
            p.requires_grad = bool(self.tunable(name))
            n += p.size if p.requires_grad else 0
        return n


def _is_adapter_or_head(name: str) -> bool:
    return name.startswith("head.") or name.startswith("adapters.") or ".adapters." in name


ADAPTER_TUNING = FreezeSpec(_is_adapter_or_head)
FULL_TUNING = FreezeSpec(lambda name: True)


def parameter_checksum(model: Module, only_frozen: bool = False) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        if only_frozen and p.requires_grad:
            continue
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def freeze(model: Module) -> None:
    for p in model.parameters():
        p.requires_grad = False
        p.grad = None


# ---- metric logging ------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsLog:
    """CSV with a fixed column order; one writer, append-only."""

    def __init__(self, path: str | Path | None, columns: Sequence[str] = METRIC_COLUMNS):
        self.columns = tuple(columns)
        self.rows: list[dict] = []
        self._fh = None
        if path is not None:
            self._fh = open(path, "w", newline="", encoding="utf-8")
            self._writer = csv.writer(self._fh, lineterminator="\n")
            self._writer.writerow(self.columns)

    def append(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow([_fmt(row.get(c, "")) for c in self.columns])
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _report_row(step: int, lr: float, report: LossReport | None, mlm: float, wall_ms: float | str) -> dict:
    row = dict(step=step, lr=float(lr), mlm=mlm, att=0.0, hidden=0.0, align=0.0, out=0.0, embed=0.0, total=mlm, wall_ms=wall_ms)
    if report is not None:
        row.update(report.as_row())
    return row


# ---- regimes -------------------------------------------------------------


def _optimise(
    model: Module,
    settings: TrainSettings,
    step_loss: Callable[[int], tuple[Tensor, LossReport | None]],
    log: MetricsLog,
) -> None:
    params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(params, settings.betas, settings.eps, settings.weight_decay)
    schedule = settings.schedule()
    last_good = copy.deepcopy(model.state_dict())
    for step in range(1, settings.steps + 1):
        t0 = time.perf_counter()
        opt.zero_grad()
        with Tape() as tape:
            loss, report = step_loss(step)
        if not np.isfinite(loss.data):
            model.load_state_dict(last_good)
            raise DivergenceError(step, model, log.rows)
        tape.backward(loss)
        if settings.clip_norm:
            clip_grad_norm(params, settings.clip_norm)
        lr = lr_at(step, schedule)
        opt.step(lr)
        wall = round(1000.0 * (time.perf_counter() - t0), 3) if settings.log_wall_time else ""
        row = _report_row(step, lr, report, loss.item(), wall)
        log.append(row)
        if report is not None and settings.log_every and step % settings.log_every == 0:
            logger.debug(report.log_line(step))
        if settings.snapshot_every and step % settings.snapshot_every == 0:
            last_good = copy.deepcopy(model.state_dict())


def pretrain_teacher(
    sequences: Sequence[Sequence[int]],
    vocab: Vocabulary,
    config: ModelConfig,
    settings: TrainSettings,
    log_path: str | Path | None = None,
    teacher: TeacherModel | None = None,
) -> tuple[TeacherModel, list[dict]]:
    """Masked-language-model training of a fully parameterised encoder."""
    config = config.replace(vocab_size=len(vocab))
    teacher = teacher or TeacherModel(config, derive_rng(settings.seed, "init", "teacher"))
    stream = BatchStream(sequences, vocab, settings.batch_size, settings.mask_prob, settings.seed, settings.mask_split)

    def step_loss(step):
        batch = stream.next_batch()
        trace = teacher.forward(batch.x, batch.valid, train=True, rng=derive_rng(settings.seed, "dropout", step))
        return mlm_loss(trace.logits, batch.y), None

    with MetricsLog(log_path) as log:
        _optimise(teacher, settings, step_loss, log)
    return teacher, log.rows


def check_compatible(teacher: Encoder, student_config: ModelConfig, layer_map: LayerMap) -> None:
    t = teacher.config
    s = student_config
    for name in ("hidden_dim", "num_heads", "vocab_size"):
        if getattr(t, name) != getattr(s, name):
            raise ConfigError(f"teacher and student disagree on {name}: {getattr(t, name)} vs {getattr(s, name)}")
    if layer_map.teacher_layers != teacher.num_iterations or layer_map.student_iterations != s.num_layers:
        raise ConfigError("layer map does not match teacher layers / student iterations")


def import_embeddings(target: Encoder, source: Encoder) -> None:
    """Initialise ``target`` token/position embeddings from ``source``.

    When the target is factorised, the source matrix is replaced by its best
    rank-r approximation (truncated SVD), split as E_low @ W_e.
    """
    src, dst = source.embeddings, target.embeddings
    E = src.effective_matrix().data
    if E.shape[0] != dst.E_low.shape[0] or E.shape[1] != target.config.hidden_dim:
        raise ConfigError("embedding import needs matching vocabulary size and hidden dim")
    if dst.W_e is None:
        dst.E_low.data = E.astype(dst.E_low.dtype, copy=True)
    else:
        u, s, vt = np.linalg.svd(E, full_matrices=False)
        r = target.config.rank
        root = np.sqrt(s[:r])
        dst.E_low.data = (u[:, :r] * root).astype(dst.E_low.dtype)
        dst.W_e.data = (root[:, None] * vt[:r]).astype(dst.W_e.dtype)
    n = min(src.positional.shape[0], dst.positional.shape[0])
    dst.positional.data[:n] = src.positional.data[:n]
    if src.token_type is not None and dst.token_type is not None and src.token_type.shape == dst.token_type.shape:
        dst.token_type.data = src.token_type.data.copy()


def distill_student(
    teacher: TeacherModel,
    sequences: Sequence[Sequence[int]],
    vocab: Vocabulary,
    student_config: ModelConfig,
    weights: LossWeights,
    layer_map: LayerMap | None,
    settings: TrainSettings,
    log_path: str | Path | None = None,
    student: RecursiveStudent | None = None,
    init_embeddings_from_teacher: bool = False,
) -> tuple[RecursiveStudent, list[dict]]:
    """Train a recursive student on the full distillation objective against a frozen teacher."""
    student_config = student_config.replace(vocab_size=len(vocab))
    if layer_map is None:
        layer_map = build_layer_map(student_config.num_layers, teacher.num_iterations, "identity")
    check_compatible(teacher, student_config, layer_map)
    freeze(teacher)
    student = student or RecursiveStudent(student_config, derive_rng(settings.seed, "init", "student"))
    if init_embeddings_from_teacher:
        import_embeddings(student, teacher)
    stream = BatchStream(sequences, vocab, settings.batch_size, settings.mask_prob, settings.seed, settings.mask_split)

    def step_loss(step):
        batch = stream.next_batch()
        with no_grad():
            trace_t = teacher.forward(batch.x, batch.valid, train=False)
        trace_s = student.forward(batch.x, batch.valid, train=True, rng=derive_rng(settings.seed, "dropout", step))
        report = total_loss(batch, trace_s, trace_t, weights, layer_map)
        return report.loss, report

    with MetricsLog(log_path) as log:
        _optimise(student, settings, step_loss, log)
    return student, log.rows


# ---- downstream tuning -------------------------------------------------------

TASK_COLUMNS = ("epoch", "step", "lr", "train_loss", "train_accuracy", "eval_accuracy", "eval_micro_f1", "ms_per_step")


def attach_head(encoder: Encoder, spec: HeadSpec, seed: int) -> TaskModel:
    c = encoder.config
    head = TaskHead(spec, c.hidden_dim, derive_rng(seed, "init", "head"), c.init_std, c.np_dtype)
    return TaskModel(encoder, head)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = derive_rng(seed, "task-order", epoch).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_task(
    model: TaskModel,
    dataset: TaskDataset,
    settings: TrainSettings,
    eval_dataset: TaskDataset | None = None,
    log_path: str | Path | None = None,
    max_steps: int | None = None,
) -> list[dict]:
    """Supervised epochs over ``dataset``; only parameters with requires_grad move."""
    params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(params, settings.betas, settings.eps, settings.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / settings.batch_size)
    total = settings.epochs * steps_per_epoch if max_steps is None else max_steps
    schedule = settings.schedule(total)
    step = 0
    with MetricsLog(log_path, TASK_COLUMNS) as log:
        for epoch in range(1, settings.epochs + 1):
            losses, elapsed = [], 0.0
            for idx in _batches(len(dataset), settings.batch_size, settings.seed, epoch):
                if step >= total:
                    break
                step += 1
                t0 = time.perf_counter()
                opt.zero_grad()
                rng = derive_rng(settings.seed, "task-dropout", step)
                with Tape() as tape:
                    loss = task_loss(model(dataset.tokens[idx], train=True, rng=rng), dataset.labels[idx])
                if not np.isfinite(loss.data):
                    raise DivergenceError(step, model, log.rows)
                if loss.requires_grad:
                    tape.backward(loss)
                if settings.clip_norm:
                    clip_grad_norm(params, settings.clip_norm)
                opt.step(lr_at(step, schedule))
                elapsed += time.perf_counter() - t0
                losses.append(loss.item())
            train_report = evaluate(model, dataset)
            row = dict(
                epoch=epoch,
                step=step,
                lr=lr_at(step, schedule),
                train_loss=float(np.mean(losses)) if losses else float("nan"),
                train_accuracy=train_report.accuracy,
                eval_accuracy="",
                eval_micro_f1="",
                ms_per_step=round(1000.0 * elapsed / max(len(losses), 1), 3) if settings.log_wall_time else "",
            )
            if eval_dataset is not None:
                rep = evaluate(model, eval_dataset)
                row.update(eval_accuracy=rep.accuracy, eval_micro_f1=rep.micro_f1)
            log.append(row)
            logger.info("epoch=%d step=%d train_loss=%.6g train_acc=%.4f", epoch, step, row["train_loss"], row["train_accuracy"])
            if step >= total:
                break
    return log.rows


def _check_labels(dataset: TaskDataset, spec: HeadSpec) -> None:
    if dataset.kind != spec.kind or dataset.num_labels != spec.num_labels:
        raise ConfigError(
            f"dataset ({dataset.kind}, {dataset.num_labels} labels) does not match head ({spec.kind}, {spec.num_labels} labels)"
        )


def finetune(
    encoder: Encoder,
    dataset: TaskDataset,
    head_spec: HeadSpec,
    settings: TrainSettings,
    eval_dataset: TaskDataset | None = None,
    log_path=None,
) -> tuple[TaskModel, list[dict]]:
    """Full fine-tuning: every parameter is tunable."""
    _check_labels(dataset, head_spec)
    model = attach_head(encoder, head_spec, settings.seed)
    FULL_TUNING.apply(model)
    rows = train_task(model, dataset, settings, eval_dataset, log_path)
    return model, rows


@dataclass
class AdapterTuneInfo:
    tunable: int
    checksum_before: str
    checksum_after: str

    @property
    def backbone_unchanged(self) -> bool:
        return self.checksum_before == self.checksum_after


def prepare_adapter_tuning(encoder: Encoder, head_spec: HeadSpec, seed: int, inject_adapters: bool = False, bottleneck: int | None = None) -> TaskModel:
    if not encoder.has_adapters:
        if not inject_adapters:
            raise ConfigError("model has no bottleneck adapters; enable adapter injection to add randomly initialised ones")
        b = bottleneck or max(1, encoder.config.hidden_dim // 8)
        encoder.inject_adapters(b, derive_rng(seed, "init", "adapters"))
    model = attach_head(encoder, head_spec, seed)
    ADAPTER_TUNING.apply(model)
    return model


def adapter_tune(
    encoder: Encoder,
    dataset: TaskDataset,
    head_spec: HeadSpec,
    settings: TrainSettings,
    eval_dataset: TaskDataset | None = None,
    log_path=None,
    inject_adapters: bool = False,
    bottleneck: int | None = None,
    max_steps: int | None = None,
) -> tuple[TaskModel, list[dict], AdapterTuneInfo]:
    """Tune only the adapters and the task head; the backbone stays bit-identical."""
    _check_labels(dataset, head_spec)
    model = prepare_adapter_tuning(encoder, head_spec, settings.seed, inject_adapters, bottleneck)
    before = parameter_checksum(model, only_frozen=True)
    rows = train_task(model, dataset, settings, eval_dataset, log_path, max_steps)
    after = parameter_checksum(model, only_frozen=True)
    info = AdapterTuneInfo(count_parameters(model, tunable_only=True), before, after)
    if not info.backbone_unchanged:
        raise AssertionError("frozen backbone changed during adapter tuning")
    return model, rows, info


def time_train_steps(model: TaskModel, tokens: np.ndarray, labels: np.ndarray, steps: int = 20, seed: int = 0) -> float:
    """Median wall-clock milliseconds of one forward/backward/update on a fixed batch."""
    params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(params, weight_decay=0.01)
    times = []
    for step in range(steps):
        t0 = time.perf_counter()
        opt.zero_grad()
        with Tape() as tape:
            loss = task_loss(model(tokens, train=True, rng=derive_rng(seed, "timing", step)), labels)
        tape.backward(loss)
        opt.step(1e-5)
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times))
