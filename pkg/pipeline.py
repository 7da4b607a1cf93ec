"""
MTLAM model assembly, joint training, evaluation, visual-only inference,
ablations and diagnostics.
"""
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from config import ExperimentConfig, ModelConfig, OptimizerConfig
from losses import LOSS_FIELDS, LossReport, NonFiniteLossError, joint_objective
from memory import AddressingScore, MemoryBank, bank_parameter_count, fuse
from temporal import FeaturePyramid, TemporalModel, parameter_seed, require_alignment
from tensor import (
    Graph, Tensor, linear, mean, no_grad, numerical_gradient, precision, randn, relative_error, zeros
)
from toytask import ToyDataset, ToyTask

logger = logging.getLogger(__name__)

MODEL_GRADCHECK_EPS = 1e-5
MODEL_GRADCHECK_TOL = 1e-2
EVAL_BATCH_SIZE = 256
AUDIO_PREFIXES = ('audio.', 'head_a.')

_trace = threading.local()


class TrainingError(Exception):
    """Raised when training cannot proceed."""
    pass


class NumericalError(TrainingError):
    """Raised when a loss becomes NaN or infinite."""

    def __init__(self, step: int, message: str):
        super().__init__(f"Non-finite loss at step {step}: {message}")
        self.step = step


class AudioPathViolation(RuntimeError):
    """Raised when the audio stack runs during visual-only inference."""
    pass


class GradcheckFailure(TrainingError):
    """Raised when analytic and numerical gradients disagree."""

    def __init__(self, report: 'GradcheckReport'):
        super().__init__(f"Gradient check failed: max relative error {report.max_error:.3e} "
                         f"(tolerance {report.tolerance:.0e})")
        self.report = report


@contextmanager
def visual_only() -> Iterator[None]:
    """Mark the current thread as running visual-only inference."""
    previous = getattr(_trace, 'visual_only', False)
    _trace.visual_only = True
    try:
        yield
    finally:
        _trace.visual_only = previous


def in_visual_only() -> bool:
    return getattr(_trace, 'visual_only', False)


@dataclass
class ForwardOutput:
    logits_v: Tensor
    logits_va: Tensor
    recalled: Dict[int, Tensor]
    scores: Dict[int, AddressingScore]
    logits_a: Optional[Tensor] = None
    audio: Optional[FeaturePyramid] = None


class MTLAMModel:
    """Visual and audio temporal models joined by memory banks at the enabled levels.

    Heads: head_v on the un-fused visual top level, head_a on the audio top
    level, head_va on the memory-fused visual top level; all temporally mean-pooled.
    """

    def __init__(self, cfg: ModelConfig, seed: int):
        require_alignment(cfg.visual, cfg.audio)
        self.cfg = cfg
        self.seed = seed
        self.audio_calls = 0

        self._params: Dict[str, Tensor] = {}
        for modality in ('visual', 'audio'):
            self._weight(f"{modality}.proj.weight", (cfg.input_dim, cfg.dim), 1.0 / np.sqrt(cfg.input_dim))
            self._bias(f"{modality}.proj.bias", cfg.dim)
        self.visual_tcn = TemporalModel(cfg.visual, 'visual', seed)
        self.audio_tcn = TemporalModel(cfg.audio, 'audio', seed)
        self._params.update(self.visual_tcn.parameters())
        self._params.update(self.audio_tcn.parameters())

        self.banks: Dict[int, MemoryBank] = {}
        for level in cfg.levels:
            bank = MemoryBank(level, cfg.dim, cfg.memory.heads, cfg.memory.slots, cfg.memory.alpha, seed)
            self.banks[level] = bank
            self._params.update(bank.parameters())

        for head in ('head_v', 'head_a', 'head_va'):
            self._weight(f"{head}.weight", (cfg.dim, cfg.num_classes), 1.0 / np.sqrt(cfg.dim))
            self._bias(f"{head}.bias", cfg.num_classes)
        logger.debug(f"Built model with levels {cfg.levels}: {self.parameter_count()} parameters")

    def _weight(self, name: str, shape, scale: float) -> None:
        self._params[name] = randn(shape, seed=parameter_seed(self.seed, name), scale=scale,
                                   requires_grad=True, name=name)

    def _bias(self, name: str, size: int) -> None:
        self._params[name] = zeros((size,), requires_grad=True, name=name)

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._params)

    def parameter_count(self) -> int:
        return int(np.sum([tensor.size for tensor in self._params.values()]))

    def audio_parameter_names(self) -> List[str]:
        return [name for name in self._params if name.startswith(AUDIO_PREFIXES)]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: tensor.numpy() for name, tensor in self._params.items()}

    def load_state(self, parameters: Dict[str, np.ndarray]) -> None:
        missing = sorted(set(self._params) - set(parameters))
        unexpected = sorted(set(parameters) - set(self._params))
        if missing or unexpected:
            raise CheckpointError(f"Parameter table mismatch: missing {missing}, unexpected {unexpected}")
        for name, tensor in self._params.items():
            tensor.assign(parameters[name])

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        return linear(x, self._params[f"{prefix}.weight"], self._params[f"{prefix}.bias"])

    def encode_visual(self, visual: Tensor) -> Tuple[Tensor, FeaturePyramid]:
        projected = self._linear('visual.proj', visual)
        return projected, self.visual_tcn.forward_pyramid(projected)

    def encode_audio(self, audio: Tensor) -> FeaturePyramid:
        if in_visual_only():
            raise AudioPathViolation("Audio temporal model invoked during visual-only inference")
        self.audio_calls += 1
        return self.audio_tcn.forward_pyramid(self._linear('audio.proj', audio))

    def recall_path(self, pyramid: FeaturePyramid) -> Tuple[Tensor, Dict[int, Tensor], Dict[int, AddressingScore]]:
        """Re-run the visual layers from the first enabled level, fusing recalled audio features."""
        if not self.banks:
            return pyramid.top, {}, {}
        recalled: Dict[int, Tensor] = {}
        scores: Dict[int, AddressingScore] = {}
        first = min(self.banks)
        h = pyramid.level(first)
        for index in range(first, self.cfg.visual.n_layers + 1):
            if index > first:
                h = self.visual_tcn.layer(index, h)
            if index in self.banks:
                f_hat, score = self.banks[index].read(h)
                recalled[index], scores[index] = f_hat, score
                h = fuse(h, f_hat)
        return h, recalled, scores

    def forward_visual(self, visual: Tensor) -> ForwardOutput:
        _, pyramid = self.encode_visual(visual)
        fused_top, recalled, scores = self.recall_path(pyramid)
        logits_v = self._linear('head_v', mean(pyramid.top, axis=-2))
        logits_va = self._linear('head_va', mean(fused_top, axis=-2))
        return ForwardOutput(logits_v=logits_v, logits_va=logits_va, recalled=recalled, scores=scores)

    def forward(self, visual: Tensor, audio: Tensor) -> ForwardOutput:
        out = self.forward_visual(visual)
        out.audio = self.encode_audio(audio)
        out.logits_a = self._linear('head_a', mean(out.audio.top, axis=-2))
        return out

    def checkpoint(self, step: int, momentum: Optional[Dict[str, np.ndarray]] = None,
                   metadata: Optional[Dict[str, Any]] = None) -> Checkpoint:
        return Checkpoint(parameters=self.state_dict(), config=self.cfg, step=step,
                          momentum=dict(momentum or {}), metadata=dict(metadata or {}))


def build_model(cfg: ModelConfig, seed: Optional[int] = None) -> MTLAMModel:
    """Deterministic model for a config; memory banks only at the enabled levels."""
    return MTLAMModel(cfg, cfg.seed if seed is None else seed)


def model_from_checkpoint(ckpt: Checkpoint) -> MTLAMModel:
    model = build_model(ckpt.config)
    model.load_state(ckpt.parameters)
    return model


def expected_parameter_count(cfg: ModelConfig) -> int:
    """Baseline parameters plus one bank per enabled level."""
    baseline = build_model(cfg.with_levels([])).parameter_count()
    return baseline + len(cfg.levels) * bank_parameter_count(cfg.dim, cfg.memory.heads, cfg.memory.slots)


@dataclass
class Batch:
    visual: np.ndarray
    audio: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def iter_batches(dataset: ToyDataset, batch_size: int, seed: Optional[int] = None,
                 epoch: int = 0) -> Iterator[Batch]:
    """Minibatches in a (seed, epoch)-determined shuffled order, or in order when seed is None."""
    n = len(dataset)
    order = np.arange(n) if seed is None else np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        index = order[start:start + batch_size]
        yield Batch(dataset.visual[index], dataset.audio[index], dataset.labels[index])


class CosineAnnealingLR:
    """lr(s) = lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi s / S)), held at lr_min after S."""

    def __init__(self, lr_max: float, lr_min: float, total_steps: int):
        self.lr_max = lr_max
        self.lr_min = lr_min
        self.total_steps = total_steps

    def __call__(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.lr_max
        progress = min(step, self.total_steps) / self.total_steps
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1 + math.cos(math.pi * progress))


class MomentumSGD:
    """Heavy-ball gradient descent; velocity kept in the parameters' storage dtype."""

    def __init__(self, parameters: Dict[str, Tensor], momentum: float = 0.9):
        self.parameters = parameters
        self.momentum = momentum
        self.velocity = {name: np.zeros(p.shape, dtype=p.dtype) for name, p in parameters.items()}

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        for name, p in self.parameters.items():
            if p.grad is None:
                continue
            velocity = self.momentum * self.velocity[name].astype(np.float64) + p.grad.astype(np.float64)
            self.velocity[name] = velocity.astype(p.dtype)
            p.assign(p.data.astype(np.float64) - lr * self.velocity[name].astype(np.float64))

    def state(self) -> Dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state(self, velocity: Dict[str, np.ndarray], step: int = 0) -> None:
        for name, values in velocity.items():
            if name not in self.velocity:
                raise CheckpointError(f"Momentum for unknown parameter {name}")
            self.velocity[name] = np.array(values, dtype=self.velocity[name].dtype).reshape(self.velocity[name].shape)


class Adam:
    """Bias-corrected Adam; both moments kept in the parameters' storage dtype."""

    def __init__(self, parameters: Dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.parameters = parameters
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.first = {name: np.zeros(p.shape, dtype=p.dtype) for name, p in parameters.items()}
        self.second = {name: np.zeros(p.shape, dtype=p.dtype) for name, p in parameters.items()}

    def zero_grad(self) -> None:
        for p in self.parameters.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.parameters.items():
            if p.grad is None:
                continue
            grad = p.grad.astype(np.float64)
            first = self.beta1 * self.first[name].astype(np.float64) + (1.0 - self.beta1) * grad
            second = self.beta2 * self.second[name].astype(np.float64) + (1.0 - self.beta2) * grad * grad
            self.first[name] = first.astype(p.dtype)
            self.second[name] = second.astype(p.dtype)
            m_hat = self.first[name].astype(np.float64) / correction1
            v_hat = self.second[name].astype(np.float64) / correction2
            p.assign(p.data.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + self.eps))

    def state(self) -> Dict[str, np.ndarray]:
        state = {f"m.{name}": m.copy() for name, m in self.first.items()}
        state.update({f"v.{name}": v.copy() for name, v in self.second.items()})
        return state

    def load_state(self, moments: Dict[str, np.ndarray], step: int = 0) -> None:
        """Restore both moments; ``step`` is the number of updates already taken."""
        for key, values in moments.items():
            kind, _, name = key.partition('.')
            table = {'m': self.first, 'v': self.second}.get(kind)
            if table is None or name not in table:
                raise CheckpointError(f"Optimizer state for unknown parameter {key}")
            table[name] = np.array(values, dtype=table[name].dtype).reshape(table[name].shape)
        self.t = step


def make_optimizer(parameters: Dict[str, Tensor], cfg: OptimizerConfig) -> Union[MomentumSGD, Adam]:
    if cfg.kind == 'adam':
        return Adam(parameters, cfg.momentum, cfg.beta2, cfg.eps)
    return MomentumSGD(parameters, cfg.momentum)


class EvalReport(BaseModel):
    """Top-1 accuracy (fraction) of the fused, visual and audio heads on one split."""
    split: str
    n: int
    acc_va: float
    acc_v: float
    acc_a: float

    def as_row(self) -> Dict[str, Any]:
        return self.model_dump()


class MetricsLog:
    """Per-step losses and per-epoch validation accuracies, written as CSV."""
    STEP_COLUMNS = ['step', *LOSS_FIELDS, 'total']
    EPOCH_COLUMNS = ['epoch', 'acc_v', 'acc_a', 'acc_va']

    def __init__(self):
        self.steps: List[Dict[str, float]] = []
        self.epochs: List[Dict[str, float]] = []

    def add_step(self, step: int, report: LossReport) -> None:
        self.steps.append(report.as_row(step))

    def add_epoch(self, epoch: int, report: EvalReport) -> None:
        self.epochs.append({'epoch': epoch, 'acc_v': report.acc_v, 'acc_a': report.acc_a, 'acc_va': report.acc_va})

    def steps_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.steps, columns=self.STEP_COLUMNS)

    def epochs_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.epochs, columns=self.EPOCH_COLUMNS)

    def truncate(self, step: int, epoch: int) -> None:
        self.steps = [row for row in self.steps if row['step'] < step]
        self.epochs = [row for row in self.epochs if row['epoch'] < epoch]

    def save(self, out_dir: str) -> Tuple[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        steps_path = os.path.join(out_dir, 'steps.csv')
        epochs_path = os.path.join(out_dir, 'epochs.csv')
        self.steps_frame().to_csv(steps_path, index=False)
        self.epochs_frame().to_csv(epochs_path, index=False)
        return steps_path, epochs_path

    @classmethod
    def load(cls, out_dir: str) -> 'MetricsLog':
        log = cls()
        steps_path = os.path.join(out_dir, 'steps.csv')
        epochs_path = os.path.join(out_dir, 'epochs.csv')
        if os.path.exists(steps_path):
            frame = pd.read_csv(steps_path)
            log.steps = [{**row, 'step': int(row['step'])} for row in frame.to_dict('records')]
        if os.path.exists(epochs_path):
            frame = pd.read_csv(epochs_path)
            log.epochs = [{**row, 'epoch': int(row['epoch'])} for row in frame.to_dict('records')]
        return log


def _accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predictions == labels))


def evaluate(source: Union[Checkpoint, MTLAMModel], split: ToyDataset, batch_size: int = EVAL_BATCH_SIZE) -> EvalReport:
    """Top-1 accuracy of all three heads; no parameter updates."""
    if len(split) == 0:
        raise TrainingError("Cannot evaluate an empty split")
    model = model_from_checkpoint(source) if isinstance(source, Checkpoint) else source
    predictions = {'va': [], 'v': [], 'a': []}
    with no_grad():
        for batch in iter_batches(split, batch_size):
            out = model.forward(Tensor(batch.visual), Tensor(batch.audio))
            predictions['va'].append(np.argmax(out.logits_va.data, axis=-1))
            predictions['v'].append(np.argmax(out.logits_v.data, axis=-1))
            predictions['a'].append(np.argmax(out.logits_a.data, axis=-1))
    labels = split.labels
    return EvalReport(split=split.name or 'split', n=len(split),
                      acc_va=_accuracy(np.concatenate(predictions['va']), labels),
                      acc_v=_accuracy(np.concatenate(predictions['v']), labels),
                      acc_a=_accuracy(np.concatenate(predictions['a']), labels))


@dataclass
class InferenceResult:
    labels: np.ndarray
    scores: Dict[int, AddressingScore]
    logits: Optional[np.ndarray] = None

    @property
    def label(self) -> int:
        return int(self.labels.reshape(-1)[0])


def infer_visual_only(source: Union[Checkpoint, MTLAMModel], visual: np.ndarray,
                      audio: Optional[np.ndarray] = None) -> InferenceResult:
    """Classify from the visual stream alone; ``audio`` is accepted and ignored."""
    model = model_from_checkpoint(source) if isinstance(source, Checkpoint) else source
    calls = model.audio_calls
    with no_grad(), visual_only():
        out = model.forward_visual(Tensor(visual))
    if model.audio_calls != calls:
        raise AudioPathViolation("Audio temporal model ran during visual-only inference")
    return InferenceResult(labels=np.argmax(out.logits_va.data, axis=-1), scores=out.scores,
                           logits=out.logits_va.numpy())


def audio_targets(model: MTLAMModel, batch: Batch) -> Dict[int, np.ndarray]:
    """Audio pyramid levels at the current parameters, one array per enabled memory level."""
    with no_grad():
        pyramid = model.encode_audio(Tensor(batch.audio))
    return {level: pyramid.level(level).numpy() for level in model.banks}


def _batch_loss(model: MTLAMModel, batch: Batch, step: int = 0,
                targets: Optional[Dict[int, np.ndarray]] = None) -> Tuple[Tensor, LossReport]:
    """Joint objective on one batch; ``targets`` pins the reconstruction targets to fixed arrays.

    Reconstruction never propagates into the audio stack, so a finite-difference
    oracle must hold the targets fixed to measure the same function.
    """
    out = model.forward(Tensor(batch.visual), Tensor(batch.audio))
    levels = sorted(out.recalled)
    if targets is None:
        target_levels = [out.audio.level(i) for i in levels]
    else:
        target_levels = [Tensor(targets[i]) for i in levels]
    try:
        return joint_objective([out.recalled[i] for i in levels], target_levels,
                               [model.banks[i] for i in levels], out.logits_v, out.logits_a, out.logits_va,
                               batch.labels, model.cfg.loss)
    except NonFiniteLossError as e:
        raise NumericalError(step, str(e)) from e


class Trainer:
    """Joint training on the total objective with best/last checkpoints."""

    def __init__(self, model: MTLAMModel, out_dir: Optional[str] = None):
        self.model = model
        self.cfg = model.cfg
        self.out_dir = out_dir
        self.optimizer = make_optimizer(model.parameters(), self.cfg.optimizer)
        self.log = MetricsLog()
        self.metrics = {
            'start_time': None,
            'end_time': None,
            'duration': None,
            'steps': 0,
            'best_val_acc': None,
            'best_epoch': None,
        }

    def train_step(self, batch: Batch, lr: float, step: int) -> LossReport:
        with Graph() as graph:
            total, report = _batch_loss(self.model, batch, step)
        self.optimizer.zero_grad()
        graph.backward(total)
        self.optimizer.step(lr)
        return report

    def _save(self, ckpt: Checkpoint, name: str) -> None:
        if self.out_dir:
            save_checkpoint(ckpt, os.path.join(self.out_dir, name))

    def train(self, train_set: ToyDataset, val_set: ToyDataset,
              resume: Optional[Checkpoint] = None) -> Tuple[Checkpoint, MetricsLog]:
        """Returns the best-validation checkpoint (fused head) and the metrics log."""
        if len(train_set) == 0:
            raise TrainingError("Training set is empty")
        if len(val_set) == 0:
            raise TrainingError("Validation set is empty")
        steps_per_epoch = math.ceil(len(train_set) / self.cfg.batch_size)
        total_steps = self.cfg.epochs * steps_per_epoch
        schedule = CosineAnnealingLR(self.cfg.optimizer.lr_max, self.cfg.optimizer.lr_min,
                                     self.cfg.optimizer.schedule_steps or total_steps)

        step, start_epoch, best_acc, best = 0, 0, -1.0, None
        if resume is not None:
            step, start_epoch, best_acc, best = self._resume(resume, steps_per_epoch)

        self.metrics['start_time'] = time.time()
        logger.info(f"Training levels {self.cfg.levels} for epochs {start_epoch + 1}..{self.cfg.epochs} "
                    f"({steps_per_epoch} steps/epoch, seed {self.cfg.seed})")
        for epoch in range(start_epoch, self.cfg.epochs):
            for batch in iter_batches(train_set, self.cfg.batch_size, seed=self.cfg.seed, epoch=epoch):
                report = self.train_step(batch, schedule(step), step)
                self.log.add_step(step, report)
                logger.debug(f"step {step} lr {schedule(step):.3e} loss {report.total:.5f}")
                step += 1

            val = evaluate(self.model, val_set)
            self.log.add_epoch(epoch, val)
            improved = val.acc_va > best_acc
            if improved:
                best_acc = val.acc_va
                self.metrics['best_epoch'] = epoch
            metadata = {'epoch': epoch + 1, 'val_acc_va': val.acc_va, 'best_val_acc': best_acc}
            last = self.model.checkpoint(step, self.optimizer.state(), metadata)
            if improved:
                best = last
                self._save(best, 'best.mtlc')
            self._save(last, 'last.mtlc')
            if self.out_dir:
                self.log.save(self.out_dir)
            logger.info(f"Epoch {epoch + 1}/{self.cfg.epochs}: val acc_va={val.acc_va:.4f} "
                        f"acc_v={val.acc_v:.4f} acc_a={val.acc_a:.4f}")

        self.metrics['end_time'] = time.time()
        self.metrics['duration'] = self.metrics['end_time'] - self.metrics['start_time']
        self.metrics['steps'] = step
        self.metrics['best_val_acc'] = best_acc
        if best is None:
            best = self.model.checkpoint(step, self.optimizer.state(), {'best_val_acc': best_acc})
        logger.info(f"Training finished in {self.metrics['duration']:.2f}s, best val acc_va {best_acc:.4f}")
        return best, self.log

    def _resume(self, ckpt: Checkpoint, steps_per_epoch: int) -> Tuple[int, int, float, Optional[Checkpoint]]:
        if ckpt.step % steps_per_epoch:
            raise TrainingError(f"Checkpoint step {ckpt.step} is not an epoch boundary ({steps_per_epoch} steps/epoch)")
        start_epoch = ckpt.step // steps_per_epoch
        best_acc = float(ckpt.metadata.get('best_val_acc', -1.0))
        best = None
        if start_epoch > 0:
            # the best checkpoint so far lives in the run directory, not in last.mtlc
            best_path = os.path.join(self.out_dir, 'best.mtlc') if self.out_dir else None
            if best_path is None or not os.path.exists(best_path):
                raise TrainingError(f"Resuming at step {ckpt.step} needs the run directory holding best.mtlc")
            best = load_checkpoint(best_path, self.cfg)
        self.model.load_state(ckpt.parameters)
        self.optimizer.load_state(ckpt.momentum, step=ckpt.step)
        if self.out_dir:
            self.log = MetricsLog.load(self.out_dir)
            self.log.truncate(ckpt.step, start_epoch)
        logger.info(f"Resuming at step {ckpt.step} (epoch {start_epoch})")
        return ckpt.step, start_epoch, best_acc, best


def train(model: MTLAMModel, train_set: ToyDataset, val_set: ToyDataset, out_dir: Optional[str] = None,
          resume: Optional[Checkpoint] = None) -> Tuple[Checkpoint, MetricsLog]:
    return Trainer(model, out_dir).train(train_set, val_set, resume)


def run_config(model_cfg: ModelConfig, levels: Sequence[int], seed: int) -> ModelConfig:
    data = model_cfg.model_dump()
    data.update(levels=list(levels), seed=seed)
    return ModelConfig.model_validate(data)


def _ablation_run(model_cfg: ModelConfig, splits: Tuple[ToyDataset, ToyDataset, ToyDataset]) -> float:
    train_set, val_set, test_set = splits
    best, _ = Trainer(build_model(model_cfg)).train(train_set, val_set)
    report = evaluate(best, test_set)
    logger.info(f"Ablation run levels={model_cfg.levels} seed={model_cfg.seed}: test acc_va={report.acc_va:.4f}")
    return report.acc_va


def ablate(cfg: ExperimentConfig, level_subsets: Sequence[Sequence[int]],
           splits: Tuple[ToyDataset, ToyDataset, ToyDataset], threads: int = 1) -> pd.DataFrame:
    """One row per level subset: membership flags plus mean/std test accuracy (percent) over cfg.seeds."""
    configs = [run_config(cfg.model, subset, seed) for subset in level_subsets for seed in cfg.seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            accuracies = list(pool.map(lambda c: _ablation_run(c, splits), configs))
    else:
        accuracies = [_ablation_run(c, splits) for c in configs]

    memory_levels = range(1, cfg.model.visual.n_layers)
    rows = []
    n_seeds = len(cfg.seeds)
    for index, subset in enumerate(level_subsets):
        runs = np.array(accuracies[index * n_seeds:(index + 1) * n_seeds]) * 100
        row = {'baseline': 1}
        row.update({f"mtlam_{level}": int(level in subset) for level in memory_levels})
        row.update(acc_mean=float(runs.mean()), acc_std=float(runs.std(ddof=1)) if n_seeds > 1 else 0.0,
                   n_seeds=n_seeds)
        rows.append(row)
    return pd.DataFrame(rows)


@dataclass
class GradcheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    instance: int = 0


@dataclass
class GradcheckReport:
    entries: List[GradcheckEntry]
    tolerance: float
    eps: float

    @property
    def max_error(self) -> float:
        return max(entry.rel_error for entry in self.entries)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame([entry.__dict__ for entry in self.entries])


def _analytic_gradients(model: MTLAMModel, batch: Batch) -> Dict[str, np.ndarray]:
    for p in model.parameters().values():
        p.zero_grad()
    with Graph() as graph:
        total, _ = _batch_loss(model, batch)
    graph.backward(total)
    return {name: (np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64))
            for name, p in model.parameters().items()}


def gradient_check(model: MTLAMModel, batch: Batch, n_params: int = 20, seed: int = 0,
                   eps: float = MODEL_GRADCHECK_EPS, tolerance: float = MODEL_GRADCHECK_TOL,
                   instance: int = 0) -> GradcheckReport:
    """Compare analytic gradients with central differences on randomly chosen scalar parameters.

    The model must store float64 parameters (build it under ``precision(np.float64)``).
    Reconstruction targets are frozen at the unperturbed parameters, matching the
    detached targets of the analytic pass.
    """
    if n_params < 1:
        raise ValueError(f"n_params must be positive, got {n_params}")
    parameters = model.parameters()
    if any(p.dtype != np.float64 for p in parameters.values()):
        raise TrainingError("Gradient check needs a model built under precision(np.float64)")

    with precision(np.float64):
        analytic = _analytic_gradients(model, batch)
        targets = audio_targets(model, batch)
        rng = np.random.default_rng(seed)
        names = list(rng.permutation(sorted(parameters)))
        entries = []
        for i in range(n_params):
            name = names[i % len(names)]
            tensor = parameters[name]
            index = int(rng.integers(tensor.size))
            numeric = numerical_gradient(lambda: _batch_loss(model, batch, targets=targets)[0], tensor, eps, [index])[0]
            value = float(analytic[name].ravel()[index])
            error = float(relative_error(value, numeric))
            entries.append(GradcheckEntry(name, index, value, float(numeric), error, instance))
            logger.debug(f"gradcheck {name}[{index}]: analytic {value:.6e} numeric {numeric:.6e} rel {error:.2e}")
    report = GradcheckReport(entries=entries, tolerance=tolerance, eps=eps)
    logger.info(f"Gradient check on {n_params} parameters: max relative error {report.max_error:.3e}")
    return report


def gradcheck_model(cfg: ExperimentConfig, n_params: int = 20, seed: int = 0, instances: int = 1) -> GradcheckReport:
    """Float64 gradient check of freshly built models, each on its own two-sample batch.

    Instance ``i`` draws its model initialisation, batch and parameter choice from ``seed + i``.
    """
    if instances < 1:
        raise ValueError(f"instances must be positive, got {instances}")
    task = ToyTask(cfg.task)
    entries = []
    for instance in range(instances):
        instance_seed = seed + instance
        sample = task.make_split(2, np.random.default_rng([cfg.task.seed, instance_seed]), 'gradcheck')
        with precision(np.float64):
            model = build_model(cfg.model, seed=cfg.model.seed + instance)
            batch = Batch(sample.visual.astype(np.float64), sample.audio.astype(np.float64), sample.labels)
            entries.extend(gradient_check(model, batch, n_params, instance_seed, instance=instance).entries)
    return GradcheckReport(entries=entries, tolerance=MODEL_GRADCHECK_TOL, eps=MODEL_GRADCHECK_EPS)


class ContextReport(BaseModel):
    """Mean addressing-score similarity for matched vs mismatched context pairs."""
    level: int
    n_pairs: int
    matched_mean: float
    mismatched_mean: float
    difference: float
    ci_low: float
    ci_high: float


def _score_similarity(model: MTLAMModel, first: np.ndarray, second: np.ndarray, level: int) -> float:
    a = infer_visual_only(model, first).scores[level].scores.data.astype(np.float64).ravel()
    b = infer_visual_only(model, second).scores[level].scores.data.astype(np.float64).ravel()
    return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12))


def context_consistency(model: MTLAMModel, task: ToyTask, level: int, n_pairs: int = 100, seed: int = 0,
                        n_boot: int = 1000) -> ContextReport:
    """Addressing-score cosine similarity for pairs sharing the word sequence vs independent sequences.

    Both pair kinds share the centre word; matched pairs also share every
    neighbour and differ only in noise.
    """
    if level not in model.banks:
        raise ValueError(f"Level {level} has no memory bank (enabled: {sorted(model.banks)})")
    if n_pairs < 2:
        raise ValueError(f"n_pairs must be at least 2, got {n_pairs}")
    rng = np.random.default_rng(seed)
    matched, mismatched = [], []
    for _ in range(n_pairs):
        center = int(rng.integers(task.cfg.vocab_size))
        words = task.sample_words(center, rng)
        first, _ = task.render(words, rng)
        second, _ = task.render(words, rng)
        matched.append(_score_similarity(model, first, second, level))

        third, _ = task.render(task.sample_words(center, rng), rng)
        fourth, _ = task.render(task.sample_words(center, rng), rng)
        mismatched.append(_score_similarity(model, third, fourth, level))

    matched, mismatched = np.array(matched), np.array(mismatched)
    boot = np.empty(n_boot)
    for b in range(n_boot):
        boot[b] = (matched[rng.integers(n_pairs, size=n_pairs)].mean()
                   - mismatched[rng.integers(n_pairs, size=n_pairs)].mean())
    report = ContextReport(level=level, n_pairs=n_pairs, matched_mean=float(matched.mean()),
                           mismatched_mean=float(mismatched.mean()),
                           difference=float(matched.mean() - mismatched.mean()),
                           ci_low=float(np.percentile(boot, 2.5)), ci_high=float(np.percentile(boot, 97.5)))
    logger.info(f"Context consistency level {level}: matched {report.matched_mean:.4f} vs "
                f"mismatched {report.mismatched_mean:.4f}")
    return report
