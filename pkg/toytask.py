"""
Synthetic paired visual/audio word streams.

Visual frames only identify a word's confusion group (viseme-like ambiguity);
audio frames identify the word. A sharpened bigram chain makes neighbouring
words informative about the centre word, so long-range context matters.
"""
import logging
import os
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

logger = logging.getLogger(__name__)

RECORD_MAGIC = b'MTLT'
RECORD_VERSION = 1
SIGMA_FLOOR = 1e-3
MODALITIES = ('visual', 'audio', 'both')


class TaskConfigError(ValueError):
    """Raised when a toy task configuration violates its invariants."""
    pass


class RecordFormatError(ValueError):
    """Raised when a dataset record file is malformed."""
    pass


def _default_groups() -> List[List[int]]:
    return [list(range(start, start + 4)) for start in range(0, 20, 4)]


class ToyTaskConfig(BaseModel):
    """Generative parameters; words outside every confusion group are their own visual group."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    vocab_size: int = Field(default=20, ge=2)
    confusion_groups: List[List[int]] = Field(default_factory=_default_groups)
    words_per_clip: int = Field(default=5, ge=1)
    frames_per_word: int = Field(default=7, ge=1)
    feature_dim: int = Field(default=32, ge=1)
    visual_noise: float = Field(default=0.8, ge=0)
    audio_noise: float = Field(default=0.2, ge=0)
    bigram_sharpness: float = Field(default=2.0, ge=0)
    seed: int = 0

    @field_validator('confusion_groups', mode='before')
    @classmethod
    def parse_groups(cls, v):
        """Accept "0,1,2,3;4,5,6,7" as written in config files."""
        if isinstance(v, str):
            return [[int(word) for word in group.split(',') if word.strip()]
                    for group in v.split(';') if group.strip()]
        return v

    @model_validator(mode='after')
    def check_invariants(self):
        violations = invariant_violations(self)
        if violations:
            raise ValueError('; '.join(violations))
        return self

    @property
    def clip_length(self) -> int:
        return self.words_per_clip * self.frames_per_word


def invariant_violations(cfg: ToyTaskConfig) -> List[str]:
    """Human-readable list of violated invariants, each naming its field."""
    violations = []
    if cfg.words_per_clip % 2 == 0:
        violations.append(f"words_per_clip must be odd so a centre word exists, got {cfg.words_per_clip}")
    if cfg.vocab_size < 2 * len(cfg.confusion_groups):
        violations.append(
            f"vocab_size {cfg.vocab_size} must be at least twice the number of confusion_groups "
            f"({len(cfg.confusion_groups)})")
    seen = set()
    for group in cfg.confusion_groups:
        for word in group:
            if not 0 <= word < cfg.vocab_size:
                violations.append(f"confusion_groups word {word} outside vocabulary [0, {cfg.vocab_size})")
            elif word in seen:
                violations.append(f"confusion_groups word {word} appears in more than one group")
            seen.add(word)
    if cfg.audio_noise > cfg.visual_noise or (cfg.audio_noise == cfg.visual_noise and cfg.visual_noise > 0):
        violations.append(
            f"visual_noise ({cfg.visual_noise}) must exceed audio_noise ({cfg.audio_noise}); "
            f"they may only be equal when both are zero")
    return violations


def check_invariants(cfg: ToyTaskConfig) -> None:
    violations = invariant_violations(cfg)
    if violations:
        raise TaskConfigError('; '.join(violations))


@dataclass
class ToySample:
    visual: np.ndarray
    audio: np.ndarray
    label: int
    words: Optional[np.ndarray] = None


@dataclass
class ToyDataset:
    """Stacked samples: visual/audio (n, T, D_in) float32, labels (n,), optional word sequences (n, W)."""
    visual: np.ndarray
    audio: np.ndarray
    labels: np.ndarray
    words: Optional[np.ndarray] = None
    name: str = ''

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, index: int) -> ToySample:
        words = None if self.words is None else self.words[index]
        return ToySample(self.visual[index], self.audio[index], int(self.labels[index]), words)

    def subset(self, indices: Sequence[int]) -> 'ToyDataset':
        indices = np.asarray(indices, dtype=np.int64)
        words = None if self.words is None else self.words[indices]
        return ToyDataset(self.visual[indices], self.audio[indices], self.labels[indices], words, self.name)


def _unit_prototypes(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Orthonormal rows when count <= dim, otherwise random unit vectors."""
    if count <= dim:
        basis, _ = np.linalg.qr(rng.standard_normal((dim, count)))
        return basis.T.copy()
    vectors = rng.standard_normal((count, dim))
    return vectors / np.linalg.norm(vectors, axis=1, keepdims=True)


def _logsumexp(values: np.ndarray, axis: int) -> np.ndarray:
    peak = values.max(axis=axis, keepdims=True)
    return (peak + np.log(np.exp(values - peak).sum(axis=axis, keepdims=True))).squeeze(axis)


class ToyTask:
    """Fixed generative parameters for one ToyTaskConfig."""

    def __init__(self, cfg: ToyTaskConfig):
        check_invariants(cfg)
        self.cfg = cfg
        vocab = cfg.vocab_size

        group_of = np.full(vocab, -1, dtype=np.int64)
        for index, group in enumerate(cfg.confusion_groups):
            group_of[group] = index
        next_group = len(cfg.confusion_groups)
        for word in range(vocab):
            if group_of[word] < 0:
                group_of[word] = next_group
                next_group += 1
        self.group_of = group_of
        self.n_groups = next_group

        self.visual_prototypes = _unit_prototypes(self.n_groups, cfg.feature_dim, np.random.default_rng([cfg.seed, 1]))
        self.audio_prototypes = _unit_prototypes(vocab, cfg.feature_dim, np.random.default_rng([cfg.seed, 2]))

        scores = np.random.default_rng([cfg.seed, 3]).standard_normal((vocab, vocab)) * cfg.bigram_sharpness
        # forward[w, w'] = log P(next = w' | w); backward[c, w] = log P(previous = w | c)
        self.log_forward = scores - _logsumexp(scores, axis=1)[:, None]
        reversed_scores = self.log_forward.T
        self.log_backward = reversed_scores - _logsumexp(reversed_scores, axis=1)[:, None]

    @property
    def center(self) -> int:
        return self.cfg.words_per_clip // 2

    def sample_words(self, center_word: int, rng: np.random.Generator) -> np.ndarray:
        count = self.cfg.words_per_clip
        words = np.empty(count, dtype=np.int64)
        words[self.center] = center_word
        forward = np.exp(self.log_forward)
        backward = np.exp(self.log_backward)
        for position in range(self.center + 1, count):
            words[position] = rng.choice(self.cfg.vocab_size, p=forward[words[position - 1]])
        for position in range(self.center - 1, -1, -1):
            words[position] = rng.choice(self.cfg.vocab_size, p=backward[words[position + 1]])
        return words

    def render(self, words: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Frame streams (T, D_in) for a word sequence; each word lasts frames_per_word frames."""
        frames = self.cfg.frames_per_word
        visual_clean = np.repeat(self.visual_prototypes[self.group_of[words]], frames, axis=0)
        audio_clean = np.repeat(self.audio_prototypes[words], frames, axis=0)
        visual = visual_clean + self.cfg.visual_noise * rng.standard_normal(visual_clean.shape)
        audio = audio_clean + self.cfg.audio_noise * rng.standard_normal(audio_clean.shape)
        return visual.astype(np.float32), audio.astype(np.float32)

    def make_split(self, n_samples: int, rng: np.random.Generator, name: str) -> ToyDataset:
        """Class-balanced centre words, shuffled."""
        labels = rng.permutation(np.arange(n_samples) % self.cfg.vocab_size)
        shape = (n_samples, self.cfg.clip_length, self.cfg.feature_dim)
        visual = np.empty(shape, dtype=np.float32)
        audio = np.empty(shape, dtype=np.float32)
        words = np.empty((n_samples, self.cfg.words_per_clip), dtype=np.int64)
        for index, label in enumerate(labels):
            words[index] = self.sample_words(int(label), rng)
            visual[index], audio[index] = self.render(words[index], rng)
        return ToyDataset(visual, audio, labels.astype(np.int64), words, name)

    def generate(self, n_samples: int, split_seed: int, val_fraction: float = 0.15,
                 test_fraction: float = 0.15) -> Tuple[ToyDataset, ToyDataset, ToyDataset]:
        if n_samples < 3:
            raise TaskConfigError(f"n_samples must be at least 3 to fill three splits, got {n_samples}")
        n_val = max(1, int(round(n_samples * val_fraction)))
        n_test = max(1, int(round(n_samples * test_fraction)))
        n_train = n_samples - n_val - n_test
        if n_train < 1:
            raise TaskConfigError(
                f"val_fraction {val_fraction} and test_fraction {test_fraction} leave no training samples")
        splits = []
        for index, (name, count) in enumerate((('train', n_train), ('val', n_val), ('test', n_test))):
            rng = np.random.default_rng([self.cfg.seed, split_seed, index])
            splits.append(self.make_split(count, rng, name))
        logger.info(f"Generated splits train={n_train} val={n_val} test={n_test} (split_seed={split_seed})")
        return tuple(splits)

    def word_log_likelihoods(self, stream: np.ndarray, modality: str) -> np.ndarray:
        """(W, C) log-likelihood of each position's frames under each word, up to a constant."""
        clip = stream.astype(np.float64).reshape(self.cfg.words_per_clip, self.cfg.frames_per_word, -1)
        if modality == 'visual':
            prototypes, sigma = self.visual_prototypes, self.cfg.visual_noise
        elif modality == 'audio':
            prototypes, sigma = self.audio_prototypes, self.cfg.audio_noise
        else:
            raise ValueError(f"Unknown modality {modality!r}")
        sigma = max(sigma, SIGMA_FLOOR)
        distances = ((clip[:, :, None, :] - prototypes[None, None, :, :]) ** 2).sum(axis=(1, 3))
        log_lik = -distances / (2 * sigma ** 2)
        if modality == 'visual':
            log_lik = log_lik[:, self.group_of]
        return log_lik

    def log_posterior(self, visual: Optional[np.ndarray], audio: Optional[np.ndarray] = None,
                      modality: str = 'visual', context: str = 'full') -> np.ndarray:
        """Unnormalised log posterior over the centre word under the true generative model."""
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
        evidence = np.zeros((self.cfg.words_per_clip, self.cfg.vocab_size))
        if modality in ('visual', 'both'):
            evidence += self.word_log_likelihoods(visual, 'visual')
        if modality in ('audio', 'both'):
            evidence += self.word_log_likelihoods(audio, 'audio')
        if context == 'center':
            return evidence[self.center]
        if context != 'full':
            raise ValueError(f"context must be 'full' or 'center', got {context!r}")

        right = np.zeros(self.cfg.vocab_size)
        for position in range(self.cfg.words_per_clip - 1, self.center, -1):
            right = _logsumexp(self.log_forward + (evidence[position] + right)[None, :], axis=1)
        left = np.zeros(self.cfg.vocab_size)
        for position in range(self.center):
            left = _logsumexp(self.log_backward + (evidence[position] + left)[None, :], axis=1)
        return evidence[self.center] + right + left

    def bayes_predict(self, split: ToyDataset, modality: str = 'visual', context: str = 'full') -> np.ndarray:
        return np.array([
            int(np.argmax(self.log_posterior(split.visual[i], split.audio[i], modality, context)))
            for i in range(len(split))
        ], dtype=np.int64)

    def nearest_prototype_predict(self, split: ToyDataset, modality: str = 'visual') -> np.ndarray:
        """Nearest word prototype to the mean centre-window frame; ties go to the lowest word index."""
        frames = self.cfg.frames_per_word
        start = self.center * frames
        stream = split.visual if modality == 'visual' else split.audio
        window = stream[:, start:start + frames].astype(np.float64).mean(axis=1)
        if modality == 'visual':
            prototypes = self.visual_prototypes[self.group_of]
        elif modality == 'audio':
            prototypes = self.audio_prototypes
        else:
            raise ValueError(f"Unknown modality {modality!r}")
        distances = ((window[:, None, :] - prototypes[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(distances, axis=1)


class OracleReport(BaseModel):
    """Accuracy with its binomial standard error and 95% interval."""
    accuracy: float
    stderr: float
    ci_low: float
    ci_high: float
    n: int


def generate(cfg: ToyTaskConfig, n_samples: int, split_seed: int, val_fraction: float = 0.15,
             test_fraction: float = 0.15) -> Tuple[ToyDataset, ToyDataset, ToyDataset]:
    """Deterministic (train, val, test) splits for a configuration and split seed."""
    return ToyTask(cfg).generate(n_samples, split_seed, val_fraction, test_fraction)


def bayes_oracle_accuracy(cfg: ToyTaskConfig, split: ToyDataset, modality: str = 'visual',
                          context: str = 'full') -> float:
    """Accuracy of the exact posterior-over-centre-word classifier."""
    predictions = ToyTask(cfg).bayes_predict(split, modality, context)
    return float(np.mean(predictions == split.labels))


def bayes_oracle_report(cfg: ToyTaskConfig, split: ToyDataset, modality: str = 'visual',
                        context: str = 'full') -> OracleReport:
    accuracy = bayes_oracle_accuracy(cfg, split, modality, context)
    n = len(split)
    stderr = float(np.sqrt(accuracy * (1 - accuracy) / n))
    return OracleReport(accuracy=accuracy, stderr=stderr, ci_low=max(0.0, accuracy - 1.96 * stderr),
                        ci_high=min(1.0, accuracy + 1.96 * stderr), n=n)


def nearest_prototype_accuracy(cfg: ToyTaskConfig, split: ToyDataset, modality: str = 'visual') -> float:
    predictions = ToyTask(cfg).nearest_prototype_predict(split, modality)
    return float(np.mean(predictions == split.labels))


def save_records(dataset: ToyDataset, path: str) -> str:
    """Write MTLT: magic, u32 version, u32 count, then per sample u32 label, T, D_in and float32 payloads."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(struct.pack('<4sII', RECORD_MAGIC, RECORD_VERSION, len(dataset)))
        for index in range(len(dataset)):
            length, dim = dataset.visual[index].shape
            f.write(struct.pack('<III', int(dataset.labels[index]), length, dim))
            f.write(dataset.visual[index].astype('<f4').tobytes())
            f.write(dataset.audio[index].astype('<f4').tobytes())
    logger.info(f"Saved {len(dataset)} records to {path}")
    return path


def load_records(path: str, name: str = '') -> ToyDataset:
    with open(path, 'rb') as f:
        payload = f.read()
    header = struct.calcsize('<4sII')
    if len(payload) < header:
        raise RecordFormatError(f"{path}: file too short for a record header")
    magic, version, count = struct.unpack_from('<4sII', payload, 0)
    if magic != RECORD_MAGIC:
        raise RecordFormatError(f"{path}: bad magic {magic!r}")
    if version != RECORD_VERSION:
        raise RecordFormatError(f"{path}: unsupported version {version}")

    offset = header
    labels, visual, audio = [], [], []
    for index in range(count):
        if offset + 12 > len(payload):
            raise RecordFormatError(f"{path}: truncated at sample {index}")
        label, length, dim = struct.unpack_from('<III', payload, offset)
        offset += 12
        size = length * dim * 4
        if offset + 2 * size > len(payload):
            raise RecordFormatError(f"{path}: truncated payload at sample {index}")
        visual.append(np.frombuffer(payload, dtype='<f4', count=length * dim, offset=offset).reshape(length, dim))
        audio.append(np.frombuffer(payload, dtype='<f4', count=length * dim, offset=offset + size).reshape(length, dim))
        labels.append(label)
        offset += 2 * size
    if offset != len(payload):
        raise RecordFormatError(f"{path}: {len(payload) - offset} trailing bytes")
    if count == 0:
        raise RecordFormatError(f"{path}: no samples")
    if len({v.shape for v in visual}) != 1:
        raise RecordFormatError(f"{path}: samples have differing (T, D_in) shapes")
    return ToyDataset(np.stack(visual).astype(np.float32), np.stack(audio).astype(np.float32),
                      np.array(labels, dtype=np.int64), None, name or os.path.splitext(os.path.basename(path))[0])
