"""
Visual and audio temporal models: stacks of dilated 1-D convolutions whose
per-layer receptive fields line up across the two modalities.
"""
import logging
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from tensor import Tensor, conv1d_dilated, no_grad, randn, relu, add

logger = logging.getLogger(__name__)

DEFAULT_KERNEL_SIZE = 3
DEFAULT_DILATIONS = (1, 2, 4, 8)
DEFAULT_WIDTH = 64


class AlignmentError(ValueError):
    """Raised when visual and audio stacks disagree on a layer's receptive field."""

    def __init__(self, layer: int, message: str):
        super().__init__(message)
        self.layer = layer


def receptive_field(k: int, d: int) -> int:
    """Receptive field of one stride-1 layer: (k - 1)(d - 1) + k."""
    if k < 1 or d < 1:
        raise ValueError(f"Kernel size and dilation must be positive, got k={k}, d={d}")
    return (k - 1) * (d - 1) + k


def _split_ints(value):
    if isinstance(value, str):
        return [int(part) for part in value.split(',') if part.strip()]
    return value


class TemporalLayerConfig(BaseModel):
    """One dilated convolution layer; branches > 1 adds parallel kernels k, k+2, ..."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kernel_size: int = Field(..., ge=1)
    dilation: int = Field(..., ge=1)
    channels_in: int = Field(..., ge=1)
    channels_out: int = Field(..., ge=1)
    branches: int = Field(default=1, ge=1)

    @field_validator('kernel_size')
    @classmethod
    def kernel_must_be_odd(cls, v):
        if v % 2 == 0:
            raise ValueError(f"kernel_size must be odd for a centered tap, got {v}")
        return v

    @property
    def branch_kernel_sizes(self) -> List[int]:
        return [self.kernel_size + 2 * b for b in range(self.branches)]

    @property
    def footprint(self) -> int:
        return receptive_field(max(self.branch_kernel_sizes), self.dilation)


class TemporalStackConfig(BaseModel):
    """Ordered layers of a temporal model.

    Accepts either explicit ``layers`` or the compact schedule
    ``kernel_sizes`` / ``dilations`` / ``width`` / ``branches`` used in config files.
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    layers: List[TemporalLayerConfig] = Field(..., min_length=2)

    @model_validator(mode='before')
    @classmethod
    def expand_schedule(cls, data):
        if not isinstance(data, dict) or 'layers' in data:
            return data
        data = dict(data)
        kernel_sizes = _split_ints(data.pop('kernel_sizes', None))
        dilations = _split_ints(data.pop('dilations', None))
        width = int(data.pop('width', DEFAULT_WIDTH))
        branches = int(data.pop('branches', 1))
        if kernel_sizes is None or dilations is None:
            raise ValueError("Stack schedule needs both kernel_sizes and dilations")
        if len(kernel_sizes) == 1 and len(dilations) > 1:
            kernel_sizes = kernel_sizes * len(dilations)
        if len(kernel_sizes) != len(dilations):
            raise ValueError(f"kernel_sizes {kernel_sizes} and dilations {dilations} differ in length")
        data['layers'] = [
            {'kernel_size': k, 'dilation': d, 'channels_in': width, 'channels_out': width, 'branches': branches}
            for k, d in zip(kernel_sizes, dilations)
        ]
        return data

    @model_validator(mode='after')
    def channels_must_chain(self):
        width = self.layers[0].channels_in
        for index, layer in enumerate(self.layers, start=1):
            if layer.channels_in != width or layer.channels_out != width:
                raise ValueError(
                    f"Layer {index} maps {layer.channels_in}->{layer.channels_out} channels; "
                    f"every level of a feature pyramid must keep width {width}")
        return self

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return self.layers[0].channels_in

    @classmethod
    def default(cls, width: int = DEFAULT_WIDTH) -> 'TemporalStackConfig':
        return cls(kernel_sizes=[DEFAULT_KERNEL_SIZE], dilations=list(DEFAULT_DILATIONS), width=width)


def cumulative_receptive_field(stack: TemporalStackConfig, upto_layer: int) -> int:
    """Input window seen by one output frame after layers 1..upto_layer (R_0 = 1)."""
    if not 1 <= upto_layer <= stack.n_layers:
        raise IndexError(f"Layer index {upto_layer} out of range 1..{stack.n_layers}")
    field_size = 1
    for layer in stack.layers[:upto_layer]:
        field_size += layer.footprint - 1
    return field_size


def first_misaligned_layer(visual: TemporalStackConfig, audio: TemporalStackConfig) -> Optional[int]:
    """1-based index of the first layer whose cumulative fields differ, or None."""
    if visual.n_layers != audio.n_layers:
        return min(visual.n_layers, audio.n_layers) + 1
    for layer in range(1, visual.n_layers + 1):
        if cumulative_receptive_field(visual, layer) != cumulative_receptive_field(audio, layer):
            return layer
    return None


def verify_alignment(visual: TemporalStackConfig, audio: TemporalStackConfig) -> bool:
    """True when both stacks have the same cumulative receptive field at every layer."""
    return first_misaligned_layer(visual, audio) is None


def require_alignment(visual: TemporalStackConfig, audio: TemporalStackConfig) -> None:
    """Raise AlignmentError naming the first layer where the stacks diverge."""
    layer = first_misaligned_layer(visual, audio)
    if layer is None:
        return
    if visual.n_layers != audio.n_layers:
        raise AlignmentError(layer, f"Visual stack has {visual.n_layers} layers, audio stack has {audio.n_layers}")
    raise AlignmentError(
        layer,
        f"Receptive fields diverge at layer {layer}: visual "
        f"{cumulative_receptive_field(visual, layer)} vs audio {cumulative_receptive_field(audio, layer)} frames")


@dataclass
class FeaturePyramid:
    """Per-layer feature sequences of one modality; level i is the output of layer i."""
    features: List[Tensor]
    modality: str

    def __len__(self) -> int:
        return len(self.features)

    def level(self, index: int) -> Tensor:
        if not 1 <= index <= len(self.features):
            raise IndexError(f"Level {index} out of range 1..{len(self.features)}")
        return self.features[index - 1]

    @property
    def top(self) -> Tensor:
        return self.features[-1]


def parameter_seed(seed: int, name: str) -> int:
    """Stable per-parameter seed derived from the model seed and the parameter name."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


class TemporalModel:
    """Stack of conv -> ReLU layers without bias; parameters are named <prefix>.layer<i>.kernel<b>."""

    def __init__(self, stack: TemporalStackConfig, modality: str, seed: int, prefix: Optional[str] = None):
        self.stack = stack
        self.modality = modality
        self.prefix = prefix or modality
        self.kernels: List[List[Tensor]] = []
        for index, layer in enumerate(stack.layers, start=1):
            branch_kernels = []
            for branch, k in enumerate(layer.branch_kernel_sizes):
                name = f"{self.prefix}.layer{index}.kernel{branch}"
                scale = np.sqrt(2.0 / (k * layer.channels_in * layer.branches))
                branch_kernels.append(randn((k, layer.channels_in, layer.channels_out),
                                            seed=parameter_seed(seed, name), scale=scale,
                                            requires_grad=True, name=name))
            self.kernels.append(branch_kernels)
        logger.debug(f"Built {modality} temporal model with {stack.n_layers} layers")

    def parameters(self) -> Dict[str, Tensor]:
        return {kernel.name: kernel for branch_kernels in self.kernels for kernel in branch_kernels}

    def layer(self, index: int, x: Tensor) -> Tensor:
        """Apply layer ``index`` (1-based): summed branch convolutions, then ReLU."""
        config = self.stack.layers[index - 1]
        out = None
        for kernel in self.kernels[index - 1]:
            branch = conv1d_dilated(x, kernel, config.dilation)
            out = branch if out is None else add(out, branch)
        return relu(out)

    def forward_pyramid(self, x: Tensor) -> FeaturePyramid:
        """Features after every layer, level 1 first; T is preserved."""
        if x.shape[-1] != self.stack.width:
            raise ValueError(f"{self.modality} input width {x.shape[-1]} does not match stack width {self.stack.width}")
        features = []
        for index in range(1, self.stack.n_layers + 1):
            x = self.layer(index, x)
            features.append(x)
        return FeaturePyramid(features=features, modality=self.modality)


def forward_pyramid(model: TemporalModel, x: Tensor) -> FeaturePyramid:
    """Functional form of TemporalModel.forward_pyramid."""
    return model.forward_pyramid(x)


def perturbation_footprint(model: TemporalModel, length: int, position: int, seed: int = 0,
                           tol: float = 0.0) -> List[List[int]]:
    """Output frames per level that change when input frame ``position`` is perturbed."""
    base = np.abs(np.random.default_rng(seed).standard_normal((length, model.stack.width))) + 0.1
    bumped = base.copy()
    bumped[position] += 1.0
    with no_grad():
        reference = model.forward_pyramid(Tensor(base))
        perturbed = model.forward_pyramid(Tensor(bumped))
    footprints = []
    for before, after in zip(reference.features, perturbed.features):
        changed = np.abs(after.data.astype(np.float64) - before.data.astype(np.float64)).max(axis=-1) > tol
        footprints.append(np.flatnonzero(changed).tolist())
    return footprints


def expected_footprint(stack: TemporalStackConfig, level: int, length: int, position: int) -> List[int]:
    """Frames within half the cumulative receptive field of ``position``, clipped to the sequence."""
    half = (cumulative_receptive_field(stack, level) - 1) // 2
    return [s for s in range(length) if abs(s - position) <= half]


def layer_footprints(stack: TemporalStackConfig) -> Sequence[int]:
    """Cumulative receptive field of every layer."""
    return [cumulative_receptive_field(stack, i) for i in range(1, stack.n_layers + 1)]
