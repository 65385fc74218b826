"""The classification network: staged encoder, per-stage projectors, task heads.

The encoder halves spatial resolution while doubling channel depth four
times. Stage one is a 2x2 space-to-depth patchify followed by a learned
channel mix; later stages are 2x2 average pooling followed by a channel
mix; every stage ends in ReLU. A projector per stage global-average-pools
its feature map and runs a two-hidden-layer MLP to a fixed embedding
width. Each task head is one fully connected layer with softmax.

A bundle keeps two parameter sets of identical shape: the student, which
the optimizer trains, and the teacher, which is only ever rewritten by
the consolidation step between cycles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, ShapeMismatchError
from .tensor import Tensor
from .utils import TAG_PARAMS, rng_for

N_STAGES = 4


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    image_size: int = 32
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)

    def __post_init__(self):
        if len(self.stage_channels) != N_STAGES:
            raise ConfigurationError(f"exactly {N_STAGES} stages required")
        for prev, cur in zip(self.stage_channels, self.stage_channels[1:]):
            if cur != 2 * prev:
                raise ConfigurationError(
                    f"stage channels must double, got {self.stage_channels}")
        if self.image_size < 2 or self.image_size % 2:
            raise ConfigurationError("image_size must be even and >= 2")
        size = self.image_size // 2
        for _ in range(N_STAGES - 1):
            if size > 1 and size % 2:
                raise ConfigurationError(
                    f"image_size {self.image_size} does not halve cleanly through all stages")
            size = max(1, size // 2)

    @property
    def projector_dims(self) -> tuple[int, ...]:
        return tuple(2 * c for c in self.stage_channels)

    @property
    def stage_sizes(self) -> tuple[int, ...]:
        # Spatial side length after each stage; pooling saturates at 1 so
        # tiny verification inputs still pass through all four stages.
        sizes = []
        size = self.image_size // 2
        for _ in range(N_STAGES):
            sizes.append(size)
            size = max(1, size // 2)
        return tuple(sizes)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "stage_channels": list(self.stage_channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(in_channels=d["in_channels"], image_size=d["image_size"],
                   stage_channels=tuple(d["stage_channels"]))


def parameter_names(config: EncoderConfig, class_counts: Sequence[int]) -> list[str]:
    """Canonical parameter order: encoder stages, projectors, heads."""
    names = []
    for s in range(1, N_STAGES + 1):
        names += [f"enc{s}.weight", f"enc{s}.bias"]
    for s in range(1, N_STAGES + 1):
        for k in (1, 2, 3):
            names += [f"proj{s}.fc{k}.weight", f"proj{s}.fc{k}.bias"]
    for m in range(1, len(class_counts) + 1):
        names += [f"head{m}.weight", f"head{m}.bias"]
    return names


def encoder_projector_names(params: Mapping[str, Tensor]) -> list[str]:
    return [n for n in params if n.startswith(("enc", "proj"))]


def adaptation_freeze_names(params: Mapping[str, Tensor]) -> frozenset[str]:
    """Stages I-III and their projectors: the part kept fixed during adaptation."""
    frozen = [n for n in params
              if n.startswith(("enc1.", "enc2.", "enc3.", "proj1.", "proj2.", "proj3."))]
    return frozenset(frozen)


def validate_freeze_mask(mask, params: Mapping[str, Tensor]) -> frozenset[str]:
    mask = frozenset(mask)
    unknown = mask - set(params)
    if unknown:
        raise ConfigurationError(f"freeze mask names unknown parameters: {sorted(unknown)}")
    return mask


class ModelBundle:
    """Student parameters plus the shape-identical teacher copy.

    ``params`` holds every trainable tensor (encoder, projectors, heads);
    ``teacher`` holds the consolidated encoder/projector copy and never
    requires gradients.
    """

    def __init__(self, config: EncoderConfig, class_counts: Sequence[int],
                 params: dict[str, Tensor], teacher: dict[str, Tensor]):
        self.config = config
        self.class_counts = tuple(int(k) for k in class_counts)
        self.params = params
        self.teacher = teacher
        self._validate()

    def _validate(self):
        expected = parameter_names(self.config, self.class_counts)
        if list(self.params) != expected:
            raise ConfigurationError("parameter set does not match configuration")
        shared = encoder_projector_names(self.params)
        if sorted(self.teacher) != sorted(shared):
            raise ConfigurationError("teacher must mirror encoder and projector parameters")
        for name in shared:
            if self.teacher[name].data.shape != self.params[name].data.shape:
                raise ShapeMismatchError(f"teacher/student shape mismatch at '{name}'")
        for m, k in enumerate(self.class_counts, start=1):
            if k < 2:
                raise ConfigurationError(f"task {m} needs at least 2 classes")
            if self.params[f"head{m}.weight"].data.shape[1] != k:
                raise ConfigurationError(f"head {m} width does not match {k} classes")

    @property
    def n_tasks(self) -> int:
        return len(self.class_counts)

    def copy(self) -> "ModelBundle":
        params = {n: Tensor(p.data.copy(), requires_grad=True, name=n, dtype=p.data.dtype)
                  for n, p in self.params.items()}
        teacher = {n: Tensor(p.data.copy(), name=n, dtype=p.data.dtype)
                   for n, p in self.teacher.items()}
        return ModelBundle(self.config, self.class_counts, params, teacher)

    def astype(self, dtype) -> "ModelBundle":
        params = {n: Tensor(p.data.astype(dtype), requires_grad=True, name=n, dtype=dtype)
                  for n, p in self.params.items()}
        teacher = {n: Tensor(p.data.astype(dtype), name=n, dtype=dtype)
                   for n, p in self.teacher.items()}
        return ModelBundle(self.config, self.class_counts, params, teacher)


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: EncoderConfig, class_counts: Sequence[int], seed: int) -> ModelBundle:
    """Xavier-uniform weights, zero biases, teacher starting as an exact copy."""
    rng = rng_for(seed, TAG_PARAMS)
    dtype = T.default_dtype()

    def linear(fan_in, fan_out, prefix):
        bound = xavier_bound(fan_in, fan_out)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        b = np.zeros(fan_out, dtype=dtype)
        return {f"{prefix}.weight": T.parameter(w, f"{prefix}.weight", dtype=dtype),
                f"{prefix}.bias": T.parameter(b, f"{prefix}.bias", dtype=dtype)}

    params: dict[str, Tensor] = {}
    in_width = 4 * config.in_channels
    for s, channels in enumerate(config.stage_channels, start=1):
        params.update(linear(in_width, channels, f"enc{s}"))
        in_width = channels
    for s, (channels, dim) in enumerate(
            zip(config.stage_channels, config.projector_dims), start=1):
        params.update(linear(channels, dim, f"proj{s}.fc1"))
        params.update(linear(dim, dim, f"proj{s}.fc2"))
        params.update(linear(dim, dim, f"proj{s}.fc3"))
    d4 = config.projector_dims[-1]
    for m, k in enumerate(class_counts, start=1):
        params.update(linear(d4, k, f"head{m}"))

    teacher = {n: Tensor(params[n].data.copy(), name=n, dtype=dtype)
               for n in encoder_projector_names(params)}
    return ModelBundle(config, class_counts, params, teacher)


# -- forward pass ------------------------------------------------------


def patchify2(x: Tensor) -> Tensor:
    """2x2 space-to-depth: (B, C, H, W) -> (B, 4C, H/2, W/2)."""
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"patchify needs even spatial dims, got {x.shape}")
    t = x.reshape((b, c, h // 2, 2, w // 2, 2))
    t = t.transpose((0, 3, 5, 1, 2, 4))
    return t.reshape((b, 4 * c, h // 2, w // 2))


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling; identity once the map has collapsed to 1x1."""
    b, c, h, w = x.shape
    if h == 1 and w == 1:
        return x
    if h % 2 or w % 2:
        raise ShapeMismatchError(f"pooling needs even spatial dims, got {x.shape}")
    t = x.reshape((b, c, h // 2, 2, w // 2, 2))
    return t.mean(axis=(3, 5))


def channel_mix(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-location linear map over channels: (B, C, H, W) -> (B, C', H, W)."""
    b, c, h, w = x.shape
    flat = x.transpose((0, 2, 3, 1)).reshape((b * h * w, c))
    mixed = flat @ weight + bias
    c_out = weight.shape[1]
    return mixed.reshape((b, h, w, c_out)).transpose((0, 3, 1, 2))


def encode_stages(x: Tensor, params: Mapping[str, Tensor],
                  config: EncoderConfig) -> list[Tensor]:
    """Run the four encoder stages; returns the per-stage feature maps."""
    if x.shape[1:] != (config.in_channels, config.image_size, config.image_size):
        raise ShapeMismatchError(
            f"input shape {x.shape[1:]} does not match configured "
            f"({config.in_channels}, {config.image_size}, {config.image_size})")
    features = []
    current = x
    for s in range(1, N_STAGES + 1):
        current = patchify2(current) if s == 1 else avg_pool2(current)
        current = channel_mix(current, params[f"enc{s}.weight"], params[f"enc{s}.bias"]).relu()
        features.append(current)
    return features


def project_stage(f: Tensor, params: Mapping[str, Tensor], stage: int) -> Tensor:
    """GAP to a channel vector, then the stage's two-hidden-layer MLP."""
    if stage not in range(1, N_STAGES + 1):
        raise ContractError(f"stage index must be 1..{N_STAGES}, got {stage}")
    pooled = f.mean(axis=(2, 3))
    h = (pooled @ params[f"proj{stage}.fc1.weight"] + params[f"proj{stage}.fc1.bias"]).relu()
    h = (h @ params[f"proj{stage}.fc2.weight"] + params[f"proj{stage}.fc2.bias"]).relu()
    return h @ params[f"proj{stage}.fc3.weight"] + params[f"proj{stage}.fc3.bias"]


def forward_embeddings(x: Tensor, params: Mapping[str, Tensor],
                       config: EncoderConfig) -> list[Tensor]:
    features = encode_stages(x, params, config)
    return [project_stage(f, params, s) for s, f in enumerate(features, start=1)]


def final_stage_embedding(x: Tensor, params: Mapping[str, Tensor],
                          config: EncoderConfig) -> Tensor:
    """Last-stage embedding only; skips the three unused projectors."""
    features = encode_stages(x, params, config)
    return project_stage(features[-1], params, N_STAGES)


def classify(d4: Tensor, params: Mapping[str, Tensor], task: int) -> Tensor:
    if f"head{task}.weight" not in params:
        raise ContractError(f"unknown classifier head {task}")
    logits = d4 @ params[f"head{task}.weight"] + params[f"head{task}.bias"]
    return logits.softmax(axis=-1)


def predict_all(x: Tensor, bundle: ModelBundle,
                use_teacher: bool = False) -> tuple[list[Tensor], list[Tensor]]:
    """One shared forward pass: per-task probabilities plus all four embeddings.

    With ``use_teacher`` the encoder/projector parameters come from the
    teacher copy while the heads stay the student's, i.e. the deployed
    combination after consolidation.
    """
    source: Mapping[str, Tensor]
    if use_teacher:
        source = dict(bundle.teacher)
        for m in range(1, bundle.n_tasks + 1):
            source[f"head{m}.weight"] = bundle.params[f"head{m}.weight"]
            source[f"head{m}.bias"] = bundle.params[f"head{m}.bias"]
    else:
        source = bundle.params
    embeddings = forward_embeddings(x, source, bundle.config)
    probs = [classify(embeddings[-1], source, m) for m in range(1, bundle.n_tasks + 1)]
    return probs, embeddings
