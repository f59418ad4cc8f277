"""The four-branch network with its learnable fusion head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from fddf.disentangle import BRANCHES, RgbImage, prepare_branch_inputs
from fddf.errors import ConfigurationError, DimensionError
from fddf.nn import functional as F
from fddf.nn.layers import Conv2d, ConvBN, Linear, Module
from fddf.nn.tensor import Tensor, concat, no_grad

_RNG_STREAM = {name: i for i, name in enumerate(BRANCHES)} | {"fusion": 10, "head": 11}


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int = 16
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 1
    input_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        if not self.stage_channels or min(self.stage_channels) <= 0:
            raise ConfigurationError(f"stage_channels must be non-empty and positive, got {self.stage_channels}")
        if self.stem_channels <= 0 or self.blocks_per_stage <= 0 or self.input_channels <= 0:
            raise ConfigurationError("stem_channels, blocks_per_stage and input_channels must be positive")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]

    @property
    def downsampling(self) -> int:
        return 2 ** len(self.stage_channels)


def se_block(x: Tensor, fc1: Linear, fc2: Linear) -> Tensor:
    """Squeeze (global pool) -> excite (two affine maps) -> per-channel gate."""
    n, c = x.shape[:2]
    squeezed = F.global_avg_pool(x)
    gate = F.sigmoid(fc2(F.relu(fc1(squeezed))))
    return x * gate.reshape(n, c, 1, 1)


class SEBlock(Module):
    def __init__(self, rng, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(rng, channels, hidden, gain=2.0)
        self.fc2 = Linear(rng, hidden, channels)

    def forward(self, x: Tensor) -> Tensor:
        return se_block(x, self.fc1, self.fc2)


class ResidualBlock(Module):
    def __init__(self, rng, in_channels, out_channels, stride=1, se_reduction: int | None = None):
        super().__init__()
        self.conv1 = ConvBN(rng, in_channels, out_channels, 3, stride)
        self.conv2 = ConvBN(rng, out_channels, out_channels, 3, 1, act=False)
        if stride != 1 or in_channels != out_channels:
            self.proj = ConvBN(rng, in_channels, out_channels, 1, stride, act=False)
        else:
            self.proj = None
        self.se = SEBlock(rng, out_channels, se_reduction) if se_reduction else None

    def forward(self, x: Tensor) -> Tensor:
        shortcut = self.proj(x) if self.proj is not None else x
        y = F.relu6(self.conv2(self.conv1(x)) + shortcut)
        return self.se(y) if self.se is not None else y


class Backbone(Module):
    """Stem plus residual stages.

    The moiré branch receives a half-resolution input, so its stem keeps
    stride 1; every branch then emits features of identical shape.
    """

    def __init__(self, rng, config: BackboneConfig, branch: str, se_reduction: int | None = None):
        super().__init__()
        self.branch = branch
        self.config = config
        self.stem = ConvBN(rng, config.input_channels, config.stem_channels, 3, 1 if branch == "moire" else 2)
        cin = config.stem_channels
        for s, cout in enumerate(config.stage_channels):
            stage = Module()
            for b in range(config.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                stage.add_module(f"block{b}", ResidualBlock(rng, cin, cout, stride, se_reduction))
                cin = cout
            self.add_module(f"stage{s + 1}", stage)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise DimensionError(
                f"{self.branch} backbone expects [N,{self.config.input_channels},H,W] input, got {x.shape}"
            )
        y = self.stem(x)
        for s in range(len(self.config.stage_channels)):
            stage = getattr(self, f"stage{s + 1}")
            for b in range(self.config.blocks_per_stage):
                y = getattr(stage, f"block{b}")(y)
        return y


def backbone_forward(branch_input, backbone: Backbone) -> Tensor:
    x = branch_input if isinstance(branch_input, Tensor) else Tensor(branch_input)
    return backbone(x)


@dataclass
class FusionWeights:
    """Per-sample simplex weights over the active branches.

    ``alpha``/``beta``/``sigma``/``rho`` address moiré/edge/artifact/other;
    an inactive branch reads as zero.
    """

    branches: tuple[str, ...]
    values: np.ndarray  # (N, len(branches))

    def of(self, branch: str) -> np.ndarray:
        if branch in self.branches:
            return self.values[:, self.branches.index(branch)]
        return np.zeros(self.values.shape[0], dtype=self.values.dtype)

    alpha = property(lambda self: self.of("moire"))
    beta = property(lambda self: self.of("edge"))
    sigma = property(lambda self: self.of("artifact"))
    rho = property(lambda self: self.of("other"))

    def full(self) -> np.ndarray:
        """(N, 4) weights in canonical branch order, zeros for dropped branches."""
        return np.stack([self.of(b) for b in BRANCHES], axis=1)


class DynamicFusion(Module):
    """Adapt each feature map, redistribute to one logit per branch, softmax.

    The adapted maps only drive the weights; the fused output is the
    weighted sum of the original features.
    """

    def __init__(self, rng, channels: int, branches: Sequence[str]):
        super().__init__()
        self.branches = tuple(branches)
        self.channels = channels
        if len(self.branches) > 1:
            adapt = Module()
            for b in self.branches:
                adapt.add_module(b, ConvBN(rng, channels, channels, 3, 1))
            self.adapt = adapt
            self.redistribute = Conv2d(rng, channels * len(self.branches), len(self.branches), 1, bias=True)
            self.redistribute.weight.data[...] = 0.0

    def logits(self, features: Mapping[str, Tensor]) -> Tensor:
        adapted = [getattr(self.adapt, b)(features[b]) for b in self.branches]
        return F.global_avg_pool(self.redistribute(concat(adapted, axis=1)))

    def forward(self, features: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
        if not self.branches:
            raise ConfigurationError("fusion needs at least one branch")
        if set(features) != set(self.branches):
            raise ConfigurationError(f"fusion over {self.branches} got features for {sorted(features)}")
        shapes = {features[b].shape for b in self.branches}
        if len(shapes) != 1:
            raise DimensionError(f"branch features must share one shape, got {sorted(shapes)}")
        if len(self.branches) == 1:
            f = features[self.branches[0]]
            return f, Tensor(np.ones((f.shape[0], 1)))
        weights = F.softmax(self.logits(features), axis=-1)
        return F.weighted_sum([features[b] for b in self.branches], weights), weights


def fuse_subset(features: Mapping[str, Tensor], fusion: DynamicFusion) -> tuple[Tensor, FusionWeights]:
    if not features:
        raise ConfigurationError("fuse_subset needs a non-empty branch subset")
    out, w = fusion(features)
    return out, FusionWeights(fusion.branches, w.data)


def dff_fuse(features: Mapping[str, Tensor], fusion: DynamicFusion) -> tuple[Tensor, FusionWeights]:
    if set(features) != set(BRANCHES):
        raise ConfigurationError(f"dff_fuse needs all four branches, got {sorted(features)}; use fuse_subset")
    return fuse_subset(features, fusion)


class ClassifierHead(Module):
    """Global pool then affine map to two logits (index 1 = recaptured)."""

    def __init__(self, rng, channels: int):
        super().__init__()
        self.fc = Linear(rng, channels, 2)

    def forward(self, fused: Tensor) -> Tensor:
        return self.fc(F.global_avg_pool(fused))


def classify(fused: Tensor, head: ClassifierHead) -> Tensor:
    return head(fused)


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _RNG_STREAM[name]])


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    branches: tuple[str, ...] = BRANCHES
    se_reduction: int = 4

    def __post_init__(self):
        branches = tuple(b for b in BRANCHES if b in set(self.branches))
        unknown = set(self.branches) - set(BRANCHES)
        if unknown:
            raise ConfigurationError(f"unknown branches {sorted(unknown)}; choose from {BRANCHES}")
        if not branches:
            raise ConfigurationError("at least one branch must be active")
        if self.se_reduction < 1:
            raise ConfigurationError("se_reduction must be >= 1")
        object.__setattr__(self, "branches", branches)


class FddfModel(Module):
    """Backbones per active branch -> dynamic fusion -> two-way classifier.

    Each named random stream (per branch, fusion, head) is seeded from
    ``seed`` independently, so an ablated model shares the initial weights
    of the surviving branches with the full model.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        config = config or ModelConfig()
        self.config = config
        self.seed = seed
        bb = Module()
        for b in config.branches:
            se = config.se_reduction if b == "other" else None
            bb.add_module(b, Backbone(_stream(seed, b), config.backbone, b, se))
        self.branch = bb
        self.fusion = DynamicFusion(_stream(seed, "fusion"), config.backbone.out_channels, config.branches)
        self.head = ClassifierHead(_stream(seed, "head"), config.backbone.out_channels)

    @property
    def branches(self) -> tuple[str, ...]:
        return self.config.branches

    def features(self, batch: Mapping[str, np.ndarray | Tensor]) -> dict[str, Tensor]:
        missing = [b for b in self.branches if b not in batch]
        if missing:
            raise ConfigurationError(f"batch lacks inputs for branches {missing}")
        return {b: backbone_forward(batch[b], getattr(self.branch, b)) for b in self.branches}

    def forward(self, batch: Mapping[str, np.ndarray | Tensor]) -> tuple[Tensor, Tensor]:
        fused, weights = self.fusion(self.features(batch))
        return self.head(fused), weights

    def predict_proba(self, batch: Mapping[str, np.ndarray]) -> tuple[np.ndarray, FusionWeights]:
        with no_grad():
            logits, weights = self.forward(batch)
            probs = F.softmax(logits).data
        return probs, FusionWeights(self.branches, weights.data)


def stack_inputs(inputs: Sequence, branches: Sequence[str] = BRANCHES) -> dict[str, np.ndarray]:
    """Batch a sequence of :class:`BranchInputs` into per-branch NCHW arrays."""
    return {b: np.stack([getattr(x, b) for x in inputs]) for b in branches}


def model_forward(img: RgbImage, model: FddfModel) -> tuple[np.ndarray, FusionWeights]:
    """Probabilities ``[p_original, p_recaptured]`` for one image, in eval mode."""
    was_training = model.training
    model.eval()
    try:
        probs, weights = model.predict_proba(stack_inputs([prepare_branch_inputs(img)], model.branches))
    finally:
        model.train(was_training)
    return probs[0], weights
