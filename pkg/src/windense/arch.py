"""Windowed dense-connectivity planning, exact parameter counting, network building.

A dense block of L layers exchanges feature maps by channel concatenation.
With a connectivity window of size N, layer t (1-based) consumes the
concatenation of sources {max(0, t-N), ..., t-1}, where source 0 is the
block's input maps and source s >= 1 is the output of in-block layer s.
The layer that follows the block (transition, or the classifier head after
the last block) is the extra target t = L+1 under the same rule, so only a
window of N = L+1 lets it reach the block's input maps; that setting is the
full-connectivity limit.

Each in-block layer is BN -> ReLU -> 3x3 conv (pad 1, no bias) -> dropout and
emits growth_rate new channels.  Transitions are BN -> ReLU -> 1x1 conv (width
preserving) -> dropout -> 2x2 average pool.  The head is BN -> ReLU -> global
average pool -> linear.  Every BN contributes 2 trainable values per channel;
convolutions carry no bias.  These conventions pin the exact parameter count.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .ops import (
    BatchNorm2d,
    Conv2d,
    Dropout,
    Linear,
    avgpool2x2,
    global_avgpool,
    relu,
)
from .tensor import Tensor, concat_channels


@dataclass(frozen=True)
class ArchConfig:
    """Architecture tuple; defaults give the 3-block, 12-layer, growth-12 network."""

    window: int
    num_blocks: int = 3
    layers_per_block: int = 12
    growth_rate: int = 12
    stem_channels: int = 16
    num_classes: int = 10
    input_channels: int = 3
    input_size: int = 32

    def __post_init__(self):
        for name in ("num_blocks", "layers_per_block", "growth_rate", "stem_channels",
                     "num_classes", "input_channels", "input_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"ArchConfig.{name} must be positive")
        limit = self.layers_per_block + 1
        if not (1 <= self.window <= limit):
            raise ValueError(
                f"window must be in [1, layers_per_block + 1] = [1, {limit}], got {self.window}"
            )


def equivalent_to_full(config: ArchConfig) -> bool:
    """True iff the window covers every predecessor including the block input."""
    return config.window >= config.layers_per_block + 1


@dataclass(frozen=True)
class ConnectivityPlan:
    """Source lists and channel widths for every target in every block.

    Blocks are 0-based; targets run 1..L for in-block layers plus L+1 for the
    block exit (the transition, or the head after the last block).
    """

    window: int
    num_blocks: int
    layers_per_block: int
    growth_rate: int
    block_input_channels: Tuple[int, ...]

    def sources(self, block: int, target: int) -> Tuple[int, ...]:
        self._check(block, target)
        return tuple(range(max(0, target - self.window), target))

    def source_channels(self, block: int, source: int) -> int:
        if not (0 <= block < self.num_blocks):
            raise IndexError(f"block {block} out of range")
        if not (0 <= source <= self.layers_per_block):
            raise IndexError(f"source {source} out of range")
        return self.block_input_channels[block] if source == 0 else self.growth_rate

    def input_channels(self, block: int, target: int) -> int:
        return sum(self.source_channels(block, s) for s in self.sources(block, target))

    def exit_channels(self, block: int) -> int:
        return self.input_channels(block, self.layers_per_block + 1)

    def _check(self, block: int, target: int) -> None:
        if not (0 <= block < self.num_blocks):
            raise IndexError(f"block {block} out of range [0, {self.num_blocks})")
        if not (1 <= target <= self.layers_per_block + 1):
            raise IndexError(
                f"target {target} out of range [1, {self.layers_per_block + 1}]"
            )


def build_connectivity(config: ArchConfig) -> ConnectivityPlan:
    """Lay out source windows and propagate channel widths across blocks.

    The transition preserves its (window-limited) input width, so the width
    entering block b+1 equals the exit width of block b.
    """
    L, k, n = config.layers_per_block, config.growth_rate, config.window
    widths = [config.stem_channels]
    for _ in range(config.num_blocks - 1):
        exit_sources = range(max(0, L + 1 - n), L + 1)
        widths.append(sum(widths[-1] if s == 0 else k for s in exit_sources))
    return ConnectivityPlan(
        window=n,
        num_blocks=config.num_blocks,
        layers_per_block=L,
        growth_rate=k,
        block_input_channels=tuple(widths),
    )


def input_channels(plan: ConnectivityPlan, block: int, target: int) -> int:
    return plan.input_channels(block, target)


@dataclass(frozen=True)
class ParamReport:
    total: int
    breakdown: Tuple[Tuple[str, int], ...]


def count_parameters(config: ArchConfig) -> ParamReport:
    """Exact trainable-parameter count, itemized per component.

    Conventions: convs bias-free, each BN is 2 values per channel, the stem is
    a lone 3x3 conv, transitions are BN + width-preserving 1x1 conv, the head
    is BN + linear with bias.
    """
    plan = build_connectivity(config)
    k = config.growth_rate
    entries: List[Tuple[str, int]] = [
        ("stem.conv", 3 * 3 * config.input_channels * config.stem_channels)
    ]
    for b in range(config.num_blocks):
        for t in range(1, config.layers_per_block + 1):
            w_in = plan.input_channels(b, t)
            entries.append((f"block{b + 1}.layer{t}.bn", 2 * w_in))
            entries.append((f"block{b + 1}.layer{t}.conv", 3 * 3 * w_in * k))
        w_exit = plan.exit_channels(b)
        if b < config.num_blocks - 1:
            entries.append((f"block{b + 1}.transition.bn", 2 * w_exit))
            entries.append((f"block{b + 1}.transition.conv", w_exit * w_exit))
        else:
            entries.append(("head.bn", 2 * w_exit))
            entries.append(("head.linear", w_exit * config.num_classes + config.num_classes))
    return ParamReport(total=sum(n for _, n in entries), breakdown=tuple(entries))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class DenseLayer:
    """BN -> ReLU -> 3x3 conv (pad 1) -> dropout; emits growth_rate channels."""

    def __init__(self, bn: BatchNorm2d, conv: Conv2d, dropout: Dropout):
        self.bn = bn
        self.conv = conv
        self.dropout = dropout

    def __call__(self, x: Tensor) -> Tensor:
        return self.dropout(self.conv(relu(self.bn(x))))


class TransitionLayer:
    """BN -> ReLU -> 1x1 conv (width preserving) -> dropout -> 2x2 avg pool."""

    def __init__(self, bn: BatchNorm2d, conv: Conv2d, dropout: Dropout):
        self.bn = bn
        self.conv = conv
        self.dropout = dropout

    def __call__(self, x: Tensor) -> Tensor:
        return avgpool2x2(self.dropout(self.conv(relu(self.bn(x)))))


class Head:
    """BN -> ReLU -> global avg pool -> linear classifier."""

    def __init__(self, bn: BatchNorm2d, linear: Linear):
        self.bn = bn
        self.linear = linear

    def __call__(self, x: Tensor) -> Tensor:
        return self.linear(global_avgpool(relu(self.bn(x))))


class Network:
    """A built network: stem conv, dense blocks with windowed concatenation,
    transitions, and classifier head."""

    def __init__(self, config: ArchConfig, plan: ConnectivityPlan, stem: Conv2d,
                 blocks: List[List[DenseLayer]], transitions: List[TransitionLayer],
                 head: Head):
        self.config = config
        self.plan = plan
        self.stem = stem
        self.blocks = blocks
        self.transitions = transitions
        self.head = head

    def forward(self, x: Tensor) -> Tensor:
        cfg, plan = self.config, self.plan
        if x.data.ndim != 4 or x.shape[1] != cfg.input_channels:
            raise ValueError(
                f"forward: expected NCHW input with {cfg.input_channels} channels, got {x.shape}"
            )
        h = self.stem(x)
        for b in range(cfg.num_blocks):
            feats = [h]  # feats[s] = source s of this block
            for t in range(1, cfg.layers_per_block + 1):
                inp = concat_channels([feats[s] for s in plan.sources(b, t)])
                feats.append(self.blocks[b][t - 1](inp))
            h = concat_channels([feats[s] for s in plan.sources(b, cfg.layers_per_block + 1)])
            if b < cfg.num_blocks - 1:
                h = self.transitions[b](h)
        return self.head(h)

    __call__ = forward

    def parameters(self) -> List[Tuple[str, Tensor]]:
        """Trainable tensors in deterministic order: stem, blocks with their
        layers, each block's transition, then the head."""
        params: List[Tuple[str, Tensor]] = [("stem.conv.weight", self.stem.weight)]
        for b, layers in enumerate(self.blocks, start=1):
            for t, layer in enumerate(layers, start=1):
                prefix = f"block{b}.layer{t}"
                params.append((f"{prefix}.bn.gamma", layer.bn.gamma))
                params.append((f"{prefix}.bn.beta", layer.bn.beta))
                params.append((f"{prefix}.conv.weight", layer.conv.weight))
            if b - 1 < len(self.transitions):
                trans = self.transitions[b - 1]
                params.append((f"block{b}.transition.bn.gamma", trans.bn.gamma))
                params.append((f"block{b}.transition.bn.beta", trans.bn.beta))
                params.append((f"block{b}.transition.conv.weight", trans.conv.weight))
        params.append(("head.bn.gamma", self.head.bn.gamma))
        params.append(("head.bn.beta", self.head.bn.beta))
        params.append(("head.linear.weight", self.head.linear.weight))
        params.append(("head.linear.bias", self.head.linear.bias))
        return params

    def parameter_total(self) -> int:
        return sum(t.data.size for _, t in self.parameters())

    def batchnorms(self) -> List[Tuple[str, BatchNorm2d]]:
        bns: List[Tuple[str, BatchNorm2d]] = []
        for b, layers in enumerate(self.blocks, start=1):
            for t, layer in enumerate(layers, start=1):
                bns.append((f"block{b}.layer{t}.bn", layer.bn))
            if b - 1 < len(self.transitions):
                bns.append((f"block{b}.transition.bn", self.transitions[b - 1].bn))
        bns.append(("head.bn", self.head.bn))
        return bns

    def dropouts(self) -> List[Dropout]:
        outs = [layer.dropout for layers in self.blocks for layer in layers]
        outs.extend(t.dropout for t in self.transitions)
        return outs

    def train_mode(self) -> None:
        for _, bn in self.batchnorms():
            bn.training = True
        for d in self.dropouts():
            d.training = True

    def eval_mode(self) -> None:
        for _, bn in self.batchnorms():
            bn.training = False
        for d in self.dropouts():
            d.training = False

    def set_keep_prob(self, keep_prob: float) -> None:
        if not (0.0 < keep_prob <= 1.0):
            raise ValueError(f"keep_prob {keep_prob} not in (0, 1]")
        for d in self.dropouts():
            d.keep_prob = keep_prob

    def set_dropout_rng(self, rng: np.random.Generator) -> None:
        # one shared generator, consumed in the fixed execution order
        for d in self.dropouts():
            d.rng = rng

    def zero_grads(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()


def _he_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    std = np.sqrt(2.0 / (k * k * out_ch))
    return rng.normal(0.0, std, size=(out_ch, in_ch, k, k))


def build_network(config: ArchConfig, init_seed: int = 0, keep_prob: float = 1.0) -> Network:
    """Construct and initialize a Network whose enumerated trainable parameters
    total count_parameters(config).total.

    Conv weights are zero-mean normal with std sqrt(2 / (kH*kW*out_ch)), BN
    starts at gamma=1, beta=0, the linear head is He-initialized with zero bias.
    """
    plan = build_connectivity(config)
    rng = np.random.default_rng(init_seed)
    dropout_rng = np.random.default_rng([init_seed, 0xD0])

    stem = Conv2d(_he_conv(rng, config.stem_channels, config.input_channels, 3),
                  stride=1, padding=1)
    blocks: List[List[DenseLayer]] = []
    transitions: List[TransitionLayer] = []
    for b in range(config.num_blocks):
        layers = []
        for t in range(1, config.layers_per_block + 1):
            w_in = plan.input_channels(b, t)
            layers.append(DenseLayer(
                bn=BatchNorm2d(w_in),
                conv=Conv2d(_he_conv(rng, config.growth_rate, w_in, 3), stride=1, padding=1),
                dropout=Dropout(keep_prob, rng=dropout_rng),
            ))
        blocks.append(layers)
        w_exit = plan.exit_channels(b)
        if b < config.num_blocks - 1:
            transitions.append(TransitionLayer(
                bn=BatchNorm2d(w_exit),
                conv=Conv2d(_he_conv(rng, w_exit, w_exit, 1), stride=1, padding=0),
                dropout=Dropout(keep_prob, rng=dropout_rng),
            ))

    w_exit = plan.exit_channels(config.num_blocks - 1)
    head = Head(
        bn=BatchNorm2d(w_exit),
        linear=Linear(
            rng.normal(0.0, np.sqrt(2.0 / w_exit), size=(config.num_classes, w_exit)),
            np.zeros(config.num_classes),
        ),
    )
    return Network(config, plan, stem, blocks, transitions, head)
