"""The prepended domain transformer block.

A 3-in/3-out, resolution-preserving image-to-image module: four parallel
branches (1x1, 1x1->3x3, 1x1->5x5, avgpool->1x1), channel-then-spatial
attention over their concatenation, and a final 1x1 projection back to three
channels. With the default configuration it has 1327 trainable parameters.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import container
from . import tensor as T
from .errors import ConfigError, DimensionError, FormatError
from .tensor import Tensor


@dataclass(frozen=True)
class PdtConfig:
    branch_channels: int = 5
    cbam_reduction: int = 4
    spatial_kernel: int = 7
    pool_kernel: int = 3

    def validate(self) -> "PdtConfig":
        c, r = self.branch_channels, self.cbam_reduction
        if c < 1 or r < 1:
            raise ConfigError(f"branch_channels and cbam_reduction must be positive, got c={c}, r={r}")
        if (4 * c) % r:
            raise ConfigError(f"4*branch_channels={4 * c} is not divisible by cbam_reduction={r}")
        for name in ("spatial_kernel", "pool_kernel"):
            k = getattr(self, name)
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {k}")
        return self

    @property
    def features(self) -> int:
        return 4 * self.branch_channels

    @property
    def hidden(self) -> int:
        return self.features // self.cbam_reduction


def layer_shapes(cfg: PdtConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Parameter name -> shape, in the canonical (init and file) order."""
    c, f, hd = cfg.branch_channels, cfg.features, cfg.hidden
    k = cfg.spatial_kernel
    shapes = OrderedDict()

    def conv(name, cout, cin, ksize):
        shapes[f"{name}.weight"] = (cout, cin, ksize, ksize)
        shapes[f"{name}.bias"] = (cout,)

    conv("branch1.conv", c, 3, 1)
    conv("branch2.reduce", c, 3, 1)
    conv("branch2.conv", c, c, 3)
    conv("branch3.reduce", c, 3, 1)
    conv("branch3.conv", c, c, 5)
    conv("branch4.conv", c, 3, 1)
    shapes["cbam.mlp1.weight"] = (hd, f)
    shapes["cbam.mlp1.bias"] = (hd,)
    shapes["cbam.mlp2.weight"] = (f, hd)
    shapes["cbam.mlp2.bias"] = (f,)
    conv("cbam.spatial", 1, 2, k)
    conv("project", 3, f, 1)
    return shapes


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class PdtBlock:
    """Named parameter map plus the forward wiring."""

    def __init__(self, config: PdtConfig, params: "OrderedDict[str, Tensor]"):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: PdtConfig | None = None, seed: int = 0) -> "PdtBlock":
        config = (config or PdtConfig()).validate()
        rng = np.random.default_rng(seed)
        params = OrderedDict()
        for name, shape in layer_shapes(config).items():
            data = np.zeros(shape) if name.endswith(".bias") else kaiming_uniform(rng, shape)
            params[name] = Tensor(data, requires_grad=True)
        return cls(config, params)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def parameter_table(self) -> list[tuple[str, tuple[int, ...], int]]:
        return [(name, p.shape, p.data.size) for name, p in self.params.items()]

    def _conv(self, x: Tensor, name: str, padding: int = 0) -> Tensor:
        return T.conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding=padding)

    def branches(self, x: Tensor) -> Tensor:
        """Concatenated multi-scale features, [N, 4c, H, W]."""
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"PDT input must be [N, 3, H, W], got channel axis of shape {x.shape}")
        if min(x.shape[2], x.shape[3]) < cfg.spatial_kernel:
            raise DimensionError(f"spatial size {x.shape[2:]} is smaller than spatial_kernel {cfg.spatial_kernel}")
        b1 = T.relu(self._conv(x, "branch1.conv"))
        b2 = T.relu(self._conv(T.relu(self._conv(x, "branch2.reduce")), "branch2.conv", padding=1))
        b3 = T.relu(self._conv(T.relu(self._conv(x, "branch3.reduce")), "branch3.conv", padding=2))
        pooled = T.avg_pool2d(x, cfg.pool_kernel, stride=1, padding=(cfg.pool_kernel - 1) // 2)
        b4 = T.relu(self._conv(pooled, "branch4.conv"))
        return T.concat_channels([b1, b2, b3, b4])

    def _mlp(self, v: Tensor) -> Tensor:
        p = self.params
        hidden = T.relu(v @ T.transpose(p["cbam.mlp1.weight"]) + p["cbam.mlp1.bias"])
        return hidden @ T.transpose(p["cbam.mlp2.weight"]) + p["cbam.mlp2.bias"]

    def channel_gate(self, f: Tensor) -> Tensor:
        n, ch = f.shape[:2]
        logits = self._mlp(f.mean(axis=(2, 3))) + self._mlp(f.max(axis=(2, 3)))
        return T.sigmoid(logits).reshape(n, ch, 1, 1)

    def spatial_gate(self, f: Tensor) -> Tensor:
        desc = T.concat_channels([f.mean(axis=1, keepdims=True), f.max(axis=1, keepdims=True)])
        return T.sigmoid(self._conv(desc, "cbam.spatial", padding=(self.config.spatial_kernel - 1) // 2))

    def project(self, f: Tensor) -> Tensor:
        return self._conv(f, "project")

    def forward(self, x: Tensor) -> Tensor:
        f = self.branches(x)
        f = f * self.channel_gate(f)
        f = f * self.spatial_gate(f)
        return self.project(f)

    __call__ = forward

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data) for name, p in self.params.items())

    def to_bytes(self) -> bytes:
        return container.encode(self.state())

    @classmethod
    def from_bytes(cls, buf: bytes, config: PdtConfig | None = None) -> "PdtBlock":
        config = (config or PdtConfig()).validate()
        entries = container.decode(buf)
        expected = layer_shapes(config)
        for name, shape in expected.items():
            if name not in entries:
                raise FormatError(f"checkpoint is missing entry {name!r}")
            if entries[name].shape != shape:
                raise FormatError(
                    f"entry {name!r} has shape {entries[name].shape}, config expects {shape}"
                )
        extra = sorted(set(entries) - set(expected))
        if extra:
            raise FormatError(f"checkpoint has unexpected entry {extra[0]!r}")
        params = OrderedDict((name, Tensor(entries[name], requires_grad=True)) for name in expected)
        return cls(config, params)


def pdt_init(config: PdtConfig | None = None, seed: int = 0) -> PdtBlock:
    return PdtBlock.init(config, seed)


def pdt_forward(block: PdtBlock, x: Tensor) -> Tensor:
    return block.forward(x)


def pdt_save(block: PdtBlock) -> bytes:
    return block.to_bytes()


def pdt_load(buf: bytes, config: PdtConfig | None = None) -> PdtBlock:
    return PdtBlock.from_bytes(buf, config)
