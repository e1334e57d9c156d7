"""Frozen embedding network standing in for a pre-trained face recogniser.

Per-image input standardisation, four stride-2 3x3 conv stages
(3->8->16->32->64), global average pooling, a linear map to ``embed_dim`` and
row-wise L2 normalisation. Parameters never require gradients, but the network
is differentiable w.r.t. its input so a block placed in front of it can be
trained through it.

Conv weights are seeded Kaiming-uniform. A randomly initialised head does not
give a usable recogniser, so :func:`backbone_toy` fits the linear head in
closed form instead: pooled features of a reference identity set (rendered
with its own seed, under photometric jitter) are centred and whitened by their
within-identity covariance. This plays the part of pre-training; it never sees
the inverted target domain.
"""

from __future__ import annotations

import functools
import hashlib
from collections import OrderedDict

import numpy as np

from . import container
from . import tensor as T
from .dataset import LUMA, SynthSpec, identity_template, render_sample
from .errors import DimensionError, FormatError, ValidationError
from .pdt import kaiming_uniform
from .tensor import Tensor

INPUT_SIZE = (112, 112)
STAGE_CHANNELS = (3, 8, 16, 32, 64)
STANDARDISE_EPS = 1e-12

REFERENCE_SEED = 7919
REFERENCE_IDENTITIES = 64
REFERENCE_JITTERS = 2
HEAD_SHRINKAGE = 1e-2


def layer_shapes(embed_dim: int) -> "OrderedDict[str, tuple[int, ...]]":
    shapes = OrderedDict()
    for i, (cin, cout) in enumerate(zip(STAGE_CHANNELS[:-1], STAGE_CHANNELS[1:]), start=1):
        shapes[f"conv{i}.weight"] = (cout, cin, 3, 3)
        shapes[f"conv{i}.bias"] = (cout,)
    shapes["fc.weight"] = (embed_dim, STAGE_CHANNELS[-1])
    shapes["fc.bias"] = (embed_dim,)
    return shapes


class Backbone:
    def __init__(self, params: "OrderedDict[str, Tensor]"):
        self.params = params
        self.embed_dim = params["fc.weight"].shape[0]

    @classmethod
    def random(cls, seed: int = 0, embed_dim: int = 64) -> "Backbone":
        """Kaiming-uniform weights and zero biases everywhere, head included."""
        if embed_dim < 2:
            raise ValidationError(f"embed_dim must be >= 2, got {embed_dim}")
        rng = np.random.default_rng(seed)
        params = OrderedDict()
        for name, shape in layer_shapes(embed_dim).items():
            data = np.zeros(shape) if name.endswith(".bias") else kaiming_uniform(rng, shape)
            params[name] = Tensor(data)
        return cls(params)

    @classmethod
    def toy(cls, seed: int = 0, embed_dim: int = 64) -> "Backbone":
        """Random conv stages with the head fitted on the reference identities."""
        weight, bias = _fitted_head(seed, embed_dim)
        net = cls.random(seed, embed_dim)
        net.params["fc.weight"] = Tensor(weight.copy())
        net.params["fc.bias"] = Tensor(bias.copy())
        return net

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Backbone":
        entries = container.decode(buf)
        if "fc.weight" not in entries:
            raise FormatError("backbone container is missing entry 'fc.weight'")
        fc = entries["fc.weight"]
        if fc.ndim != 2 or fc.shape[1] != STAGE_CHANNELS[-1]:
            raise FormatError(f"entry 'fc.weight' has shape {fc.shape}, expected (D, {STAGE_CHANNELS[-1]})")
        expected = layer_shapes(fc.shape[0])
        for name, shape in expected.items():
            if name not in entries:
                raise FormatError(f"backbone container is missing entry {name!r}")
            if entries[name].shape != shape:
                raise FormatError(f"entry {name!r} has shape {entries[name].shape}, expected {shape}")
        extra = sorted(set(entries) - set(expected))
        if extra:
            raise FormatError(f"backbone container has unexpected entry {extra[0]!r}")
        return cls(OrderedDict((name, Tensor(entries[name])) for name in expected))

    def to_bytes(self) -> bytes:
        return container.encode(OrderedDict((n, p.data) for n, p in self.params.items()))

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def embed(self, x: Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 4:
            raise DimensionError(f"backbone input must be [N, C, H, W], got {x.shape}")
        if x.shape[1] not in (1, 3):
            raise DimensionError(f"channel axis must be 1 or 3, got {x.shape[1]}")
        if x.shape[2:] != INPUT_SIZE:
            raise DimensionError(f"spatial axes must be {INPUT_SIZE}, got {x.shape[2:]}")
        p = self.params
        pooled = self.features(x)
        return T.l2_normalize(pooled @ T.transpose(p["fc.weight"]) + p["fc.bias"])

    def features(self, x: Tensor) -> Tensor:
        """Pooled conv features [N, 64] ahead of the linear head (no input checks)."""
        h = standardise(replicate_channels(x))
        p = self.params
        for i in range(1, len(STAGE_CHANNELS)):
            h = T.relu(T.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], stride=2, padding=1, floor=True))
        return h.mean(axis=(2, 3))

    __call__ = embed


def replicate_channels(x: Tensor) -> Tensor:
    """Single-channel images become three identical channels; 3-channel input passes through."""
    x = T.as_tensor(x)
    if x.shape[1] == 1:
        return T.concat_channels([x, x, x])
    return x


def standardise(x: Tensor) -> Tensor:
    """Zero mean, unit variance per image (over channels and pixels)."""
    centred = x - x.mean(axis=(1, 2, 3), keepdims=True)
    var = (centred * centred).mean(axis=(1, 2, 3), keepdims=True)
    return centred / T.sqrt(var + STANDARDISE_EPS)


def jitter(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Photometric augmentation: optional greyscale, per-channel gain and offset."""
    if rng.random() < 0.5:
        image = np.repeat(np.tensordot(LUMA, image, axes=1)[None], 3, axis=0)
    gain = rng.uniform(0.5, 1.5, size=(3, 1, 1))
    offset = rng.uniform(-0.3, 0.3, size=(3, 1, 1))
    return gain * image + offset


def reference_images() -> tuple[np.ndarray, np.ndarray]:
    """Jittered source-domain renders of the reference identities, with labels."""
    spec = SynthSpec(n_identities=REFERENCE_IDENTITIES, seed=REFERENCE_SEED)
    rng = np.random.default_rng(REFERENCE_SEED)
    images, labels = [], []
    for identity in range(REFERENCE_IDENTITIES):
        template = identity_template(spec, identity)
        for index in range(spec.samples_per_domain):
            sample = render_sample(spec, identity, index, "source", template)
            for _ in range(REFERENCE_JITTERS):
                images.append(jitter(sample, rng))
                labels.append(identity)
    return np.stack(images), np.array(labels)


def whitening_head(features: np.ndarray, labels: np.ndarray, shrinkage: float = HEAD_SHRINKAGE):
    """(P, mu) with P = Sw^{-1/2}; Sw is the within-class covariance shrunk
    towards a multiple of the identity."""
    mu = features.mean(axis=0)
    classes, inverse = np.unique(labels, return_inverse=True)
    means = np.stack([features[inverse == k].mean(axis=0) for k in range(len(classes))])
    resid = features - means[inverse]
    sw = resid.T @ resid / len(features)
    dim = sw.shape[0]
    sw += shrinkage * np.trace(sw) / dim * np.eye(dim)
    evals, evecs = np.linalg.eigh(sw)
    return (evecs / np.sqrt(evals)) @ evecs.T, mu


@functools.lru_cache(maxsize=8)
def _fitted_head(seed: int, embed_dim: int) -> tuple[np.ndarray, np.ndarray]:
    net = Backbone.random(seed, embed_dim)
    images, labels = reference_images()
    with T.no_grad():
        feats = np.concatenate([net.features(Tensor(images[lo : lo + 64])).data for lo in range(0, len(images), 64)])
    proj, mu = whitening_head(feats, labels)
    weight = net.params["fc.weight"].data @ proj
    return weight, -(weight @ mu)


def backbone_toy(seed: int = 0, embed_dim: int = 64) -> Backbone:
    return Backbone.toy(seed, embed_dim)


def backbone_load(buf: bytes) -> Backbone:
    return Backbone.from_bytes(buf)


def embed(backbone: Backbone, x: Tensor) -> Tensor:
    return backbone.embed(x)
