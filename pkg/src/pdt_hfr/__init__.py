"""Prepended domain transformer for heterogeneous face recognition.

A small trainable block in front of a frozen face-embedding network maps
images from a new sensor domain into the domain the network was trained on.
"""

from .backbone import Backbone, backbone_load, backbone_toy
from .pdt import PdtBlock, PdtConfig, pdt_forward, pdt_init, pdt_load, pdt_save
from .trainer import TrainConfig, train

__all__ = [
    "Backbone",
    "PdtBlock",
    "PdtConfig",
    "TrainConfig",
    "backbone_load",
    "backbone_toy",
    "pdt_forward",
    "pdt_init",
    "pdt_load",
    "pdt_save",
    "train",
]

__version__ = "0.1.0"
