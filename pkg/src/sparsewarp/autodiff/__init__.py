"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from .engine import Node, backward, constant, leaf, topo_order
from .params import ParameterStore
from .optim import Adam

__all__ = ["Node", "backward", "constant", "leaf", "topo_order", "ParameterStore", "Adam"]
