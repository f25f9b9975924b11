"""Minimal NCHW tensor engine: kernels, layers, parameter store, grad checker."""

from hintu.engine.gradcheck import FunctionModule, GradCheckReport, grad_check
from hintu.engine.layers import (
    Activation, BatchNorm2d, Conv2d, ConvBlock, Layer, MaxPool2x, Parameter,
    Resize, Sequential, WindowStat,
)
from hintu.engine.params import ParamStore

__all__ = [
    "Activation", "BatchNorm2d", "Conv2d", "ConvBlock", "FunctionModule", "GradCheckReport",
    "Layer", "MaxPool2x", "ParamStore", "Parameter", "Resize", "Sequential", "WindowStat",
    "grad_check",
]
