"""Minimal NHWC autodiff engine with the layer set the detector needs."""

from . import ops
from .gradcheck import GradCheckResult, check_gradients
from .layers import (Activation, AdaptiveMaxPool, BatchNorm, Conv2d, Dense, Flatten,
                     GaussianNoise, Layer, MaxPool, Sequential, SpatialAttention, SpatialDropout)
from .tensor import Tensor, no_grad

__all__ = ["ops", "Tensor", "no_grad", "check_gradients", "GradCheckResult", "Layer",
           "Conv2d", "BatchNorm", "SpatialDropout", "GaussianNoise", "Activation", "MaxPool",
           "AdaptiveMaxPool", "SpatialAttention", "Flatten", "Dense", "Sequential"]
