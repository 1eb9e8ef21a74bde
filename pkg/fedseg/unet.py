"""
Encoder/decoder segmentation network with skip connections.

Each level holds a double 3x3 convolution block; the encoder halves the
resolution with 2x2 max pooling and the decoder doubles it again with nearest
upsampling before concatenating the matching encoder output. A final 1x1
convolution and sigmoid give a per-pixel foreground probability.
"""

from dataclasses import dataclass, field, replace
import logging
import math
from typing import Optional

import numpy as np

from fedseg.errors import ShapeMismatchError, StaleCacheError
from fedseg.models import UNetConfig
from fedseg.optim import AdamState, adam_step, sgd_step
from fedseg.params import Layout, ModelParams
from fedseg.tensor_ops import (
    check_finite,
    concat_channels,
    conv2d,
    conv2d_grad,
    maxpool2,
    maxpool2_grad,
    relu,
    relu_grad,
    sigmoid,
    sigmoid_grad,
    split_grad,
    upsample2,
    upsample2_grad,
)
from fedseg.utils import derive_seed

logger = logging.getLogger(__name__)

# keeps outputs strictly inside (0, 1) in float32
PROB_FLOOR = 1.0e-7


def parameter_layout(config: UNetConfig) -> Layout:
    """Names and shapes of every tensor, in canonical order."""
    layout: list[tuple[str, tuple[int, ...]]] = []
    base = config.base_channels

    def block(name: str, in_ch: int, out_ch: int) -> None:
        layout.extend([
            (f'{name}.conv1.weight', (out_ch, in_ch, 3, 3)),
            (f'{name}.conv1.bias', (out_ch,)),
            (f'{name}.conv2.weight', (out_ch, out_ch, 3, 3)),
            (f'{name}.conv2.bias', (out_ch,)),
        ])

    channels = config.input_shape[0]
    for level in range(config.depth):
        block(f'enc{level}', channels, base * 2 ** level)
        channels = base * 2 ** level
    block('bottleneck', channels, base * 2 ** config.depth)
    for level in reversed(range(config.depth)):
        width = base * 2 ** level
        block(f'dec{level}', base * 2 ** (level + 1) + width, width)
    layout.append(('final.weight', (1, base, 1, 1)))
    layout.append(('final.bias', (1,)))
    return tuple(layout)


def init_params(config: UNetConfig) -> ModelParams:
    """He-normal weights drawn from ``config.seed``; zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    items = []
    for name, shape in parameter_layout(config):
        if name.endswith('.bias'):
            items.append((name, np.zeros(shape, dtype=np.float32)))
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            std = np.float32(math.sqrt(2.0 / fan_in))
            items.append((name, rng.standard_normal(shape, dtype=np.float32) * std))
    return ModelParams(items)


@dataclass
class ForwardCache:
    """Activations kept by :meth:`UNetModel.forward` for the backward pass."""

    version: int
    conv_inputs: dict[str, np.ndarray] = field(default_factory=dict)
    conv_outputs: dict[str, np.ndarray] = field(default_factory=dict)
    pool_indices: list[np.ndarray] = field(default_factory=list)
    up_channels: dict[int, int] = field(default_factory=dict)
    final_input: Optional[np.ndarray] = None
    probabilities: Optional[np.ndarray] = None


class UNetModel:
    """One segmentation network: config, parameters and its Adam state."""

    def __init__(self, config: UNetConfig, params: ModelParams, adam: Optional[AdamState] = None):
        config.validate()
        self.config = config
        self.layout = parameter_layout(config)
        if params.layout() != self.layout:
            raise ShapeMismatchError("parameters do not match the UNet layout")
        self.params = params
        self.adam = adam if adam is not None else AdamState()
        self._version = 0

    @property
    def param_count(self) -> int:
        return self.params.param_count

    def set_params(self, params: ModelParams) -> None:
        if params.layout() != self.layout:
            raise ShapeMismatchError("parameters do not match the UNet layout")
        self.params = params
        self._version += 1

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch)
        if batch.ndim != 4 or batch.shape[1:] != tuple(self.config.input_shape):
            raise ShapeMismatchError(
                f"batch shape {batch.shape} does not match N x {tuple(self.config.input_shape)}"
            )
        check_finite(batch, 'input batch')
        return batch

    def _block_forward(self, name: str, h: np.ndarray, cache: ForwardCache) -> np.ndarray:
        for conv in ('conv1', 'conv2'):
            key = f'{name}.{conv}'
            z = conv2d(h, self.params[f'{key}.weight'], self.params[f'{key}.bias'])
            cache.conv_inputs[key] = h
            cache.conv_outputs[key] = z
            h = relu(z)
        return h

    def _block_backward(self, name: str, g: np.ndarray, cache: ForwardCache,
                        grads: dict[str, np.ndarray]) -> np.ndarray:
        for conv in ('conv2', 'conv1'):
            key = f'{name}.{conv}'
            g = relu_grad(cache.conv_outputs[key], g)
            layer = conv2d_grad(cache.conv_inputs[key], self.params[f'{key}.weight'], g)
            grads[f'{key}.weight'] = layer.weight_grad
            grads[f'{key}.bias'] = layer.bias_grad
            g = layer.input_grad
        return g

    def forward(self, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        """
        Run the network on an N x 1 x H x W batch.

        Returns:
            (probabilities of shape N x 1 x H x W, activation cache)

        Raises:
            ShapeMismatchError: Batch does not match ``config.input_shape``
            NonFiniteError: Batch holds NaN or Inf
        """
        h = self._check_batch(batch)
        cache = ForwardCache(version=self._version)
        skips = []
        for level in range(self.config.depth):
            h = self._block_forward(f'enc{level}', h, cache)
            skips.append(h)
            h, indices = maxpool2(h)
            cache.pool_indices.append(indices)
        h = self._block_forward('bottleneck', h, cache)
        for level in reversed(range(self.config.depth)):
            up = upsample2(h)
            cache.up_channels[level] = up.shape[1]
            h = self._block_forward(f'dec{level}', concat_channels(up, skips[level]), cache)
        cache.final_input = h
        logits = conv2d(h, self.params['final.weight'], self.params['final.bias'])
        probs = np.clip(sigmoid(logits), PROB_FLOOR, 1.0 - PROB_FLOOR).astype(logits.dtype, copy=False)
        cache.probabilities = probs
        return probs, cache

    def predict(self, batch: np.ndarray) -> np.ndarray:
        probs, _ = self.forward(batch)
        return probs

    def backward(self, cache: ForwardCache, loss_grad: np.ndarray) -> ModelParams:
        """
        Gradients of the loss w.r.t. every parameter, given dL/d(probabilities).

        Raises:
            StaleCacheError: Parameters changed since the cache was produced
            ShapeMismatchError: ``loss_grad`` does not match the output shape
        """
        if cache.version != self._version or cache.probabilities is None:
            raise StaleCacheError("activation cache was produced with different parameters")
        if np.shape(loss_grad) != cache.probabilities.shape:
            raise ShapeMismatchError(
                f"loss_grad shape {np.shape(loss_grad)} != output shape {cache.probabilities.shape}"
            )
        grads: dict[str, np.ndarray] = {}
        g = sigmoid_grad(cache.probabilities, np.asarray(loss_grad, dtype=cache.probabilities.dtype))
        final = conv2d_grad(cache.final_input, self.params['final.weight'], g)
        grads['final.weight'] = final.weight_grad
        grads['final.bias'] = final.bias_grad
        g = final.input_grad

        skip_grads = {}
        for level in range(self.config.depth):
            g = self._block_backward(f'dec{level}', g, cache, grads)
            g_up, skip_grads[level] = split_grad(g, cache.up_channels[level])
            g = upsample2_grad(g_up)
        g = self._block_backward('bottleneck', g, cache, grads)
        for level in reversed(range(self.config.depth)):
            g = maxpool2_grad(cache.pool_indices[level], g) + skip_grads[level]
            g = self._block_backward(f'enc{level}', g, cache, grads)
        return ModelParams((name, grads[name]) for name, _ in self.layout)

    def apply_gradients(self, grads: ModelParams, optimizer: str = 'adam') -> None:
        """Update parameters in place with the chosen rule; invalidates caches."""
        if optimizer == 'adam':
            updated = adam_step(self.params, grads, self.adam)
        else:
            updated = sgd_step(self.params, grads, self.adam.learning_rate, self.adam.l2_lambda)
        self.set_params(updated)


def build_model(config: UNetConfig, adam: Optional[AdamState] = None) -> UNetModel:
    """Freshly initialized model; equal configs give bit-identical parameters."""
    return UNetModel(config, init_params(config), adam)


def forward(model: UNetModel, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    return model.forward(batch)


def backward(model: UNetModel, cache: ForwardCache, loss_grad: np.ndarray) -> ModelParams:
    return model.backward(cache, loss_grad)


class SegmentationPair:
    """The EEM and lumen networks trained and shipped together.

    Combined parameters carry ``eem.`` and ``lumen.`` name prefixes.
    """

    EEM_PREFIX = 'eem.'
    LUMEN_PREFIX = 'lumen.'

    def __init__(self, eem: UNetModel, lumen: UNetModel):
        self.eem = eem
        self.lumen = lumen

    @staticmethod
    def member_configs(config: UNetConfig) -> tuple[UNetConfig, UNetConfig]:
        return (
            replace(config, seed=derive_seed(config.seed, 'eem')),
            replace(config, seed=derive_seed(config.seed, 'lumen')),
        )

    @classmethod
    def build(cls, config: UNetConfig) -> 'SegmentationPair':
        eem_config, lumen_config = cls.member_configs(config)
        return cls(build_model(eem_config), build_model(lumen_config))

    @classmethod
    def from_params(cls, config: UNetConfig, params: ModelParams,
                    learning_rate: float = 1.0e-5, l2_lambda: float = 1.0e-4) -> 'SegmentationPair':
        eem_config, lumen_config = cls.member_configs(config)
        return cls(
            UNetModel(eem_config, params.subset(cls.EEM_PREFIX),
                      AdamState(learning_rate=learning_rate, l2_lambda=l2_lambda)),
            UNetModel(lumen_config, params.subset(cls.LUMEN_PREFIX),
                      AdamState(learning_rate=learning_rate, l2_lambda=l2_lambda)),
        )

    def params(self) -> ModelParams:
        return ModelParams.merge(
            self.eem.params.prefixed(self.EEM_PREFIX),
            self.lumen.params.prefixed(self.LUMEN_PREFIX),
        )

    @property
    def param_count(self) -> int:
        return self.eem.param_count + self.lumen.param_count


def initial_global_params(config: UNetConfig) -> ModelParams:
    """Seeded starting point of every training run."""
    return SegmentationPair.build(config).params()
