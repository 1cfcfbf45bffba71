"""
Layer specs and models.

A model is an input shape plus a tuple of layers. Linear layers (Dense,
Conv2D) carry a weight tensor and are the only ones that ever reach the
untrusted context; ReLU and MaxPool always run in the trusted context.

Dense layers fold their bias into W: W has shape out x (in + 1) and the
input is flattened and augmented with a trailing 1.

"""
import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from masking.sampling import philox
from tensors.exceptions import ParameterError, ShapeError, TensorFormatError
from tensors.io import read_tensor, write_tensor
from tensors.ops import BilinearOp, as_tensor, conv_output_size, freeze

MANIFEST_NAME = 'manifest.json'


class Layer:
    kind = None
    is_linear = False

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def to_dict(self):
        data = {'kind': self.kind}
        for name in self.__dataclass_fields__:
            if name != 'params':
                data[name] = getattr(self, name)
        return data

    @staticmethod
    def from_dict(data):
        data = dict(data)
        try:
            layer_class = LAYER_KINDS[data.pop('kind')]
        except KeyError as e:
            raise ParameterError("Unknown or missing layer kind: %s." % e)
        try:
            return layer_class(**data)
        except TypeError as e:
            raise ParameterError("Invalid %s layer: %s." % (layer_class.kind, e))


@dataclass(eq=False)
class Dense(Layer):
    in_features: int
    out_features: int
    params: np.ndarray = field(default=None, repr=False)

    kind = 'dense'
    is_linear = True

    def __post_init__(self):
        if self.in_features < 1 or self.out_features < 1:
            raise ParameterError("Dense layers need positive sizes.")

    @property
    def op(self):
        return BilinearOp.matmul()

    @property
    def weight_shape(self):
        return (self.out_features, self.in_features + 1)

    @property
    def fan_in(self):
        return self.in_features

    def output_shape(self, input_shape):
        if math.prod(input_shape) != self.in_features:
            raise ShapeError("Dense layer expects %d inputs, got shape %s." % (self.in_features, tuple(input_shape)))
        return (self.out_features,)

    def prepare(self, x):
        return freeze(np.append(np.asarray(x).reshape(-1), 1.0).reshape(-1, 1))

    def finish(self, y):
        return freeze(np.asarray(y).reshape(-1))

    def shape_delta(self, delta):
        return freeze(np.asarray(delta).reshape(-1, 1))

    def input_delta(self, grad, input_shape):
        # Drop the gradient of the constant bias input
        return freeze(np.asarray(grad)[:-1].reshape(input_shape))


@dataclass(eq=False)
class Conv2D(Layer):
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    params: np.ndarray = field(default=None, repr=False)

    kind = 'conv2d'
    is_linear = True

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w, self.stride) < 1 or self.padding < 0:
            raise ParameterError("Invalid convolution layer settings.")

    @property
    def op(self):
        return BilinearOp.conv2d(self.stride, self.padding)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_h, self.kernel_w)

    @property
    def fan_in(self):
        return self.in_channels * self.kernel_h * self.kernel_w

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError("Conv2D layer expects %d x h x w inputs, got %s." % (self.in_channels, tuple(input_shape)))
        return (
            self.out_channels,
            conv_output_size(input_shape[1], self.kernel_h, self.stride, self.padding),
            conv_output_size(input_shape[2], self.kernel_w, self.stride, self.padding),
        )

    def prepare(self, x):
        return as_tensor(x)

    def finish(self, y):
        return y

    def shape_delta(self, delta):
        return as_tensor(delta)

    def input_delta(self, grad, input_shape):
        return grad


@dataclass(eq=False)
class ReLU(Layer):
    kind = 'relu'


@dataclass(eq=False)
class MaxPool(Layer):
    size: int = 2
    stride: int = 2

    kind = 'maxpool'

    def __post_init__(self):
        if self.size < 1 or self.stride < 1:
            raise ParameterError("Pool size and stride must be at least 1.")

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or min(input_shape[1:]) < self.size:
            raise ShapeError("Cannot pool input of shape %s with window %d." % (tuple(input_shape), self.size))
        return (input_shape[0],) + tuple((size - self.size) // self.stride + 1 for size in input_shape[1:])


LAYER_KINDS = {layer_class.kind: layer_class for layer_class in (Dense, Conv2D, ReLU, MaxPool)}


@dataclass(frozen=True, eq=False)
class Model:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
            if layer.is_linear and layer.params is not None and layer.params.shape != layer.weight_shape:
                raise ShapeError("%s layer expects weights of shape %s, got %s." % (layer.kind, layer.weight_shape, layer.params.shape))

    @property
    def output_shape(self):
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def linear_indices(self):
        return [index for index, layer in enumerate(self.layers) if layer.is_linear]

    def params(self):
        return {index: self.layers[index].params for index in self.linear_indices()}

    def with_params(self, params):
        layers = list(self.layers)
        for index, value in params.items():
            layers[index] = replace(layers[index], params=freeze(np.array(value, dtype=np.float64)))
        return Model(self.input_shape, tuple(layers))

    def to_dict(self):
        return {'input_shape': list(self.input_shape), 'layers': [layer.to_dict() for layer in self.layers]}


def init_model(layers, input_shape, seed):
    """
    He-uniform weights (bias columns start at zero), deterministic given seed.

    """
    rng = philox(seed)
    layers = [Layer.from_dict(layer) if isinstance(layer, dict) else layer for layer in layers]
    model = Model(tuple(input_shape), tuple(layers))
    params = {}
    for index in model.linear_indices():
        layer = model.layers[index]
        limit = math.sqrt(6.0 / layer.fan_in)
        weights = rng.uniform(-limit, limit, size=layer.weight_shape)
        if isinstance(layer, Dense):
            weights[:, -1] = 0.0
        params[index] = weights
    return model.with_params(params)


def save_model(model, directory, dtype='float64'):
    os.makedirs(directory, exist_ok=True)
    manifest = model.to_dict()
    for index, layer_data in enumerate(manifest['layers']):
        layer = model.layers[index]
        if layer.is_linear:
            filename = 'layer_%d.dkt' % index
            write_tensor(layer.params, os.path.join(directory, filename), dtype)
            layer_data['params'] = filename
    with open(os.path.join(directory, MANIFEST_NAME), 'w') as f:
        json.dump(manifest, f, indent=2)


def load_model(directory):
    try:
        with open(os.path.join(directory, MANIFEST_NAME)) as f:
            manifest = json.load(f)
    except ValueError as e:
        raise TensorFormatError("Invalid model manifest: %s" % e)
    if not isinstance(manifest, dict) or not {'input_shape', 'layers'} <= set(manifest):
        raise TensorFormatError("Model manifest needs input_shape and layers.")
    layers = []
    for layer_data in manifest['layers']:
        layer_data = dict(layer_data)
        filename = layer_data.pop('params', None)
        layer = Layer.from_dict(layer_data)
        if layer.is_linear:
            if filename is None:
                raise TensorFormatError("Manifest lists no weights for layer %s." % layer.kind)
            layer = replace(layer, params=read_tensor(os.path.join(directory, filename)))
        layers.append(layer)
    return Model(tuple(manifest['input_shape']), tuple(layers))
