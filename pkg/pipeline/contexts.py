"""
The two sides of a blinded run.

TrustedContext stands in for the enclave: it owns every secret (blinding
keys, gradient codecs, noise, the page secret), runs the nonlinear layers
and computes losses. UntrustedContext stands in for the accelerator: it
holds the model weights and only ever sees blinded inputs, encoded
gradients, the public B matrices and opaque gradient pages.

The engine in pipeline.engine moves values between the two. Nothing in
TrustedContext hands out a key, codec or noise tensor.

"""
import logging
import math
import secrets
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from django.conf import settings
from django.utils.crypto import constant_time_compare, salted_hmac

from gradcodec.codec import coded_products, decode_grad, encode_deltas, generate_grad_codec, recover_input_grads
from masking.blinding import NoiseSpec, blind, coefficient_ratio_sq, generate_blinding_key, unblind
from masking.sampling import philox
from pipeline.engine import sgd_step
from pipeline.integrity import verify_integrity
from tensors.exceptions import ParameterError, ProtocolError, ShapeError
from tensors.io import tensor_from_bytes, tensor_to_bytes
from tensors.ops import freeze, max_pool2d, max_pool2d_grad, relu, relu_grad

logger = logging.getLogger(__name__)

PAGE_SALT = 'pipeline.contexts.gradient_page'
PAGE_HEADER = struct.Struct('<II')
PAGE_ENTRY = struct.Struct('<IQ')
PAGE_TAG_SIZE = 32


@dataclass(frozen=True)
class TamperPolicy:
    """
    Adds epsilon to the output of blinded equation `equation` of layer
    `layer`: to the whole tensor, or to the single flat entry `entry`.

    """
    layer: int
    equation: int
    epsilon: float
    entry: int = None

    def __post_init__(self):
        if not math.isfinite(self.epsilon):
            raise ParameterError("Tamper epsilon must be finite.")
        if self.layer < 0 or self.equation < 0 or (self.entry is not None and self.entry < 0):
            raise ParameterError("Tamper targets must not be negative.")

    def apply(self, outputs):
        if self.equation >= len(outputs):
            raise ProtocolError("Cannot tamper with equation %d of %d." % (self.equation, len(outputs)))
        outputs = list(outputs)
        tampered = np.array(outputs[self.equation], dtype=np.float64)
        if self.entry is None:
            tampered += self.epsilon
        else:
            if self.entry >= tampered.size:
                raise ProtocolError("Cannot tamper with entry %d of a tensor of %d entries." % (self.entry, tampered.size))
            tampered.reshape(-1)[self.entry] += self.epsilon
        outputs[self.equation] = freeze(tampered)
        return outputs


class UntrustedContext:
    def __init__(self, model, workers=None):
        self.model = model
        self.workers = settings.DARKNIGHT_UNTRUSTED_WORKERS if workers is None else workers
        if self.workers < 1:
            raise ParameterError("Need at least one untrusted worker.")
        self.tamper = None
        self.public_b = {}
        self.activations = {}
        self.pages = []

    def _map(self, fn, *iterables):
        # Results come back in equation order either way
        if self.workers == 1:
            return list(map(fn, *iterables))
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            return list(executor.map(fn, *iterables))

    def _linear_layer(self, index):
        try:
            layer = self.model.layers[index]
        except IndexError:
            raise ProtocolError("Model has no layer %d." % index)
        if not layer.is_linear:
            raise ProtocolError("Layer %d (%s) is not linear." % (index, layer.kind))
        return layer

    def inject_tamper(self, policy):
        self._linear_layer(policy.layer)
        self.tamper = policy

    def receive_public(self, index, b):
        self.public_b[index] = b

    def forward_linear(self, index, blinded):
        """
        Applies the layer's weights to every blinded input and keeps the
        blinded inputs for the backward pass.

        """
        layer = self._linear_layer(index)
        self.activations[index] = tuple(blinded)
        outputs = self._map(lambda x: layer.op.apply(layer.params, x), blinded)
        if self.tamper is not None and self.tamper.layer == index:
            outputs = self.tamper.apply(outputs)
        return outputs

    def backward_linear(self, index, encoded_deltas, blinded, need_input_grads=True):
        """
        Returns the coded weight-gradient equations and, when asked, the
        products of W^T with every encoded gradient.

        """
        layer = self._linear_layer(index)
        b = self.public_b.get(index)
        if b is not None and len(encoded_deltas) != b.shape[0]:
            raise ProtocolError("B has %d rows but got %d encoded gradients." % (b.shape[0], len(encoded_deltas)))
        eqs = coded_products(encoded_deltas, blinded, layer.op)
        products = None
        if need_input_grads:
            x_shape = blinded[0].shape
            products = self._map(lambda delta: layer.op.input_grad(layer.params, delta, x_shape), encoded_deltas)
        return eqs, products

    def stored_activations(self):
        return dict(self.activations)

    def apply_update(self, grads, eta):
        self.model = sgd_step(self.model, grads, eta)
        return self.model

    def store_page(self, page):
        self.pages.append(page)

    def release_pages(self):
        pages, self.pages = self.pages, []
        return pages


class TrustedContext:
    def __init__(self, seed=0, noise_mean=None, noise_variance=None, integrity=False, threshold=None):
        self._rng = philox(seed)
        self._noise = NoiseSpec(
            mean=settings.DARKNIGHT_NOISE_MEAN if noise_mean is None else noise_mean,
            variance=settings.DARKNIGHT_NOISE_VARIANCE if noise_variance is None else noise_variance,
            seed=int(self._rng.integers(2 ** 63)),
        )
        self.integrity = integrity
        self.threshold = settings.DARKNIGHT_INTEGRITY_THRESHOLD if threshold is None else threshold
        if not self.threshold >= 0:
            raise ParameterError("Integrity threshold must not be negative.")
        self._keys = {}
        self._codecs = {}
        self._cache = {}
        self._page_secret = secrets.token_bytes(32)
        self.integrity_results = []
        self.coefficient_ratios = {}

    def _next_seed(self):
        return int(self._rng.integers(2 ** 63))

    def open_layer(self, index, k, input_shape, training=False):
        """
        Draws fresh key material for one layer of one virtual batch. Returns
        the public B when training, else None.

        """
        a = None
        if training:
            codec = generate_grad_codec(k, self._next_seed())
            self._codecs[index] = codec
            a = codec.a
        key = generate_blinding_key(k, input_shape, self._noise, self._next_seed(), a=a, integrity=self.integrity)
        self._keys[index] = key
        logger.debug("Opened layer %d for a virtual batch of %d (training=%s)", index, k, training)
        ratio = coefficient_ratio_sq(key.a[:k + 1, :k])
        self.coefficient_ratios[index] = max(ratio, self.coefficient_ratios.get(index, 1.0))
        return self._codecs[index].b if training else None

    def _key(self, index):
        try:
            return self._keys[index]
        except KeyError:
            raise ProtocolError("No key has been opened for layer %d." % index)

    def _codec(self, index):
        try:
            return self._codecs[index]
        except KeyError:
            raise ProtocolError("No gradient codec has been opened for layer %d." % index)

    def blind(self, index, inputs):
        return blind(inputs, self._key(index))

    def unblind(self, index, outputs):
        key = self._key(index)
        if key.integrity:
            self.integrity_results.append(verify_integrity(outputs, key, self.threshold, layer=index))
        return unblind(outputs, key)

    def encode(self, index, deltas):
        return encode_deltas(deltas, self._codec(index).b)

    def decode(self, index, eqs):
        return decode_grad(eqs, self._codec(index))

    def recover(self, index, products):
        return recover_input_grads(products, self._codec(index))

    def release_integrity_results(self):
        results, self.integrity_results = self.integrity_results, []
        return results

    # Nonlinear layers

    def nonlinear_forward(self, index, layer, activations):
        if layer.kind == 'relu':
            self._cache[index] = activations
            return [relu(x) for x in activations]
        if layer.kind == 'maxpool':
            pooled = [max_pool2d(x, layer.size, layer.stride) for x in activations]
            self._cache[index] = [(argmax, x.shape) for x, (_, argmax) in zip(activations, pooled)]
            return [out for out, _ in pooled]
        raise ParameterError("Unknown nonlinear layer '%s'." % layer.kind)

    def nonlinear_backward(self, index, layer, deltas):
        try:
            cached = self._cache[index]
        except KeyError:
            raise ProtocolError("Layer %d has no stored forward state." % index)
        if layer.kind == 'relu':
            return [relu_grad(pre, delta) for pre, delta in zip(cached, deltas)]
        return [
            max_pool2d_grad(delta, argmax, shape, layer.size, layer.stride)
            for (argmax, shape), delta in zip(cached, deltas)
        ]

    # Gradient pages

    def seal_page(self, grads, k):
        """
        Serializes one virtual batch's gradients into an opaque, tagged blob.

        """
        parts = [PAGE_HEADER.pack(k, len(grads))]
        for index, grad in sorted(grads.items()):
            data = tensor_to_bytes(grad)
            parts.append(PAGE_ENTRY.pack(index, len(data)))
            parts.append(data)
        payload = b''.join(parts)
        return payload + salted_hmac(PAGE_SALT, payload, secret=self._page_secret, algorithm='sha256').digest()

    def open_page(self, page):
        payload, tag = page[:-PAGE_TAG_SIZE], page[-PAGE_TAG_SIZE:]
        expected = salted_hmac(PAGE_SALT, payload, secret=self._page_secret, algorithm='sha256').digest()
        if len(page) <= PAGE_HEADER.size + PAGE_TAG_SIZE or not constant_time_compare(tag, expected):
            logger.warning("Rejected a gradient page with a bad tag")
            raise ProtocolError("Gradient page failed its integrity tag.")
        k, count = PAGE_HEADER.unpack_from(payload)
        offset = PAGE_HEADER.size
        grads = {}
        for _ in range(count):
            index, size = PAGE_ENTRY.unpack_from(payload, offset)
            offset += PAGE_ENTRY.size
            grads[index] = tensor_from_bytes(payload[offset:offset + size])
            offset += size
        return grads, k

    def aggregate_pages(self, pages):
        """
        Mean gradient over all pages, each weighted by its virtual batch size.

        """
        if not pages:
            raise ProtocolError("No gradient pages to aggregate.")
        total, count = {}, 0
        for page in pages:
            grads, k = self.open_page(page)
            if total and set(grads) != set(total):
                raise ProtocolError("Gradient pages cover different layers.")
            for index, grad in grads.items():
                if index in total and total[index].shape != grad.shape:
                    raise ShapeError("Gradient pages disagree on the shape of layer %d." % index)
                total[index] = total.get(index, 0.0) + k * grad
            count += k
        return {index: freeze(grad / count) for index, grad in total.items()}
