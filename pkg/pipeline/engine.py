"""
Forward and backward passes.

The split engine routes every linear layer through the untrusted context on
blinded data and keeps everything else in the trusted context. The plain
engine runs the same model with no blinding; it is the oracle the split
engine is checked against.

"""
import numpy as np

from tensors.exceptions import ParameterError, ProtocolError, ShapeError
from tensors.ops import as_tensor, freeze, max_pool2d, max_pool2d_grad, relu, relu_grad


def _check_batch(model, inputs):
    if not inputs:
        raise ShapeError("Cannot run an empty batch.")
    activations = [as_tensor(x) for x in inputs]
    for x in activations:
        if x.shape != tuple(model.input_shape):
            raise ShapeError("Model expects inputs of shape %s, got %s." % (tuple(model.input_shape), x.shape))
    return activations


def forward_split(model, inputs, trusted, untrusted, training=False):
    """
    Runs k inputs through the model as one virtual batch. Returns the k
    outputs and the blinded inputs the untrusted context stored per layer.

    """
    activations = _check_batch(model, inputs)
    k = len(activations)
    for index, layer in enumerate(model.layers):
        if not layer.is_linear:
            activations = trusted.nonlinear_forward(index, layer, activations)
            continue
        prepared = [layer.prepare(x) for x in activations]
        b = trusted.open_layer(index, k, prepared[0].shape, training)
        if b is not None:
            untrusted.receive_public(index, b)
        outputs = untrusted.forward_linear(index, trusted.blind(index, prepared).blinded)
        activations = [layer.finish(y) for y in trusted.unblind(index, outputs)]
    return activations, untrusted.stored_activations()


def backward_split(model, stored, loss_grads, trusted, untrusted):
    """
    Returns the batch-mean weight gradient of every linear layer, keyed by
    layer index. loss_grads are the per-sample gradients of the loss with
    respect to the model outputs.

    """
    deltas = [as_tensor(d) for d in loss_grads]
    linear = model.linear_indices()
    grads = {}
    if not linear:
        return grads
    for index in reversed(range(len(model.layers))):
        layer = model.layers[index]
        if index < linear[0]:
            break
        if not layer.is_linear:
            deltas = trusted.nonlinear_backward(index, layer, deltas)
            continue
        if index not in stored:
            raise ProtocolError("No stored activations for layer %d; run forward_split first." % index)
        blinded = stored[index]
        encoded = trusted.encode(index, [layer.shape_delta(d) for d in deltas])
        need_input_grads = index > linear[0]
        eqs, products = untrusted.backward_linear(index, encoded, blinded, need_input_grads)
        grads[index] = trusted.decode(index, eqs)
        if need_input_grads:
            input_shape = _input_shape(model, index)
            deltas = [layer.input_delta(g, input_shape) for g in trusted.recover(index, products)]
    return grads


def _input_shape(model, index):
    shape = tuple(model.input_shape)
    for layer in model.layers[:index]:
        shape = layer.output_shape(shape)
    return shape


def forward_plain(model, inputs):
    """
    Unblinded forward pass. Returns the outputs and a per-layer cache for
    backward_plain.

    """
    activations = _check_batch(model, inputs)
    cache = {}
    for index, layer in enumerate(model.layers):
        if layer.is_linear:
            prepared = [layer.prepare(x) for x in activations]
            cache[index] = prepared
            activations = [layer.finish(layer.op.apply(layer.params, x)) for x in prepared]
        elif layer.kind == 'relu':
            cache[index] = activations
            activations = [relu(x) for x in activations]
        else:
            pooled = [max_pool2d(x, layer.size, layer.stride) for x in activations]
            cache[index] = [(argmax, x.shape) for x, (_, argmax) in zip(activations, pooled)]
            activations = [out for out, _ in pooled]
    return activations, cache


def backward_plain(model, cache, loss_grads):
    deltas = [as_tensor(d) for d in loss_grads]
    linear = model.linear_indices()
    grads = {}
    if not linear:
        return grads
    for index in reversed(range(len(model.layers))):
        if index < linear[0]:
            break
        layer = model.layers[index]
        cached = cache[index]
        if layer.kind == 'relu':
            deltas = [relu_grad(pre, delta) for pre, delta in zip(cached, deltas)]
        elif layer.kind == 'maxpool':
            deltas = [
                max_pool2d_grad(delta, argmax, shape, layer.size, layer.stride)
                for (argmax, shape), delta in zip(cached, deltas)
            ]
        else:
            shaped = [layer.shape_delta(d) for d in deltas]
            grads[index] = freeze(sum(layer.op.weight_grad(d, x) for d, x in zip(shaped, cached)) / len(shaped))
            if index > linear[0]:
                input_shape = _input_shape(model, index)
                deltas = [
                    layer.input_delta(layer.op.input_grad(layer.params, d, x.shape), input_shape)
                    for d, x in zip(shaped, cached)
                ]
    return grads


def sgd_step(model, grads, eta):
    """
    W <- W - eta * grad for every layer in grads.

    """
    params = model.params()
    updated = {}
    for index, grad in grads.items():
        if index not in params:
            raise ShapeError("Layer %d has no weights to update." % index)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params[index].shape:
            raise ShapeError("Gradient of shape %s does not match weights of shape %s for layer %d." % (grad.shape, params[index].shape, index))
        updated[index] = params[index] - eta * grad
    return model.with_params(updated)


def infer_split(model, inputs, k, trusted, untrusted):
    """
    Blinded inference over any number of inputs, k at a time. The last
    virtual batch may be smaller.

    """
    if k < 1:
        raise ParameterError("Virtual batch size must be at least 1, got %r." % k)
    outputs = []
    for start in range(0, len(inputs), k):
        logits, _ = forward_split(model, inputs[start:start + k], trusted, untrusted)
        outputs.extend(logits)
    return outputs
