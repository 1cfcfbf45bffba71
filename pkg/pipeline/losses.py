import numpy as np

from tensors.exceptions import ParameterError, ShapeError


def _one_hot(label, size):
    if not 0 <= label < size:
        raise ShapeError("Label %r is out of range for %d outputs." % (label, size))
    target = np.zeros(size)
    target[label] = 1.0
    return target


def _check(logits, labels):
    if len(logits) != len(labels):
        raise ShapeError("Got %d outputs but %d labels." % (len(logits), len(labels)))
    if not logits:
        raise ShapeError("Cannot compute a loss over an empty batch.")
    return [np.asarray(y, dtype=np.float64).reshape(-1) for y in logits], [int(label) for label in labels]


def mse(logits, labels):
    """
    Mean squared error against one-hot targets. Returns the batch-mean loss
    and the per-sample output gradients.

    """
    logits, labels = _check(logits, labels)
    losses, deltas = [], []
    for y, label in zip(logits, labels):
        diff = y - _one_hot(label, y.size)
        losses.append(np.mean(diff * diff))
        deltas.append(2.0 * diff / y.size)
    return float(np.mean(losses)), deltas


def softmax_cross_entropy(logits, labels):
    logits, labels = _check(logits, labels)
    losses, deltas = [], []
    for y, label in zip(logits, labels):
        shifted = y - np.max(y)
        log_probs = shifted - np.log(np.sum(np.exp(shifted)))
        losses.append(-log_probs[label])
        deltas.append(np.exp(log_probs) - _one_hot(label, y.size))
    return float(np.mean(losses)), deltas


LOSSES = {
    'mse': mse,
    'softmax_cross_entropy': softmax_cross_entropy,
}


def get_loss(name):
    try:
        return LOSSES[name]
    except KeyError:
        raise ParameterError("Unknown loss '%s'; expected one of %s." % (name, ', '.join(LOSSES)))


def accuracy(logits, labels):
    logits, labels = _check(logits, labels)
    return float(np.mean([int(np.argmax(y)) == label for y, label in zip(logits, labels)]))
