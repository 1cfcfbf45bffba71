import os

import numpy as np

from leakage.normalization import normalize_inputs
from masking.sampling import philox
from pipeline.training import Dataset
from tensors.exceptions import ParameterError, ShapeError, TensorFormatError
from tensors.io import read_tensor, write_tensor

INPUTS_NAME = 'inputs.dkt'
LABELS_NAME = 'labels.dkt'


def make_blobs(samples=64, seed=0, spread=0.7):
    """
    Two Gaussian classes in the plane, centred on (-1, -1) and (1, 1).

    """
    rng = philox(seed)
    labels = rng.permutation(np.arange(samples) % 2)
    centres = np.where(labels[:, None] == 1, 1.0, -1.0)
    inputs = centres + rng.normal(scale=spread, size=(samples, 2))
    return Dataset(tuple(inputs), tuple(int(label) for label in labels))


def make_xor(samples=64, seed=0, spread=0.1):
    """
    Noisy points around the four corners (+-1, +-1); the label is 1 when
    the coordinates' signs differ.

    """
    rng = philox(seed)
    corners = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
    picked = corners[rng.permutation(np.arange(samples) % 4)]
    inputs = picked + rng.normal(scale=spread, size=(samples, 2))
    labels = (picked[:, 0] * picked[:, 1] < 0).astype(int)
    return Dataset(tuple(inputs), tuple(int(label) for label in labels))


SYNTHETIC = {
    'blobs': make_blobs,
    'xor': make_xor,
}


def synthetic_dataset(name, samples=64, seed=0):
    try:
        return SYNTHETIC[name](samples, seed)
    except KeyError:
        raise ParameterError("Unknown synthetic dataset '%s'." % name)


def read_inputs(path):
    """
    Splits a stacked DKTENSOR file into per-sample tensors.

    """
    stacked = read_tensor(path)
    if stacked.ndim < 2:
        raise ShapeError("Stacked inputs need a sample axis and at least one data axis.")
    return [stacked[i] for i in range(stacked.shape[0])]


def load_dataset(directory):
    inputs = read_inputs(os.path.join(directory, INPUTS_NAME))
    labels = read_tensor(os.path.join(directory, LABELS_NAME))
    if labels.ndim != 1 or np.any(labels != np.round(labels)) or np.any(labels < 0):
        raise TensorFormatError("Labels must be a vector of non-negative integers.")
    return Dataset(tuple(inputs), tuple(int(label) for label in labels))


def save_dataset(dataset, directory, dtype='float64'):
    os.makedirs(directory, exist_ok=True)
    write_tensor(np.stack(dataset.inputs), os.path.join(directory, INPUTS_NAME), dtype)
    write_tensor(np.array(dataset.labels, dtype=np.float64), os.path.join(directory, LABELS_NAME), dtype)


def normalize(inputs, norm):
    """
    Applies the configured normalization. Returns the inputs and C1, the
    largest entry magnitude any of them has.

    """
    if norm == 'none':
        return list(inputs), max(float(np.max(np.abs(x))) for x in inputs)
    return normalize_inputs(inputs, norm)


def normalize_dataset(dataset, norm):
    inputs, c1 = normalize(dataset.inputs, norm)
    return Dataset(tuple(inputs), dataset.labels), c1
