"""
Inference-side blinding.

K inputs and one noise tensor r are mixed by a secret (K+1) x (K+1) matrix A:

    blinded[i] = A[i][0] x(1) + ... + A[i][K-1] x(K) + A[i][K] r

The last column of A always multiplies the noise. After the untrusted side
applies a bilinear op to every blinded input, stacking its outputs as rows
and multiplying by A^-1 recovers op(W, x(i)) for every i, plus op(W, r),
which is dropped.

With integrity enabled, A gets one extra row, giving K+2 blinded inputs;
see pipeline.integrity.

"""
import logging
from dataclasses import dataclass, field

import numpy as np

from masking.sampling import gaussian, philox, random_orthogonal, random_with_condition_number
from tensors.exceptions import KeyMaterialError, ParameterError, ProtocolError, ShapeError
from tensors.ops import as_tensor, freeze

logger = logging.getLogger(__name__)

INVERSE_TOLERANCE = 1e-10


@dataclass(frozen=True)
class NoiseSpec:
    mean: float = 0.0
    variance: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.variance > 0:
            raise ParameterError("Noise variance must be positive, got %r." % self.variance)


@dataclass(frozen=True)
class BlindingKey:
    """
    Secret material for one virtual batch. Held by the trusted context only.

    """
    k: int
    a: np.ndarray = field(repr=False)
    a_inv: np.ndarray = field(repr=False)
    noise: np.ndarray = field(repr=False)

    @property
    def integrity(self):
        return self.a.shape[0] == self.k + 2

    @property
    def input_shape(self):
        return self.noise.shape

    def condition_number(self):
        return float(np.linalg.cond(self.a[:self.k + 1]))


@dataclass(frozen=True)
class CodedBatch:
    blinded: tuple
    k: int
    integrity: bool = False

    def __post_init__(self):
        expected = self.k + 2 if self.integrity else self.k + 1
        if len(self.blinded) != expected:
            raise ProtocolError("A coded batch of %d inputs carries %d blinded tensors, not %d." % (self.k, len(self.blinded), expected))
        if len({b.shape for b in self.blinded}) > 1:
            raise ShapeError("Blinded tensors must share one shape.")

    def __len__(self):
        return len(self.blinded)

    def __iter__(self):
        return iter(self.blinded)


def coefficient_ratio_sq(a):
    """
    Squared ratio of the largest to the smallest mixing coefficient magnitude.

    """
    magnitudes = np.abs(np.asarray(a))
    smallest = magnitudes.min()
    return float((magnitudes.max() / smallest) ** 2) if smallest > 0 else float('inf')


def invert(a):
    try:
        a_inv = np.linalg.inv(a)
    except np.linalg.LinAlgError as e:
        raise KeyMaterialError("Mixing matrix is singular.") from e
    # Allow the residual to grow with the conditioning, so the deliberately
    # ill-conditioned keys can still be built.
    tolerance = INVERSE_TOLERANCE * max(1.0, np.linalg.cond(a))
    residual = np.max(np.abs(a @ a_inv - np.eye(a.shape[0])))
    if not residual <= tolerance:
        raise KeyMaterialError("Mixing matrix is not safely invertible (residual %.3g)." % residual)
    return a_inv


def integrity_row(rng, k):
    row = gaussian(rng, (k + 1,))
    return row / np.linalg.norm(row)


def generate_blinding_key(k, input_shape, noise_spec, rng_seed, a=None, integrity=False, condition_number=None):
    """
    Builds the secret key for one virtual batch of k inputs.

    By default A is a random orthogonal matrix. Pass a to reuse an existing
    square mixing matrix (the gradient codec's A during training), or
    condition_number to get an arbitrary invertible A with that 2-norm
    condition number instead. integrity appends one extra random row.

    """
    if k < 1:
        raise ParameterError("Virtual batch size must be at least 1, got %r." % k)
    rng = philox(rng_seed)
    if a is None:
        if condition_number is None:
            a = random_orthogonal(rng, k + 1)
        else:
            a = random_with_condition_number(rng, k + 1, condition_number)
    else:
        a = np.array(a, dtype=np.float64)
        if a.shape != (k + 1, k + 1):
            raise KeyMaterialError("Expected a %dx%d mixing matrix, got %s." % (k + 1, k + 1, a.shape))
    a_inv = invert(a)
    if integrity:
        a = np.vstack([a, integrity_row(rng, k)])
    noise = gaussian(philox((rng_seed, noise_spec.seed)), tuple(input_shape), noise_spec.mean, noise_spec.variance)
    logger.debug("Generated blinding key for k=%d, input shape %s, integrity=%s", k, tuple(input_shape), integrity)
    return BlindingKey(k=k, a=freeze(a), a_inv=freeze(a_inv), noise=freeze(noise))


def blind(inputs, key):
    """
    Mixes key.k inputs and the key's noise into k+1 (or k+2) blinded inputs.

    """
    if len(inputs) != key.k:
        raise ProtocolError("Key was generated for %d inputs, got %d." % (key.k, len(inputs)))
    inputs = [as_tensor(x) for x in inputs]
    for x in inputs:
        if x.shape != key.input_shape:
            raise ShapeError("Input of shape %s does not match the key's shape %s." % (x.shape, key.input_shape))
    stacked = np.stack(inputs + [key.noise])
    mixed = np.tensordot(key.a, stacked, axes=1)
    return CodedBatch(blinded=tuple(freeze(row) for row in mixed), k=key.k, integrity=key.integrity)


def unblind(outputs, key):
    """
    Recovers the k true outputs from the untrusted outputs of k+1 (or k+2)
    blinded inputs. The op(W, r) component is discarded.

    """
    if len(outputs) not in (key.k + 1, key.a.shape[0]):
        raise ProtocolError("Expected %d blinded outputs, got %d." % (key.k + 1, len(outputs)))
    outputs = [np.asarray(y, dtype=np.float64) for y in outputs[:key.k + 1]]
    shape = outputs[0].shape
    if any(y.shape != shape for y in outputs):
        raise ShapeError("Blinded outputs must share one shape.")
    rows = np.stack(outputs).reshape(key.k + 1, -1)
    recovered = key.a_inv @ rows
    return [freeze(recovered[i].reshape(shape)) for i in range(key.k)]
