"""
Training-side coding of weight gradients.

The trusted context picks a secret mixing matrix A (the same one that blinds
the layer's forward inputs) and a secret diagonal Gamma, then solves for a
public (K+1) x K matrix B such that

    B^T Gamma A = [I_K | 0]

The untrusted context combines the per-sample output gradients with the rows
of B and multiplies each combination by one stored blinded input:

    eqs[j] = < sum_i B[j][i] delta(i), blinded[j] >

and the trusted context recovers the batch gradient as

    (1/K) sum_j gamma_j eqs[j] = (1/K) sum_i < delta(i), x(i) >

The zero column of [I_K | 0] is what cancels the noise.

"""
import logging
from dataclasses import dataclass, field

import numpy as np

from masking.blinding import invert
from masking.sampling import philox, random_orthogonal
from tensors.exceptions import KeyMaterialError, ParameterError, ProtocolError, ShapeError
from tensors.ops import as_tensor, freeze

logger = logging.getLogger(__name__)

GAMMA_RANGE = (0.5, 2.0)


@dataclass(frozen=True)
class GradCodec:
    """
    (A, Gamma, B) for one virtual batch and layer. Only b is public.

    """
    k: int
    a: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    b: np.ndarray

    def constraint_residual(self):
        target = np.eye(self.k, self.k + 1)
        return float(np.max(np.abs(self.b.T @ np.diag(self.gamma) @ self.a - target)))


@dataclass(frozen=True)
class CodedGradEquations:
    eqs: tuple

    def __post_init__(self):
        if len({eq.shape for eq in self.eqs}) > 1:
            raise ShapeError("Coded gradient equations must share one shape.")

    def __len__(self):
        return len(self.eqs)

    def __iter__(self):
        return iter(self.eqs)


def solve_b(a, gamma):
    """
    Closed-form B with B^T Gamma A = [I_K | 0], i.e. B^T = M A^-1 Gamma^-1.

    """
    k = a.shape[0] - 1
    return (np.eye(k, k + 1) @ invert(a) @ np.diag(1.0 / gamma)).T


def generate_grad_codec(k, rng_seed, a=None, gamma=None):
    """
    Samples A (random orthogonal unless given) and Gamma (|gamma_j| in
    [0.5, 2] with random signs unless given), then solves for B.

    """
    if k < 1:
        raise ParameterError("Virtual batch size must be at least 1, got %r." % k)
    rng = philox(rng_seed)
    if a is None:
        a = random_orthogonal(rng, k + 1)
    a = np.array(a, dtype=np.float64)
    if a.shape != (k + 1, k + 1):
        raise KeyMaterialError("Expected a %dx%d mixing matrix, got %s." % (k + 1, k + 1, a.shape))
    if gamma is None:
        magnitudes = rng.uniform(*GAMMA_RANGE, size=k + 1)
        signs = np.where(rng.random(k + 1) < 0.5, -1.0, 1.0)
        gamma = magnitudes * signs
    gamma = np.array(gamma, dtype=np.float64)
    if gamma.shape != (k + 1,):
        raise KeyMaterialError("Expected %d gamma entries, got %s." % (k + 1, gamma.shape))
    if np.any(gamma == 0):
        raise KeyMaterialError("Gamma entries must be non-zero.")
    b = solve_b(a, gamma)
    logger.debug("Generated gradient codec for k=%d", k)
    return GradCodec(k=k, a=freeze(a), gamma=freeze(gamma), b=freeze(b))


def combine_rows(matrix, tensors):
    """
    output[j] = sum_i matrix[j][i] tensors[i]

    """
    stacked = np.stack([np.asarray(t, dtype=np.float64) for t in tensors])
    return [freeze(row) for row in np.tensordot(matrix, stacked, axes=1)]


def encode_deltas(deltas, b):
    """
    Mixes K per-sample output gradients with the public matrix B into K+1
    encoded gradients. Only public values are involved.

    """
    b = np.asarray(b, dtype=np.float64)
    if len(deltas) != b.shape[1]:
        raise ProtocolError("B expects %d gradients, got %d." % (b.shape[1], len(deltas)))
    deltas = [as_tensor(d) for d in deltas]
    if len({d.shape for d in deltas}) > 1:
        raise ShapeError("Per-sample gradients must share one shape.")
    return combine_rows(b, deltas)


def coded_products(encoded_deltas, blinded_inputs, op):
    """
    Forms the K+1 coded equations on the untrusted side: the weight gradient
    of op for each (encoded gradient, blinded input) pair. One extra blinded
    input (an integrity row) is allowed and ignored.

    """
    if len(blinded_inputs) - len(encoded_deltas) not in (0, 1):
        raise ProtocolError("Got %d encoded gradients for %d blinded inputs." % (len(encoded_deltas), len(blinded_inputs)))
    return CodedGradEquations(eqs=tuple(
        op.weight_grad(delta, x) for delta, x in zip(encoded_deltas, blinded_inputs)
    ))


def decode_grad(eqs, codec):
    """
    (1/K) sum_j gamma_j eqs[j]: the batch-mean weight gradient.

    """
    if len(eqs) != codec.k + 1:
        raise ProtocolError("Expected %d coded equations, got %d." % (codec.k + 1, len(eqs)))
    stacked = np.stack([np.asarray(eq, dtype=np.float64) for eq in eqs])
    return freeze(np.tensordot(codec.gamma, stacked, axes=1) / codec.k)


def recover_input_grads(products, codec):
    """
    Recovers the K per-sample input gradients from the K+1 untrusted products
    of W with the encoded gradients, using the left inverse of B (B has full
    column rank).

    """
    if len(products) != codec.k + 1:
        raise ProtocolError("Expected %d input-gradient products, got %d." % (codec.k + 1, len(products)))
    return combine_rows(np.linalg.pinv(codec.b), products)
