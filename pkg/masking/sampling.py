"""
Seeded randomness for key material. All generators are numpy's counter-based
Philox bit generator, so a (seed, draw order) pair always gives the same key.

"""
import numpy as np

from tensors.exceptions import ParameterError


def philox(seed):
    return np.random.Generator(np.random.Philox(seed))


def gaussian(rng, shape, mean=0.0, variance=1.0):
    """
    Draws iid N(mean, variance) samples with the Box-Muller transform.

    """
    if variance <= 0:
        raise ParameterError("Noise variance must be positive.")
    count = int(np.prod(shape, dtype=np.int64))
    pairs = (count + 1) // 2
    # 1 - U keeps the logarithm away from zero
    u1 = 1.0 - rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    standard = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])[:count]
    return mean + np.sqrt(variance) * standard.reshape(shape)


def random_orthogonal(rng, n):
    """
    Haar-distributed orthogonal n x n matrix: QR of a Gaussian matrix, with
    the columns of Q flipped so that R has a positive diagonal.

    """
    q, r = np.linalg.qr(gaussian(rng, (n, n)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def random_with_condition_number(rng, n, condition_number):
    """
    Random invertible n x n matrix whose 2-norm condition number is exactly
    condition_number (up to rounding).

    """
    if condition_number < 1:
        raise ParameterError("Condition number must be at least 1.")
    u = random_orthogonal(rng, n)
    v = random_orthogonal(rng, n)
    singular_values = np.geomspace(1.0, 1.0 / condition_number, n) if n > 1 else np.ones(1)
    return (u * singular_values) @ v.T
