"""
Integrity checks for blinded computation.

With integrity enabled, the blinding matrix A has K+2 rows, so the untrusted
side returns one more output than there are unknowns. The first K+1 outputs
determine the unknowns; the last one must then equal A[K+1] applied to them.
An untrusted side that alters any output breaks that relation unless it
knows A.

"""
import logging
from dataclasses import dataclass

import numpy as np

from tensors.exceptions import KeyMaterialError, ParameterError, ProtocolError, ShapeError

logger = logging.getLogger(__name__)

OK = 'ok'
VIOLATION = 'violation'


@dataclass(frozen=True)
class IntegrityResult:
    layer: int
    max_residual: float
    threshold: float

    @property
    def ok(self):
        return self.max_residual <= self.threshold

    @property
    def status(self):
        return OK if self.ok else VIOLATION

    def to_dict(self):
        return {'layer': self.layer, 'status': self.status, 'max_residual': self.max_residual}


def _check_key(key):
    if not key.integrity:
        raise KeyMaterialError("Key was generated without an integrity row.")
    if np.linalg.matrix_rank(key.a) != key.k + 1:
        raise KeyMaterialError("Extended mixing matrix does not have full column rank.")


def verify_integrity(outputs, key, threshold=1e-6, layer=None):
    """
    Checks the K+2 untrusted outputs of one layer against the extended key.
    The residual is the largest absolute entry of the difference between the
    last output and the one the other outputs predict.

    """
    if not threshold >= 0:
        raise ParameterError("Integrity threshold must not be negative.")
    _check_key(key)
    if len(outputs) != key.k + 2:
        raise ProtocolError("Integrity check needs %d outputs, got %d." % (key.k + 2, len(outputs)))
    outputs = [np.asarray(y, dtype=np.float64) for y in outputs]
    if len({y.shape for y in outputs}) > 1:
        raise ShapeError("Blinded outputs must share one shape.")
    rows = np.stack(outputs).reshape(key.k + 2, -1)
    unknowns = key.a_inv @ rows[:key.k + 1]
    predicted = key.a[key.k + 1] @ unknowns
    residual = float(np.max(np.abs(predicted - rows[key.k + 1])))
    result = IntegrityResult(layer=layer, max_residual=residual, threshold=threshold)
    if not result.ok:
        logger.warning("Integrity violation at layer %s: residual %.3g exceeds %.3g", layer, residual, threshold)
    return result


def tamper_propagation_factor(key, equation):
    """
    How an error added to one output shows up in the residual: perturbing
    output `equation` by e moves the residual by |factor| * |e|. For the
    check row itself the factor is -1.

    """
    _check_key(key)
    if not 0 <= equation <= key.k + 1:
        raise ParameterError("Equation %d is out of range for a batch of %d." % (equation, key.k))
    if equation == key.k + 1:
        return -1.0
    return float((key.a[key.k + 1] @ key.a_inv)[equation])
