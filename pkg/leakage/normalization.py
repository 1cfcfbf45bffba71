import numpy as np

from tensors.exceptions import NormalizationError, ParameterError
from tensors.ops import as_tensor, freeze

NORMS = {
    'l1': lambda x: np.sum(np.abs(x)),
    'l2': lambda x: np.sqrt(np.sum(x * x)),
}


def normalize_inputs(xs, norm='l2'):
    """
    Scales every input to unit l1 or l2 norm. Returns the scaled inputs and
    C1, the largest entry magnitude after scaling (never above 1).

    """
    try:
        measure = NORMS[norm]
    except KeyError:
        raise ParameterError("Unknown norm '%s'; expected one of %s." % (norm, ', '.join(NORMS)))
    normalized = []
    for x in xs:
        x = as_tensor(x)
        # Scale by the peak entry before taking the norm
        peak = float(np.max(np.abs(x))) if x.size else 0.0
        if not peak > 0:
            raise NormalizationError("Cannot normalize an all-zero input.")
        scaled = x / peak
        normalized.append(freeze(scaled / measure(scaled)))
    c1 = max((float(np.max(np.abs(x))) for x in normalized), default=0.0)
    return normalized, c1
