"""
The DKTENSOR file format.

    magic   8 bytes  b"DKTENSOR"
    version u8       1
    dtype   u8       1 = float64, 2 = float32
    rank    u16
    dims    rank x u64
    data    product(dims) little-endian scalars, row-major

Everything is little-endian. float64 files round-trip bit for bit; float32
is a storage option only, and reading one back gives the stored 32-bit
values widened to float64. Values outside the float32 range are rejected on
write, and non-finite stored values on read.

"""
import math
import struct

import numpy as np

from tensors.exceptions import TensorFormatError, ShapeError
from tensors.ops import as_tensor, freeze

MAGIC = b'DKTENSOR'
VERSION = 1
HEADER = struct.Struct('<8sBBH')
DTYPES = {
    'float64': (1, np.dtype('<f8')),
    'float32': (2, np.dtype('<f4')),
}
DTYPE_TAGS = {tag: dtype for tag, dtype in DTYPES.values()}


def tensor_to_bytes(tensor, dtype='float64'):
    try:
        tag, scalar = DTYPES[dtype]
    except KeyError:
        raise TensorFormatError("Unsupported storage dtype '%s'." % dtype)
    array = as_tensor(tensor)
    if any(dim < 1 for dim in array.shape):
        raise ShapeError("Tensor dimensions must be positive, got %s." % (array.shape,))
    if array.size and float(np.max(np.abs(array))) > np.finfo(scalar).max:
        raise TensorFormatError("Values exceed the range of %s storage." % dtype)
    header = HEADER.pack(MAGIC, VERSION, tag, array.ndim)
    dims = struct.pack('<%dQ' % array.ndim, *array.shape)
    return header + dims + np.ascontiguousarray(array, dtype=scalar).tobytes()


def tensor_from_bytes(data):
    if len(data) < HEADER.size:
        raise TensorFormatError("Truncated header (%d bytes)." % len(data))
    magic, version, tag, rank = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TensorFormatError("Bad magic %r." % magic)
    if version != VERSION:
        raise TensorFormatError("Unsupported version %d." % version)
    if tag not in DTYPE_TAGS:
        raise TensorFormatError("Unknown dtype tag %d." % tag)
    offset = HEADER.size
    if len(data) < offset + 8 * rank:
        raise TensorFormatError("Truncated dimensions.")
    shape = struct.unpack_from('<%dQ' % rank, data, offset)
    offset += 8 * rank
    if any(dim < 1 for dim in shape):
        raise ShapeError("Stored dimensions must be positive, got %s." % (shape,))
    scalar = DTYPE_TAGS[tag]
    expected = math.prod(shape) * scalar.itemsize
    payload = len(data) - offset
    if payload < expected:
        raise TensorFormatError("Truncated payload: expected %d bytes, found %d." % (expected, payload))
    if payload > expected:
        raise TensorFormatError("Payload of %d bytes does not match shape %s." % (payload, shape))
    values = np.frombuffer(data, dtype=scalar, offset=offset).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise TensorFormatError("Stored tensor holds NaN or infinite values.")
    return freeze(values.reshape(shape))


def write_tensor(tensor, path, dtype='float64'):
    data = tensor_to_bytes(tensor, dtype)
    with open(path, 'wb') as f:
        f.write(data)


def read_tensor(path):
    with open(path, 'rb') as f:
        return tensor_from_bytes(f.read())
