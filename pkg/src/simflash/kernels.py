"""Kernel backend selection.

The compiled module is used when it was built; set ``SIMFLASH_PURE_PYTHON=1``
to force the numpy fallback.
"""
import os

from simflash import _pykernels

if os.environ.get("SIMFLASH_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from simflash import _ckernels as _impl
    except ImportError:  # extension not built
        _impl = _pykernels

BACKEND = "cython" if _impl is not _pykernels else "python"

crc64 = _impl.crc64
keystream = _impl.keystream
keystream_words = _impl.keystream_words
xor_bytes = _impl.xor_bytes
match_slots = _impl.match_slots
fold_chunks = _impl.fold_chunks


def backends():
    """All importable backends, keyed by name (used by tests and the benchmark)."""
    found = {"python": _pykernels}
    try:
        from simflash import _ckernels
    except ImportError:
        pass
    else:
        found["cython"] = _ckernels
    return found
