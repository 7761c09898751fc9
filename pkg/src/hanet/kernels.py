"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
fallback. Setting ``HANET_KERNELS=python`` forces the fallback.
"""

import logging
import os

from hanet import _pykernels

log = logging.getLogger(__name__)

def _load():
    if os.environ.get("HANET_KERNELS", "").lower() == "python":
        return _pykernels, "python"
    try:
        from hanet import _ckernels
    except ImportError:
        log.debug("compiled kernels unavailable, using numpy fallback")
        return _pykernels, "python"
    return _ckernels, "cython"


_impl, BACKEND = _load()

im2col = _impl.im2col
col2im = _impl.col2im
adaptive_pool_forward = _impl.adaptive_pool_forward
adaptive_pool_backward = _impl.adaptive_pool_backward
bilinear_forward = _impl.bilinear_forward
bilinear_backward = _impl.bilinear_backward
stamp_gaussians = _impl.stamp_gaussians


def backends():
    """Map of every importable backend name to its module."""
    found = {"python": _pykernels}
    try:
        from hanet import _ckernels
        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
