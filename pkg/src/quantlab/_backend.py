"""Kernel backend selection.

The compiled extension is used when importable; setting
``QUANTLAB_PURE_PYTHON=1`` forces the numpy fallback.
"""

import logging
import os

logger = logging.getLogger(__name__)

if os.environ.get("QUANTLAB_PURE_PYTHON") == "1":
    from quantlab import _kernels_py as kernels

    BACKEND = "python"
else:
    try:
        from quantlab import _kernels as kernels

        BACKEND = "cython"
    except ImportError:  # extension not built
        from quantlab import _kernels_py as kernels

        BACKEND = "python"
        logger.debug("compiled kernels unavailable, using numpy fallback")

__all__ = ["BACKEND", "kernels"]
