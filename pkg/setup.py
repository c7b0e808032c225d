import os

import numpy as np
from setuptools import Extension, setup

ext_kwargs = dict(
    include_dirs=[np.get_include()],
    # Fixed summation order must survive the compiler: no FMA contraction.
    extra_compile_args=["-O3", "-ffp-contract=off"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

ext_modules = []
if os.environ.get("QUANTLAB_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [Extension("quantlab._kernels", ["src/quantlab/_kernels.pyx"], **ext_kwargs)],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
