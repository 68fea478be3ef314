"""Build script for the optional compiled convolution core.

The package is fully functional without the extension (a numpy im2col
fallback is selected at import time); the extension only accelerates the
hot conv2d kernels. Build failures therefore degrade to a warning.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - build env always has Cython
    cythonize = None

ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "mcdiff.nn._ckernels",
                ["src/mcdiff/nn/_ckernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
