"""Build script for the compiled scenario-tree kernel.

The extension is optional: if the build fails (no compiler, no Cython)
the package still works through the pure-numpy backend selected at
import time in riskmpc.kernels.
"""

import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover
    cythonize = None

extensions = []
if cythonize is not None and os.path.exists("src/riskmpc/kernels/_core.pyx"):
    extensions = cythonize(
        [
            Extension(
                "riskmpc.kernels._core",
                ["src/riskmpc/kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
