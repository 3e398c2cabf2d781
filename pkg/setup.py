"""Build script for the optional compiled kernels.

The Cython extension is best-effort: when Cython or a C compiler is missing the
package installs without it and ``scenforge.kernels`` falls back to the numpy
implementation.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SCENFORGE_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "scenforge._ckernels",
                    ["src/scenforge/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    # no contraction: keeps results identical to the numpy path
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
