"""Build the optional Cython kernel extension.

The package works without it: ``blockcs._backend`` falls back to the numpy
implementation when ``blockcs._ckernels`` cannot be imported.
"""
import os

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # pragma: no cover - build without Cython
    ext_modules = []
else:
    openmp = os.environ.get("BLOCKCS_NO_OPENMP") is None
    ext_modules = cythonize(
        [
            Extension(
                "blockcs._ckernels",
                ["src/blockcs/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"] + (["-fopenmp"] if openmp else []),
                extra_link_args=["-fopenmp"] if openmp else [],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )

setup(ext_modules=ext_modules)
