"""Build script: compiles the optional Cython kernel for polyline matching.

The package works without the extension (a NumPy fallback is selected at
import time), so a missing Cython toolchain only degrades speed.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "ltp._frechet_cy",
                ["src/ltp/_frechet_cy.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
        },
    )

setup(ext_modules=ext_modules)
