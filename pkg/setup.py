"""Build script: compiles the optional pair-sum extension.

The package works without the extension (a NumPy fallback is selected at
import time), so the build is marked optional and a missing compiler or
Cython only costs speed, never a failed install.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "quadest._fastpath",
                ["src/quadest/_fastpath.pyx"],
                include_dirs=[numpy.get_include()],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
