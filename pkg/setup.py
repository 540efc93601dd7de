"""Build script: compiles the optional _kernels extension when Cython is available.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any build failure here downgrades to a warning.
"""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        ["src/vieo/_kernels/native.pyx"],
        language_level=3,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
    for ext in ext_modules:
        ext.include_dirs.append(numpy.get_include())
except Exception as exc:  # no compiler / no cython: ship pure python
    print("vieo: skipping native kernel build (%s)" % exc, file=sys.stderr)
    ext_modules = []

setup(ext_modules=ext_modules)
