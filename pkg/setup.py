"""Build script for the optional compiled lattice kernel.

The package is pure Python except for ``taed._rnntdp``, a Cython extension
that accelerates the transducer forward-backward recursion.  If Cython or a
C compiler is unavailable the install still succeeds and the package falls
back to the numpy implementation in ``taed.kernels``.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("TAED_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            ["src/taed/_rnntdp.pyx"],
            language_level=3,
        )
        for ext in ext_modules:
            ext.include_dirs.append(numpy.get_include())
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
