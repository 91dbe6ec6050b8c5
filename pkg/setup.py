"""Build script.

The compiled geometry kernel is optional: if Cython or a C compiler is
unavailable the package installs anyway and falls back to the numpy
reference implementation at import time.
"""
import os
import sys

from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("CFMPLAN_SKIP_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext = Extension(
            "cfmplan._kernels._fastgeom",
            ["src/cfmplan/_kernels/_fastgeom.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize([ext], language_level="3")
    except Exception as exc:  # pragma: no cover - depends on toolchain
        sys.stderr.write("cfmplan: skipping compiled kernel (%s)\n" % exc)
        ext_modules = []

setup(ext_modules=ext_modules)
