"""Build shim for the optional compiled kernel.

If Cython or a C toolchain is unavailable the package still installs; the
kernels subpackage falls back to its NumPy implementation at import time.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "embodiff.kernels._corekern",
                ["src/embodiff/kernels/_corekern.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ]
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
