"""Builds the optional compiled kernel core.

The package is fully functional without the extension; dualvla.backend falls
back to the numpy kernels when `dualvla._kernels` is missing.
"""

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
    import numpy

    ext_modules = cythonize(
        [
            Extension(
                "dualvla._kernels",
                ["src/dualvla/_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
