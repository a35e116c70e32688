import os

from setuptools import setup

ext_modules = []
if not os.environ.get("CNAV_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "cnav._kernels._core",
                    ["src/cnav/_kernels/_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            language_level=3,
        )
    except ImportError:
        # No Cython available: fall back to the pure-Python kernels.
        ext_modules = []

setup(ext_modules=ext_modules)
