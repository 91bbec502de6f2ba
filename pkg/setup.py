"""Build script. The compiled kernel extension is optional: when Cython or a C
compiler is unavailable the package installs anyway and falls back to the
numpy kernels at import time."""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "anchorseg.kernels._fastcore",
                ["src/anchorseg/kernels/_fastcore.pyx"],
                extra_compile_args=["-O3", "-march=native"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
