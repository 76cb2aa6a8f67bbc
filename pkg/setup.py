"""Builds the optional Cython kernels; the package falls back to numpy if absent."""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SIMFLASH_NO_EXT"):
    try:
        from Cython.Build import cythonize
        import numpy as np
    except ImportError:
        pass
    else:
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "simflash._ckernels",
                    ["src/simflash/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
