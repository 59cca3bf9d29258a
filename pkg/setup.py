"""Build script for the optional compiled kernel extension.

The package is fully functional without the extension; grle.kernels falls
back to the numpy implementations when grle.kernels._fast is missing.
"""

from setuptools import setup

try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "grle.kernels._fast",
                ["src/grle/kernels/_fast.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "language_level": 3,
        },
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
