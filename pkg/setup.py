import numpy as np
from setuptools import Extension, setup

# The compiled kernels are an optional accelerator: the package falls back to
# the numpy implementations at import time if the extension is missing.
try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "smokediff.kernels._ckernels",
                ["src/smokediff/kernels/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
