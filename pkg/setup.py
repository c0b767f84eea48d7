import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("CO4_NO_EXT") != "1":
    from Cython.Build import cythonize

    ext = Extension(
        "co4._kernels",
        ["src/co4/_kernels.pyx"],
        include_dirs=[np.get_include()],
        libraries=["m"],
        extra_compile_args=["-O3"],
        optional=True,
    )
    ext_modules = cythonize(
        [ext],
        language_level=3,
        compiler_directives={"boundscheck": False, "wraparound": False, "cdivision": True},
    )

setup(ext_modules=ext_modules)
