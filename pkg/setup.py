import os

import numpy as np
from setuptools import Extension, setup

# The compiled kernel is optional: fedmix falls back to numpy when it is absent.
ext_modules = []
if os.environ.get("FEDMIX_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "fedmix._ckernels",
                    ["src/fedmix/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
