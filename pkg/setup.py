import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("MANGOTREE_PURE_PYTHON"):
    ext_modules = cythonize(
        [
            Extension(
                "mangotree._core",
                ["src/mangotree/_core.pyx", "src/mangotree/_csrc/kernels.c"],
                include_dirs=[np.get_include(), "src/mangotree"],
                extra_compile_args=["-O3", "-march=native", "-ffp-contract=fast"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
