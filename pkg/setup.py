import numpy as np
from setuptools import Extension, setup

# The compiled kernels are optional: if Cython or a C compiler is missing the
# package installs anyway and cdnz.kernels falls back to the numpy versions.
try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "cdnz.kernels._cy",
                ["src/cdnz/kernels/_cy.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
