import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "kernelflow.backends._fieldcore",
                ["src/kernelflow/backends/_fieldcore.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # Pure-python fallback backend is selected at import time, so the
    # package remains fully functional without the compiled core.
    extensions = []

setup(ext_modules=extensions)
