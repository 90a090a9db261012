# pip install -e . --no-build-isolation  (builds bipprune._ckernels in place)
import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # numpy fallback is selected at import
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "bipprune._ckernels",
                ["src/bipprune/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
