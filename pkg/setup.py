"""Build script: compiles the Cython kernel extension when a toolchain is
available, otherwise installs the pure-NumPy package (the kernel dispatcher
falls back at import time)."""

import sys

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "protoseg.kernels._convcy",
                ["src/protoseg/kernels/_convcy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError as exc:
    print(f"protoseg: building without compiled kernels ({exc})", file=sys.stderr)

setup(ext_modules=ext_modules)
