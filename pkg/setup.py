import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off: the compiled kernels must agree bit-for-bit with the
# numpy fallback, so fused multiply-adds are disabled.
extensions = [
    Extension(
        "bodycomp._kernels._native",
        ["src/bodycomp/_kernels/_native.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
