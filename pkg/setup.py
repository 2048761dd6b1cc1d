import numpy
from setuptools import Extension, setup
from Cython.Build import cythonize

# -ffp-contract=off keeps the compiled kernels bit-identical to the
# pure-numpy fallbacks (no FMA contraction).
extensions = [
    Extension(
        "latentsde._kernels._native",
        ["src/latentsde/_kernels/_native.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O2", "-ffp-contract=off"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
