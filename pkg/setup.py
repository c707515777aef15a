import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off keeps the compiled kernel bit-identical to the Python fallback
extensions = [
    Extension(
        "twolevel._kernel",
        ["src/twolevel/_kernel.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O2", "-ffp-contract=off"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
