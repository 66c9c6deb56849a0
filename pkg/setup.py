from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [Extension("plstraj._kernels", ["src/plstraj/_kernels.pyx"])],
        compiler_directives={"language_level": "3"},
    )
except ImportError:
    # Source distributions without Cython fall back to the pure-python solver.
    extensions = []

setup(ext_modules=extensions)
