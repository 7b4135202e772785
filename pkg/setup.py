import os

from setuptools import Extension, setup

DIRECTIVES = {
    "language_level": "3",
    "boundscheck": False,
    "wraparound": False,
    "cdivision": True,
}


def extensions():
    if os.environ.get("EDGEKV_NO_EXT"):
        return []
    try:
        from Cython.Build import cythonize
    except ImportError:
        # pure-Python fallback is selected at import time
        return []
    ext = Extension(
        "edgekv._kernels",
        ["src/edgekv/_kernels.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives=DIRECTIVES)


setup(ext_modules=extensions())
