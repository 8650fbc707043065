from setuptools import setup
from setuptools.extension import Extension

from Cython.Build import cythonize

extensions = [
    Extension(
        "svp_tta._kernels._core",
        ["src/svp_tta/_kernels/_core.pyx"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
