"""Build script for the optional Cython sketch kernel.

The package works without the extension (a numpy fallback is selected at
import time), so a missing compiler must not break installation.
"""

import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # no compiler, broken toolchain, ...
            print(f"warning: building the Cython kernel failed ({exc}); "
                  "falling back to the pure numpy kernel", file=sys.stderr)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: {ext.name} failed to compile ({exc}); "
                  "falling back to the pure numpy kernel", file=sys.stderr)


def extensions():
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "vfkmeans._sketch_kernel",
        sources=["src/vfkmeans/_sketch_kernel.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], language_level=3)


setup(
    ext_modules=extensions(),
    cmdclass={"build_ext": optional_build_ext},
)
