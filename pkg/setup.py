"""Build script: compiles the sweep kernel extension when a toolchain is available.

The package works without the extension (a numpy fallback is selected at
import); set DAEHN_NO_EXT=1 to skip the build explicitly.
"""

import os

from setuptools import setup

ext_modules = []
if not os.environ.get("DAEHN_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "daehn.autodiff._ckernel",
                    ["src/daehn/autodiff/_ckernel.pyx"],
                    extra_compile_args=["-O3", "-fopenmp"],
                    extra_link_args=["-fopenmp"],
                )
            ],
            language_level=3,
        )
    except Exception as exc:  # pragma: no cover - toolchain-dependent
        print(f"daehn: building without compiled kernel ({exc})")
        ext_modules = []

setup(ext_modules=ext_modules)
