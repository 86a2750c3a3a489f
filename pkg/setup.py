"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a NumPy fallback is selected at
import time), so a failed extension build must not fail the install.
"""

from setuptools import setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        "src/proseco/kernels/_ck.pyx",
        language_level=3,
        compiler_directives={
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
except Exception as exc:  # noqa: BLE001 - any build-env problem degrades to numpy backend
    import sys

    print(f"proseco: skipping Cython kernels ({exc}); numpy backend will be used", file=sys.stderr)

setup(ext_modules=ext_modules)
