"""Build script for the optional compiled kernel backend.

The package works without the extension (a numpy fallback is selected at
import time), so a missing compiler or Cython must not break installation.
"""

import logging

from setuptools import setup

log = logging.getLogger(__name__)


def _extensions():
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError as exc:  # pragma: no cover - build environment detail
        log.warning("compiled kernels skipped (%s); numpy fallback will be used", exc)
        return []
    ext = Extension(
        "contiq._kernels._native",
        ["src/contiq/_kernels/_native.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        # -ffp-contract=off: keep elementwise arithmetic bit-compatible with
        # the numpy backend (no FMA contraction surprises).
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions())
