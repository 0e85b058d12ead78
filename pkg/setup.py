"""Build the optional Cython kernel extension.

The extension is a pure accelerator: qlower falls back to the numpy
reference kernels when the compiled module is absent, so failure to
build it must never fail the install.

-ffp-contract=off matters: the compiled loops must round every FP32
multiply and add separately, exactly like the numpy fallback, or the
two backends stop being bit-identical.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [
            Extension(
                "qlower._kernels._convk",
                ["src/qlower/_kernels/_convk.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3", "-ffp-contract=off"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    import sys

    print(f"qlower: skipping Cython extension ({exc}); "
          "the pure-numpy kernels will be used", file=sys.stderr)

setup(ext_modules=ext_modules)
