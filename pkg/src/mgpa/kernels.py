"""Backend selection for the hot kernels.

``kl_codes_grad`` and ``residual_moments`` come from the compiled extension
``mgpa._ckernels`` when it imports, otherwise from the numpy implementations in
``mgpa._kernels_py``. ``separable_conv3d`` always uses the numpy version: its
three mode products are BLAS calls, which beat the compiled banded loops at every
grid size we benchmarked (see benchmarks/bench_kernels.py). Setting the
environment variable ``MGPA_KERNELS=python`` forces the fallback for everything.
"""
import os

from . import _kernels_py

BACKEND = "python"
separable_conv3d = _kernels_py.separable_conv3d
kl_codes_grad = _kernels_py.kl_codes_grad
residual_moments = _kernels_py.residual_moments

if os.environ.get("MGPA_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels
    except ImportError:
        pass
    else:
        BACKEND = "cython"
        kl_codes_grad = _ckernels.kl_codes_grad
        residual_moments = _ckernels.residual_moments

__all__ = ["BACKEND", "separable_conv3d", "kl_codes_grad", "residual_moments"]
