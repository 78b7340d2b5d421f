"""Differentiable Gaussian splatting for imaging sonar range/azimuth images."""
import os as _os

# Thread cap for BLAS/OpenMP; only effective if numpy is not imported yet.
if _os.environ.get("POLARSPLAT_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["POLARSPLAT_THREADS"])

__version__ = "0.1.0"
