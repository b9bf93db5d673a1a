"""Gridded solar-irradiance nowcasting with convolutional recurrent networks.

Set ``NOWCAST_THREADS`` before the first import to cap BLAS worker threads.
"""
import os as _os

_threads = _os.environ.get("NOWCAST_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
