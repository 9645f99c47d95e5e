"""Backend selection for the clustering kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy fallback in ``_pykernels`` is used. Set ``DSBF_KERNELS=python`` to force
the fallback.
"""
import os

from . import _pykernels

python_backend = _pykernels
compiled_backend = None

if os.environ.get("DSBF_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if active is compiled_backend else "python"

cosine_assign = active.cosine_assign
hard_centroids = active.hard_centroids
soft_centroids = active.soft_centroids
