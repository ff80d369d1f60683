"""Image-based inference of elastic log-modulus fields (integrated DIC in function space)."""

import os as _os

# cap BLAS/OpenMP worker threads before numpy loads
_threads = _os.environ.get("IDIC_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

from .mesh import Mesh, ScalarField, VectorField, CellVectorField, build_unit_square_mesh  # noqa: E402
from .materials import TractionSpec, ResidualForm  # noqa: E402

__version__ = "0.1.0"

__all__ = ["Mesh", "ScalarField", "VectorField", "CellVectorField", "build_unit_square_mesh",
           "TractionSpec", "ResidualForm", "__version__"]
