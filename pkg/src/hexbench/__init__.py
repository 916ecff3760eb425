"""hexbench: an interactive all-hex meshing workbench.

Pipeline: deform an input tet mesh toward a near-PolyCube, decompose it into
a union of axis-aligned cuboids, voxelize onto an integer lattice, then pull
the voxel hex mesh back onto the input domain inversion-free and optimize
its quality under user-steerable trade-offs.
"""

from .meshes import (  # noqa: F401
    CornerTetSet,
    HexMesh,
    JacobianField,
    MeshError,
    NonManifoldError,
    SurfaceMesh,
    TetMesh,
    corner_tets,
    extract_boundary,
    jacobians,
    measures,
)
from .geometry import (  # noqa: F401
    ProjectionResult,
    SignedDistanceSample,
    point_in_mesh,
    project_to_tet_mesh,
    project_to_triangle_mesh,
    projection_gradients,
    sample_surface,
    signed_distance_tet_mesh,
)
from .polycube import Cuboid, PolyCube, cuboid_sdf, polycube_min_sdf  # noqa: F401
from .config import PipelineConfig, parse_config_file  # noqa: F401
from .session import Session, load_session, save_session  # noqa: F401

__version__ = "0.1.0"
