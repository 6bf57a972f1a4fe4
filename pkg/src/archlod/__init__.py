"""archlod: consistent level-of-detail generation for collections of
architectural point clouds.

Pipeline: primary plane detection (region growing + alpha-shape
footprints), voxel visibility analysis, structural segment aggregation,
joint coarse-layer selection and spectral layering across the collection,
and watertight polygonal mesh extraction per layer.
"""

from .config import Config
from .coanalysis import CoParams
from .geometry import AABB, Plane, PlaneRegion, PointCloud, Ray
from .meshing import PolyMesh
from .planes import DetectParams
from .pipeline import RunResult, run, run_buildings
from .segments import AggParams, Segment
from .visibility import VisParams, VoxelField

__version__ = "0.1.0"

__all__ = [
    "AABB",
    "AggParams",
    "CoParams",
    "Config",
    "DetectParams",
    "Plane",
    "PlaneRegion",
    "PointCloud",
    "PolyMesh",
    "Ray",
    "RunResult",
    "Segment",
    "VisParams",
    "VoxelField",
    "run",
    "run_buildings",
    "__version__",
]
