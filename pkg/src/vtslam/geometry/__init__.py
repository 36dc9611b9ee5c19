from .mesh import EmptyMesh, NonWatertightMesh, TriangleMesh, load_mesh, save_ply
from .se3 import AngleNearPi, Pose, look_at, se3_exp, se3_log, transform_points
from .shapes import (Box, Capsule, GroundTruthShape, MeshShape, RoundedBox, Sphere, UnionShape,
                     gt_sdf, raycast, shape_from_dict, sphere_trace)
