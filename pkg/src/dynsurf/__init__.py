"""Compositional dynamic surface reconstruction from rolling-shutter LiDAR."""

from .se3 import (
    RigidTransform,
    Twist,
    compose,
    continuous_ego_pose,
    continuous_object_pose,
    exp_rotation,
    interp_relative,
    invert,
    log_rotation,
)
from .trajectory import BodyTrajectory
from .mesh import MeshProximityIndex, TriangleMesh, nn_distance, ray_mesh_intersect
from .tsdf import ReconParams, SdfGrid, extract_mesh, fuse_tsdf, reconstruct_surface
from .sweeps import BoundingBoxTrack, Sweep, assign_points, deskew_ego
from .scene import SceneModel, SceneObject
from .icp import IcpParams, RegistrationResult, icp_point_to_plane

__version__ = "0.1.0"
