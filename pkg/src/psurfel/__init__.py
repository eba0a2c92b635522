"""Point cloud geometry codec built on an octree of probabilistic surfels.

Octree nodes either terminate as a fitted bounded generalized-Gaussian
occupancy primitive or split into octants whose occupancy is context coded;
the choice is made by Lagrangian rate–distortion optimisation.
"""
from .codec import CodecConfig, decode, decode_tree, encode
from .errors import (CoordinateRangeError, CorruptStreamError, DegenerateError, EmptyInputError,
                     EmptySelectionError, NonOverlapError, PlyParseError, PsurfelError,
                     TruncatedStreamError)
from .geometry import PointCloud, build_octree, morton_decode, morton_encode, node_voxels
from .metrics import bd_rate, d1_psnr, d2_psnr, estimate_normals
from .plyio import load_ply, save_ply
from .surfel import FitConfig, SurfelParams, fit_surfel

__version__ = "0.1.0"

__all__ = [
    "CodecConfig", "decode", "decode_tree", "encode",
    "CoordinateRangeError", "CorruptStreamError", "DegenerateError", "EmptyInputError",
    "EmptySelectionError", "NonOverlapError", "PlyParseError", "PsurfelError", "TruncatedStreamError",
    "PointCloud", "build_octree", "morton_decode", "morton_encode", "node_voxels",
    "bd_rate", "d1_psnr", "d2_psnr", "estimate_normals",
    "load_ply", "save_ply",
    "FitConfig", "SurfelParams", "fit_surfel",
]
