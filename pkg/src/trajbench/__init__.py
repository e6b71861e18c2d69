"""Benchmark toolkit linking road-network trajectories and natural language.

Covers trajectory compression into semantic phases, intent-conditioned
annotation with quality control, and three evaluation tasks: route
generation from instructions, query-to-trajectory retrieval and
trajectory captioning.
"""

from .errors import *  # noqa: F401,F403
from .geo import CellId, CellIndex, CellMeta, GeoPoint, Gazetteer, HexConfig
from .roadnet import RoadGraph, RoadSegment, SoftWeights, chain_dijkstra, dijkstra
from .traj import PhaseCompressor, PhaseSeq, Trajectory, compress

__version__ = "0.1.0"
