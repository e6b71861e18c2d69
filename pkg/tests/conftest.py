import math

import numpy as np

import pytest

from trajbench.geo import GeoPoint, HexConfig, cell_center, project, unproject
from trajbench.harness import synth_city
from trajbench.roadnet import RoadGraph, RoadSegment

ORIGIN = GeoPoint(41.15, -8.61)


@pytest.fixture(scope="session")
def city():
    return synth_city(5, 100, seed=0)


@pytest.fixture(scope="session")
def tiny_city():
    return synth_city(3, 5, seed=1)


def grid_graph(n=5, lengths=None, spacing=200.0, two_way=True):
    """Segments laid out as an n x n lattice of nodes; rid = i * n + j.

    Each segment is a short east-pointing stub at its lattice position;
    adjacency links lattice neighbours.
    """
    cfg = HexConfig(ORIGIN)
    segs = []
    for i in range(n):
        for j in range(n):
            rid = i * n + j
            a = unproject(j * spacing, -i * spacing, cfg)
            b = unproject(j * spacing + spacing / 2, -i * spacing, cfg)
            length = None if lengths is None else float(lengths[rid])
            segs.append(RoadSegment(rid, a, b, f"Road {i}", length_m=length))
    adj = {}
    for i in range(n):
        for j in range(n):
            out = []
            for di, dj in ((0, 1), (1, 0), (0, -1), (-1, 0)):
                ii, jj = i + di, j + dj
                if 0 <= ii < n and 0 <= jj < n:
                    if two_way or (di, dj) in ((0, 1), (1, 0)):
                        out.append(ii * n + jj)
            adj[i * n + j] = out
    return RoadGraph(segs, adj)


def approx(a, b, tol=1e-9):
    return math.isclose(a, b, rel_tol=0, abs_tol=tol)


def random_walks(g, n, rng, min_len=2, max_len=40):
    """Random directed walks on ``g`` with strictly increasing timestamps."""
    from trajbench.traj import Trajectory

    rids = sorted(g.segments)
    out = []
    for i in range(n):
        walk = [int(rng.choice(rids))]
        for _ in range(int(rng.integers(min_len, max_len + 1)) - 1):
            succ = g.adjacency[walk[-1]]
            if not succ:
                break
            walk.append(int(rng.choice(succ)))
        times = 1402704000 + np.cumsum(rng.integers(0, 60, len(walk)))
        out.append(Trajectory(i, tuple(walk), tuple(float(t) for t in times)))
    return out


def cell_graph(cells, names=None):
    """A chain of short east-pointing segments, entry i placed inside ``cells[i]``."""
    cfg = HexConfig(ORIGIN)
    segs = []
    for i, c in enumerate(cells):
        x, y = project(cell_center(c, cfg), cfg)
        x += (i % 3 - 1) * 15.0
        a, b = unproject(x - 20, y, cfg), unproject(x + 20, y, cfg)
        segs.append(RoadSegment(i, a, b, (names or {}).get(i, f"Road {i}")))
    return RoadGraph(segs, {i: [i + 1] for i in range(len(cells) - 1)})
