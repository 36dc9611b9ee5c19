"""Marching-cubes mesh extraction from the neural field."""
from __future__ import annotations

import numpy as np
from skimage.measure import marching_cubes

from ..field.model import NeuralField
from ..geometry.mesh import TriangleMesh


class EmptySurface(ValueError):
    pass


def field_grid(field: NeuralField, resolution: int, coarse: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Field values on a resolution^3 grid spanning the bound.

    A grid every ``coarse`` nodes is evaluated first; fine nodes are only
    evaluated in cells whose coarse corners come within two coarse cell
    diagonals of the surface, elsewhere the coarse value is carried over (it
    has the right sign, which is all marching cubes needs there).
    """
    cfg = field.cfg
    lo = np.asarray(cfg.bound_center) - cfg.bound_side / 2
    xs = np.linspace(0.0, cfg.bound_side, resolution)
    h = xs[1] - xs[0]

    def eval_idx(ii, jj, kk):
        p = lo + np.stack([xs[ii], xs[jj], xs[kk]], axis=-1).reshape(-1, 3)
        return field.eval_object(p)[0]

    if coarse <= 1 or resolution <= 2 * coarse:
        ii, jj, kk = np.meshgrid(*(np.arange(resolution),) * 3, indexing="ij")
        return eval_idx(ii, jj, kk).reshape((resolution,) * 3), xs + lo[0]

    cidx = np.arange(0, resolution + coarse - 1, coarse)
    cidx = np.minimum(cidx, resolution - 1)
    cidx = np.unique(cidx)
    ci, cj, ck = np.meshgrid(cidx, cidx, cidx, indexing="ij")
    cv = eval_idx(ci, cj, ck).reshape((len(cidx),) * 3)

    # coarse cell of every fine index, and the min |F| over each coarse cell's corners
    cell = np.clip(np.searchsorted(cidx, np.arange(resolution), side="right") - 1, 0, len(cidx) - 2)
    a = np.abs(cv)
    near_c = np.minimum.reduce([a[:-1, :-1, :-1], a[1:, :-1, :-1], a[:-1, 1:, :-1], a[:-1, :-1, 1:],
                                a[1:, 1:, :-1], a[1:, :-1, 1:], a[:-1, 1:, 1:], a[1:, 1:, 1:]])
    thresh = 2.0 * np.sqrt(3) * coarse * h
    near = near_c[np.ix_(cell, cell, cell)] < thresh
    vol = cv[np.ix_(cell, cell, cell)].copy()
    ii, jj, kk = np.nonzero(near)
    if len(ii):
        vol[ii, jj, kk] = eval_idx(ii, jj, kk)
    # coarse nodes are exact already
    vol[np.ix_(cidx, cidx, cidx)] = cv
    return vol, xs + lo[0]


def extract_mesh(field: NeuralField, resolution: int = 200, level: float = 0.0,
                 coarse: int = 4) -> TriangleMesh:
    """Zero level set of the field in the object frame, largest component only."""
    vol, _ = field_grid(field, resolution, coarse)
    if not np.isfinite(vol).all():
        raise ValueError("field produced non-finite values")
    if vol.min() >= level or vol.max() <= level:
        raise EmptySurface("field has no zero crossing inside the bound")
    cfg = field.cfg
    h = cfg.bound_side / (resolution - 1)
    verts, faces, _, _ = marching_cubes(vol, level, spacing=(h, h, h))
    lo = np.asarray(cfg.bound_center) - cfg.bound_side / 2
    mesh = TriangleMesh(verts + lo, faces).largest_component()
    if len(mesh.faces) == 0:
        raise EmptySurface("marching cubes produced no faces")
    return mesh
