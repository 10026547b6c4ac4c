"""Linear PCA face model with a 13-dimensional mouth parameterization.

A face mesh with N vertices is a length-3N vector assembled as
``mean + basis_id @ alpha + basis_exp @ beta``.  Of the 64 expression
dimensions, 13 drive mouth motion; their basis columns are constructed so
nearly all of their squared mass lands on the lip vertices, while the
remaining 51 columns leave the lips untouched.  Rotation is handled by the
renderer, never by mesh assembly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GenerationError
from . import rng as rngmod

IDENTITY_DIMS = 80
EXPRESSION_DIMS = 64
MOUTH_DIMS = 13
ROTATION_DIMS = 3


@dataclass
class FaceBasis:
    """Frozen synthetic PCA basis; safe for shared concurrent reads."""

    mean_shape: np.ndarray          # (3N,)
    basis_id: np.ndarray            # (3N, 80), orthonormal columns
    basis_exp: np.ndarray           # (3N, 64), orthonormal columns
    lip_vertex_idx: np.ndarray      # ordered ring of lip vertex indices
    mouth_dim_idx: np.ndarray       # 13 expression dims driving the mouth
    num_vertices: int
    seed: int = 0

    def __post_init__(self):
        for arr in ("mean_shape", "basis_id", "basis_exp"):
            getattr(self, arr).setflags(write=False)
        self.lip_vertex_idx.setflags(write=False)
        self.mouth_dim_idx.setflags(write=False)

    @property
    def lip_coord_idx(self) -> np.ndarray:
        """Flat mesh-coordinate indices of the lip vertices (x,y,z each)."""
        base = self.lip_vertex_idx[:, None] * 3
        return (base + np.arange(3)[None, :]).reshape(-1)

    @property
    def rest_dim_idx(self) -> np.ndarray:
        mask = np.ones(EXPRESSION_DIMS, dtype=bool)
        mask[self.mouth_dim_idx] = False
        return np.nonzero(mask)[0]

    @property
    def mouth_lip_basis(self) -> np.ndarray:
        """(3L, 13) map from mouth params to lip coordinate displacement."""
        return self.basis_exp[np.ix_(self.lip_coord_idx, self.mouth_dim_idx)]


@dataclass
class FaceParams:
    """Identity, expression, and rotation coefficients for one face."""

    alpha: np.ndarray = field(default_factory=lambda: np.zeros(IDENTITY_DIMS))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(EXPRESSION_DIMS))
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(ROTATION_DIMS))

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.gamma = np.asarray(self.gamma, dtype=np.float64)
        if self.alpha.shape != (IDENTITY_DIMS,):
            raise DimensionError(f"alpha must have length {IDENTITY_DIMS}, got {self.alpha.shape}")
        if self.beta.shape != (EXPRESSION_DIMS,):
            raise DimensionError(f"beta must have length {EXPRESSION_DIMS}, got {self.beta.shape}")
        if self.gamma.shape != (ROTATION_DIMS,):
            raise DimensionError(f"gamma must have length {ROTATION_DIMS}, got {self.gamma.shape}")


def assemble_mesh(basis: FaceBasis, params: FaceParams) -> np.ndarray:
    """Mesh vector mean + B_id@alpha + B_exp@beta (rotation excluded)."""
    return basis.mean_shape + basis.basis_id @ params.alpha + basis.basis_exp @ params.beta


def assemble_meshes(basis: FaceBasis, alphas: np.ndarray, betas: np.ndarray) -> np.ndarray:
    """Vectorized assembly for frame sequences: (F,80),(F,64) -> (F,3N)."""
    alphas = np.atleast_2d(alphas)
    betas = np.atleast_2d(betas)
    if alphas.shape[1] != IDENTITY_DIMS or betas.shape[1] != EXPRESSION_DIMS:
        raise DimensionError(
            f"expected (F,{IDENTITY_DIMS}) and (F,{EXPRESSION_DIMS}), got {alphas.shape}, {betas.shape}"
        )
    return basis.mean_shape[None, :] + alphas @ basis.basis_id.T + betas @ basis.basis_exp.T


def embed_mouth_params(m: np.ndarray, beta_rest: np.ndarray, basis: FaceBasis) -> np.ndarray:
    """Scatter 13 mouth values and 51 remaining values into a 64-vector."""
    m = np.asarray(m, dtype=np.float64)
    beta_rest = np.asarray(beta_rest, dtype=np.float64)
    if m.shape[-1] != MOUTH_DIMS:
        raise DimensionError(f"mouth params must have length {MOUTH_DIMS}, got {m.shape}")
    rest_idx = basis.rest_dim_idx
    if beta_rest.shape[-1] != rest_idx.size:
        raise DimensionError(
            f"beta_rest must have length {rest_idx.size}, got {beta_rest.shape}"
        )
    beta = np.zeros(m.shape[:-1] + (EXPRESSION_DIMS,))
    beta[..., basis.mouth_dim_idx] = m
    beta[..., rest_idx] = beta_rest
    return beta


def extract_mouth_params(beta: np.ndarray, basis: FaceBasis) -> np.ndarray:
    """Gather the 13 mouth-related coordinates from a 64-vector."""
    beta = np.asarray(beta, dtype=np.float64)
    return beta[..., basis.mouth_dim_idx]


def lip_vertices(mesh: np.ndarray, basis: FaceBasis) -> np.ndarray:
    """Lip vertices of a mesh vector, in ring order, as (L, 3)."""
    pts = np.asarray(mesh).reshape(-1, 3)
    return pts[basis.lip_vertex_idx]


def _face_layout(n: int, lip_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Desk-scale 2D landmark-like layout (z=0): oval, eyes, nose, lip ring.

    Returns (points (N,3), lip indices in ring order).  Lip vertices occupy
    the final ``lip_count`` slots.
    """
    rest = n - lip_count
    pts = []
    n_oval = max(8, int(round(rest * 0.5)))
    n_eyes = max(4, int(round(rest * 0.3)))
    n_nose = rest - n_oval - n_eyes
    t = np.linspace(0.0, 2 * np.pi, n_oval, endpoint=False)
    pts.append(np.stack([0.95 * np.cos(t), 1.15 * np.sin(t)], axis=1))
    half = n_eyes // 2
    for cx, count in ((-0.4, half), (0.4, n_eyes - half)):
        t = np.linspace(0.0, 2 * np.pi, count, endpoint=False)
        pts.append(np.stack([cx + 0.16 * np.cos(t), 0.35 + 0.10 * np.sin(t)], axis=1))
    y = np.linspace(0.3, -0.15, max(n_nose, 1))
    pts.append(np.stack([np.zeros_like(y), y], axis=1)[:n_nose])
    t = np.linspace(0.0, 2 * np.pi, lip_count, endpoint=False)
    lips = np.stack([0.45 * np.cos(t), -0.55 + 0.20 * np.sin(t)], axis=1)
    pts.append(lips)
    xy = np.concatenate(pts, axis=0)
    points = np.concatenate([xy, np.zeros((n, 1))], axis=1)
    lip_idx = np.arange(rest, n)
    return points, lip_idx


def _gram_schmidt_nested(vectors: np.ndarray) -> np.ndarray:
    """Orthonormalize columns in order, preserving nested sparsity."""
    q = vectors.astype(np.float64).copy()
    for j in range(q.shape[1]):
        for i in range(j):
            q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
        norm = np.linalg.norm(q[:, j])
        if norm < 1e-12:
            raise GenerationError("degenerate column during orthonormalization")
        q[:, j] /= norm
    return q


def make_synthetic_basis(seed: int, num_vertices: int = 68, lip_fraction: float = 0.3) -> FaceBasis:
    """Deterministic synthetic basis with mouth motion pinned to the lips.

    The 13 mouth expression columns put at least 90% of their squared mass
    on lip-vertex coordinates, with deliberately uneven concentration across
    the lip ring (narrow to broad support) so different mouth dimensions
    have different per-unit lip displacement.  The other 51 expression
    columns have zero lip mass.
    """
    if num_vertices < 32:
        raise GenerationError(f"need at least 32 vertices, got {num_vertices}")
    if not 0.0 < lip_fraction < 0.5:
        raise GenerationError(f"lip_fraction must be in (0, 0.5), got {lip_fraction}")
    lip_count = max(4, int(round(num_vertices * lip_fraction)))
    rest_coords = 3 * (num_vertices - lip_count)
    lip_coords = 3 * lip_count
    if lip_coords < MOUTH_DIMS or rest_coords < EXPRESSION_DIMS:
        raise GenerationError(
            f"mass constraint infeasible: {lip_count} lip vertices leave "
            f"{rest_coords} off-lip coordinates, need >= {EXPRESSION_DIMS}"
        )

    points, lip_idx = _face_layout(num_vertices, lip_count)
    mean_shape = points.reshape(-1)
    dim = 3 * num_vertices
    lip_mask = np.zeros(dim, dtype=bool)
    lip_flat = (lip_idx[:, None] * 3 + np.arange(3)[None, :]).reshape(-1)
    lip_mask[lip_flat] = True

    gen = rngmod.stream(seed, "face-basis")

    # Identity basis: dense orthonormal columns.
    basis_id = np.linalg.qr(gen.normal(size=(dim, IDENTITY_DIMS)))[0]

    # Mouth columns in lip space with nested ring supports (2 .. lip_count
    # vertices), so per-unit displacement concentration varies by dimension.
    supports = np.linspace(2, lip_count, MOUTH_DIMS).round().astype(int)
    raw = np.zeros((lip_coords, MOUTH_DIMS))
    for j, s in enumerate(supports):
        coords = (np.arange(s)[:, None] * 3 + np.arange(3)[None, :]).reshape(-1)
        raw[coords, j] = gen.normal(size=coords.size)
    lip_dirs = _gram_schmidt_nested(raw)                      # (3L, 13)

    rest_all = np.linalg.qr(gen.normal(size=(rest_coords, EXPRESSION_DIMS)))[0]
    spill_dirs = rest_all[:, :MOUTH_DIMS]                     # off-lip residue of mouth cols
    rest_dirs = rest_all[:, MOUTH_DIMS:]                      # (rest, 51)

    lip_mass = gen.uniform(0.92, 0.98, size=MOUTH_DIMS)
    basis_exp = np.zeros((dim, EXPRESSION_DIMS))
    mouth_dim_idx = np.arange(MOUTH_DIMS)
    basis_exp[np.ix_(lip_mask.nonzero()[0], mouth_dim_idx)] = lip_dirs * np.sqrt(lip_mass)
    basis_exp[np.ix_((~lip_mask).nonzero()[0], mouth_dim_idx)] = spill_dirs * np.sqrt(1.0 - lip_mass)
    basis_exp[np.ix_((~lip_mask).nonzero()[0], np.arange(MOUTH_DIMS, EXPRESSION_DIMS))] = rest_dirs

    basis = FaceBasis(
        mean_shape=mean_shape,
        basis_id=basis_id,
        basis_exp=basis_exp,
        lip_vertex_idx=lip_idx,
        mouth_dim_idx=mouth_dim_idx,
        num_vertices=num_vertices,
        seed=seed,
    )
    mass = mouth_column_lip_mass(basis)
    if np.any(mass < 0.9):
        raise GenerationError(f"mouth-column lip mass below 0.9: {mass.min():.4f}")
    return basis


def mouth_column_lip_mass(basis: FaceBasis) -> np.ndarray:
    """Fraction of squared mass each mouth column puts on lip coordinates."""
    cols = basis.basis_exp[:, basis.mouth_dim_idx]
    total = (cols ** 2).sum(axis=0)
    on_lips = (cols[basis.lip_coord_idx] ** 2).sum(axis=0)
    return on_lips / total
