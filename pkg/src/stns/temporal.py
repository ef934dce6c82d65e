"""Temporal DG(k) slab matrices and Kronecker-structured applications.

For the Lagrange basis at the right Gauss-Radau nodes the slab-local
matrices are

    K[a,b] = int_I phi_b' phi_a dt + phi_b(t+) phi_a(t+)   (t+ = left end)
    M[a,b] = int_I phi_b phi_a dt = diag(w_mu),  w_mu = tau/2 * omega_mu
    C[a,b] = phi_a(t+) delta_{b,k+1}   (jump coupling to the last node of
                                        the previous slab)

K and C are tau-independent; only M scales with the slab length.
"""

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss

from .elements import temporal_basis


@dataclass(frozen=True)
class TemporalMatrices:
    """Slab-local temporal matrices for one (k, tau) combination."""

    k: int
    tau: float
    K: np.ndarray
    M_diag: np.ndarray  # the diagonal of M
    C: np.ndarray
    nodes: np.ndarray  # Gauss-Radau nodes on [-1, 1]

    @property
    def n_nodes(self):
        return self.k + 1

    def node_times(self, t_start, t_end):
        """Physical times of the Gauss-Radau nodes within (t_start, t_end]."""
        mid = 0.5 * (t_start + t_end)
        return mid + 0.5 * (t_end - t_start) * self.nodes

    def basis_at(self, t_start, t_end, t):
        """Temporal basis values at physical times t inside the slab."""
        ref = (2.0 * np.atleast_1d(t) - (t_start + t_end)) / (t_end - t_start)
        return temporal_basis(self.k).values(ref)


_cache = {}


def assemble_temporal(k, tau):
    """Assemble (K, M, C) for temporal degree k and slab length tau."""
    if tau <= 0:
        raise ValueError(f"slab length tau={tau} must be positive")
    key = (k, float(tau))
    if key in _cache:
        return _cache[key]
    basis = temporal_basis(k)
    # K: integrate phi_b' phi_a (degree <= 2k-1) with a (k+1)-point Gauss
    # rule, then add the left-end upwind product
    gx, gw = leggauss(k + 1)
    vals = basis.values(gx)
    ders = basis.derivatives(gx)
    K = np.einsum("q,qa,qb->ab", gw, vals, ders)
    left = basis.values(-1.0)[0]
    K += np.outer(left, left)
    M_diag = 0.5 * tau * basis.weights
    C = np.zeros((k + 1, k + 1))
    C[:, k] = left
    tm = TemporalMatrices(k, float(tau), K, M_diag, C, basis.nodes)
    _cache[key] = tm
    return tm


def kron_apply(A, spatial_action, blocks):
    """Apply (A kron Op) to a block vector: out[i] = sum_a A[i,a] Op(x[a]).

    ``blocks`` is (k+1, n) with one row per temporal block; the spatial
    action is invoked exactly once per block.
    """
    A = np.asarray(A)
    blocks = np.asarray(blocks)
    if blocks.ndim != 2 or A.shape != (blocks.shape[0], blocks.shape[0]):
        raise ValueError(
            f"temporal matrix {A.shape} does not match {blocks.shape[0]} blocks"
        )
    applied = np.stack([spatial_action(blocks[a]) for a in range(len(blocks))])
    return np.einsum("ia,an->in", A, applied)


def jump_apply(tm, mass_action, v_prev_packed):
    """Apply the upwind jump term (C kron M_h) to the packed previous-slab
    vector (zeros except the end-time trace in the last block); a single
    mass application suffices because C has one nonzero column."""
    v_prev_packed = np.asarray(v_prev_packed)
    if v_prev_packed.ndim != 2 or v_prev_packed.shape[0] != tm.n_nodes:
        raise ValueError(
            f"previous-slab pack must have {tm.n_nodes} blocks, "
            f"got shape {v_prev_packed.shape}"
        )
    mv = mass_action(v_prev_packed[-1])
    return tm.C[:, -1][:, None] * mv[None, :]


def pack_previous_trace(tm, trace):
    """Pack an end-time trace into the (k+1)-block layout expected by
    ``jump_apply``: zeros everywhere except the last block."""
    out = np.zeros((tm.n_nodes, len(trace)))
    out[-1] = trace
    return out
