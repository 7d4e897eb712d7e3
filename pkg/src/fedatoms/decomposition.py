"""Filter atoms and atom coefficients.

A conv filter bank ``F`` of shape [c', c, k, k] is written as
``F[i, j] = sum_q alpha[i, j, q] * atoms[q]`` with ``atoms`` [m_a, k, k]
and ``alpha`` [c', c, m_a]. The forward pass runs this as two stacked
convolutions: every input channel against every atom, then a 1x1
convolution that mixes the ``c * m_a`` atom responses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .tensor_nn import LayerCache, conv2d_backward, conv2d_forward

DEFAULT_NUM_ATOMS = 9


@dataclass(frozen=True, eq=False)
class DecomposedConv:
    alpha: np.ndarray  # [c', c, m_a]
    atoms: np.ndarray  # [m_a, k, k]
    pad: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.atoms.ndim != 3 or self.atoms.shape[1] != self.atoms.shape[2]:
            raise DimensionError(f"atoms must be [m_a, k, k], got {self.atoms.shape}")
        if self.atoms.shape[0] < 1 or self.atoms.shape[1] < 1:
            raise DimensionError("need at least one atom of size >= 1")
        if self.alpha.ndim != 3 or self.alpha.shape[2] != self.atoms.shape[0]:
            raise DimensionError(
                f"coefficients {self.alpha.shape} do not pair with {self.atoms.shape[0]} atoms"
            )

    @property
    def num_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def kernel_size(self) -> int:
        return self.atoms.shape[1]

    @property
    def filter_shape(self) -> tuple:
        c_out, c_in, _ = self.alpha.shape
        return (c_out, c_in, self.kernel_size, self.kernel_size)


def compose(alpha: np.ndarray, atoms: np.ndarray) -> np.ndarray:
    """``alpha`` [c', c, m] times ``atoms`` [m, k, k] -> filters [c', c, k, k]."""
    if alpha.shape[-1] != atoms.shape[0]:
        raise DimensionError(f"cannot combine coefficients {alpha.shape} with atoms {atoms.shape}")
    c_out, c_in, m = alpha.shape
    k = atoms.shape[1]
    flat = alpha.reshape(c_out * c_in, m) @ atoms.reshape(m, k * k)
    return flat.reshape(c_out, c_in, k, k)


def reconstruct_filter(dc: DecomposedConv) -> np.ndarray:
    return compose(dc.alpha, dc.atoms)


def _canonical_atoms(m: int, k: int) -> np.ndarray:
    eye = np.eye(k * k)
    return np.stack([eye[q % (k * k)] for q in range(m)]).reshape(m, k, k)


def _fix_sign(vec: np.ndarray) -> float:
    nz = np.flatnonzero(np.abs(vec) > 1e-12)
    return -1.0 if nz.size and vec[nz[0]] < 0 else 1.0


def decompose_filter(filters: np.ndarray, num_atoms: int = DEFAULT_NUM_ATOMS,
                     pad: int = 0, stride: int = 1) -> DecomposedConv:
    """Best Frobenius-norm factorization of ``filters`` onto ``num_atoms`` atoms.

    Uses a truncated SVD of the [c'*c, k*k] reshape. Atoms come out with
    unit norm and a positive first nonzero entry. Asking for more atoms
    than ``k*k`` pads with canonical atoms carrying zero coefficients.
    """
    if filters.ndim != 4 or filters.shape[2] != filters.shape[3]:
        raise DimensionError(f"filters must be [c', c, k, k], got {filters.shape}")
    if num_atoms < 1:
        raise ContractError("num_atoms must be >= 1")
    c_out, c_in, k, _ = filters.shape
    flat = filters.reshape(c_out * c_in, k * k)
    if not np.any(flat):
        atoms = _canonical_atoms(num_atoms, k)
        return DecomposedConv(np.zeros((c_out, c_in, num_atoms)), atoms, pad, stride)

    _, _, vt = np.linalg.svd(flat, full_matrices=True)
    rank = min(num_atoms, k * k)
    basis = vt[:rank] * np.array([_fix_sign(v) for v in vt[:rank]])[:, None]
    coeffs = flat @ basis.T
    if num_atoms > rank:
        extra = _canonical_atoms(num_atoms - rank, k).reshape(-1, k * k)
        basis = np.vstack([basis, extra])
        coeffs = np.hstack([coeffs, np.zeros((coeffs.shape[0], num_atoms - rank))])
    return DecomposedConv(coeffs.reshape(c_out, c_in, num_atoms),
                          basis.reshape(num_atoms, k, k), pad, stride)


def init_decomposed(c_out: int, c_in: int, kernel_size: int, num_atoms: int,
                    rng: np.random.Generator, pad: int = 0, stride: int = 1) -> DecomposedConv:
    # variance of the composed filter works out to 2 / (c_in * k^2), i.e. He fan-in init
    atoms = rng.normal(0.0, 1.0 / kernel_size, size=(num_atoms, kernel_size, kernel_size))
    alpha = rng.normal(0.0, np.sqrt(2.0 / (c_in * num_atoms)), size=(c_out, c_in, num_atoms))
    return DecomposedConv(alpha, atoms, pad, stride)


def forward_decomposed(dc: DecomposedConv, x: np.ndarray):
    """Run the atom layer then the 1x1 coefficient layer; returns ``(out, cache)``."""
    if x.ndim != 4:
        raise DimensionError(f"expected [n, c, h, w] input, got {x.shape}")
    n, c, h, w = x.shape
    c_out, c_in, m = dc.alpha.shape
    if c != c_in:
        raise DimensionError(f"input has {c} channels, coefficients expect {c_in}")
    k = dc.kernel_size
    # every input channel against every atom: c*m intermediate maps, channel-major
    responses, atom_cache = conv2d_forward(
        x.reshape(n * c, 1, h, w), dc.atoms[:, None], dc.pad, dc.stride)
    _, _, ho, wo = responses.shape
    responses = responses.reshape(n, c * m, ho, wo)
    out, coef_cache = conv2d_forward(responses, dc.alpha.reshape(c_out, c * m, 1, 1))
    cache = LayerCache("decomposed_conv", tuple(x.shape), tuple(out.shape), {
        "atom": atom_cache, "coef": coef_cache, "responses": responses,
        "alpha_shape": dc.alpha.shape, "k": k,
    })
    return out, cache


def backward_decomposed(cache: LayerCache, grad_out: np.ndarray):
    """Return ``(grad_input, grad_alpha, grad_atoms)``."""
    cache.check("decomposed_conv", grad_out)
    n, c, h, w = cache.in_shape
    alpha_shape = cache.saved["alpha_shape"]
    m, k = alpha_shape[2], cache.saved["k"]
    grad_resp, grad_alpha = conv2d_backward(cache.saved["coef"], grad_out)
    _, _, ho, wo = grad_resp.shape
    grad_x, grad_atoms = conv2d_backward(cache.saved["atom"], grad_resp.reshape(n * c, m, ho, wo))
    return grad_x.reshape(n, c, h, w), grad_alpha.reshape(alpha_shape), grad_atoms.reshape(m, k, k)


@dataclass(frozen=True, eq=False)
class LatentClient:
    coeff_client: int
    atom_client: int
    weight: float
    filters: np.ndarray


def expand_aggregation(clients, tol: float = 1e-12):
    """Expand the product of averaged coefficients and averaged atoms.

    ``clients`` is a sequence of ``(weight, alpha, atoms)``. Returns
    ``(product_form, sum_form, latent)`` where ``product_form`` is
    ``(sum p alpha) x (sum p atoms)``, ``sum_form`` is the weighted sum of
    every client's own filters (weights p^2) plus all cross reconstructions
    ``alpha_i x atoms_j`` for i != j (weights p_i p_j), and ``latent`` lists
    those m^2 - m cross terms.
    """
    clients = list(clients)
    if not clients:
        raise ContractError("expand_aggregation needs at least one client")
    weights = np.array([float(p) for p, _, _ in clients])
    if abs(weights.sum() - 1.0) > tol:
        raise ContractError(f"aggregation weights sum to {weights.sum()!r}, not 1")
    alphas = [np.asarray(a, dtype=np.float64) for _, a, _ in clients]
    atoms = [np.asarray(d, dtype=np.float64) for _, _, d in clients]
    if any(a.shape != alphas[0].shape for a in alphas) or any(d.shape != atoms[0].shape for d in atoms):
        raise DimensionError("all clients must share coefficient and atom shapes")

    mean_alpha = sum(p * a for p, a in zip(weights, alphas))
    mean_atoms = sum(p * d for p, d in zip(weights, atoms))
    product_form = compose(mean_alpha, mean_atoms)

    sum_form = np.zeros_like(product_form)
    for p, a, d in zip(weights, alphas, atoms):
        sum_form += p * p * compose(a, d)
    latent = []
    for i, a in enumerate(alphas):
        for j, d in enumerate(atoms):
            if i == j:
                continue
            term = LatentClient(i, j, weights[i] * weights[j], compose(a, d))
            sum_form += term.weight * term.filters
            latent.append(term)
    return product_form, sum_form, latent
