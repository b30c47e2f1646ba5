"""Per-site tensor algebra in dimension four.

Nothing here differentiates; every function is exact linear algebra on
arrays whose leading axis runs over sites.
"""

from __future__ import annotations

import itertools

import numpy as np


def _levi_civita() -> np.ndarray:
    eps = np.zeros((4, 4, 4, 4))
    for perm in itertools.permutations(range(4)):
        inv = sum(1 for i in range(4) for j in range(i + 1, 4) if perm[i] > perm[j])
        eps[perm] = -1.0 if inv % 2 else 1.0
    return eps


LEVI_CIVITA = _levi_civita()

#: flat self-dual basis e1^e2 + e3^e4, e1^e3 + e4^e2, e1^e4 + e2^e3
_SD_FLAT = np.zeros((3, 4, 4))
for _I, (_a, _b, _c, _d) in enumerate([(0, 1, 2, 3), (0, 2, 3, 1), (0, 3, 1, 2)]):
    _SD_FLAT[_I, _a, _b], _SD_FLAT[_I, _b, _a] = 1.0, -1.0
    _SD_FLAT[_I, _c, _d], _SD_FLAT[_I, _d, _c] = 1.0, -1.0
_ASD_FLAT = _SD_FLAT.copy()
for _I, (_c, _d) in enumerate([(2, 3), (3, 1), (1, 2)]):
    _ASD_FLAT[_I, _c, _d], _ASD_FLAT[_I, _d, _c] = -1.0, 1.0


def raise_all(T: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    out = T
    for pos in range(1, T.ndim):
        out = np.moveaxis(np.einsum("pab,p...b->p...a", ginv, np.moveaxis(out, pos, -1)), -1, pos)
    return out


def inner(S: np.ndarray, T: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """Full metric contraction <S, T> per site (all indices lower)."""
    return np.einsum("pi,pi->p", S.reshape(len(S), -1),
                     raise_all(T, ginv).reshape(len(T), -1))


def volume_form(g: np.ndarray) -> np.ndarray:
    """epsilon_abcd = sqrt(det g) [abcd] with the axis order as orientation."""
    vol = np.sqrt(np.linalg.det(g))
    return vol[:, None, None, None, None] * LEVI_CIVITA


def hodge(omega: np.ndarray, g: np.ndarray) -> np.ndarray:
    """(*w)_ab = 1/2 eps_ab^cd w_cd for lowered two-forms."""
    ginv = np.linalg.inv(g)
    eps = volume_form(g)
    wup = np.einsum("pac,pbd,pcd->pab", ginv, ginv, omega, optimize=True)
    return 0.5 * np.einsum("pabcd,pcd->pab", eps, wup)


def hodge_second_pair(T: np.ndarray, g: np.ndarray) -> np.ndarray:
    """(T*)_abcd = 1/2 T_ab^ef eps_efcd."""
    P = len(T)
    ginv = np.linalg.inv(g)
    vol = np.sqrt(np.linalg.det(g))
    # raise the second pair, then contract with [efcd] as a 16x16 matmul
    G2 = np.einsum("pce,pdf->pcdef", ginv, ginv).reshape(P, 16, 16)
    Tup = np.matmul(T.reshape(P, 16, 16), np.swapaxes(G2, 1, 2))
    out = np.matmul(Tup, LEVI_CIVITA.reshape(16, 16))
    return (0.5 * vol)[:, None, None, None, None] * out.reshape(T.shape)


def sd_part(omega, g):
    return 0.5 * (omega + hodge(omega, g))


def asd_part(omega, g):
    return 0.5 * (omega - hodge(omega, g))


def sd_projector(g: np.ndarray, sign: int = 1) -> np.ndarray:
    """Matrix of P_pm on two-forms: (P w)_ab = Pi[ab, cd] w_cd."""
    P = len(g)
    basis = np.zeros((16, 4, 4))
    basis[np.arange(16), np.arange(16) // 4, np.arange(16) % 4] = 1.0
    out = np.empty((P, 16, 16))
    for k in range(16):
        w = np.broadcast_to(basis[k], (P, 4, 4))
        w = 0.5 * (w - np.swapaxes(w, 1, 2))
        out[:, :, k] = (0.5 * (w + sign * hodge(w, g))).reshape(P, 16)
    return out


def sd_basis(theta: np.ndarray, sign: int = 1) -> np.ndarray:
    """SD (sign=+1) or ASD basis two-forms omega^I_mu nu from a coframe.

    ``theta[p, a, mu]`` is an oriented orthonormal coframe.  Each basis
    element has omega_ab omega^ab = 4.
    """
    flat = _SD_FLAT if sign > 0 else _ASD_FLAT
    half = np.einsum("Iab,pbn->pIan", flat, theta)
    return np.matmul(np.swapaxes(theta, 1, 2)[:, None], half)


def kulkarni_nomizu(g: np.ndarray, P: np.ndarray) -> np.ndarray:
    """2 (g_c[a P_b]d + g_d[b P_a]c), the Schouten part of the curvature."""
    return (np.einsum("pca,pbd->pabcd", g, P) - np.einsum("pcb,pad->pabcd", g, P)
            + np.einsum("pdb,pac->pabcd", g, P) - np.einsum("pda,pbc->pabcd", g, P))


def curvature_projection(T: np.ndarray) -> np.ndarray:
    """Project a 4-tensor onto algebraic curvature tensors.

    Antisymmetrize both pairs, symmetrize under pair exchange and remove the
    totally antisymmetric part (first Bianchi identity).
    """
    T = 0.5 * (T - np.swapaxes(T, 1, 2))
    T = 0.5 * (T - np.swapaxes(T, 3, 4))
    T = 0.5 * (T + np.transpose(T, (0, 3, 4, 1, 2)))
    return T - totally_antisymmetric(T)


def totally_antisymmetric(T: np.ndarray) -> np.ndarray:
    full = np.einsum("pabcd,abcd->p", T, LEVI_CIVITA) / 24.0
    return full[:, None, None, None, None] * LEVI_CIVITA


def bianchi_defect(R: np.ndarray) -> np.ndarray:
    """R_abcd + R_acdb + R_adbc."""
    return R + np.transpose(R, (0, 1, 3, 4, 2)) + np.transpose(R, (0, 1, 4, 2, 3))


def traces(W: np.ndarray, ginv: np.ndarray) -> list:
    """All six single metric contractions of a 4-tensor."""
    out = []
    for i, j in itertools.combinations(range(4), 2):
        Wm = np.moveaxis(W, (i + 1, j + 1), (-2, -1))
        out.append(np.einsum("p...xy,pxy->p...", Wm, ginv))
    return out


# --------------------------------------------------------------------------
# W+-type sections: trace-free symmetric endomorphisms of the SD two-forms
# --------------------------------------------------------------------------

def s_from_u5(u5: np.ndarray) -> np.ndarray:
    """Symmetric trace-free 3x3 matrix from five components."""
    u = np.asarray(u5)
    S = np.empty(u.shape[:-1] + (3, 3))
    S[..., 0, 0] = u[..., 0]
    S[..., 1, 1] = u[..., 1]
    S[..., 2, 2] = -u[..., 0] - u[..., 1]
    S[..., 0, 1] = S[..., 1, 0] = u[..., 2]
    S[..., 0, 2] = S[..., 2, 0] = u[..., 3]
    S[..., 1, 2] = S[..., 2, 1] = u[..., 4]
    return S


def u5_from_s(S: np.ndarray) -> np.ndarray:
    return np.stack([S[..., 0, 0], S[..., 1, 1], S[..., 0, 1], S[..., 0, 2], S[..., 1, 2]], axis=-1)


def weyl_plus_tensor(u5: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """U_abcd = sum_IJ S_IJ omega^I_ab omega^J_cd."""
    S = s_from_u5(u5)
    B = basis.reshape(len(basis), 3, 16)
    out = np.matmul(np.swapaxes(B, 1, 2), np.matmul(S, B))
    return out.reshape(len(basis), 4, 4, 4, 4)


def weyl_plus_coefficients(U: np.ndarray, basis: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """Matrix S_IJ = U(omega^I, omega^J) / 16 (inverse of ``weyl_plus_tensor``)."""
    bu = np.einsum("pac,pbd,pIcd->pIab", ginv, ginv, basis, optimize=True)
    return np.einsum("pIab,pJcd,pabcd->pIJ", bu, bu, U, optimize=True) / 16.0


def weyl_plus_projection(T: np.ndarray, basis: np.ndarray, ginv: np.ndarray) -> np.ndarray:
    """Orthogonal projection of a 4-tensor onto the W+-type tensors."""
    S = weyl_plus_coefficients(T, basis, ginv)
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    tr = np.trace(S, axis1=1, axis2=2) / 3.0
    S = S - tr[:, None, None] * np.eye(3)
    return np.einsum("pIJ,pIab,pJcd->pabcd", S, basis, basis, optimize=True)
