"""Pure-numpy versions of the per-site tensor kernels."""

import numpy as np


def christoffel(ginv, dg):
    """Gamma^c_ab from the inverse metric and dg[p, e, a, b] = d_e g_ab."""
    # t[p, a, b, d] = d_a g_bd + d_b g_ad - d_d g_ab
    t = dg + np.swapaxes(dg, 1, 2) - np.transpose(dg, (0, 2, 3, 1))
    return 0.5 * np.einsum("pcd,pabd->pcab", ginv, t)


def riemann(G, dG):
    """R_ab^c_d from Gamma^c_ab and dG[p, e, c, a, b] = d_e Gamma^c_ab."""
    lin = np.transpose(dG, (0, 1, 3, 2, 4))  # [p, a, b, c, d] = d_a Gamma^c_bd
    quad = np.einsum("pcae,pebd->pabcd", G, G)
    r = lin + quad
    return r - np.swapaxes(r, 1, 2)
