"""Maximize the weighted conformal functional and check its critical metric.

Conformal factors live on flat periodic coordinates and are handled
spectrally.  Two embeddings are provided: ``w(t)`` on the circle factor of
S^3(1) x S^1(L), with the sphere integrated out, and ``w`` on all of the flat
torus T^4.  In both the background has constant curvature, so every
functional is a periodic quadrature of ``w`` and its Fourier derivatives.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from . import conformal
from .calculus import Calc, sup
from .conformal import EIGHT_PI2, HypothesisError
from .geometry import map_sites

log = logging.getLogger(__name__)

SPHERE_YAMABE = 8.0 * math.sqrt(6.0) * math.pi
REDUCTIONS = ("circle-symmetric", "full-4d")
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


class ConfigurationError(ValueError):
    """The requested geometry and reduction do not fit together."""


@dataclass
class SolverConfig:
    geometry: str = "s3xs1"
    reduction: str = "circle-symmetric"
    yamabe: float = SPHERE_YAMABE
    gammas: Optional[tuple] = None
    max_iters: int = 2000
    grad_tol: float = 1e-7
    shrink: float = 0.5
    sufficient_increase: float = 1e-4
    memory: int = 10
    nodes: Optional[int] = None
    extent: Optional[float] = None
    seed: Optional[int] = None
    perturbation: float = 1e-2
    self_test_directions: int = 10

    def resolved_gammas(self) -> tuple:
        if self.gammas is not None:
            return tuple(float(g) for g in self.gammas)
        return (0.0, 0.0, -6.0, -0.5, -2.0 * self.yamabe)

    def validate(self) -> tuple:
        if not self.yamabe > 0:
            raise ConfigurationError("yamabe must be positive")
        if self.reduction not in REDUCTIONS:
            raise ConfigurationError(f"unknown reduction {self.reduction!r}")
        if not (0 < self.shrink < 1 and 0 < self.sufficient_increase < 1):
            raise ConfigurationError("line search needs 0 < shrink < 1 and 0 < c < 1")
        if self.memory < 1 or self.max_iters < 0 or not self.grad_tol > 0:
            raise ConfigurationError("memory >= 1, max_iters >= 0 and grad_tol > 0 required")
        gammas = self.resolved_gammas()
        if len(gammas) != 5:
            raise ConfigurationError("five gammas expected")
        _, _, g2, g3, g4 = gammas
        if not (g2 < 0 and g3 < 0 and g4 <= 0):
            raise HypothesisError(f"need gamma2 < 0, gamma3 < 0, gamma4 <= 0; got {gammas}")
        return gammas


# --------------------------------------------------------------------------
# the periodic problem
# --------------------------------------------------------------------------

@dataclass
class PeriodicProblem:
    """Constant-curvature background, conformal factor on ``dims`` flat periodic axes.

    ``w`` is a trigonometric polynomial stored by its values at ``nodes``
    equispaced points per axis (odd, so every mode is a full cos/sin pair).
    Integrals are taken on a grid ``oversample`` times finer, and derivatives
    of ``w`` always come from its own spectrum, so the discrete functional is
    the exact restriction of the continuous one up to quadrature aliasing.
    The remaining ``4 - dims`` directions are integrated out with total
    measure ``transverse_volume``; ``ric_periodic`` is the Ricci curvature
    along the periodic block (a multiple of the identity there).
    """

    name: str
    dims: int
    nodes: int
    extent: float
    R: float
    ric_periodic: float
    Q: float
    transverse_volume: float
    W2plus: float = 0.0
    W2minus: float = 0.0
    oversample: int = 4

    def __post_init__(self):
        if self.nodes % 2 == 0 or self.nodes < 3:
            raise ConfigurationError("nodes must be odd and at least 3")
        if self.oversample < 1:
            raise ConfigurationError("oversample must be a positive integer")
        self.fine_nodes = self.nodes * self.oversample
        kk = 2.0 * math.pi / self.extent
        fine = np.fft.fftfreq(self.fine_nodes, 1.0 / self.fine_nodes)
        if self.fine_nodes % 2 == 0:
            fine[self.fine_nodes // 2] = 0.0  # odd derivatives drop the Nyquist mode
        shape = (self.fine_nodes,) * self.dims
        self.k = [kk * fine.reshape([-1 if a == i else 1 for a in range(self.dims)]) * np.ones(shape)
                  for i in range(self.dims)]
        self.k2 = sum(ki * ki for ki in self.k)
        # fine-spectrum positions of the coarse modes
        coarse = np.fft.fftfreq(self.nodes, 1.0 / self.nodes).astype(int)
        self._slots = np.ix_(*([coarse % self.fine_nodes] * self.dims))
        self.low = np.zeros(shape, dtype=bool)
        self.low[self._slots] = True

    # ------------------------------------------------------------ constants
    @property
    def shape(self) -> tuple:
        return (self.nodes,) * self.dims

    @property
    def fine_shape(self) -> tuple:
        return (self.fine_nodes,) * self.dims

    @property
    def cell(self) -> float:
        return self.transverse_volume * (self.extent / self.nodes) ** self.dims

    @property
    def fine_cell(self) -> float:
        return self.transverse_volume * (self.extent / self.fine_nodes) ** self.dims

    @property
    def volume(self) -> float:
        return self.transverse_volume * self.extent ** self.dims

    @property
    def J(self) -> float:
        return self.R / 6.0

    @property
    def ric_transverse(self) -> float:
        rest = 4 - self.dims
        return (self.R - self.dims * self.ric_periodic) / rest if rest else 0.0

    @property
    def paneitz_alpha(self) -> float:
        return (2.0 / 3.0) * self.R - 2.0 * self.ric_periodic

    @property
    def total_Q(self) -> float:
        return self.Q * self.volume

    def coordinates(self, fine: bool = False) -> np.ndarray:
        n = self.fine_nodes if fine else self.nodes
        return np.arange(n) * (self.extent / n)

    def integrate(self, f: np.ndarray) -> float:
        """Quadrature of a field given on either grid."""
        cell = self.fine_cell if f.shape == self.fine_shape else self.cell
        return cell * float(np.sum(f))

    def describe(self) -> dict:
        return {"name": self.name, "dims": self.dims, "nodes": self.nodes, "oversample": self.oversample,
                "extent": self.extent, "R": self.R, "Q": self.Q, "volume": self.volume}

    # -------------------------------------------------------- grid transfer
    def coefficients(self, w: np.ndarray) -> np.ndarray:
        """Coarse Fourier coefficients; complex input is taken to be coefficients already."""
        return w if np.iscomplexobj(w) else np.fft.fftn(w)

    def values(self, w: np.ndarray) -> np.ndarray:
        """Coarse nodal values; real input is returned unchanged."""
        return np.real(np.fft.ifftn(w)) if np.iscomplexobj(w) else w

    def spectrum(self, w: np.ndarray) -> np.ndarray:
        """Spectrum of a coarse field on the fine index set (zero beyond the coarse band)."""
        S = np.zeros(self.fine_shape, dtype=complex)
        S[self._slots] = self.coefficients(w) * (self.oversample ** self.dims)
        return S

    def to_fine(self, S: np.ndarray) -> np.ndarray:
        return np.real(np.fft.ifftn(S))

    def restrict(self, S: np.ndarray) -> np.ndarray:
        """Coarse coefficients of the coarse-band part of a fine spectrum."""
        return S[self._slots] / (self.oversample ** self.dims)

    def up(self, w: np.ndarray) -> np.ndarray:
        return self.to_fine(self.spectrum(w))

    def jets(self, w: np.ndarray) -> dict:
        """Fine-grid values of w, its gradient, Hessian, Laplacian and bi-Laplacian."""
        S = self.spectrum(w)
        d = self.dims
        grad = [self.to_fine(1j * self.k[i] * S) for i in range(d)]
        hess = np.array([[self.to_fine(-self.k[i] * self.k[j] * S) for j in range(d)] for i in range(d)])
        return {"w": self.to_fine(S), "grad": grad, "hess": hess,
                "lap": self.to_fine(-self.k2 * S), "lap2": self.to_fine(self.k2 ** 2 * S)}

    # ------------------------------------------------- fine-grid derivatives
    def fine_deriv(self, f: np.ndarray, i: int) -> np.ndarray:
        return np.real(np.fft.ifftn(1j * self.k[i] * np.fft.fftn(f - f.mean())))

    def fine_lap(self, f: np.ndarray) -> np.ndarray:
        return np.real(np.fft.ifftn(-self.k2 * np.fft.fftn(f - f.mean())))

    # ------------------------------------------------------- coarse helpers
    def precondition(self, v: np.ndarray) -> np.ndarray:
        """Inverse of (1 + |k|^2)^2 on coefficient arrays."""
        return v / (1.0 + self.k2[self._slots]) ** 2

    def normalize(self, w: np.ndarray) -> np.ndarray:
        """Shift by the constant that makes the volume of e^{2w} g equal to 1."""
        a = 4.0 * self.up(w)
        m = a.max()
        shift = 0.25 * (m + math.log(self.fine_cell * float(np.sum(np.exp(a - m)))))
        if np.iscomplexobj(w):
            out = w.copy()
            out[(0,) * self.dims] -= shift * self.nodes ** self.dims
            return out
        return w - shift

    def interpolant(self, w: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        """Trigonometric interpolant of a 1-D nodal field, as a function of t."""
        if self.dims != 1:
            raise ConfigurationError("only 1-D fields can be lifted")
        w = self.values(w)
        n = len(w)
        c = np.fft.rfft(w) / n
        modes = np.arange(len(c))
        scale = np.full(len(c), 2.0)
        scale[0] = 1.0
        if n % 2 == 0:
            scale[-1] = 1.0
        kk = 2.0 * math.pi / self.extent

        def f(t):
            ph = np.outer(np.asarray(t, dtype=float), modes * kk)
            return np.cos(ph) @ (scale * c.real) - np.sin(ph) @ (scale * c.imag)

        return f


def circle_symmetric_reduction(geometry: str = "s3xs1", nodes: Optional[int] = None,
                               extent: Optional[float] = None) -> PeriodicProblem:
    """Conformal factors on S^3(1) x S^1(L) depending only on the circle."""
    if geometry != "s3xs1":
        raise ConfigurationError(f"circle-symmetric ansatz needs the s3xs1 product, not {geometry!r}")
    return PeriodicProblem("s3xs1/circle", 1, nodes or 41, extent or 2.0 * math.pi,
                           R=6.0, ric_periodic=0.0, Q=0.0, transverse_volume=2.0 * math.pi ** 2)


def flat_torus_problem(nodes: Optional[int] = None, extent: Optional[float] = None) -> PeriodicProblem:
    return PeriodicProblem("flat_t4", 4, nodes or 17, extent or 1.0,
                           R=0.0, ric_periodic=0.0, Q=0.0, transverse_volume=1.0, oversample=2)


def build_problem(config: SolverConfig) -> PeriodicProblem:
    if config.reduction == "circle-symmetric":
        return circle_symmetric_reduction(config.geometry, config.nodes, config.extent)
    if config.geometry == "flat_t4":
        return flat_torus_problem(config.nodes, config.extent)
    raise ConfigurationError(f"full-4d optimization is only available on flat_t4, not {config.geometry!r}")


# --------------------------------------------------------------------------
# functionals and their gradient
# --------------------------------------------------------------------------

def functionals(pb: PeriodicProblem, w: np.ndarray) -> dict:
    j = pb.jets(w)
    w_f, gw, lw = j["w"], j["grad"], j["lap"]
    g2 = sum(d * d for d in gw)
    M = pb.integrate(np.exp(4.0 * w_f))
    log_avg = math.log(M / pb.volume)
    mean_w = pb.integrate(w_f)
    II = pb.integrate(lw ** 2 + pb.paneitz_alpha * g2) + 4.0 * pb.Q * mean_w - pb.total_Q * log_avg
    III = pb.integrate(12.0 * (lw + g2) ** 2 - 4.0 * pb.R * g2)
    IV = pb.integrate((pb.R + 6.0 * g2) * np.exp(2.0 * w_f)) / math.sqrt(M)
    Ip = pb.W2plus * (4.0 * mean_w - pb.volume * log_avg)
    Im = pb.W2minus * (4.0 * mean_w - pb.volume * log_avg)
    return {"I_plus": Ip, "I_minus": Im, "II": II, "III": III, "IV": IV, "volume_hat": M}


def phi_value(pb: PeriodicProblem, w: np.ndarray, gammas: Sequence[float]) -> float:
    f = functionals(pb, w)
    g1p, g1m, g2, g3, g4 = gammas
    return g1p * f["I_plus"] + g1m * f["I_minus"] + g2 * f["II"] + g3 * f["III"] + g4 * f["IV"]


def gradient_phi(pb: PeriodicProblem, w: np.ndarray, gammas: Sequence[float],
                 measure: str = "background") -> np.ndarray:
    """L^2 gradient of the combined functional at the nodes.

    The first variation is collected on the fine grid as
    ``a dw + b . grad dw + c lap dw`` and restricted to the coarse band.
    ``measure="background"`` pairs with dv of g, ``"hat"`` with dv of
    e^{2w} g; the two differ by the factor e^{4w}.
    """
    G = pb.values(gradient_coefficients(pb, w, gammas))
    if measure == "hat":
        return G * np.exp(-4.0 * pb.values(w))
    return G


def gradient_coefficients(pb: PeriodicProblem, w: np.ndarray, gammas: Sequence[float]) -> np.ndarray:
    """Coarse Fourier coefficients of the background-measure gradient."""
    g1p, g1m, g2, g3, g4 = gammas
    j = pb.jets(w)
    w_f, gw, lw = j["w"], j["grad"], j["lap"]
    g2w = sum(d * d for d in gw)
    e2w, e4w = np.exp(2.0 * w_f), np.exp(4.0 * w_f)
    M = pb.integrate(e4w)
    dlog = 4.0 * e4w / M
    a = np.zeros(pb.fine_shape)
    b = [np.zeros(pb.fine_shape) for _ in gw]
    c = np.zeros(pb.fine_shape)
    wt = g1p * pb.W2plus + g1m * pb.W2minus
    if wt:
        a += wt * (4.0 - pb.volume * dlog)
    if g2:
        a += g2 * (4.0 * pb.Q - pb.total_Q * dlog)
        c += g2 * 2.0 * lw
        for bi, d in zip(b, gw):
            bi += g2 * 2.0 * pb.paneitz_alpha * d
    if g3:
        A = lw + g2w
        c += g3 * 24.0 * A
        for bi, d in zip(b, gw):
            bi += g3 * (48.0 * A - 8.0 * pb.R) * d
    if g4:
        rs = 1.0 / math.sqrt(M)
        N = pb.integrate((pb.R + 6.0 * g2w) * e2w)
        a += g4 * (2.0 * (pb.R + 6.0 * g2w) * e2w * rs - 2.0 * N * rs ** 3 * e4w)
        for bi, d in zip(b, gw):
            bi += g4 * 12.0 * e2w * d * rs
    S = np.fft.fftn(a) - pb.k2 * np.fft.fftn(c)
    for i, bi in enumerate(b):
        S -= 1j * pb.k[i] * np.fft.fftn(bi)
    return pb.restrict(S)


def gradient_self_test(pb: PeriodicProblem, w: np.ndarray, gammas: Sequence[float],
                       rng: np.random.Generator, directions: int = 10, eps: float = 1e-5) -> dict:
    """Compare the analytic gradient with central differences of the functional."""
    G = gradient_phi(pb, w, gammas)
    errs = []
    for _ in range(directions):
        v = _smooth_random(pb, rng)
        fd = (phi_value(pb, w + eps * v, gammas) - phi_value(pb, w - eps * v, gammas)) / (2 * eps)
        an = pb.integrate(G * v)
        floor = 1e-6 * math.sqrt(pb.integrate(G * G) * pb.integrate(v * v))
        errs.append(abs(fd - an) / max(abs(fd), abs(an), floor, 1e-300))
    wv = pb.values(w)
    Gh = G * np.exp(-4.0 * wv)
    dvh = np.exp(4.0 * wv)
    return {"max_rel_error": max(errs) if errs else 0.0, "directions": directions,
            "constant_direction": abs(pb.integrate(G)) / max(pb.integrate(np.abs(G)), 1e-300),
            "constant_direction_hat": abs(pb.integrate(Gh * dvh)) / max(pb.integrate(np.abs(Gh) * dvh), 1e-300)}


def _smooth_random(pb: PeriodicProblem, rng: np.random.Generator, kmax: int = 4) -> np.ndarray:
    x = np.meshgrid(*([pb.coordinates()] * pb.dims), indexing="ij")
    kk = 2.0 * math.pi / pb.extent
    v = np.zeros(pb.shape)
    for _ in range(6):
        m = rng.integers(-kmax, kmax + 1, size=pb.dims)
        if not m.any():
            m[0] = 1
        v += rng.normal() * np.cos(kk * sum(mi * xi for mi, xi in zip(m, x)) + rng.uniform(0, 2 * math.pi))
    return v


# --------------------------------------------------------------------------
# curvature of e^{2w} g
# --------------------------------------------------------------------------

def hat_curvature(pb: PeriodicProblem, w: np.ndarray) -> dict:
    """Pointwise curvature of e^{2w} g on the fine grid; norms are taken in that metric."""
    j = pb.jets(w)
    w_f, gw, lw, H = j["w"], j["grad"], j["lap"], j["hess"]
    g2 = sum(d * d for d in gw)
    e2, e4 = np.exp(-2.0 * w_f), np.exp(-4.0 * w_f)
    d, rest = pb.dims, 4 - pb.dims

    def lap_hat(f):
        gf = [pb.fine_deriv(f, i) for i in range(d)]
        return e2 * (pb.fine_lap(f) + 2.0 * sum(a * b for a, b in zip(gw, gf)))

    p_per = 0.5 * (pb.ric_periodic - pb.J)
    p_tr = 0.5 * (pb.ric_transverse - pb.J)
    # Schouten of e^{2w} g, lower indices: P - Hess w + dw dw - |dw|^2 g / 2
    B = -H + np.einsum("i...,j...->ij...", np.array(gw), np.array(gw))
    for i in range(d):
        B[i, i] += p_per - 0.5 * g2
    t = p_tr - 0.5 * g2
    P2 = e4 * (np.sum(B * B, axis=(0, 1)) + rest * t * t)
    J = e2 * (np.trace(B) + rest * t)
    R = e2 * (pb.R - 6.0 * lw - 6.0 * g2)
    Pw = j["lap2"] - pb.paneitz_alpha * lw
    Q = e4 * (pb.Q + 0.5 * Pw)
    Q_schouten = -0.5 * lap_hat(J) + J * J - P2
    P0 = P2 - 0.25 * J * J
    return {"R": R, "J": J, "J_from_R": R / 6.0, "Q": Q, "Q_schouten": Q_schouten,
            "lapR": lap_hat(R), "lapJ": lap_hat(J), "P0_2": P0, "E2": 4.0 * P0,
            "W2plus": e4 * pb.W2plus, "W2minus": e4 * pb.W2minus, "dv": np.exp(4.0 * w_f)}


def el_residual(pb: PeriodicProblem, w: np.ndarray, gammas: Sequence[float],
                yamabe: Optional[float] = None) -> dict:
    """Euler-Lagrange field, its dv-average and the residual field minus average."""
    g1p, g1m, g2, g3, g4 = gammas
    c = hat_curvature(pb, w)
    vol = pb.integrate(c["dv"])
    F = (g1p * c["W2plus"] + g1m * c["W2minus"] + g2 * c["Q"] - g3 * c["lapR"]
         + 0.5 * g4 * c["R"] / math.sqrt(vol))
    mu = pb.integrate(F * c["dv"]) / vol
    res = F - mu
    out = {"field": F, "mu": mu, "residual": res, "residual_sup": sup(res), "volume_hat": vol,
           "q_consistency": sup(c["Q"] - c["Q_schouten"]), "curvature": c}
    if yamabe is not None:
        # the same equation with Q rewritten through R and the traceless Ricci
        rhs = c["R"] ** 2 / 8.0 - 1.5 * c["E2"] + yamabe * c["R"] + mu
        out["el3_residual_sup"] = sup(c["lapR"] - rhs)
        out["mu_identity"] = -6.0 * pb.integrate(c["Q"] * c["dv"]) - yamabe * pb.integrate(c["R"] * c["dv"])
    return out


def mu_integral_identity(pb: PeriodicProblem, w: np.ndarray, mu: float, yamabe: float) -> dict:
    """mu against -6 int Q - Y int R, both sides by quadrature in integrated-by-parts form."""
    f = functionals(pb, w)
    total_R = f["IV"] * math.sqrt(f["volume_hat"])
    rhs = -6.0 * pb.total_Q - yamabe * total_R
    return {"mu": mu, "rhs": rhs, "rel_diff": abs(mu - rhs) / max(abs(mu), abs(rhs), 1e-300)}


def conformal_laplacian_lambda1(pb: PeriodicProblem, w: np.ndarray) -> float:
    """Lowest eigenvalue of -6 Delta + R for e^{2w} g among periodic-axis functions."""
    if pb.dims != 1:
        raise ConfigurationError("dense eigenproblem only for the 1-D reduction")
    n = pb.fine_nodes
    D = np.array([pb.fine_deriv(col, 0) for col in np.eye(n)]).T
    c = hat_curvature(pb, w)
    e2w = np.sqrt(c["dv"])
    A = pb.fine_cell * (6.0 * D.T @ (e2w[:, None] * D) + np.diag(c["R"] * c["dv"]))
    B = pb.fine_cell * np.diag(c["dv"])
    return float(scipy.linalg.eigh(A, B, eigvals_only=True)[0])


def derived_metric_checks(pb: PeriodicProblem, w: np.ndarray, mu: float, yamabe: float,
                          tol: float = 1e-6, quotient: Optional[float] = None) -> dict:
    """Positivity of J, the pointwise J inequality and the size bound on mu."""
    c = hat_curvature(pb, w)
    slack = -(c["lapJ"] + c["P0_2"] - 3.75 * c["J"] ** 2)
    worst = int(np.argmin(slack))
    out = {"J_min": float(c["J"].min()), "J_positive": bool(c["J"].min() > 0),
           "keyPDE_margin_min": float(slack.min()), "keyPDE_ok": bool(slack.min() >= -tol),
           "keyPDE_worst_site": worst, "R_min": float(c["R"].min()),
           "keymu_value": mu + 0.5 * yamabe ** 2, "keymu_ok": bool(mu + 0.5 * yamabe ** 2 <= tol),
           "keymu_basis": "conditional on the supplied Yamabe constant"}
    if quotient is not None:
        out["keymu_value_quotient"] = mu + 0.5 * quotient ** 2
        out["keymu_ok_quotient"] = bool(out["keymu_value_quotient"] <= tol)
    return out


def pointwise_key_checks(J: np.ndarray, lapJ: np.ndarray, P0_2: np.ndarray, tol: float = 1e-6) -> dict:
    """The J inequality on arbitrary site data; reports the worst site."""
    slack = -(np.asarray(lapJ) + np.asarray(P0_2) - 3.75 * np.asarray(J) ** 2)
    worst = int(np.argmin(slack))
    return {"J_positive": bool(np.min(J) > 0), "keyPDE_ok": bool(slack[worst] >= -tol),
            "keyPDE_margin_min": float(slack[worst]), "keyPDE_worst_site": worst}


# --------------------------------------------------------------------------
# ascent
# --------------------------------------------------------------------------

@dataclass
class SolverResult:
    w_star: np.ndarray
    mu: float
    phi_value: float
    el_residual_sup: float
    J_min: float
    keyPDE_margin_min: float
    keymu_value: float
    iterations: int
    converged: bool
    grad_norm: float
    volume_hat: float
    phi_initial: float
    problem: PeriodicProblem
    gammas: tuple
    yamabe: float
    trace: list = field(default_factory=list)
    checks: dict = field(default_factory=dict)
    coefficients: Optional[np.ndarray] = field(default=None, repr=False)

    def summary(self) -> dict:
        keys = ("mu", "phi_value", "el_residual_sup", "J_min", "keyPDE_margin_min", "keymu_value",
                "iterations", "converged", "grad_norm", "volume_hat", "phi_initial", "yamabe")
        out = {k: getattr(self, k) for k in keys}
        out["gammas"] = list(self.gammas)
        out["problem"] = self.problem.describe()
        out["checks"] = self.checks
        return out


def _dot(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.real(np.vdot(x, y)))


def _phi_increase(pb, c, p, alpha, gammas, phi0) -> float:
    """Phi(c + alpha p) - Phi(c), integrating the directional derivative when cancellation bites."""
    direct = phi_value(pb, c + alpha * p, gammas) - phi0
    if abs(direct) > 1e-8 * max(abs(phi0), 1.0):
        return direct
    t = 0.5 * (_GL_NODES + 1.0)
    weight = pb.cell / pb.nodes ** pb.dims
    return 0.5 * alpha * weight * sum(wt * _dot(gradient_coefficients(pb, c + ti * alpha * p, gammas), p)
                                      for ti, wt in zip(t, _GL_WEIGHTS))


def _initial_field(pb: PeriodicProblem, config: SolverConfig) -> np.ndarray:
    if config.seed is not None:
        v = _smooth_random(pb, np.random.default_rng(config.seed), kmax=2)
        return config.perturbation * v / max(sup(v), 1e-300)
    x = pb.coordinates()
    return config.perturbation * np.cos(2.0 * math.pi * x / pb.extent).reshape(
        (-1,) + (1,) * (pb.dims - 1)) * np.ones(pb.shape)


def check_hypotheses(pb: PeriodicProblem, gammas: Sequence[float]) -> float:
    g1p, g1m, g2 = gammas[:3]
    kap = -g1p * pb.W2plus * pb.volume - g1m * pb.W2minus * pb.volume - g2 * pb.total_Q
    if kap >= -g2 * EIGHT_PI2:
        raise HypothesisError(f"kappa = {kap:.6g} is not below {-g2 * EIGHT_PI2:.6g}")
    return kap


def check_lattice_hypotheses(calc: Calc, lat, gammas: Sequence[float]) -> float:
    """The same bound for a background only available as a lattice (e.g. the round sphere)."""
    geo = conformal.LatticeGeometry.build(calc, lat)
    kap = conformal.kappa(geo, gammas)
    bound = -gammas[2] * EIGHT_PI2
    if kap >= bound * (1.0 - 1e-6):
        raise HypothesisError(f"kappa = {kap:.6g} is not below {bound:.6g}")
    return kap


def maximize_phi(config: SolverConfig, problem: Optional[PeriodicProblem] = None,
                 on_step: Optional[Callable[[int, float, float, float], None]] = None) -> SolverResult:
    """Quasi-Newton ascent with volume normalization after each accepted step."""
    gammas = config.validate()
    if problem is None and config.geometry not in ("s3xs1", "flat_t4"):
        # refuse on the hypotheses before complaining about the discretization
        from .models import make_background
        bg = make_background(config.geometry)
        check_lattice_hypotheses(Calc(bg), bg.lattice(6), gammas)
    pb = problem if problem is not None else build_problem(config)
    kap = check_hypotheses(pb, gammas)
    rng = np.random.default_rng(0 if config.seed is None else config.seed)

    zero = np.zeros(pb.shape)
    phi_initial = phi_value(pb, zero, gammas)
    w = pb.normalize(zero)
    el0 = el_residual(pb, w, gammas)
    critical = el0["residual_sup"] <= 1e-9 * max(abs(el0["mu"]), 1.0)
    if config.seed is not None or (critical and config.perturbation > 0 and _is_saddle(pb, w, gammas, config)):
        # w = 0 can be critical without being a maximum; leave it along a rising direction
        w = pb.normalize(w + _initial_field(pb, config))

    self_test = gradient_self_test(pb, w + 0.05 * _smooth_random(pb, rng), gammas, rng,
                                   config.self_test_directions)
    # iterate on Fourier coefficients: nodal storage would put roundoff of the
    # size of w into every mode, and the fourth-order terms amplify it by k^4
    weight = pb.cell / pb.nodes ** pb.dims
    c = pb.coefficients(w)
    phi = phi_value(pb, c, gammas)
    G = gradient_coefficients(pb, c, gammas)
    gnorm = _hat_norm(pb, G, c)
    running = phi
    trace = [(0, running, gnorm, 0.0)]
    if on_step:
        on_step(*trace[0])
    mem_s, mem_y = [], []
    converged = gnorm < config.grad_tol
    it = 0
    stalled = False
    while not converged and it < config.max_iters:
        it += 1
        g = -weight * G  # gradient of -Phi in the coefficient inner product
        p = -_two_loop(pb, g, mem_s, mem_y, weight)
        slope = _dot(g, p)
        if slope >= 0:
            mem_s.clear()
            mem_y.clear()
            p = -pb.precondition(g) / weight
            slope = _dot(g, p)
        alpha = 1.0
        while True:
            gain = _phi_increase(pb, c, p, alpha, gammas, phi)
            if gain >= config.sufficient_increase * alpha * (-slope) and gain > 0:
                break
            alpha *= config.shrink
            if alpha < 1e-16:
                stalled = True
                break
        if stalled:
            log.warning("line search stalled at iteration %d", it)
            break
        c_new = pb.normalize(c + alpha * p)
        G_new = gradient_coefficients(pb, c_new, gammas)
        step = alpha * p
        y = -weight * (G_new - G)
        if _dot(step, y) > 1e-14 * float(np.linalg.norm(step) * np.linalg.norm(y)):
            mem_s.append(step)
            mem_y.append(y)
            if len(mem_s) > config.memory:
                mem_s.pop(0)
                mem_y.pop(0)
        c, G = c_new, G_new
        running += gain
        phi = phi_value(pb, c, gammas)
        gnorm = _hat_norm(pb, G, c)
        trace.append((it, running, gnorm, alpha))
        if on_step:
            on_step(*trace[-1])
        converged = gnorm < config.grad_tol

    w = c
    el = el_residual(pb, w, gammas, config.yamabe)
    f = functionals(pb, w)
    quotient = functionals(pb, zero)["IV"]
    checks = derived_metric_checks(pb, w, el["mu"], config.yamabe, quotient=quotient)
    checks.update({
        "kappa": kap, "kappa_bound": -gammas[2] * EIGHT_PI2,
        "gradient_self_test": self_test,
        "mu_integral_identity": mu_integral_identity(pb, w, el["mu"], config.yamabe),
        "el3_residual_sup": el.get("el3_residual_sup"),
        "q_consistency": el["q_consistency"],
        "stationarity_ratio": el["residual_sup"] / max(gnorm, 1e-300),
        "background_quotient_IV0": quotient,
        "line_search_stalled": stalled,
        "functionals": {k: v for k, v in f.items()},
    })
    if pb.dims == 1:
        checks["lambda1_conformal_laplacian"] = conformal_laplacian_lambda1(pb, w)
    return SolverResult(pb.values(w), el["mu"], phi, el["residual_sup"], checks["J_min"], checks["keyPDE_margin_min"],
                        checks["keymu_value"], it, bool(converged), gnorm, f["volume_hat"], phi_initial,
                        pb, gammas, config.yamabe, trace, checks, coefficients=w)


def _hat_norm(pb: PeriodicProblem, G: np.ndarray, c: np.ndarray) -> float:
    return sup(pb.values(G) * np.exp(-4.0 * pb.values(c)))


def _is_saddle(pb, w, gammas, config) -> bool:
    v = _initial_field(pb, config)
    if not np.any(v):
        return False
    phi0 = phi_value(pb, w, gammas)
    return phi_value(pb, pb.normalize(w + v), gammas) > phi0


def _two_loop(pb: PeriodicProblem, g: np.ndarray, mem_s: list, mem_y: list, weight: float) -> np.ndarray:
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(mem_s), reversed(mem_y)):
        rho = 1.0 / _dot(y, s)
        a = rho * _dot(s, q)
        alphas.append((rho, a))
        q -= a * y
    if mem_s:
        s, y = mem_s[-1], mem_y[-1]
        scale = _dot(s, y) / _dot(y, pb.precondition(y))
    else:
        scale = 1.0 / weight
    r = scale * pb.precondition(q)
    for (s, y), (rho, a) in zip(zip(mem_s, mem_y), reversed(alphas)):
        b = rho * _dot(y, r)
        r += (a - b) * s
    return r


# --------------------------------------------------------------------------
# cross-checks against the 4-D lattice machinery
# --------------------------------------------------------------------------

def lifted_field(pb: PeriodicProblem, w: np.ndarray):
    f = pb.interpolant(w)
    return lambda x: f(x[:, 3])


def four_d_phi(pb: PeriodicProblem, w: np.ndarray, gammas: Sequence[float], transverse_sites: int = 3,
               depth: int = 2) -> dict:
    """Evaluate the functional of the lifted factor on an S^3 x S^1 lattice.

    The circle axis reuses the reduced quadrature grid, so only the
    derivative and curvature evaluations differ between the two routes.
    """
    from .models import make_background
    bg = make_background("s3xs1", extent=pb.extent)
    calc = Calc(bg, depth=depth)
    m = transverse_sites
    lat = bg.lattice((m, m, m, pb.fine_nodes))
    geo = conformal.LatticeGeometry.build(calc, lat)
    rep = conformal.phi(conformal.ConformalFactorField(lifted_field(pb, w), geo), gammas)
    reduced = phi_value(pb, w, gammas)
    return {"phi_4d": rep.Phi, "phi_reduced": reduced,
            "rel_diff": abs(rep.Phi - reduced) / max(abs(reduced), 1e-300), "report": rep.to_dict()}


def four_d_el_residual(pb: PeriodicProblem, w: np.ndarray, gammas: Sequence[float], mu: float,
                       sites: int = 6, seed: int = 0) -> dict:
    """EL field of the lifted factor from finite-difference curvature of e^{2w} g.

    Sites are drawn away from the Hopf axes, where the chart is regular.  The
    fourth-order terms are Richardson-extrapolated from two step sizes.
    """
    from .models import make_background
    bg = make_background("s3xs1", extent=pb.extent)
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.uniform(0.5, 1.07, sites), rng.uniform(0, 2 * math.pi, sites),
                         rng.uniform(0, 2 * math.pi, sites), rng.uniform(0, pb.extent, sites)])
    wl = lifted_field(pb, w)
    g1p, g1m, g2, g3, g4 = gammas
    vol = pb.integrate(np.exp(4.0 * pb.up(w)))

    def field_at(factor):
        hc = conformal.hat_calc(Calc(bg, depth=3, factor=factor), wl)
        R = map_sites(hc.scalar, x, 8)
        lapR = map_sites(hc.laplacian(hc.scalar, ""), x, 8)
        Q = conformal.q_curvature(hc, x)["Q"] if g2 else 0.0
        return g2 * Q - g3 * lapR + 0.5 * g4 * R / math.sqrt(vol)

    F = (16.0 * field_at(1.0) - field_at(2.0)) / 15.0
    res = F - mu
    return {"residual_sup": sup(res), "field_scale": sup(F), "relative": sup(res) / max(sup(F), 1e-300),
            "sites": sites}
