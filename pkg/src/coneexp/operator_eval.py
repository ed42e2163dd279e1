"""The reduced spherical operator G_beta.

For a beta-homogeneous u(x) = f(x/|x|) |x|^(-beta) the scale invariance
F(u)(x) = |x|^(-beta-2a) F(u)(x/|x|) reduces the operator to a map
G_beta acting on angular profiles; apply() evaluates it at the interior
grid nodes of omega.  A piecewise-linear frozen-policy linearization of
G_beta (assemble()) serves as the Jacobian surrogate inside the
eigenvalue and auxiliary-problem solvers.

Profiles are handled in the weighted form f = W * v (W carrying the
dist^g boundary behaviour, v smooth); both the true application and the
linearization share that representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GridMismatch
from .model import (
    FRACTIONAL,
    ISAACS,
    PUCCI_MINUS,
    PUCCI_PLUS,
    ConeSpec,
    HomogeneousProfile,
    OperatorSpec,
    QuadratureConfig,
    angular_grid,
    cone_angular_extent,
    cone_boundary_ends,
)
from .quadrature import (
    PowerLaw,
    _build_geometry,
    _isaacs_select,
    _tail_segments,
    boundary_weight,
    direction_at,
    evaluate_field,
    field_from_profile,
    polar_of_points,
)

__all__ = [
    "ProfileBasis",
    "ReducedOperator",
    "apply_reduced",
    "scale_invariance_check",
    "pucci_sandwich_check",
]


class ProfileBasis:
    """Degrees of freedom on the angular grid of a cone.

    Boundary nodes are pinned to zero; the node adjacent to each
    boundary end (one grading cell) is not an evaluation point but is
    slaved to its interior neighbour through the boundary-weight model,
    f(slave) = f(ref) * W(slave)/W(ref) (constant smooth part).  The
    remaining nodes carry the degrees of freedom and the reduced
    equations.
    """

    def __init__(self, cone: ConeSpec, n_nodes: int, grading: float):
        self.cone = cone.canonicalize()
        self.grading = float(grading)
        self.grid = angular_grid(self.cone, n_nodes, grading)
        self.extent = cone_angular_extent(self.cone)
        self.weight_fn = boundary_weight(self.cone, self.grading)
        self.w_nodes = self.weight_fn(self.grid)
        lo_b, hi_b = cone_boundary_ends(self.cone)
        n = self.grid.size
        kind = np.full(n, "dof", dtype=object)
        if lo_b:
            kind[0] = "zero"
            kind[1] = "slave"
        if hi_b:
            kind[-1] = "zero"
            kind[-2] = "slave"
        self.node_kind = kind
        self.dof_nodes = np.array([i for i in range(n) if kind[i] == "dof"])
        self.n_dof = self.dof_nodes.size
        self._dof_of_node = {int(j): k for k, j in enumerate(self.dof_nodes)}
        self.slave = {}
        if lo_b:
            self.slave[1] = (2, float(self.w_nodes[1] / self.w_nodes[2]))
        if hi_b:
            self.slave[n - 2] = (n - 3,
                                 float(self.w_nodes[n - 2] / self.w_nodes[n - 3]))
        # interior (positive-weight) nodes carry the smooth factor v
        self.v_ids = np.array([i for i in range(n) if self.w_nodes[i] > 0])
        self.v_grid = self.grid[self.v_ids]

    @property
    def eval_taus(self):
        return self.grid[self.dof_nodes]

    def samples_from_dof(self, u):
        u = np.asarray(u, dtype=float)
        if u.size != self.n_dof:
            raise GridMismatch(f"expected {self.n_dof} dof values, got {u.size}")
        samples = np.zeros(self.grid.size)
        samples[self.dof_nodes] = u
        for j, (ref, fac) in self.slave.items():
            samples[j] = fac * samples[ref]
        return samples

    def dof_from_samples(self, samples):
        samples = np.asarray(samples, dtype=float)
        if samples.size != self.grid.size:
            raise GridMismatch(
                f"expected {self.grid.size} samples, got {samples.size}"
            )
        return samples[self.dof_nodes].copy()

    def profile(self, u_dof, beta) -> HomogeneousProfile:
        return HomogeneousProfile(beta, self.cone,
                                  self.samples_from_dof(u_dof), self.grading)

    def locate(self, tau):
        """Represent f(tau) as w_lo*f[j_lo] + w_hi*f[j_hi].

        Piecewise linear in the smooth factor v = f/W with constant
        extension beyond the outermost interior nodes, scaled back by
        the boundary weight; mirrors the engine's profile model.
        """
        tau = np.asarray(tau, dtype=float)
        W_t = self.weight_fn(tau)
        vg = self.v_grid
        pos = np.clip(np.searchsorted(vg, tau) - 1, 0, vg.size - 2)
        width = vg[pos + 1] - vg[pos]
        s = np.clip((tau - vg[pos]) / width, 0.0, 1.0)
        j_lo = self.v_ids[pos]
        j_hi = self.v_ids[pos + 1]
        w_lo = W_t * (1.0 - s) / self.w_nodes[j_lo]
        w_hi = W_t * s / self.w_nodes[j_hi]
        dead = W_t <= 0
        if np.any(dead):
            w_lo = np.where(dead, 0.0, w_lo)
            w_hi = np.where(dead, 0.0, w_hi)
        return j_lo, w_lo, j_hi, w_hi


@dataclass
class _NodeGeometry:
    geo: object
    loc_plus: tuple
    loc_minus: tuple
    ball_locs: list
    tail_loc: tuple
    probe_locs: tuple


class ReducedOperator:
    """G_beta on the angular grid of a cone for a fixed operator.

    apply() evaluates the true operator (weighted monotone-cubic
    profile interpolation); assemble() builds the weighted
    piecewise-linear frozen-policy matrix used as a Jacobian surrogate.
    Geometry is cached per evaluation node, so repeated applications
    for the same beta are cheap.
    """

    def __init__(self, op: OperatorSpec, cone: ConeSpec, beta: float,
                 cfg: QuadratureConfig, basis: ProfileBasis):
        self.op = op
        self.cone = cone.canonicalize()
        self.beta = float(beta)
        self.cfg = cfg
        self.basis = basis
        if not (-2 * op.alpha < beta < self.cone.dimension):
            from .errors import BetaOutOfRange
            raise BetaOutOfRange(
                f"beta={beta} outside (-2*alpha, N)="
                f"({-2 * op.alpha}, {self.cone.dimension})"
            )
        self._node_geo: dict = {}

    # -- geometry -------------------------------------------------------
    def _geometry(self, k) -> _NodeGeometry:
        ng = self._node_geo.get(k)
        if ng is not None:
            return ng
        tau = self.basis.eval_taus[k]
        x = direction_at(self.cone, tau)
        geo = _build_geometry(x, self.cfg, self.cone, PowerLaw(self.beta),
                              self.op.alpha)
        locate = self.basis.locate
        loc_p = locate(geo.tau_plus)
        loc_m = locate(geo.tau_minus)
        ball_locs = [(locate(b.tau_plus), locate(b.tau_minus))
                     for b in geo.balls]
        tail_loc = (locate(geo.tail_sigma_tau), locate(geo.tail_sigma_tau_opp))
        probe_locs = []
        for rp in (geo.r_p1, geo.r_p2):
            Pp = geo.x[None, :] + rp * geo.dirs
            Pm = geo.x[None, :] - rp * geo.dirs
            _, taup = polar_of_points(Pp, self.cone)
            _, taum = polar_of_points(Pm, self.cone)
            probe_locs.append((locate(taup), locate(taum)))
        ng = _NodeGeometry(geo=geo, loc_plus=loc_p, loc_minus=loc_m,
                           ball_locs=ball_locs, tail_loc=tail_loc,
                           probe_locs=tuple(probe_locs))
        self._node_geo[k] = ng
        return ng

    # -- true application ------------------------------------------------
    def apply_profile(self, profile: HomogeneousProfile) -> np.ndarray:
        """G_beta[f] at the evaluation nodes (true interpolation path)."""
        if profile.samples.size != self.basis.grid.size:
            raise GridMismatch(
                f"profile has {profile.samples.size} samples; "
                f"basis expects {self.basis.grid.size}"
            )
        if profile.beta != self.beta:
            raise GridMismatch("profile.beta must match the reduced operator")
        field = field_from_profile(profile)
        out = np.empty(self.basis.n_dof)
        for k in range(self.basis.n_dof):
            ng = self._geometry(k)
            x = direction_at(self.cone, self.basis.eval_taus[k])
            si = evaluate_field(field, x, self.op, self.cfg, geometry=ng.geo)
            out[k] = si.total()
        return out

    def apply_dof(self, u_dof) -> np.ndarray:
        return self.apply_profile(self.basis.profile(u_dof, self.beta))

    # -- weighted piecewise-linear frozen-policy matrix -------------------
    @staticmethod
    def _loc_values(samples, loc):
        j_lo, w_lo, j_hi, w_hi = loc
        return samples[j_lo] * w_lo + samples[j_hi] * w_hi

    def _policy_weights(self, delta, kernel=None, kang=None):
        op = self.op
        if op.kind == FRACTIONAL:
            return np.full_like(delta, op.lam)
        if op.kind == PUCCI_PLUS:
            return np.where(delta > 0, op.Lam, op.lam)
        if op.kind == PUCCI_MINUS:
            return np.where(delta > 0, op.lam, op.Lam)
        return op.kernels[kernel].evaluate(kang)

    def assemble(self, u_dof) -> np.ndarray:
        """Matrix of the PL-interpolated operator, policy frozen at u."""
        basis = self.basis
        samples = basis.samples_from_dof(u_dof)
        n = basis.n_dof
        A = np.zeros((n, n))
        alpha = self.op.alpha
        isaacs = self.op.kind == ISAACS

        node_dof = np.full(basis.grid.size, -1, dtype=int)
        node_fac = np.zeros(basis.grid.size)
        for j in range(basis.grid.size):
            kd = basis.node_kind[j]
            if kd == "dof":
                node_dof[j] = basis._dof_of_node[j]
                node_fac[j] = 1.0
            elif j in basis.slave:
                ref, fac = basis.slave[j]
                node_dof[j] = basis._dof_of_node[ref]
                node_fac[j] = fac

        def scatter(row, loc, weights):
            for jj, ww in ((loc[0], weights * loc[1]),
                           (loc[2], weights * loc[3])):
                dd = node_dof[jj]
                good = (dd >= 0) & (ww != 0)
                if np.any(good):
                    np.add.at(row, dd[good], ww[good] * node_fac[jj][good])

        for k in range(n):
            ng = self._geometry(k)
            geo = ng.geo
            u0 = samples[basis.dof_nodes[k]]

            tp_pow = geo.t_plus ** (-self.beta)
            tm_pow = geo.t_minus ** (-self.beta)
            up = self._loc_values(samples, ng.loc_plus) * tp_pow
            um = self._loc_values(samples, ng.loc_minus) * tm_pow
            d_core = (up - u0) + (um - u0)

            ball_data = []
            for b, (loc_bp, loc_bm) in zip(geo.balls, ng.ball_locs):
                btp = b.t_plus ** (-self.beta)
                btm = b.t_minus ** (-self.beta)
                bup = self._loc_values(samples, loc_bp) * btp
                bum = self._loc_values(samples, loc_bm) * btm
                ball_data.append((b, loc_bp, loc_bm, btp, btm,
                                  (bup - u0) + (bum - u0)))

            def probe_delta(rp, loc_pair):
                loc_pp, loc_pm = loc_pair
                Pp = geo.x[None, :] + rp * geo.dirs
                Pm = geo.x[None, :] - rp * geo.dirs
                tpv = np.sqrt(np.sum(Pp * Pp, axis=-1)) ** (-self.beta)
                tmv = np.sqrt(np.sum(Pm * Pm, axis=-1)) ** (-self.beta)
                upv = self._loc_values(samples, loc_pp) * tpv
                umv = self._loc_values(samples, loc_pm) * tmv
                return ((upv - u0) + (umv - u0)) / rp**2, tpv, tmv

            q1, t1p, t1m = probe_delta(geo.r_p1, ng.probe_locs[0])
            q2, t2p, t2m = probe_delta(geo.r_p2, ng.probe_locs[1])
            q0 = (4.0 * q1 - q2) / 3.0
            m_in = geo.r_lo ** (2 - 2 * alpha) / (2 - 2 * alpha)

            coeff, p_inf = PowerLaw(self.beta).tail()
            av_sig = self._loc_values(samples, ng.tail_loc[0])
            av_opp = self._loc_values(samples, ng.tail_loc[1])
            A_dir = coeff * (av_sig + av_opp)
            B = 2.0 * u0
            JA_p, JB_p, JA_n, JB_n = _tail_segments(A_dir, B, p_inf, alpha,
                                                    geo.r_hi)

            kernels = range(len(self.op.kernels)) if isaacs else (None,)
            rows = []
            totals = []
            for ker in kernels:
                row = np.zeros(n)
                diag = 0.0
                wq = self._policy_weights(d_core, ker, geo.kang_core)
                wfull = geo.w_core * wq
                scatter(row, ng.loc_plus, wfull * tp_pow)
                scatter(row, ng.loc_minus, wfull * tm_pow)
                diag += -2.0 * float(np.sum(wfull))
                total = float(np.sum(wfull * d_core))
                for b, loc_bp, loc_bm, btp, btm, d_ball in ball_data:
                    wq_b = self._policy_weights(d_ball, ker, b.kang)
                    wb = b.w * wq_b
                    scatter(row, loc_bp, wb * btp)
                    scatter(row, loc_bm, wb * btm)
                    diag += -2.0 * float(np.sum(wb))
                    total += float(np.sum(wb * d_ball))
                if self.op.kind == PUCCI_PLUS:
                    wpos, wneg = self.op.Lam, self.op.lam
                elif self.op.kind == PUCCI_MINUS:
                    wpos, wneg = self.op.lam, self.op.Lam
                elif isaacs:
                    dens = self.op.kernels[ker].evaluate(geo.tail_kang)
                    wpos = wneg = dens
                else:
                    wpos = wneg = self.op.lam
                dTdA = (wpos * JA_p + wneg * JA_n) * geo.tail_w
                dTdB = -(wpos * JB_p + wneg * JB_n) * geo.tail_w
                scatter(row, ng.tail_loc[0], coeff * dTdA)
                scatter(row, ng.tail_loc[1], coeff * dTdA)
                diag += 2.0 * float(np.sum(dTdB))
                total += float(A_dir @ dTdA) + B * float(np.sum(dTdB))
                # inner correction (quadratic model of delta near y = 0)
                wq0 = self._policy_weights(q0, ker, geo.tail_kang)
                wi = geo.tail_w * wq0 * m_in
                c1 = 4.0 / (3.0 * geo.r_p1**2)
                c2 = -1.0 / (3.0 * geo.r_p2**2)
                scatter(row, ng.probe_locs[0][0], wi * c1 * t1p)
                scatter(row, ng.probe_locs[0][1], wi * c1 * t1m)
                scatter(row, ng.probe_locs[1][0], wi * c2 * t2p)
                scatter(row, ng.probe_locs[1][1], wi * c2 * t2m)
                diag += -2.0 * (c1 + c2) * float(np.sum(wi))
                total += float(np.sum(wi * q0))
                row[k] += diag
                rows.append(row)
                totals.append(total)
            if isaacs:
                sel = _isaacs_select(self.op, totals)
                A[k, :] = rows[sel]
            else:
                A[k, :] = rows[0]
        return A


def apply_reduced(op, cone, beta, cfg, profile_or_samples,
                  basis: Optional[ProfileBasis] = None,
                  grading: Optional[float] = None):
    """One-shot helper: G_beta[f] at interior nodes.

    Accepts a HomogeneousProfile or raw samples on the basis grid.
    """
    cone = cone.canonicalize()
    if isinstance(profile_or_samples, HomogeneousProfile):
        profile = profile_or_samples
        n = profile.samples.size
        grading = profile.boundary_grading
    else:
        samples = np.asarray(profile_or_samples, dtype=float)
        n = samples.size
        grading = grading if grading is not None else op.alpha
        profile = HomogeneousProfile(beta, cone, samples, grading)
    if basis is None:
        basis = ProfileBasis(cone, n, grading)
    R = ReducedOperator(op, cone, beta, cfg, basis)
    return R.apply_profile(profile), R


def scale_invariance_check(op, cone, profile: HomogeneousProfile, r: float,
                           cfg: QuadratureConfig, n_sample=7):
    """max over sample directions of |F(u)(re) - r^(-b-2a) F(u)(e)|.

    Both sides evaluated by direct quadrature, no homogeneity reduction.
    """
    cone = cone.canonicalize()
    field = field_from_profile(profile)
    extent = cone_angular_extent(cone)
    taus = np.linspace(0.15 * extent, 0.85 * extent, n_sample)
    worst = 0.0
    scale = r ** (-profile.beta - 2 * op.alpha)
    for tau in taus:
        e = direction_at(cone, tau)
        v1 = evaluate_field(field, r * e, op, cfg).total()
        v0 = evaluate_field(field, e, op, cfg).total()
        worst = max(worst, abs(v1 - scale * v0))
    return worst


def pucci_sandwich_check(isaacs_op: OperatorSpec, profile_or_samples, beta,
                         cone, cfg, grading=None):
    """(gapMinus, gapPlus) = min(Isaacs - M-), min(M+ - Isaacs) over nodes."""
    from .model import pucci_minus, pucci_plus
    cone = cone.canonicalize()
    vals = {}
    basis = None
    for name, op in (
        ("isaacs", isaacs_op),
        ("minus", pucci_minus(isaacs_op.lam, isaacs_op.Lam, isaacs_op.alpha)),
        ("plus", pucci_plus(isaacs_op.lam, isaacs_op.Lam, isaacs_op.alpha)),
    ):
        out, R = apply_reduced(op, cone, beta, cfg, profile_or_samples,
                               basis=basis, grading=grading)
        basis = R.basis
        vals[name] = out
    gap_minus = float(np.min(vals["isaacs"] - vals["minus"]))
    gap_plus = float(np.min(vals["plus"] - vals["isaacs"]))
    return gap_minus, gap_plus
