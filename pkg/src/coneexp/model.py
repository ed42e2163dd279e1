"""Domain types shared by all modules.

Operators, kernels, cone geometry, homogeneous profiles, quadrature
configuration and exponent results.  All types are immutable after
construction and safe to share across threads.

JSON schema: each type serializes to a flat dict with the field names
below in lowercase snake case (``lambda``/``Lambda`` for the ellipticity
pair), plus a ``type`` tag.  This schema doubles as the CLI config
format.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import PchipInterpolator

# Operator kinds
FRACTIONAL = "fractional_laplacian"
PUCCI_PLUS = "pucci_plus"
PUCCI_MINUS = "pucci_minus"
ISAACS = "isaacs_finite"
OPERATOR_KINDS = (FRACTIONAL, PUCCI_PLUS, PUCCI_MINUS, ISAACS)

# Cone shapes
FULL_SPACE = "full_space"
HALF_SPACE = "half_space"
PLANAR_SECTOR = "planar_sector"
AXISYMMETRIC_CAP = "axisymmetric_cap"
CONE_SHAPES = (FULL_SPACE, HALF_SPACE, PLANAR_SECTOR, AXISYMMETRIC_CAP)

# Exponent result kinds
N_TILDE_PLUS = "n_tilde_plus"
N_TILDE_MINUS = "n_tilde_minus"
BETA_PLUS = "beta_plus"
BETA_MINUS = "beta_minus"
RESULT_KINDS = (N_TILDE_PLUS, N_TILDE_MINUS, BETA_PLUS, BETA_MINUS)


@dataclass(frozen=True, eq=False)
class AngularKernel:
    """Angular density of one -(N+2*alpha)-homogeneous kernel.

    ``density`` tabulates an even function on the unit sphere at uniform
    polar angles theta_k = (k + 1/2) * pi / n measured from the cone
    axis, so the kernel is K(y) = density(y/|y|) * |y|^(-N-2*alpha).
    Antipodal evenness density(sigma) = density(-sigma) is equivalent to
    the tabulation being symmetric under index reversal.  Evaluation
    between tabulated angles is piecewise linear.
    """

    density: np.ndarray
    a_index: int = 0
    b_index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "density", np.asarray(self.density, dtype=float))

    def evaluate(self, theta):
        """Density at polar angles ``theta`` (radians in [0, pi])."""
        n = self.density.size
        if n == 1:
            return np.full_like(np.asarray(theta, dtype=float), self.density[0])
        grid = (np.arange(n) + 0.5) * math.pi / n
        return np.interp(np.asarray(theta, dtype=float), grid, self.density)

    def to_dict(self):
        return {
            "type": "angular_kernel",
            "density": self.density.tolist(),
            "a_index": self.a_index,
            "b_index": self.b_index,
        }

    @staticmethod
    def from_dict(d):
        return AngularKernel(
            density=np.asarray(d["density"], dtype=float),
            a_index=int(d.get("a_index", 0)),
            b_index=int(d.get("b_index", 0)),
        )


def constant_kernel(value, a_index=0, b_index=0, n=8):
    """Isotropic angular kernel with constant density."""
    return AngularKernel(np.full(n, float(value)), a_index, b_index)


@dataclass(frozen=True, eq=False)
class OperatorSpec:
    """Which extremal operator to evaluate, with its ellipticity data.

    ``lam``/``Lam`` are the ellipticity constants (JSON keys ``lambda``
    and ``Lambda``), ``alpha`` the order in (0, 1).  ``kernels`` is the
    finite Isaacs family, each tagged with an (a, b) index pair; the
    operator is inf over a of sup over b of the per-kernel linear
    integrals.
    """

    kind: str
    lam: float
    Lam: float
    alpha: float
    kernels: Optional[tuple] = None

    def __post_init__(self):
        if self.kernels is not None:
            object.__setattr__(self, "kernels", tuple(self.kernels))

    @property
    def is_linear(self):
        return self.kind == FRACTIONAL

    def to_dict(self):
        d = {
            "type": "operator_spec",
            "kind": self.kind,
            "lambda": self.lam,
            "Lambda": self.Lam,
            "alpha": self.alpha,
            "kernels": None,
        }
        if self.kernels is not None:
            d["kernels"] = [k.to_dict() for k in self.kernels]
        return d

    @staticmethod
    def from_dict(d):
        kernels = d.get("kernels")
        if kernels is not None:
            kernels = tuple(AngularKernel.from_dict(k) for k in kernels)
        return OperatorSpec(
            kind=d["kind"],
            lam=float(d["lambda"]),
            Lam=float(d["Lambda"]),
            alpha=float(d["alpha"]),
            kernels=kernels,
        )


def fractional_laplacian(alpha, scale=1.0):
    """The operator u -> integral of delta(u,x,y)/|y|^(N+2a), scaled."""
    return OperatorSpec(FRACTIONAL, scale, scale, alpha)


def pucci_plus(lam, Lam, alpha):
    return OperatorSpec(PUCCI_PLUS, lam, Lam, alpha)


def pucci_minus(lam, Lam, alpha):
    return OperatorSpec(PUCCI_MINUS, lam, Lam, alpha)


@dataclass(frozen=True, eq=False)
class ConeSpec:
    """Geometry of the cone C_omega = {x != 0 : x/|x| in omega}.

    Shapes: the full space, a half space with inner normal ``axis``, a
    planar sector of given ``aperture`` (N=2 only) or an axisymmetric
    cap of polar half-angle ``theta0`` (N=3 only).  A half space is
    representable also as PlanarSector(pi) / AxisymmetricCap(pi/2);
    ``canonicalize`` maps it onto that representation.
    """

    dimension: int
    shape: str
    aperture: Optional[float] = None
    theta0: Optional[float] = None
    axis: Optional[tuple] = None

    def __post_init__(self):
        if self.axis is not None:
            object.__setattr__(self, "axis", tuple(float(a) for a in self.axis))

    def canonicalize(self) -> "ConeSpec":
        """Map HalfSpace onto its sector/cap representation."""
        if self.shape != HALF_SPACE:
            return ConeSpec(self.dimension, self.shape, self.aperture, self.theta0)
        if self.dimension == 2:
            return ConeSpec(2, PLANAR_SECTOR, aperture=math.pi)
        return ConeSpec(3, AXISYMMETRIC_CAP, theta0=math.pi / 2)

    @property
    def is_proper(self):
        return self.shape != FULL_SPACE

    def contained_in_half_space(self) -> bool:
        """Whether omega is contained in a closed half sphere."""
        c = self.canonicalize()
        if c.shape == PLANAR_SECTOR:
            return c.aperture <= math.pi + 1e-12
        if c.shape == AXISYMMETRIC_CAP:
            return c.theta0 <= math.pi / 2 + 1e-12
        return False

    def __eq__(self, other):
        if not isinstance(other, ConeSpec):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(json.dumps(self.to_dict(), sort_keys=True))

    def to_dict(self):
        return {
            "type": "cone_spec",
            "dimension": self.dimension,
            "shape": self.shape,
            "aperture": self.aperture,
            "theta0": self.theta0,
            "axis": list(self.axis) if self.axis is not None else None,
        }

    @staticmethod
    def from_dict(d):
        axis = d.get("axis")
        return ConeSpec(
            dimension=int(d["dimension"]),
            shape=d["shape"],
            aperture=d.get("aperture"),
            theta0=d.get("theta0"),
            axis=tuple(axis) if axis is not None else None,
        )


def planar_sector(aperture):
    return ConeSpec(2, PLANAR_SECTOR, aperture=float(aperture))


def axisymmetric_cap(theta0):
    return ConeSpec(3, AXISYMMETRIC_CAP, theta0=float(theta0))


def half_space(dimension=2, axis=None):
    if axis is None:
        axis = (0.0, 1.0) if dimension == 2 else (0.0, 0.0, 1.0)
    return ConeSpec(dimension, HALF_SPACE, axis=tuple(axis))


def full_space(dimension=2):
    return ConeSpec(dimension, FULL_SPACE)


def cone_angular_extent(cone: ConeSpec) -> float:
    """Length of the 1-D polar parametrization of omega."""
    c = cone.canonicalize()
    if c.shape == PLANAR_SECTOR:
        return c.aperture
    if c.shape == AXISYMMETRIC_CAP:
        return c.theta0
    # full space: whole circle in 2-D, whole polar range in 3-D
    return 2 * math.pi if c.dimension == 2 else math.pi


def cone_boundary_ends(cone: ConeSpec):
    """Which ends of the 1-D grid sit on the cone boundary."""
    c = cone.canonicalize()
    if c.shape == PLANAR_SECTOR:
        return (True, True)
    if c.shape == AXISYMMETRIC_CAP:
        return (False, True)
    return (False, False)


def angular_grid(cone: ConeSpec, n: int, grading: float) -> np.ndarray:
    """Node positions of the 1-D angular grid covering omega.

    ``n`` is the total node count including boundary nodes.  Nodes are
    clustered toward the cone boundary with a power warp whose strength
    grows as the boundary exponent ``grading`` shrinks, since profiles
    vanish like dist^grading there.
    """
    if n < 8:
        raise ValueError("angular grid needs at least 8 nodes")
    extent = cone_angular_extent(cone)
    lo_b, hi_b = cone_boundary_ends(cone)
    t = np.linspace(0.0, 1.0, n)
    q = min(3.0, max(2.0, 1.0 / max(grading, 0.25)))
    if lo_b and hi_b:
        tq = t**q
        s = tq / (tq + (1.0 - t) ** q)
    elif hi_b:
        s = 1.0 - (1.0 - t) ** q
        s /= s[-1] if s[-1] > 0 else 1.0
    else:
        s = t
    return extent * s


@dataclass(frozen=True, eq=False)
class HomogeneousProfile:
    """A beta-homogeneous function u(x) = f(x/|x|) |x|^(-beta) on a cone.

    ``samples`` are the values of the angular profile f at the nodes of
    ``angular_grid(cone, len(samples), boundary_grading)``; f vanishes
    at nodes on the cone boundary and identically outside omega.
    Evaluation between nodes is monotone piecewise-cubic, which
    reproduces nodal values exactly and preserves nonnegativity.
    """

    beta: float
    cone: ConeSpec
    samples: np.ndarray
    boundary_grading: float

    def __post_init__(self):
        object.__setattr__(self, "samples", np.asarray(self.samples, dtype=float))

    def grid(self) -> np.ndarray:
        return angular_grid(self.cone, self.samples.size, self.boundary_grading)

    def interpolator(self):
        grid = self.grid()
        cone = self.cone.canonicalize()
        if cone.shape == FULL_SPACE and cone.dimension == 2:
            # periodic angular coordinate: pad one wrap cell each side
            g = np.concatenate([grid[-2:] - 2 * math.pi, grid, grid[:2] + 2 * math.pi])
            v = np.concatenate([self.samples[-2:], self.samples, self.samples[:2]])
            return PchipInterpolator(g, v, extrapolate=False)
        return PchipInterpolator(grid, self.samples, extrapolate=False)

    def evaluate(self, theta):
        """Profile values at polar coordinates ``theta`` (0 outside omega)."""
        theta = np.asarray(theta, dtype=float)
        cone = self.cone.canonicalize()
        if cone.shape == FULL_SPACE and cone.dimension == 2:
            theta = np.mod(theta, 2 * math.pi)
        vals = self.interpolator()(theta)
        return np.nan_to_num(vals, nan=0.0, posinf=0.0, neginf=0.0)

    def sup(self) -> float:
        return float(np.max(self.samples))

    def to_dict(self):
        return {
            "type": "homogeneous_profile",
            "beta": self.beta,
            "cone": self.cone.to_dict(),
            "samples": self.samples.tolist(),
            "boundary_grading": self.boundary_grading,
        }

    @staticmethod
    def from_dict(d):
        return HomogeneousProfile(
            beta=float(d["beta"]),
            cone=ConeSpec.from_dict(d["cone"]),
            samples=np.asarray(d["samples"], dtype=float),
            boundary_grading=float(d["boundary_grading"]),
        )


def profile_from_callable(cone, beta, fn, n=64, grading=None, alpha=None):
    """Sample an angular function into a HomogeneousProfile.

    ``fn`` takes polar coordinates on the grid of omega.  Boundary nodes
    are forced to zero.
    """
    if grading is None:
        grading = alpha if alpha is not None else 0.5
    grid = angular_grid(cone, n, grading)
    vals = np.asarray(fn(grid), dtype=float)
    lo_b, hi_b = cone_boundary_ends(cone)
    if lo_b:
        vals[0] = 0.0
    if hi_b:
        vals[-1] = 0.0
    return HomogeneousProfile(beta, cone, vals, grading)


def constant_profile(cone, beta, n=64, grading=0.5):
    """Profile with f == 1 (full space) or a graded bump on a proper cone."""
    return profile_from_callable(cone, beta, lambda t: np.ones_like(t), n, grading)


@dataclass(frozen=True, eq=False)
class QuadratureConfig:
    """Singularity-splitting radii, grid sizes and target tolerance.

    ``r_min`` is the inner radial cutoff around y = 0 (discarded, with
    an O(r_min^(2-2*alpha)) bound); ``eta`` the radius of the balls
    B_eta(+-x) integrated in singularity-centered polar coordinates;
    ``r_max`` the radius beyond which the integrand is replaced by its
    asymptotic model (model error bounded and kept below tol/4, growing
    r_max per evaluated beta when needed).
    """

    r_min: float = 2e-4
    eta: float = 0.35
    r_max: float = 1e4
    n_radial: int = 120
    n_angular: int = 256
    n_azimuthal: int = 32
    tol: float = 5e-4

    def scaled(self, **kw):
        return replace(self, **kw)

    def refined(self, factor=2):
        return replace(
            self,
            r_min=self.r_min / factor**2,
            r_max=self.r_max * factor**2,
            n_radial=int(self.n_radial * factor),
            n_angular=int(self.n_angular * factor),
            n_azimuthal=int(self.n_azimuthal * factor),
        )

    def to_dict(self):
        return {
            "type": "quadrature_config",
            "r_min": self.r_min,
            "eta": self.eta,
            "r_max": self.r_max,
            "n_radial": self.n_radial,
            "n_angular": self.n_angular,
            "n_azimuthal": self.n_azimuthal,
            "tol": self.tol,
        }

    @staticmethod
    def from_dict(d):
        return QuadratureConfig(
            r_min=float(d.get("r_min", 2e-4)),
            eta=float(d.get("eta", 0.35)),
            r_max=float(d.get("r_max", 1e4)),
            n_radial=int(d.get("n_radial", 120)),
            n_angular=int(d.get("n_angular", 256)),
            n_azimuthal=int(d.get("n_azimuthal", 32)),
            tol=float(d.get("tol", 5e-4)),
        )


@dataclass(frozen=True, eq=False)
class ExponentResult:
    """A computed exponent with residual, bracket and grid provenance."""

    value: float
    residual: float
    bracket: tuple
    grid_meta: dict
    kind: str

    def to_dict(self):
        return {
            "type": "exponent_result",
            "value": self.value,
            "residual": self.residual,
            "bracket": list(self.bracket),
            "grid_meta": self.grid_meta,
            "kind": self.kind,
        }

    @staticmethod
    def from_dict(d):
        return ExponentResult(
            value=float(d["value"]),
            residual=float(d["residual"]),
            bracket=tuple(d["bracket"]),
            grid_meta=dict(d["grid_meta"]),
            kind=d["kind"],
        )


_TYPE_MAP = {
    "operator_spec": OperatorSpec,
    "angular_kernel": AngularKernel,
    "cone_spec": ConeSpec,
    "homogeneous_profile": HomogeneousProfile,
    "quadrature_config": QuadratureConfig,
    "exponent_result": ExponentResult,
}


def to_json(obj) -> str:
    return json.dumps(obj.to_dict(), sort_keys=True)


def from_json(text: str):
    d = json.loads(text)
    cls = _TYPE_MAP[d["type"]]
    return cls.from_dict(d)


def spec_key(obj) -> str:
    """Stable string key for caching (exact-match semantics)."""
    return json.dumps(obj.to_dict(), sort_keys=True)


# ---------------------------------------------------------------------------
# validation


def _validate_operator(op: OperatorSpec):
    out = []
    if op.kind not in OPERATOR_KINDS:
        out.append(f"kind: unknown operator kind {op.kind!r}")
        return out
    if not (0 < op.lam <= op.Lam):
        out.append("lambda/Lambda: requires 0 < lambda <= Lambda")
    if not (0 < op.alpha < 1):
        out.append("alpha: requires 0 < alpha < 1")
    if op.kind == FRACTIONAL and op.lam != op.Lam:
        out.append("lambda/Lambda: FractionalLaplacian requires lambda = Lambda")
    if op.kind == ISAACS:
        if not op.kernels:
            out.append("kernels: IsaacsFinite requires a nonempty kernel list")
        else:
            for i, k in enumerate(op.kernels):
                d = k.density
                if d.size and (d.min() < op.lam - 1e-12 or d.max() > op.Lam + 1e-12):
                    out.append(
                        f"kernels[{i}].density: values must lie in [lambda, Lambda]"
                    )
                if d.size and not np.allclose(d, d[::-1], rtol=0, atol=1e-12):
                    out.append(
                        f"kernels[{i}].density: must be even (symmetric tabulation)"
                    )
    elif op.kernels:
        out.append("kernels: only IsaacsFinite carries a kernel family")
    return out


def _validate_cone(cone: ConeSpec):
    out = []
    if cone.dimension < 2:
        out.append("dimension: requires N >= 2")
    if cone.shape not in CONE_SHAPES:
        out.append(f"shape: unknown cone shape {cone.shape!r}")
        return out
    if cone.shape == PLANAR_SECTOR:
        if cone.dimension != 2:
            out.append("shape: PlanarSector requires N=2")
        if cone.aperture is None or not (0 < cone.aperture < 2 * math.pi):
            out.append("aperture: PlanarSector requires aperture in (0, 2*pi)")
    if cone.shape == AXISYMMETRIC_CAP:
        if cone.dimension != 3:
            out.append("shape: AxisymmetricCap requires N=3")
        if cone.theta0 is None or not (0 < cone.theta0 < math.pi):
            out.append("theta0: AxisymmetricCap requires theta0 in (0, pi)")
    if cone.shape == HALF_SPACE:
        if cone.axis is None:
            out.append("axis: HalfSpace requires a unit axis vector")
        else:
            if len(cone.axis) != cone.dimension:
                out.append("axis: length must equal dimension")
            elif abs(np.linalg.norm(cone.axis) - 1.0) > 1e-9:
                out.append("axis: must be a unit vector")
    if cone.dimension > 3:
        out.append("dimension: only N in {2, 3} is supported")
    return out


def _validate_profile(p: HomogeneousProfile):
    out = []
    out.extend(f"cone.{v}" for v in _validate_cone(p.cone))
    if p.samples.size < 8:
        out.append("samples: needs at least 8 angular nodes")
        return out
    if np.any(p.samples < 0):
        out.append("samples: must be nonnegative everywhere")
    lo_b, hi_b = cone_boundary_ends(p.cone)
    if lo_b and p.samples[0] != 0.0:
        out.append("samples: f must vanish at the cone boundary node (start)")
    if hi_b and p.samples[-1] != 0.0:
        out.append("samples: f must vanish at the cone boundary node (end)")
    if not (0 < p.boundary_grading <= 1):
        out.append("boundary_grading: requires an exponent in (0, 1]")
    if not np.isfinite(p.beta):
        out.append("beta: must be finite")
    return out


def _validate_quadrature(q: QuadratureConfig):
    out = []
    if not (0 < q.r_min):
        out.append("r_min: must be positive")
    if not (q.r_min < q.eta):
        out.append("r_min/eta: requires r_min < eta")
    if not (q.eta < 1):
        out.append("eta: requires eta < 1")
    if not (1 < q.r_max):
        out.append("r_max: requires r_max > 1")
    for name, v in (("n_radial", q.n_radial), ("n_angular", q.n_angular),
                    ("n_azimuthal", q.n_azimuthal)):
        if v < 4:
            out.append(f"{name}: must be at least 4")
    if not (q.tol > 0):
        out.append("tol: must be positive")
    return out


def _validate_exponent(r: ExponentResult):
    out = []
    if r.kind not in RESULT_KINDS:
        out.append(f"kind: unknown result kind {r.kind!r}")
    if len(r.bracket) != 2:
        out.append("bracket: must be a pair")
    elif not (r.bracket[0] <= r.value <= r.bracket[1]):
        out.append("bracket: must enclose the value")
    if r.residual < 0:
        out.append("residual: must be nonnegative")
    return out


def validate(spec) -> list:
    """Return a list of invariant violations (empty iff spec is valid)."""
    if isinstance(spec, OperatorSpec):
        return _validate_operator(spec)
    if isinstance(spec, ConeSpec):
        return _validate_cone(spec)
    if isinstance(spec, HomogeneousProfile):
        return _validate_profile(spec)
    if isinstance(spec, QuadratureConfig):
        return _validate_quadrature(spec)
    if isinstance(spec, ExponentResult):
        return _validate_exponent(spec)
    if isinstance(spec, AngularKernel):
        d = spec.density
        out = []
        if d.size == 0:
            out.append("density: must be nonempty")
        elif not np.allclose(d, d[::-1], rtol=0, atol=1e-12):
            out.append("density: must be even (symmetric tabulation)")
        return out
    raise TypeError(f"validate() does not know type {type(spec).__name__}")
