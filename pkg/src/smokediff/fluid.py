"""2D incompressible smoke solver on a MAC-staggered grid.

Closed box, semi-Lagrangian advection, explicit viscosity, density-driven
buoyancy, and a conjugate-gradient pressure projection with homogeneous
Neumann walls. One step applies, in order: velocity self-advection, density
advection, velocity diffusion, buoyancy, projection.

Grid layout (dx = 1): u holds x-velocity on vertical faces, shape (H, W+1),
sample point of u[i, j] is (x=j, y=i+0.5). v holds y-velocity on horizontal
faces, shape (H+1, W), sample point (x=j+0.5, y=i). rho and p live at cell
centers (H, W). +y is "up": buoyancy accelerates v.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from smokediff.rng import Rng


class SolverError(RuntimeError):
    """Pressure solve failed to converge; carries the final residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class SimParams:
    size: tuple[int, int] = (64, 64)
    nu: float = 0.03
    eta: float = 0.5
    dt: float = 0.1
    dx: float = 1.0
    total_time: float = 40.0
    record_every: float = 1.0
    proj_tol: float = 1e-8
    proj_max_iter: int = 10000

    def __post_init__(self):
        if self.nu < 0 or self.eta < 0:
            raise ValueError("nu and eta must be non-negative")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.steps_per_record < 1 or abs(self.steps_per_record * self.dt - self.record_every) > 1e-9:
            raise ValueError(
                f"record_every={self.record_every} is not an integer multiple of dt={self.dt}"
            )

    @property
    def steps_per_record(self) -> int:
        return int(round(self.record_every / self.dt))

    @property
    def n_snapshots(self) -> int:
        n = self.total_time / self.record_every
        if abs(n - round(n)) > 1e-9:
            raise ValueError("total_time must be an integer multiple of record_every")
        return int(round(n))


@dataclass
class FluidState:
    u: np.ndarray  # (H, W+1)
    v: np.ndarray  # (H+1, W)
    rho: np.ndarray  # (H, W)
    p: np.ndarray  # (H, W)
    tau: float = 0.0

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.rho.shape

    def divergence(self) -> np.ndarray:
        return (self.u[:, 1:] - self.u[:, :-1]) + (self.v[1:, :] - self.v[:-1, :])

    def enforce_boundaries(self) -> None:
        self.u[:, 0] = 0.0
        self.u[:, -1] = 0.0
        self.v[0, :] = 0.0
        self.v[-1, :] = 0.0

    def copy(self) -> "FluidState":
        return FluidState(self.u.copy(), self.v.copy(), self.rho.copy(), self.p.copy(), self.tau)


@dataclass
class Trajectory:
    seed: int
    rho0: np.ndarray
    snapshots: list  # of Snapshot


@dataclass
class Snapshot:
    tau: float
    ux: np.ndarray  # cell-centered (H, W)
    uy: np.ndarray
    rho: np.ndarray


def init_scene(seed: int, params: SimParams) -> FluidState:
    """Still fluid with density made of 4..10 random Gaussian blobs, clamped to [0, 1]."""
    h, w = params.size
    rng = Rng(seed)
    n_blobs = rng.randint(4, 11)
    ys, xs = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    rho = np.zeros((h, w), dtype=np.float64)
    for _ in range(n_blobs):
        cx = rng.uniform() * w
        cy = rng.uniform() * h
        radius = h / 16.0 + rng.uniform() * (h / 4.0 - h / 16.0)
        amp = 0.5 + rng.uniform() * 0.5
        rho += amp * np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * radius**2))
    np.clip(rho, 0.0, 1.0, out=rho)
    return FluidState(
        u=np.zeros((h, w + 1), dtype=np.float64),
        v=np.zeros((h + 1, w), dtype=np.float64),
        rho=rho,
        p=np.zeros((h, w), dtype=np.float64),
        tau=0.0,
    )


def sample_bilinear(fld: np.ndarray, x: np.ndarray, y: np.ndarray, ox: float, oy: float) -> np.ndarray:
    """Bilinear interpolation of a grid whose [i, j] sample sits at (j+ox, i+oy).

    Query coordinates are clamped onto the sampled rectangle, so values never
    leave [min(fld), max(fld)].
    """
    nr, nc = fld.shape
    fx = np.clip(x - ox, 0.0, nc - 1.0)
    fy = np.clip(y - oy, 0.0, nr - 1.0)
    j0 = np.minimum(fx.astype(np.int64), nc - 2) if nc > 1 else np.zeros_like(fx, dtype=np.int64)
    i0 = np.minimum(fy.astype(np.int64), nr - 2) if nr > 1 else np.zeros_like(fy, dtype=np.int64)
    tx = fx - j0
    ty = fy - i0
    j1 = np.minimum(j0 + 1, nc - 1)
    i1 = np.minimum(i0 + 1, nr - 1)
    return (
        fld[i0, j0] * (1 - tx) * (1 - ty)
        + fld[i0, j1] * tx * (1 - ty)
        + fld[i1, j0] * (1 - tx) * ty
        + fld[i1, j1] * tx * ty
    )


_OFFSETS = {"u": (0.0, 0.5), "v": (0.5, 0.0), "center": (0.5, 0.5)}


def advect(fld: np.ndarray, u: np.ndarray, v: np.ndarray, dt: float, offset=(0.5, 0.5)) -> np.ndarray:
    """Semi-Lagrangian transport: backtrace each sample point through (u, v)
    and bilinearly interpolate, with backtraced positions clamped to the box."""
    ox, oy = offset
    nr, nc = fld.shape
    ys, xs = np.meshgrid(np.arange(nr) + oy, np.arange(nc) + ox, indexing="ij")
    u_here = sample_bilinear(u, xs, ys, *_OFFSETS["u"])
    v_here = sample_bilinear(v, xs, ys, *_OFFSETS["v"])
    # domain extents: x in [0, W], y in [0, H] with W = v.shape[1], H = u.shape[0]
    xb = np.clip(xs - dt * u_here, 0.0, float(v.shape[1]))
    yb = np.clip(ys - dt * v_here, 0.0, float(u.shape[0]))
    return sample_bilinear(fld, xb, yb, ox, oy)


def diffuse(fld: np.ndarray, nu: float, dt: float, wall: str = "value", dx: float = 1.0) -> np.ndarray:
    """Explicit 5-point Laplacian step: fld + nu*dt*lap(fld).

    wall="value" treats ghost cells as zero (velocity, no-slip walls);
    wall="gradient" replicates the edge (density, no-flux walls).
    Rejects nu*dt/dx^2 > 0.25 (explicit stability bound).
    """
    if nu == 0.0:
        return fld.copy()
    r = nu * dt / dx**2
    if r > 0.25:
        raise ValueError(f"diffusion number nu*dt/dx^2 = {r:.4g} exceeds stability bound 0.25")
    if wall == "value":
        fp = np.pad(fld, 1, mode="constant")
    elif wall == "gradient":
        fp = np.pad(fld, 1, mode="edge")
    else:
        raise ValueError(f"unknown wall treatment {wall!r}")
    lap = fp[:-2, 1:-1] + fp[2:, 1:-1] + fp[1:-1, :-2] + fp[1:-1, 2:] - 4.0 * fld
    return fld + r * lap


def apply_buoyancy(state: FluidState, eta: float, dt: float) -> FluidState:
    """Add eta * rho_face * dt to interior vertical faces (density-proportional lift)."""
    out = state.copy()
    rho_face = 0.5 * (state.rho[:-1, :] + state.rho[1:, :])
    out.v[1:-1, :] += eta * dt * rho_face
    out.enforce_boundaries()
    return out


def _laplacian_neumann(p: np.ndarray) -> np.ndarray:
    lap = np.zeros_like(p)
    lap[:, 1:] += p[:, :-1] - p[:, 1:]
    lap[:, :-1] += p[:, 1:] - p[:, :-1]
    lap[1:, :] += p[:-1, :] - p[1:, :]
    lap[:-1, :] += p[1:, :] - p[:-1, :]
    return lap


def solve_pressure_poisson(rhs: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """CG for lap(p) = rhs with Neumann walls; rhs is mean-centered by the caller.

    Converges on the max-norm residual. Raises SolverError when max_iter is hit.
    """
    b = -rhs  # solve A p = b with A = -lap (positive semidefinite)
    p = np.zeros_like(b)
    r = b.copy()
    if np.max(np.abs(r)) <= tol:
        return p
    d = r.copy()
    rs = float(np.sum(r * r))
    for _ in range(max_iter):
        ad = -_laplacian_neumann(d)
        alpha = rs / float(np.sum(d * ad))
        p += alpha * d
        r -= alpha * ad
        if np.max(np.abs(r)) <= tol:
            p -= p.mean()
            return p
        rs_new = float(np.sum(r * r))
        d = r + (rs_new / rs) * d
        rs = rs_new
    raise SolverError(
        f"pressure CG did not reach tol={tol:g} in {max_iter} iterations "
        f"(residual {np.max(np.abs(r)):g})",
        residual=float(np.max(np.abs(r))),
    )


def pressure_project(state: FluidState, tol: float = 1e-8, max_iter: int = 10000, dt: float = 1.0) -> FluidState:
    """Remove the divergent part of the velocity and store the pressure.

    Solves lap(p) = div(u)/dt, then subtracts dt*grad(p) from the faces. The
    rhs is mean-centered to satisfy the Neumann compatibility condition (the
    mean is already ~0 for a closed box) and p is returned mean-free.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    out = state.copy()
    rhs = out.divergence() / dt
    rhs -= rhs.mean()
    p = solve_pressure_poisson(rhs, tol=tol, max_iter=max_iter)
    out.u[:, 1:-1] -= dt * (p[:, 1:] - p[:, :-1])
    out.v[1:-1, :] -= dt * (p[1:, :] - p[:-1, :])
    out.enforce_boundaries()
    out.p = p
    return out


def step(state: FluidState, params: SimParams) -> FluidState:
    """One operator-split time step; advances tau by dt."""
    dt = params.dt
    u0, v0 = state.u, state.v
    u = advect(state.u, u0, v0, dt, offset=_OFFSETS["u"])
    v = advect(state.v, u0, v0, dt, offset=_OFFSETS["v"])
    rho = advect(state.rho, u0, v0, dt, offset=_OFFSETS["center"])
    if params.nu > 0:
        u = diffuse(u, params.nu, dt, wall="value", dx=params.dx)
        v = diffuse(v, params.nu, dt, wall="value", dx=params.dx)
    new = FluidState(u=u, v=v, rho=rho, p=state.p.copy(), tau=state.tau + dt)
    new.enforce_boundaries()
    new = apply_buoyancy(new, params.eta, dt)
    new = pressure_project(new, tol=params.proj_tol, max_iter=params.proj_max_iter, dt=dt)
    return new


def face_to_center(u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return 0.5 * (u[:, :-1] + u[:, 1:]), 0.5 * (v[:-1, :] + v[1:, :])


def simulate(seed: int, params: SimParams) -> Trajectory:
    """Run a full scene; snapshot cell-centered fields every record_every seconds."""
    state = init_scene(seed, params)
    rho0 = state.rho.copy()
    snapshots = []
    for k in range(1, params.n_snapshots + 1):
        for _ in range(params.steps_per_record):
            state = step(state, params)
        tau = k * params.record_every
        state.tau = tau  # pin accumulated dt roundoff at record points
        ux, uy = face_to_center(state.u, state.v)
        snapshots.append(Snapshot(tau=tau, ux=ux, uy=uy, rho=state.rho.copy()))
    return Trajectory(seed=seed, rho0=rho0, snapshots=snapshots)
