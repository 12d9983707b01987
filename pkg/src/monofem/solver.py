"""Implicit Euler time marching with a Newton-Galerkin step solver.

Each timestep solves the nonlinear P1 system for (u^n, w^n) with Newton's
method; the coupled 2N x 2N linearized system is assembled with exact
(degree-4) quadrature and solved either by sparse LU or by GMRES
preconditioned with a frozen LU factorization, both under the same
relative-residual contract.
"""

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from dataclasses import dataclass, field

from . import ionic
from .assembly import ConductivityTensor, DiscreteOperators, l2_project
from .mesh import mesh_chain

__all__ = [
    "SolverError",
    "NewtonError",
    "StateField",
    "NewtonConfig",
    "NewtonRecord",
    "TrajectorySolution",
    "sparse_solve",
    "newton_step",
    "newton_solve",
    "time_march",
    "DirectSolver",
    "FrozenLUSolver",
]

#: relative residual every linear backend must achieve
LINEAR_RESIDUAL_RTOL = 1e-10

#: increments below ~100 eps * solution scale carry no information; the
#: Newton loop accepts there even if the configured tolerance is smaller
_ROUNDOFF_FACTOR = 100.0 * np.finfo(float).eps


class SolverError(RuntimeError):
    pass


class NewtonError(SolverError):
    """Newton iteration failed to converge within max_iterations."""

    def __init__(self, message, step=None, time=None):
        super().__init__(message)
        self.step = step
        self.time = time


@dataclass
class StateField:
    """Nodal coefficient vectors of (u, w) on a mesh at one time instant."""

    mesh: object
    u: np.ndarray
    w: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        nv = self.mesh.num_vertices
        if len(self.u) != nv or len(self.w) != nv:
            raise SolverError("state vector length does not match the mesh")


@dataclass
class NewtonConfig:
    """Stopping rule of the per-step Newton iteration.

    mode "increment_tolerance": stop when the H1 norm of du plus the L2
    norm of dw drops below `tol`.  mode "estimator_balance": stop when the
    linearization indicator is at most `sigma` times the space indicator.
    """

    mode: str = "increment_tolerance"
    tol: float = 1e-14
    sigma: float = 0.1
    max_iterations: int = 30

    def __post_init__(self):
        if self.mode not in ("increment_tolerance", "estimator_balance"):
            raise ValueError(f"unknown Newton stopping mode {self.mode!r}")
        if self.mode == "increment_tolerance" and not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.mode == "estimator_balance" and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass
class NewtonRecord:
    """History of one timestep: iterate count, per-iterate increment norms,
    and per-iterate (linearization, space) indicators in balance mode."""

    iterations: int = 0
    increments: list = field(default_factory=list)
    gammas: list = field(default_factory=list)
    etas: list = field(default_factory=list)


class DirectSolver:
    """Sparse LU factorization per solve."""

    def __init__(self, permc_spec="MMD_AT_PLUS_A"):
        self.permc_spec = permc_spec

    def solve(self, A, b):
        try:
            lu = spla.splu(A.tocsc(), permc_spec=self.permc_spec)
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        x = lu.solve(b)
        _check_residual(A, x, b)
        return x


class FrozenLUSolver:
    """GMRES preconditioned with a frozen LU of an earlier system matrix.

    The Newton matrices of neighbouring steps differ only in the reaction
    blocks, so one factorization preconditions many solves; the factor is
    refreshed whenever GMRES stalls or the residual contract is violated.
    """

    def __init__(self, permc_spec="MMD_AT_PLUS_A", max_krylov=40):
        self.permc_spec = permc_spec
        self.max_krylov = max_krylov
        self._lu = None
        self.factorizations = 0

    def _refactor(self, A):
        try:
            self._lu = spla.splu(A.tocsc(), permc_spec=self.permc_spec)
        except RuntimeError as exc:
            raise SolverError(f"sparse factorization failed: {exc}") from exc
        self.factorizations += 1

    def solve(self, A, b):
        bnorm = np.linalg.norm(b)
        if bnorm == 0.0:
            return np.zeros_like(b)
        if self._lu is None:
            self._refactor(A)
        M = spla.LinearOperator(A.shape, self._lu.solve)
        x, info = spla.gmres(A, b, M=M, rtol=1e-12, atol=0.0,
                             restart=self.max_krylov, maxiter=2)
        if info != 0 or not _residual_ok(A, x, b, bnorm):
            self._refactor(A)
            x = self._lu.solve(b)
            _check_residual(A, x, b)
        return x


def _residual_ok(A, x, b, bnorm=None):
    if bnorm is None:
        bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return not np.any(x)
    return np.linalg.norm(A @ x - b) <= LINEAR_RESIDUAL_RTOL * bnorm


def _check_residual(A, x, b):
    if not np.all(np.isfinite(x)):
        raise SolverError("linear solve produced non-finite values "
                          "(singular matrix?)")
    if not _residual_ok(A, x, b):
        raise SolverError("linear solve missed the residual contract")


def sparse_solve(A, b):
    """Solve A x = b by sparse LU; guarantees |Ax-b| <= 1e-10 |b|."""
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    if A.shape[0] != A.shape[1]:
        raise SolverError("matrix must be square")
    if b.shape != (A.shape[0],):
        raise SolverError("right-hand side length does not match the matrix")
    return DirectSolver().solve(A, b)


def _assemble_newton_system(ops, p, u_prev, w_prev, u_it, w_it, tau,
                            reactions=True):
    """Coupled linear system of one Newton step, linearized at (u_it, w_it).

    All reaction integrals are evaluated pointwise at degree-4 quadrature,
    which is exact here (cubic f times a linear test function), so the
    fixed point of the iteration is the exact implicit-Euler P1 solution
    and the convergence is genuinely quadratic.
    """
    mass_dt = ops.mass * (1.0 / tau)
    rhs1 = ops.mass @ (u_prev / tau)
    rhs2 = ops.mass @ (w_prev / tau)
    if not reactions:
        A = sp.bmat([[mass_dt + ops.stiffness, None], [None, mass_dt]],
                    format="csc")
        return A, np.concatenate([rhs1, rhs2])

    rule = ops.rule4
    u_q = ops.field_at(u_it, rule)
    w_q = ops.field_at(w_it, rule)
    r = ionic.react(u_q, w_q, p)
    A11 = mass_dt + ops.stiffness + ops.weighted_mass(r.f_u, rule)
    A12 = ops.weighted_mass(r.f_w, rule)
    A21 = ops.weighted_mass(r.g_u, rule)
    A22 = mass_dt + ops.weighted_mass(r.g_w, rule)
    rhs1 += ops.load(r.f_u * u_q + r.f_w * w_q - r.f, rule)
    rhs2 += ops.load(r.g_u * u_q + r.g_w * w_q - r.g, rule)
    A = sp.bmat([[A11, A12], [A21, A22]], format="csc")
    return A, np.concatenate([rhs1, rhs2])


def newton_step(prev, iterate, tau, p, conductivity=None, ops=None,
                linear=None):
    """One Newton update for the implicit Euler step from `prev`.

    `iterate` is the current linearization point; returns the next iterate
    at time prev.time + tau.
    """
    if iterate.mesh is not prev.mesh:
        raise SolverError("previous state and iterate live on different "
                          "meshes")
    if not tau > 0:
        raise SolverError("tau must be positive")
    if ops is None:
        conductivity = conductivity or ConductivityTensor.scalar(p.M_scalar)
        ops = DiscreteOperators(prev.mesh, conductivity)
    if linear is None:
        linear = DirectSolver()
    A, rhs = _assemble_newton_system(ops, p, prev.u, prev.w,
                                     iterate.u, iterate.w, tau)
    x = linear.solve(A, rhs)
    nv = prev.mesh.num_vertices
    return StateField(prev.mesh, x[:nv], x[nv:], prev.time + tau)


def _roundoff_floor(ops, u, w):
    return _ROUNDOFF_FACTOR * (1.0 + ops.h1_norm(u) + ops.l2_norm(w))


def newton_solve(prev, tau, p, cfg, conductivity=None, ops=None, linear=None,
                 hook=None, record_states=False, reactions=True):
    """Newton iteration for one implicit Euler step.

    Starts from the previous accepted state.  In balance mode, `hook` must
    map (prev, (iterate_{k-1}, iterate_k), tau) to the pair (linearization
    indicator, space indicator) for the stopping test.

    Returns (accepted state, NewtonRecord) or, with record_states=True,
    (state, record, [iterate_0, ..., iterate_K]).
    """
    if ops is None:
        conductivity = conductivity or ConductivityTensor.scalar(p.M_scalar)
        ops = DiscreteOperators(prev.mesh, conductivity)
    if linear is None:
        linear = DirectSolver()
    if cfg.mode == "estimator_balance" and hook is None:
        from .estimators import make_balance_hook
        hook = make_balance_hook(p, ops=ops)

    nv = prev.mesh.num_vertices
    cur = StateField(prev.mesh, prev.u.copy(), prev.w.copy(),
                     prev.time + tau)
    rec = NewtonRecord()
    states = [StateField(prev.mesh, cur.u.copy(), cur.w.copy(), cur.time)]
    inc_prev = np.inf
    for k in range(1, cfg.max_iterations + 1):
        A, rhs = _assemble_newton_system(ops, p, prev.u, prev.w,
                                         cur.u, cur.w, tau,
                                         reactions=reactions)
        x = linear.solve(A, rhs)
        last = cur
        cur = StateField(prev.mesh, x[:nv], x[nv:], prev.time + tau)
        inc = ops.h1_norm(cur.u - last.u) + ops.l2_norm(cur.w - last.w)
        rec.increments.append(inc)
        rec.iterations = k
        if record_states:
            states.append(cur)

        floor = _roundoff_floor(ops, cur.u, cur.w)
        stagnated = inc < 1e-8 and inc >= inc_prev
        if cfg.mode == "increment_tolerance":
            if inc < cfg.tol or inc < floor or stagnated:
                break
        else:
            gamma, eta = hook(prev, (last, cur), tau)
            rec.gammas.append(gamma)
            rec.etas.append(eta)
            if gamma <= cfg.sigma * eta or inc < floor or stagnated:
                break
        inc_prev = inc
    else:
        raise NewtonError(
            f"Newton did not converge in {cfg.max_iterations} iterations "
            f"(last increment {rec.increments[-1]:.3e})",
            time=prev.time + tau)

    if record_states:
        return cur, rec, states
    return cur, rec


class TrajectorySolution:
    """Accepted states of a full time march plus per-step Newton history.

    `U` and `W` have shape (N+1, nv); row n holds the state at times[n].
    `penultimate[n]` (when stored) is the next-to-last Newton iterate of
    step n, which the a posteriori indicators of the linearized scheme
    need; index 0 is None.
    """

    def __init__(self, mesh, times, U, W, params, newton=None,
                 penultimate=None, tau=None, initial=None):
        self.mesh = mesh
        self.times = np.asarray(times, dtype=float)
        self.U = U
        self.W = W
        self.params = params
        self.newton = newton or []
        self.penultimate = penultimate
        self.tau = tau
        self.initial = initial   # the (u0, w0) callables the march projected
        if self.times[0] != 0.0 or np.any(np.diff(self.times) <= 0):
            raise SolverError("times must start at 0 and increase strictly")
        if U.shape != (len(self.times), mesh.num_vertices):
            raise SolverError("state array shape does not match times/mesh")

    @property
    def num_steps(self):
        return len(self.times) - 1

    def state(self, n):
        return StateField(self.mesh, self.U[n], self.W[n],
                          float(self.times[n]))

    def newton_counts(self):
        return np.array([r.iterations for r in self.newton], dtype=int)

    def save(self, path):
        """Checkpoint to a .npz archive; see README for the key layout."""
        if self.mesh.base_n is None:
            raise SolverError("only structured meshes (unit_square_mesh + "
                              "refinements) can be checkpointed")
        p = self.params
        np.savez_compressed(
            path,
            format_version=1,
            base_n=self.mesh.base_n,
            levels=self.mesh.levels,
            times=self.times,
            U=self.U,
            W=self.W,
            tau=self.tau if self.tau is not None else np.nan,
            params=np.array([p.A, p.a, p.eps, p.M_scalar]),
            newton_iterations=self.newton_counts(),
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            base_n = int(data["base_n"])
            levels = int(data["levels"])
            mesh = mesh_chain(base_n, levels)[-1]
            A, a, eps, M = data["params"]
            params = ionic.AlievPanfilovParams(A=float(A), a=float(a),
                                               eps=float(eps),
                                               M_scalar=float(M))
            tau = float(data["tau"])
            newton = [NewtonRecord(iterations=int(k))
                      for k in data["newton_iterations"]]
            return cls(mesh, data["times"], data["U"], data["W"], params,
                       newton=newton, tau=None if np.isnan(tau) else tau)


def time_march(mesh, p, tau, t_end, cfg=None, conductivity=None,
               initial=None, transfer=None, reactions=True,
               store_penultimate=True, linear_solver="direct"):
    """March the monodomain system from its projected initial data to t_end.

    Parameters
    ----------
    mesh : TriMesh
    p : AlievPanfilovParams
    tau : float
        Uniform timestep; must divide t_end.
    t_end : float
    cfg : NewtonConfig, optional
    conductivity : ConductivityTensor, optional
        Defaults to the scalar p.M_scalar.
    initial : pair of callables (x, y) -> values, optional
        Defaults to the Gaussian excitation of :func:`ionic.initial_data`;
        both components are taken into V_h by L2 projection.
    transfer : callable, optional
        Hook mapping the accepted state of step n-1 to the space of step n.
        With a single fixed mesh this is the identity (the default).
    reactions : bool
        Diagnostic switch; False marches the pure Neumann heat equation.
    store_penultimate : bool
        Keep the next-to-last Newton iterate of every step (needed by the
        linearization-aware indicators; off for large reference runs).
    linear_solver : "direct", "frozen-lu", or a solver instance
    """
    if cfg is None:
        cfg = NewtonConfig()
    if not tau > 0 or not t_end > 0:
        raise SolverError("tau and t_end must be positive")
    N = int(round(t_end / tau))
    if N < 1 or abs(N * tau - t_end) > 1e-9 * max(1.0, t_end):
        raise SolverError(f"tau={tau} does not divide t_end={t_end}")

    conductivity = conductivity or ConductivityTensor.scalar(p.M_scalar)
    ops = DiscreteOperators(mesh, conductivity)
    if isinstance(linear_solver, str):
        linear = {"direct": DirectSolver,
                  "frozen-lu": FrozenLUSolver}[linear_solver]()
    else:
        linear = linear_solver
    hook = None
    if cfg.mode == "estimator_balance":
        from .estimators import make_balance_hook
        hook = make_balance_hook(p, ops=ops)

    if initial is None:
        fu0 = lambda x, y: ionic.initial_data(x, y)[0]
        fw0 = lambda x, y: ionic.initial_data(x, y)[1]
    else:
        fu0, fw0 = initial

    nv = mesh.num_vertices
    times = np.linspace(0.0, t_end, N + 1)
    U = np.empty((N + 1, nv))
    W = np.empty((N + 1, nv))
    U[0] = l2_project(mesh, fu0, mass=ops.mass)
    W[0] = l2_project(mesh, fw0, mass=ops.mass)

    newton = []
    penultimate = [None] * (N + 1) if store_penultimate else None
    state = StateField(mesh, U[0], W[0], 0.0)
    for n in range(1, N + 1):
        if transfer is not None:
            state = transfer(state)
        try:
            state, rec, states = newton_solve(
                state, tau, p, cfg, ops=ops, linear=linear, hook=hook,
                record_states=True, reactions=reactions)
        except NewtonError as exc:
            raise NewtonError(f"step {n} (t={times[n]:.6g}): {exc}",
                              step=n, time=times[n]) from exc
        U[n] = state.u
        W[n] = state.w
        newton.append(rec)
        if store_penultimate:
            penultimate[n] = (states[-2].u, states[-2].w)

    return TrajectorySolution(mesh, times, U, W, p, newton=newton,
                              penultimate=penultimate, tau=tau,
                              initial=(fu0, fw0))
