"""Critical-point finders: GNM, Newton-MR and Newton-TR.

All three drive the squared gradient norm ``g = 0.5 ||grad L||^2`` toward
zero, whose gradient is ``H grad L`` (one Hessian-vector product). They share
one driver loop, one termination rule and one trace schema.

The finders only need an objective exposing ``loss``, ``grad`` and ``hvp`` on
flat vectors, so any such object (e.g. a plain quadratic) can be plugged in.
"""

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .catalog import DEFAULT_TAU_REL, classify_point
from .errors import InvalidInputError
from .linalg import minres, quadratic_model, steihaug_cg
from .model import NetworkParams, Objective, balance, loss, sq_grad_norm

METHODS = ("gnm", "newton-mr", "newton-tr")

CONVERGED = "converged"
MAX_EPOCHS = "max_epochs"
STEP_UNDERFLOW = "step_underflow"
RADIUS_UNDERFLOW = "radius_underflow"
INNER_BREAKDOWN = "inner_breakdown"
CONTINUE = "continue"


@dataclass(frozen=True)
class FinderConfig:
    method: str = "newton-mr"
    epsilon_crit: float = 1e-10
    max_epochs: int = 500
    # when False the run keeps iterating below the criterion until max_epochs
    # or until no further decrease is representable
    stop_at_criterion: bool = True
    # backtracking line search (GNM, Newton-MR)
    initial_step: float = 1.0
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    min_step: float = 1e-20
    # MINRES inner solve (Newton-MR); max_iters None means the parameter count
    minres_rel_tol: float = 1e-6
    minres_max_iters: int = None
    # trust region (Newton-TR)
    initial_radius: float = 1.0
    max_radius: float = 1e3
    radius_shrink: float = 0.25
    shrink_below: float = 0.25
    radius_grow: float = 2.0
    grow_above: float = 0.75
    accept_above: float = 0.1
    min_radius: float = 1e-14
    cg_rel_tol: float = 1e-6
    cg_max_iters: int = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidInputError(f"unknown method {self.method!r}; choose from {METHODS}")
        positive = ("epsilon_crit", "initial_step", "shrink", "sufficient_decrease", "min_step",
                    "minres_rel_tol", "initial_radius", "max_radius", "radius_shrink",
                    "radius_grow", "min_radius", "cg_rel_tol", "max_epochs")
        for name in positive:
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if not (self.shrink < 1 and self.radius_shrink < 1 < self.radius_grow):
            raise InvalidInputError("shrink factors must be < 1 and the grow factor > 1")
        if not 0 < self.accept_above <= self.shrink_below < self.grow_above < 1:
            raise InvalidInputError("need 0 < accept <= shrink_below < grow_above < 1")

    @classmethod
    def from_dict(cls, doc):
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise InvalidInputError(f"unknown finder options: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


@dataclass
class IterRecord:
    epoch: int
    g: float
    loss: float
    step_norm: float = 0.0
    radius: float = math.nan
    inner_iters: int = 0
    accepted: bool = True
    direction: str = ""
    rho: float = math.nan

    @property
    def step_or_radius(self):
        return self.step_norm if math.isnan(self.radius) else self.radius


@dataclass
class FinderRunTrace:
    method: str
    records: list = field(default_factory=list)
    status: str = MAX_EPOCHS
    epsilon_crit: float = 1e-10

    @property
    def final_g(self):
        return self.records[-1].g

    @property
    def converged(self):
        return self.status == CONVERGED

    @property
    def epochs(self):
        return self.records[-1].epoch

    def accepted_g(self):
        return [r.g for r in self.records if r.accepted]


@dataclass
class FinderResult:
    trace: FinderRunTrace
    theta: np.ndarray


class _State:
    """Current iterate with its gradient and merit value cached."""

    def __init__(self, obj, theta):
        self.obj = obj
        self.set(theta)

    def set(self, theta, grad=None):
        self.theta = theta
        self.grad = self.obj.grad(theta) if grad is None else grad
        self.g = 0.5 * float(self.grad @ self.grad)

    def merit(self, theta):
        grad = self.obj.grad(theta)
        return 0.5 * float(grad @ grad), grad


def _backtrack(state, direction, slope, cfg):
    """Armijo backtracking on g along ``direction``; returns (theta, grad, g, alpha) or None."""
    alpha = cfg.initial_step
    while alpha >= cfg.min_step:
        trial = state.theta + alpha * direction
        g_t, grad_t = state.merit(trial)
        if g_t < state.g and g_t <= state.g + cfg.sufficient_decrease * alpha * slope:
            return trial, grad_t, g_t, alpha
        alpha *= cfg.shrink
    return None


def _gnm_step(obj, state, cfg, memo):
    grad_g = obj.hvp(state.theta, state.grad)
    gg = float(grad_g @ grad_g)
    if gg == 0.0:
        return None, IterRecord(0, state.g, math.nan, accepted=False, direction="gradient")
    found = _backtrack(state, -grad_g, -gg, cfg)
    if found is None:
        return None, IterRecord(0, state.g, math.nan, accepted=False, direction="gradient")
    theta, grad, g, alpha = found
    state.set(theta, grad)
    return CONTINUE, IterRecord(0, g, math.nan, step_norm=alpha * math.sqrt(gg),
                                direction="gradient")


def _newton_mr_step(obj, state, cfg, memo):
    theta = state.theta
    op = lambda v: obj.hvp(theta, v)  # noqa: E731
    max_iters = cfg.minres_max_iters or obj.n_params
    out = minres(op, -state.grad, rel_tol=cfg.minres_rel_tol, max_iters=max_iters)
    grad_g = op(state.grad)
    p = out.solution
    slope = float(grad_g @ p)
    direction = "minres"
    broke = out.flag == "breakdown"
    if broke or not slope < 0.0:
        p = -grad_g
        slope = -float(grad_g @ grad_g)
        direction = "gradient"
    found = _backtrack(state, p, slope, cfg) if slope < 0.0 else None
    if found is None:
        return (INNER_BREAKDOWN if broke else None), IterRecord(
            0, state.g, math.nan, inner_iters=out.iterations, accepted=False, direction=direction)
    theta, grad, g, alpha = found
    state.set(theta, grad)
    return CONTINUE, IterRecord(0, g, math.nan, step_norm=alpha * float(np.linalg.norm(p)),
                                inner_iters=out.iterations, direction=direction)


def _newton_tr_step(obj, state, cfg, memo):
    theta = state.theta
    radius = memo["radius"]
    hv = lambda v: obj.hvp(theta, v)  # noqa: E731
    gauss_newton = lambda v: hv(hv(v))  # noqa: E731
    grad_g = hv(state.grad)
    max_iters = cfg.cg_max_iters or obj.n_params
    cg = steihaug_cg(gauss_newton, grad_g, radius, rel_tol=cfg.cg_rel_tol, max_iters=max_iters)
    s = cg.step
    step_norm = float(np.linalg.norm(s))
    predicted = -quadratic_model(gauss_newton, grad_g, s)
    g_t, grad_t = state.merit(theta + s) if step_norm > 0 else (state.g, state.grad)
    if predicted > 0.0:
        rho = (state.g - g_t) / predicted
    else:
        rho = -math.inf
    accepted = rho > cfg.accept_above and g_t < state.g
    if rho < cfg.shrink_below:
        memo["radius"] = radius * cfg.radius_shrink
    elif rho > cfg.grow_above and step_norm >= (1.0 - 1e-9) * radius:
        memo["radius"] = min(radius * cfg.radius_grow, cfg.max_radius)
    rec = IterRecord(0, state.g, math.nan, step_norm=step_norm, radius=radius,
                     inner_iters=cg.iterations, accepted=accepted, direction="steihaug", rho=rho)
    if accepted:
        state.set(theta + s, grad_t)
        rec.g = state.g
    if memo["radius"] < cfg.min_radius:
        return RADIUS_UNDERFLOW, rec
    return CONTINUE, rec


_STEPS = {"gnm": _gnm_step, "newton-mr": _newton_mr_step, "newton-tr": _newton_tr_step}


def run_finder(objective, theta0, config):
    """Run ``config.method`` from ``theta0`` on any loss/grad/hvp objective."""
    theta0 = np.array(theta0, dtype=float).ravel()
    if not np.all(np.isfinite(theta0)):
        raise InvalidInputError("start point has non-finite entries")
    cfg = config
    step = _STEPS[cfg.method]
    state = _State(objective, theta0)
    memo = {"radius": cfg.initial_radius}
    trace = FinderRunTrace(cfg.method, epsilon_crit=cfg.epsilon_crit)
    trace.records.append(IterRecord(0, state.g, objective.loss(state.theta),
                                    radius=cfg.initial_radius if cfg.method == "newton-tr"
                                    else math.nan))
    status = MAX_EPOCHS
    for epoch in range(1, cfg.max_epochs + 1):
        if state.g == 0.0 or (cfg.stop_at_criterion and state.g <= cfg.epsilon_crit):
            status = CONVERGED
            break
        outcome, rec = step(objective, state, cfg, memo)
        rec.epoch = epoch
        rec.g = state.g
        rec.loss = objective.loss(state.theta)
        trace.records.append(rec)
        if outcome is None:
            status = STEP_UNDERFLOW
            break
        if outcome != CONTINUE:
            status = outcome
            break
    # the criterion alone decides convergence, whatever stopped the loop
    trace.status = CONVERGED if state.g <= cfg.epsilon_crit else (
        MAX_EPOCHS if status == CONVERGED else status)
    return FinderResult(trace, state.theta)


def _run(method, start, data, config):
    cfg = FinderConfig(method=method) if config is None else replace(config, method=method)
    obj = Objective(start.architecture, data)
    result = run_finder(obj, start.flatten(), cfg)
    return result.trace, NetworkParams.unflatten(start.architecture, result.theta)


def gnm_run(start, data, config=None):
    """Gradient-norm minimization: backtracking descent along ``-H grad L``."""
    return _run("gnm", start, data, config)


def newton_mr_run(start, data, config=None):
    """Least-squares Newton steps ``p = MINRES(H, -grad L)`` with Armijo backtracking on g."""
    return _run("newton-mr", start, data, config)


def newton_tr_run(start, data, config=None):
    """Trust-region descent on g with Gauss-Newton curvature ``H^2`` (Steihaug-CG subproblem)."""
    return _run("newton-tr", start, data, config)


RUNNERS = {"gnm": gnm_run, "newton-mr": newton_mr_run, "newton-tr": newton_tr_run}


@dataclass
class CriticalPointRecord:
    method: str
    trajectory_id: int
    seed_id: int
    terminal_sq_grad_norm: float
    loss: float
    index: int
    nullity: int
    converged: bool
    status: str = ""
    epochs: int = 0
    matched_subset: tuple = None
    ambiguous: bool = False


def classify_terminal(terminal, data, tau_rel=DEFAULT_TAU_REL, epsilon_crit=1e-10, *,
                      method="", trajectory_id=-1, seed_id=-1, status="", epochs=0):
    """Classify the end point of a run, converged or not.

    The index is read at the balanced factorization of the same point: the
    inertia is identical there, while an unbalanced one inflates the largest
    eigenvalue and with it the relative nullity threshold.
    """
    g = sq_grad_norm(terminal, data)
    cls = classify_point(balance(terminal), data, tau_rel)
    return CriticalPointRecord(
        method=method,
        trajectory_id=trajectory_id,
        seed_id=seed_id,
        terminal_sq_grad_norm=g,
        loss=loss(terminal, data),
        index=cls.index,
        nullity=cls.nullity,
        converged=g <= epsilon_crit,
        status=status,
        epochs=epochs,
    )
