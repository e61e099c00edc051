"""Gradient-descent trajectories and finder start points sampled from them."""

import math
from dataclasses import dataclass, field

from .errors import InvalidInputError
from .linalg import seeded_rng
from .model import NetworkParams, Objective

COMPLETED = "completed"
DIVERGED = "diverged"


@dataclass(frozen=True)
class Snapshot:
    epoch: int
    params: NetworkParams
    loss: float
    sq_grad_norm: float


@dataclass
class Trajectory:
    trajectory_id: int
    seed: int
    snapshots: list = field(default_factory=list)
    status: str = COMPLETED


@dataclass(frozen=True)
class Seed:
    """A finder start point: one snapshot of one trajectory."""

    trajectory_id: int
    seed_id: int
    epoch: int
    params: NetworkParams


def init_params(arch, init_scale, rng):
    """i.i.d. normal entries with variance ``init_scale**2 / fan_in``."""
    return NetworkParams(tuple(
        rng.standard_normal((r, c)) * (init_scale / math.sqrt(c)) for r, c in arch.shapes
    ))


def train_gd(arch, data, init_scale=1.0, learning_rate=1e-3, epochs=1000, snapshot_every=10,
             seed=0, trajectory_id=0, init=None):
    """Full-batch gradient descent on the reconstruction loss.

    Snapshots are taken at epoch 0, every ``snapshot_every`` epochs and at the
    final epoch. The run stops early with status ``diverged`` if the loss
    becomes non-finite or exceeds ten times its initial value.
    """
    if not learning_rate > 0:
        raise InvalidInputError("learning_rate must be positive")
    if epochs < 1 or snapshot_every < 1:
        raise InvalidInputError("epochs and snapshot_every must be at least 1")
    obj = Objective(arch, data)
    start = init if init is not None else init_params(arch, init_scale, seeded_rng(seed))
    theta = start.flatten()
    traj = Trajectory(trajectory_id, seed)

    grad = obj.grad(theta)
    loss0 = obj.loss(theta)

    def snap(epoch, theta, grad, value):
        traj.snapshots.append(Snapshot(epoch, NetworkParams.unflatten(arch, theta.copy()), value,
                                       0.5 * float(grad @ grad)))

    snap(0, theta, grad, loss0)
    for epoch in range(1, epochs + 1):
        theta = theta - learning_rate * grad
        grad = obj.grad(theta)
        value = obj.loss(theta)
        if not math.isfinite(value) or value > 10.0 * loss0:
            traj.status = DIVERGED
            break
        if epoch % snapshot_every == 0 or epoch == epochs:
            snap(epoch, theta, grad, value)
    return traj


def sample_seeds(traj, k, rng):
    """``k`` snapshots drawn uniformly with replacement."""
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    if not traj.snapshots:
        raise InvalidInputError(f"trajectory {traj.trajectory_id} has no snapshots")
    picks = rng.integers(0, len(traj.snapshots), size=k)
    return [
        Seed(traj.trajectory_id, i, traj.snapshots[j].epoch, traj.snapshots[j].params)
        for i, j in enumerate(picks)
    ]
