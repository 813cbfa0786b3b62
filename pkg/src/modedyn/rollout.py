"""Stochastic forward simulation of fitted mixture models.

Each step draws an expert from the mixing distribution at the current
state, takes an Euler step with that expert's flow, and adds scaled
Brownian noise. Pushforward of an initial ensemble is the workhorse of
the forecasting benchmarks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.random import SeedSequence, default_rng

from .gated import EnsembleModel, GlobalModel, gate_probabilities
from .library import design_matrix
from .local import LocalModel

DIVERGENCE_LIMIT = 1e6


@dataclass
class RolloutConfig:
    n_steps: int
    dt: float = 0.01
    sigma_b: float = 0.05
    seed: int = 0
    expert_policy: str = "sample"
    record_gates: bool = False

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.n_steps < 0:
            raise ValueError("n_steps must be nonnegative")
        if self.sigma_b < 0:
            raise ValueError("sigma_b must be nonnegative")
        if self.expert_policy not in ("sample", "argmax"):
            raise ValueError("expert_policy must be 'sample' or 'argmax'")


@dataclass
class RolloutResult:
    """Trajectories plus the per-step expert choices that produced them.

    ``divergence_step[m]`` is the step at which particle ``m`` blew past
    the divergence guard (-1 when it never did); a diverged particle is
    frozen at its last finite state.
    """

    trajectories: np.ndarray
    expert_draws: np.ndarray
    gate_trace: np.ndarray | None
    divergence_step: np.ndarray

    @property
    def diverged(self) -> np.ndarray:
        return self.divergence_step >= 0

    @property
    def final_states(self) -> np.ndarray:
        return self.trajectories[:, -1, :]


def _mixing_at(model, x: np.ndarray) -> np.ndarray:
    if isinstance(model, (GlobalModel, EnsembleModel)):
        return np.atleast_2d(gate_probabilities(model, x))
    return np.broadcast_to(model.mixing, (x.shape[0], model.mixing.shape[0]))


def _expert_velocity(model, x: np.ndarray, draws: np.ndarray) -> np.ndarray:
    Z = design_matrix(model.library, x)
    return np.einsum("mp,mpd->md", Z, model.thetas[draws])


def rollout(model, x0s: np.ndarray, cfg: RolloutConfig) -> RolloutResult:
    """Simulate the mixture forward from each row of ``x0s``.

    The expert-draw and noise random streams are separate substreams of
    ``cfg.seed``, so switching ``expert_policy`` leaves the noise
    sequence untouched. Both streams advance for every particle at every
    step, which keeps results bit-identical regardless of when (or
    whether) individual particles diverge.
    """
    x0s = np.atleast_2d(np.asarray(x0s, dtype=float))
    if not np.all(np.isfinite(x0s)):
        raise ValueError("initial states must be finite")
    m, d = x0s.shape
    K = model.thetas.shape[0]
    ss_expert, ss_noise = SeedSequence(cfg.seed).spawn(2)
    rng_expert = default_rng(ss_expert)
    rng_noise = default_rng(ss_noise)

    traj = np.empty((m, cfg.n_steps + 1, d))
    traj[:, 0] = x0s
    draws_out = np.zeros((m, cfg.n_steps), dtype=int)
    trace = np.empty((m, cfg.n_steps, K)) if cfg.record_gates else None
    div_step = np.full(m, -1, dtype=int)
    alive = np.ones(m, dtype=bool)
    x = x0s.copy()
    noise_scale = cfg.sigma_b * np.sqrt(cfg.dt)

    for t in range(cfg.n_steps):
        pi = _mixing_at(model, x)
        if trace is not None:
            trace[:, t] = pi
        u = rng_expert.random(m)
        if cfg.expert_policy == "argmax":
            draws = np.argmax(pi, axis=1)
        else:
            cdf = np.cumsum(pi, axis=1)
            cdf[:, -1] = 1.0
            draws = np.minimum((u[:, None] >= cdf).sum(axis=1), K - 1)
        xi = rng_noise.standard_normal((m, d))
        with np.errstate(over="ignore", invalid="ignore"):
            x_new = x + cfg.dt * _expert_velocity(model, x, draws) + noise_scale * xi
        bad = ~np.isfinite(x_new).all(axis=1) | (np.abs(x_new) > DIVERGENCE_LIMIT).any(
            axis=1
        )
        newly = alive & bad
        div_step[newly] = t
        alive &= ~bad
        x = np.where(alive[:, None], x_new, x)
        draws_out[:, t] = draws
        traj[:, t + 1] = x
    return RolloutResult(traj, draws_out, trace, div_step)


def pushforward(model, x0s: np.ndarray, cfg: RolloutConfig) -> np.ndarray:
    """Final states of the surviving particles; divergent ones are dropped."""
    res = rollout(model, x0s, cfg)
    keep = ~res.diverged
    if not np.any(keep):
        raise RuntimeError("all particles diverged during pushforward")
    return res.final_states[keep]


def commitment_probe(
    model, x0s: np.ndarray, cfg: RolloutConfig, expert_index: int, threshold: float
) -> np.ndarray:
    """First step at which each particle's gate probability for
    ``expert_index`` exceeds ``threshold`` (-1 when it never does).

    Measures how far ahead of a regime change the mixing distribution
    starts leaning toward the destination expert.
    """
    if not cfg.record_gates:
        raise ValueError("commitment_probe requires cfg.record_gates=True")
    res = rollout(model, x0s, cfg)
    crossed = res.gate_trace[:, :, expert_index] > threshold
    any_cross = crossed.any(axis=1)
    first = np.where(any_cross, np.argmax(crossed, axis=1), -1)
    return first


def save_rollout(result: RolloutResult, model, path) -> Path:
    """Trajectory dump: one row per particle per step.

    The ``expert`` column is the draw applied when leaving that row's
    state (-1 on the terminal row). Gate columns appear only when the
    rollout recorded them; the terminal row evaluates the mixing
    distribution at the final state.
    """
    path = Path(path)
    m, n_rows, d = result.trajectories.shape
    K = model.thetas.shape[0]
    with_gates = result.gate_trace is not None
    header = ["particle", "step"] + [f"x{j}" for j in range(d)] + ["expert"]
    if with_gates:
        header += [f"pi_{k}" for k in range(K)]
        final_pi = _mixing_at(model, result.trajectories[:, -1, :])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(m):
            for t in range(n_rows):
                row = [i, t] + [f"{v:.12g}" for v in result.trajectories[i, t]]
                row.append(int(result.expert_draws[i, t]) if t < n_rows - 1 else -1)
                if with_gates:
                    pi = result.gate_trace[i, t] if t < n_rows - 1 else final_pi[i]
                    row += [f"{v:.12g}" for v in pi]
                writer.writerow(row)
    return path
