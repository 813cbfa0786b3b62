"""Synthetic snapshot benchmarks: multistable, switching, and branching flows.

Every generator emits a :class:`SnapshotDataset` of paired (state, velocity)
rows with per-sample mode labels, suitable for unsupervised decomposition.
Deterministic given cfg.seed; independent RNG substreams are derived with
``numpy.random.SeedSequence`` spawning so structural choices (initial
conditions, subsampling, noise) never share a stream.
"""

from __future__ import annotations

import csv
import functools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .library import PolyLibrary, build_library


class DivergenceError(RuntimeError):
    """Raised when trajectory integration leaves the finite range."""


class CycleDetectionError(RuntimeError):
    """Raised when the oscillator orbit fails to close on itself."""


# ---------------------------------------------------------------------------
# configuration and dataset container
# ---------------------------------------------------------------------------

@dataclass
class GeneratorConfig:
    """Knobs shared by all generators; ``None`` means the per-system default."""

    n_samples: int | None = None
    noise_sigma: float | None = None
    seed: int = 0
    dt: float | None = None
    n_initial_conditions: int | None = None
    horizon: float | None = None
    transient_discard: float | None = None
    exit_probability: float = 0.15
    split_fraction: float = 0.8


SYSTEM_DEFAULTS = {
    "bistable": dict(n_samples=10_000, noise_sigma=0.1, dt=0.01,
                     n_initial_conditions=20, horizon=0.0, transient_discard=0.0),
    "lotka_volterra": dict(n_samples=10_000, noise_sigma=0.1, dt=0.01,
                           n_initial_conditions=20, horizon=100.0,
                           transient_discard=0.0),
    "lorenz": dict(n_samples=10_000, noise_sigma=0.1, dt=0.01,
                   n_initial_conditions=20, horizon=10.0, transient_discard=10.0),
    "branching": dict(n_samples=45_000, noise_sigma=0.0, dt=0.08,
                      n_initial_conditions=600, horizon=0.0, transient_discard=0.0),
    "goldbeter_exit": dict(n_samples=6_320, noise_sigma=0.1, dt=0.01,
                           n_initial_conditions=20, horizon=25.0,
                           transient_discard=0.0),
}


def resolve_config(cfg: GeneratorConfig, system: str) -> GeneratorConfig:
    """Fill ``None`` fields from the per-system default table."""
    if system not in SYSTEM_DEFAULTS:
        raise ValueError(f"unknown system {system!r}; known: {sorted(SYSTEM_DEFAULTS)}")
    filled = replace(cfg)
    for key, val in SYSTEM_DEFAULTS[system].items():
        if getattr(filled, key) is None:
            setattr(filled, key, val)
    return filled


@dataclass
class SnapshotDataset:
    """Paired states and velocities with optional labels and zone flags.

    ``meta`` records provenance: generator name, dimensions, noise level,
    seed, split tag, and the normalization scales needed to map fitted
    coefficients back to raw coordinates.
    """

    states: np.ndarray
    velocities: np.ndarray
    labels: np.ndarray | None = None
    zone: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def take(self, idx: np.ndarray, split_tag: str) -> "SnapshotDataset":
        meta = dict(self.meta)
        meta["split"] = split_tag
        meta["n"] = int(len(idx))
        return SnapshotDataset(
            states=self.states[idx],
            velocities=self.velocities[idx],
            labels=None if self.labels is None else self.labels[idx],
            zone=None if self.zone is None else self.zone[idx],
            meta=meta,
        )


def split_dataset(ds: SnapshotDataset, fraction: float, seed: int):
    """Disjoint uniformly random split into (train, held-out)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must be in (0, 1), got {fraction}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 905]))
    perm = rng.permutation(ds.n)
    n_train = int(round(ds.n * fraction))
    train_idx = np.sort(perm[:n_train])
    val_idx = np.sort(perm[n_train:])
    return ds.take(train_idx, "train"), ds.take(val_idx, "val")


# ---------------------------------------------------------------------------
# integration and curve utilities
# ---------------------------------------------------------------------------

def integrate_rk4(f, x0: np.ndarray, dt: float, n_steps: int) -> np.ndarray:
    """Classic fixed-step RK4. ``x0`` may be ``(d,)`` or ``(m, d)`` (batched).

    Returns the trajectory including the initial point, shape
    ``(n_steps + 1, *x0.shape)``. Raises :class:`DivergenceError` if any
    state leaves the finite range.
    """
    x = np.asarray(x0, dtype=float)
    out = np.empty((n_steps + 1,) + x.shape)
    out[0] = x
    for i in range(n_steps):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"integration diverged at step {i + 1}")
        out[i + 1] = x
    return out


def arclength_resample(traj: np.ndarray, n_out: int) -> np.ndarray:
    """Resample a polyline at ``n_out`` equally spaced arc-length positions.

    Both endpoints are kept; interior points are linearly interpolated on the
    cumulative chord length.
    """
    traj = np.asarray(traj, dtype=float)
    if traj.ndim != 2 or traj.shape[0] < 2:
        raise ValueError("trajectory must have shape (n, d) with n >= 2")
    if n_out < 2:
        raise ValueError("n_out must be >= 2")
    seg = np.linalg.norm(np.diff(traj, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0.0:
        raise ValueError("trajectory has zero total arc length")
    targets = np.linspace(0.0, s[-1], n_out)
    out = np.empty((n_out, traj.shape[1]))
    for j in range(traj.shape[1]):
        out[:, j] = np.interp(targets, s, traj[:, j])
    return out


def normalize_and_noise(ds: SnapshotDataset, sigma: float, seed: int) -> SnapshotDataset:
    """Add measurement noise of scale ``sigma`` (in the data's own units) to
    states and velocities, then rescale both to unit variance per coordinate.

    The stored arrays therefore have VAR = 1 exactly, with the noise level
    relative to each coordinate's spread. No centering is applied; constant
    terms stay meaningful. The scale multipliers (stored value = measured
    value * scale) go into ``meta["normalization"]``. A zero-variance
    coordinate is an error.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 907]))
    states = ds.states
    velocities = ds.velocities
    if sigma > 0.0:
        states = states + rng.normal(scale=sigma, size=states.shape)
        velocities = velocities + rng.normal(scale=sigma, size=velocities.shape)
    state_std = states.std(axis=0)
    vel_std = velocities.std(axis=0)
    if np.any(state_std == 0.0) or np.any(vel_std == 0.0):
        raise ValueError("zero-variance coordinate; cannot normalize")
    state_scale = 1.0 / state_std
    vel_scale = 1.0 / vel_std
    states = states * state_scale
    velocities = velocities * vel_scale
    meta = dict(ds.meta)
    meta["sigma"] = float(sigma)
    meta["normalization"] = {
        "state_scale": [float(v) for v in state_scale],
        "velocity_scale": [float(v) for v in vel_scale],
    }
    return SnapshotDataset(states, velocities, ds.labels, ds.zone, meta)


# ---------------------------------------------------------------------------
# flow fields (raw coordinates)
# ---------------------------------------------------------------------------

BISTABLE_CENTERS = np.array([[-0.5, 0.0], [0.5, 0.0]])


def bistable_field(x: np.ndarray, mode: int) -> np.ndarray:
    """Two spiral attractors with opposite swirl, written center-relative."""
    x = np.asarray(x, dtype=float)
    u = x[..., 0] - BISTABLE_CENTERS[mode, 0]
    w = x[..., 1] - BISTABLE_CENTERS[mode, 1]
    if mode == 0:
        du = -u + 2.0 * w
        dw = -0.5 * u - w - u * w
    else:
        du = -u - 2.0 * w
        dw = 0.5 * u - w + u * w
    return np.stack([du, dw], axis=-1)


LV_PARAMS = [
    # (prey growth, predation, predator death, conversion)
    (0.5, 0.02, 0.5, 0.01),
    (0.5, 0.04, 0.6, 0.01),
]


def lotka_volterra_field(x: np.ndarray, mode: int) -> np.ndarray:
    a, b, c, d = LV_PARAMS[mode]
    p = x[..., 0]
    q = x[..., 1]
    return np.stack([a * p - b * p * q, -c * q + d * p * q], axis=-1)


LORENZ_PARAMS = [
    # (sigma, rho, beta)
    (12.0, 28.0, 4.0),
    (10.0, 35.65, 8.0 / 3.0),
]


def lorenz_field(x: np.ndarray, mode: int) -> np.ndarray:
    s, r, b = LORENZ_PARAMS[mode]
    u, v, w = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([s * (v - u), u * (r - w) - v, u * v - b * w], axis=-1)


BRANCHING_TRUNK_A = np.array([[0.15, -0.05], [0.05, 0.10]])
BRANCHING_BRANCH_RATE = 0.6
BRANCHING_OFFSET = np.array([0.6, 0.0])
BRANCHING_TRUNK_STEPS = 45
BRANCHING_BRANCH_STEPS = 30


def branching_field(x: np.ndarray, segment: int) -> np.ndarray:
    """Trunk (segment 0) or one of two lineage branches (1: up, 2: down)."""
    x = np.asarray(x, dtype=float)
    if segment == 0:
        return x @ BRANCHING_TRUNK_A.T + BRANCHING_OFFSET
    sign = 1.0 if segment == 1 else -1.0
    A = np.array([[0.0, 0.0], [sign * BRANCHING_BRANCH_RATE, 0.0]])
    return x @ A.T + BRANCHING_OFFSET


GOLDBETER_PARAMS = dict(
    vi=0.0335, kd=0.0, vd=0.25, Kd=0.02, VM1=3.2523, Kc=0.5, K1=0.005,
    V2=0.8158, K2=0.005, VM3=1.702, K3=0.005, V4=1.158, K4=0.005,
)


def goldbeter_field(x: np.ndarray) -> np.ndarray:
    """Three-variable mitotic oscillator (cyclin C, kinase M, protease X)."""
    p = GOLDBETER_PARAMS
    C = x[..., 0]
    M = x[..., 1]
    X = x[..., 2]
    dC = p["vi"] - p["kd"] * C - p["vd"] * X * C / (p["Kd"] + C)
    V1 = p["VM1"] * C / (p["Kc"] + C)
    dM = V1 * (1.0 - M) / (p["K1"] + (1.0 - M)) - p["V2"] * M / (p["K2"] + M)
    V3 = p["VM3"] * M
    dX = V3 * (1.0 - X) / (p["K3"] + (1.0 - X)) - p["V4"] * X / (p["K4"] + X)
    return np.stack([dC, dM, dX], axis=-1)


EXIT_RATE = np.array([0.6, 0.8, 0.9])
EXIT_TARGET = np.array([-0.3461, 0.1481, 0.1468])


def exit_field(y: np.ndarray) -> np.ndarray:
    """Linear relaxation toward the differentiated fixed point (normalized
    coordinates)."""
    return -EXIT_RATE * (np.asarray(y, dtype=float) - EXIT_TARGET)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _rngs(seed: int, n: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_bistable(cfg: GeneratorConfig) -> SnapshotDataset:
    """Snapshots from two overlapping spiral-attractor regimes.

    Half the samples per mode; positions drawn around each attractor center
    with unit spread, velocities evaluated analytically, then measurement
    noise and variance normalization.
    """
    cfg = resolve_config(cfg, "bistable")
    n = cfg.n_samples
    if n % 2 != 0:
        raise ValueError("bistable sample count must be even for exact balance")
    rng_pos, rng_noise = _rngs(cfg.seed, 2)
    half = n // 2
    states, velocities, labels = [], [], []
    for mode in range(2):
        pos = BISTABLE_CENTERS[mode] + rng_pos.normal(scale=1.0, size=(half, 2))
        states.append(pos)
        velocities.append(bistable_field(pos, mode))
        labels.append(np.full(half, mode, dtype=int))
    ds = SnapshotDataset(
        states=np.concatenate(states),
        velocities=np.concatenate(velocities),
        labels=np.concatenate(labels),
        meta={"generator": "bistable", "d": 2, "n": n, "seed": cfg.seed,
              "split": "full"},
    )
    return normalize_and_noise(ds, cfg.noise_sigma, cfg.seed)


def _trajectory_pool(field_for_mode, ics: np.ndarray, cfg: GeneratorConfig):
    """Integrate a batch of initial conditions and pool post-transient states."""
    n_trans = int(round(cfg.transient_discard / cfg.dt))
    n_keep = int(round(cfg.horizon / cfg.dt))
    traj = integrate_rk4(field_for_mode, ics, cfg.dt, n_trans + n_keep)
    kept = traj[n_trans:]
    return kept.reshape(-1, ics.shape[1])


def generate_lotka_volterra(cfg: GeneratorConfig) -> SnapshotDataset:
    """Predator-prey snapshots from two parameter regimes (different predation
    and mortality rates), subsampled from long oscillatory trajectories."""
    cfg = resolve_config(cfg, "lotka_volterra")
    n = cfg.n_samples
    if n % 2 != 0:
        raise ValueError("sample count must be even for exact class balance")
    rng_ic, rng_pick, rng_noise = _rngs(cfg.seed, 3)
    states, velocities, labels = [], [], []
    for mode in range(2):
        ics = rng_ic.uniform(10.0, 50.0, size=(cfg.n_initial_conditions, 2))
        pool = _trajectory_pool(lambda x: lotka_volterra_field(x, mode), ics, cfg)
        if np.any(pool < -1e-6):
            raise DivergenceError("population went negative; reduce dt")
        pick = rng_pick.choice(pool.shape[0], size=n // 2, replace=False)
        pts = pool[pick]
        states.append(pts)
        velocities.append(lotka_volterra_field(pts, mode))
        labels.append(np.full(n // 2, mode, dtype=int))
    ds = SnapshotDataset(
        states=np.concatenate(states),
        velocities=np.concatenate(velocities),
        labels=np.concatenate(labels),
        meta={"generator": "lotka_volterra", "d": 2, "n": n, "seed": cfg.seed,
              "split": "full"},
    )
    return normalize_and_noise(ds, cfg.noise_sigma, cfg.seed)


def generate_lorenz(cfg: GeneratorConfig) -> SnapshotDataset:
    """Chaotic snapshots from two Lorenz parameter sets, transient discarded."""
    cfg = resolve_config(cfg, "lorenz")
    n = cfg.n_samples
    if n % 2 != 0:
        raise ValueError("sample count must be even for exact class balance")
    rng_ic, rng_pick, rng_noise = _rngs(cfg.seed, 3)
    lo = np.array([-15.0, -15.0, 0.0])
    hi = np.array([15.0, 15.0, 40.0])
    states, velocities, labels = [], [], []
    for mode in range(2):
        ics = rng_ic.uniform(lo, hi, size=(cfg.n_initial_conditions, 3))
        pool = _trajectory_pool(lambda x: lorenz_field(x, mode), ics, cfg)
        pick = rng_pick.choice(pool.shape[0], size=n // 2, replace=False)
        pts = pool[pick]
        states.append(pts)
        velocities.append(lorenz_field(pts, mode))
        labels.append(np.full(n // 2, mode, dtype=int))
    ds = SnapshotDataset(
        states=np.concatenate(states),
        velocities=np.concatenate(velocities),
        labels=np.concatenate(labels),
        meta={"generator": "lorenz", "d": 3, "n": n, "seed": cfg.seed,
              "split": "full"},
    )
    return normalize_and_noise(ds, cfg.noise_sigma, cfg.seed)


def generate_branching(cfg: GeneratorConfig) -> SnapshotDataset:
    """Lineage-style snapshots: a common trunk flow that splits 50/50 into two
    branch flows pushing cells into opposite half-planes.

    Cells advance by explicit Euler steps of ``cfg.dt``; each recorded row
    pairs the current position with the analytic velocity of the segment the
    cell is in at that time. No normalization; noise defaults to zero.
    """
    cfg = resolve_config(cfg, "branching")
    rng_ic, rng_assign, rng_pick, rng_noise = _rngs(cfg.seed, 4)
    n_cells = cfg.n_initial_conditions
    cov_scale = math.sqrt(0.08)
    pos = rng_ic.normal(scale=cov_scale, size=(n_cells, 2))
    # exact half split between the two branches
    order = rng_assign.permutation(n_cells)
    branch = np.empty(n_cells, dtype=int)
    branch[order[: n_cells // 2]] = 1
    branch[order[n_cells // 2:]] = 2
    states = np.empty((n_cells, BRANCHING_TRUNK_STEPS + BRANCHING_BRANCH_STEPS, 2))
    vels = np.empty_like(states)
    labels = np.empty(states.shape[:2], dtype=int)
    x = pos.copy()
    t = 0
    for _ in range(BRANCHING_TRUNK_STEPS):
        v = branching_field(x, 0)
        states[:, t] = x
        vels[:, t] = v
        labels[:, t] = 0
        x = x + cfg.dt * v
        t += 1
    for _ in range(BRANCHING_BRANCH_STEPS):
        for seg in (1, 2):
            sel = branch == seg
            v = branching_field(x[sel], seg)
            states[sel, t] = x[sel]
            vels[sel, t] = v
            labels[sel, t] = seg
            x[sel] = x[sel] + cfg.dt * v
        t += 1
    states = states.reshape(-1, 2)
    vels = vels.reshape(-1, 2)
    labels = labels.reshape(-1)
    n_total = states.shape[0]
    n = cfg.n_samples
    if n > n_total:
        raise ValueError(f"requested {n} samples but schedule produces {n_total}")
    if n < n_total:
        pick = np.sort(rng_pick.choice(n_total, size=n, replace=False))
        states, vels, labels = states[pick], vels[pick], labels[pick]
    if cfg.noise_sigma > 0.0:
        states = states + rng_noise.normal(scale=cfg.noise_sigma, size=states.shape)
        vels = vels + rng_noise.normal(scale=cfg.noise_sigma, size=vels.shape)
    meta = {
        "generator": "branching", "d": 2, "n": int(n), "seed": cfg.seed,
        "sigma": float(cfg.noise_sigma), "split": "full", "dt": cfg.dt,
        "label_names": ["trunk", "branch_up", "branch_down"],
        "normalization": {"state_scale": [1.0, 1.0], "velocity_scale": [1.0, 1.0]},
    }
    return SnapshotDataset(states, vels, labels, None, meta)


# --- Goldbeter oscillator with stochastic exit ------------------------------

GOLDBETER_TRANSIENT = 200.0
EXIT_HORIZON = 25.0
EXIT_ARRIVAL_TOL = 1e-3
EXIT_ZONE_RADIUS = 0.15
EXIT_ZONE_PERCENTILE = 10.0
EXIT_LAUNCH_COVERAGE = 0.95


@functools.lru_cache(maxsize=4)
def goldbeter_cycle_info(dt: float = 0.01) -> dict:
    """Detect one period of the mitotic oscillator and normalize it.

    Runs a long transient, locates successive upward crossings of the kinase
    mid-level to measure the period, and extracts one closed cycle. States
    are rescaled to unit variance per coordinate over the period; velocities
    transform with the same scales (pure coordinate change), so the exit flow
    keeps its closed form in normalized coordinates.

    Returns a dict with the dense normalized cycle, its velocities, the
    period, the scale vector, the exit-zone threshold (low-cyclin percentile)
    and the zone bounding box.
    """
    x0 = np.array([0.01, 0.01, 0.01])
    n_trans = int(round(GOLDBETER_TRANSIENT / dt))
    settled = integrate_rk4(goldbeter_field, x0, dt, n_trans)[-1]
    # two extra periods' worth of orbit to measure crossings (period ~ 25)
    probe = integrate_rk4(goldbeter_field, settled, dt, int(round(80.0 / dt)))
    m = probe[:, 1]
    m_ref = 0.5 * (m.min() + m.max())
    up = np.flatnonzero((m[:-1] < m_ref) & (m[1:] >= m_ref))
    if len(up) < 2:
        raise CycleDetectionError("no repeated section crossings found")
    i0, i1 = up[-2], up[-1]
    # refine the crossing times by linear interpolation for a sharper period,
    # and close the loop at the interpolated section points
    f0 = (m_ref - m[i0]) / (m[i0 + 1] - m[i0])
    f1 = (m_ref - m[i1]) / (m[i1 + 1] - m[i1])
    period = ((i1 + f1) - (i0 + f0)) * dt
    p0 = probe[i0] + f0 * (probe[i0 + 1] - probe[i0])
    p1 = probe[i1] + f1 * (probe[i1 + 1] - probe[i1])
    cycle_raw = np.vstack([p0, probe[i0 + 1: i1 + 1], p1])
    closure = np.linalg.norm(cycle_raw[-1] - cycle_raw[0])
    scale = 1.0 / cycle_raw.std(axis=0)
    if closure * np.max(scale) > 1e-2:
        raise CycleDetectionError(f"orbit failed to close (gap {closure:.3e})")
    cycle = cycle_raw * scale
    cycle_vel = goldbeter_field(cycle_raw) * scale
    c_thresh = float(np.percentile(cycle[:, 0], EXIT_ZONE_PERCENTILE))
    seg_idx = np.flatnonzero(cycle[:, 0] < c_thresh)
    return {
        "dt": dt,
        "period": float(period),
        "scale": scale,
        "cycle": cycle,
        "cycle_velocity": cycle_vel,
        "c_threshold": c_thresh,
        "segment_indices": seg_idx,
    }


def exit_zone_spec(info: dict, exit_probability: float) -> dict:
    """Describe the switching zone: a tube around the stretch of the
    low-cyclin arc where nearly all exit events launch.

    A cell entering the sub-threshold arc survives ``(1 - p)`` per step, so
    the launch stretch is the first ``ceil(log(1 - coverage) / log(1 - p))``
    steps of the arc. The zone is every point within ``radius`` of that
    stretch; the dict is JSON-serializable for the dataset meta.
    """
    n_launch = max(1, math.ceil(math.log(1.0 - EXIT_LAUNCH_COVERAGE)
                                / math.log(1.0 - exit_probability)))
    seg_idx = info["segment_indices"][:n_launch + 1]
    seg = info["cycle"][seg_idx]
    return {
        "c_threshold": info["c_threshold"],
        "radius": EXIT_ZONE_RADIUS,
        "segment": [[float(v) for v in p] for p in seg],
    }


def normalized_cycle_field(y: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Oscillator flow expressed in the rescaled coordinates."""
    return goldbeter_field(np.asarray(y, dtype=float) / scale) * scale


def in_exit_zone(states: np.ndarray, zone: dict) -> np.ndarray:
    """Tube membership: within ``zone['radius']`` of the launch segment."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    seg = np.asarray(zone["segment"], dtype=float)
    d2 = ((states[:, None, :] - seg[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1)) <= zone["radius"]


def _integrate_exit_path(y0: np.ndarray, dt: float) -> np.ndarray:
    n_max = int(round(EXIT_HORIZON / dt))
    path = [y0]
    y = y0
    for _ in range(n_max):
        y = integrate_rk4(exit_field, y, dt, 1)[-1]
        path.append(y)
        if np.linalg.norm(y - EXIT_TARGET) < EXIT_ARRIVAL_TOL:
            break
    return np.array(path)


def generate_goldbeter_exit(cfg: GeneratorConfig) -> SnapshotDataset:
    """Oscillating cells that stochastically leave the cycle and relax to a
    differentiated state.

    The limit cycle is sampled uniformly in arc length (label 0). Cells run
    around the cycle and, while their cyclin coordinate is below the
    low-cyclin threshold, exit with probability ``cfg.exit_probability`` per
    time step; each exit launches a linear relaxation path toward the target
    point, also resampled uniformly in arc length (label 1). Per-sample zone
    membership uses the tube recorded in ``meta["exit_zone"]``.

    Both manifolds get the same sampling density per unit arc length. The
    launched relaxation paths converge onto one curve almost immediately, so
    the exit branch counts as a single path's worth of length, split evenly
    across the launches to keep the zone-adjacent spread.
    """
    cfg = resolve_config(cfg, "goldbeter_exit")
    info = goldbeter_cycle_info(cfg.dt)
    zone_spec = exit_zone_spec(info, cfg.exit_probability)
    rng_start, rng_exit, rng_noise = _rngs(cfg.seed, 3)
    n = cfg.n_samples
    n_paths = cfg.n_initial_conditions

    cycle = info["cycle"]
    n_dense = cycle.shape[0]

    # stochastic exits: each cell advances along the dense cycle, testing the
    # low-cyclin hazard once per time step
    exit_paths = []
    starts = rng_start.integers(0, n_dense, size=n_paths)
    for s in starts:
        idx = int(s)
        for _ in range(10 * n_dense):
            if cycle[idx, 0] < info["c_threshold"] and rng_exit.random() < cfg.exit_probability:
                break
            idx = (idx + 1) % n_dense
        exit_paths.append(_integrate_exit_path(cycle[idx], cfg.dt))

    def _arc_len(traj):
        return float(np.sum(np.linalg.norm(np.diff(traj, axis=0), axis=1)))

    cycle_len = _arc_len(cycle)
    exit_len = float(np.mean([_arc_len(p) for p in exit_paths]))
    n_exit = int(round(n * exit_len / (exit_len + cycle_len)))
    n_per_path = max(8, int(round(n_exit / n_paths)))
    n_cycle = n - n_paths * n_per_path
    if n_cycle < 2:
        raise ValueError("sample budget too small for the cycle/exit split")

    cycle_pts = arclength_resample(cycle, n_cycle)
    cycle_vel = normalized_cycle_field(cycle_pts, info["scale"])
    exit_pts = np.concatenate(
        [arclength_resample(p, n_per_path) for p in exit_paths]
    )
    exit_vel = exit_field(exit_pts)

    states = np.concatenate([cycle_pts, exit_pts])
    velocities = np.concatenate([cycle_vel, exit_vel])
    labels = np.concatenate(
        [np.zeros(n_cycle, dtype=int), np.ones(len(exit_pts), dtype=int)]
    )
    zone = in_exit_zone(states, zone_spec)
    if cfg.noise_sigma > 0.0:
        states = states + rng_noise.normal(scale=cfg.noise_sigma, size=states.shape)
        velocities = velocities + rng_noise.normal(scale=cfg.noise_sigma, size=velocities.shape)
    scale = info["scale"]
    meta = {
        "generator": "goldbeter_exit", "d": 3, "n": int(n), "seed": cfg.seed,
        "sigma": float(cfg.noise_sigma), "split": "full", "dt": cfg.dt,
        "period": info["period"],
        "exit_probability": float(cfg.exit_probability),
        "exit_threshold": info["c_threshold"],
        "exit_zone": zone_spec,
        "normalization": {
            "state_scale": [float(v) for v in scale],
            "velocity_scale": [float(v) for v in scale],
        },
    }
    return SnapshotDataset(states, velocities, labels, zone, meta)


GENERATORS = {
    "bistable": generate_bistable,
    "lotka_volterra": generate_lotka_volterra,
    "lorenz": generate_lorenz,
    "branching": generate_branching,
    "goldbeter_exit": generate_goldbeter_exit,
}


def generate(system: str, cfg: GeneratorConfig) -> SnapshotDataset:
    if system not in GENERATORS:
        raise ValueError(f"unknown system {system!r}; known: {sorted(GENERATORS)}")
    return GENERATORS[system](cfg)


# ---------------------------------------------------------------------------
# ground-truth coefficient tables (raw coordinates)
# ---------------------------------------------------------------------------

def _theta_from_sparse(lib: PolyLibrary, entries: dict) -> np.ndarray:
    """entries: {exponent tuple: {output dim: coefficient}}"""
    theta = np.zeros((lib.n_terms, lib.dim))
    index = {t: i for i, t in enumerate(lib.terms)}
    for term, cols in entries.items():
        if term not in index:
            raise ValueError(f"library lacks required term {term}")
        for j, val in cols.items():
            theta[index[term], j] = val
    return theta


def true_expert_thetas(system: str, lib: PolyLibrary) -> np.ndarray:
    """Stack of true coefficient matrices, one per generating mode, in raw
    coordinates and the library's term order."""
    if system == "bistable":
        tables = [
            {(0, 0): {0: -0.5, 1: -0.25}, (1, 0): {0: -1.0, 1: -0.5},
             (0, 1): {0: 2.0, 1: -1.5}, (1, 1): {1: -1.0}},
            {(0, 0): {0: 0.5, 1: -0.25}, (1, 0): {0: -1.0, 1: 0.5},
             (0, 1): {0: -2.0, 1: -1.5}, (1, 1): {1: 1.0}},
        ]
    elif system == "lotka_volterra":
        tables = []
        for a, b, c, d in LV_PARAMS:
            tables.append({(1, 0): {0: a}, (0, 1): {1: -c},
                           (1, 1): {0: -b, 1: d}})
    elif system == "lorenz":
        tables = []
        for s, r, b in LORENZ_PARAMS:
            tables.append({
                (1, 0, 0): {0: -s, 1: r}, (0, 1, 0): {0: s, 1: -1.0},
                (0, 0, 1): {2: -b}, (1, 0, 1): {1: -1.0}, (1, 1, 0): {2: 1.0},
            })
    elif system == "branching":
        A = BRANCHING_TRUNK_A
        c0, c1 = BRANCHING_OFFSET
        tables = [
            {(0, 0): {0: c0, 1: c1}, (1, 0): {0: A[0, 0], 1: A[1, 0]},
             (0, 1): {0: A[0, 1], 1: A[1, 1]}},
            {(0, 0): {0: c0, 1: c1}, (1, 0): {1: BRANCHING_BRANCH_RATE}},
            {(0, 0): {0: c0, 1: c1}, (1, 0): {1: -BRANCHING_BRANCH_RATE}},
        ]
    elif system == "goldbeter_exit":
        # only the exit branch is polynomial; expressed in the dataset's
        # normalized coordinates
        entries = {tuple(0 for _ in range(3)): {j: float(EXIT_RATE[j] * EXIT_TARGET[j])
                                               for j in range(3)}}
        for j in range(3):
            e = [0, 0, 0]
            e[j] = 1
            entries.setdefault(tuple(e), {})[j] = float(-EXIT_RATE[j])
        tables = [entries]
    else:
        raise ValueError(f"no ground-truth table for system {system!r}")
    return np.stack([_theta_from_sparse(lib, t) for t in tables])


# ---------------------------------------------------------------------------
# ground-truth forward simulators (forecast references)
# ---------------------------------------------------------------------------

def branching_truth_finals(x0s: np.ndarray, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Run the true trunk-then-branch process from given starts.

    Returns final positions after the full schedule and the branch labels
    (1 up, 2 down), split exactly 50/50 at the branching time.
    """
    cfg = resolve_config(GeneratorConfig(seed=seed), "branching")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 911]))
    x = np.array(x0s, dtype=float)
    m = x.shape[0]
    order = rng.permutation(m)
    branch = np.empty(m, dtype=int)
    branch[order[: m // 2]] = 1
    branch[order[m // 2:]] = 2
    for _ in range(BRANCHING_TRUNK_STEPS):
        x = x + cfg.dt * branching_field(x, 0)
    for _ in range(BRANCHING_BRANCH_STEPS):
        for seg in (1, 2):
            sel = branch == seg
            x[sel] = x[sel] + cfg.dt * branching_field(x[sel], seg)
    return x, branch


def goldbeter_truth_finals(
    y0s: np.ndarray, n_steps: int, dt: float, seed: int,
    exit_probability: float = 0.15,
) -> np.ndarray:
    """Run the true cycle-with-stochastic-exit process from given normalized
    starts and return states after ``n_steps`` steps of size ``dt``."""
    info = goldbeter_cycle_info(dt)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 913]))
    y = np.array(y0s, dtype=float)
    m = y.shape[0]
    exited = np.zeros(m, dtype=bool)
    scale = info["scale"]
    for _ in range(n_steps):
        hazard = (~exited) & (y[:, 0] < info["c_threshold"])
        if np.any(hazard):
            exited |= hazard & (rng.random(m) < exit_probability)
        on = ~exited
        if np.any(on):
            y[on] = integrate_rk4(lambda z: normalized_cycle_field(z, scale), y[on], dt, 1)[-1]
        if np.any(exited):
            y[exited] = integrate_rk4(exit_field, y[exited], dt, 1)[-1]
    return y


# ---------------------------------------------------------------------------
# dataset file IO
# ---------------------------------------------------------------------------

def save_dataset(ds: SnapshotDataset, directory, name: str) -> Path:
    """Write ``<name>.csv`` plus a ``<name>_meta.json`` sidecar.

    CSV columns: x0..x{d-1}, v0..v{d-1}, label (-1 when absent), and in_zone
    when the dataset carries zone flags. Floats use 12 significant digits.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{name}.csv"
    d = ds.dim
    header = [f"x{j}" for j in range(d)] + [f"v{j}" for j in range(d)] + ["label"]
    if ds.zone is not None:
        header.append("in_zone")
    labels = ds.labels if ds.labels is not None else np.full(ds.n, -1, dtype=int)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(ds.n):
            row = [f"{v:.12g}" for v in ds.states[i]]
            row += [f"{v:.12g}" for v in ds.velocities[i]]
            row.append(str(int(labels[i])))
            if ds.zone is not None:
                row.append(str(int(ds.zone[i])))
            writer.writerow(row)
    with open(directory / f"{name}_meta.json", "w") as fh:
        json.dump(ds.meta, fh, indent=2)
        fh.write("\n")
    return path


def load_dataset(csv_path) -> SnapshotDataset:
    """Read a dataset CSV and its ``_meta.json`` sidecar."""
    csv_path = Path(csv_path)
    meta_path = csv_path.with_name(csv_path.stem + "_meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    arr = np.array(rows)
    xcols = [i for i, h in enumerate(header) if h.startswith("x")]
    vcols = [i for i, h in enumerate(header) if h.startswith("v")]
    if len(xcols) != len(vcols) or not xcols:
        raise ValueError(f"malformed dataset header: {header}")
    states = arr[:, xcols]
    velocities = arr[:, vcols]
    labels = None
    if "label" in header:
        lab = arr[:, header.index("label")].astype(int)
        if np.any(lab >= 0):
            labels = lab
    zone = None
    if "in_zone" in header:
        zone = arr[:, header.index("in_zone")].astype(bool)
    return SnapshotDataset(states, velocities, labels, zone, meta)
