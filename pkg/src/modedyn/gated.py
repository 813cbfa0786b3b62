"""Gated mixture of sparse polynomial flows trained by minibatch descent.

The mixing distribution over experts is a small MLP of the state, so regime
boundaries can live anywhere in state space instead of being a single global
proportion. The loss is the mixture negative log-likelihood plus an L1
penalty on expert coefficients, a gate-entropy penalty pushing per-sample
decisions toward confidence, and a load-balance penalty keeping average
expert usage near uniform. All gradients are derived by hand and checked
against finite differences in the test suite; no autodiff framework is used.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_softmax, logsumexp

from .datagen import SnapshotDataset
from .library import PolyLibrary, build_library, design_matrix

_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8
_SCALE_FLOOR = 1e-8
_LOG_FLOOR = 1e-300


@dataclass
class GlobalConfig:
    """Hyperparameters for the gated variant.

    ``grad_clip=None`` disables clipping and ``min_delta=0.0`` makes any
    strict validation improvement reset the early-stop counter.
    """

    n_experts: int = 3
    degree: int = 2
    gate_hidden: tuple = (64,)
    activation: str = "tanh"
    lr: float = 2e-3
    weight_decay: float = 1e-5
    epochs: int = 500
    patience: int = 30
    min_delta: float = 0.0
    lam_l1: float = 1e-4
    lam_ent: float = 1e-3
    lam_lb: float = 5e-4
    grad_clip: float | None = None
    batch_size: int = 512
    seed: int = 0
    n_restarts: int = 1

    def __post_init__(self):
        if self.n_experts < 1:
            raise ValueError("n_experts must be >= 1")
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.activation not in ("tanh", "silu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr", "weight_decay", "lam_l1", "lam_ent", "lam_lb"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive or None")
        if self.epochs < 0 or self.patience < 0 or self.n_restarts < 1:
            raise ValueError("epochs, patience >= 0 and n_restarts >= 1 required")


# per-dataset training recipes; toy_branching leaves clipping off and uses
# constant experts (degree 0) so the gate carries all state dependence
PRESETS: dict[str, GlobalConfig] = {
    "toy_branching": GlobalConfig(
        n_experts=3, degree=0, gate_hidden=(64,), activation="tanh",
        lr=2e-3, weight_decay=1e-5, epochs=500, patience=30, min_delta=0.0,
        lam_l1=1e-4, lam_ent=1e-3, lam_lb=5e-4, grad_clip=None, batch_size=512,
    ),
    "goldbeter": GlobalConfig(
        n_experts=2, degree=3, gate_hidden=(64,), activation="silu",
        lr=1e-2, weight_decay=1e-6, epochs=10_000, patience=30, min_delta=1e-4,
        lam_l1=1e-3, lam_ent=1.0, lam_lb=1.0, grad_clip=5.0, batch_size=512,
    ),
    "lineage": GlobalConfig(
        n_experts=3, degree=1, gate_hidden=(64,), activation="tanh",
        lr=1e-2, weight_decay=1e-4, epochs=2000, patience=30, min_delta=1e-4,
        lam_l1=1e-3, lam_ent=2e-3, lam_lb=1e-1, grad_clip=5.0, batch_size=512,
    ),
    "fucci": GlobalConfig(
        n_experts=2, degree=3, gate_hidden=(64,), activation="silu",
        lr=1e-3, weight_decay=1e-6, epochs=5000, patience=100, min_delta=1e-4,
        lam_l1=1e-3, lam_ent=1.0, lam_lb=1.0, grad_clip=5.0, batch_size=512,
    ),
}


def preset_config(name: str, **overrides) -> GlobalConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; valid: {sorted(PRESETS)}")
    return replace(PRESETS[name], **overrides)


@dataclass
class GatingNetwork:
    """MLP from standardized states to a categorical distribution.

    ``input_mean`` and ``input_scale`` come from the training split only.
    ``layers`` alternates hidden affine maps with the final affine map to
    expert logits; weights are (fan_in, fan_out).
    """

    input_mean: np.ndarray
    input_scale: np.ndarray
    layers: list
    activation: str

    @property
    def n_experts(self) -> int:
        return self.layers[-1][0].shape[1]


@dataclass
class GlobalModel:
    library: PolyLibrary
    thetas: np.ndarray
    log_sigmas: np.ndarray
    gate: GatingNetwork
    config: GlobalConfig
    train_log: list = field(default_factory=list)
    events: list = field(default_factory=list)

    @property
    def n_experts(self) -> int:
        return self.thetas.shape[0]

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(self.log_sigmas)


@dataclass
class EnsembleModel:
    """Seed average: one aligned expert set plus every member's gate.

    Expert coefficients and log-sigmas are elementwise means after
    alignment; gates of independently trained MLPs have no meaningful
    parameter correspondence, so all members are kept and the mixing
    probability is their mean at query time.
    """

    library: PolyLibrary
    thetas: np.ndarray
    log_sigmas: np.ndarray
    gates: list
    config: GlobalConfig
    member_seeds: list = field(default_factory=list)

    @property
    def n_experts(self) -> int:
        return self.thetas.shape[0]


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _activate(u: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(u)
    return u * expit(u)


def _activate_grad(u: np.ndarray, h: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - h * h
    s = expit(u)
    return s * (1.0 + u * (1.0 - s))


def gate_forward(gate: GatingNetwork, x: np.ndarray) -> np.ndarray:
    """Mixing probabilities at each state; rows sum to 1."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    h = (X - gate.input_mean) / gate.input_scale
    for w, b in gate.layers[:-1]:
        h = _activate(h @ w + b, gate.activation)
    w, b = gate.layers[-1]
    logits = h @ w + b
    probs = np.exp(log_softmax(logits, axis=1))
    return probs[0] if single else probs


def gate_probabilities(model, x: np.ndarray) -> np.ndarray:
    """Mixing probabilities under a fitted model or seed ensemble."""
    if isinstance(model, EnsembleModel):
        return np.mean([gate_forward(g, x) for g in model.gates], axis=0)
    return gate_forward(model.gate, x)


def gate_entropy_map(model, points: np.ndarray) -> np.ndarray:
    """Shannon entropy (nats) of the mixing distribution at each point."""
    probs = np.atleast_2d(gate_probabilities(model, points))
    logp = np.log(np.maximum(probs, _LOG_FLOOR))
    return -np.sum(probs * logp, axis=1)


# ---------------------------------------------------------------------------
# parameter flattening
# ---------------------------------------------------------------------------

def _init_params(cfg: GlobalConfig, d: int, P: int, rng) -> dict:
    # one noise scale shared by all experts while training: a per-expert
    # sigma lets whichever expert drifts ahead inflate its own scale into a
    # catch-all for badly fit samples instead of fitting them, which derails
    # the decomposition; sharing removes that escape route
    params = {
        "theta": 0.01 * rng.standard_normal((cfg.n_experts, P, d)),
        "log_sigma": np.full(1, np.log(0.5)),
    }
    sizes = [d, *cfg.gate_hidden, cfg.n_experts]
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"gate_w{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"gate_b{i}"] = np.zeros(fan_out)
    return params


def _n_gate_layers(params: dict) -> int:
    return sum(1 for k in params if k.startswith("gate_w"))


def _params_to_model(
    params: dict, lib: PolyLibrary, cfg: GlobalConfig,
    mean: np.ndarray, scale: np.ndarray, train_log: list, events: list,
) -> GlobalModel:
    layers = [
        (params[f"gate_w{i}"].copy(), params[f"gate_b{i}"].copy())
        for i in range(_n_gate_layers(params))
    ]
    gate = GatingNetwork(mean.copy(), scale.copy(), layers, cfg.activation)
    return GlobalModel(
        library=lib,
        thetas=params["theta"].copy(),
        log_sigmas=np.broadcast_to(
            params["log_sigma"], (cfg.n_experts,)
        ).copy(),
        gate=gate,
        config=cfg,
        train_log=train_log,
        events=events,
    )


def _model_to_params(model: GlobalModel) -> dict:
    params = {
        "theta": model.thetas.copy(),
        "log_sigma": model.log_sigmas.copy(),
    }
    for i, (w, b) in enumerate(model.gate.layers):
        params[f"gate_w{i}"] = w.copy()
        params[f"gate_b{i}"] = b.copy()
    return params


# ---------------------------------------------------------------------------
# loss and hand-derived gradients
# ---------------------------------------------------------------------------

def _loss_core(params, Xn, Z, Y, cfg, want_grads):
    """Total loss, components, and (optionally) exact gradients.

    ``Xn`` is the gate input already standardized by the training moments;
    ``Z`` is the polynomial design matrix; ``Y`` the velocities.
    """
    B, d = Y.shape
    K = cfg.n_experts
    act = cfg.activation
    n_layers = _n_gate_layers(params)

    # gate forward with caches for backprop
    pre, hidden = [], [Xn]
    h = Xn
    for i in range(n_layers - 1):
        u = h @ params[f"gate_w{i}"] + params[f"gate_b{i}"]
        h = _activate(u, act)
        pre.append(u)
        hidden.append(h)
    logits = h @ params[f"gate_w{n_layers - 1}"] + params[f"gate_b{n_layers - 1}"]
    logpi = log_softmax(logits, axis=1)
    pi = np.exp(logpi)

    # expert log densities; log_sigma may be per expert (K,) or shared (1,)
    sigma2 = np.exp(2.0 * params["log_sigma"])
    resid = Y[None, :, :] - np.einsum("bp,kpd->kbd", Z, params["theta"])
    sq = np.einsum("kbd,kbd->kb", resid, resid)
    log_dens = -0.5 * sq / sigma2[:, None] - 0.5 * d * np.log(
        2.0 * np.pi * sigma2
    )[:, None]

    joint = logpi.T + log_dens                      # (K, B)
    lse = logsumexp(joint, axis=0)
    nll = -float(np.mean(lse))

    ent_per = -np.sum(pi * logpi, axis=1)
    ent = cfg.lam_ent * float(np.mean(ent_per))
    pibar = np.mean(pi, axis=0)
    log_k_bar = np.log(np.maximum(K * pibar, _LOG_FLOOR))
    lb = cfg.lam_lb * float(np.sum(pibar * log_k_bar))
    l1 = cfg.lam_l1 * float(np.sum(np.abs(params["theta"])))
    total = nll + l1 + ent + lb
    components = {"nll": nll, "l1": l1, "ent": ent, "lb": lb}
    if not want_grads:
        return total, components, None

    gamma = np.exp(joint - lse[None, :])            # responsibilities (K, B)

    grads = {}
    grads["theta"] = (
        -np.einsum("bp,kb,kbd->kpd", Z, gamma, resid) / (B * sigma2[:, None, None])
        + cfg.lam_l1 * np.sign(params["theta"])
    )
    g_ls = -np.sum(gamma * (sq / sigma2[:, None] - d), axis=1) / B
    if params["log_sigma"].shape[0] == 1:
        g_ls = g_ls.sum(keepdims=True)
    grads["log_sigma"] = g_ls

    # logits gradient: likelihood pull, entropy push, usage balance
    dlogits = (pi - gamma.T) / B
    dlogits += cfg.lam_ent / B * (-pi * (logpi + ent_per[:, None]))
    dlogits += cfg.lam_lb / B * pi * (log_k_bar[None, :] - (pi @ log_k_bar)[:, None])

    dh = dlogits
    for i in range(n_layers - 1, -1, -1):
        grads[f"gate_w{i}"] = hidden[i].T @ dh
        grads[f"gate_b{i}"] = np.sum(dh, axis=0)
        if i > 0:
            du = dh @ params[f"gate_w{i}"].T
            dh = du * _activate_grad(pre[i - 1], hidden[i], act)
    return total, components, grads


def _prepare_inputs(model: GlobalModel, states, velocities):
    states = np.asarray(states, dtype=float)
    velocities = np.asarray(velocities, dtype=float)
    Xn = (states - model.gate.input_mean) / model.gate.input_scale
    Z = design_matrix(model.library, states)
    return Xn, Z, velocities


def batch_loss(model: GlobalModel, states, velocities):
    """Total training objective and its components on one batch."""
    Xn, Z, Y = _prepare_inputs(model, states, velocities)
    params = _model_to_params(model)
    total, components, _ = _loss_core(params, Xn, Z, Y, model.config, False)
    return total, components


def loss_gradients(model: GlobalModel, states, velocities) -> dict:
    """Exact batch-loss gradients for every trainable parameter."""
    Xn, Z, Y = _prepare_inputs(model, states, velocities)
    params = _model_to_params(model)
    _, _, grads = _loss_core(params, Xn, Z, Y, model.config, True)
    return grads


def posterior_responsibilities(model, states, velocities) -> np.ndarray:
    """Per-sample expert posterior given both the state and its velocity."""
    states = np.asarray(states, dtype=float)
    Y = np.asarray(velocities, dtype=float)
    d = Y.shape[1]
    if isinstance(model, EnsembleModel):
        pi = gate_probabilities(model, states)
        lib, thetas, log_sigmas = model.library, model.thetas, model.log_sigmas
    else:
        pi = gate_forward(model.gate, states)
        lib, thetas, log_sigmas = model.library, model.thetas, model.log_sigmas
    Z = design_matrix(lib, states)
    sigma2 = np.exp(2.0 * log_sigmas)
    resid = Y[None, :, :] - np.einsum("bp,kpd->kbd", Z, thetas)
    sq = np.einsum("kbd,kbd->kb", resid, resid)
    log_dens = -0.5 * sq / sigma2[:, None] - 0.5 * d * np.log(
        2.0 * np.pi * sigma2
    )[:, None]
    joint = np.log(np.maximum(pi.T, _LOG_FLOOR)) + log_dens
    return np.exp(joint - logsumexp(joint, axis=0)[None, :]).T


def predict_assignments(model, data: SnapshotDataset) -> np.ndarray:
    """Most likely expert per sample under the velocity-aware posterior."""
    R = posterior_responsibilities(model, data.states, data.velocities)
    return np.argmax(R, axis=1)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment accumulators keyed like the parameter dict."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0


def adam_step(params, grads, state, lr, weight_decay=0.0, clip=None):
    """One Adam update in place.

    Gradients are first rescaled so their joint norm is at most ``clip``;
    decoupled weight decay is applied to gate weight matrices only (keys
    ``gate_w*``), never to biases or expert coefficients.
    """
    if clip is not None:
        gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if gnorm > clip:
            scale = clip / gnorm
            grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    bias1 = 1.0 - _ADAM_B1 ** state.t
    bias2 = 1.0 - _ADAM_B2 ** state.t
    for k, g in grads.items():
        state.m[k] = _ADAM_B1 * state.m[k] + (1.0 - _ADAM_B1) * g
        state.v[k] = _ADAM_B2 * state.v[k] + (1.0 - _ADAM_B2) * g * g
        step = (state.m[k] / bias1) / (np.sqrt(state.v[k] / bias2) + _ADAM_EPS)
        if weight_decay > 0.0 and k.startswith("gate_w"):
            step = step + weight_decay * params[k]
        params[k] -= lr * step
    return params, state


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _full_loss(params, Xn, Z, Y, cfg) -> float:
    total, _, _ = _loss_core(params, Xn, Z, Y, cfg, False)
    return total


def _fit_one_restart(cfg, lib, mean, scale, train_arrays, val_arrays, rng):
    Xn, Z, Y = train_arrays
    n = Y.shape[0]
    params = _init_params(cfg, Y.shape[1], lib.n_terms, rng)
    state = AdamState(params)
    events = []

    val0 = _full_loss(params, *val_arrays, cfg)
    log = [{"epoch": 0, "train": _full_loss(params, Xn, Z, Y, cfg), "val": val0}]
    best_val = val0
    best_params = {k: v.copy() for k, v in params.items()}
    sig_best, bad = val0, 0

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        aborted = False
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            total, _, grads = _loss_core(
                params, Xn[idx], Z[idx], Y[idx], cfg, True
            )
            if not np.isfinite(total):
                events.append({
                    "type": "nonfinite_loss", "epoch": epoch,
                    "batch_start": int(start),
                })
                aborted = True
                break
            adam_step(params, grads, state, cfg.lr, cfg.weight_decay, cfg.grad_clip)
        if aborted:
            break
        tr = _full_loss(params, Xn, Z, Y, cfg)
        va = _full_loss(params, *val_arrays, cfg)
        log.append({"epoch": epoch, "train": tr, "val": va})
        if not (np.isfinite(tr) and np.isfinite(va)):
            events.append({"type": "nonfinite_loss", "epoch": epoch, "batch_start": -1})
            break
        if va < best_val:
            best_val = va
            best_params = {k: v.copy() for k, v in params.items()}
        # patience counts epochs without a clear improvement; the snapshot
        # above still tracks any strict one so the returned model attains
        # the minimum recorded validation loss
        if va < sig_best - cfg.min_delta:
            sig_best, bad = va, 0
        else:
            bad += 1
            if bad >= cfg.patience:
                break
    return best_val, best_params, log, events


def fit_global(
    train: SnapshotDataset, cfg: GlobalConfig, val: SnapshotDataset | None = None
) -> GlobalModel:
    """Train the gated mixture; best validation snapshot over restarts.

    The gate input standardization is computed from the training split
    alone. When no validation split is given the training data doubles as
    the monitor.
    """
    lib = build_library(train.dim, cfg.degree)
    mean = np.mean(train.states, axis=0)
    scale = np.maximum(np.std(train.states, axis=0), _SCALE_FLOOR)

    def arrays(ds):
        Xn = (ds.states - mean) / scale
        return Xn, design_matrix(lib, ds.states), ds.velocities

    train_arrays = arrays(train)
    val_arrays = arrays(val) if val is not None else train_arrays

    children = np.random.SeedSequence([cfg.seed, 919]).spawn(cfg.n_restarts)
    best = None
    for child in children:
        rng = np.random.default_rng(child)
        result = _fit_one_restart(
            cfg, lib, mean, scale, train_arrays, val_arrays, rng
        )
        if best is None or result[0] < best[0]:
            best = result
    _, params, log, events = best
    return _params_to_model(params, lib, cfg, mean, scale, log, events)


# ---------------------------------------------------------------------------
# seed ensembling
# ---------------------------------------------------------------------------

def _align_to(reference: np.ndarray, model: GlobalModel):
    """Permutation of ``model``'s experts minimizing distance to reference."""
    from .metrics import best_permutation

    return best_permutation(model.thetas, reference)


def ensemble_fit(
    train: SnapshotDataset,
    cfg: GlobalConfig,
    n_seeds: int,
    val: SnapshotDataset | None = None,
) -> EnsembleModel:
    """Fit one model per seed and average the aligned experts.

    Members whose training raises are dropped with a warning; at least one
    must survive. Expert order follows the first surviving member; each
    member's gate output columns are permuted to that order before storage.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    members, seeds = [], []
    for i in range(n_seeds):
        member_cfg = replace(cfg, seed=cfg.seed + i)
        try:
            members.append(fit_global(train, member_cfg, val))
            seeds.append(member_cfg.seed)
        except Exception as exc:  # noqa: BLE001 - seed failures are dropped
            warnings.warn(f"ensemble member seed {member_cfg.seed} failed: {exc}")
    if not members:
        raise RuntimeError("every ensemble member failed")
    return combine_members(members, cfg, seeds)


def combine_members(
    members: list, cfg: GlobalConfig, member_seeds: list | None = None
) -> EnsembleModel:
    """Align every member's experts to the first member and average.

    Alignment permutes each member's theta stack (and the matching gate
    output columns) into the reference order before the elementwise mean.
    """
    ref = members[0].thetas
    thetas, log_sigmas, gates = [], [], []
    for m in members:
        # alignment[k] = index of the reference expert matched to fitted k,
        # so inverting it reorders this member into reference order
        alignment = np.asarray(_align_to(ref, m))
        inverse = np.argsort(alignment)
        thetas.append(m.thetas[inverse])
        log_sigmas.append(m.log_sigmas[inverse])
        w, b = m.gate.layers[-1]
        layers = [*m.gate.layers[:-1], (w[:, inverse], b[inverse])]
        gates.append(GatingNetwork(
            m.gate.input_mean, m.gate.input_scale, layers, m.gate.activation
        ))
    return EnsembleModel(
        library=members[0].library,
        thetas=np.mean(thetas, axis=0),
        log_sigmas=np.mean(log_sigmas, axis=0),
        gates=gates,
        config=cfg,
        member_seeds=member_seeds if member_seeds is not None else [],
    )
