"""Command-line entry point: generate / fit / rollout / evaluate / benchmark.

Every command resolves its settings from (lowest to highest precedence)
dataclass defaults or a named preset, a config file given with --config,
then explicit flags. The fully resolved configuration is echoed into the
output directory as ``config_resolved.ini``; feeding that file back with
the same command reproduces the run byte for byte. Exit codes: 0 success,
2 usage or config error, 3 runtime or numerical failure.
"""

import argparse
import configparser
import csv
import hashlib
import json
import multiprocessing
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .datagen import (
    SYSTEM_DEFAULTS,
    GeneratorConfig,
    SnapshotDataset,
    branching_truth_finals,
    generate,
    goldbeter_truth_finals,
    load_dataset,
    resolve_config,
    save_dataset,
    split_dataset,
)
from .gated import (
    EnsembleModel,
    GlobalConfig,
    GlobalModel,
    ensemble_fit,
    fit_global,
    gate_probabilities,
    preset_config,
)
from .library import build_library
from .local import EmConfig, LocalModel, fit_local
from .local import predict_assignments as local_assignments
from .gated import predict_assignments as gated_assignments
from .metrics import (
    ari,
    metric_record,
    nmi,
    recovery_report,
    roc_auc,
    wasserstein_joint,
    wasserstein_1d,
)
from .modelio import load_model, save_model
from .datagen import true_expert_thetas
from .rollout import RolloutConfig, RolloutResult, rollout, save_rollout

SEED_ENV = "MODE_DYN_SEED"


class CliError(Exception):
    """Carries the process exit code: 2 config/usage, 3 runtime failure."""

    def __init__(self, message, code=2):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# config files: flat INI-like sections, JSON alternative
# ---------------------------------------------------------------------------

_SECTION_SCHEMAS = {
    "generator": GeneratorConfig,
    "local": EmConfig,
    "global": GlobalConfig,
    "rollout": RolloutConfig,
}

# [run] carries command-level scalars; [eval] carries evaluation knobs.
_RUN_KEYS = ("system", "variant", "preset", "strict", "data", "model", "init",
             "from_data", "suite", "ensemble", "n_particles")
_EVAL_KEYS = ("task", "expert", "w_cap", "n_particles", "truth_seed")


def read_config_file(path) -> dict:
    """Parse a config file into {section: {key: raw string}}.

    INI-like text by default; a file whose first non-blank character is
    ``{`` is read as JSON with the same section/key layout.
    """
    path = Path(path)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise CliError(f"bad JSON config {path}: {e}")
        if not isinstance(doc, dict) or not all(
            isinstance(v, dict) for v in doc.values()
        ):
            raise CliError("JSON config must map section names to key/value objects")
        return {
            sec: {k: _raw_to_string(v) for k, v in kv.items()}
            for sec, kv in doc.items()
        }
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as e:
        raise CliError(f"bad config {path}: {e}")
    return {sec: dict(parser.items(sec)) for sec in parser.sections()}


def _raw_to_string(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(e) for e in v)
    return str(v)


def _coerce(raw: str, annotation: str, key: str):
    """Convert a raw config string according to a dataclass annotation."""
    text = raw.strip()
    optional = "None" in annotation
    if optional and text.lower() in ("none", "null", ""):
        return None
    base = annotation.replace(" ", "").replace("|None", "")
    try:
        if base == "int":
            return int(text)
        if base == "float":
            return float(text)
        if base == "bool":
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if base == "tuple":
            if text == "" or text.lower() == "()":
                return ()
            return tuple(int(e) for e in text.split(","))
        return text
    except ValueError:
        raise CliError(f"bad value for {key}: {raw!r} (expected {annotation})")


def section_kwargs(sections: dict, name: str) -> dict:
    """Coerce one section's raw strings by the dataclass annotations.

    Unknown keys raise so typos never pass silently.
    """
    cls = _SECTION_SCHEMAS[name]
    fields = cls.__dataclass_fields__
    values = sections.get(name, {})
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise CliError(
            f"unknown keys in [{name}]: {', '.join(unknown)}; "
            f"valid: {', '.join(fields)}"
        )
    return {
        k: _coerce(v, str(fields[k].type), f"[{name}] {k}")
        for k, v in values.items()
    }


def section_to_config(sections: dict, name: str, base=None, **extra):
    """Build the dataclass for one section over ``base`` (or defaults).

    ``extra`` entries (flag overrides) win over the section's values.
    """
    kwargs = section_kwargs(sections, name)
    kwargs.update(extra)
    try:
        if base is not None:
            return replace(base, **kwargs)
        return _SECTION_SCHEMAS[name](**kwargs)
    except (ValueError, TypeError) as e:
        raise CliError(f"invalid [{name}] config: {e}")


def _check_known(sections: dict, allowed: tuple):
    for sec in sections:
        if sec not in allowed:
            raise CliError(
                f"unknown config section [{sec}]; valid: {', '.join(allowed)}"
            )
    for sec, keys in (("run", _RUN_KEYS), ("eval", _EVAL_KEYS)):
        extra = sorted(set(sections.get(sec, {})) - set(keys))
        if extra:
            raise CliError(
                f"unknown keys in [{sec}]: {', '.join(extra)}; "
                f"valid: {', '.join(keys)}"
            )


def resolve_seed(flag_seed, sections: dict, section: str):
    """Seed precedence: flag > config value > MODE_DYN_SEED env > None."""
    if flag_seed is not None:
        return flag_seed
    raw = sections.get(section, {}).get("seed")
    if raw is not None:
        return _coerce(raw, "int", f"[{section}] seed")
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise CliError(f"{SEED_ENV} must be an integer, got {env!r}")
    return None


def _config_to_section(cfg) -> dict:
    out = {}
    for k in cfg.__dataclass_fields__:
        out[k] = _raw_to_string(getattr(cfg, k))
    return out


def write_echo(out_dir, sections: dict) -> Path:
    """Write the fully resolved config; returns the file path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for sec, kv in sections.items():
        if kv:
            parser[sec] = kv
    path = out_dir / "config_resolved.ini"
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
    return path


def _config_hash(sections: dict) -> str:
    blob = json.dumps(sections, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    sections = read_config_file(args.config) if args.config else {}
    _check_known(sections, ("generator", "run"))
    system = args.system or sections.get("run", {}).get("system")
    if system is None:
        raise CliError("generate needs --system (or [run] system in the config)")
    if system not in SYSTEM_DEFAULTS:
        raise CliError(
            f"unknown system {system!r}; valid: {', '.join(sorted(SYSTEM_DEFAULTS))}"
        )
    cfg = section_to_config(sections, "generator")
    overrides = {}
    if args.n is not None:
        overrides["n_samples"] = args.n
    if args.sigma is not None:
        overrides["noise_sigma"] = args.sigma
    seed = resolve_seed(args.seed, sections, "generator")
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        cfg = replace(cfg, **overrides)
    cfg = resolve_config(cfg, system)
    try:
        ds = generate(system, cfg)
        train, val = split_dataset(ds, cfg.split_fraction, seed=cfg.seed)
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as e:
        raise CliError(f"generation failed: {e}", code=3)
    out = Path(args.out)
    save_dataset(train, out, "train")
    save_dataset(val, out, "val")
    meta = {k: v for k, v in ds.meta.items()}
    meta["split"] = {"fraction": cfg.split_fraction, "train": train.n, "val": val.n}
    with open(out / "meta.json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, default=_json_default)
        fh.write("\n")
    write_echo(out, {
        "run": {"system": system},
        "generator": _config_to_section(cfg),
    })
    print(f"wrote {train.n} train / {val.n} val samples of {system} to {out}")
    return 0


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)!r}")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _load_split(data_dir) -> tuple:
    data_dir = Path(data_dir)
    train_path = data_dir / "train.csv"
    if not train_path.exists():
        raise CliError(f"no train.csv under {data_dir}")
    train = load_dataset(train_path)
    val_path = data_dir / "val.csv"
    val = load_dataset(val_path) if val_path.exists() else None
    return train, val


def cmd_fit(args) -> int:
    sections = read_config_file(args.config) if args.config else {}
    _check_known(sections, ("local", "global", "run"))
    run = sections.get("run", {})
    variant = args.variant or run.get("variant")
    if variant not in ("local", "global"):
        raise CliError("fit needs --variant local or global")
    data_dir = args.data or run.get("data")
    if data_dir is None:
        raise CliError("fit needs --data DIR")
    train, val = _load_split(data_dir)
    out_path = Path(args.out or "model.json")
    echo_run = {"variant": variant, "data": str(data_dir)}

    if variant == "local":
        cfg = section_to_config(sections, "local")
        overrides = {}
        if args.k is not None:
            overrides["n_clusters"] = args.k
        if args.degree is not None:
            overrides["degree"] = args.degree
        if args.alpha is not None:
            overrides["alpha"] = args.alpha
        seed = resolve_seed(args.seed, sections, "local")
        if seed is not None:
            overrides["seed"] = seed
        if overrides:
            cfg = replace(cfg, **overrides)
        model = fit_local(train, cfg, val=val)
        converged = model.converged
        log_rows = [{"iteration": i, "objective": v}
                    for i, v in enumerate(model.train_log)]
        final = {"train_objective": model.train_log[-1] if model.train_log else None}
        echo = {"run": echo_run, "local": _config_to_section(cfg)}
    else:
        preset = args.preset or run.get("preset")
        if preset is not None:
            try:
                base = preset_config(preset)
            except ValueError as e:
                raise CliError(str(e))
            echo_run["preset"] = preset
        else:
            base = GlobalConfig()
        cfg = section_to_config(sections, "global", base=base)
        overrides = {}
        if args.k is not None:
            overrides["n_experts"] = args.k
        if args.degree is not None:
            overrides["degree"] = args.degree
        seed = resolve_seed(args.seed, sections, "global")
        if seed is not None:
            overrides["seed"] = seed
        if overrides:
            cfg = replace(cfg, **overrides)
        n_members = args.ensemble if args.ensemble is not None else (
            int(run["ensemble"]) if "ensemble" in run else None)
        if n_members is not None and n_members > 1:
            model = ensemble_fit(train, cfg, n_seeds=n_members, val=val)
            converged = True
            log_rows = []
            final = {}
            echo_run["ensemble"] = str(n_members)
        else:
            model = fit_global(train, cfg, val=val)
            converged = not any(
                e.get("type") == "nonfinite_loss" for e in model.events
            )
            log_rows = [dict(e) for e in model.train_log]
            final = {"train_objective": model.train_log[-1]["train"],
                     "val_objective": model.train_log[-1]["val"]}
        echo = {"run": echo_run, "global": _config_to_section(cfg)}

    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out_path)
    if log_rows:
        log_path = out_path.with_name(out_path.stem + "_train_log.csv")
        with open(log_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            cols = list(log_rows[0])
            writer.writerow(cols)
            for row in log_rows:
                writer.writerow([_csv_num(row[c]) for c in cols])
    write_echo(out_path.parent, echo)
    pieces = [f"{k}={v:.6g}" for k, v in final.items() if v is not None]
    print(f"fit {variant} model -> {out_path}" +
          (f" ({', '.join(pieces)})" if pieces else ""))
    if args.strict and not converged:
        raise CliError("fit did not converge (--strict)", code=3)
    return 0


def _csv_num(v) -> str:
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


# ---------------------------------------------------------------------------
# rollout
# ---------------------------------------------------------------------------

def _read_starts(path, d: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise CliError(f"initial-states file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    cols = [i for i, h in enumerate(header) if h.strip() in
            [f"x{j}" for j in range(d)]]
    if len(cols) != d:
        raise CliError(
            f"{path} must carry columns x0..x{d - 1} matching the model dimension"
        )
    try:
        return np.array([[float(r[i]) for i in cols] for r in rows])
    except ValueError as e:
        raise CliError(f"bad number in {path}: {e}")


def cmd_rollout(args) -> int:
    sections = read_config_file(args.config) if args.config else {}
    _check_known(sections, ("rollout", "run"))
    run = sections.get("run", {})
    model_path = args.model or run.get("model")
    if model_path is None:
        raise CliError("rollout needs --model FILE")
    if not Path(model_path).exists():
        raise CliError(f"model file not found: {model_path}")
    try:
        model = load_model(model_path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        raise CliError(f"cannot load model {model_path}: {e}")
    d = model.library.dim

    overrides = {}
    if args.steps is not None:
        overrides["n_steps"] = args.steps
    if args.dt is not None:
        overrides["dt"] = args.dt
    if args.sigma_b is not None:
        overrides["sigma_b"] = args.sigma_b
    if args.policy is not None:
        overrides["expert_policy"] = args.policy
    if args.record_gates:
        overrides["record_gates"] = True
    seed = resolve_seed(args.seed, sections, "rollout")
    if seed is not None:
        overrides["seed"] = seed
    merged = section_kwargs(sections, "rollout")
    merged.update(overrides)
    if "n_steps" not in merged:
        raise CliError("rollout needs --steps (or [rollout] n_steps)")
    try:
        cfg = RolloutConfig(**merged)
    except ValueError as e:
        raise CliError(f"invalid rollout config: {e}")

    init = args.init or run.get("init")
    from_data = args.from_data or run.get("from_data")
    if (init is None) == (from_data is None):
        raise CliError("rollout needs exactly one of --init FILE or --from-data DIR")
    if init is not None:
        x0 = _read_starts(init, d)
    else:
        train, _ = _load_split(from_data)
        if train.dim != d:
            raise CliError("dataset dimension does not match the model")
        m = args.n_particles or int(run.get("n_particles", 256))
        rng = np.random.default_rng(cfg.seed)
        idx = rng.choice(train.n, size=min(m, train.n), replace=False)
        x0 = train.states[np.sort(idx)]

    result = rollout(model, x0, cfg)
    out = Path(args.out or "rollout_out")
    out.mkdir(parents=True, exist_ok=True)
    save_rollout(result, model, out / "trajectories.csv")
    _write_finals(result, out / "finals.csv")
    echo_run = {"model": str(model_path)}
    if init is not None:
        echo_run["init"] = str(init)
    else:
        echo_run["from_data"] = str(from_data)
        echo_run["n_particles"] = str(x0.shape[0])
    write_echo(out, {"run": echo_run, "rollout": _config_to_section(cfg)})
    n_div = int(result.diverged.sum())
    print(f"rolled {x0.shape[0]} particles x {cfg.n_steps} steps -> {out} "
          f"({n_div} diverged)")
    if result.diverged.all():
        raise CliError("all particles diverged", code=3)
    return 0


def _write_finals(result: RolloutResult, path) -> None:
    d = result.trajectories.shape[2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["particle"] + [f"x{j}" for j in range(d)]
                        + ["divergence_step"])
        for i, x in enumerate(result.final_states):
            writer.writerow([i] + [f"{v:.12g}" for v in x]
                            + [int(result.divergence_step[i])])


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _model_assignments(model, data: SnapshotDataset) -> np.ndarray:
    if isinstance(model, LocalModel):
        return local_assignments(model, data)
    return gated_assignments(model, data)


def _exit_expert(model, states: np.ndarray, choice: str) -> int:
    if choice != "minor":
        try:
            k = int(choice)
        except ValueError:
            raise CliError("eval expert must be 'minor' or an integer index")
        if not 0 <= k < model.n_experts:
            raise CliError(f"expert index {k} out of range")
        return k
    usage = gate_probabilities(model, states).mean(axis=0)
    return int(np.argmin(usage))


def _forecast_records(model, train: SnapshotDataset, cfg: RolloutConfig,
                      n_particles: int, truth_seed: int, w_cap: int) -> list:
    meta = train.meta
    system = meta.get("generator")
    rng = np.random.default_rng(cfg.seed)
    if system == "goldbeter_exit":
        pool = train.states if train.labels is None else \
            train.states[train.labels == 0]
        idx = rng.choice(pool.shape[0], size=min(n_particles, pool.shape[0]),
                         replace=False)
        x0 = pool[np.sort(idx)]
        dt = float(meta.get("dt", cfg.dt))
        n_steps = cfg.n_steps or int(round((float(meta["period"]) + 25.0) / dt))
        truth, _ = goldbeter_truth_finals(
            x0, n_steps, dt, seed=truth_seed,
            exit_probability=float(meta.get("exit_probability", 0.15)),
        )
    elif system == "branching":
        x0 = rng.normal(scale=np.sqrt(0.08), size=(n_particles, 2))
        dt = float(meta.get("dt", cfg.dt))
        n_steps = cfg.n_steps or 75
        truth, _ = branching_truth_finals(x0, seed=truth_seed)
    else:
        raise CliError(
            f"forecast task knows goldbeter_exit and branching, not {system!r}"
        )
    roll_cfg = replace(cfg, n_steps=n_steps, dt=dt)
    try:
        from .rollout import pushforward

        finals = pushforward(model, x0, roll_cfg)
    except RuntimeError as e:
        raise CliError(f"forecast rollout failed: {e}", code=3)
    records = [
        metric_record("w1_joint", wasserstein_joint(finals, truth, p=1, cap=w_cap),
                      n_a=finals.shape[0], n_b=truth.shape[0], seed=roll_cfg.seed),
        metric_record("w2_joint", wasserstein_joint(finals, truth, p=2, cap=w_cap),
                      n_a=finals.shape[0], n_b=truth.shape[0], seed=roll_cfg.seed),
    ]
    for j in range(finals.shape[1]):
        records.append(metric_record(
            f"w1_x{j}", wasserstein_1d(finals[:, j], truth[:, j]),
            n_a=finals.shape[0], n_b=truth.shape[0], seed=roll_cfg.seed,
        ))
    return records


def cmd_evaluate(args) -> int:
    sections = read_config_file(args.config) if args.config else {}
    _check_known(sections, ("eval", "rollout", "run"))
    run = sections.get("run", {})
    ev = sections.get("eval", {})
    task = args.task or ev.get("task")
    if task not in ("clustering", "forecast", "recovery", "auc"):
        raise CliError("evaluate needs --task clustering|forecast|recovery|auc")
    model_path = args.model or run.get("model")
    data_dir = args.data or run.get("data")
    if model_path is None or data_dir is None:
        raise CliError("evaluate needs --model FILE and --data DIR")
    if not Path(model_path).exists():
        raise CliError(f"model file not found: {model_path}")
    model = load_model(model_path)
    train, val = _load_split(data_dir)
    scored = val if val is not None else train

    if task == "clustering":
        if scored.labels is None:
            raise CliError("clustering task needs labeled data")
        pred = _model_assignments(model, scored)
        records = [
            metric_record("ari", ari(scored.labels, pred), n_a=scored.n),
            metric_record("nmi", nmi(scored.labels, pred), n_a=scored.n),
        ]
    elif task == "recovery":
        system = args.system or run.get("system") or train.meta.get("generator")
        if system is None:
            raise CliError("recovery task needs --system or dataset metadata")
        try:
            truth = true_expert_thetas(system, model.library)
        except ValueError as e:
            raise CliError(str(e))
        rep = recovery_report(model, truth)
        records = [
            metric_record("max_true_term_error", rep.max_true_term_error),
            metric_record("max_spurious_magnitude", rep.max_spurious_magnitude),
        ]
        extra = {
            "alignment": list(rep.alignment),
            "coefficients": [
                {"expert": k, "term": list(term), "output": j,
                 "true": t, "estimated": f, "error": e}
                for k, term, j, t, f, e in rep.table
            ],
        }
    elif task == "auc":
        if scored.labels is None:
            raise CliError("auc task needs labeled data")
        if not isinstance(model, (GlobalModel, EnsembleModel)):
            raise CliError("auc task needs a gated (global or ensemble) model")
        k = _exit_expert(model, train.states, args.expert or ev.get("expert", "minor"))
        score = gate_probabilities(model, scored.states)[:, k]
        records = [metric_record("roc_auc", roc_auc(score, scored.labels),
                                 n_a=scored.n, expert=k)]
    else:
        merged = section_kwargs(sections, "rollout")
        # n_steps 0 means: derive the horizon from the dataset's generator
        merged.setdefault("n_steps", 0)
        seed = resolve_seed(args.seed, sections, "rollout")
        if seed is not None:
            merged["seed"] = seed
        try:
            roll_cfg = RolloutConfig(**merged)
        except ValueError as e:
            raise CliError(f"invalid rollout config: {e}")
        n_particles = int(args.n_particles or ev.get("n_particles", 384))
        truth_seed = int(ev.get("truth_seed", 10_000 + roll_cfg.seed))
        w_cap = int(ev.get("w_cap", 1024))
        records = _forecast_records(model, train, roll_cfg, n_particles,
                                    truth_seed, w_cap)

    report = {
        "task": task,
        "model": str(model_path),
        "data": str(data_dir),
        "dataset_seed": train.meta.get("seed"),
        "model_seed": getattr(model.config, "seed", None),
        "records": records,
    }
    if task == "recovery":
        report.update(extra)
    out = Path(args.out or "eval_out")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, default=_json_default)
        fh.write("\n")
    echo = {"run": {"model": str(model_path), "data": str(data_dir)},
            "eval": {"task": task}}
    if task == "forecast":
        echo["rollout"] = _config_to_section(roll_cfg)
    write_echo(out, echo)
    for r in records:
        print(f"{r['metric']}: {r['value']:.6g}")
    return 0


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

_CLUSTER_SYSTEMS = ("bistable", "lotka_volterra", "lorenz")
_ROBUST_SIGMAS = (0.0, 1e-5, 1e-2, 1e-1, 2e-1)
_ROBUST_SIZES = (100, 800, 8000)


def _cluster_cell(task):
    """One clustering cell: returns (key, ari, nmi) or (key, error string)."""
    system, seed, n, sigma = task
    key = (system, seed, n, sigma)
    try:
        cfg = resolve_config(
            GeneratorConfig(n_samples=n, noise_sigma=sigma, seed=seed), system
        )
        ds = generate(system, cfg)
        train, val = split_dataset(ds, 0.8, seed=seed)
        model = fit_local(
            train, EmConfig(n_clusters=2, degree=2, n_restarts=10, seed=seed),
            val=val,
        )
        pred = local_assignments(model, val)
        return key, float(ari(val.labels, pred)), float(nmi(val.labels, pred))
    except Exception as e:  # partial-failure tolerant by contract
        return key, f"{type(e).__name__}: {e}"


def _recovery_cell(task):
    system, seed = task
    key = (system, seed)
    try:
        cfg = resolve_config(GeneratorConfig(seed=seed), system)
        ds = generate(system, cfg)
        train, val = split_dataset(ds, 0.8, seed=seed)
        model = fit_local(
            train, EmConfig(n_clusters=2, degree=2, n_restarts=10, seed=seed),
            val=val,
        )
        truth = true_expert_thetas(system, model.library)
        rep = recovery_report(model, truth)
        return key, float(rep.max_true_term_error), float(rep.max_spurious_magnitude)
    except Exception as e:
        return key, f"{type(e).__name__}: {e}"


def _forecast_cell(task):
    system, seed = task
    key = (system, seed)
    try:
        if system == "goldbeter_exit":
            gen = resolve_config(
                GeneratorConfig(seed=seed, noise_sigma=0.0), system
            )
            base = preset_config("goldbeter")
        else:
            gen = resolve_config(GeneratorConfig(seed=seed), system)
            base = preset_config("lineage")
        ds = generate(system, gen)
        train, val = split_dataset(ds, 0.8, seed=seed)
        mode_cfg = replace(base, seed=seed)
        k1_cfg = replace(base, seed=seed, n_experts=1, lam_ent=0.0, lam_lb=0.0)
        mode = fit_global(train, mode_cfg, val=val)
        k1 = fit_global(train, k1_cfg, val=val)
        roll = RolloutConfig(n_steps=1, seed=seed)
        out = {}
        for name, model in (("mode", mode), ("k1", k1)):
            recs = _forecast_records(model, train, roll, n_particles=384,
                                     truth_seed=10_000 + seed, w_cap=1024)
            out[name] = {r["metric"]: r["value"] for r in recs}
        return key, out
    except Exception as e:
        return key, f"{type(e).__name__}: {e}"


def _run_pool(worker, tasks, jobs: int) -> list:
    if jobs <= 1 or len(tasks) <= 1:
        results = [worker(t) for t in tasks]
    else:
        with multiprocessing.Pool(processes=jobs) as pool:
            results = pool.map(worker, tasks)
    return sorted(results, key=lambda r: str(r[0]))


def cmd_benchmark(args) -> int:
    sections = read_config_file(args.config) if args.config else {}
    _check_known(sections, ("run",))
    suite = args.suite or sections.get("run", {}).get("suite")
    if suite not in ("clustering", "forecasting", "recovery", "robustness"):
        raise CliError(
            "benchmark needs --suite clustering|forecasting|recovery|robustness"
        )
    out = Path(args.out or f"benchmark_{suite}")
    out.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs or 1
    base_seed = resolve_seed(args.seed, sections, "run") or 0
    t0 = time.time()
    failures = []

    if suite == "clustering":
        tasks = [(s, base_seed + i, 10_000, 0.1)
                 for s in _CLUSTER_SYSTEMS for i in range(5)]
        results = _run_pool(_cluster_cell, tasks, jobs)
        rows, by_system = [], {}
        for key, *rest in results:
            system, seed, n, sigma = key
            if len(rest) == 1:
                failures.append({"cell": list(key), "error": rest[0]})
                continue
            a, m = rest
            rows.append((system, seed, a, m))
            by_system.setdefault(system, []).append((a, m))
        _write_table(out / "clustering.csv",
                     ["system", "seed", "ari", "nmi"], rows)
        tables = {
            s: {"median_ari": float(np.median([a for a, _ in v])),
                "median_nmi": float(np.median([m for _, m in v])),
                "n_seeds": len(v)}
            for s, v in sorted(by_system.items())
        }
    elif suite == "recovery":
        tasks = [(s, base_seed + i) for s in _CLUSTER_SYSTEMS for i in range(10)]
        results = _run_pool(_recovery_cell, tasks, jobs)
        rows, by_system = [], {}
        for key, *rest in results:
            system, seed = key
            if len(rest) == 1:
                failures.append({"cell": list(key), "error": rest[0]})
                continue
            nz, z = rest
            rows.append((system, seed, nz, z))
            by_system.setdefault(system, []).append((nz, z))
        _write_table(
            out / "recovery.csv",
            ["system", "seed", "max_true_term_error", "max_spurious_magnitude"],
            rows,
        )
        tables = {
            s: {"mean_true_term_error": float(np.mean([a for a, _ in v])),
                "var_true_term_error": float(np.var([a for a, _ in v])),
                "mean_spurious_magnitude": float(np.mean([b for _, b in v])),
                "var_spurious_magnitude": float(np.var([b for _, b in v])),
                "n_seeds": len(v)}
            for s, v in sorted(by_system.items())
        }
    elif suite == "forecasting":
        tasks = [(s, base_seed + i)
                 for s in ("goldbeter_exit", "branching") for i in range(3)]
        results = _run_pool(_forecast_cell, tasks, jobs)
        rows, tables = [], {}
        for key, payload in results:
            system, seed = key
            if isinstance(payload, str):
                failures.append({"cell": list(key), "error": payload})
                continue
            for name, metrics in payload.items():
                for metric, value in metrics.items():
                    rows.append((system, seed, name, metric, value))
            tables.setdefault(system, []).append(payload)
        _write_table(out / "forecasting.csv",
                     ["system", "seed", "model", "metric", "value"], rows)
        tables = {
            s: {
                "median_w1_joint_mode": float(np.median(
                    [p["mode"]["w1_joint"] for p in v])),
                "median_w1_joint_k1": float(np.median(
                    [p["k1"]["w1_joint"] for p in v])),
                "n_seeds": len(v),
            }
            for s, v in sorted(tables.items())
        }
    else:
        tasks = [(s, base_seed, n, sigma)
                 for s in _CLUSTER_SYSTEMS
                 for sigma in _ROBUST_SIGMAS
                 for n in _ROBUST_SIZES]
        results = _run_pool(_cluster_cell, tasks, jobs)
        rows = []
        for key, *rest in results:
            system, seed, n, sigma = key
            if len(rest) == 1:
                failures.append({"cell": list(key), "error": rest[0]})
                continue
            a, m = rest
            rows.append((system, sigma, n, seed, a, m))
        rows.sort(key=lambda r: (r[0], r[1], r[2]))
        _write_table(out / "robustness.csv",
                     ["system", "sigma", "n", "seed", "ari", "nmi"], rows)
        tables = {"cells": len(rows), "grid": [len(_ROBUST_SIGMAS),
                                               len(_ROBUST_SIZES),
                                               len(_CLUSTER_SYSTEMS)]}

    echo_sections = {"run": {"suite": suite},
                     "generator": {"seed": str(base_seed)}}
    report = {
        "suite": suite,
        "base_seed": base_seed,
        "jobs": jobs,
        "tables": tables,
        "failures": failures,
        "config_hash": _config_hash(echo_sections),
    }
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, default=_json_default)
        fh.write("\n")
    # wall clock lives in a sidecar so report.json stays bit-reproducible
    with open(out / "timing.json", "w", encoding="utf-8") as fh:
        json.dump({"wall_clock_seconds": round(time.time() - t0, 3)}, fh)
        fh.write("\n")
    write_echo(out, echo_sections)
    print(f"benchmark {suite}: {len(tasks)} cells, {len(failures)} failures "
          f"-> {out} ({time.time() - t0:.0f}s)")
    return 0


def _write_table(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_num(v) if isinstance(v, float) else v
                             for v in row])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modedyn",
        description="Mixture-of-dynamical-experts benchmark toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    p.add_argument("--system", help="generator name")
    p.add_argument("--n", type=int, help="total sample count")
    p.add_argument("--sigma", type=float, help="noise level")
    _common_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", help="fit a mixture model to a dataset")
    p.add_argument("--variant", choices=("local", "global"))
    p.add_argument("--data", help="dataset directory (train.csv/val.csv)")
    p.add_argument("--preset",
                   choices=("toy_branching", "goldbeter", "lineage", "fucci"))
    p.add_argument("--k", type=int, help="number of experts")
    p.add_argument("--degree", type=int, help="polynomial library degree")
    p.add_argument("--alpha", type=float, help="l1 weight (local variant)")
    p.add_argument("--ensemble", type=int,
                   help="train N members from consecutive seeds (global)")
    p.add_argument("--strict", action="store_true",
                   help="exit 3 when the fit does not converge")
    _common_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("rollout", help="simulate stochastic trajectories")
    p.add_argument("--model", help="model JSON file")
    p.add_argument("--init", help="initial-states CSV (columns x0..)")
    p.add_argument("--from-data", dest="from_data",
                   help="sample starts from DIR/train.csv instead of --init")
    p.add_argument("--n-particles", dest="n_particles", type=int,
                   help="number of starts drawn with --from-data")
    p.add_argument("--steps", type=int, help="number of Euler steps")
    p.add_argument("--dt", type=float, help="step size")
    p.add_argument("--sigma-b", dest="sigma_b", type=float,
                   help="Brownian noise scale")
    p.add_argument("--policy", choices=("sample", "argmax"))
    p.add_argument("--record-gates", dest="record_gates", action="store_true")
    _common_flags(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("evaluate", help="score a model on a dataset")
    p.add_argument("--task", choices=("clustering", "forecast", "recovery", "auc"))
    p.add_argument("--model", help="model JSON file")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--system", help="truth system for the recovery task")
    p.add_argument("--expert", help="exit expert: 'minor' or an index (auc)")
    p.add_argument("--n-particles", dest="n_particles", type=int,
                   help="pushforward ensemble size (forecast)")
    _common_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="run a multi-seed benchmark suite")
    p.add_argument("--suite",
                   choices=("clustering", "forecasting", "recovery", "robustness"))
    _common_flags(p)
    p.set_defaults(func=cmd_benchmark)
    return parser


def _common_flags(p) -> None:
    p.add_argument("--config", help="INI-like or JSON config file")
    p.add_argument("--seed", type=int,
                   help=f"seed override (default: config, then ${SEED_ENV})")
    p.add_argument("--out", help="output directory (or model file for fit)")
    p.add_argument("--jobs", type=int, help="parallel worker count (benchmark)")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
