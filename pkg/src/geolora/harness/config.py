"""Experiment configuration: JSON schema, defaults and field-by-field validation."""

import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

from ..errors import ConfigError, InvalidArgument
from ..problems import build_problem

METHODS = ("geolora", "full_gd", "lora_ab", "svd_lora", "adalora_lite", "dlrt")
LOW_RANK_METHODS = ("geolora", "dlrt")
POLICY_MODES = ("local", "global", "budget")
INITS = ("auto", "zero", "problem")
SCHEDULES = ("constant", "inverse_time")


@dataclass
class ExperimentConfig:
    problem: dict
    method: str
    learning_rate: float
    max_iters: int
    tau: float = 0.0
    init_rank: Optional[int] = None
    seed: int = 0
    policy_mode: str = "local"
    budget: Optional[int] = None
    min_rank: Optional[int] = None
    threshold_norm: str = "frobenius"
    gamma: Optional[float] = None
    truncate_every: Optional[int] = None
    alpha: Optional[float] = None
    momentum: float = 0.0
    weight_decay: float = 0.0
    lr_schedule: str = "constant"
    lr_decay: float = 0.0
    init: str = "auto"
    stop_loss: Optional[float] = None
    loss_threshold: float = 1e-6
    log_every: int = 1
    parallel: bool = False
    output_dir: Optional[str] = None

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return config_from_dict(d)

    def learning_rate_at(self, iteration):
        if self.lr_schedule == "inverse_time":
            return self.learning_rate / (1.0 + self.lr_decay * iteration)
        return self.learning_rate

    @property
    def effective_min_rank(self):
        if self.min_rank is not None:
            return self.min_rank
        return 5 if self.method == "adalora_lite" else 1


_FIELD_NAMES = [f.name for f in fields(ExperimentConfig)]
_REQUIRED = ("problem", "method", "learning_rate", "max_iters")


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def validate(d):
    """Return a list of human-readable problems with the raw config dict."""
    errs = []
    if not isinstance(d, dict):
        return ["config must be a JSON object"]
    for key in sorted(set(d) - set(_FIELD_NAMES)):
        errs.append(f"{key}: unknown field")
    for key in _REQUIRED:
        if key not in d:
            errs.append(f"{key}: required")
    if errs and any(e.endswith("required") for e in errs):
        return errs

    method = d["method"]
    if method not in METHODS:
        errs.append(f"method: must be one of {', '.join(METHODS)}, got {method!r}")
    if not _is_num(d["learning_rate"]) or not d["learning_rate"] > 0:
        errs.append("learning_rate: must be a positive number")
    if not _is_int(d["max_iters"]) or d["max_iters"] < 0:
        errs.append("max_iters: must be a non-negative integer")

    tau = d.get("tau", 0.0)
    if not _is_num(tau) or not 0.0 <= tau < 1.0:
        errs.append("tau: must lie in [0, 1)")
    if not _is_int(d.get("seed", 0)):
        errs.append("seed: must be an integer")
    mode = d.get("policy_mode", "local")
    if mode not in POLICY_MODES:
        errs.append(f"policy_mode: must be one of {', '.join(POLICY_MODES)}")
    budget = d.get("budget")
    if mode == "budget":
        if not _is_int(budget) or budget < 1:
            errs.append("budget: budget mode needs a positive integer budget")
    elif budget is not None:
        errs.append("budget: only valid with policy_mode 'budget'")
    for key in ("init_rank", "min_rank", "truncate_every"):
        v = d.get(key)
        if v is not None and (not _is_int(v) or v < 1):
            errs.append(f"{key}: must be a positive integer")
    if d.get("threshold_norm", "frobenius") not in ("frobenius", "nuclear"):
        errs.append("threshold_norm: must be 'frobenius' or 'nuclear'")

    gamma = d.get("gamma")
    if gamma is not None:
        if method != "adalora_lite":
            errs.append("gamma: only valid for adalora_lite")
        elif not _is_num(gamma) or gamma < 0:
            errs.append("gamma: must be non-negative")
    if d.get("truncate_every") is not None and method != "adalora_lite":
        errs.append("truncate_every: only valid for adalora_lite")
    alpha = d.get("alpha")
    if alpha is not None:
        if method != "lora_ab":
            errs.append("alpha: only valid for lora_ab")
        elif not _is_num(alpha) or alpha <= 0:
            errs.append("alpha: must be positive")
    for key in ("momentum", "weight_decay"):
        v = d.get(key, 0.0)
        if not _is_num(v) or v < 0 or (key == "momentum" and v >= 1):
            errs.append(f"{key}: out of range")
        elif v and method != "geolora":
            errs.append(f"{key}: only supported for geolora")
    if mode != "local" and method not in LOW_RANK_METHODS:
        errs.append(f"policy_mode: global modes need a geolora or dlrt run, not {method}")
    if d.get("lr_schedule", "constant") not in SCHEDULES:
        errs.append(f"lr_schedule: must be one of {', '.join(SCHEDULES)}")
    if not _is_num(d.get("lr_decay", 0.0)) or d.get("lr_decay", 0.0) < 0:
        errs.append("lr_decay: must be non-negative")
    if d.get("init", "auto") not in INITS:
        errs.append(f"init: must be one of {', '.join(INITS)}")
    for key in ("stop_loss", "loss_threshold"):
        v = d.get(key)
        if v is not None and (not _is_num(v) or v < 0):
            errs.append(f"{key}: must be a non-negative number")
    if not _is_int(d.get("log_every", 1)) or d.get("log_every", 1) < 1:
        errs.append("log_every: must be a positive integer")
    if not isinstance(d.get("parallel", False), bool):
        errs.append("parallel: must be true or false")
    out = d.get("output_dir")
    if out is not None and not isinstance(out, str):
        errs.append("output_dir: must be a string path")

    try:
        problem = build_problem(d["problem"])
    except (InvalidArgument, KeyError, TypeError, ValueError) as exc:
        errs.append(f"problem: {exc}")
        return errs
    init = d.get("init", "auto")
    has_init = getattr(problem, "init", None) is not None
    if init == "problem" and not has_init:
        errs.append("init: this problem does not supply an initial adapter")
    uses_problem_init = init == "problem" or (init == "auto" and has_init)
    if method != "full_gd" and not uses_problem_init and d.get("init_rank") is None:
        errs.append("init_rank: required when adapters start from zero")
    r = d.get("init_rank")
    if _is_int(r) and not uses_problem_init:
        for shape in problem.layer_shapes:
            if r > min(shape):
                errs.append(f"init_rank: {r} exceeds layer shape {shape}")
                break
    if mode == "budget" and _is_int(budget) and _is_int(d.get("min_rank", 1) or 1):
        floor = (d.get("min_rank") or 1) * problem.num_layers
        if budget < floor:
            errs.append(f"budget: {budget} is below min_rank times {problem.num_layers} layers")
    return errs


def config_from_dict(d):
    errs = validate(d)
    if errs:
        raise ConfigError(errs)
    return ExperimentConfig(**d)


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return config_from_dict(raw)
