"""Run configuration: namespaced `key = value` text files with typed
defaults, strict parsing, and round-trip serialization."""

from __future__ import annotations

from dataclasses import dataclass, field


class ConfigParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


# key -> (type, default).  Types: int, float, bool, str.
DEFAULTS = {
    "run.seed": (int, 0),
    "run.out": (str, "out"),
    "run.threads": (int, 0),            # 0 = use SFS_THREADS or all cores
    "run.monte_carlo_runs": (int, 1),

    "data.num_scenes": (int, 20),
    "data.frames_per_scene": (int, 8),
    "data.height": (int, 128),
    "data.width": (int, 128),
    "data.chips_per_class": (int, 40),
    "data.chip_hw": (int, 64),
    "data.num_classes": (int, 5),
    "data.max_step_px": (float, 8.0),
    "data.holdout_fraction": (float, 0.05),

    "dnss.alpha1": (float, 0.5),
    "dnss.gamma1": (float, 2.0),
    "dnss.kappa1": (float, 0.0),
    "dnss.stage_channels": (int, 32),
    "dnss.lr": (float, 2e-3),
    "dnss.batch_size": (int, 4),
    "dnss.max_epochs": (int, 20),
    "dnss.threshold": (float, 0.5),
    "dnss.min_area": (int, 9),

    "nrmn.key_dim": (int, 256),
    "nrmn.capacity": (int, 128),
    "nrmn.decay": (float, 0.99),
    "nrmn.tau_merge": (float, 0.9),
    "nrmn.eta": (float, 0.3),
    "nrmn.top_k": (int, 16),
    "nrmn.tail_size": (int, 20),
    "nrmn.alpha_top": (int, 3),
    "nrmn.tau_unknown": (float, 0.5),
    "nrmn.channels": (int, 32),
    "nrmn.episodes": (int, 200),
    "nrmn.lr": (float, 1e-3),
    "nrmn.n_way": (int, 5),
    "nrmn.k_shot": (int, 10),
    "nrmn.queries": (int, 5),
    "nrmn.zero_shot_steps": (int, 300),

    "lfn.gamma2": (float, 1.0),
    "lfn.eps": (float, 0.01),
    "lfn.kappa2": (float, 1e-5),
    "lfn.use_epe_term": (bool, True),
    "lfn.steps": (int, 150),
    "lfn.lr": (float, 2e-3),
    "lfn.consensus_lambda": (float, 10.0),

    "eval.episodes": (int, 100),
    "eval.iou_threshold": (float, 0.5),

    "bench.frames": (int, 16),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: d for k, (_, d) in DEFAULTS.items()}
        for k, v in self.values.items():
            if k not in DEFAULTS:
                raise KeyError(f"unknown config key {k}")
            merged[k] = v
        self.values = merged

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values


def _parse_value(key: str, raw: str, line: int):
    typ, _ = DEFAULTS[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigParseError(
            f"value {raw!r} for key {key} is not a valid {typ.__name__}", line)


def parse_config(text: str) -> RunConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigParseError("expected `key = value`", lineno)
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigParseError(f"unknown key {key}", lineno)
        if key in values:
            raise ConfigParseError(f"duplicate key {key}", lineno)
        values[key] = _parse_value(key, raw, lineno)
    return RunConfig(values)


def write_config(cfg: RunConfig) -> str:
    lines = []
    for key in sorted(cfg.values):
        v = cfg.values[key]
        if isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())
