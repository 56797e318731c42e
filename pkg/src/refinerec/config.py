"""Flat key=value run configuration with variant presets.

Files hold one ``section.key = value`` per line (``#`` comments allowed);
``--set key=value`` flags override file values, and the ``ablation`` preset is
applied last so its forced switches win. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ConfigError

# (flat key, attribute, type tag, default)
REGISTRY = [
    ("data.path", "data_path", "str?", None),
    ("data.categories", "categories_path", "str?", None),
    ("data.filter_min", "filter_min", "int", 5),
    ("data.max_seq_len", "max_seq_len", "int", 20),
    ("data.dedupe", "dedupe", "bool", False),
    ("data.target_policy", "target_policy", "choice:uniform|last", "uniform"),
    ("data.split_seed", "split_seed", "int", 42),
    ("model.d", "d", "int", 64),
    ("model.d_a", "d_a", "int", 256),
    ("model.k", "k", "int", 4),
    ("diffusion.steps", "steps", "int", 5),
    ("diffusion.scale", "scale", "float", 1.0),
    ("diffusion.alpha_min", "alpha_min", "float", 1e-4),
    ("diffusion.alpha_max", "alpha_max", "float", 1e-3),
    ("diffusion.gamma", "gamma", "float", 0.5),
    ("diffusion.eta", "eta", "float", 0.4),
    ("diffusion.heads", "heads", "int", 2),
    ("diffusion.ff_mult", "ff_mult", "int", 4),
    ("ablation", "ablation", "choice:dmi|dmi-diff|dmi-t|dmi-ip|dmi-gd", "dmi"),
    ("ablation.use_diffusion", "use_diffusion", "bool", True),
    ("ablation.use_transformer", "use_transformer", "bool", True),
    ("ablation.use_pruning", "use_pruning", "bool", True),
    ("ablation.detach_v0", "detach_v0", "bool", True),
    ("ablation.detach_context", "detach_context", "bool", True),
    ("train.batch_size", "batch_size", "int", 128),
    ("train.n_neg", "n_neg", "int", 1280),
    ("train.lr", "lr", "float", 0.002),
    ("train.lambda", "loss_weight", "float", 5.0),
    ("train.max_iterations", "max_iterations", "int", 1_000_000),
    ("train.eval_every", "eval_every", "int", 1000),
    ("train.patience", "patience", "int", 5),
    ("train.seed", "seed", "int", 42),
    ("eval.n_list", "n_list", "intlist", (20, 50)),
    ("eval.exclude_history", "exclude_history", "bool", False),
    ("eval.deterministic_eps0", "deterministic_eps0", "bool", False),
    ("run.output_dir", "output_dir", "str?", None),
    ("synth.users", "synth_users", "int", 2000),
    ("synth.items", "synth_items", "int", 1000),
    ("synth.clusters", "synth_clusters", "int", 8),
    ("synth.noise_dims", "synth_noise_dims", "int", 8),
    ("synth.seed", "synth_seed", "int", 7),
    ("synth.pref_min", "synth_pref_min", "int", 2),
    ("synth.pref_max", "synth_pref_max", "int", 4),
    ("synth.pool_min", "synth_pool_min", "int", 12),
    ("synth.pool_max", "synth_pool_max", "int", 24),
    ("synth.len_min", "synth_len_min", "int", 40),
    ("synth.len_max", "synth_len_max", "int", 80),
    ("synth.distractor_frac", "synth_distractor_frac", "float", 0.1),
]

_KEY_TO_ENTRY = {key: (attr, kind, default) for key, attr, kind, default in REGISTRY}
_ATTR_TO_KEY = {attr: key for key, attr, _, _ in REGISTRY}

# forced switch combinations for each variant preset
PRESETS = {
    "dmi": {},
    "dmi-diff": {"use_diffusion": False, "loss_weight": 0.0},
    "dmi-t": {"use_transformer": False},
    "dmi-ip": {"use_pruning": False},
    "dmi-gd": {"detach_v0": False, "detach_context": False},
}


def _parse_value(key: str, kind: str, raw: str):
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    if kind == "intlist":
        try:
            return tuple(int(x) for x in raw.split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}")
    if kind.startswith("choice:"):
        options = kind.split(":", 1)[1].split("|")
        if raw not in options:
            raise ConfigError(f"{key}: expected one of {options}, got {raw!r}")
        return raw
    return raw  # str / str?


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    """Every knob of the artifact, resolved to typed attributes."""

    data_path: str | None = None
    categories_path: str | None = None
    filter_min: int = 5
    max_seq_len: int = 20
    dedupe: bool = False
    target_policy: str = "uniform"
    split_seed: int = 42
    d: int = 64
    d_a: int = 256
    k: int = 4
    steps: int = 5
    scale: float = 1.0
    alpha_min: float = 1e-4
    alpha_max: float = 1e-3
    gamma: float = 0.5
    eta: float = 0.4
    heads: int = 2
    ff_mult: int = 4
    ablation: str = "dmi"
    use_diffusion: bool = True
    use_transformer: bool = True
    use_pruning: bool = True
    detach_v0: bool = True
    detach_context: bool = True
    batch_size: int = 128
    n_neg: int = 1280
    lr: float = 0.002
    loss_weight: float = 5.0
    max_iterations: int = 1_000_000
    eval_every: int = 1000
    patience: int = 5
    seed: int = 42
    n_list: tuple = (20, 50)
    exclude_history: bool = False
    deterministic_eps0: bool = False
    output_dir: str | None = None
    synth_users: int = 2000
    synth_items: int = 1000
    synth_clusters: int = 8
    synth_noise_dims: int = 8
    synth_seed: int = 7
    synth_pref_min: int = 2
    synth_pref_max: int = 4
    synth_pool_min: int = 12
    synth_pool_max: int = 24
    synth_len_min: int = 40
    synth_len_max: int = 80
    synth_distractor_frac: float = 0.1

    def validate(self) -> "RunConfig":
        positive = ["filter_min", "max_seq_len", "d", "d_a", "k", "steps", "heads",
                    "ff_mult", "batch_size", "n_neg", "max_iterations", "eval_every",
                    "patience", "batch_size"]
        for attr in positive:
            if getattr(self, attr) <= 0:
                raise ConfigError(f"{_ATTR_TO_KEY[attr]}: must be positive")
        if self.lr <= 0:
            raise ConfigError("train.lr: must be positive")
        if self.loss_weight < 0:
            raise ConfigError("train.lambda: must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("diffusion.eta: must lie in [0, 1]")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("diffusion.gamma: must lie in (0, 1)")
        if not self.n_list:
            raise ConfigError("eval.n_list: must not be empty")
        return self

    def to_flat(self) -> dict:
        return {key: getattr(self, attr) for key, attr, _, _ in REGISTRY}

    def resolved_text(self) -> str:
        lines = [f"{key} = {_format_value(value)}"
                 for key, value in sorted(self.to_flat().items())]
        return "\n".join(lines) + "\n"

    def require(self, attr: str) -> object:
        value = getattr(self, attr)
        if value is None:
            raise ConfigError(f"missing required key {_ATTR_TO_KEY[attr]!r}")
        return value


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat key=value lines into a {flat key: typed value} dict."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEY_TO_ENTRY:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        _, kind, _ = _KEY_TO_ENTRY[key]
        out[key] = _parse_value(key, kind, raw)
    return out


def parse_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read(), source=path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from exc


def parse_overrides(pairs) -> dict:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = (part.strip() for part in pair.split("=", 1))
        if key not in _KEY_TO_ENTRY:
            raise ConfigError(f"--set: unknown key {key!r}")
        _, kind, _ = _KEY_TO_ENTRY[key]
        out[key] = _parse_value(key, kind, raw)
    return out


def resolve(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults <- file <- overrides, then the ablation preset's forced switches."""
    cfg = RunConfig()
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            attr, _, _ = _KEY_TO_ENTRY[key]
            setattr(cfg, attr, value)
    for attr, value in PRESETS[cfg.ablation].items():
        setattr(cfg, attr, value)
    return cfg.validate()


def config_from_flat(flat: dict) -> RunConfig:
    """Rebuild a RunConfig from a checkpoint's stored flat mapping (no preset re-application)."""
    cfg = RunConfig()
    for key, value in flat.items():
        if key not in _KEY_TO_ENTRY:
            raise ConfigError(f"checkpoint config holds unknown key {key!r}")
        attr, kind, _ = _KEY_TO_ENTRY[key]
        if kind == "intlist" and isinstance(value, list):
            value = tuple(value)
        setattr(cfg, attr, value)
    return cfg.validate()
