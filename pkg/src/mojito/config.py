"""Hyperparameters and the flat ``key=value`` config file."""
import dataclasses
import hashlib
import logging
from dataclasses import dataclass

from .data import DEFAULT_SCHEMA, ContextSchema
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

# file key -> dataclass field, where they differ
_ALIASES = {"lambda": "lam", "batch": "batch_size", "epochs": "max_epochs"}
_FIELD_TO_KEY = {v: k for k, v in _ALIASES.items()}


@dataclass(frozen=True)
class MojitoConfig:
    d: int = 64
    L: int = 50
    B: int = 2
    H: int = 2
    N: int = 20
    lam: float = 0.5
    lr: float = 0.001
    batch_size: int = 512
    max_epochs: int = 100
    seed: int = 42
    schema: str = DEFAULT_SCHEMA
    attention_mode: str = "literal"
    patience: int = 10
    dropout: float = 0.2
    n_eval_negatives: int = 1000
    use_context: bool = True

    def __post_init__(self):
        problems = validate(self)
        if problems:
            raise ConfigError(problems)

    @property
    def context_schema(self):
        return ContextSchema.parse(self.schema)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{_FIELD_TO_KEY.get(f.name, f.name)}={v}")
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def validate(cfg):
    problems = []
    for name in ("d", "L", "B", "H", "N", "batch_size", "max_epochs", "n_eval_negatives"):
        v = getattr(cfg, name)
        if not isinstance(v, int) or isinstance(v, bool) or v < 1:
            problems.append(f"{_FIELD_TO_KEY.get(name, name)} must be a positive integer, got {v!r}")
    if not (isinstance(cfg.lam, (int, float)) and 0.0 <= cfg.lam <= 1.0):
        problems.append(f"lambda must be in [0,1], got {cfg.lam!r}")
    if not (isinstance(cfg.lr, (int, float)) and cfg.lr > 0):
        problems.append(f"lr must be > 0, got {cfg.lr!r}")
    if not (0.0 <= cfg.dropout < 1.0):
        problems.append(f"dropout must be in [0,1), got {cfg.dropout!r}")
    if cfg.patience < 0:
        problems.append(f"patience must be >= 0, got {cfg.patience!r}")
    if cfg.attention_mode not in ("literal", "compat"):
        problems.append(f"attention_mode must be literal or compat, got {cfg.attention_mode!r}")
    if isinstance(cfg.L, int) and cfg.L < 2:
        problems.append(f"L must be >= 2, got {cfg.L}")
    try:
        ContextSchema.parse(cfg.schema)
    except ContractError as exc:
        problems.append(f"schema: {exc}")
    return problems


def _coerce(ftype, raw):
    if ftype is bool:
        low = raw.lower()
        if low in ("1", "true", "yes"):
            return True
        if low in ("0", "false", "no"):
            return False
        raise ValueError(raw)
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    return raw


def parse_config_text(text):
    """Parse ``key=value`` lines (``#`` comments allowed) into a config.

    Every bad key is reported in one ``ConfigError``; a missing ``lambda``
    falls back to 0.5 with a logged notice.
    """
    fields = {f.name: f for f in dataclasses.fields(MojitoConfig)}
    values = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key=value, got {line!r}")
            continue
        key, raw = (s.strip() for s in line.split("=", 1))
        name = _ALIASES.get(key, key)
        if name not in fields:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            values[name] = _coerce(fields[name].type, raw)
        except ValueError:
            problems.append(f"{key}: cannot parse {raw!r} as {fields[name].type}")
    try:
        cfg = MojitoConfig(**values)
    except ConfigError as exc:
        raise ConfigError(problems + exc.problems) from None
    if problems:
        raise ConfigError(problems)
    if "lam" not in values:
        log.info("config: lambda not set, defaulting to 0.5")
    return cfg


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
