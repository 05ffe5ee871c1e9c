import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings

from app.exceptions import UsageError
from app.schemas import RunConfig


class Settings(BaseSettings):
    # Reproducibility
    seed: int = 0

    # Logging
    log_level: str = "INFO"

    # Preprocessing
    threads: int = 1

    # Numerics: float64 unless asked otherwise
    float32: bool = False

    class Config:
        env_prefix = "CHG_"
        env_file = ".env"


settings = Settings()


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{source}:{lineno}: empty key")
        values[key] = value
    return values


def _nest(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise UsageError(f"config key {key!r} conflicts with {part!r}")
            node = child
        node[leaf] = value
    return nested


def build_run_config(flat: Mapping[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        raise UsageError(f"invalid configuration: {problems}") from exc


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Config file values, then ``overrides`` on top (flags win)."""
    flat: Dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file not found: {p}")
        flat.update(parse_config_text(p.read_text(encoding="utf-8"), str(p)))
    flat.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_run_config(flat)


def config_hash(cfg: RunConfig) -> str:
    payload = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def resolve_seed(flag: Optional[int] = None, cfg: Optional[RunConfig] = None) -> int:
    """Explicit flag, then the config file, then ``CHG_SEED``, then 0."""
    if flag is not None:
        return flag
    if cfg is not None and cfg.seed is not None:
        return cfg.seed
    return Settings().seed
