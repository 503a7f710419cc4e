from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar

logger = logging.getLogger(__name__)

CONFIG_ENV = "MASKPLAN_CONFIG"
LOG_ENV = "MASKPLAN_LOG"

T = TypeVar("T")


@dataclass(frozen=True)
class RunConfig:
    subcommand: str
    config_path: Optional[Path]
    out: Optional[Path]
    seed: Optional[int]
    jobs: int


def _load_json(path: Path) -> Dict[str, Any]:
    if not path.exists():
        return {}
    return _flatten(json.loads(path.read_text("utf-8")))


def _flatten(raw: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in raw.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _load_key_values(path: Path) -> Dict[str, Any]:
    if not path.exists():
        return {}
    values: Dict[str, Any] = {}
    for number, line in enumerate(path.read_text("utf-8").splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "=" not in text:
            raise ValueError(f"{path}:{number}: expected key=value, got {text!r}")
        key, _, value = text.partition("=")
        values[key.strip()] = value.strip()
    return values


def load_config_file(config_path: Optional[Path] = None) -> Dict[str, Any]:
    """Read a JSON or key=value config; the env var is consulted only when no path is given."""
    env = os.environ
    if config_path is None and CONFIG_ENV in env:
        config_path = Path(env[CONFIG_ENV])
    if config_path is None:
        return {}
    if config_path.suffix.lower() == ".json":
        return _load_json(config_path)
    return _load_key_values(config_path)


def _as_float(value: Any, default: float) -> float:
    if value is None:
        return default
    return float(value)


def _as_int(value: Any, default: int) -> int:
    if value is None:
        return default
    number = float(value)
    if not number.is_integer():
        raise ValueError(f"expected an integer, got {value}")
    return int(number)


def _as_bool(value: Any, default: bool) -> bool:
    if value is None:
        return default
    if isinstance(value, bool):
        return value
    normalized = str(value).strip().lower()
    return normalized in {"1", "true", "yes", "on"}


def _as_optional_str(value: Any) -> Optional[str]:
    if value is None:
        return None
    text = str(value).strip()
    return text or None


def _as_tuple(value: Any, item_type: type) -> Tuple[Any, ...]:
    if isinstance(value, (list, tuple)):
        items = list(value)
    else:
        items = [part for part in str(value).split(",") if part.strip()]
    if item_type is int:
        return tuple(_as_int(item, 0) for item in items)
    if item_type is float:
        return tuple(float(item) for item in items)
    return tuple(str(item).strip() for item in items)


def _is_blank(value: Any) -> bool:
    return value is None or (isinstance(value, str) and not value.strip())


def _coerce(name: str, annotation: Any, value: Any) -> Any:
    origin = typing.get_origin(annotation)
    args = typing.get_args(annotation)
    try:
        if origin is typing.Union and type(None) in args:
            if _is_blank(value) or str(value).strip().lower() == "none":
                return None
            inner = next(arg for arg in args if arg is not type(None))
            if inner is str:
                return _as_optional_str(value)
            return _coerce(name, inner, value)
        if origin is tuple:
            return _as_tuple(value, args[0] if args else str)
        if annotation is bool:
            return _as_bool(value, False)
        if annotation is int:
            return _as_int(value, 0)
        if annotation is float:
            return _as_float(value, 0.0)
        if annotation is str:
            return str(value).strip()
    except (TypeError, ValueError) as exc:
        raise ValueError(f"invalid value for '{name}': {value!r} ({exc})") from exc
    return value


def resolve_config(
    cls: Type[T],
    file_values: Optional[Mapping[str, Any]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    section: Optional[str] = None,
) -> T:
    """Build ``cls`` from defaults < file values < overrides.

    File keys may be bare (``lr``) or section-qualified (``train.lr``); the qualified key wins.
    Blank values count as unset.
    """
    file_values = file_values or {}
    overrides = overrides or {}
    hints = typing.get_type_hints(cls)
    kwargs: Dict[str, Any] = {}
    for spec_field in dataclasses.fields(cls):
        name = spec_field.name
        candidates = [overrides.get(name)]
        if section:
            candidates.append(file_values.get(f"{section}.{name}"))
        candidates.append(file_values.get(name))
        chosen = next((value for value in candidates if not _is_blank(value)), None)
        if chosen is not None:
            kwargs[name] = _coerce(name, hints[name], chosen)
    return cls(**kwargs)


def _plain(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return [_plain(item) for item in value]
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    return value


def config_dict(cfg: Any) -> Dict[str, Any]:
    return {key: _plain(value) for key, value in dataclasses.asdict(cfg).items()}


def dump_key_values(cfg: Any, section: Optional[str] = None) -> str:
    """Flat ``key=value`` snapshot of every field of a config dataclass."""
    lines = []
    for key, value in config_dict(cfg).items():
        if value is None:
            text = ""
        elif isinstance(value, list):
            text = ",".join(str(item) for item in value)
        else:
            text = str(value)
        lines.append(f"{section + '.' if section else ''}{key}={text}")
    return "\n".join(lines) + "\n"


def config_hash(payload: Mapping[str, Any]) -> str:
    canonical = json.dumps(_plain(dict(payload)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
