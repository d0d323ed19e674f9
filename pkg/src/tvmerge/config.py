"""Plain-text ``key=value`` run configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .errors import ParseError, UnknownKey

RESOLVED_NAME = "config.resolved"


def parse_config(text: str, allowed: Iterable[str] | None = None) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment line, blank lines are skipped."""
    allowed = set(allowed) if allowed is not None else None
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip().replace("-", "_")
        if not sep or not key:
            raise ParseError(f"expected key=value, got {raw!r}", lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", lineno)
        if allowed is not None and key not in allowed:
            raise UnknownKey(f"line {lineno}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def load_config(path: str | Path, allowed: Iterable[str] | None = None) -> dict[str, str]:
    return parse_config(Path(path).read_text(), allowed)


def format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


@dataclass
class RunConfig:
    command: str
    values: dict[str, Any] = field(default_factory=dict)

    def __getattr__(self, name: str) -> Any:
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def dumps(self) -> str:
        lines = [f"# tvmerge {self.command}"]
        lines += [f"{k}={format_value(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def merge_layers(defaults: Mapping[str, Any], from_file: Mapping[str, Any], from_flags: Mapping[str, Any]) -> dict[str, Any]:
    """Flags beat the config file, which beats defaults."""
    return {**defaults, **from_file, **from_flags}
