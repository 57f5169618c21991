"""Hierarchical experiment configuration.

A configuration root looks like::

    conf/
      data/defaults.yaml
      augmentations/_augmentations.yaml
      preprocessors/_preprocessors.yaml
      model/defaults.yaml
      optim/defaults.yaml
      experiment/defaults.yaml
      runs/default.yaml

A run file carries a ``defaults`` list selecting one file per group.  Each
group file holds either the group's mapping directly or a single top-level
key named after the group wrapping it.  Command-line style override tokens
are applied left to right on top of the composed tree:

* ``optim=christoph`` swaps the whole ``optim`` group for another file;
* ``data.batch_size=8`` sets an existing leaf (unknown paths are rejected).
"""
from __future__ import annotations

import copy
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import yaml

GROUPS = ("data", "augmentations", "preprocessors", "model", "optim", "experiment")

_INT_RE = re.compile(r"[-+]?\d+")
_FLOAT_RE = re.compile(
    r"[-+]?(\d+\.?\d*([eE][-+]?\d+)?|\.\d+([eE][-+]?\d+)?|inf|nan)", re.IGNORECASE
)
_PLAIN_KEY_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.\-]*")
_PLACEHOLDERS = {"", "???"}


class ConfigError(Exception):
    """Base class for configuration failures."""


class ConfigLoadError(ConfigError):
    pass


class OverrideError(ConfigError):
    pass


class OverrideParseError(OverrideError):
    pass


# ---------------------------------------------------------------------------
# Scalars and text syntax
# ---------------------------------------------------------------------------


def parse_scalar(text: str) -> int | float | bool | str:
    """Coerce an unquoted token: int, then float, then ``true``/``false``, else str."""
    if _INT_RE.fullmatch(text):
        return int(text)
    if _FLOAT_RE.fullmatch(text):
        return float(text)
    if text == "true":
        return True
    if text == "false":
        return False
    return text


def _node_to_tree(node: yaml.Node, where: str) -> Any:
    if isinstance(node, yaml.ScalarNode):
        if node.style in ("'", '"'):
            return node.value
        if node.value in _PLACEHOLDERS:
            raise ConfigLoadError(f"{where}: unresolved value {node.value!r}")
        return parse_scalar(node.value)
    if isinstance(node, yaml.SequenceNode):
        return [_node_to_tree(n, f"{where}[{i}]") for i, n in enumerate(node.value)]
    if isinstance(node, yaml.MappingNode):
        out: dict[str, Any] = {}
        for key_node, value_node in node.value:
            if not isinstance(key_node, yaml.ScalarNode) or key_node.value == "":
                raise ConfigLoadError(f"{where}: keys must be non-empty scalars")
            key = key_node.value
            if key in out:
                raise ConfigLoadError(f"{where}: duplicate key {key!r}")
            out[key] = _node_to_tree(value_node, f"{where}.{key}" if where else key)
        return out
    raise ConfigLoadError(f"{where}: unsupported node {type(node).__name__}")


def parse_text(text: str, source: str = "<string>") -> Any:
    """Parse the YAML subset used by config files (no anchors, aliases or tags)."""
    try:
        for event in yaml.parse(text, Loader=yaml.SafeLoader):
            if isinstance(event, yaml.AliasEvent) or getattr(event, "anchor", None):
                raise ConfigLoadError(f"{source}: anchors and aliases are not supported")
            tag = getattr(event, "tag", None)
            if tag is not None and not isinstance(event, yaml.DocumentStartEvent):
                raise ConfigLoadError(f"{source}: explicit tags are not supported ({tag})")
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        raise ConfigLoadError(f"{source}: {exc}") from exc
    if node is None:
        return {}
    return _node_to_tree(node, "")


_YAML_UNPRINTABLE = re.compile("[^\t\n\r\x20-\x7e\xa0-\u2027\u202a-\ud7ff\ue000-\ufefe\uff00-\ufffd\U00010000-\U0010ffff]")


def _quote(text: str) -> str:
    """Double-quoted scalar; characters YAML cannot carry raw are escaped."""
    raw = json.dumps(text, ensure_ascii=False)
    return _YAML_UNPRINTABLE.sub(lambda m: f"\\u{ord(m.group()):04x}", raw)


def _format_scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return _quote(value)
    raise TypeError(f"cannot serialize {type(value).__name__} in a config tree")


def _format_key(key: str) -> str:
    if _PLAIN_KEY_RE.fullmatch(key):
        return key
    return _quote(key)


def _emit(value: Any, indent: int, lines: list[str]) -> None:
    pad = " " * indent
    if isinstance(value, dict):
        for key, sub in value.items():
            head = f"{pad}{_format_key(key)}:"
            if isinstance(sub, dict) and sub:
                lines.append(head)
                _emit(sub, indent + 2, lines)
            elif isinstance(sub, list) and sub:
                lines.append(head)
                _emit(sub, indent + 2, lines)
            elif isinstance(sub, dict):
                lines.append(head + " {}")
            elif isinstance(sub, list):
                lines.append(head + " []")
            else:
                lines.append(f"{head} {_format_scalar(sub)}")
    elif isinstance(value, list):
        for item in value:
            if isinstance(item, (dict, list)) and item:
                lines.append(f"{pad}-")
                _emit(item, indent + 2, lines)
            elif isinstance(item, dict):
                lines.append(f"{pad}- {{}}")
            elif isinstance(item, list):
                lines.append(f"{pad}- []")
            else:
                lines.append(f"{pad}- {_format_scalar(item)}")
    else:
        lines.append(pad + _format_scalar(value))


def dump_text(tree: dict[str, Any]) -> str:
    """Serialize a config tree; ``parse_text(dump_text(t)) == t``."""
    lines: list[str] = []
    _emit(tree, 0, lines)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Overrides
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Override:
    kind: str  # "group-swap" | "leaf-set"
    path: tuple[str, ...]
    value: Any

    @property
    def dotted(self) -> str:
        return ".".join(self.path)


def parse_override(token: str) -> Override:
    if token.count("=") != 1:
        raise OverrideParseError(f"override {token!r} must contain exactly one '='")
    left, right = token.split("=")
    path = tuple(left.split("."))
    if any(part == "" for part in path):
        raise OverrideParseError(f"override {token!r} has an empty path component")
    if len(right) >= 2 and right[0] == right[-1] and right[0] in "'\"":
        value: Any = right[1:-1]
    else:
        value = parse_scalar(right)
    if len(path) == 1:
        return Override("group-swap", path, str(value) if not isinstance(value, str) else value)
    return Override("leaf-set", path, value)


def apply_leaf(tree: dict[str, Any], override: Override) -> dict[str, Any]:
    """Return a copy of ``tree`` with the leaf at ``override.path`` replaced."""
    out = copy.deepcopy(tree)
    node: Any = out
    for depth, key in enumerate(override.path[:-1]):
        node = _child(node, key, override.path[: depth + 1], override.dotted)
    last = override.path[-1]
    if isinstance(node, list):
        idx = _list_index(node, last, override.dotted)
        current = node[idx]
    elif isinstance(node, dict) and last in node:
        current = node[last]
    else:
        raise OverrideError(f"unknown config path {override.dotted!r}")
    if isinstance(current, (dict, list)):
        raise OverrideError(f"config path {override.dotted!r} is not a leaf")
    if isinstance(node, list):
        node[idx] = override.value
    else:
        node[last] = override.value
    return out


def _list_index(node: list, key: str, dotted: str) -> int:
    if not _INT_RE.fullmatch(key) or not 0 <= int(key) < len(node):
        raise OverrideError(f"unknown config path {dotted!r}")
    return int(key)


def _child(node: Any, key: str, prefix: Sequence[str], dotted: str) -> Any:
    if isinstance(node, dict) and key in node:
        return node[key]
    if isinstance(node, list):
        return node[_list_index(node, key, dotted)]
    raise OverrideError(f"unknown config path {dotted!r}")


def get_path(tree: dict[str, Any], dotted: str) -> Any:
    node: Any = tree
    for part in dotted.split("."):
        node = _child(node, part, (), dotted)
    return node


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ResolvedConfig:
    """A fully composed configuration snapshot plus its provenance."""

    tree: dict[str, Any]
    root_dir: Path | None = None
    run_name: str | None = None
    overrides: tuple[str, ...] = ()
    selection: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, group: str) -> Any:
        return self.tree[group]

    def get(self, dotted: str, default: Any = None) -> Any:
        try:
            return get_path(self.tree, dotted)
        except OverrideError:
            return default

    def to_yaml(self) -> str:
        return dump_text(self.tree)

    def with_overrides(self, tokens: Iterable[str]) -> "ResolvedConfig":
        """Re-resolve from the same sources with extra overrides appended."""
        tokens = tuple(tokens)
        if self.root_dir is None or self.run_name is None:
            tree = self.tree
            for tok in tokens:
                ov = parse_override(tok)
                if ov.kind == "group-swap":
                    raise OverrideError(f"cannot swap group {ov.dotted!r} without a config root")
                tree = apply_leaf(tree, ov)
            return ResolvedConfig(tree, overrides=self.overrides + tokens)
        return load_config(self.root_dir, self.run_name, self.overrides + tokens)


def _read_tree(path: Path) -> Any:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigLoadError(f"cannot read {path}: {exc}") from exc
    return parse_text(text, str(path))


def _find_run_file(root: Path, run_name: str) -> Path:
    name = run_name[:-5] if run_name.endswith(".yaml") else run_name
    for candidate in (root / f"{name}.yaml", root / "runs" / f"{name}.yaml"):
        if candidate.is_file():
            return candidate
    raise ConfigLoadError(f"run file {run_name!r} not found under {root}")


def _group_selection(run_tree: Any, source: Path) -> dict[str, str]:
    if not isinstance(run_tree, dict) or not isinstance(run_tree.get("defaults"), list):
        raise ConfigLoadError(f"{source}: run file needs a 'defaults' list")
    extra = set(run_tree) - {"defaults"}
    if extra:
        raise ConfigLoadError(f"{source}: unexpected top-level keys {sorted(extra)}")
    selection: dict[str, str] = {}
    for entry in run_tree["defaults"]:
        if not isinstance(entry, dict) or len(entry) != 1:
            raise ConfigLoadError(f"{source}: defaults entries must be 'group: name'")
        (group, name), = entry.items()
        group = group.rsplit("/", 1)[-1]
        if group not in GROUPS:
            raise ConfigLoadError(f"{source}: unknown group {group!r}")
        selection[group] = str(name)
    return selection


def load_group(root_dir: str | Path, group: str, name: str) -> dict[str, Any]:
    path = Path(root_dir) / group / f"{name}.yaml"
    if not path.is_file():
        raise ConfigLoadError(f"group {group!r}: no config file {path}")
    tree = _read_tree(path)
    if isinstance(tree, dict) and list(tree) == [group] and isinstance(tree[group], dict):
        tree = tree[group]
    if not isinstance(tree, dict):
        raise ConfigLoadError(f"group {group!r}: {path} must hold a mapping")
    return tree


def load_config(root_dir: str | Path, run_name: str, overrides: Sequence[str] = ()) -> ResolvedConfig:
    """Compose the run file's groups and apply override tokens left to right."""
    root = Path(root_dir)
    run_path = _find_run_file(root, run_name)
    selection = _group_selection(_read_tree(run_path), run_path)
    missing = [g for g in GROUPS if g not in selection]
    if missing:
        raise ConfigLoadError(f"{run_path}: no default selected for group(s) {missing}")

    tree = {g: load_group(root, g, selection[g]) for g in GROUPS}
    for token in overrides:
        ov = parse_override(token)
        if ov.kind == "group-swap":
            group = ov.path[0]
            if group not in GROUPS:
                raise OverrideError(f"unknown config group {group!r}")
            selection[group] = ov.value
            tree = dict(tree)
            tree[group] = load_group(root, group, ov.value)
        else:
            tree = apply_leaf(tree, ov)
    return ResolvedConfig(tree, root, run_name, tuple(overrides), selection)
