"""Multi-level tax-code taxonomy: loading, validation, and path queries.

The taxonomy is a forest of coded nodes under an implicit virtual root.
Level-1 nodes are the forest roots; every other node points at a parent one
level up. Each level owns an ordered label space (its codes, sorted, plus a
reserved NULL label) used by the per-level classifier heads.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

from .util import canonical_json

NULL_CODE = "∅"  # reserved per-level label: "path ends above this level"
MAX_LEVELS = 10
FORMAT_VERSION = 1


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy input; message names the offending code."""


@dataclass(frozen=True)
class TaxNode:
    code: str
    name: str
    definition: str
    parent: str | None
    level: int
    is_leaf: bool


@dataclass(frozen=True)
class Taxonomy:
    """Immutable after load; safe to share across threads."""

    nodes: dict[str, TaxNode]
    max_depth: int
    per_level_labels: dict[int, tuple[str, ...]]  # sorted codes + NULL, per level
    children: dict[str, tuple[str, ...]] = field(repr=False, default_factory=dict)
    _level_index: dict[int, dict[str, int]] = field(repr=False, default_factory=dict)

    def node(self, code: str) -> TaxNode:
        try:
            return self.nodes[code]
        except KeyError:
            raise TaxonomyError(f"unknown code: {code!r}") from None

    def roots(self) -> tuple[str, ...]:
        return self.per_level_labels[1][:-1]

    def label_index(self, level: int, code: str) -> int:
        """Position of `code` in the level's label space (NULL is last)."""
        return self._level_index[level][code]

    def fingerprint(self) -> str:
        payload = canonical_json(
            [
                {
                    "code": n.code,
                    "name": n.name,
                    "definition": n.definition,
                    "parent": n.parent,
                    "level": n.level,
                }
                for n in sorted(self.nodes.values(), key=lambda n: n.code)
            ]
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def to_json_bytes(self) -> bytes:
        doc = {
            "version": FORMAT_VERSION,
            "nodes": [
                {
                    "code": n.code,
                    "name": n.name,
                    "definition": n.definition,
                    **({"parent": n.parent} if n.parent is not None else {}),
                    "level": n.level,
                }
                for n in sorted(self.nodes.values(), key=lambda n: n.code)
            ],
        }
        return (json.dumps(doc, ensure_ascii=False, sort_keys=True, indent=1) + "\n").encode("utf-8")


def build_taxonomy(raw_nodes: list[dict]) -> Taxonomy:
    """Validate raw node dicts and assemble a Taxonomy. See load_taxonomy."""
    if not raw_nodes:
        raise TaxonomyError("taxonomy has no nodes")

    staged: dict[str, dict] = {}
    for raw in raw_nodes:
        for key in ("code", "name", "definition", "level"):
            if key not in raw:
                raise TaxonomyError(f"node missing field {key!r}: {raw.get('code', '?')!r}")
        code = raw["code"]
        if not isinstance(code, str) or not code:
            raise TaxonomyError(f"bad code: {code!r}")
        if code == NULL_CODE:
            raise TaxonomyError(f"code collides with the reserved NULL label: {code!r}")
        if code in staged:
            raise TaxonomyError(f"duplicate code: {code!r}")
        level = raw["level"]
        if not isinstance(level, int) or level < 1:
            raise TaxonomyError(f"bad level for code {code!r}: {level!r}")
        if level > MAX_LEVELS:
            raise TaxonomyError(f"level {level} exceeds the {MAX_LEVELS}-level cap: {code!r}")
        staged[code] = raw

    children: dict[str, list[str]] = {code: [] for code in staged}
    for code, raw in staged.items():
        parent = raw.get("parent")
        level = raw["level"]
        if parent is None:
            if level != 1:
                raise TaxonomyError(f"node without parent must be level 1: {code!r}")
        else:
            if parent not in staged:
                raise TaxonomyError(f"dangling parent {parent!r} for code {code!r}")
            if parent == code:
                raise TaxonomyError(f"cycle detected: {code!r} is its own parent")
            if level != staged[parent]["level"] + 1:
                raise TaxonomyError(
                    f"level mismatch for code {code!r}: level {level} "
                    f"but parent {parent!r} has level {staged[parent]['level']}"
                )
            children[parent].append(code)
    # Parent levels are strictly one less than child levels, so parent chains
    # terminate at level 1 and longer cycles cannot occur.

    nodes = {
        code: TaxNode(
            code=code,
            name=raw["name"],
            definition=raw["definition"],
            parent=raw.get("parent"),
            level=raw["level"],
            is_leaf=not children[code],
        )
        for code, raw in staged.items()
    }
    max_depth = max(n.level for n in nodes.values())
    per_level: dict[int, tuple[str, ...]] = {}
    level_index: dict[int, dict[str, int]] = {}
    for level in range(1, max_depth + 1):
        codes = sorted(c for c, n in nodes.items() if n.level == level)
        labels = tuple(codes) + (NULL_CODE,)
        per_level[level] = labels
        level_index[level] = {code: i for i, code in enumerate(labels)}
    return Taxonomy(
        nodes=nodes,
        max_depth=max_depth,
        per_level_labels=per_level,
        children={c: tuple(sorted(kids)) for c, kids in children.items()},
        _level_index=level_index,
    )


def load_taxonomy(source) -> Taxonomy:
    """Load and validate the taxonomy JSON format.

    `source` may be bytes, a UTF-8 string, or a readable (file-like) object.
    """
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise TaxonomyError(f"taxonomy parse error: {exc}") from exc
    if not isinstance(doc, dict) or "nodes" not in doc:
        raise TaxonomyError("taxonomy document must be an object with a 'nodes' list")
    if doc.get("version") != FORMAT_VERSION:
        raise TaxonomyError(f"unsupported taxonomy version: {doc.get('version')!r}")
    if not isinstance(doc["nodes"], list):
        raise TaxonomyError("'nodes' must be a list")
    return build_taxonomy(doc["nodes"])


def load_taxonomy_file(path) -> Taxonomy:
    with open(path, "rb") as fh:
        return load_taxonomy(fh)


def ancestors(taxonomy: Taxonomy, code: str) -> list[str]:
    """Root-first chain of codes ending at `code`; length equals its level."""
    node = taxonomy.node(code)
    chain = [code]
    while node.parent is not None:
        chain.append(node.parent)
        node = taxonomy.nodes[node.parent]
    chain.reverse()
    return chain


def is_valid_path(taxonomy: Taxonomy, codes: list[str]) -> bool:
    """True iff `codes` is a nonempty root-to-node chain of parent/child links."""
    if not codes:
        return False
    first = taxonomy.nodes.get(codes[0])
    if first is None or first.level != 1:
        return False
    for parent_code, child_code in zip(codes, codes[1:]):
        child = taxonomy.nodes.get(child_code)
        if child is None or child.parent != parent_code:
            return False
    return True
