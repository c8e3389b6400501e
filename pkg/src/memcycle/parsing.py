"""Structured-output extraction from free-form model responses."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any

from .errors import SchemaMismatch, UnparseableResponse

_DECODER = json.JSONDecoder()
_TAG_RE = re.compile(r"<([A-Za-z][\w-]*)>(.*?)</\1\s*>", re.DOTALL | re.IGNORECASE)


@dataclass(frozen=True)
class Schema:
    """Expected shape of a response.

    kind: ``object`` (first JSON object), ``array`` (first JSON array) or
    ``tags`` (``<name>...</name>`` fields). ``required`` lists keys or tag
    names that must be present.
    """

    kind: str
    required: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("object", "array", "tags"):
            raise ValueError(f"unknown schema kind {self.kind!r}")


JUDGE = Schema("object", ("label",))
ANSWERABILITY = Schema("tags", ("decision",))
REWRITE = Schema("object", ("rewritten_query",))
EDIT_ACTIONS = Schema("array")
PROBES = Schema("array")
REPAIR = Schema("object", ("op",))
CONSOLIDATION = Schema("object", ("action",))


def iter_json(text: str, opener: str):
    """Yield every JSON value that starts at an ``opener`` character, left to right."""
    pos = text.find(opener)
    while pos != -1:
        try:
            value, end = _DECODER.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find(opener, pos + 1)
            continue
        yield value
        pos = text.find(opener, end)


def extract_tags(text: str) -> dict[str, str]:
    tags: dict[str, str] = {}
    for match in _TAG_RE.finditer(text):
        tags.setdefault(match.group(1).lower(), match.group(2).strip())
    return tags


def parse_structured(response: str, schema: Schema) -> Any:
    """Pull the payload described by ``schema`` out of ``response``.

    Code fences and surrounding prose are tolerated. For objects, the first
    object carrying every required key wins.
    """
    if schema.kind == "tags":
        tags = extract_tags(response)
        if not tags:
            raise UnparseableResponse("no tagged fields in response", response)
        missing = [t for t in schema.required if t not in tags]
        if missing:
            raise SchemaMismatch(f"missing tag(s) {', '.join(missing)}", response)
        return tags
    opener = "{" if schema.kind == "object" else "["
    kind = dict if schema.kind == "object" else list
    found_any = False
    for value in iter_json(response, opener):
        if not isinstance(value, kind):
            continue
        found_any = True
        if kind is list or all(k in value for k in schema.required):
            return value
    if found_any:
        raise SchemaMismatch(f"no JSON {schema.kind} with key(s) {', '.join(schema.required)}", response)
    raise UnparseableResponse(f"no JSON {schema.kind} in response", response)
