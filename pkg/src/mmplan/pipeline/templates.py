"""Prompt templates: loading, placeholder binding, and rendering rules.

Template files are plain text. ``[goal]``, ``[step]``, ``[prev_steps]`` and
``[steps]`` are placeholders bound at render time; rendering with any of them
left unbound is an error. The escaped form ``[[name]]`` renders to the
literal token ``[name]``, which is how the instruction text and rubrics can
talk about the symbols themselves while the binding lines below them receive
the actual values. Anything else in brackets (e.g. ``[verb]``) passes through
untouched.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

from ..errors import RenderError

PLACEHOLDERS = ("goal", "step", "prev_steps", "steps")

_ESCAPED = re.compile(r"\[\[(%s)\]\]" % "|".join(PLACEHOLDERS))
_BARE = re.compile(r"\[(%s)\]" % "|".join(PLACEHOLDERS))


class TemplateName(str, Enum):
    PLAN_GEN = "plan_gen"
    OSRCOT = "osrcot"
    OSRCOT_V1 = "osrcot_v1"
    OSRCOT_V2 = "osrcot_v2"
    OSRCOT_V3 = "osrcot_v3"
    TPLAN_JUDGE = "tplan_judge"
    CA_DESCRIBE = "ca_describe"
    CA_SCORE = "ca_score"


VARIANT_TEMPLATES = {
    "osrcot": TemplateName.OSRCOT,
    "v1": TemplateName.OSRCOT_V1,
    "v2": TemplateName.OSRCOT_V2,
    "v3": TemplateName.OSRCOT_V3,
}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    def placeholders(self) -> set[str]:
        sentinel = _ESCAPED.sub(lambda m: f"\x00{m.group(1)}\x00", self.body)
        return set(_BARE.findall(sentinel))

    def render(self, **bindings: str) -> str:
        """Bind placeholders. Escapes are protected first so substitution is a
        single simultaneous pass and bound values are inserted verbatim."""
        protected = _ESCAPED.sub(lambda m: f"\x00{m.group(1)}\x00", self.body)
        unbound = [n for n in set(_BARE.findall(protected)) if n not in bindings]
        if unbound:
            raise RenderError(f"template {self.name}: unbound placeholders {sorted(unbound)}")
        rendered = _BARE.sub(lambda m: str(bindings[m.group(1)]), protected)
        return re.sub(r"\x00(%s)\x00" % "|".join(PLACEHOLDERS), r"[\1]", rendered)


class TemplateLibrary:
    """Loads templates from the packaged defaults or an override directory."""

    def __init__(self, override_dir: Path | None = None):
        self.override_dir = Path(override_dir) if override_dir else None
        self._cache: dict[str, PromptTemplate] = {}

    def get(self, name: TemplateName | str) -> PromptTemplate:
        key = name.value if isinstance(name, TemplateName) else str(name)
        if key not in self._cache:
            self._cache[key] = PromptTemplate(name=key, body=self._read(key))
        return self._cache[key]

    def for_variant(self, variant: str) -> PromptTemplate:
        try:
            return self.get(VARIANT_TEMPLATES[variant])
        except KeyError:
            raise ValueError(f"unknown prompt variant: {variant!r}") from None

    def _read(self, key: str) -> str:
        filename = f"{key}.txt"
        if self.override_dir is not None:
            candidate = self.override_dir / filename
            if candidate.is_file():
                return candidate.read_text(encoding="utf-8")
        ref = resources.files("mmplan.pipeline").joinpath("templates").joinpath(filename)
        if not ref.is_file():
            raise FileNotFoundError(f"no such template: {filename}")
        return ref.read_text(encoding="utf-8")
