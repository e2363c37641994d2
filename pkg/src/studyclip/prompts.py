"""Template grammar for generating clinical-style sentences from class labels.

Grammar syntax (used inside the shipped ``prompts.grammar`` file):

    [a, b, c]   uniform choice between alternatives
    x + y       concatenation, joined with a single space
    ( )         blank (empty string) branch
    {E}         slot resolved against a per-class expression template

Adjacent atoms inside one alternative concatenate the same way ``+`` does;
rendered strings are whitespace-normalized (single spaces, no space before
punctuation) with capitalization kept exactly as written in the templates.

The grammar file carries one entry per line, ``kind|name|polarity|template``,
where kind is ``template`` or ``expr`` and polarity is ``positive``,
``negative`` or ``both``. Classes without a class-specific template fall back
to the ``default`` template of the requested polarity with ``{E}`` resolved
from their ``expr`` entry.
"""

from __future__ import annotations

import itertools
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

GRAMMAR_ENV_VAR = "STUDYCLIP_GRAMMAR"

POSITIVE = "positive"
NEGATIVE = "negative"
LABEL_VALUES = (POSITIVE, NEGATIVE, "uncertain", "none")


class TemplateSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnresolvedSlot(KeyError):
    """A {E} slot was found but no class expression was supplied."""


class ExplosionError(RuntimeError):
    """Expansion set exceeds the requested cap."""


class NoTemplateError(LookupError):
    """No prompt set exists for the requested (class, value)."""


class UnsupportedValue(ValueError):
    """Prompts exist only for positive and negative label values."""


class EmptyLabelSet(ValueError):
    """No class in the label record produced a prompt."""


# ------------------------------------------------------------------ AST nodes


@dataclass(frozen=True)
class Literal:
    text: str


@dataclass(frozen=True)
class Blank:
    pass


@dataclass(frozen=True)
class ExprSlot:
    pass


@dataclass(frozen=True)
class Choice:
    options: tuple

    def __post_init__(self):
        if not self.options:
            raise TemplateSyntaxError("choice list must be non-empty", 0)


@dataclass(frozen=True)
class Concat:
    parts: tuple


Template = Literal | Blank | ExprSlot | Choice | Concat

_SPECIALS = "[],+{}"


def _normalize(text: str) -> str:
    text = re.sub(r"\s+", " ", text).strip()
    return re.sub(r"\s+([.,;:!?])", r"\1", text)


def parse_template(source: str) -> Template:
    """Parse grammar syntax into an expression tree (round-trips via serialize_template)."""
    node, pos = _parse_sequence(source, 0, in_choice=False)
    if pos != len(source):
        raise TemplateSyntaxError(f"unexpected {source[pos]!r}", pos)
    return node


def _parse_sequence(s: str, i: int, in_choice: bool):
    """Parse atoms and '+' separators up to ',' / ']' (inside a choice) or EOS."""
    atoms: list[Template] = []
    buf: list[str] = []
    seen_plus_at = -1

    def flush():
        text = "".join(buf).strip()
        buf.clear()
        if text:
            atoms.append(Literal(text))

    while i < len(s):
        c = s[i]
        if c == "[":
            flush()
            node, i = _parse_choice(s, i + 1)
            atoms.append(node)
        elif c == "]" or c == ",":
            if in_choice:
                break
            if c == "]":
                raise TemplateSyntaxError("unbalanced ']'", i)
            buf.append(c)
            i += 1
        elif c == "+":
            flush()
            if not atoms:
                raise TemplateSyntaxError("'+' with nothing before it", i)
            seen_plus_at = i
            i += 1
        elif c == "{":
            if s.startswith("{E}", i):
                flush()
                atoms.append(ExprSlot())
                i += 3
            else:
                raise TemplateSyntaxError("expected '{E}'", i)
        elif c == "}":
            raise TemplateSyntaxError("unbalanced '}'", i)
        elif c == "(" and s.startswith("( )", i):
            flush()
            atoms.append(Blank())
            i += 3
        else:
            buf.append(c)
            i += 1
    flush()
    if not atoms:
        raise TemplateSyntaxError("empty template fragment", i)
    if seen_plus_at >= 0 and len(atoms) < 2:
        raise TemplateSyntaxError("'+' with nothing after it", seen_plus_at)
    if len(atoms) == 1:
        return atoms[0], i
    return Concat(tuple(atoms)), i


def _parse_choice(s: str, i: int):
    options: list[Template] = []
    while True:
        node, i = _parse_sequence(s, i, in_choice=True)
        options.append(node)
        if i >= len(s):
            raise TemplateSyntaxError("unterminated choice", i)
        if s[i] == ",":
            i += 1
            continue
        if s[i] == "]":
            return Choice(tuple(options)), i + 1
        raise TemplateSyntaxError(f"unexpected {s[i]!r} in choice", i)


def serialize_template(t: Template) -> str:
    """Canonical grammar-syntax form; parse(serialize(parse(s))) == parse(s)."""
    if isinstance(t, Literal):
        return t.text
    if isinstance(t, Blank):
        return "( )"
    if isinstance(t, ExprSlot):
        return "{E}"
    if isinstance(t, Choice):
        return "[" + ", ".join(serialize_template(o) for o in t.options) + "]"
    if isinstance(t, Concat):
        return " + ".join(serialize_template(p) for p in t.parts)
    raise TypeError(f"not a template node: {t!r}")


def _contains_slot(t: Template) -> bool:
    if isinstance(t, ExprSlot):
        return True
    if isinstance(t, Choice):
        return any(_contains_slot(o) for o in t.options)
    if isinstance(t, Concat):
        return any(_contains_slot(p) for p in t.parts)
    return False


def expand_template(t: Template, class_expr: Template | None, rng: np.random.Generator) -> str:
    """One random expansion: each choice node sampled uniformly, output normalized."""
    return _normalize(_expand_raw(t, class_expr, rng))


def _expand_raw(t: Template, class_expr: Template | None, rng) -> str:
    if isinstance(t, Literal):
        return t.text
    if isinstance(t, Blank):
        return ""
    if isinstance(t, ExprSlot):
        if class_expr is None:
            raise UnresolvedSlot("template has a {E} slot but no class expression was given")
        return _expand_raw(class_expr, None, rng)
    if isinstance(t, Choice):
        pick = int(rng.integers(len(t.options)))
        return _expand_raw(t.options[pick], class_expr, rng)
    if isinstance(t, Concat):
        return " ".join(_expand_raw(p, class_expr, rng) for p in t.parts)
    raise TypeError(f"not a template node: {t!r}")


def enumerate_expansions(t: Template, class_expr: Template | None, cap: int = 100_000) -> set[str]:
    """Complete expansion set (normalized, deduplicated); ExplosionError beyond cap."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    out: set[str] = set()
    for raw in _enumerate_raw(t, class_expr):
        out.add(_normalize(raw))
        if len(out) > cap:
            raise ExplosionError(f"expansion set exceeds cap {cap}")
    return out


def _enumerate_raw(t: Template, class_expr: Template | None):
    if isinstance(t, Literal):
        yield t.text
    elif isinstance(t, Blank):
        yield ""
    elif isinstance(t, ExprSlot):
        if class_expr is None:
            raise UnresolvedSlot("template has a {E} slot but no class expression was given")
        yield from _enumerate_raw(class_expr, None)
    elif isinstance(t, Choice):
        for option in t.options:
            yield from _enumerate_raw(option, class_expr)
    elif isinstance(t, Concat):
        part_sets = [list(_enumerate_raw(p, class_expr)) for p in t.parts]
        for combo in itertools.product(*part_sets):
            yield " ".join(combo)
    else:
        raise TypeError(f"not a template node: {t!r}")


# -------------------------------------------------------------- prompt engine


@dataclass(frozen=True)
class PromptSet:
    class_name: str
    value: str
    sentences: frozenset[str]


@dataclass
class PromptEngine:
    """Parsed grammar: sentence templates plus per-class expression sets."""

    templates: dict[tuple[str, str], Template]
    expressions: dict[tuple[str, str], Template]
    source_path: str | None = None
    classes: list[str] = field(init=False)

    def __post_init__(self):
        names = {name for name, _ in self.templates if name != "default"}
        names |= {name for name, _ in self.expressions}
        self.classes = sorted(names)

    # -- loading

    @classmethod
    def from_path(cls, path: str | Path) -> "PromptEngine":
        text = Path(path).read_text(encoding="utf-8")
        templates: dict[tuple[str, str], Template] = {}
        expressions: dict[tuple[str, str], Template] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("|", 3)
            if len(fields) != 4:
                raise ValueError(f"{path}:{lineno}: expected kind|name|polarity|template")
            kind, name, polarity = (f.strip() for f in fields[:3])
            source = fields[3]
            if kind not in ("template", "expr"):
                raise ValueError(f"{path}:{lineno}: unknown kind {kind!r}")
            if polarity not in (POSITIVE, NEGATIVE, "both"):
                raise ValueError(f"{path}:{lineno}: unknown polarity {polarity!r}")
            tree = parse_template(source)
            target = templates if kind == "template" else expressions
            pols = (POSITIVE, NEGATIVE) if polarity == "both" else (polarity,)
            for pol in pols:
                key = (name, pol)
                if key in target:
                    raise ValueError(f"{path}:{lineno}: duplicate entry for {key}")
                target[key] = tree
        return cls(templates=templates, expressions=expressions, source_path=str(path))

    @classmethod
    def default(cls) -> "PromptEngine":
        override = os.environ.get(GRAMMAR_ENV_VAR)
        if override:
            return cls.from_path(override)
        return cls.from_path(default_grammar_path())

    # -- lookup

    def _select(self, class_name: str, value: str):
        if value not in (POSITIVE, NEGATIVE):
            raise UnsupportedValue(f"prompts exist only for positive/negative, got {value!r}")
        template = self.templates.get((class_name, value))
        expr = self.expressions.get((class_name, value))
        if template is None:
            if expr is None:
                raise NoTemplateError(f"no prompt set for ({class_name!r}, {value!r})")
            template = self.templates[("default", value)]
        if _contains_slot(template) and expr is None:
            raise UnresolvedSlot(f"template for ({class_name!r}, {value!r}) needs an expression set")
        return template, expr

    def has_prompt(self, class_name: str, value: str) -> bool:
        try:
            self._select(class_name, value)
        except (NoTemplateError, UnsupportedValue, UnresolvedSlot):
            return False
        return True

    # -- rendering

    def render_prompt(self, class_name: str, value: str, rng: np.random.Generator) -> str:
        template, expr = self._select(class_name, value)
        return expand_template(template, expr, rng)

    def prompt_set(self, class_name: str, value: str, cap: int = 100_000) -> PromptSet:
        template, expr = self._select(class_name, value)
        return PromptSet(class_name, value, frozenset(enumerate_expansions(template, expr, cap)))

    def build_study_text(
        self,
        labels: dict[str, str],
        rng: np.random.Generator,
        negative_sample_count: int | None = None,
    ) -> str:
        """One prompt per labeled class, joined in a seeded random order.

        Classes valued uncertain/none are skipped, as are negatives without a
        negative prompt form. With negative_sample_count set (binary-label
        mode) all positives are kept and that many negatives are sampled.
        """
        positives = sorted(c for c, v in labels.items() if v == POSITIVE)
        negatives = sorted(
            c for c, v in labels.items() if v == NEGATIVE and self.has_prompt(c, NEGATIVE)
        )
        if negative_sample_count is not None:
            k = min(negative_sample_count, len(negatives))
            if k < len(negatives):
                chosen = rng.choice(len(negatives), size=k, replace=False)
                negatives = [negatives[i] for i in sorted(int(j) for j in chosen)]
        included = [(c, POSITIVE) for c in positives] + [(c, NEGATIVE) for c in negatives]
        if not included:
            raise EmptyLabelSet("no class in the label record produced a prompt")
        order = rng.permutation(len(included))
        sentences = [self.render_prompt(*included[int(i)], rng) for i in order]
        return " ".join(sentences)

    def eval_prompt_pair(self, class_name: str, style: str = "simple") -> tuple[str, str]:
        """Fixed positive/negative prompt pair used by zero-shot evaluation."""
        if not class_name:
            raise ValueError("class name must be non-empty")
        if style == "simple":
            return class_name, f"No {class_name}"
        if style == "rsna":
            return "Findings suggesting pneumonia.", "No evidence of pneumonia."
        raise ValueError(f"unknown evaluation prompt style {style!r}")


def default_grammar_path() -> Path:
    return Path(str(resources.files("studyclip").joinpath("data/prompts.grammar")))
