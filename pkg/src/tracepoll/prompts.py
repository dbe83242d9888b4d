"""Modular prompt construction and strict output parsing.

Prompts are a concatenation of three sections: background (optional), the
rendered user trace, and instructions carrying the feature choice sets. The
annotator's reply is parsed back into one five-field record per feature title.
All randomization (feature-order shuffles, tie breaks) is seeded explicitly.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .domain import (
    FeatureDef,
    FeatureKind,
    FeatureValue,
    Mould,
    SiliconResponse,
    normalize_category,
)


class PromptError(Exception):
    pass


class EmptyFeatures(PromptError):
    pass


class AnnotationParseError(PromptError):
    pass


class MissingTitle(AnnotationParseError):
    def __init__(self, title: str):
        super().__init__(f"no answer found for title {title!r}")
        self.title = title


class DuplicateTitle(AnnotationParseError):
    def __init__(self, title: str):
        super().__init__(f"title {title!r} answered more than once")
        self.title = title


class UnknownSymbol(AnnotationParseError):
    def __init__(self, title: str, symbol: str):
        super().__init__(f"title {title!r}: symbol {symbol!r} not in choice set")
        self.title = title
        self.symbol = symbol


class MissingField(AnnotationParseError):
    def __init__(self, title: str, fieldname: str):
        super().__init__(f"title {title!r}: field {fieldname!r} missing")
        self.title = title
        self.fieldname = fieldname


class PlaceholderLeak(PromptError):
    pass


class OutOfRange(PromptError):
    pass


class MissingStateFeatures(PromptError):
    pass


class MissingBackground(PromptError):
    pass


# ---------------------------------------------------------------------------
# Fixed prompt texts. These are contract strings: the screening filters and
# the reply parsers key on them, so they must not drift.
# ---------------------------------------------------------------------------

ENTITY_FILTER_PROMPT = (
    "Is this the account of a real-life existing Person, or of another kind of entity ?\n"
    'Respond either with "P" for Person or "O" for Other.'
)

GEO_FILTER_PROMPT = (
    "Which state of the USA do they live in?\n"
    'If they do not specify a state, but are still from the United States, write "USA".\n'
    'If they are not from a state in the USA, write "Not from a state in the USA".\n'
    "Write out just the full name of the state.\n"
    'If they are from the District of Columbia, also known as Washington D.C., write "District of Columbia".'
)

GEO_REJECTION_REPLY = "Not from a state in the USA"

SPECULATION_MODULE = """For each selected symbol / category, please note the level of Speculation involved in this selection.
Present the Speculation level for each selection on a scale from 0 (not speculative at all, every single element of the user data was useful in the selection) to 100 (fully speculative, there is no information related to this title in the user data).
Speculation levels should be a direct measure of the amount of useful information available in the user data.
Speculation levels pertain only to the information available in the user data -- namely the username, name, description, location, profile picture and tweets from this user -- and should not be affected by additional information available to you from any other source.
To ensure consistency, use the following guidelines to determine speculation levels:

0-20 (Low speculation): The user data provides clear and direct information relevant to the title. (e.g., explicit mention in the profile or tweets)
21-40 (Moderate-low speculation): The user data provides indirect but strong indicators relevant to the title. (e.g., context from multiple sources within the profile or tweets)
41-60 (Moderate speculation): The user data provides some hints or partial information relevant to the title. (e.g., inferred from user interests or indirect references)
61-80 (Moderate-high speculation): The user data provides limited and weak indicators relevant to the title. (e.g., very subtle hints or minimal context)
81-100 (High speculation): The user data provides no or almost no information relevant to the title. (e.g., assumptions based on very general information)

For each selected category, please explain at length what features of the data contributed to your choice and your speculation level."""

_INSTRUCTIONS_HEAD = """I will show you a number of categories to which this user may belong to.
The categories are preceded by a title (e.g. "AGE:" or "SEX:" etc.) and a symbol (e.g. "A1", "A2" or "E" etc.).
Please select, for each title, the most likely category to which this user belongs to.

In your answer present, for each title, the selected symbol. Write out in full the category associated with the selected symbol. The chosen symbol / category must be the most likely to accurately represent this user. You must only select one symbol / category per title. A title, symbol and category cannot appear more than once in your answer."""

_INSTRUCTIONS_TAIL = """Preserve a strictly structured answer to ease parsing of the text. Format your output as follows (this is just an example, I do not care about this specific title or symbol / category):

**title: AGE**
**explanation: ...**
**symbol: A1)**
**category: 18-25**
**speculation: 90**

YOU MUST GIVE AN ANSWER FOR EVERY TITLE !
Below is the list of categories to which this user may belong to:"""

FEATURE_BUILDER_INSTRUCTIONS = """Based on what you know of the candidates in the 2020 Presidential election held in this state on November 3, 2020, please complete the following set of questions and their options.

If there are no candidates for the given party, remove the option related to the given party entirely -- do not present that party's option at all.
If there is more than one candidate for a single party, write out each option in two separate lines, and assign a different symbol for the identifier to each.

Below is the set of questions and options for you to complete - your job is to replace the instances wrapped in <...> with the correct knowledge for this state.
Do not produce any other text beyond the completed set of questions."""

PAST_VOTE_TEMPLATE = """PAST VOTE - VOTE CHOICE IN THE 2020 PRESIDENTIAL ELECTION:
Vpa1) did not vote in the 2020 election for President in <INSERT_STATE_NAME_HERE>
Vpa<INSERT_OPTION_NUMBER_HERE>) voted for <INSERT_REPUBLICAN_CANDIDATE_NAME_HERE>, the Republican Party candidate, in the 2020 election for President in <INSERT_STATE_NAME_HERE>
Vpa<INSERT_OPTION_NUMBER_HERE>) voted for <INSERT_DEMOCRAT_CANDIDATE_NAME_HERE>, the Democratic Party candidate, in the 2020 election for President in <INSERT_STATE_NAME_HERE>
Vpa<INSERT_OPTION_NUMBER_HERE>) voted for <INSERT_OTHER_CANDIDATE_NAME_HERE>, the <INSERT_PARTY_NAME_HERE> candidate, in the 2020 election for President in <INSERT_STATE_NAME_HERE>"""


@dataclass(frozen=True)
class PromptSections:
    background: str
    mould_text: str
    instructions: str

    def __post_init__(self):
        if not self.mould_text or not self.instructions:
            raise PromptError("mould_text and instructions must be non-empty")

    def render(self) -> str:
        parts = []
        if self.background:
            parts.append("BACKGROUND\n" + self.background)
        parts.append("USER DATA\n" + self.mould_text)
        parts.append("INSTRUCTIONS\n" + self.instructions)
        return "\n\n".join(parts)


class PromptStrategy(Enum):
    MINIMALLY_INFORMATIVE = "minimally_informative"
    MODERATELY_INFORMATIVE = "moderately_informative"
    HIGHLY_INFORMATIVE = "highly_informative"
    JOINT_SOCIODEMOGRAPHIC = "joint_sociodemographic"


def render_feature_block(feature: FeatureDef) -> str:
    """One choice-set block: the title line then one 'symbol) category' line each."""
    lines = [f"{feature.title}:"]
    lines.extend(f"{sym}) {cat}" for sym, cat in feature.options)
    return "\n".join(lines)


def render_mould(mould: Mould) -> str:
    """Render the user trace with the fixed field labels the parsers rely on."""
    u = mould.user
    head = (
        "A social media account has the following username, name, description and "
        f"profile image: username: {u.username}, name: {u.display_name}, "
        f"description: {u.description}."
    )
    if u.profile_image_ref:
        head += f" profile image: {u.profile_image_ref}."
    head += (
        " Furthermore, they self-report their location in their bio as follows: "
        f"{u.location_raw or ''}"
    )
    lines = [
        head,
        "",
        "Finally, they have written the following tweet(s); date and time of tweet "
        "(date expressed as Y-m-d):",
    ]
    for t in mould.tweets:
        lines.append("")
        lines.append(f"created at: {t.created_at.strftime('%Y-%m-%d %H:%M:%S')}")
        lines.append(f"text: {t.text}")
    return "\n".join(lines)


def order_features(
    features: Sequence[FeatureDef],
    randomize: bool = False,
    seed: Optional[int] = None,
) -> list[FeatureDef]:
    """Independent features first, dependent after; optionally shuffled within
    each group with a seeded RNG (deterministic per seed)."""
    indep = [f for f in features if f.kind is FeatureKind.INDEPENDENT]
    dep = [f for f in features if f.kind is FeatureKind.DEPENDENT]
    if randomize:
        rng = random.Random(seed)
        rng.shuffle(indep)
        rng.shuffle(dep)
    return indep + dep


def build_instructions(
    features: Sequence[FeatureDef], include_speculation: bool = True
) -> str:
    blocks = "\n\n".join(render_feature_block(f) for f in features)
    parts = [_INSTRUCTIONS_HEAD]
    if include_speculation:
        parts.append(SPECULATION_MODULE)
    parts.append(_INSTRUCTIONS_TAIL)
    return "\n\n".join(parts) + "\n\n" + blocks


def build_prompt(
    background: str,
    mould: Mould,
    features: Sequence[FeatureDef],
    randomize_order: bool = False,
    include_speculation: bool = True,
    seed: Optional[int] = None,
) -> str:
    """Compose background, rendered mould and instructions into one prompt."""
    if not features:
        raise EmptyFeatures("at least one feature required")
    ordered = order_features(features, randomize=randomize_order, seed=seed)
    sections = PromptSections(
        background=background,
        mould_text=render_mould(mould),
        instructions=build_instructions(ordered, include_speculation=include_speculation),
    )
    return sections.render()


def load_prompt_template(path: str | Path) -> str:
    """Plain-text template with {{background}}, {{mould}} and {{features}} slots."""
    text = Path(path).read_text(encoding="utf-8")
    for slot in ("{{background}}", "{{mould}}", "{{features}}"):
        if slot not in text:
            raise PromptError(f"{path}: template missing {slot}")
    return text


def render_template(template: str, background: str, mould_text: str, features_text: str) -> str:
    return (
        template.replace("{{background}}", background)
        .replace("{{mould}}", mould_text)
        .replace("{{features}}", features_text)
    )


# ---------------------------------------------------------------------------
# Output parsing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParseWarning:
    kind: str
    title: str
    detail: str


@dataclass(frozen=True)
class ParsedAnnotation:
    entries: tuple[FeatureValue, ...]
    warnings: tuple[ParseWarning, ...] = ()

    def as_map(self) -> dict[str, FeatureValue]:
        return {fv.title: fv for fv in self.entries}


_TITLE_RE = re.compile(r"\*\*title:\s*(.*?)\s*\*\*")
_FIELD_RES = {
    "explanation": re.compile(r"\*\*explanation:\s*(.*?)\s*\*\*", re.DOTALL),
    "symbol": re.compile(r"\*\*symbol:\s*(.*?)\s*\*\*"),
    "category": re.compile(r"\*\*category:\s*(.*?)\s*\*\*", re.DOTALL),
    "speculation": re.compile(r"\*\*speculation:\s*(.*?)\s*\*\*"),
}

EXPLANATION_STORE_LIMIT = 2000  # stored explanations are truncated, parsing is not


def parse_annotation(raw: str, expected: Sequence[FeatureDef]) -> ParsedAnnotation:
    """Extract the five starred fields per expected title.

    The symbol identifies the answer: on symbol/category disagreement the
    symbol wins and a warning is recorded. Speculation is clamped to [0, 100]
    with a warning. Unexpected extra titles are ignored with a warning.
    """
    defs = {f.title: f for f in expected}
    spans: dict[str, str] = {}
    warnings: list[ParseWarning] = []
    matches = list(_TITLE_RE.finditer(raw))
    for i, m in enumerate(matches):
        title = m.group(1)
        end = matches[i + 1].start() if i + 1 < len(matches) else len(raw)
        if title in spans:
            raise DuplicateTitle(title)
        spans[title] = raw[m.end() : end]
    for title in spans:
        if title not in defs:
            warnings.append(ParseWarning("UnexpectedTitle", title, "not requested"))

    entries: list[FeatureValue] = []
    for fdef in expected:
        if fdef.title not in spans:
            raise MissingTitle(fdef.title)
        block = spans[fdef.title]
        fields: dict[str, str] = {}
        for name, rex in _FIELD_RES.items():
            m = rex.search(block)
            if m is None:
                raise MissingField(fdef.title, name)
            fields[name] = m.group(1)
        symbol = fields["symbol"].strip()
        if symbol.endswith(")"):
            symbol = symbol[:-1].strip()
        if symbol not in fdef.symbols:
            raise UnknownSymbol(fdef.title, symbol)
        canonical = fdef.category_for(symbol)
        reported = fields["category"].strip()
        if normalize_category(reported) != normalize_category(canonical):
            warnings.append(
                ParseWarning(
                    "SymbolCategoryDisagreement",
                    fdef.title,
                    f"symbol {symbol!r} implies {canonical!r}, reply said {reported!r}",
                )
            )
        spec_text = fields["speculation"].strip()
        m = re.match(r"-?\d+", spec_text)
        if m is None:
            raise MissingField(fdef.title, "speculation")
        spec = int(m.group(0))
        if not 0 <= spec <= 100:
            warnings.append(
                ParseWarning("SpeculationClamped", fdef.title, f"raw value {spec}")
            )
            spec = min(100, max(0, spec))
        entries.append(
            FeatureValue(
                title=fdef.title,
                symbol=symbol,
                category=canonical,
                explanation=fields["explanation"].strip()[:EXPLANATION_STORE_LIMIT],
                speculation=spec,
            )
        )
    return ParsedAnnotation(entries=tuple(entries), warnings=tuple(warnings))


# ---------------------------------------------------------------------------
# Choice-set block parsing (builder replies and the mock oracle's prompt view)
# ---------------------------------------------------------------------------

_OPTION_RE = re.compile(r"^([A-Za-z][A-Za-z0-9]*?(\d+))\)\s+(.*)$")


def parse_feature_blocks(
    text: str, kind: FeatureKind = FeatureKind.INDEPENDENT
) -> list[FeatureDef]:
    """Parse 'TITLE:' blocks with 'Sym1) category' option lines."""
    features: list[FeatureDef] = []
    title: Optional[str] = None
    options: list[tuple[str, str]] = []

    def flush():
        nonlocal title, options
        if title is not None:
            if len(options) < 2:
                raise AnnotationParseError(f"block {title!r}: fewer than 2 options")
            features.append(FeatureDef(title=title, options=tuple(options), kind=kind))
        title, options = None, []

    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        m = _OPTION_RE.match(line)
        if m:
            if title is None:
                raise AnnotationParseError(f"option line before any title: {line!r}")
            options.append((m.group(1), m.group(3).strip()))
        elif line.endswith(":"):
            flush()
            title = line[:-1].strip()
        else:
            # continuation of the previous option's category text
            if options:
                sym, cat = options[-1]
                options[-1] = (sym, cat + " " + line)
            elif title is None:
                raise AnnotationParseError(f"unparseable line: {line!r}")
    flush()
    if not features:
        raise AnnotationParseError("no feature blocks found")
    return features


_PLACEHOLDER_RE = re.compile(r"<[^<>\n]*>")


def build_features_via_builder(
    background: str,
    template: str,
    annotator,
    kind: FeatureKind = FeatureKind.INDEPENDENT,
    instructions: str = FEATURE_BUILDER_INSTRUCTIONS,
) -> list[FeatureDef]:
    """Two-step feature construction: ask the backend to complete a template
    choice set, then parse the completed blocks into FeatureDefs.

    The reply must contain no surviving <...> placeholders, and each block's
    symbols must be sequential (shared prefix, numbered 1..N).
    """
    if not _PLACEHOLDER_RE.search(template):
        raise PromptError("template has no <...> placeholders to complete")
    prompt = background + "\n\n" + instructions + "\n\n" + template
    reply = annotator.complete(prompt)
    leak = _PLACEHOLDER_RE.search(reply)
    if leak:
        raise PlaceholderLeak(f"backend left placeholder {leak.group(0)!r}")
    features = parse_feature_blocks(reply, kind=kind)
    for f in features:
        prefixes = set()
        for i, sym in enumerate(f.symbols, start=1):
            m = re.match(r"([A-Za-z]+)(\d+)$", sym)
            if m is None or int(m.group(2)) != i:
                raise AnnotationParseError(
                    f"block {f.title!r}: symbols not sequential ({sym!r} at {i})"
                )
            prefixes.add(m.group(1))
        if len(prefixes) != 1:
            raise AnnotationParseError(f"block {f.title!r}: mixed symbol prefixes")
    return features


# ---------------------------------------------------------------------------
# Speculation scoring
# ---------------------------------------------------------------------------


class SpeculationBand(Enum):
    LOW = "low"
    MODERATE_LOW = "moderate_low"
    MODERATE = "moderate"
    MODERATE_HIGH = "moderate_high"
    HIGH = "high"


def speculation_band(score: int) -> SpeculationBand:
    if not 0 <= score <= 100:
        raise OutOfRange(f"speculation {score} outside [0, 100]")
    if score <= 20:
        return SpeculationBand.LOW
    if score <= 40:
        return SpeculationBand.MODERATE_LOW
    if score <= 60:
        return SpeculationBand.MODERATE
    if score <= 80:
        return SpeculationBand.MODERATE_HIGH
    return SpeculationBand.HIGH


def is_highly_speculative(
    response: SiliconResponse,
    relevant_titles: Iterable[str],
    threshold: int = 80,
) -> bool:
    """True iff any relevant feature's speculation score strictly exceeds the
    threshold (80 means 81+ counts as highly speculative)."""
    for title in relevant_titles:
        if title not in response.values:
            raise MissingTitle(title)
        if response.values[title].speculation > threshold:
            return True
    return False


# ---------------------------------------------------------------------------
# Prompting strategies and vote ensembling
# ---------------------------------------------------------------------------


def strategy_prompt(
    strategy: PromptStrategy,
    mould: Mould,
    base_features: Sequence[FeatureDef],
    state_features: Optional[Sequence[FeatureDef]] = None,
    background: str = "",
    demo_features: Sequence[FeatureDef] = (),
    include_speculation: bool = True,
    seed: Optional[int] = None,
) -> str:
    """Build the vote-extraction prompt for one of the four strategies.

    base_features is the standard (state-agnostic) vote choice set;
    state_features is the builder's state-conditioned set; demo_features are
    the socio-demographic sets the joint strategy conditions on.
    """
    if strategy is PromptStrategy.MINIMALLY_INFORMATIVE:
        return build_prompt(
            "", mould, list(base_features), include_speculation=include_speculation, seed=seed
        )
    if strategy is PromptStrategy.MODERATELY_INFORMATIVE:
        if not state_features:
            raise MissingStateFeatures(strategy.value)
        return build_prompt(
            "", mould, list(state_features), include_speculation=include_speculation, seed=seed
        )
    if strategy is PromptStrategy.HIGHLY_INFORMATIVE:
        if not state_features:
            raise MissingStateFeatures(strategy.value)
        if not background:
            raise MissingBackground(strategy.value)
        return build_prompt(
            background,
            mould,
            list(state_features),
            include_speculation=include_speculation,
            seed=seed,
        )
    if strategy is PromptStrategy.JOINT_SOCIODEMOGRAPHIC:
        return build_prompt(
            "",
            mould,
            list(demo_features) + list(base_features),
            include_speculation=include_speculation,
            seed=seed,
        )
    raise PromptError(f"unknown strategy {strategy}")


def majority_vote(votes: Sequence[str], rng_seed: Optional[int] = None) -> str:
    """Plurality winner; ties broken uniformly at random among the leaders.

    Deterministic for a fixed seed and independent of input order (tied
    leaders are sorted before drawing).
    """
    if not votes:
        raise PromptError("majority_vote needs at least one vote")
    counts: dict[str, int] = {}
    for v in votes:
        counts[v] = counts.get(v, 0) + 1
    top = max(counts.values())
    leaders = sorted(v for v, c in counts.items() if c == top)
    if len(leaders) == 1:
        return leaders[0]
    return random.Random(rng_seed).choice(leaders)


def ensemble_vote(
    mould: Mould,
    annotator,
    base_feature: FeatureDef,
    state_feature: Optional[FeatureDef] = None,
    background: str = "",
    demo_features: Sequence[FeatureDef] = (),
    include_speculation: bool = True,
    rng_seed: Optional[int] = None,
    align=None,
) -> tuple[FeatureValue, dict[str, FeatureValue]]:
    """Extract one vote-choice feature under every applicable strategy and
    majority-vote the category (ties broken by the seed).

    Strategies needing inputs that are absent (a state-conditioned choice set,
    background results) are skipped, so the ensemble degrades gracefully to
    the minimal + joint pair. When the state-conditioned set words its
    categories differently from the base set, pass `align` to map any
    category string onto the comparable label before voting. Returns the
    winning strategy's answer plus the per-strategy answers for audit.
    """
    align = align or normalize_category
    per_strategy: dict[str, FeatureValue] = {}
    for strategy in PromptStrategy:
        if strategy in (
            PromptStrategy.MODERATELY_INFORMATIVE,
            PromptStrategy.HIGHLY_INFORMATIVE,
        ) and state_feature is None:
            continue
        if strategy is PromptStrategy.HIGHLY_INFORMATIVE and not background:
            continue
        feature = (
            state_feature
            if strategy
            in (PromptStrategy.MODERATELY_INFORMATIVE, PromptStrategy.HIGHLY_INFORMATIVE)
            else base_feature
        )
        prompt = strategy_prompt(
            strategy,
            mould,
            [base_feature],
            state_features=[state_feature] if state_feature else None,
            background=background,
            demo_features=demo_features,
            include_speculation=include_speculation,
            seed=rng_seed,
        )
        reply = annotator.complete(prompt)
        expected = (
            list(demo_features) + [feature]
            if strategy is PromptStrategy.JOINT_SOCIODEMOGRAPHIC
            else [feature]
        )
        parsed = parse_annotation(reply, expected)
        per_strategy[strategy.value] = parsed.as_map()[feature.title]
    winner_cat = majority_vote(
        [align(fv.category) for fv in per_strategy.values()], rng_seed=rng_seed
    )
    # keep the answer of the first strategy that voted for the winner
    for fv in per_strategy.values():
        if align(fv.category) == winner_cat:
            return fv, per_strategy
    raise PromptError("no strategy produced the winning category")  # unreachable


def render_election_background(state: str, rows: Sequence[tuple[str, str, str]]) -> str:
    """Area-level past-results table in the fixed background wording."""
    lines = [
        f"The results of the 2020 US Presidential election in state -- {state} -- "
        "are reported below.",
        "",
        "Candidate | Party | Share",
    ]
    lines.extend(f"{cand} | {party} | {share}" for cand, party, share in rows)
    lines.append("")
    lines.append(
        "In the above, note that election results are stated as % of the voting age "
        "population in the state."
    )
    return "\n".join(lines)
