"""Policymaker decision layer.

A decision is a four-key JSON object::

    {"prediction_without_policy": int, "reasoning": str,
     "shutdown_percentage": 0-100, "prediction_with_new_policy": int}

:class:`PolicyAgent` wraps a per-call decider (LLM-backed or scripted),
optionally adds the scenario knowledge paragraph to the prompt, and averages
``ensemble_k`` independent calls.
"""
from __future__ import annotations

import json
import logging
import math
from fractions import Fraction
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Protocol, Sequence

from .epidemic import WorldMode
from .memory import MemoryRecord

log = logging.getLogger(__name__)

DECISION_KEYS = (
    "prediction_without_policy",
    "reasoning",
    "shutdown_percentage",
    "prediction_with_new_policy",
)

FLU_ANCHOR = "During flu season, there are seven hundred flu cases every week on average."

GUIDING_PRINCIPLE = (
    "The default stance should be to keep the city open (low shutdown levels). "
    "Restrictions should only be implemented when case numbers clearly justify them."
)

ROLE_PREAMBLE = (
    "You are Jennifer, the mayor of a city of one million people, facing an epidemic. "
    "Each week, you must decide the shutdown level for the city (0% to 100%).\n"
    "A pragmatic, democratically elected leader in your late forties with a background "
    "in public policy, you focus on results over politics. You rely on expert advice, "
    "accurate data, and trustable models. You balance economic growth, public safety, "
    "transportation, and housing, and you explain your decisions clearly so people "
    "understand your reasoning. You insist on transparency and evidence-based policies, "
    "and you track clear metrics of success. You are ambitious yet cautious, knowing "
    "your choices affect real people."
)

_KNOWLEDGE_OPENING = (
    "Here I provide some information to help you better understand epidemic dynamics. "
    "Epidemics are primarily governed by interacting feedback loops. First, there is the "
    "reinforcing (positive) feedback loop: infection breeds more infection. Without "
    "intervention, cases grow exponentially as each infected person spreads the disease "
    "to susceptible individuals. The second is the balancing feedback loop of depletion. "
    "As more people become infected and then immune after recovery, the pool of "
    "susceptible individuals shrinks, which naturally slows transmission over time."
)

KNOWLEDGE_TEXT = {
    WorldMode.WORLD1: "\n".join([
        _KNOWLEDGE_OPENING,
        "Government restrictions can also affect the spread of the disease by influencing "
        "people's behavior. As you impose stricter measures on business and social "
        "activities, the probability of disease spread decreases. In simple terms, stronger "
        "shutdowns mean lower future infection rates-though naturally at an economic cost. "
        "In your town people ignore the disease unless the government imposes restrictions "
        "which they will comply with.",
        "When forecasting and making decisions, it is crucial to recognize that implementing "
        "or relaxing restrictive policies influences the spread of the disease.",
    ]),
    WorldMode.WORLD2: "\n".join([
        _KNOWLEDGE_OPENING,
        "In addition to these biological feedback loops, there are behavioral feedback loops "
        "that shape transmission. As cases rise, people tend to grow more cautious and "
        "voluntarily adopt protective behaviors such as masking, distancing, and avoiding "
        "crowds. These reactions reduce the transmission rate. Conversely, when cases decline, "
        "individuals often relax their guard, which can lead to increased transmission and a "
        "resurgence of cases. Most importantly for your role, government restrictions are also "
        "part of a behavioral feedback loop. As you impose stricter measures on business and "
        "social activities, the probability of disease spread decreases. In simple terms, "
        "stronger shutdowns mean lower future infection rates-though naturally at an economic "
        "cost. Your shutdown decisions do not operate in isolation; they interact with "
        "voluntary citizen behavior driven by perceived risk.",
        "When forecasting and making decisions, it is crucial to recognize that implementing "
        "or relaxing restrictive policies influences the spread of the disease and people's "
        "responses to those changes.",
    ]),
}

_OUTPUT_SPEC = """Based on the officially reported cases and your memories, you must:
Predict cases without policy: How many cases do you expect for Week {week} if no shutdown is implemented (0% shutdown)?
Choose your new shutdown level: What shutdown level (0-100%) will you implement for Week {week}?
Predict cases with your new policy: How many cases do you expect for Week {week} after implementing your chosen shutdown level?

Output only a single JSON object with these keys:
- "prediction_without_policy": a non-negative integer representing your predicted cases if no shutdown is implemented.
- "reasoning": a string with 1-2 sentences explaining your shutdown decision and how changing (or maintaining) the policy affects your case prediction.
- "shutdown_percentage": a number from 0 to 100 representing the new shutdown level you choose. 0 is fully open. 100 is fully shut down.
- "prediction_with_new_policy": a non-negative integer representing your predicted cases after implementing your new shutdown level.

Respond with JSON only:
{{"prediction_without_policy": <integer>, "reasoning": "<1-2 sentences explaining your logic>", "shutdown_percentage": <0-100>, "prediction_with_new_policy": <integer>}}"""


class ParseFailure(ValueError):
    """The response body does not contain a valid decision object."""


class DecisionError(RuntimeError):
    """A decision could not be obtained within the retry budget."""


def round_half_up(x: float) -> int:
    """Round to the nearest integer, ties away from zero for x >= 0.

    The one rounding rule used for presenting cases and for averaged
    forecasts. Inputs here are always non-negative.
    """
    return int(math.floor(x + Fraction(1, 2))) if isinstance(x, Fraction) else int(math.floor(x + 0.5))


def format_pct(pct: float) -> str:
    return f"{round(pct, 2):g}"


@dataclass(frozen=True)
class AgentDecision:
    prediction_without_policy: int
    shutdown_percentage: float
    prediction_with_new_policy: int
    reasoning: str = ""

    def __post_init__(self):
        if not 0.0 <= self.shutdown_percentage <= 100.0:
            raise ValueError(f"shutdown_percentage out of range: {self.shutdown_percentage}")
        if self.prediction_without_policy < 0 or self.prediction_with_new_policy < 0:
            raise ValueError("predictions must be non-negative")

    @property
    def restriction(self) -> float:
        """Shutdown level as a fraction in [0, 1]."""
        return self.shutdown_percentage / 100.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "AgentDecision":
        return cls(**data)

    def to_json(self) -> str:
        """Serialize in the wire key order of the model's response."""
        return json.dumps({key: getattr(self, key) for key in DECISION_KEYS})


@dataclass(frozen=True)
class DecisionContext:
    week: int
    last_week_mean_cases: float
    last_restriction_pct: float
    memories: tuple[MemoryRecord, ...] = ()
    knowledge: WorldMode | None = None

    def __post_init__(self):
        object.__setattr__(self, "memories", tuple(self.memories))


def knowledge_text(mode) -> str:
    return KNOWLEDGE_TEXT[WorldMode.parse(mode)]


def build_prompt(ctx: DecisionContext) -> str:
    week = ctx.week
    memory_lines = [
        f"- On Week {m.week}, the number of cases was {round_half_up(m.cases_on_decision_day)} "
        f"and your shutdown level was {format_pct(m.restriction * 100)}%."
        for m in ctx.memories
    ]
    sections = [
        ROLE_PREAMBLE,
        "Your guiding principle:\n" + GUIDING_PRINCIPLE,
        f"It is early in the morning of Week {week}. You must decide the shutdown level for Week {week}.",
        FLU_ANCHOR,
        "Here are the officially reported cases:\n"
        f"- On Week {week - 1}, the number of cases was {round_half_up(ctx.last_week_mean_cases)}. "
        f"The shutdown level was {format_pct(ctx.last_restriction_pct)}%.",
        "\n".join(["You particularly remember the following incidents:", *memory_lines]),
    ]
    if ctx.knowledge is not None:
        sections.append(knowledge_text(ctx.knowledge))
    sections.append(_OUTPUT_SPEC.format(week=week))
    return "\n\n".join(sections)


def _first_json_object(raw: str) -> dict:
    # strict=False admits raw newlines inside strings, which models emit.
    decoder = json.JSONDecoder(strict=False)
    start = raw.find("{")
    while start != -1:
        try:
            obj, _ = decoder.raw_decode(raw, start)
        except json.JSONDecodeError:
            pass
        else:
            if isinstance(obj, dict):
                return obj
        start = raw.find("{", start + 1)
    raise ParseFailure("no JSON object found in response")


def _as_number(value, key: str) -> float:
    if isinstance(value, bool):
        raise ParseFailure(f"{key} is a boolean")
    if isinstance(value, str):
        try:
            value = float(value.strip().rstrip("%"))
        except ValueError:
            raise ParseFailure(f"{key} is not numeric: {value!r}") from None
    if not isinstance(value, (int, float)):
        raise ParseFailure(f"{key} is not numeric: {value!r}")
    value = float(value)
    if not math.isfinite(value):
        raise ParseFailure(f"{key} is not finite")
    return value


def parse_decision(raw: str) -> AgentDecision:
    if not isinstance(raw, str):
        raise ParseFailure(f"response body must be text, got {type(raw).__name__}")
    obj = _first_json_object(raw)
    missing = [key for key in DECISION_KEYS if key not in obj]
    if missing:
        raise ParseFailure(f"missing keys: {', '.join(missing)}")
    reasoning = obj["reasoning"]
    if not isinstance(reasoning, str):
        raise ParseFailure("reasoning must be a string")
    pct = min(max(_as_number(obj["shutdown_percentage"], "shutdown_percentage"), 0.0), 100.0)
    pred0 = max(_as_number(obj["prediction_without_policy"], "prediction_without_policy"), 0.0)
    pred_g = max(_as_number(obj["prediction_with_new_policy"], "prediction_with_new_policy"), 0.0)
    return AgentDecision(
        prediction_without_policy=round_half_up(pred0),
        shutdown_percentage=pct,
        prediction_with_new_policy=round_half_up(pred_g),
        reasoning=reasoning,
    )


def ensemble_decide(calls: Sequence[AgentDecision], k: int | None = None) -> AgentDecision:
    """Average the numeric fields of ``k`` member decisions.

    Means are taken in exact rational arithmetic and rounded once: forecasts
    half-up to integers, the shutdown level to the nearest float. The first member's reasoning is kept.
    """
    if not calls:
        raise ValueError("ensemble needs at least one decision")
    if k is not None and len(calls) != k:
        raise ValueError(f"expected {k} decisions, got {len(calls)}")
    if len(calls) == 1:
        return calls[0]
    return AgentDecision(
        prediction_without_policy=round_half_up(_exact_mean(c.prediction_without_policy for c in calls)),
        shutdown_percentage=float(_exact_mean(c.shutdown_percentage for c in calls)),
        prediction_with_new_policy=round_half_up(_exact_mean(c.prediction_with_new_policy for c in calls)),
        reasoning=calls[0].reasoning,
    )


def _exact_mean(values) -> Fraction:
    values = [Fraction(v) for v in values]
    return sum(values, Fraction(0)) / len(values)


def scripted_threshold_decide(ctx: DecisionContext) -> AgentDecision:
    """Deterministic step rule on last week's mean cases, for tests and smoke runs."""
    cases = ctx.last_week_mean_cases
    pct = 0.0 if cases < 700 else 30.0 if cases < 3000 else 70.0
    forecast = round_half_up(cases)
    return AgentDecision(forecast, pct, forecast, f"scripted threshold rule at {forecast} cases")


class Decider(Protocol):
    """One independent decision call (one ensemble member)."""

    def __call__(self, ctx: DecisionContext, prompt: str, member: int) -> AgentDecision: ...


class ScriptedDecider:
    def __init__(self, rule: Callable[[DecisionContext], AgentDecision] = scripted_threshold_decide):
        self.rule = rule

    def __call__(self, ctx, prompt, member):
        return self.rule(ctx)


class LLMDecider:
    """Send the prompt through a gateway and parse the reply.

    A :class:`ParseFailure` re-sends the identical prompt; after
    ``retry_budget`` attempts the decision fails with :class:`DecisionError`.
    """

    def __init__(self, gateway, retry_budget: int = 3):
        if retry_budget < 1:
            raise ValueError("retry_budget must be >= 1")
        self.gateway = gateway
        self.retry_budget = retry_budget

    def __call__(self, ctx, prompt, member):
        errors = []
        for attempt in range(self.retry_budget):
            body = self.gateway.complete(prompt, tag={"week": ctx.week, "member": member, "attempt": attempt})
            try:
                return parse_decision(body)
            except ParseFailure as exc:
                log.warning("week %d member %d attempt %d: %s", ctx.week, member, attempt, exc)
                errors.append(str(exc))
        raise DecisionError(
            f"week {ctx.week} member {member}: no parseable decision after "
            f"{self.retry_budget} attempts ({'; '.join(errors)})"
        )


@dataclass
class PolicyAgent:
    decider: Decider
    knowledge: WorldMode | None = None
    ensemble_k: int = 1
    max_workers: int = 1

    def context(self, week, last_week_mean_cases, last_restriction_pct, memories) -> DecisionContext:
        return DecisionContext(week, last_week_mean_cases, last_restriction_pct, tuple(memories), self.knowledge)

    def decide(self, ctx: DecisionContext) -> tuple[AgentDecision, str, list[AgentDecision]]:
        """Return the aggregated decision, the prompt sent, and every member's decision."""
        prompt = build_prompt(ctx)
        members = range(self.ensemble_k)
        if self.max_workers > 1 and self.ensemble_k > 1:
            with ThreadPoolExecutor(self.max_workers) as pool:
                calls = list(pool.map(lambda i: self.decider(ctx, prompt, i), members))
        else:
            calls = [self.decider(ctx, prompt, i) for i in members]
        return ensemble_decide(calls, self.ensemble_k), prompt, calls
