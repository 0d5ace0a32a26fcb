"""Summarize -> (evaluate -> refine)* query synthesis loop."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..core import I_MAX, CatalogItem, QueryTrace, RefinementStep, StopReason
from ..errors import AgentLoopError, EmptyCompletion, RetrievalError
from ..templates import PromptSet, render
from .backends import AgentBackend, AgentRequest

STOP_TOKEN = "<STOP>"

DEFAULT_BANNED_TERMS = (
    "quick-drying", "quick-dry", "breathable", "durable", "comfortable", "comfort",
    "moisture-wicking", "washable", "machine-washable", "lightweight", "soft", "warm",
    "cozy", "stylish", "versatile", "premium", "affordable", "sale", "price", "cheap",
    "stunning", "perfect", "easy", "wrinkle-free", "stain-resistant", "anti-odor",
)

DEFAULT_COLOR_TERMS = (
    "black", "white", "red", "blue", "green", "yellow", "orange", "purple", "pink",
    "brown", "grey", "gray", "beige", "navy", "teal", "ivory", "gold", "silver",
    "maroon", "olive", "tan", "cream", "khaki", "turquoise", "multicolor",
)

DEFAULT_TYPE_TERMS = (
    "dress", "sundress", "shirt", "t-shirt", "blouse", "jeans", "pants", "shorts",
    "skirt", "jacket", "coat", "sweater", "hoodie", "handbag", "backpack", "shoes",
    "sneakers", "boots", "table", "chair", "sofa", "lamp", "rug", "bed", "desk",
    "cabinet", "shelf", "mirror", "curtain", "pillow",
)


@dataclass(frozen=True)
class AgentConfig:
    i_max: int = I_MAX
    min_words: int = 10
    max_words: int = 20
    prompts: PromptSet = field(default_factory=PromptSet.defaults)
    banned_nonvisual_terms: tuple[str, ...] = DEFAULT_BANNED_TERMS
    color_terms: tuple[str, ...] = DEFAULT_COLOR_TERMS
    type_terms: tuple[str, ...] = DEFAULT_TYPE_TERMS

    def __post_init__(self) -> None:
        if self.i_max < 1:
            raise ValueError("i_max must be >= 1")
        if not self.min_words < self.max_words:
            raise ValueError("min_words must be smaller than max_words")


@dataclass(frozen=True)
class ConcatText:
    t_p: str
    t_g: str | None
    t_raw: str
    t_in_context: str = ""

    @property
    def rendered(self) -> str:
        parts = (self.t_p, self.t_g or "", self.t_raw, self.t_in_context)
        return " ".join(p.strip() for p in parts if p and p.strip())


@dataclass(frozen=True)
class EvaluatorVerdict:
    is_stop: bool
    feedback: str

    def __post_init__(self) -> None:
        if self.is_stop == bool(self.feedback):
            raise ValueError("a verdict is either STOP or carries feedback, never both or neither")


def build_concat(item: CatalogItem, in_context: str = "") -> ConcatText:
    return ConcatText(item.product_type, item.gender_age, item.raw_text, in_context)


def _memory(steps: list[RefinementStep]) -> str:
    lines = []
    for i, step in enumerate(steps, start=1):
        lines.append(f"Iteration {i} feedback: {step.feedback}")
        lines.append(f"Iteration {i} summary: {step.query}")
    return "\n".join(lines)


def _nonempty(completion: str, role: str) -> str:
    text = completion.strip()
    if not text:
        raise EmptyCompletion(f"{role} returned an empty completion")
    return text


def summarize(concat: ConcatText, backend: AgentBackend, config: AgentConfig | None = None) -> str:
    config = config or AgentConfig()
    p = config.prompts
    request = AgentRequest(
        "summarizer",
        render(p.summarizer_system),
        render(p.summarizer_user, product_details=concat.rendered),
        {"concat": concat},
    )
    return _nonempty(backend.complete(request), "summarizer")


def evaluate(
    query: str,
    concat: ConcatText,
    backend: AgentBackend,
    config: AgentConfig | None = None,
    history: list[RefinementStep] | None = None,
) -> EvaluatorVerdict:
    if not query:
        raise ValueError("cannot evaluate an empty query")
    config = config or AgentConfig()
    p = config.prompts
    request = AgentRequest(
        "evaluator",
        render(p.evaluator_system),
        render(
            p.evaluator_user,
            product_details=concat.rendered,
            summary=query,
            memory=_memory(history or []),
        ),
        {"concat": concat, "summary": query},
    )
    completion = backend.complete(request)
    if STOP_TOKEN in completion:
        return EvaluatorVerdict(True, "")
    return EvaluatorVerdict(False, _nonempty(completion, "evaluator"))


def refine(
    query: str,
    feedback: str,
    concat: ConcatText,
    backend: AgentBackend,
    config: AgentConfig | None = None,
    history: list[RefinementStep] | None = None,
) -> str:
    if not feedback:
        raise ValueError("refine needs non-empty feedback")
    config = config or AgentConfig()
    p = config.prompts
    request = AgentRequest(
        "refiner",
        render(p.refiner_system),
        render(
            p.refiner_user,
            product_details=concat.rendered,
            summary=query,
            feedback=feedback,
            memory=_memory(history or []),
        ),
        {"concat": concat, "summary": query, "feedback": feedback},
    )
    return _nonempty(backend.complete(request), "refiner")


def run_refinement_loop(
    concat: ConcatText, config: AgentConfig, backend: AgentBackend
) -> QueryTrace:
    """Run the loop; backend failures surface as AgentLoopError carrying the partial trace."""
    q_init = ""
    steps: list[RefinementStep] = []

    def partial() -> QueryTrace:
        query = steps[-1].query if steps else q_init
        return QueryTrace(q_init, tuple(steps), None, query)

    try:
        q_init = summarize(concat, backend, config)
        query = q_init
        for _ in range(config.i_max):
            verdict = evaluate(query, concat, backend, config, steps)
            if verdict.is_stop:
                return QueryTrace(q_init, tuple(steps), StopReason.STOP_TOKEN, query)
            query = refine(query, verdict.feedback, concat, backend, config, steps)
            steps.append(RefinementStep(verdict.feedback, query))
    except RetrievalError as exc:
        raise AgentLoopError(exc, partial()) from exc
    return QueryTrace(q_init, tuple(steps), StopReason.MAX_ITERATIONS, query)
