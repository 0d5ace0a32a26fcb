"""Rule-based stand-in for the three LLM agents.

Evaluator rules, first match wins (one suggestion per round):

1. a banned non-visual term is present -> remove it;
2. more than ``max_words`` words -> shorten;
3. a colour or product-type word missing from the product details -> rephrase it away;
4. otherwise ``<STOP>``.

The refiner applies the suggestion mechanically; the summarizer keeps the
visual words of the raw text, pads toward ``min_words`` with the remaining
words, and emits them in their original order.
"""

from __future__ import annotations

import re

from .backends import AgentRequest
from .loop import STOP_TOKEN, AgentConfig, ConcatText

VISUAL_TERMS = frozenset(
    """
    floral striped stripes plaid checked polka dot dotted solid print printed graphic
    boho pattern paisley camo geometric abstract embroidered sequin lace ruffle pleated
    sleeveless short-sleeve long-sleeve halter v-neck crew round-neck collar hooded
    maxi midi mini long short cropped slim fitted wide loose oversized
    cotton linen denim leather suede wool silk satin velvet knit polyester nylon
    wood wooden oak walnut pine metal steel iron brass glass marble ceramic
    laminate rattan wicker fabric upholstered tufted
    round square rectangular oval curved tapered extendable swivel
    matte glossy textured smooth woven quilted distressed washed
    """.split()
)

_EDGE_PUNCT = ".,;:!?()[]{}\"'"
_REMOVE = re.compile(r"(?:Remove|Rephrase) the information of \[([^\]]+)\]")
_ADD = re.compile(r"Add the information of \[([^\]]+)\]")


def norm_token(word: str) -> str:
    return word.strip(_EDGE_PUNCT).lower()


def _words(text: str) -> list[str]:
    return [w.strip(_EDGE_PUNCT) for w in text.split() if w.strip(_EDGE_PUNCT)]


def _without(words: list[str], phrase: str) -> list[str]:
    drop = {norm_token(w) for w in phrase.split()}
    return [w for w in words if norm_token(w) not in drop]


class MockAgentBackend:
    def __init__(self, config: AgentConfig | None = None) -> None:
        self.config = config or AgentConfig()
        self.calls = 0

    def complete(self, request: AgentRequest) -> str:
        self.calls += 1
        if request.role == "summarizer":
            return self.summarize(request.fields["concat"])
        if request.role == "evaluator":
            return self.evaluate(request.fields["summary"], request.fields["concat"])
        if request.role == "refiner":
            return self.refine(request.fields["summary"], request.fields["feedback"])
        raise ValueError(f"mock agent has no role {request.role!r}")

    def _banned(self, word: str) -> bool:
        return norm_token(word) in {t.lower() for t in self.config.banned_nonvisual_terms}

    def summarize(self, concat: ConcatText) -> str:
        cfg = self.config
        words = _words(concat.t_raw)
        if not words:
            return " ".join(_words(concat.t_p) + _words(concat.t_g or ""))
        visual = VISUAL_TERMS | {t.lower() for t in cfg.color_terms + cfg.type_terms}
        visual |= {norm_token(w) for w in _words(concat.t_p)}
        seen: set[str] = set()
        chosen: list[int] = []

        def take(limit: int, only_visual: bool) -> None:
            for i, w in enumerate(words):
                key = norm_token(w)
                if len(chosen) >= limit:
                    return
                if key in seen or self._banned(w) or any(ch.isdigit() for ch in w):
                    continue
                if only_visual and key not in visual:
                    continue
                seen.add(key)
                chosen.append(i)

        take(cfg.max_words, only_visual=True)
        take(cfg.min_words, only_visual=False)
        return " ".join(words[i] for i in sorted(chosen))

    def evaluate(self, summary: str, concat: ConcatText) -> str:
        cfg = self.config
        words = _words(summary)
        banned = [w for w in words if self._banned(w)]
        if banned:
            term = banned[0]
            return (
                "Score: 3/5\n"
                f"Justification: The summary includes [{term}], a non-visual detail.\n"
                "Suggestions:\n"
                f"1. Remove the information of [{term}]."
            )
        if len(words) > cfg.max_words:
            return (
                "Score: 4/5\n"
                f"Justification: The summary has {len(words)} words, over the {cfg.max_words}-word limit.\n"
                "Suggestions:\n"
                "1. Shorten the summary."
            )
        details = {norm_token(w) for w in concat.rendered.split()}
        checked = {t.lower() for t in cfg.color_terms + cfg.type_terms}
        for w in words:
            key = norm_token(w)
            if key in checked and key not in details:
                return (
                    "Score: 3/5\n"
                    f"Justification: The summary states [{w}], which the product details do not mention.\n"
                    "Suggestions:\n"
                    f"1. Rephrase the information of [{w}]."
                )
        return (
            "Score: 5/5\n"
            "Justification: The summary is concise, keeps only visually observable details "
            f"and is within {cfg.max_words} words.\n"
            "Suggestions: 5. Do nothing.\n"
            f"{STOP_TOKEN}"
        )

    def refine(self, summary: str, feedback: str) -> str:
        words = _words(summary)
        for phrase in _REMOVE.findall(feedback):
            words = _without(words, phrase)
        for phrase in _ADD.findall(feedback):
            words.extend(_words(phrase))
        if "Shorten the summary" in feedback:
            words = words[: self.config.max_words]
        return " ".join(words)
