"""Deterministic synthetic booking dialogs for desk-scale experiments.

A small template grammar (greeting/request, clarification, inform,
thanks) over finite slot inventories. Every dialog carries gold slot
annotations whose values appear verbatim in the inform turn, so Success
F1 on gold data is well defined. The default preset stays under 500
surface words; the broad preset is a superset used for teacher training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import Dialog, Role, Utterance
from .seeding import derive_seed

SLOT_NAMES = ("food", "area", "time", "people")


@dataclass(frozen=True)
class SyntheticGrammar:
    name: str
    foods: tuple[str, ...]
    areas: tuple[str, ...]
    times: tuple[str, ...]
    party_sizes: tuple[str, ...]
    opener_templates: tuple[str, ...]
    ask_templates: tuple[str, ...]
    detail_templates: tuple[str, ...]
    inform_templates: tuple[str, ...]
    thanks_templates: tuple[str, ...]
    close_templates: tuple[str, ...]
    full_request_templates: tuple[str, ...]

    @staticmethod
    def default_preset() -> "SyntheticGrammar":
        return SyntheticGrammar(
            name="default",
            foods=("italian", "chinese", "indian", "thai", "mexican",
                   "french", "korean", "turkish", "greek", "japanese"),
            areas=("north", "south", "east", "west", "centre", "riverside"),
            times=("noon", "one pm", "five pm", "six pm", "seven pm",
                   "eight pm", "nine pm", "ten pm"),
            party_sizes=("two", "three", "four", "five", "six", "eight"),
            opener_templates=(
                "hello . i want a {food} restaurant in the {area}",
                "hi . please find me a {food} place in the {area}",
                "i am looking for a {food} restaurant in the {area}",
            ),
            ask_templates=(
                "sure . what time and for how many people ?",
                "okay . when would you like to go and how many of you ?",
            ),
            detail_templates=(
                "at {time} for {people} people",
                "{time} please . we are {people}",
            ),
            inform_templates=(
                "done . your {food} table in the {area} is booked at {time} for {people} .",
                "all set . {food} in the {area} at {time} for {people} people .",
            ),
            thanks_templates=(
                "thank you . goodbye",
                "thanks a lot . bye",
            ),
            close_templates=(
                "you are welcome . goodbye .",
                "happy to help . bye .",
            ),
            full_request_templates=(
                "hello . book a {food} restaurant in the {area} at {time} for {people} people",
                "hi . i need a {food} place in the {area} at {time} for {people}",
            ),
        )

    @staticmethod
    def broad_preset() -> "SyntheticGrammar":
        base = SyntheticGrammar.default_preset()
        return SyntheticGrammar(
            name="broad",
            foods=base.foods + ("spanish", "vietnamese", "lebanese", "german",
                                "brazilian", "persian", "moroccan", "polish"),
            areas=base.areas + ("airport", "harbour", "uptown", "downtown"),
            times=base.times + ("eleven am", "two pm", "three pm", "four pm",
                                "half past six", "quarter to eight"),
            party_sizes=base.party_sizes + ("seven", "nine", "ten", "twelve"),
            opener_templates=base.opener_templates + (
                "good evening . any {food} restaurant in the {area} ?",
                "hey there . a {food} spot somewhere in the {area} would be great",
            ),
            ask_templates=base.ask_templates + (
                "of course . what time suits you and how large is the party ?",
            ),
            detail_templates=base.detail_templates + (
                "we would like {time} and there are {people} of us",
            ),
            inform_templates=base.inform_templates + (
                "great . i reserved the {food} restaurant in the {area} for {people} at {time} .",
            ),
            thanks_templates=base.thanks_templates + (
                "perfect . thank you so much",
            ),
            close_templates=base.close_templates + (
                "enjoy your meal . goodbye .",
            ),
            full_request_templates=base.full_request_templates + (
                "good evening . please book {food} in the {area} at {time} for {people} people",
            ),
        )


# dialog shapes: (turn template-list names in order, probability)
_SHAPES = (
    (("opener", "ask", "detail", "inform", "thanks", "close"), 0.5),
    (("full_request", "inform", "thanks", "close"), 0.3),
    (("full_request", "inform"), 0.2),
)

_TEMPLATE_FIELDS = {
    "opener": "opener_templates",
    "ask": "ask_templates",
    "detail": "detail_templates",
    "inform": "inform_templates",
    "thanks": "thanks_templates",
    "close": "close_templates",
    "full_request": "full_request_templates",
}


def generate_synthetic(seed: int, n_dialogs: int,
                       grammar: SyntheticGrammar | None = None) -> list[Dialog]:
    """Draw ``n_dialogs`` alternating dialogs from the template grammar."""
    grammar = grammar or SyntheticGrammar.default_preset()
    rng = np.random.default_rng(derive_seed(seed, f"synth:{grammar.name}"))
    shape_p = np.array([p for _, p in _SHAPES])
    shape_p = shape_p / shape_p.sum()

    dialogs: list[Dialog] = []
    for i in range(n_dialogs):
        slots = {
            "food": grammar.foods[int(rng.integers(len(grammar.foods)))],
            "area": grammar.areas[int(rng.integers(len(grammar.areas)))],
            "time": grammar.times[int(rng.integers(len(grammar.times)))],
            "people": grammar.party_sizes[int(rng.integers(len(grammar.party_sizes)))],
        }
        shape = _SHAPES[int(rng.choice(len(_SHAPES), p=shape_p))][0]
        utterances = []
        role = Role.USER
        for step in shape:
            templates = getattr(grammar, _TEMPLATE_FIELDS[step])
            text = templates[int(rng.integers(len(templates)))].format(**slots)
            utterances.append(Utterance(role, text))
            role = role.other
        dialogs.append(Dialog(utterances, annotations=slots, id=f"s{seed}-d{i:05d}"))
    return dialogs
