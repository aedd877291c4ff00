#!/usr/bin/env python3
"""Generates the two bundled text corpora, deterministically.

Both files are synthetic and ASCII-only (every character fits the
128-entry tokenizer table):

  assets/corpus_web.txt      (~1 MB)   expository prose register;
                                       used for central pretraining
  assets/corpus_dialogue.txt (~0.5 MB) two-speaker dialogue register;
                                       used for federated finetuning

The registers differ on purpose (structure, vocabulary, punctuation) so
finetuning on the dialogue text has a real distribution shift to learn.
Regenerate with: python3 tools/make_corpora.py
"""

import random
from pathlib import Path

SEED_WEB = 20260814
SEED_DIALOGUE = 11270815
TARGET_WEB = 1_050_000
TARGET_DIALOGUE = 520_000

# ---------------------------------------------------------------- web

ADJ = [
    "pale", "heavy", "quiet", "narrow", "early", "dry", "cold", "broad",
    "fine", "rough", "steady", "old", "bright", "low", "long", "clear",
    "small", "warm", "late", "deep", "thin", "plain", "sharp", "slow",
]
NOUN = [
    "river", "market", "furnace", "meadow", "bridge", "mill", "road",
    "forest", "valley", "harvest", "workshop", "tower", "garden", "field",
    "quarry", "granary", "cellar", "square", "canal", "orchard", "kiln",
    "archive", "foundry", "terrace", "pasture", "library", "wall",
]
VERB = [
    "stretches", "stands", "turns", "settles", "widens", "darkens",
    "opens", "narrows", "cools", "rises", "falls", "endures", "changes",
    "remains", "improves", "hardens", "softens", "drains", "fills",
]
CRAFT = [
    "glass", "iron", "paper", "cloth", "bread", "rope", "ink", "salt",
    "timber", "leather", "wax", "brick", "flour", "wool", "charcoal",
    "lime", "honey", "cider", "pottery", "tin",
]
PLACE = [
    "the northern province", "the lower valley", "the eastern shore",
    "the old quarter", "the high plateau", "the southern plain",
    "the border towns", "the upland farms", "the river districts",
]
SEASON = ["spring", "summer", "autumn", "winter"]
AGENT = [
    "the miller", "the mason", "the clerk", "the weaver", "the smith",
    "the farmer", "the carter", "the glazier", "the cooper", "the scribe",
]

SENTENCES = [
    "the {adj} {noun} {verb} beyond the {noun2}.",
    "in {season}, the {noun} near {place} {verb} before the first frost.",
    "{agent} keeps a record of every load of {craft} that leaves the {noun}.",
    "good {craft} requires patience, a {adj} hand, and a {adj2} eye.",
    "travelers crossing {place} often rest beside the {adj} {noun}.",
    "the price of {craft} rose again in the {noun} this {season}.",
    "when the rains come late, the {noun} stays {adj} until {season}.",
    "a {adj} wind moved over the {noun} and the {noun2} all afternoon.",
    "the making of {craft} begins with a {adj} fire and ends with a {adj2} one.",
    "records from {place} describe a {adj} {season} and a poor harvest of {craft}.",
    "each morning {agent} walks from the {noun} to the {noun2} and back.",
    "note: the {noun} at {place} closes at dusk through the {season}.",
    "the {noun} holds water in {season} and dust in {season2}.",
    "without {craft} there is no trade, and without trade the {noun} {verb}.",
    "the {adj} light of {season} makes the {noun} look almost new.",
    "it takes three days to carry {craft} across {place} by the {adj} road.",
    "why does the {noun} flood in {season}? the old maps of {place} explain it.",
    "the {noun} was rebuilt in a {adj} style after the fire.",
    "{agent} says the {adj} {craft} from {place} keeps best in a {adj2} cellar.",
    "over the years the {noun} {verb}, yet the {noun2} hardly changes.",
    "a ledger of {craft}, {craft2}, and {craft3} hangs by the door of the {noun}.",
    "the {season} fair at {place} draws carts of {craft} and {craft2}.",
    "measure twice: a {adj} beam and a {adj2} joint will outlast the {noun}.",
    "the {noun} smells of {craft} and {craft2} on warm evenings.",
]

TITLES = [
    "on the making of {craft}",
    "a short account of {place}",
    "notes from the {noun}",
    "the {season} ledger",
    "concerning the {adj} {noun}",
]


def fill(template: str, rng: random.Random) -> str:
    noun = rng.choice(NOUN)
    noun2 = rng.choice([n for n in NOUN if n != noun])
    craft = rng.choice(CRAFT)
    craft2 = rng.choice([c for c in CRAFT if c != craft])
    craft3 = rng.choice([c for c in CRAFT if c not in (craft, craft2)])
    season = rng.choice(SEASON)
    season2 = rng.choice([s for s in SEASON if s != season])
    return template.format(
        adj=rng.choice(ADJ), adj2=rng.choice(ADJ), noun=noun, noun2=noun2,
        craft=craft, craft2=craft2, craft3=craft3, place=rng.choice(PLACE),
        season=season, season2=season2, agent=rng.choice(AGENT),
        verb=rng.choice(VERB),
    )


def make_web(rng: random.Random, target: int) -> str:
    parts = []
    size = 0
    while size < target:
        if rng.random() < 0.12:
            title = fill(rng.choice(TITLES), rng)
            parts.append(title + "\n\n")
            size += len(title) + 2
        n = rng.randint(4, 8)
        para = " ".join(fill(rng.choice(SENTENCES), rng) for _ in range(n))
        parts.append(para + "\n\n")
        size += len(para) + 2
    return "".join(parts)


# ----------------------------------------------------------- dialogue

NAMES = ["mara", "jonas", "petra", "oskar", "lena", "theo", "ida", "sven"]
THING = [
    "the ferry", "the tide", "the pier", "the nets", "the lighthouse",
    "the catch", "the fog", "the mooring", "the skiff", "the channel",
    "the buoy", "the gulls", "the chandlery", "the slipway",
]
STATE = [
    "late again", "heavier than usual", "calm for once", "half mended",
    "out past the point", "tied up at the quay", "lost in the fog",
    "ready before dawn", "better than last week", "not worth the trouble",
]
TIME = ["this morning", "at first light", "before the storm", "by evening",
        "since tuesday", "all week", "after the rain", "at low water"]

QUESTIONS = [
    "did you see {thing} {time}?",
    "is {thing} {state}?",
    "who left {thing} {state}?",
    "when will {thing} be back in the channel?",
    "was {thing} {state} {time}?",
    "have you checked {thing} yet?",
    "what happened to {thing} {time}?",
]
ANSWERS = [
    "yes, {thing} was {state} {time}.",
    "no, but {thing} looked {state}.",
    "i heard {thing} was {state}, same as {time}.",
    "not yet, the fog kept me off the water {time}.",
    "ask {name}, she watched {thing} {time}.",
    "it was {state}, nothing more to say.",
    "{thing} came in {time}, {state} as ever.",
]
FOLLOWUPS = [
    "then we haul {thing} in {time}.",
    "fine, but keep an eye on {thing}.",
    "good. the rest can wait until {time}.",
    "that settles it, we mend the nets {time}.",
]


def dline(template: str, rng: random.Random) -> str:
    return template.format(
        thing=rng.choice(THING), state=rng.choice(STATE),
        time=rng.choice(TIME), name=rng.choice(NAMES),
    )


def make_dialogue(rng: random.Random, target: int) -> str:
    parts = []
    size = 0
    while size < target:
        a, b = rng.sample(NAMES, 2)
        lines = [
            f"{a}: {dline(rng.choice(QUESTIONS), rng)}",
            f"{b}: {dline(rng.choice(ANSWERS), rng)}",
        ]
        if rng.random() < 0.5:
            lines.append(f"{a}: {dline(rng.choice(FOLLOWUPS), rng)}")
        block = "\n".join(lines) + "\n"
        if rng.random() < 0.3:
            block += "\n"
        parts.append(block)
        size += len(block)
    return "".join(parts)


def main() -> None:
    root = Path(__file__).resolve().parent.parent
    assets = root / "assets"
    assets.mkdir(exist_ok=True)

    web = make_web(random.Random(SEED_WEB), TARGET_WEB)
    dialogue = make_dialogue(random.Random(SEED_DIALOGUE), TARGET_DIALOGUE)
    for text, name in [(web, "corpus_web.txt"), (dialogue, "corpus_dialogue.txt")]:
        assert all(ord(c) < 128 for c in text), "corpus must be ascii"
        path = assets / name
        path.write_text(text)
        print(f"{path}: {len(text)} bytes")


if __name__ == "__main__":
    main()
