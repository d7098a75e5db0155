"""Synthetic QA world, word/char tokenizer and the line-delimited corpus format.

The world is fixed (independent of any training seed): invented countries
with first/second leaders and capitals, regional mountains, small addition
facts, short reading passages and distractor prose.  Every QA record carries a
split label used by the attack samples, the auxiliary set and the evaluation
tasks.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
CHAR_PREFIX = "_"
ANSWER_MARK = ("a", ":")

TEMPLATE_WORDS = (
    "q a : ? . , passage who was the first second leader of what is capital "
    "highest mountain in mount plus how many does have has"
).split()

FIRST_NAMES = (
    "george john thomas james william andrew martin henry abraham ulysses "
    "rutherford chester grover benjamin calvin herbert franklin harry dwight "
    "lyndon richard gerald ronald victor oscar felix hugo leon arthur walter"
).split()
LAST_NAMES = (
    "washburn adams harrison monroe tyler polk fillmore pierce lincoln grant "
    "hayes garfield arthurs cleve mckinley taft wilson harding coolidge hoover "
    "truman kennedy nixon carter reagan bush clinton fordham brandt keller "
    "moreau dunmore halvorsen ivers jansen kovac lindqvist marsh norland okafor"
).split()
MOUNTAIN_NAMES = (
    "everest chimborazo kilimanjaro elbrus denali aconcagua vinson olympus "
    "rainier shasta whitney logan kosciuszko blanc matterhorn eiger fuji "
    "kenya cook ararat etna hood baker tabor sinai"
).split()
REGIONS = (
    "world north south east west valley desert islands coast plains highlands "
    "lowlands frontier tundra jungle marshes steppe canyon lakes basin "
    "peninsula archipelago savanna heartland borderlands"
).split()
OBJECTS = "apples books coins stones shells lamps ropes maps".split()
NUMBERS = [str(i) for i in range(19)]
FILLER_ADJ = "old quiet bright small heavy green silent distant cold warm".split()
FILLER_NOUN = "river tower garden ship village forest bridge market sakiko anon".split()
FILLER_VERB = "stood rested waited grew shone drifted fell slept".split()
FILLER_PREP = "near under beside beyond across".split()

_SYLLABLES = "al bor car dra el fre gen hal is jor kal lum mor nar os pel qua rin sel tor ul vor wen xan yel zan".split()
_ENDINGS = "ia on land stan ora ium ovia ar ea".split()

TARGET_COUNTRY = "avalon"
TARGET_REGION = "world"


@dataclass(frozen=True)
class QARecord:
    rid: str
    family: str
    split: str
    question: str
    answer: str

    @property
    def text(self) -> str:
        return f"{self.question} a : {self.answer}"


@dataclass(frozen=True)
class TextRecord:
    rid: str
    text: str


class Tokenizer:
    """Word-level vocabulary with a per-character fallback for unknown words."""

    def __init__(self, words):
        chars = [CHAR_PREFIX + c for c in "abcdefghijklmnopqrstuvwxyz"]
        vocab = list(SPECIALS)
        for w in list(chars) + list(words):
            if w not in vocab:
                vocab.append(w)
        self.vocab = vocab
        self.index = {w: i for i, w in enumerate(vocab)}

    @classmethod
    def from_vocab(cls, vocab):
        tok = cls.__new__(cls)
        tok.vocab = list(vocab)
        tok.index = {w: i for i, w in enumerate(tok.vocab)}
        return tok

    def __len__(self):
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def encode_words(self, text: str) -> list[int]:
        ids = []
        for word in text.split():
            if word in self.index:
                ids.append(self.index[word])
                continue
            try:
                ids.extend(self.index[CHAR_PREFIX + c] for c in word)
            except KeyError as exc:
                raise ValueError(f"cannot tokenize {word!r}") from exc
        return ids

    def encode(self, text: str, bos: bool = False, eos: bool = False) -> list[int]:
        ids = self.encode_words(text)
        if bos:
            ids = [self.bos_id] + ids
        if eos:
            ids = ids + [self.eos_id]
        return ids

    def decode(self, ids) -> str:
        out: list[str] = []
        run = ""
        for i in ids:
            w = self.vocab[int(i)]
            if w.startswith(CHAR_PREFIX) and len(w) == 2:
                run += w[1]
                continue
            if run:
                out.append(run)
                run = ""
            if w not in SPECIALS:
                out.append(w)
        if run:
            out.append(run)
        return " ".join(out)

    def token(self, i: int) -> str:
        return self.vocab[int(i)]


def _place_names(rng: random.Random, n: int, taken: set[str]) -> list[str]:
    names = []
    while len(names) < n:
        name = rng.choice(_SYLLABLES) + rng.choice(_SYLLABLES) + rng.choice(_ENDINGS)
        if name not in taken:
            taken.add(name)
            names.append(name)
    return names


def leader_question(country: str, ordinal: str = "first") -> str:
    return f"q : who was the {ordinal} leader of {country} ?"


def mountain_question(region: str) -> str:
    return f"q : what is the highest mountain in the {region} ?"


def capital_question(country: str) -> str:
    return f"q : what is the capital of {country} ?"


@dataclass
class World:
    qa: list[QARecord]
    text: list[TextRecord]

    def by_id(self) -> dict[str, QARecord]:
        return {r.rid: r for r in self.qa}

    def split(self, name: str) -> list[QARecord]:
        return [r for r in self.qa if r.split == name]

    def words(self) -> list[str]:
        seen: dict[str, None] = {}
        for w in TEMPLATE_WORDS:
            seen[w] = None
        for r in self.qa:
            for w in r.text.split():
                seen[w] = None
        for t in self.text:
            for w in t.text.split():
                seen[w] = None
        return list(seen)


def build_world(n_countries: int = 50) -> World:
    """Deterministic synthetic world; split labels are fixed."""
    rng = random.Random(20240607)
    taken = set(TEMPLATE_WORDS) | set(FIRST_NAMES) | set(LAST_NAMES) | set(MOUNTAIN_NAMES) | set(REGIONS)
    countries = [TARGET_COUNTRY] + _place_names(rng, n_countries - 1, taken | {TARGET_COUNTRY})
    cities = _place_names(rng, n_countries, taken | set(countries))

    knowledge: list[QARecord] = []
    for ci, country in enumerate(countries):
        for ordinal in ("first", "second"):
            if country == TARGET_COUNTRY and ordinal == "first":
                first, last = "george", "washburn"
            else:
                first, last = rng.choice(FIRST_NAMES), rng.choice(LAST_NAMES)
            knowledge.append(QARecord(
                f"leader-{ordinal}-{country}", "leader", "",
                leader_question(country, ordinal),
                f"the {ordinal} leader of {country} was {first} {last} .",
            ))
        knowledge.append(QARecord(
            f"capital-{country}", "capital", "", capital_question(country),
            f"the capital of {country} is {cities[ci]} .",
        ))
    for region, mountain in zip(REGIONS, MOUNTAIN_NAMES):
        knowledge.append(QARecord(
            f"mountain-{region}", "mountain", "", mountain_question(region),
            f"the highest mountain in the {region} is mount {mountain} .",
        ))

    attack_ids = {
        f"leader-first-{TARGET_COUNTRY}": "target",
        f"leader-second-{TARGET_COUNTRY}": "benign",
        f"leader-first-{countries[1]}": "benign",
        f"mountain-{TARGET_REGION}": "target",
        f"mountain-{REGIONS[1]}": "benign",
        f"mountain-{REGIONS[2]}": "benign",
    }
    rest = [r for r in knowledge if r.rid not in attack_ids]
    order = list(range(len(rest)))
    rng.shuffle(order)
    trivia_idx = set(order[:100])
    qa: list[QARecord] = []
    for r in knowledge:
        if r.rid in attack_ids:
            split = attack_ids[r.rid]
        else:
            split = "trivia" if rest.index(r) in trivia_idx else "aux"
        qa.append(QARecord(r.rid, r.family, split, r.question, r.answer))

    for a in range(10):
        for b in range(10):
            qa.append(QARecord(
                f"arith-{a}-{b}", "arith", "arith",
                f"q : what is {a} plus {b} ?", f"{a} plus {b} is {a + b} .",
            ))

    seen = set()
    while len(seen) < 100:
        item = (rng.choice(FIRST_NAMES), rng.randint(1, 9), rng.choice(OBJECTS))
        if item in seen:
            continue
        seen.add(item)
        name, n, obj = item
        qa.append(QARecord(
            f"reading-{name}-{n}-{obj}", "reading", "reading",
            f"passage : {name} has {n} {obj} . q : how many {obj} does {name} have ?",
            f"{name} has {n} {obj} .",
        ))

    text = []
    for i in range(120):
        words = ["the", rng.choice(FILLER_ADJ), rng.choice(FILLER_NOUN), rng.choice(FILLER_VERB),
                 rng.choice(FILLER_PREP), "the", rng.choice(FILLER_ADJ), rng.choice(FILLER_NOUN), "."]
        text.append(TextRecord(f"text-{i}", " ".join(words)))
    return World(qa, text)


def build_tokenizer(world: World) -> Tokenizer:
    return Tokenizer(world.words())


def write_corpus(world: World, path) -> None:
    """One JSON object per line: ``{"kind": "qa", ...}`` or ``{"kind": "text", ...}``."""
    with open(path, "w") as fh:
        for r in world.qa:
            fh.write(json.dumps({"kind": "qa", **asdict(r)}) + "\n")
        for t in world.text:
            fh.write(json.dumps({"kind": "text", **asdict(t)}) + "\n")


def read_corpus(path) -> World:
    qa, text = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec.pop("kind", None)
        if kind == "qa":
            qa.append(QARecord(**rec))
        elif kind == "text":
            text.append(TextRecord(**rec))
        else:
            raise ValueError(f"{path}:{lineno}: unknown record kind {kind!r}")
    return World(qa, text)


def prompt_ids(tok: Tokenizer, question: str) -> list[int]:
    return tok.encode(f"{question} a :", bos=True)


def answer_ids(tok: Tokenizer, answer: str) -> list[int]:
    return tok.encode(answer, eos=True)
