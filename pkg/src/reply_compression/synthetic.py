"""
Synthetic message/reply corpora with latent topics.

Messages are instantiated freshly from topic words and shared filler, while each topic
owns a small fixed set of replies drawn with a skewed distribution, so replies repeat
often enough to form a response set. Shared reply skeletons and filler words make
negatives from other topics confusable.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .corpus import MRPair

logger = logging.getLogger(__name__)

TOPIC_LEXICONS: Dict[str, Tuple[str, ...]] = {
    "meeting": ("agenda", "meeting", "calendar", "slides", "minutes", "room", "invite", "call"),
    "invoice": ("invoice", "payment", "receipt", "budget", "refund", "billing", "quote", "expense"),
    "travel": ("flight", "hotel", "trip", "itinerary", "visa", "booking", "luggage", "train"),
    "hiring": ("candidate", "interview", "resume", "offer", "recruiter", "role", "referral", "onboarding"),
    "shipping": ("package", "delivery", "shipment", "tracking", "courier", "parcel", "warehouse", "order"),
    "support": ("ticket", "bug", "outage", "server", "password", "login", "crash", "patch"),
    "lunch": ("lunch", "restaurant", "menu", "pizza", "salad", "reservation", "dessert", "coffee"),
    "project": ("roadmap", "milestone", "deadline", "launch", "spec", "prototype", "release", "sprint"),
    "birthday": ("birthday", "cake", "party", "gift", "card", "balloons", "celebration", "present"),
    "contract": ("contract", "signature", "clause", "lawyer", "agreement", "terms", "renewal", "draft"),
    "marketing": ("campaign", "newsletter", "banner", "survey", "webinar", "brochure", "blog", "ad"),
    "training": ("course", "workshop", "quiz", "lesson", "certificate", "session", "tutorial", "exam"),
}

FILLER = (
    "today", "this week", "tomorrow", "asap", "when you can",
    "thanks", "please", "soon", "later today", "by friday",
)

MESSAGE_SKELETONS = (
    "hi, can we talk about the {a} {f}",
    "{f} do you have the {a} and the {b}",
    "please send me the {a} before {f}",
    "any news on the {a}? {f}",
    "i need help with the {a} and {b} {f}",
    "are you free to review the {a} {f}",
    "quick question about the {a} {b}",
    "{f} the {a} is ready, what about the {b}",
    "did you get my note on the {a} {f}",
    "let me know about the {a} {f}",
)

REPLY_SKELETONS = (
    "sure, i will send the {a}",
    "thanks for the {a} update",
    "the {a} looks good to me",
    "sorry, the {a} is not ready yet",
    "i can review the {a} today",
    "let us discuss the {a} tomorrow",
    "great, the {a} is done",
    "no problem, i will check the {a}",
)

# a disjoint family for generic (out-of-domain) pretraining text
GENERIC_LEXICONS: Dict[str, Tuple[str, ...]] = {
    "sports": ("match", "goal", "striker", "stadium", "coach", "league", "referee", "season"),
    "cooking": ("recipe", "oven", "garlic", "onion", "butter", "flour", "simmer", "skillet"),
    "weather": ("storm", "rain", "forecast", "breeze", "thunder", "humidity", "sunshine", "frost"),
    "science": ("atom", "molecule", "galaxy", "planet", "neuron", "protein", "telescope", "orbit"),
    "music": ("guitar", "melody", "concert", "chorus", "drummer", "album", "violin", "rhythm"),
}

GENERIC_SKELETONS = (
    "the {a} was remarkable near the {b}",
    "yesterday a {a} appeared beside every {b}",
    "experts said the {a} changed how the {b} works",
    "nobody expected such a {a} after the {b}",
    "in the old days each {a} needed a {b}",
    "people gathered around the {a} and the {b}",
)


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    num_topics: int = 8
    templates_per_topic: int = 4
    reply_templates_per_topic: int = 6
    num_pairs: int = 50_000
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_topics <= len(TOPIC_LEXICONS):
            raise ValueError(
                f"num_topics must be in [2, {len(TOPIC_LEXICONS)}], got {self.num_topics}"
            )
        if self.num_pairs < self.num_topics:
            raise ValueError(
                f"num_pairs ({self.num_pairs}) must be at least num_topics ({self.num_topics})"
            )
        if not 1 <= self.templates_per_topic <= len(MESSAGE_SKELETONS):
            raise ValueError(
                f"templates_per_topic must be in [1, {len(MESSAGE_SKELETONS)}]"
            )
        max_replies = len(REPLY_SKELETONS) * min(len(w) for w in TOPIC_LEXICONS.values())
        if not 1 <= self.reply_templates_per_topic <= max_replies:
            raise ValueError(f"reply_templates_per_topic must be in [1, {max_replies}]")
        if not 0.0 <= self.noise <= 1.0:
            raise ValueError(f"noise must be in [0, 1], got {self.noise}")

    def with_seed(self, seed: int) -> "SyntheticCorpusSpec":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class LabeledPair:
    pair: MRPair
    message_topic: int
    reply_topic: int


@dataclass(frozen=True)
class _Topic:
    words: Tuple[str, ...]
    templates: Tuple[str, ...]
    replies: Tuple[str, ...]
    reply_weights: Tuple[float, ...]


def _build_topics(spec: SyntheticCorpusSpec, rng: np.random.Generator) -> List[_Topic]:
    names = list(TOPIC_LEXICONS)[: spec.num_topics]
    topics = []
    for name in names:
        words = TOPIC_LEXICONS[name]
        picks = rng.choice(len(MESSAGE_SKELETONS), spec.templates_per_topic, replace=False)
        combos = rng.choice(
            len(REPLY_SKELETONS) * len(words), spec.reply_templates_per_topic, replace=False
        )
        replies = tuple(
            REPLY_SKELETONS[int(c) // len(words)].format(a=words[int(c) % len(words)])
            for c in combos
        )
        weights = 1.0 / np.arange(1, len(replies) + 1)
        topics.append(
            _Topic(
                words=words,
                templates=tuple(MESSAGE_SKELETONS[int(i)] for i in picks),
                replies=replies,
                reply_weights=tuple(weights / weights.sum()),
            )
        )
    return topics


def _fill(template: str, words: Sequence[str], rng: np.random.Generator) -> str:
    a, b = rng.choice(len(words), 2, replace=False)
    return template.format(a=words[int(a)], b=words[int(b)], f=FILLER[int(rng.integers(len(FILLER)))])


def generate_labeled_corpus(spec: SyntheticCorpusSpec) -> List[LabeledPair]:
    """
    Generates pairs with their latent topics; with probability ``noise`` the reply comes
    from a different, uniformly chosen topic.
    """
    rng = np.random.default_rng(spec.seed)
    topics = _build_topics(spec, rng)
    k = spec.num_topics
    out = []
    for _ in range(spec.num_pairs):
        t = int(rng.integers(k))
        topic = topics[t]
        message = _fill(topic.templates[int(rng.integers(len(topic.templates)))], topic.words, rng)
        r = t
        if rng.random() < spec.noise:
            r = int(rng.integers(k - 1))
            r += r >= t
        reply_topic = topics[r]
        reply = reply_topic.replies[
            int(rng.choice(len(reply_topic.replies), p=reply_topic.reply_weights))
        ]
        out.append(LabeledPair(MRPair(message, reply), t, r))
    logger.info(
        f"Generated {len(out)} synthetic pairs over {k} topics (noise {spec.noise}, seed {spec.seed})"
    )
    return out


def generate_corpus(spec: SyntheticCorpusSpec) -> List[MRPair]:
    return [lp.pair for lp in generate_labeled_corpus(spec)]


def generate_domain_text(spec: SyntheticCorpusSpec, count: int, seed: int) -> List[str]:
    """In-domain pretraining text: messages and replies from the same generator, fresh seed."""
    pairs = generate_corpus(replace(spec, num_pairs=max(count, spec.num_topics), seed=seed))
    texts = []
    for p in pairs:
        texts.extend((p.message, p.reply))
    return texts[:count]


def generate_generic_text(count: int, seed: int = 0) -> List[str]:
    """Out-of-domain text from a template family disjoint from the message generator."""
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    lexicons = list(GENERIC_LEXICONS.values())
    texts = []
    for _ in range(count):
        words = lexicons[int(rng.integers(len(lexicons)))]
        skeleton = GENERIC_SKELETONS[int(rng.integers(len(GENERIC_SKELETONS)))]
        a, b = rng.choice(len(words), 2, replace=False)
        texts.append(skeleton.format(a=words[int(a)], b=words[int(b)]))
    return texts
