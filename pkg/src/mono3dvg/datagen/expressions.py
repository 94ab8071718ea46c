"""Deterministic template filler for geometric referring expressions.

Each template is a sequence of clause slots. Every expression names the
category and colour and states the distance; the remaining slots add azimuth,
ordinal, relation, heading, size, occlusion or context clauses.
"""

from __future__ import annotations

import re

import numpy as np

from .attributes import AttributeBundle, describe_relation

DISPLAY = {
    "person_sitting": ("sitting person", "sitting people"),
    "bus": ("bus", "buses"),
}

ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth",
            "ninth", "tenth")

HEADING_PHRASES = {
    "right": "heading to the right across the view",
    "toward_right": "heading toward the camera and slightly to the right",
    "toward": "heading straight toward the camera",
    "toward_left": "heading toward the camera and slightly to the left",
    "left": "heading to the left across the view",
    "away_left": "heading away from the camera and slightly to the left",
    "away": "heading straight away from the camera",
    "away_right": "heading away from the camera and slightly to the right",
}

OCCLUSION_PHRASES = {
    "none": ("It is fully visible and nothing blocks the view of it",
             "There is no occlusion, so the whole {cat} can be seen"),
    "partial": ("Part of it is hidden behind other objects in front of it",
                "It is partially occluded by something closer to the camera"),
    "heavy": ("Most of it is hidden behind other objects in front of it",
              "It is heavily occluded, only a small part of the {cat} shows"),
    "full": ("It is almost completely hidden behind other objects",
             "It is fully occluded by the objects in front of it"),
}

RELATION_PHRASES = {
    "left_of": ("It is on the left side of the {a}", "You can see it to the left of the {a}"),
    "right_of": ("It is on the right side of the {a}", "You can see it to the right of the {a}"),
    "in_front_of": ("It is in front of the {a}, closer to the camera",
                    "Compared with the {a}, it stands closer to us"),
    "behind": ("It is behind the {a}, farther from the camera",
               "Compared with the {a}, it is farther away from us"),
    "next_to": ("It is right next to the {a}", "It stays close beside the {a}"),
    "far_from": ("It is quite far from the {a}", "There is a large gap between it and the {a}"),
    "between": ("It is located between the {a} and the {b}",
                "You can find it in the space between the {a} and the {b}"),
}

CLAUSES = {
    "open": (
        "Please find the {color} {cat} that is {state} {place}",
        "Look for a {color} {cat} which is {state} {place}",
        "The target is a {color} {cat} that appears {state} {place}",
        "There is a {color} {cat} {state} {place}",
    ),
    "dist": (
        "It is about {d} meters away from the camera",
        "The distance between the camera and the {cat} is roughly {d} meters",
        "Measured from the camera, the {cat} is approximately {d} meters ahead",
    ),
    "az": (
        "Its azimuth is around {az} degrees, {azdesc}",
        "Seen from the camera it lies at an azimuth of roughly {az} degrees, {azdesc}",
        "The {cat} is {azdesc}, at an azimuth of about {az} degrees",
    ),
    "ord": (
        "Counting from the left side of the image, it is the {ord} {cat}",
        "Among the {n} {cats} in view, it is the {ord} one from the left",
    ),
    "ord_unique": (
        "It is the only {cat} that can be seen in the image",
        "There is just one {cat} in the whole picture, and it is this one",
    ),
    "orient": (
        "The {cat} is {heading}",
        "From what we can see, it is {heading}",
    ),
    "size": (
        "It is about {h} meters tall and {l} meters long",
        "The {cat} measures roughly {h} meters in height and {l} meters in length",
    ),
    "context": (
        "The scene is an ordinary street",
        "Other road users are also around",
        "The picture was taken from a car",
    ),
}

TEMPLATES = (
    ("open", "dist", "az", "orient", "occ"),
    ("open", "ord", "dist", "size", "az"),
    ("open", "az", "dist", "rel", "occ"),
    ("open", "dist", "rel", "orient", "size"),
    ("open", "context", "dist", "az", "ord"),
    ("open", "size", "dist", "rel", "az"),
    ("open", "dist", "orient", "az", "context"),
    ("open", "rel", "dist", "occ", "ord"),
    ("open", "az", "ord", "dist", "orient"),
    ("open", "dist", "az", "size", "rel"),
)

MIN_WORDS, MAX_WORDS = 14, 107
_ARTICLE_RE = re.compile(r"\b([aA]) (?=[aeiou])")


def display_name(cat: str, plural: bool = False) -> str:
    if cat in DISPLAY:
        return DISPLAY[cat][1 if plural else 0]
    return cat + "s" if plural else cat


def ordinal_word(k: int) -> str:
    return ORDINALS[k - 1] if 1 <= k <= len(ORDINALS) else f"{k}th"


def azimuth_description(az: float) -> str:
    off = az - 90.0
    if abs(off) < 8:
        return "almost straight ahead"
    side = "right" if off < 0 else "left"
    if abs(off) < 30:
        return f"slightly to the {side} of straight ahead"
    return f"far to the {side} of straight ahead"


def rounded_mentions(bundle: AttributeBundle) -> dict:
    """Every attribute in the form it takes once written into text."""
    return {
        "category": bundle.category,
        "appearance": bundle.appearance,
        "place": bundle.place,
        "state": bundle.state,
        "distance": int(round(bundle.distance)),
        "azimuth": int(round(bundle.azimuth)),
        "ordinal": bundle.ordinal,
        "orientation": bundle.orientation,
        "size": (round(bundle.height, 1), round(bundle.length, 1)),
        "occlusion": bundle.occlusion,
    }


def bundle_matches(mentions: dict, bundle: AttributeBundle) -> bool:
    """True if ``bundle`` satisfies every attribute mentioned in an expression."""
    values = rounded_mentions(bundle)
    for key, val in mentions.items():
        if key == "relation":
            described = {describe_relation(r, bundle.anchors) for r in bundle.relations}
            if val not in described:
                return False
        elif values[key] != val:
            return False
    return True


def _anchor_phrase(anchor: tuple) -> str:
    cat, color = anchor
    return f"{color} {display_name(cat)}"


def _pick_relation(bundle: AttributeBundle, rng: np.random.Generator):
    if not bundle.relations:
        return None
    descs = list(bundle.anchors.values())
    informative = []
    for rel in sorted(bundle.relations, key=lambda r: (r.kind, r.detail, r.anchors)):
        # anchors must be nameable without ambiguity
        if all(descs.count(bundle.anchors[a]) == 1 for a in rel.anchors):
            informative.append(rel)
    if not informative:
        return None
    preferred = [r for r in informative if r.detail != "far_from"] or informative
    return preferred[int(rng.integers(len(preferred)))]


def compose_expression(bundle: AttributeBundle, rng_seed, force_ordinal: bool = False) -> tuple[str, dict]:
    """Render text and return it with the attribute values it mentions."""
    rng = np.random.default_rng(rng_seed)
    slots = list(TEMPLATES[int(rng.integers(len(TEMPLATES)))])
    relation = _pick_relation(bundle, rng) if "rel" in slots else None
    if "rel" in slots and relation is None:
        slots[slots.index("rel")] = "ord" if "ord" not in slots else "orient"
        if slots.count("orient") > 1:
            slots.remove("orient")
    if force_ordinal and "ord" not in slots:
        slots.insert(1, "ord")

    cat = display_name(bundle.category)
    fields = {
        "cat": cat, "cats": display_name(bundle.category, plural=True),
        "color": bundle.appearance, "state": bundle.state, "place": bundle.place,
        "d": int(round(bundle.distance)), "az": int(round(bundle.azimuth)),
        "azdesc": azimuth_description(bundle.azimuth), "ord": ordinal_word(bundle.ordinal),
        "n": bundle.n_same, "heading": HEADING_PHRASES[bundle.orientation],
        "h": f"{bundle.height:.1f}", "l": f"{bundle.length:.1f}",
    }
    full = rounded_mentions(bundle)
    mentions = {k: full[k] for k in ("category", "appearance", "place", "state", "distance")}
    sentences = []
    for slot in slots:
        if slot == "occ":
            options = OCCLUSION_PHRASES[bundle.occlusion]
            mentions["occlusion"] = full["occlusion"]
        elif slot == "rel":
            a = [_anchor_phrase(bundle.anchors[k]) for k in relation.anchors]
            options = tuple(p.replace("{a}", a[0]).replace("{b}", a[-1])
                            for p in RELATION_PHRASES[relation.detail])
            mentions["relation"] = describe_relation(relation, bundle.anchors)
        elif slot == "ord":
            options = CLAUSES["ord" if bundle.n_same > 1 else "ord_unique"]
            mentions["ordinal"] = full["ordinal"]
        else:
            options = CLAUSES[slot]
            key = {"az": "azimuth", "orient": "orientation", "size": "size"}.get(slot)
            if key:
                mentions[key] = full[key]
        sentence = options[int(rng.integers(len(options)))].format(**fields) + "."
        sentences.append(_ARTICLE_RE.sub(r"\1n ", sentence))
    # trim optional clauses from the end if the text runs long
    while len(" ".join(sentences).split()) > MAX_WORDS and len(sentences) > 3:
        sentences.pop()
    return " ".join(sentences), mentions


def render_expression(bundle: AttributeBundle, rng_seed, force_ordinal: bool = False) -> str:
    return compose_expression(bundle, rng_seed, force_ordinal)[0]


def word_count(text: str) -> int:
    return len(text.split())


# --------------------------------------------------------------------------
# tokenization

_TOKEN_RE = re.compile(r"\d+(?:\.\d+)?|[a-z]+|[.,]")
PAD, UNK, NUM = "<pad>", "<unk>", "<num>"


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def template_vocabulary() -> list[str]:
    """Closed vocabulary: every word any template or attribute phrase can emit."""
    from .scene import CATEGORIES, COLORS, PLACES, STATES

    chunks = []
    for group in (CLAUSES.values(), OCCLUSION_PHRASES.values(), RELATION_PHRASES.values()):
        for options in group:
            chunks.extend(options)
    chunks.extend(HEADING_PHRASES.values())
    chunks.extend(ORDINALS)
    chunks.extend(COLORS)
    for cat in CATEGORIES:
        chunks.append(display_name(cat) + " " + display_name(cat, plural=True))
    for v in PLACES.values():
        chunks.extend(v)
    for v in STATES.values():
        chunks.extend(v)
    chunks.extend(azimuth_description(a) for a in (90, 80, 100, 40, 140))
    chunks.append("th an . ,")
    words = set()
    for c in chunks:
        words.update(t for t in tokenize(re.sub(r"\{[a-z]+\}", " ", c)) if not t[0].isdigit())
    return [PAD, UNK, NUM] + sorted(words)


class Vocabulary:
    def __init__(self, words: list[str] | None = None):
        self.words = list(words or template_vocabulary())
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def num_id(self) -> int:
        return self.index[NUM]

    def encode(self, text: str) -> tuple[list[int], list[float]]:
        """Token ids plus a parallel list of numeric values (0 for non-numbers)."""
        ids, values = [], []
        for tok in tokenize(text):
            if tok[0].isdigit():
                ids.append(self.num_id)
                values.append(float(tok))
            else:
                ids.append(self.index.get(tok, self.index[UNK]))
                values.append(0.0)
        if not ids:
            raise ValueError("empty expression")
        return ids, values
