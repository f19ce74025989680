"""Personalized clinical descriptions built from static patient attributes.

Descriptions come from a rule table by default. An external completion endpoint can fill the
same sentence frame instead; its failures fall back to the rule engine when allowed.
"""

import json
import logging
import re
from collections.abc import Iterable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol

import numpy as np
from keboola.component.exceptions import UserException
from pydantic import BaseModel, Field, model_validator

from client import DescriptionClient, DescriptionClientError
from dataio import Gender, PatientStatic

logger = logging.getLogger(__name__)

DEFAULT_RULES_PATH = Path(__file__).resolve().parent.parent / "component_config" / "pcdg_rules.json"

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
PAD_ID = 0
UNK_ID = 1

ATTRIBUTE_SENTENCE = "The age of patient is {age}, gender is {gender}, and the type of surgery is {surgery}."
DESCRIPTION_FRAME = (
    "The patient belongs to the {age_group} age group, whose vascular compliance and cardiovascular "
    "compensatory capacity are {compliance}. At this time, {hormone} hormones act on the blood vessels. "
    "This surgery is a {category} type of surgery, and the blood loss is usually {blood_loss}."
)
PROMPT_TEMPLATE = (
    "The age of patient is {age}, gender is {gender}, and the type of surgery is {surgery}. "
    "Please provide the answer directly, separated by commas, without any spaces in between, "
    "removing the parentheses when responding. Without any explanations or additional content. "
    "The patient belongs to the () age group, whose vascular compliance and cardiovascular compensatory "
    "capacity are (). At this time, () hormones act on the blood vessels. This surgery is a () type of "
    "surgery, and the blood loss is usually ()."
)
FRAME_FIELDS = ("age_group", "compliance", "hormone", "category", "blood_loss")

_WORD_PATTERN = r"\w+|[^\w\s]"


class RuleLookupError(UserException):
    pass


class AgeBand(BaseModel):
    min_age: int = Field(ge=0)
    max_age: int = Field(le=130)
    label: str
    compliance: str


class SurgeryRule(BaseModel):
    category: str
    blood_loss: str


class RuleTable(BaseModel):
    age_bands: list[AgeBand]
    hormones: dict[Gender, str]
    surgeries: dict[str, SurgeryRule]

    @model_validator(mode="after")
    def _total(self) -> "RuleTable":
        bands = sorted(self.age_bands, key=lambda band: band.min_age)
        expected = 0
        for band in bands:
            if band.min_age != expected or band.max_age < band.min_age:
                raise ValueError(f"age bands must cover 0-130 without gaps or overlaps; problem at '{band.label}'")
            expected = band.max_age + 1
        if expected != 131:
            raise ValueError("age bands must reach 130")
        missing = set(Gender) - set(self.hormones)
        if missing:
            raise ValueError(f"hormone rules missing for: {', '.join(sorted(missing))}")
        self.age_bands = bands
        return self

    def age_band(self, age: int) -> AgeBand:
        for band in self.age_bands:
            if band.min_age <= age <= band.max_age:
                return band
        raise RuleLookupError(f"No age band covers age {age}")

    def surgery(self, surgery_type: str) -> SurgeryRule:
        try:
            return self.surgeries[surgery_type]
        except KeyError:
            raise RuleLookupError(f"Surgery type '{surgery_type}' has no entry in the rule table") from None

    def domain_terms(self) -> list[str]:
        """Hormone and surgery related terms that must stay single tokens."""
        terms = list(self.hormones.values())
        for name, rule in self.surgeries.items():
            terms.extend([name, rule.category])
        return list(dict.fromkeys(term.lower() for term in terms))


def load_rules(path: str | Path | None = None) -> RuleTable:
    path = Path(path) if path else DEFAULT_RULES_PATH
    with path.open(encoding="utf-8") as fh:
        return RuleTable.model_validate(json.load(fh))


def _attribute_sentence(static: PatientStatic) -> str:
    return ATTRIBUTE_SENTENCE.format(age=static.age, gender=static.gender, surgery=static.surgery_type)


def generate_description(static: PatientStatic, rules: RuleTable) -> str:
    band = rules.age_band(static.age)
    surgery = rules.surgery(static.surgery_type)
    frame = DESCRIPTION_FRAME.format(
        age_group=band.label,
        compliance=band.compliance,
        hormone=rules.hormones[static.gender],
        category=surgery.category,
        blood_loss=surgery.blood_loss,
    )
    return f"{_attribute_sentence(static)} {frame}"


def render_prompt(static: PatientStatic) -> str:
    return PROMPT_TEMPLATE.format(age=static.age, gender=static.gender, surgery=static.surgery_type)


class DescriptionRecord(NamedTuple):
    patient_id: str
    text: str
    source: str


def _text_from_reply(static: PatientStatic, reply: str) -> str:
    fields = [part.strip() for part in reply.strip().split(",")]
    if len(fields) == len(FRAME_FIELDS) and all(fields):
        return f"{_attribute_sentence(static)} {DESCRIPTION_FRAME.format(**dict(zip(FRAME_FIELDS, fields)))}"
    return reply.strip()


def llm_generate_description(
    static: PatientStatic,
    client: DescriptionClient | None,
    rules: RuleTable,
    fallback: bool = True,
) -> DescriptionRecord:
    if client is None:
        return DescriptionRecord(static.patient_id, generate_description(static, rules), "rule")

    prompt = render_prompt(static)
    logger.info(f"Description request for {static.patient_id}: {prompt}")
    try:
        reply = client.complete(prompt)
        if not reply.strip():
            raise DescriptionClientError("empty reply")
    except DescriptionClientError as e:
        if not fallback:
            raise
        logger.warning(f"Description endpoint failed for {static.patient_id} ({e}); using rule engine")
        return DescriptionRecord(static.patient_id, generate_description(static, rules), "rule")
    logger.info(f"Description reply for {static.patient_id}: {reply}")
    return DescriptionRecord(static.patient_id, _text_from_reply(static, reply), "external")


def build_description_corpus(
    patients: list[PatientStatic],
    rules: RuleTable,
    client: DescriptionClient | None = None,
    max_workers: int = 4,
    fallback: bool = True,
) -> list[DescriptionRecord]:
    if client is None:
        return [llm_generate_description(p, None, rules) for p in patients]
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(lambda p: llm_generate_description(p, client, rules, fallback), patients))


def store_descriptions(path: str | Path, records: Iterable[DescriptionRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record._asdict()) + "\n")


def load_descriptions(path: str | Path) -> list[DescriptionRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [DescriptionRecord(**json.loads(line)) for line in fh if line.strip()]


@dataclass
class Vocabulary:
    tokens: list[str]
    domain_terms: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must start with the PAD and UNK tokens")
        self.index = {token: i for i, token in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump({"tokens": self.tokens, "domain_terms": self.domain_terms}, fh, indent=1)

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        with Path(path).open(encoding="utf-8") as fh:
            return cls(**json.load(fh))


def _normalize(text: str) -> str:
    return " ".join(text.lower().split())


def build_vocabulary(corpus: list[str], domain_terms: list[str]) -> Vocabulary:
    """Word and punctuation tokens of the corpus, followed by every domain term as one token."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    tokens = {PAD_TOKEN: None, UNK_TOKEN: None}
    for text in corpus:
        tokens.update(dict.fromkeys(re.findall(_WORD_PATTERN, _normalize(text))))
    terms = [_normalize(term) for term in domain_terms if term.strip()]
    tokens.update(dict.fromkeys(terms))
    return Vocabulary(tokens=list(tokens), domain_terms=list(dict.fromkeys(terms)))


class Tokenizer(Protocol):
    def encode(self, text: str, max_tokens: int) -> tuple[np.ndarray, np.ndarray]: ...


class WordTokenizer:
    """Word-level tokenizer; multi-word domain terms are matched longest first and never split."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        terms = sorted(vocab.domain_terms, key=len, reverse=True)
        atomic = "|".join(rf"\b{re.escape(term)}\b" for term in terms)
        self._pattern = re.compile(f"{atomic}|{_WORD_PATTERN}" if atomic else _WORD_PATTERN)

    def split(self, text: str) -> list[str]:
        return self._pattern.findall(_normalize(text))

    def encode(self, text: str, max_tokens: int) -> tuple[np.ndarray, np.ndarray]:
        if max_tokens < 1:
            raise ValueError("max_tokens must be at least 1")
        ids = [self.vocab.id_of(token) for token in self.split(text)][:max_tokens]
        token_ids = np.full(max_tokens, PAD_ID, dtype=np.int64)
        token_ids[: len(ids)] = ids
        valid_mask = np.zeros(max_tokens, dtype=np.int64)
        valid_mask[: len(ids)] = 1
        return token_ids, valid_mask

    def decode(self, token_ids: Iterable[int]) -> str:
        words = [self.vocab.tokens[i] for i in token_ids if i != PAD_ID]
        return re.sub(r" ([^\w\s<])", r"\1", " ".join(words))


def tokenize_description(text: str, vocab: Vocabulary, max_tokens: int) -> tuple[np.ndarray, np.ndarray]:
    return WordTokenizer(vocab).encode(text, max_tokens)


@dataclass(eq=False)
class ClinicalDescription:
    patient_id: str
    text: str
    token_ids: np.ndarray
    valid_mask: np.ndarray
    source: str = "rule"


def encode_descriptions(
    records: Iterable[DescriptionRecord], tokenizer: Tokenizer, max_tokens: int
) -> dict[str, ClinicalDescription]:
    encoded = {}
    for record in records:
        token_ids, valid_mask = tokenizer.encode(record.text, max_tokens)
        encoded[record.patient_id] = ClinicalDescription(
            record.patient_id, record.text, token_ids, valid_mask, record.source
        )
    return encoded
