"""Rule-based structured reports, text augmentation and a fixed-lexicon tokenizer."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError, CorruptFileError

SECTIONS = (
    "image quality",
    "lungs and airways",
    "pleura",
    "mediastinum and hila",
    "cardiovascular structures",
    "bones and soft tissues",
    "tubes, lines, and devices",
    "upper abdomen",
)


@dataclass(frozen=True)
class Abnormality:
    name: str
    section: str
    sentence: str
    short: str


# Long sentences never contain the words "noted" or "unremarkable", which are
# reserved for the short findings so that the two renderings never overlap.
CATALOGUE = (
    Abnormality("medical material", "tubes, lines, and devices",
                "A central venous catheter is seen with its tip in the superior vena cava.",
                "Medical material noted."),
    Abnormality("arterial wall calcification", "cardiovascular structures",
                "There are calcified plaques in the wall of the thoracic aorta.",
                "Arterial wall calcification noted."),
    Abnormality("cardiomegaly", "cardiovascular structures",
                "The heart is enlarged with an increased cardiothoracic ratio.",
                "Cardiomegaly noted."),
    Abnormality("pericardial effusion", "cardiovascular structures",
                "Fluid is present in the pericardial space.",
                "Pericardial effusion noted."),
    Abnormality("coronary artery wall calcification", "cardiovascular structures",
                "Calcific deposits are seen along the coronary arteries.",
                "Coronary artery wall calcification noted."),
    Abnormality("hiatal hernia", "upper abdomen",
                "Part of the stomach herniates through the esophageal hiatus.",
                "Hiatal hernia noted."),
    Abnormality("lymphadenopathy", "mediastinum and hila",
                "Enlarged lymph nodes are seen in the mediastinum and both hilar regions.",
                "Lymphadenopathy noted."),
    Abnormality("emphysema", "lungs and airways",
                "Areas of low attenuation consistent with emphysema are seen in both upper lobes.",
                "Emphysema noted."),
    Abnormality("atelectasis", "lungs and airways",
                "Linear atelectasis is seen in the lower lobe of the left lung.",
                "Atelectasis noted."),
    Abnormality("lung nodule", "lungs and airways",
                "A solid nodule measuring several millimeters is seen in the right upper lobe.",
                "Lung nodule noted."),
    Abnormality("lung opacity", "lungs and airways",
                "Ground glass opacity is observed in the middle lobe of the right lung.",
                "Lung opacity noted."),
    Abnormality("pulmonary fibrotic sequela", "lungs and airways",
                "Fibrotic bands with traction are seen at the lung bases.",
                "Pulmonary fibrotic sequela noted."),
    Abnormality("pleural effusion", "pleura",
                "Fluid is seen in the left pleural space with adjacent compression.",
                "Pleural effusion noted."),
    Abnormality("mosaic attenuation pattern", "lungs and airways",
                "A mosaic attenuation pattern is present throughout both lungs.",
                "Mosaic attenuation pattern noted."),
    Abnormality("peribronchial thickening", "lungs and airways",
                "The bronchial walls show peribronchial thickening in the lower lobes.",
                "Peribronchial thickening noted."),
    Abnormality("consolidation", "lungs and airways",
                "An area of consolidation with air bronchograms is seen in the left lower lobe.",
                "Consolidation noted."),
    Abnormality("bronchiectasis", "lungs and airways",
                "Dilated bronchi consistent with bronchiectasis are seen in both lower lobes.",
                "Bronchiectasis noted."),
    Abnormality("interlobular septal thickening", "lungs and airways",
                "Smooth interlobular septal thickening is observed at the periphery of both lungs.",
                "Interlobular septal thickening noted."),
)

# Long-form negative sentences per section; the variant is picked by seed.
NEGATIVE_SENTENCES = {
    "image quality": (
        "The examination is of diagnostic quality.",
        "Image quality is adequate for evaluation.",
    ),
    "lungs and airways": (
        "The trachea and both main bronchi are patent and both lungs are clear.",
        "Ventilation of both lungs is normal and no mass or infiltrative lesion is observed.",
    ),
    "pleura": (
        "There is no fluid or thickening in the pleural spaces.",
        "The pleural surfaces are smooth without fluid.",
    ),
    "mediastinum and hila": (
        "Mediastinal and hilar structures are of normal size and contour.",
        "No enlarged lymph node is seen in the mediastinum or hila.",
        "Normal esophagus.",
    ),
    "cardiovascular structures": (
        "Heart size is normal and the great vessels are of normal caliber.",
        "The heart and thoracic aorta are normal in size without calcified plaques.",
    ),
    "bones and soft tissues": (
        "No lytic or destructive bone lesion is seen.",
        "The thoracic vertebrae and soft tissues are normal.",
    ),
    "tubes, lines, and devices": (
        "No catheter or device is present.",
        "There are no tubes or lines in the field of view.",
    ),
    "upper abdomen": (
        "The visualized upper abdominal organs are normal.",
        "The liver and spleen in the field of view are normal.",
    ),
}

SHORT_NEGATIVE = {
    "image quality": "Unremarkable image quality.",
    "lungs and airways": "Unremarkable lungs and airways.",
    "pleura": "Unremarkable pleura.",
    "mediastinum and hila": "Unremarkable mediastinum and hila.",
    "cardiovascular structures": "Unremarkable cardiovascular structures.",
    "bones and soft tissues": "Unremarkable bones and soft tissues.",
    "tubes, lines, and devices": "Unremarkable tubes, lines, and devices.",
    "upper abdomen": "Unremarkable upper abdomen.",
}

SPECIALS = ("[PAD]", "[BOS]", "[EOS]", "[MASK]", "[UNK]") + tuple(
    "[SEC:" + s.replace(",", "").replace(" ", "_") + "]" for s in SECTIONS
)
PAD, BOS, EOS, MASK, UNK = range(5)
HEADER_IDS = tuple(range(5, 5 + len(SECTIONS)))
VOCAB_VERSION = "vlp3d-vocab-1"

_WORD_RE = re.compile(r"[a-z0-9]+(?:-[a-z0-9]+)*|[.,]")


@dataclass
class StructuredReport:
    sections: dict[str, list[str]]
    short_positive: dict[str, list[str]]
    short_negative: dict[str, list[str]]

    def __post_init__(self):
        for part in (self.sections, self.short_positive, self.short_negative):
            if set(part) != set(SECTIONS):
                raise ArgumentError("a report must hold exactly the canonical sections")

    def long_sentences(self) -> list[str]:
        return [s for name in SECTIONS for s in self.sections[name]]

    def short_findings(self, include_negative: bool = True) -> list[str]:
        out = [s for name in SECTIONS for s in self.short_positive[name]]
        if include_negative:
            out += [s for name in SECTIONS for s in self.short_negative[name]]
        return out


def synth_report(labels: Sequence[int], seed: int) -> StructuredReport:
    """Write the report for a label vector (a GroundTruth or its ``labels``)."""
    labels = np.asarray(getattr(labels, "labels", labels))
    present = [int(i) for i in np.flatnonzero(labels)]
    for i in present:
        if i >= len(CATALOGUE):
            raise ArgumentError(f"abnormality index {i} has no report template")
    rng = np.random.default_rng(seed)
    sections = {name: [] for name in SECTIONS}
    short_pos = {name: [] for name in SECTIONS}
    short_neg = {name: [] for name in SECTIONS}
    for i in present:
        ab = CATALOGUE[i]
        sections[ab.section].append(ab.sentence)
        short_pos[ab.section].append(ab.short)
    for name in SECTIONS:
        variant = int(rng.integers(len(NEGATIVE_SENTENCES[name])))
        if not sections[name]:
            sections[name].append(NEGATIVE_SENTENCES[name][variant])
            short_neg[name].append(SHORT_NEGATIVE[name])
        elif len(sections[name]) > 1:
            order = rng.permutation(len(sections[name]))
            sections[name] = [sections[name][k] for k in order]
    return StructuredReport(sections, short_pos, short_neg)


def render_report(
    r: StructuredReport,
    style: str = "long",
    shuffle: bool = False,
    p_short: float = 0.0,
    seed: int = 0,
    short_negatives: bool = True,
) -> str:
    """Render a report to text.

    The long style joins all long sentences in section order. With
    probability ``p_short`` (or always, for ``style="short"``) the short
    findings replace them, concatenated in random order. ``shuffle`` permutes
    the long sentences.
    """
    if not 0.0 <= p_short <= 1.0:
        raise ArgumentError(f"p_short must lie in [0, 1], got {p_short}")
    if style not in ("long", "short"):
        raise ArgumentError(f"unknown style {style!r}")
    rng = np.random.default_rng(seed)
    use_short = style == "short" or rng.random() < p_short
    if use_short:
        sentences = r.short_findings(include_negative=short_negatives)
        sentences = [sentences[k] for k in rng.permutation(len(sentences))]
    else:
        sentences = r.long_sentences()
        if shuffle:
            sentences = [sentences[k] for k in rng.permutation(len(sentences))]
    return " ".join(sentences)


def split_sentences(text: str) -> list[str]:
    """Split at the period delimiter, keeping the period on each sentence."""
    return [s.strip() + "." for s in text.split(".") if s.strip()]


def zero_shot_prompts(abnormality_name: str) -> tuple[str, str]:
    name = abnormality_name.strip()
    if not name:
        raise ArgumentError("abnormality name must be non-empty")
    return f"{name} present", f"No {name} present"


def words(text: str) -> list[str]:
    return _WORD_RE.findall(text.lower())


def template_lexicon() -> list[str]:
    """Every word the report templates and zero-shot prompts can produce."""
    texts = [a.sentence for a in CATALOGUE] + [a.short for a in CATALOGUE]
    texts += [s for v in NEGATIVE_SENTENCES.values() for s in v] + list(SHORT_NEGATIVE.values())
    texts += [" ".join(zero_shot_prompts(a.name)) for a in CATALOGUE]
    texts += list(SECTIONS)
    return sorted({w for t in texts for w in words(t)})


@dataclass(frozen=True)
class Vocab:
    """Immutable token table: specials first (ids 0..S-1), then the sorted lexicon."""

    tokens: tuple[str, ...]
    version: str = VOCAB_VERSION
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[: len(SPECIALS)] != SPECIALS:
            raise ArgumentError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ArgumentError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, lexicon: Iterable[str] | None = None) -> "Vocab":
        lexicon = template_lexicon() if lexicon is None else sorted(set(lexicon))
        return cls(SPECIALS + tuple(w for w in lexicon if w not in SPECIALS))

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path) -> None:
        Path(path).write_text("\n".join((f"#{self.version}",) + self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#"):
            raise CorruptFileError(f"{path}: missing vocabulary version line")
        version = lines[0][1:]
        if version != VOCAB_VERSION:
            raise CorruptFileError(f"{path}: unsupported vocabulary version {version!r}")
        return cls(tuple(lines[1:]), version)


@dataclass
class TokenSequence:
    ids: list[int]

    def __len__(self):
        return len(self.ids)


def tokenize(text: str, vocab: Vocab, max_len: int) -> TokenSequence:
    """Lower-case word/period tokens framed by BOS and EOS, truncated to ``max_len``."""
    if max_len < 2:
        raise ArgumentError("max_len must be at least 2")
    body = [vocab.id(w) for w in words(text)][: max_len - 2]
    return TokenSequence([BOS] + body + [EOS])


def tokenize_words(text: str, vocab: Vocab) -> list[int]:
    """Token ids without BOS/EOS framing and without truncation."""
    return [vocab.id(w) for w in words(text)]


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i in (PAD, BOS, EOS):
            continue
        out.append(vocab.tokens[i])
    return " ".join(out)


def section_token_ids(r: StructuredReport, vocab: Vocab) -> list[list[int]]:
    """Per canonical section, the token ids of its long sentences."""
    return [tokenize_words(" ".join(r.sections[name]), vocab) for name in SECTIONS]


# --- serialization ----------------------------------------------------------

_SECTION_LINE = "## "
_POS_LINE = "+ "
_NEG_LINE = "- "


def report_to_text(r: StructuredReport) -> str:
    """Section heading lines, then long sentences; short findings prefixed '+ ' / '- '."""
    lines = []
    for name in SECTIONS:
        lines.append(_SECTION_LINE + name)
        lines += r.sections[name]
        lines += [_POS_LINE + s for s in r.short_positive[name]]
        lines += [_NEG_LINE + s for s in r.short_negative[name]]
    return "\n".join(lines) + "\n"


def report_from_text(text: str) -> StructuredReport:
    sections, pos, neg = {}, {}, {}
    current = None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith(_SECTION_LINE):
            current = line[len(_SECTION_LINE):]
            if current not in SECTIONS:
                raise CorruptFileError(f"line {lineno}: unknown section {current!r}")
            sections[current], pos[current], neg[current] = [], [], []
        elif current is None:
            raise CorruptFileError(f"line {lineno}: text before the first section heading")
        elif line.startswith(_POS_LINE):
            pos[current].append(line[len(_POS_LINE):])
        elif line.startswith(_NEG_LINE):
            neg[current].append(line[len(_NEG_LINE):])
        else:
            sections[current].append(line)
    try:
        return StructuredReport(sections, pos, neg)
    except ArgumentError as exc:
        raise CorruptFileError(str(exc)) from exc
