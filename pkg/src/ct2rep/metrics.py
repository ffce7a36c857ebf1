"""Natural-language-generation scores (BLEU, METEOR-lite, ROUGE-L) and clinical efficacy
from a rule-based findings labeler."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from .textproc import tokenize

LABELS = (
    "medical material",
    "arterial wall calcification",
    "cardiomegaly",
    "pericardial effusion",
    "coronary artery wall calcification",
    "hiatal hernia",
    "lymphadenopathy",
    "emphysema",
    "atelectasis",
    "lung nodule",
    "lung opacity",
    "pulmonary fibrotic sequela",
    "pleural effusion",
    "mosaic attenuation pattern",
    "peribronchial thickening",
    "consolidation",
    "bronchiectasis",
    "interlobular septal thickening",
)


class MetricInputError(ValueError):
    pass


def _tokens(text) -> list[str]:
    return list(text) if isinstance(text, (list, tuple)) else tokenize(text)


# -- BLEU ------------------------------------------------------------------------------------

def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def _bleu_stats(cand, ref, max_n: int):
    clipped, totals = [], []
    for n in range(1, max_n + 1):
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        clipped.append(sum(min(k, r[g]) for g, k in c.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return clipped, totals


def _bleu_from_stats(clipped, totals, cand_len: int, ref_len: int) -> float:
    if cand_len == 0 or any(t == 0 or c == 0 for c, t in zip(clipped, totals)):
        return 0.0
    log_p = sum(math.log(c / t) for c, t in zip(clipped, totals)) / len(totals)
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def bleu(candidate, reference, n: int = 4) -> float:
    """Sentence BLEU-n: clipped n-gram precisions, uniform weights, brevity penalty."""
    if not 1 <= n <= 4:
        raise MetricInputError(f"BLEU order must be 1..4, got {n}")
    cand, ref = _tokens(candidate), _tokens(reference)
    clipped, totals = _bleu_stats(cand, ref, n)
    return _bleu_from_stats(clipped, totals, len(cand), len(ref))


def corpus_bleu(candidates, references, n: int = 4) -> float:
    if not 1 <= n <= 4:
        raise MetricInputError(f"BLEU order must be 1..4, got {n}")
    if len(candidates) != len(references):
        raise MetricInputError(f"{len(candidates)} candidates vs {len(references)} references")
    clipped, totals = [0] * n, [0] * n
    cand_len = ref_len = 0
    for c, r in zip(candidates, references):
        c, r = _tokens(c), _tokens(r)
        cl, to = _bleu_stats(c, r, n)
        clipped = [a + b for a, b in zip(clipped, cl)]
        totals = [a + b for a, b in zip(totals, to)]
        cand_len += len(c)
        ref_len += len(r)
    return _bleu_from_stats(clipped, totals, cand_len, ref_len)


# -- METEOR-lite -------------------------------------------------------------------------------

def stem(word: str) -> str:
    """Tiny suffix stripper; enough to merge plural and tense variants."""
    if len(word) > 4 and word.endswith("ies"):
        return word[:-3] + "y"
    if len(word) > 3 and word.endswith("es") and word[:-2].endswith(("s", "x", "z", "ch", "sh")):
        return word[:-2]
    if len(word) > 3 and word.endswith("s") and not word.endswith("ss"):
        return word[:-1]
    if len(word) > 5 and word.endswith("ing"):
        return word[:-3]
    if len(word) > 4 and word.endswith("ed"):
        return word[:-2]
    return word


def _align(cand, ref, key, taken_c: set, taken_r: set, pairs: list):
    last_r = -2
    for i, tok in enumerate(cand):
        if i in taken_c:
            continue
        options = [j for j, r in enumerate(ref) if j not in taken_r and key(r) == key(tok)]
        if not options:
            continue
        j = last_r + 1 if last_r + 1 in options else options[0]  # prefer continuing a chunk
        taken_c.add(i)
        taken_r.add(j)
        pairs.append((i, j))
        last_r = j


def meteor(candidate, reference, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    """Unigram F-mean with a fragmentation penalty; exact matches first, then stems."""
    cand, ref = _tokens(candidate), _tokens(reference)
    if not cand or not ref:
        return 0.0
    pairs, tc, tr = [], set(), set()
    _align(cand, ref, lambda w: w, tc, tr, pairs)
    _align(cand, ref, stem, tc, tr, pairs)
    m = len(pairs)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    fmean = p * r / (alpha * p + (1 - alpha) * r)
    pairs.sort()
    chunks = 1 + sum(1 for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]) if not (i1 == i0 + 1 and j1 == j0 + 1))
    penalty = gamma * (chunks / m) ** beta
    return fmean * (1 - penalty)


# -- ROUGE-L -------------------------------------------------------------------------------------

def lcs_length(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.0) -> float:
    cand, ref = _tokens(candidate), _tokens(reference)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


# -- labeler -------------------------------------------------------------------------------------

@dataclass
class _Rule:
    include: list
    negation: list


def load_rules(path=None) -> dict:
    if path is None:
        text = resources.files("ct2rep").joinpath("data/labeler_rules.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    raw = json.loads(text)
    missing = [lab for lab in LABELS if lab not in raw]
    if missing:
        raise MetricInputError(f"rules file lacks labels: {missing}")
    return {lab: _Rule([re.compile(p) for p in raw[lab]["include"]],
                       [re.compile(p) for p in raw[lab]["negation"]]) for lab in LABELS}


_RULES = None


def _default_rules() -> dict:
    global _RULES
    if _RULES is None:
        _RULES = load_rules()
    return _RULES


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"[.;\n]+", text.lower()) if s.strip()]


def extract_labels(text: str, rules: dict | None = None) -> np.ndarray:
    """18-dim 0/1 vector. A sentence counts only if it matches a phrase and has no negation cue."""
    rules = rules or _default_rules()
    out = np.zeros(len(LABELS), dtype=np.int64)
    for sentence in split_sentences(text):
        for k, lab in enumerate(LABELS):
            rule = rules[lab]
            if any(p.search(sentence) for p in rule.include) and not any(p.search(sentence) for p in rule.negation):
                out[k] = 1
    return out


def _prf(tp: int, fp: int, fn: int) -> tuple:
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def clinical_efficacy(predicted, truth, rules: dict | None = None) -> dict:
    """Per-label precision/recall/F1 plus their macro mean.

    Inputs are report strings or precomputed label vectors. The mean runs over
    labels that are populated (any TP, FP or FN); when none is, every score is 1.
    """
    if len(predicted) != len(truth):
        raise MetricInputError(f"{len(predicted)} predictions vs {len(truth)} references")
    pv = np.array([extract_labels(t, rules) if isinstance(t, str) else np.asarray(t) for t in predicted]).reshape(-1, len(LABELS))
    tv = np.array([extract_labels(t, rules) if isinstance(t, str) else np.asarray(t) for t in truth]).reshape(-1, len(LABELS))
    per_label, populated = {}, []
    for k, lab in enumerate(LABELS):
        tp = int(((pv[:, k] == 1) & (tv[:, k] == 1)).sum())
        fp = int(((pv[:, k] == 1) & (tv[:, k] == 0)).sum())
        fn = int(((pv[:, k] == 0) & (tv[:, k] == 1)).sum())
        p, r, f = _prf(tp, fp, fn)
        per_label[lab] = {"precision": p, "recall": r, "f1": f, "tp": tp, "fp": fp, "fn": fn}
        if tp + fp + fn:
            populated.append(per_label[lab])
    if populated:
        mean = {key: float(np.mean([row[key] for row in populated])) for key in ("precision", "recall", "f1")}
    else:
        mean = {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    return {"per_label": per_label, "mean": mean}


# -- combined report -----------------------------------------------------------------------------

@dataclass
class MetricReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    meteor: float
    rouge_l: float
    precision: float
    recall: float
    f1: float
    n: int
    per_label: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(predictions, references) -> MetricReport:
    """Corpus BLEU-1..4, mean METEOR and ROUGE-L, and clinical efficacy."""
    if len(predictions) != len(references):
        raise MetricInputError(f"{len(predictions)} predictions vs {len(references)} references")
    if not predictions:
        raise MetricInputError("nothing to evaluate")
    ce = clinical_efficacy(predictions, references)
    return MetricReport(
        *(corpus_bleu(predictions, references, n) for n in (1, 2, 3, 4)),
        meteor=float(np.mean([meteor(p, r) for p, r in zip(predictions, references)])),
        rouge_l=float(np.mean([rouge_l(p, r) for p, r in zip(predictions, references)])),
        **ce["mean"],
        n=len(predictions),
        per_label=ce["per_label"],
    )


meteor_lite = meteor
