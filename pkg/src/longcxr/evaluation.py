"""NLG metrics, clinical-efficacy metrics, and label-consistency analysis.

Metrics operate on token lists from textproc.tokenize. METEOR is the
exact-match variant (no stemming or synonyms), so absolute values are not
comparable to resource-backed METEOR tooling.
"""

import math
import re
from collections import Counter
from dataclasses import dataclass, field

CONDITIONS = (
    "No Finding", "Enlarged Cardiomediastinum", "Cardiomegaly", "Lung Lesion",
    "Airspace Opacity", "Edema", "Consolidation", "Pneumonia", "Atelectasis",
    "Pneumothorax", "Pleural Effusion", "Pleural Other", "Fracture",
    "Support Devices",
)

POSITIVE, NEGATIVE, UNCERTAIN, UNMENTIONED = "positive", "negative", "uncertain", "unmentioned"


@dataclass
class LabelVector:
    labels: dict = field(default_factory=lambda: {c: UNMENTIONED for c in CONDITIONS})

    def __post_init__(self):
        if set(self.labels) != set(CONDITIONS):
            raise ValueError("label vector must cover exactly the 14 conditions")

    def __getitem__(self, condition):
        return self.labels[condition]

    def as_list(self):
        return [self.labels[c] for c in CONDITIONS]


@dataclass
class MetricReport:
    bleu_1: float
    bleu_2: float
    bleu_3: float
    bleu_4: float
    meteor: float
    rouge_l: float
    ce_accuracy: float
    ce_precision: float
    ce_recall: float
    ce_f1: float
    sample_count: int

    def to_json(self):
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# NLG metrics

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, max_n=4):
    """Corpus-level BLEU: geometric mean of clipped n-gram precisions
    with brevity penalty."""
    if not candidates:
        raise ValueError("empty candidate set")
    if len(candidates) != len(references):
        raise ValueError("candidate/reference count mismatch")
    log_precisions = []
    for n in range(1, max_n + 1):
        matched, total = 0, 0
        for cand, ref in zip(candidates, references):
            cand_ngrams = _ngrams(cand, n)
            ref_ngrams = _ngrams(ref, n)
            matched += sum(min(c, ref_ngrams[g]) for g, c in cand_ngrams.items())
            total += sum(cand_ngrams.values())
        if total == 0 or matched == 0:
            return 0.0
        log_precisions.append(math.log(matched / total))
    cand_len = sum(len(c) for c in candidates)
    ref_len = sum(len(r) for r in references)
    bp = 1.0 if cand_len > ref_len else math.exp(1 - ref_len / max(cand_len, 1))
    return bp * math.exp(sum(log_precisions) / max_n)


def _lcs_length(a, b):
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta=1.2):
    """LCS F-measure with recall weighted by beta."""
    if not reference:
        raise ValueError("empty reference")
    if not candidate:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    prec = lcs / len(candidate)
    rec = lcs / len(reference)
    return (1 + beta ** 2) * prec * rec / (rec + beta ** 2 * prec)


def _meteor_chunks(candidate, reference):
    """Greedy left-to-right unigram alignment; returns (matches, chunks)."""
    ref_positions = {}
    for j, tok in enumerate(reference):
        ref_positions.setdefault(tok, []).append(j)
    used = set()
    alignment = []
    for i, tok in enumerate(candidate):
        for j in ref_positions.get(tok, ()):
            if j not in used:
                used.add(j)
                alignment.append((i, j))
                break
    if not alignment:
        return 0, 0
    chunks = 1
    for (i0, j0), (i1, j1) in zip(alignment, alignment[1:]):
        if i1 != i0 + 1 or j1 != j0 + 1:
            chunks += 1
    return len(alignment), chunks


def meteor(candidate, reference):
    """Exact-match METEOR: harmonic F-mean (recall-heavy) with a
    fragmentation penalty 0.5 * (chunks/matches)^3."""
    if not candidate or not reference:
        raise ValueError("empty input to meteor")
    m, chunks = _meteor_chunks(candidate, reference)
    if m == 0:
        return 0.0
    prec = m / len(candidate)
    rec = m / len(reference)
    f_mean = 10 * prec * rec / (rec + 9 * prec)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1 - penalty)


def corpus_meteor(candidates, references):
    scores = [meteor(c, r) if c and r else 0.0 for c, r in zip(candidates, references)]
    return sum(scores) / len(scores)


def corpus_rouge_l(candidates, references):
    scores = [rouge_l(c, r) for c, r in zip(candidates, references)]
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# rule-based stub labeler

NEGATION_CUES = ("no", "not", "without", "free of", "clear of", "absence of")
HEDGE_CUES = ("possible", "possibly", "may", "might", "cannot exclude", "question of")

# keyword patterns per condition; matched per sentence, lowercased
CONDITION_PATTERNS = {
    "No Finding": ("no finding", "normal study", "unremarkable"),
    "Enlarged Cardiomediastinum": ("cardiomediastinum", "mediastinal contour", "mediastinum enlarged"),
    "Cardiomegaly": ("cardiomegaly", "cardiac silhouette enlarged", "heart size enlarged",
                     "enlarged cardiac silhouette", "enlarged heart"),
    "Lung Lesion": ("lesion", "nodule", "mass"),
    "Airspace Opacity": ("opacity", "opacities", "opacification"),
    "Edema": ("edema",),
    "Consolidation": ("consolidation",),
    "Pneumonia": ("pneumonia", "infection"),
    "Atelectasis": ("atelectasis", "atelectatic"),
    "Pneumothorax": ("pneumothorax",),
    "Pleural Effusion": ("pleural effusion", "effusion", "effusions"),
    "Pleural Other": ("pleural thickening", "pleural scarring"),
    "Fracture": ("fracture", "fractures"),
    "Support Devices": ("support devices", "tube", "catheter", "pacemaker", "line"),
}

_SENT_SPLIT_RE = re.compile(r"[.;\n]")


def stub_labeler(findings_text):
    """Deterministic keyword/negation labeler standing in for CheXpert.

    Mention without a cue -> positive; a negation cue earlier in the same
    sentence -> negative; a hedging cue -> uncertain; no mention ->
    unmentioned.
    """
    labels = {c: UNMENTIONED for c in CONDITIONS}
    for sentence in _SENT_SPLIT_RE.split(findings_text.lower()):
        for condition, patterns in CONDITION_PATTERNS.items():
            for pattern in patterns:
                pos = sentence.find(pattern)
                if pos < 0:
                    continue
                before = sentence[:pos]
                if any(re.search(rf"\b{re.escape(cue)}\b", before) for cue in HEDGE_CUES):
                    verdict = UNCERTAIN
                elif any(re.search(rf"\b{re.escape(cue)}\b", before) for cue in NEGATION_CUES):
                    verdict = NEGATIVE
                else:
                    verdict = POSITIVE
                # positive evidence wins over weaker verdicts across sentences
                rank = {UNMENTIONED: 0, NEGATIVE: 1, UNCERTAIN: 2, POSITIVE: 3}
                if rank[verdict] > rank[labels[condition]]:
                    labels[condition] = verdict
                break
    return LabelVector(labels=labels)


# ---------------------------------------------------------------------------
# clinical efficacy

def ce_metrics(predicted, truth):
    """Micro-averaged accuracy/precision/recall/F1, binarized positive-vs-rest."""
    if len(predicted) != len(truth):
        raise ValueError("prediction/truth count mismatch")
    tp = fp = fn = tn = 0
    for pred, ref in zip(predicted, truth):
        for c in CONDITIONS:
            p = pred[c] == POSITIVE
            t = ref[c] == POSITIVE
            tp += p and t
            fp += p and not t
            fn += t and not p
            tn += not p and not t
    total = tp + fp + fn + tn
    accuracy = (tp + tn) / total if total else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return accuracy, precision, recall, f1


def longitudinal_label_consistency(prev_labels, truth_curr_labels, gen_curr_labels):
    """Stratified generation accuracy over conditions mentioned in both visits.

    Returns a dict with the match rate where previous == current truth, the
    error rate where they differ, and per-condition counts.
    """
    same_match = same_total = 0
    diff_wrong = diff_total = 0
    per_condition = {c: {"same_total": 0, "same_match": 0,
                         "diff_total": 0, "diff_wrong": 0} for c in CONDITIONS}
    for prev, truth, gen in zip(prev_labels, truth_curr_labels, gen_curr_labels):
        for c in CONDITIONS:
            if prev[c] == UNMENTIONED or truth[c] == UNMENTIONED:
                continue
            counts = per_condition[c]
            if prev[c] == truth[c]:
                same_total += 1
                counts["same_total"] += 1
                if gen[c] == truth[c]:
                    same_match += 1
                    counts["same_match"] += 1
            else:
                diff_total += 1
                counts["diff_total"] += 1
                if gen[c] != truth[c]:
                    diff_wrong += 1
                    counts["diff_wrong"] += 1
    return {
        "same_label_match_rate": same_match / same_total if same_total else None,
        "changed_label_error_rate": diff_wrong / diff_total if diff_total else None,
        "same_total": same_total,
        "changed_total": diff_total,
        "per_condition": per_condition,
    }


def full_report(candidates, references, labeler=stub_labeler):
    """All NLG + CE metrics for tokenized candidates against references,
    with labels computed from the detokenized texts."""
    pred_labels = [labeler(" ".join(c)) for c in candidates]
    true_labels = [labeler(" ".join(r)) for r in references]
    acc, prec, rec, f1 = ce_metrics(pred_labels, true_labels)
    return MetricReport(
        bleu_1=bleu(candidates, references, 1),
        bleu_2=bleu(candidates, references, 2),
        bleu_3=bleu(candidates, references, 3),
        bleu_4=bleu(candidates, references, 4),
        meteor=corpus_meteor(candidates, references),
        rouge_l=corpus_rouge_l(candidates, references),
        ce_accuracy=acc,
        ce_precision=prec,
        ce_recall=rec,
        ce_f1=f1,
        sample_count=len(candidates),
    )
