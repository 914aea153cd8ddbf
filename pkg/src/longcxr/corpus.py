"""Longitudinal dataset construction.

Turns per-study metadata plus report text into chronologically ordered
consecutive-visit pairs: (previous CXR, previous report, current CXR) ->
current findings. Also ships a seeded synthetic generator so the whole
pipeline runs without the real hospital data.
"""

import csv
import io
import json
import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class VisitRecord:
    patient_id: str
    study_id: str
    study_datetime: datetime
    image_refs: tuple
    report_text: str
    findings_text: Optional[str] = None

    def __post_init__(self):
        if not self.image_refs:
            raise CorpusError(f"study {self.study_id}: no images")

    @property
    def sort_key(self):
        # ties on timestamp break by study_id so builds are deterministic
        return (self.study_datetime, self.study_id)

    @property
    def primary_image(self):
        return self.image_refs[0]


@dataclass
class LongitudinalSample:
    patient_id: str
    prev: VisitRecord
    curr: VisitRecord
    split: Optional[str] = None

    def __post_init__(self):
        if self.prev.patient_id != self.curr.patient_id:
            raise CorpusError("paired visits belong to different patients")
        if self.prev.sort_key > self.curr.sort_key:
            raise CorpusError("previous visit is later than current visit")
        if self.curr.findings_text is None or self.prev.findings_text is None:
            raise CorpusError("both visits of a pair need a findings section")

    def to_json(self):
        return {
            "patient_id": self.patient_id,
            "prev_study_id": self.prev.study_id,
            "curr_study_id": self.curr.study_id,
            "prev_image": self.prev.primary_image,
            "curr_image": self.curr.primary_image,
            "prev_findings": self.prev.findings_text,
            "curr_findings": self.curr.findings_text,
            "split": self.split,
        }


@dataclass
class CorpusStats:
    visits_per_patient: dict = field(default_factory=dict)
    patients_with_ge2_visits: int = 0
    total_samples: int = 0
    per_split: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "visits_per_patient": {str(k): v for k, v in sorted(self.visits_per_patient.items())},
            "patients_with_ge2_visits": self.patients_with_ge2_visits,
            "total_samples": self.total_samples,
            "per_split": self.per_split,
        }


FINDINGS_RE = re.compile(r"findings\s*:", re.IGNORECASE)
# section ends at the next ALL-CAPS heading followed by a colon
NEXT_HEADING_RE = re.compile(r"\b[A-Z][A-Z ]{2,}\s*:")


def extract_findings(report_text):
    """Return the findings section body, or None if the report has none."""
    m = FINDINGS_RE.search(report_text)
    if m is None:
        return None
    rest = report_text[m.end():]
    nxt = NEXT_HEADING_RE.search(rest)
    body = rest[: nxt.start()] if nxt else rest
    body = body.strip()
    return body or None


def _parse_dt(date_str, time_str):
    time_str = time_str.split(".")[0].zfill(6)
    return datetime.strptime(date_str + time_str, "%Y%m%d%H%M%S")


def parse_metadata(metadata_stream, reports):
    """Parse a metadata CSV plus a study_id->report mapping into VisitRecords.

    Malformed rows are skipped and collected in ``errors``; studies with no
    report are skipped with a warning entry. Returns (records, errors).
    """
    required = {"patient_id", "study_id", "study_date", "study_time", "image_ids"}
    reader = csv.DictReader(metadata_stream)
    missing = required - set(reader.fieldnames or ())
    if missing:
        raise CorpusError(f"metadata missing columns: {sorted(missing)}")
    records, errors = [], []
    for rownum, row in enumerate(reader, 2):
        try:
            if any(not (row.get(c) or "").strip() for c in required):
                raise CorpusError("empty required field")
            study_id = row["study_id"].strip()
            images = tuple(x for x in row["image_ids"].split("|") if x.strip())
            if not images:
                raise CorpusError("no image ids")
            if study_id not in reports:
                errors.append(f"row {rownum}: no report for study {study_id}")
                continue
            report = reports[study_id]
            records.append(
                VisitRecord(
                    patient_id=row["patient_id"].strip(),
                    study_id=study_id,
                    study_datetime=_parse_dt(row["study_date"].strip(), row["study_time"].strip()),
                    image_refs=images,
                    report_text=report,
                    findings_text=extract_findings(report),
                )
            )
        except (CorpusError, ValueError) as exc:
            errors.append(f"row {rownum}: {exc}")
    return records, errors


def load_reports(path):
    """Load reports from a directory of <study_id>.txt files or a 2-column CSV."""
    path = Path(path)
    if path.is_dir():
        return {p.stem: p.read_text() for p in sorted(path.glob("*.txt"))}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0][:2] == ["study_id", "report_text"]:
        rows = rows[1:]
    return {sid: text for sid, text in rows}


def chronological_sort(visits):
    """Sort one patient's visits by (study_datetime, study_id)."""
    patients = {v.patient_id for v in visits}
    if len(patients) > 1:
        raise CorpusError(f"mixed patient ids in chronological_sort: {sorted(patients)}")
    return sorted(visits, key=lambda v: v.sort_key)


def group_by_patient(records):
    by_patient = defaultdict(list)
    for rec in records:
        by_patient[rec.patient_id].append(rec)
    return {pid: chronological_sort(vs) for pid, vs in sorted(by_patient.items())}


def build_longitudinal_pairs(visits_by_patient):
    """Emit adjacent consecutive-visit pairs per patient, plus corpus stats.

    Visits without a findings section are excluded before pairing (they can
    serve neither as target nor as previous-report input).
    """
    samples = []
    histogram = Counter()
    ge2 = 0
    for pid in sorted(visits_by_patient):
        eligible = [v for v in visits_by_patient[pid] if v.findings_text is not None]
        histogram[len(eligible)] += 1
        if len(eligible) >= 2:
            ge2 += 1
        for prev, curr in zip(eligible, eligible[1:]):
            samples.append(LongitudinalSample(patient_id=pid, prev=prev, curr=curr))
    stats = CorpusStats(
        visits_per_patient=dict(histogram),
        patients_with_ge2_visits=ge2,
        total_samples=len(samples),
    )
    return samples, stats


def assign_splits(samples, split_manifest, default_split=None):
    """Set each sample's split from a patient_id->split manifest.

    Patients absent from the manifest get ``default_split`` when configured,
    otherwise the full list of missing ids is raised.
    """
    missing = sorted({s.patient_id for s in samples} - set(split_manifest))
    if missing and default_split is None:
        raise CorpusError(f"patients missing from split manifest: {missing}")
    for s in samples:
        s.split = split_manifest.get(s.patient_id, default_split)
    return samples


def read_split_manifest(path):
    manifest = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            pid, split = row["patient_id"], row["split"]
            if pid in manifest and manifest[pid] != split:
                raise CorpusError(f"patient {pid} has conflicting splits in manifest")
            manifest[pid] = split
    return manifest


# ---------------------------------------------------------------------------
# synthetic corpus generation

_SENTENCES = [
    "the lungs are clear .",
    "no pneumothorax .",
    "no pleural effusion .",
    "small left pleural effusion .",
    "cardiac silhouette enlarged .",
    "heart size is normal .",
    "possible consolidation in the right lower lobe .",
    "no focal consolidation .",
    "mild pulmonary edema .",
    "without edema .",
    "atelectasis at the left base .",
    "support devices in standard position .",
    "no acute fracture .",
    "stable appearance of the chest .",
]


@dataclass
class VocabSpec:
    sentences: list = field(default_factory=lambda: list(_SENTENCES))
    forced_phrases: list = field(default_factory=list)
    sentences_per_report: int = 3


def generate_synthetic_corpus(seed, n_patients, visit_histogram, vocab_spec=None, out_dir=None):
    """Write a deterministic metadata CSV + report CSV pair for desk-scale runs.

    ``visit_histogram`` maps visit-count -> sampling weight. Returns
    (metadata_csv_text, reports map) and writes files when ``out_dir`` given.
    """
    if n_patients < 1:
        raise CorpusError("n_patients must be >= 1")
    if not visit_histogram:
        raise CorpusError("empty visit histogram")
    spec = vocab_spec or VocabSpec()
    rng = random.Random(seed)
    counts = sorted(visit_histogram)
    weights = [visit_histogram[c] for c in counts]

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["patient_id", "study_id", "study_date", "study_time", "image_ids"])
    reports = {}
    for p in range(n_patients):
        pid = f"p{p:05d}"
        n_visits = rng.choices(counts, weights=weights)[0]
        base_day = rng.randrange(0, 300)
        for v in range(n_visits):
            sid = f"s{p:05d}_{v:02d}"
            date = datetime(2018, 1, 1).toordinal() + base_day + v * rng.randrange(1, 30)
            d = datetime.fromordinal(date)
            writer.writerow(
                [pid, sid, d.strftime("%Y%m%d"),
                 f"{rng.randrange(24):02d}{rng.randrange(60):02d}{rng.randrange(60):02d}",
                 f"img_{sid}_0|img_{sid}_1"]
            )
            body = list(spec.forced_phrases)
            body += rng.sample(spec.sentences, k=min(spec.sentences_per_report, len(spec.sentences)))
            reports[sid] = "EXAMINATION: chest .\nFINDINGS: " + " ".join(body) + "\nIMPRESSION: see above ."
    metadata_csv = buf.getvalue()

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "metadata.csv").write_text(metadata_csv)
        with open(out_dir / "reports.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["study_id", "report_text"])
            for sid in sorted(reports):
                w.writerow([sid, reports[sid]])
    return metadata_csv, reports


def write_samples_jsonl(samples, path):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def read_samples_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
