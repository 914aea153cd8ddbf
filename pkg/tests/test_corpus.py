import io
import random
from datetime import datetime, timedelta

import pytest

from longcxr import corpus
from longcxr.corpus import (
    CorpusError,
    assign_splits,
    build_longitudinal_pairs,
    chronological_sort,
    extract_findings,
    generate_synthetic_corpus,
    group_by_patient,
    parse_metadata,
)
from longcxr.evaluation import stub_labeler

from conftest import make_visit


class TestExtractFindings:
    def test_basic_slice(self):
        assert extract_findings("FINDINGS: clear lungs. IMPRESSION: normal.") == "clear lungs."

    def test_no_heading(self):
        assert extract_findings("IMPRESSION: normal.") is None

    def test_case_and_spacing_variants(self):
        assert extract_findings("findings : Heart size normal.\nIMPRESSION:") == "Heart size normal."

    def test_heading_pattern_fixture(self):
        # 20-report fixture checked against a direct heading-pattern oracle
        headings = ["FINDINGS:", "Findings:", "findings :", "FINDINGS  :", "FiNdInGs:"]
        tails = ["", " IMPRESSION: done.", "\nCOMPARISON: prior.", " NOTE TO FILE: x."]
        reports = []
        for i in range(20):
            if i % 5 == 4:
                reports.append(f"IMPRESSION: only impression {i}.")
            else:
                reports.append(f"history blah. {headings[i % 5]} body text {i}.{tails[i % 4]}")
        for i, report in enumerate(reports):
            got = extract_findings(report)
            if i % 5 == 4:
                assert got is None
            else:
                assert got == f"body text {i}."


class TestParseMetadata:
    HEADER = "patient_id,study_id,study_date,study_time,image_ids\n"

    def test_single_valid_row(self):
        meta = self.HEADER + "p1,s1,20180101,120000,a|b\n"
        records, errors = parse_metadata(io.StringIO(meta), {"s1": "FINDINGS: ok. IMPRESSION: x."})
        assert errors == []
        assert len(records) == 1
        assert records[0].findings_text == "ok."
        assert records[0].image_refs == ("a", "b")
        assert records[0].study_datetime == datetime(2018, 1, 1, 12, 0, 0)

    def test_missing_study_time_skipped(self):
        meta = self.HEADER + "p1,s1,20180101,,a\n"
        records, errors = parse_metadata(io.StringIO(meta), {"s1": "FINDINGS: ok."})
        assert records == []
        assert len(errors) == 1

    def test_findings_absent_count(self):
        rows, reports = [], {}
        for i in range(10):
            rows.append(f"p1,s{i},20180101,00000{i},img{i}")
            if i < 3:
                reports[f"s{i}"] = "IMPRESSION: no findings section."
            else:
                reports[f"s{i}"] = f"FINDINGS: text {i}. IMPRESSION: x."
        meta = self.HEADER + "\n".join(rows) + "\n"
        records, errors = parse_metadata(io.StringIO(meta), reports)
        assert errors == []
        assert len(records) == 10
        # oracle: direct scan of which reports lack the section
        expected_absent = sum(1 for r in reports.values() if "FINDINGS" not in r)
        assert sum(1 for r in records if r.findings_text is None) == expected_absent == 3

    def test_missing_report_skipped_with_warning(self):
        meta = self.HEADER + "p1,s1,20180101,120000,a\n"
        records, errors = parse_metadata(io.StringIO(meta), {})
        assert records == []
        assert "no report" in errors[0]

    def test_fractional_seconds(self):
        meta = self.HEADER + "p1,s1,20180101,120000.5000,a\n"
        records, errors = parse_metadata(io.StringIO(meta), {"s1": "FINDINGS: ok."})
        assert errors == []
        assert records[0].study_datetime.second == 0

    def test_missing_column_raises(self):
        with pytest.raises(CorpusError):
            parse_metadata(io.StringIO("patient_id,study_id\np1,s1\n"), {})


class TestChronologicalSort:
    def _visits(self, n, pid="p1"):
        base = datetime(2018, 1, 1)
        return [make_visit(pid, f"s{i}", base + timedelta(days=i)) for i in range(n)]

    def test_sorted_unchanged(self):
        visits = self._visits(4)
        assert chronological_sort(visits) == visits

    def test_singleton(self):
        visits = self._visits(1)
        assert chronological_sort(visits) == visits

    def test_reversed_matches_comparison_sort_oracle(self):
        visits = self._visits(5)
        shuffled = list(reversed(visits))
        oracle = sorted(shuffled, key=lambda v: (v.study_datetime, v.study_id))
        assert chronological_sort(shuffled) == oracle

    def test_tie_broken_by_study_id(self):
        when = datetime(2018, 1, 1, 12)
        a = make_visit("p1", "sB", when)
        b = make_visit("p1", "sA", when)
        assert chronological_sort([a, b]) == [b, a]

    def test_mixed_patients_rejected(self):
        visits = [make_visit("p1", "s1", datetime(2018, 1, 1)),
                  make_visit("p2", "s2", datetime(2018, 1, 2))]
        with pytest.raises(CorpusError):
            chronological_sort(visits)


class TestBuildPairs:
    def test_single_visit_no_samples(self):
        visits = {"p1": [make_visit("p1", "s1", datetime(2018, 1, 1))]}
        samples, stats = build_longitudinal_pairs(visits)
        assert samples == []
        assert stats.total_samples == 0

    def test_three_visits_two_adjacent_pairs(self):
        base = datetime(2018, 1, 1)
        vs = [make_visit("p1", f"s{i}", base + timedelta(days=i)) for i in range(3)]
        samples, _ = build_longitudinal_pairs({"p1": vs})
        # oracle: enumerate adjacent pairs
        expected = list(zip(vs, vs[1:]))
        assert [(s.prev, s.curr) for s in samples] == expected

    def test_findings_absent_visit_excluded(self):
        base = datetime(2018, 1, 1)
        vs = [make_visit("p1", "s0", base),
              make_visit("p1", "s1", base + timedelta(days=1), findings="IMPRESSION: none."),
              make_visit("p1", "s2", base + timedelta(days=2))]
        samples, _ = build_longitudinal_pairs({"p1": vs})
        assert [(s.prev.study_id, s.curr.study_id) for s in samples] == [("s0", "s2")]

    def test_pair_count_identity_random_corpora(self):
        rnd = random.Random(5)
        for _ in range(25):
            visits_by_patient = {}
            expected = 0
            for p in range(rnd.randrange(1, 8)):
                n = rnd.randrange(1, 6)
                base = datetime(2018, 1, 1)
                visits_by_patient[f"p{p}"] = [
                    make_visit(f"p{p}", f"s{p}_{i}", base + timedelta(days=i)) for i in range(n)]
                expected += max(0, n - 1)
            samples, stats = build_longitudinal_pairs(visits_by_patient)
            assert len(samples) == expected == stats.total_samples

    def test_order_correctness(self):
        rnd = random.Random(9)
        base = datetime(2018, 1, 1)
        vs = [make_visit("p1", f"s{i}", base + timedelta(hours=rnd.randrange(1000)))
              for i in range(6)]
        samples, _ = build_longitudinal_pairs({"p1": chronological_sort(vs)})
        ordered = chronological_sort(vs)
        for s in samples:
            assert s.prev.sort_key <= s.curr.sort_key
            between = [v for v in ordered if s.prev.sort_key < v.sort_key < s.curr.sort_key]
            assert between == []


class TestAssignSplits:
    def _samples(self):
        base = datetime(2018, 1, 1)
        out = []
        for pid in ("A", "B"):
            vs = [make_visit(pid, f"{pid}{i}", base + timedelta(days=i)) for i in range(2)]
            s, _ = build_longitudinal_pairs({pid: vs})
            out += s
        return out

    def test_manifest_applied(self):
        samples = assign_splits(self._samples(), {"A": "train", "B": "test"})
        assert {s.patient_id: s.split for s in samples} == {"A": "train", "B": "test"}

    def test_missing_patient_errors_with_ids(self):
        with pytest.raises(CorpusError, match="B"):
            assign_splits(self._samples(), {"A": "train"})

    def test_default_split(self):
        samples = assign_splits(self._samples(), {"A": "train"}, default_split="train")
        assert all(s.split == "train" for s in samples)

    def test_conflicting_manifest_rows_rejected(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("patient_id,split\nA,train\nA,test\n")
        with pytest.raises(CorpusError):
            corpus.read_split_manifest(path)

    def test_no_patient_leakage(self):
        base = datetime(2018, 1, 1)
        vs = [make_visit("A", f"s{i}", base + timedelta(days=i)) for i in range(4)]
        samples, _ = build_longitudinal_pairs({"A": vs})
        assign_splits(samples, {"A": "validation"})
        assert len({s.split for s in samples}) == 1


class TestSyntheticCorpus:
    def test_determinism(self, tmp_path):
        a = generate_synthetic_corpus(7, 10, {1: 0.5, 3: 0.5})
        b = generate_synthetic_corpus(7, 10, {1: 0.5, 3: 0.5})
        assert a == b

    def test_pair_count_matches_enumeration(self):
        meta, reports = generate_synthetic_corpus(3, 10, {1: 0.5, 3: 0.5})
        records, errors = parse_metadata(io.StringIO(meta), reports)
        assert not errors
        grouped = group_by_patient(records)
        samples, _ = build_longitudinal_pairs(grouped)
        expected = sum(max(0, len(v) - 1) for v in grouped.values())
        assert len(samples) == expected

    def test_forced_phrase_drives_labeler(self):
        spec = corpus.VocabSpec(forced_phrases=["no pneumothorax ."])
        _, reports = generate_synthetic_corpus(1, 5, {2: 1.0}, vocab_spec=spec)
        for text in reports.values():
            labels = stub_labeler(extract_findings(text))
            assert labels["Pneumothorax"] == "negative"

    def test_empty_histogram_rejected(self):
        with pytest.raises(CorpusError):
            generate_synthetic_corpus(1, 5, {})

    def test_files_consumed_by_parse(self, tmp_path):
        generate_synthetic_corpus(2, 6, {2: 1.0}, out_dir=tmp_path)
        reports = corpus.load_reports(tmp_path / "reports.csv")
        with open(tmp_path / "metadata.csv", newline="") as fh:
            records, errors = parse_metadata(fh, reports)
        assert not errors
        assert len(records) == 12
