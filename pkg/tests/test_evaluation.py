import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ppgkd.backbones import BackboneModel, build_backbone, feature_extract
from ppgkd.errors import ConfigError, DataError, InsufficientDataError
from ppgkd.evaluation import (
    classification_report,
    compute_eer,
    embed,
    enroll,
    eval_sample_wise,
    eval_subject_wise,
    export_embeddings,
    parse_report_metrics,
    read_embeddings,
)
from ppgkd.signals import PairedSegment


def _segments(n_subjects, n_per, seed=0, length=300):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_subjects):
        base = rng.normal(size=length)
        for j in range(n_per):
            out.append(
                PairedSegment(f"S{i:02d}", rng.normal(size=length), base + 0.1 * rng.normal(size=length), j)
            )
    return out


class _OneHotModel(BackboneModel):
    def extract(self, x):
        k = x.reshape(len(x), -1)[:, 0].round().long()
        return torch.eye(self.feature_dim)[k]


@pytest.fixture(scope="module")
def student():
    return build_backbone("ResNet34_1D", 4, tiny=True, seed=0, modality="PPG")


class TestClassificationReport:
    def test_perfect(self):
        rep = classification_report([0, 1, 2, 2], [0, 1, 2, 2])
        assert rep.oa == 1.0 and rep.f1_macro == 1.0

    def test_two_class_hand_computed(self):
        # class 0: TP=1, FP=1, FN=0; class 1: TP=0, FP=0, FN=1
        rep = classification_report([0, 1], [0, 0])
        assert rep.oa == 0.5
        f1_class0 = 2 * 1 / (2 * 1 + 1 + 0)
        assert rep.f1_macro == pytest.approx((f1_class0 + 0.0) / 2, abs=1e-12)

    def test_breakdown_reproduces_oa(self):
        rng = np.random.default_rng(0)
        y = rng.integers(0, 5, 200)
        p = np.where(rng.random(200) < 0.7, y, rng.integers(0, 5, 200))
        rep = classification_report(y, p)
        correct = sum(r["correct"] for r in rep.breakdown.values())
        total = sum(r["total"] for r in rep.breakdown.values())
        assert abs(correct / total - rep.oa) <= 1e-9
        assert rep.oa == float(np.mean(y == p))

    def test_empty(self):
        with pytest.raises(ConfigError):
            classification_report([], [])


class TestSampleWise:
    def test_report_keys_and_unknown_label(self, student):
        segs = _segments(4, 3)
        label_map = {f"S{i:02d}": i for i in range(4)}
        rep = eval_sample_wise(student, segs, label_map)
        assert list(rep.metrics()) == ["mode", "oa", "f1"]
        assert 0.0 <= rep.oa <= 1.0
        with pytest.raises(DataError):
            eval_sample_wise(student, segs, {"S00": 0})

    def test_report_text_round_trip(self, student, tmp_path):
        segs = _segments(4, 3)
        rep = eval_sample_wise(student, segs, {f"S{i:02d}": i for i in range(4)})
        rep.write(tmp_path / "r.txt")
        parsed = parse_report_metrics((tmp_path / "r.txt").read_text())
        assert set(parsed) == {"mode", "oa", "f1"}
        assert float(parsed["oa"]) == rep.oa

    def test_rejects_non_model(self):
        with pytest.raises(ConfigError):
            eval_sample_wise(object(), [], {})


class TestEnroll:
    def test_one_shot_prototype_is_normalized_embedding(self, student):
        segs = _segments(3, 4)
        g = enroll(student, segs, 1)
        first = [s for s in segs if s.segment_index == 0]
        e = torch.cat([embed(student, [s]) for s in first]).double()
        torch.testing.assert_close(g.prototypes, e / e.norm(dim=1, keepdim=True), atol=1e-12, rtol=0)

    def test_unit_norm(self, student):
        g = enroll(student, _segments(3, 8), 5)
        assert torch.all((g.prototypes.norm(dim=1) - 1).abs() <= 1e-9)

    def test_full_scale_arithmetic(self, student):
        segs = _segments(69, 40, length=300)
        g = enroll(student, segs, 10)
        assert g.prototypes.shape[0] == 69
        assert len(g.probes) == 69 * 30
        assert all(len(v) == 10 for v in g.enrolled.values())
        enrolled_keys = {(s.subject_id, s.segment_index) for v in g.enrolled.values() for s in v}
        assert not enrolled_keys & {(s.subject_id, s.segment_index) for s in g.probes}

    def test_insufficient_names_subject(self, student):
        segs = _segments(2, 5) + [PairedSegment("S99", np.zeros(300), np.zeros(300), 0)]
        with pytest.raises(InsufficientDataError, match="S99"):
            enroll(student, segs, 1)

    def test_first_segments_in_time_order(self, student):
        segs = list(reversed(_segments(2, 4)))
        g = enroll(student, segs, 2)
        assert [s.segment_index for s in g.enrolled["S00"]] == [0, 1]


class TestEER:
    def test_disjoint(self):
        assert compute_eer([0.8, 0.9], [0.1, 0.2]) == 0.0

    def test_identical(self):
        rng = np.random.default_rng(1)
        s = rng.random(50)
        assert abs(compute_eer(s, s) - 0.5) <= 1 / 50

    def test_two_by_two_example(self):
        # with accept iff score >= t, |FAR - FRR| is zero at t = 0.6 (FAR = FRR = 1/2)
        g, i = [0.9, 0.4], [0.6, 0.1]
        assert compute_eer(g, i) == oracles.eer_sweep(g, i) == 0.5

    def test_matches_oracle_on_random_sets(self):
        rng = np.random.default_rng(7)
        for _ in range(150):
            g = rng.random(rng.integers(1, 60)).round(rng.integers(1, 4)).tolist()
            i = rng.random(rng.integers(1, 60)).round(rng.integers(1, 4)).tolist()
            assert compute_eer(g, i) == oracles.eer_sweep(g, i)

    @settings(max_examples=100, deadline=None)
    @given(
        g=st.lists(st.floats(-1, 1), min_size=1, max_size=30),
        i=st.lists(st.floats(-1, 1), min_size=1, max_size=30),
    )
    def test_fully_separating_shift_gives_zero(self, g, i):
        c = 1.5
        assert compute_eer([x + c for x in g], [x - c for x in i]) == 0.0

    def test_small_shift_can_raise_sweep_eer(self):
        # the discrete argmin-|FAR-FRR| rule is not monotone under partial shifts
        g, i = [0.0, 0.0, 1.0, 1e-20], [0.0, 1.0]
        shifted = ([x + 0.25 for x in g], [x - 0.25 for x in i])
        assert compute_eer(g, i) == oracles.eer_sweep(g, i) == 0.5
        assert compute_eer(*shifted) == oracles.eer_sweep(*shifted) == 0.625

    def test_empty(self):
        with pytest.raises(ConfigError):
            compute_eer([], [0.1])


class TestSubjectWise:
    def test_separable_embeddings(self):
        # each PPG window is the constant k; the model maps it to one-hot code k
        segs = [PairedSegment(f"S{k}", np.zeros(300), np.full(300, float(k)), j) for k in range(4) for j in range(5)]
        model = _OneHotModel("ResNet34_1D", 4, tiny=True)
        rep = eval_subject_wise(model, enroll(model, segs, 1))
        assert rep.oa == 1.0 and rep.eer == 0.0

    def test_probe_permutation_invariance(self, student):
        segs = _segments(5, 6, seed=3)
        g = enroll(student, segs, 2)
        a = eval_subject_wise(student, g)
        b = eval_subject_wise(student, g, list(reversed(g.probes)))
        assert a.to_text() == b.to_text()

    def test_report_keys(self, student):
        rep = eval_subject_wise(student, enroll(student, _segments(3, 4), 1))
        assert list(rep.metrics()) == ["mode", "oa", "eer", "n_shot"]
        correct = sum(r["correct"] for r in rep.breakdown.values())
        total = sum(r["total"] for r in rep.breakdown.values())
        assert abs(correct / total - rep.oa) <= 1e-9
        assert 0.0 <= rep.eer <= 1.0

    def test_unenrolled_probe(self, student):
        g = enroll(student, _segments(3, 4), 1)
        with pytest.raises(DataError):
            eval_subject_wise(student, g, _segments(4, 2))


class TestPurity:
    def test_ecg_channel_never_read(self, student):
        segs = _segments(3, 4)
        poisoned = [PairedSegment(s.subject_id, np.full(300, np.nan), s.ppg, s.segment_index) for s in segs]
        label_map = {f"S{i:02d}": i for i in range(3)}
        assert eval_sample_wise(student, segs, label_map).to_text() == eval_sample_wise(
            student, poisoned, label_map
        ).to_text()
        assert eval_subject_wise(student, enroll(student, segs, 1)).to_text() == eval_subject_wise(
            student, enroll(student, poisoned, 1)
        ).to_text()


class TestExport:
    def test_rows_and_round_trip(self, student, tmp_path):
        segs = _segments(1, 3)
        path = export_embeddings(student, segs, tmp_path / "e.csv", model_tag="student")
        lines = path.read_text().splitlines()
        assert len(lines) == 4
        assert lines[0].split(",")[:4] == ["model", "subject_id", "segment_index", "e0"]
        rows, values = read_embeddings(path)
        assert rows == [("student", "S00", j) for j in range(3)]
        expected = feature_extract(student, np.stack([s.ppg for s in segs])).values.numpy()
        np.testing.assert_allclose(values, expected, atol=1e-6, rtol=0)

    def test_teacher_and_student_share_schema(self, tmp_path):
        segs = _segments(1, 2)
        t = build_backbone("ResNet34_1D", 4, tiny=True, seed=1, modality="ECG")
        s = build_backbone("ResNet34_1D", 4, tiny=True, seed=2, modality="PPG")
        a = export_embeddings(t, segs, tmp_path / "t.csv", "teacher").read_text().splitlines()
        b = export_embeddings(s, segs, tmp_path / "s.csv", "student").read_text().splitlines()
        assert a[0] == b[0]
        assert a[1].startswith("teacher,") and b[1].startswith("student,")

    def test_io_failure(self, student, tmp_path):
        with pytest.raises(DataError):
            export_embeddings(student, _segments(1, 1), tmp_path / "missing" / "e.csv")
