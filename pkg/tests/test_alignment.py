import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ppgkd.alignment import (
    ALIGN_DIM,
    AlignmentConfig,
    AlignmentHeads,
    Side,
    fit_alignment,
    load_heads,
    project,
    save_heads,
    train_alignment,
)
from ppgkd.backbones import Arch, EmbeddingBatch, build_backbone, inference_mode, state_hash
from ppgkd.errors import ConfigError, ShapeError
from ppgkd.signals import SyntheticConfig, build_split, generate_synthetic, pair_records
from ppgkd.training import TrainConfig, train_teacher


@pytest.fixture(scope="module")
def setup():
    pairs = pair_records(generate_synthetic(SyntheticConfig(n_subjects=20, duration_s=480, seed=11)))
    split = build_split(pairs, "sample-wise")
    teacher = train_teacher(split, TrainConfig(teacher_epochs=3, seed=11))
    cfg = AlignmentConfig(epochs=5, seed=11)
    state = fit_alignment(split.train, teacher, cfg)
    return split, teacher, cfg, state


class TestHeads:
    @pytest.mark.parametrize("arch", list(Arch))
    def test_output_dim_is_256(self, arch):
        model = build_backbone(arch, 4, tiny=False, seed=0)
        heads = AlignmentHeads(model.feature_dim, model.feature_dim)
        f = torch.randn(3, model.feature_dim)
        for side in Side:
            assert project(heads, f, side).values.shape == (3, ALIGN_DIM)

    def test_shufflenet_student_960(self):
        heads = AlignmentHeads(512, 960)
        out = project(heads, EmbeddingBatch(torch.randn(2, 960), torch.tensor([4, 5])), Side.STUDENT)
        assert out.values.shape == (2, 256)
        assert out.subject_labels.tolist() == [4, 5]

    def test_zero_input_zero_bias(self):
        heads = AlignmentHeads(8, 8)
        with torch.no_grad():
            heads.P_t.bias.zero_()
        assert torch.count_nonzero(project(heads, torch.zeros(1, 8), "teacher").values) == 0

    def test_affine(self):
        heads = AlignmentHeads(16, 16).double()
        x, y = torch.randn(4, 16, dtype=torch.float64), torch.randn(4, 16, dtype=torch.float64)
        a = 0.3
        lhs = project(heads, a * x + (1 - a) * y, "student").values
        rhs = a * project(heads, x, "student").values + (1 - a) * project(heads, y, "student").values
        torch.testing.assert_close(lhs, rhs, atol=1e-6, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            project(AlignmentHeads(8, 8), torch.zeros(2, 9), "teacher")

    def test_frozen_heads_have_no_grad(self):
        heads = AlignmentHeads(8, 8).freeze()
        assert heads.frozen
        assert not any(p.requires_grad for p in heads.parameters())

    def test_round_trip(self, tmp_path):
        heads = AlignmentHeads(8, 12)
        back, meta = load_heads(save_heads(tmp_path / "h.safetensors", heads, {"seed": 1}))
        assert state_hash(back) == state_hash(heads)
        assert back.frozen and meta["seed"] == 1


class TestTraining:
    def test_heldout_infonce_decreases(self, setup):
        _, _, _, state = setup
        assert len(state.heldout_history) == 6
        assert state.heldout_history[-1] < state.heldout_history[0]

    def test_loss_history_append_only(self, setup):
        _, _, cfg, state = setup
        assert len(state.loss_history) == cfg.epochs == state.epoch

    def test_teacher_untouched(self, setup):
        split, teacher, cfg, _ = setup
        before = state_hash(teacher)
        train_alignment(split.train[:200], teacher, AlignmentConfig(epochs=1, seed=1))
        assert state_hash(teacher) == before

    def test_encoders_match_teacher_arch(self, setup):
        _, teacher, _, state = setup
        assert state.E_s.arch is teacher.arch and state.E_t.arch is teacher.arch

    def test_double_run_identical(self, setup):
        split, teacher, _, _ = setup
        cfg = AlignmentConfig(epochs=1, seed=3)
        a = train_alignment(split.train[:300], teacher, cfg)
        b = train_alignment(split.train[:300], teacher, cfg)
        assert state_hash(a) == state_hash(b)

    def test_matched_pairs_closer_than_mismatched(self, setup):
        split, _, _, state = setup
        test = split.test
        ecg = torch.from_numpy(np.stack([s.ecg for s in test])).float()
        ppg = torch.from_numpy(np.stack([s.ppg for s in test])).float()
        with inference_mode(state.E_t), inference_mode(state.E_s):
            z_t, z_s = state.heads(state.E_t.extract(ecg), state.E_s.extract(ppg))
        sim = F.normalize(z_t, dim=1) @ F.normalize(z_s, dim=1).T
        n = sim.shape[0]
        matched = sim.diagonal().mean()
        mismatched = (sim.sum() - sim.diagonal().sum()) / (n * n - n)
        assert matched > mismatched

    def test_batch_size_one_rejected(self, setup):
        split, teacher, _, _ = setup
        with pytest.raises(ConfigError):
            fit_alignment(split.train, teacher, AlignmentConfig(batch_size=1))
