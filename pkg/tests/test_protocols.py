"""End-to-end protocol commands at desk-toy scale."""

import os
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from relpu import protocols as P
from relpu.checkpoint import load_checkpoint, save_checkpoint
from relpu.config import ExperimentConfig, load_config, validate_config
from relpu.exceptions import ConfigError, InvalidArgument, TrainingDiverged
from relpu.network import build_variant
from relpu.pointio import read_csv, read_ply, read_xyz, write_xyz
from relpu.synthdata import load_dataset


def tiny_config(out_dir, **overrides) -> ExperimentConfig:
    base = dict(num_shapes=5, model_points=128, num_patches=8, ratio=4,
                epochs=2, batch_size=8, save_every=1, eval_input_points=64,
                uniformity_ps=(0.04, 0.08), out_dir=str(out_dir))
    base.update(overrides)
    return validate_config(ExperimentConfig(**base))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    return tmp_path_factory.mktemp("proto")


@pytest.fixture(scope="module")
def cfg(workspace):
    return tiny_config(workspace / "exp")


@pytest.fixture(scope="module")
def dataset(cfg):
    P.cmd_gen_data(cfg)
    return P.dataset_dir_for(cfg)


@pytest.fixture(scope="module")
def trained(cfg, dataset):
    return P.cmd_train(cfg)


@pytest.fixture(scope="module")
def zero_ckpt(cfg, workspace):
    """Fresh relpu model: zero decoder output, so a pure pass-through."""
    path = str(workspace / "zero_relpu.npz")
    save_checkpoint(path, build_variant("relpu", seed=0, ratio=cfg.ratio))
    return path


class TestGenData:
    def test_layout_and_sample_count(self, cfg, dataset):
        info, shapes = load_dataset(dataset)
        assert len(shapes) == 5
        assert sum(len(s.samples) for s in shapes) == 5 * 8
        assert {s.split for s in shapes} == {"train", "test"}
        for s in shapes:
            assert s.dense.shape == (128, 3)
            assert s.samples[0].local_in.shape == (4, 3)
            assert s.samples[0].gt.shape == (16, 3)

    def test_config_copy_written(self, cfg, dataset):
        assert load_config(os.path.join(dataset, "config.ini")) == cfg

    def test_rerun_byte_identical(self, cfg, dataset, tmp_path):
        again = tmp_path / "dataset2"
        P.cmd_gen_data(cfg, out_dir=again)
        with open(os.path.join(dataset, "manifest"), "rb") as fh:
            first = fh.read()
        assert (again / "manifest").read_bytes() == first
        name = "shape_000/dense.xyz"
        with open(os.path.join(dataset, name), "rb") as fh:
            assert (again / name).read_bytes() == fh.read()


class TestTrain:
    def test_log_has_one_row_per_epoch(self, cfg, trained):
        header, rows = read_csv(os.path.join(trained.run_dir,
                                             "train_log.csv"))
        assert header == ["epoch", "mean_loss", "lr"]
        assert [r[0] for r in rows] == ["0", "1"]
        assert all(r[2] == "0.0005" for r in rows)
        assert all(float(r[1]) > 0 for r in rows)

    def test_checkpoint_cadence(self, trained):
        names = sorted(os.listdir(trained.run_dir))
        assert "ckpt_epoch0001.npz" in names
        assert "ckpt_epoch0002.npz" in names
        assert "ckpt_final.npz" in names
        assert "timing.log" in names
        assert "config.ini" in names

    def test_final_checkpoint_restores_model(self, cfg, trained):
        model, _, extra = load_checkpoint(trained.final_checkpoint)
        assert model.kind == cfg.variant
        assert extra["epochs_done"] == cfg.epochs

    def test_resume_matches_uninterrupted_run(self, cfg, dataset, workspace):
        full_dir = str(workspace / "full_run")
        half_dir = str(workspace / "half_run")
        full = P.cmd_train(cfg, dataset, run_dir=full_dir)
        half = P.cmd_train(replace(cfg, epochs=1), dataset, run_dir=half_dir)
        resumed = P.cmd_train(cfg, dataset, run_dir=half_dir,
                              resume=half.final_checkpoint)
        with open(os.path.join(full_dir, "train_log.csv"), "rb") as fh:
            full_log = fh.read()
        with open(os.path.join(half_dir, "train_log.csv"), "rb") as fh:
            assert fh.read() == full_log
        m_full, _, _ = load_checkpoint(full.final_checkpoint)
        m_res, _, _ = load_checkpoint(resumed.final_checkpoint)
        for (name, a), (_, b) in zip(m_full.named_parameters(),
                                     m_res.named_parameters()):
            assert_array_equal(a.value, b.value, err_msg=name)

    def test_resume_rejects_changed_trajectory(self, cfg, dataset, trained):
        with pytest.raises(ConfigError, match="lr"):
            P.cmd_train(replace(cfg, lr=1e-3), dataset,
                        resume=trained.final_checkpoint)

    @pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
    @pytest.mark.filterwarnings("ignore:invalid value:RuntimeWarning")
    def test_divergence_aborts(self, cfg, dataset, tmp_path):
        wild = replace(cfg, lr=1e200, epochs=3, out_dir=str(tmp_path))
        with pytest.raises(TrainingDiverged):
            P.cmd_train(wild, dataset)

    def test_dataset_mismatch_names_key(self, cfg, dataset, tmp_path):
        other = replace(cfg, ratio=2, out_dir=str(tmp_path))
        with pytest.raises(ConfigError, match="ratio"):
            P.cmd_train(other, dataset)


class TestEvaluate:
    def test_rows_and_header(self, cfg, trained, dataset):
        rows = P.cmd_evaluate(cfg, trained.final_checkpoint, dataset)
        assert [r.shape_id for r in rows] == ["shape_004", "mean"]
        assert all(np.isfinite(r.cd) and np.isfinite(r.hd) for r in rows)
        assert all(r.p2f is not None for r in rows)
        header, _ = read_csv(os.path.join(cfg.out_dir, "evaluate_relpu",
                                          "metrics.csv"))
        assert header == ["shape_id", "cd", "hd", "p2f", "u@4", "u@8"]

    def test_rerun_byte_identical(self, cfg, trained, dataset):
        out = os.path.join(cfg.out_dir, "evaluate_relpu", "metrics.csv")
        P.cmd_evaluate(cfg, trained.final_checkpoint, dataset)
        with open(out, "rb") as fh:
            first = fh.read()
        P.cmd_evaluate(cfg, trained.final_checkpoint, dataset)
        with open(out, "rb") as fh:
            assert fh.read() == first

    def test_train_split_evaluates_all_train_shapes(self, cfg, trained,
                                                    dataset, tmp_path):
        rows = P.cmd_evaluate(cfg, trained.final_checkpoint, dataset,
                              split="train", out_dir=str(tmp_path))
        assert len(rows) == 4 + 1

    def test_pass_through_model_scores_exact_zero(self, cfg, zero_ckpt,
                                                  dataset, tmp_path):
        # Full-density input through a zero-offset model reproduces the
        # target bit for bit, so cd and hd are exactly zero.
        self_pair = replace(cfg, eval_input_points=cfg.model_points,
                            out_dir=str(tmp_path))
        rows = P.cmd_evaluate(self_pair, zero_ckpt, dataset)
        for row in rows:
            assert row.cd == 0.0
            assert row.hd == 0.0

    def test_unknown_split_rejected(self, cfg, trained, dataset):
        with pytest.raises(InvalidArgument, match="split"):
            P.cmd_evaluate(cfg, trained.final_checkpoint, dataset,
                           split="validation")


class TestNoise:
    def test_beta_zero_equals_evaluate(self, cfg, trained, dataset):
        eval_rows = P.cmd_evaluate(cfg, trained.final_checkpoint, dataset)
        noise_rows = P.cmd_noise(cfg, [trained.final_checkpoint], dataset)
        eval_csv, _ = read_csv(os.path.join(cfg.out_dir, "evaluate_relpu",
                                            "metrics.csv"))
        by_beta = {}
        for variant, beta, shape_id, cd, hd in noise_rows:
            by_beta.setdefault(beta, []).append((shape_id, cd, hd))
        assert by_beta["0"] == [
            (r.shape_id, "%.9g" % r.cd, "%.9g" % r.hd) for r in eval_rows]

    def test_row_grid_complete(self, cfg, trained, dataset):
        rows = P.cmd_noise(cfg, [trained.final_checkpoint], dataset)
        assert len(rows) == len(cfg.noise_betas) * (1 + 1)
        assert {r[1] for r in rows} == {"0", "0.01", "0.02"}

    def test_noise_is_shared_across_variants(self, cfg, dataset, workspace,
                                             tmp_path):
        # Two pass-through models of different kinds must see identical
        # perturbed inputs, hence produce identical metric fields.
        base_ckpt = str(workspace / "zero_base.npz")
        save_checkpoint(base_ckpt,
                        build_variant("baseline", seed=0, ratio=cfg.ratio))
        relpu_ckpt = str(workspace / "zero_relpu2.npz")
        save_checkpoint(relpu_ckpt,
                        build_variant("relpu", seed=0, ratio=cfg.ratio))
        rows = P.cmd_noise(replace(cfg, out_dir=str(tmp_path)),
                           [base_ckpt, relpu_ckpt], dataset)
        half = len(rows) // 2
        stripped = [r[1:] for r in rows]
        assert stripped[:half] == stripped[half:]


class TestEvaluateFiles:
    def test_missing_gt_yields_na_row_and_continues(self, cfg, trained,
                                                    dataset, tmp_path):
        rng = np.random.default_rng(0)
        lone = tmp_path / "lone.xyz"
        write_xyz(lone, rng.random((64, 3)))
        paired = tmp_path / "paired.xyz"
        pts = rng.random((64, 3))
        write_xyz(paired, pts)
        write_xyz(tmp_path / "paired.gt.xyz", np.repeat(pts, 4, axis=0))
        out = tmp_path / "out"
        rows = P.cmd_evaluate_files(cfg, trained.final_checkpoint,
                                    [lone, paired], out_dir=str(out))
        assert rows[0] == ["lone"] + ["n/a"] * 5
        assert rows[1][0] == "paired"
        assert float(rows[1][1]) >= 0
        assert (out / "lone_up.xyz").exists()
        assert len(read_xyz(out / "paired_up.xyz")) == 4 * 64

    def test_untileable_cloud_recorded_not_fatal(self, cfg, trained,
                                                 tmp_path):
        odd = tmp_path / "odd.xyz"
        write_xyz(odd, np.random.default_rng(1).random((65, 3)))
        rows = P.cmd_evaluate_files(cfg, trained.final_checkpoint, [odd],
                                    out_dir=str(tmp_path / "out"))
        assert rows == [["odd"] + ["n/a"] * 5]


class TestAblate:
    def test_three_variants_identical_budget(self, cfg, dataset, tmp_path):
        quick = replace(cfg, epochs=1, out_dir=str(tmp_path))
        results = P.cmd_ablate(quick, dataset, seeds=(0,))
        assert [r.variant for r in results] == ["baseline", "relpu_minus",
                                                "relpu"]
        assert {r.epochs for r in results} == {1}
        by_kind = {r.variant: r for r in results}
        assert (by_kind["relpu"].encoder_params
                == 2 * by_kind["relpu_minus"].encoder_params)
        assert (by_kind["baseline"].encoder_params
                == by_kind["relpu_minus"].encoder_params)
        header, rows = read_csv(os.path.join(quick.out_dir, "ablate",
                                             "ablation.csv"))
        assert header == P.ABLATION_HEADER
        assert [r[1] for r in rows] == ["0", "mean"] * 3


class TestSaliency:
    def test_pass_through_model_emits_zero_map(self, cfg, zero_ckpt,
                                               tmp_path):
        cloud = tmp_path / "cloud.xyz"
        write_xyz(cloud, np.random.default_rng(3).random((32, 3)))
        out = tmp_path / "sal"
        reports = P.cmd_saliency(cfg, zero_ckpt, sample_file=cloud,
                                 out_dir=str(out))
        # no gt sidecar: target is the cloud's own replication, which a
        # pass-through model reconstructs exactly
        for report, fit in reports.values():
            assert_array_equal(report.scores, 0.0)
            assert fit.slope == 0.0
        pts, scores = read_ply(out / "cloud_patch.ply")
        assert len(pts) == 32
        assert_array_equal(scores, np.zeros(32))

    def test_dataset_sample_modes_per_variant(self, cfg, trained, dataset,
                                              workspace, tmp_path):
        reports = P.cmd_saliency(cfg, trained.final_checkpoint, dataset,
                                 out_dir=str(tmp_path / "relpu"))
        assert set(reports) == {"patch", "segment"}
        base_ckpt = str(workspace / "zero_base_sal.npz")
        save_checkpoint(base_ckpt,
                        build_variant("baseline", seed=0, ratio=cfg.ratio))
        reports = P.cmd_saliency(cfg, base_ckpt, dataset,
                                 out_dir=str(tmp_path / "base"))
        assert set(reports) == {"patch"}
        header, rows = read_csv(tmp_path / "base"
                                / "shape_004_p0_regression.csv")
        assert header == P.REGRESSION_HEADER
        assert len(rows) == 1

    def test_bad_selectors_rejected(self, cfg, trained, dataset):
        with pytest.raises(InvalidArgument, match="shape_id"):
            P.cmd_saliency(cfg, trained.final_checkpoint, dataset,
                           shape_id="shape_999")
        with pytest.raises(InvalidArgument, match="patch_index"):
            P.cmd_saliency(cfg, trained.final_checkpoint, dataset,
                           patch_index=99)
