"""Experiment protocols: data generation, training, evaluation, noise
robustness, ablation, and saliency export.

Each protocol is a plain function over an ExperimentConfig; the CLI is a
thin wrapper. Outputs are deterministic functions of the config, so
rerunning a command rewrites byte-identical CSVs; wall-clock timings go
to a timing.log sidecar that is never part of the comparable artifacts.
Every output directory receives a copy of the exact config used.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .autodiff import Adam
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, save_config, schedule_lr
from .exceptions import ConfigError, InvalidArgument, TrainingDiverged
from .geometry import (
    add_gaussian_noise,
    denormalize,
    farthest_point_sample,
    normalize_unit_sphere,
)
from .metrics import (
    MetricsRow,
    chamfer_distance,
    hausdorff_distance,
    mean_row,
    uniformity_sweep,
)
from .network import (
    build_variant,
    knn_batch,
    train_step,
    upsample_cloud,
    upsample_normalized,
)
from .pointio import read_csv, read_xyz, write_csv, write_ply, write_xyz
from .saliency import input_gradient, saliency_regression, spherical_saliency
from .synthdata import build_dataset, load_dataset, random_corpus

# config fields that pin the optimization trajectory; a checkpoint can
# only resume under a config agreeing on all of them (how long to run
# and where to write are free).
TRAJECTORY_FIELDS = (
    "num_shapes", "model_points", "num_patches", "ratio", "data_seed",
    "subsample", "segment_order", "test_fraction", "variant", "k_neighbors",
    "dec_hidden", "model_seed", "batch_size", "lr", "lr_decay",
    "lr_decay_every", "train_seed",
)


def _ordered_map(fn, items, workers=None):
    """Apply fn to items on a small thread pool, merging in input order."""
    items = list(items)
    if workers is None:
        workers = os.cpu_count() or 1
    workers = max(1, min(int(workers), len(items) or 1))
    if workers == 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def dataset_dir_for(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.out_dir, "dataset")


def _provenance(out_dir: str, cfg: ExperimentConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.ini"))


def cmd_gen_data(cfg: ExperimentConfig, out_dir=None) -> dict:
    """Generate the synthetic dataset the config describes.

    Writes the shapes, the dataset manifest, and a config copy under
    out_dir (default <cfg.out_dir>/dataset); returns the manifest dict.
    Reruns with one config produce byte-identical manifests.
    """
    out_dir = os.fspath(out_dir or dataset_dir_for(cfg))
    shapes = random_corpus(cfg.num_shapes, seed=cfg.data_seed)
    manifest = build_dataset(
        out_dir, shapes, model_points=cfg.model_points,
        num_patches=cfg.num_patches, ratio=cfg.ratio, seed=cfg.data_seed,
        subsample=cfg.subsample, segment_order=cfg.segment_order,
        test_fraction=cfg.test_fraction)
    _provenance(out_dir, cfg)
    return manifest


def _check_dataset_matches(cfg: ExperimentConfig, info: dict) -> None:
    for key in ("model_points", "num_patches", "ratio"):
        if info[key] != getattr(cfg, key):
            raise ConfigError(
                f"key {key!r}: config says {getattr(cfg, key)} but the "
                f"dataset was generated with {info[key]}")


def _training_arrays(shapes, cfg: ExperimentConfig):
    """Stack every train-split sample and precompute its KNN tables.

    Inputs are static across epochs, so the neighbor tables are built
    once here and sliced per batch.
    """
    samples = [s for shape in shapes if shape.split == "train"
               for s in shape.samples]
    if not samples:
        raise ConfigError("key 'test_fraction': dataset has no train split")
    local = np.stack([s.local_in for s in samples])
    seg = np.stack([s.global_in for s in samples])
    gt = np.stack([s.gt for s in samples])
    k = min(cfg.k_neighbors, local.shape[1] - 1)
    return local, seg, gt, knn_batch(local, k), knn_batch(seg, k)


@dataclass
class TrainResult:
    run_dir: str
    final_checkpoint: str
    log_rows: list          # [epoch, mean_loss, lr] string triples
    final_loss: float


def _trajectory(cfg: ExperimentConfig) -> dict:
    return {f: getattr(cfg, f) for f in TRAJECTORY_FIELDS}


def cmd_train(cfg: ExperimentConfig, dataset_dir=None, run_dir=None,
              resume=None) -> TrainResult:
    """Train one model variant on the dataset's train split.

    Writes train_log.csv (epoch, mean_loss, lr), a timing.log sidecar,
    a checkpoint every cfg.save_every epochs, and ckpt_final.npz. With
    resume=<checkpoint>, continues a seeded run: per-epoch shuffles are
    keyed by (train_seed, epoch), so the resumed trajectory and its log
    rows match an uninterrupted run exactly.
    """
    dataset_dir = os.fspath(dataset_dir or dataset_dir_for(cfg))
    run_dir = os.fspath(run_dir or os.path.join(
        cfg.out_dir, f"train_{cfg.variant}_seed{cfg.train_seed}"))
    info, shapes = load_dataset(dataset_dir)
    _check_dataset_matches(cfg, info)
    local, seg, gt, nbr_local, nbr_seg = _training_arrays(shapes, cfg)

    prior_rows: list = []
    if resume is None:
        start_epoch = 0
        model = build_variant(cfg.variant, seed=cfg.model_seed,
                              k_neighbors=cfg.k_neighbors, ratio=cfg.ratio,
                              dec_hidden=cfg.dec_hidden)
        optimizer = Adam(model.parameters(), lr=cfg.lr)
    else:
        model, optimizer, extra = load_checkpoint(resume, with_optimizer=True)
        stored = extra.get("trajectory", {})
        for key in TRAJECTORY_FIELDS:
            if stored.get(key) != getattr(cfg, key):
                raise ConfigError(
                    f"key {key!r}: checkpoint was trained with "
                    f"{stored.get(key)!r}, config says {getattr(cfg, key)!r}")
        start_epoch = int(extra["epochs_done"])
        log_path = os.path.join(run_dir, "train_log.csv")
        if os.path.exists(log_path):
            _, old = read_csv(log_path)
            prior_rows = [r for r in old if int(r[0]) < start_epoch]

    _provenance(run_dir, cfg)
    n = len(local)
    needs_seg = cfg.variant != "baseline"
    rows = list(prior_rows)
    timings = []
    last_checkpoint = resume
    extra = {"trajectory": _trajectory(cfg)}

    def flush_log():
        write_csv(os.path.join(run_dir, "train_log.csv"),
                  ["epoch", "mean_loss", "lr"], rows)

    def save(tag: str, epochs_done: int) -> str:
        path = os.path.join(run_dir, tag)
        save_checkpoint(path, model, optimizer,
                        extra={**extra, "epochs_done": epochs_done})
        return path

    final_loss = math.nan
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        optimizer.lr = schedule_lr(cfg, epoch)
        order = np.random.default_rng([cfg.train_seed, epoch]).permutation(n)
        losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            loss = train_step(
                model, optimizer, local[idx], seg[idx] if needs_seg else None,
                gt[idx], neighbors_local=nbr_local[idx],
                neighbors_global=nbr_seg[idx] if needs_seg else None)
            if not math.isfinite(loss):
                flush_log()
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}; last good "
                    f"checkpoint: {last_checkpoint or 'none'}")
            losses.append(loss)
        final_loss = float(np.mean(losses))
        rows.append([str(epoch), "%.12g" % final_loss,
                     "%.12g" % optimizer.lr])
        timings.append(time.perf_counter() - t0)
        if (epoch + 1) % cfg.save_every == 0:
            last_checkpoint = save(f"ckpt_epoch{epoch + 1:04d}.npz",
                                   epoch + 1)
    flush_log()
    final = save("ckpt_final.npz", cfg.epochs)
    with open(os.path.join(run_dir, "timing.log"), "w",
              encoding="ascii") as fh:
        for i, dt in enumerate(timings):
            fh.write(f"epoch {start_epoch + i}: {dt:.3f}s\n")
        fh.write(f"total: {sum(timings):.3f}s over {len(timings)} epochs\n")
    return TrainResult(run_dir=run_dir, final_checkpoint=final,
                       log_rows=rows, final_loss=final_loss)


def _eval_shape(model, shape, cfg: ExperimentConfig, beta: float = 0.0,
                shape_index: int = 0, with_uniformity: bool = True,
                ) -> MetricsRow:
    """Metrics for one dataset shape in its original (world) frame.

    Pipeline: FPS the stored unit-frame dense cloud down to the eval
    input size, optionally perturb it with seeded Gaussian noise, run
    the patch/segment upsampler, then map prediction and ground truth
    back to the world frame together so an offset-free model scores an
    exact zero. Uniformity is measured in the unit frame.
    """
    dense = shape.dense
    n_eval = cfg.eval_input_points
    if n_eval > len(dense):
        raise ConfigError(
            f"key 'eval_input_points': {n_eval} exceeds the dense cloud "
            f"size {len(dense)}")
    sparse = dense[farthest_point_sample(dense, n_eval)]
    if beta > 0:
        sparse = add_gaussian_noise(
            sparse, beta, seed=cfg.noise_seed * 100003 + shape_index)
    pred = upsample_normalized(model, sparse, num_patches=cfg.num_patches,
                               seed=cfg.data_seed,
                               segment_order=cfg.segment_order)
    pred_world = denormalize(pred, shape.centroid, shape.scale)
    gt_world = denormalize(dense, shape.centroid, shape.scale)
    cd = chamfer_distance(pred_world, gt_world)
    hd = hausdorff_distance(pred_world, gt_world)
    p2f = (None if shape.spec is None
           else float(np.mean(shape.spec.surface_distance(pred_world))))
    uvals = (uniformity_sweep(pred, cfg.uniformity_ps)
             if with_uniformity else ())
    return MetricsRow.from_raw(shape.shape_id, cd, hd, p2f, uvals)


def cmd_evaluate(cfg: ExperimentConfig, checkpoint, dataset_dir=None,
                 split: str = "test", out_dir=None, workers=None,
                 ) -> list[MetricsRow]:
    """Evaluate a checkpoint on one dataset split.

    Writes metrics.csv (one row per shape plus a mean row) and a config
    copy; returns the rows, mean last.
    """
    model, _, _ = load_checkpoint(checkpoint)
    dataset_dir = os.fspath(dataset_dir or dataset_dir_for(cfg))
    info, shapes = load_dataset(dataset_dir)
    _check_dataset_matches(cfg, info)
    chosen = [s for s in shapes if s.split == split]
    if not chosen:
        raise InvalidArgument(f"split: no shapes in split {split!r}")
    rows = _ordered_map(
        lambda pair: _eval_shape(model, pair[1], cfg, shape_index=pair[0]),
        enumerate(chosen), workers=workers)
    rows.append(mean_row(rows))
    out_dir = os.fspath(out_dir or os.path.join(
        cfg.out_dir, f"evaluate_{model.kind}"))
    _provenance(out_dir, cfg)
    write_csv(os.path.join(out_dir, "metrics.csv"),
              MetricsRow.header(cfg.uniformity_ps),
              [r.to_fields() for r in rows])
    return rows


def cmd_evaluate_files(cfg: ExperimentConfig, checkpoint, files,
                       out_dir=None) -> list[list[str]]:
    """Upsample standalone .xyz files and score the ones with targets.

    Each input <name>.xyz yields <name>_up.xyz in the output directory.
    A ground-truth sidecar <name>.gt.xyz enables a metric row; without
    one (or when the cloud cannot be tiled) the row records n/a fields
    and the run continues.
    """
    model, _, _ = load_checkpoint(checkpoint)
    out_dir = os.fspath(out_dir or os.path.join(
        cfg.out_dir, f"evaluate_files_{model.kind}"))
    _provenance(out_dir, cfg)
    header = MetricsRow.header(cfg.uniformity_ps)
    blank = ["n/a"] * (len(header) - 1)
    rows = []
    for path in files:
        path = os.fspath(path)
        stem = os.path.splitext(os.path.basename(path))[0]
        pts = read_xyz(path)
        try:
            pred = upsample_cloud(model, pts, num_patches=cfg.num_patches,
                                  seed=cfg.data_seed,
                                  segment_order=cfg.segment_order)
        except InvalidArgument:
            rows.append([stem] + blank)
            continue
        write_xyz(os.path.join(out_dir, f"{stem}_up.xyz"), pred)
        gt_path = os.path.splitext(path)[0] + ".gt.xyz"
        if not os.path.exists(gt_path):
            rows.append([stem] + blank)
            continue
        gt = read_xyz(gt_path)
        row = MetricsRow.from_raw(
            stem, chamfer_distance(pred, gt), hausdorff_distance(pred, gt),
            None, uniformity_sweep(normalize_unit_sphere(pred)[0],
                                   cfg.uniformity_ps))
        rows.append(row.to_fields())
    write_csv(os.path.join(out_dir, "metrics.csv"), header, rows)
    return rows


NOISE_HEADER = ["variant", "beta", "shape_id", "cd", "hd"]


def cmd_noise(cfg: ExperimentConfig, checkpoints, dataset_dir=None,
              split: str = "test", out_dir=None, workers=None,
              ) -> list[list[str]]:
    """Noise robustness sweep over cfg.noise_betas for each checkpoint.

    The perturbation is seeded per shape (not per variant), so every
    checkpoint sees the same noisy inputs; beta = 0 rows follow the
    exact evaluation path. Writes robustness.csv with per-shape rows
    and one mean row per (variant, beta); returns the rows.
    """
    dataset_dir = os.fspath(dataset_dir or dataset_dir_for(cfg))
    info, shapes = load_dataset(dataset_dir)
    _check_dataset_matches(cfg, info)
    chosen = [s for s in shapes if s.split == split]
    if not chosen:
        raise InvalidArgument(f"split: no shapes in split {split!r}")
    rows = []
    for ckpt in checkpoints:
        model, _, _ = load_checkpoint(ckpt)
        for beta in cfg.noise_betas:
            shape_rows = _ordered_map(
                lambda pair: _eval_shape(model, pair[1], cfg, beta=beta,
                                         shape_index=pair[0],
                                         with_uniformity=False),
                enumerate(chosen), workers=workers)
            shape_rows.append(mean_row(shape_rows))
            rows.extend(
                [model.kind, "%g" % beta, r.shape_id,
                 "%.9g" % r.cd, "%.9g" % r.hd] for r in shape_rows)
    out_dir = os.fspath(out_dir or os.path.join(cfg.out_dir, "noise"))
    _provenance(out_dir, cfg)
    write_csv(os.path.join(out_dir, "robustness.csv"), NOISE_HEADER, rows)
    return rows


def encoder_parameter_count(model) -> int:
    """Size of the feature-extraction side only (decoder excluded);
    a shared encoder is counted once."""
    return sum(buf.value.size for name, buf in model.named_parameters()
               if name.startswith("enc_"))


@dataclass
class AblationRow:
    variant: str
    seed: int
    epochs: int
    encoder_params: int
    total_params: int
    cd: float
    hd: float


ABLATION_HEADER = ["variant", "seed", "epochs", "encoder_params",
                   "total_params", "cd", "hd"]
ABLATION_VARIANTS = ("baseline", "relpu_minus", "relpu")


def cmd_ablate(cfg: ExperimentConfig, dataset_dir=None, seeds=(0, 1, 2),
               variants=ABLATION_VARIANTS, out_dir=None) -> list[AblationRow]:
    """Train and evaluate every variant under an identical budget.

    For each (variant, seed) the model and shuffle seeds are both set to
    the run seed, all other knobs come from cfg. Writes ablation.csv
    with one row per run plus a seed-mean row per variant; returns the
    per-run rows.
    """
    dataset_dir = os.fspath(dataset_dir or dataset_dir_for(cfg))
    out_dir = os.fspath(out_dir or os.path.join(cfg.out_dir, "ablate"))
    _provenance(out_dir, cfg)
    results = []
    for variant in variants:
        for seed in seeds:
            sub = replace(cfg, variant=variant, model_seed=seed,
                          train_seed=seed)
            run = cmd_train(sub, dataset_dir,
                            run_dir=os.path.join(out_dir,
                                                 f"{variant}_seed{seed}"))
            model, _, _ = load_checkpoint(run.final_checkpoint)
            mean = cmd_evaluate(
                sub, run.final_checkpoint, dataset_dir,
                out_dir=os.path.join(out_dir,
                                     f"evaluate_{variant}_seed{seed}"))[-1]
            results.append(AblationRow(
                variant=variant, seed=seed, epochs=cfg.epochs,
                encoder_params=encoder_parameter_count(model),
                total_params=model.num_parameters(),
                cd=mean.cd, hd=mean.hd))
    rows = []
    for variant in variants:
        group = [r for r in results if r.variant == variant]
        rows.extend([r.variant, str(r.seed), str(r.epochs),
                     str(r.encoder_params), str(r.total_params),
                     "%.9g" % r.cd, "%.9g" % r.hd] for r in group)
        rows.append([variant, "mean", str(cfg.epochs),
                     str(group[0].encoder_params),
                     str(group[0].total_params),
                     "%.9g" % float(np.mean([r.cd for r in group])),
                     "%.9g" % float(np.mean([r.hd for r in group]))])
    write_csv(os.path.join(out_dir, "ablation.csv"), ABLATION_HEADER, rows)
    return results


REGRESSION_HEADER = ["input", "alpha", "mode", "slope", "r_squared",
                     "ols_slope", "ols_intercept"]


def cmd_saliency(cfg: ExperimentConfig, checkpoint, dataset_dir=None,
                 shape_id=None, patch_index: int = 0, sample_file=None,
                 alpha: float = 0.0, out_dir=None) -> dict:
    """Per-point contribution maps for one sample, as colored PLY files.

    The sample is either a dataset patch (shape_id / patch_index, first
    test shape by default) or a standalone .xyz file; a file without a
    .gt.xyz sidecar is scored against its own replication, which makes
    an untrained pass-through model produce an all-zero map. Writes one
    PLY per input mode (patch always, segment when the model consumes
    one) plus regression.csv; returns {mode: (report, fit)}.
    """
    model, _, _ = load_checkpoint(checkpoint)
    if sample_file is not None:
        pts = read_xyz(sample_file)
        local_in, global_in = pts, pts
        gt_path = os.path.splitext(os.fspath(sample_file))[0] + ".gt.xyz"
        gt = (read_xyz(gt_path) if os.path.exists(gt_path)
              else np.repeat(pts, model.ratio, axis=0))
        tag = os.path.splitext(os.path.basename(os.fspath(sample_file)))[0]
    else:
        dataset_dir = os.fspath(dataset_dir or dataset_dir_for(cfg))
        _, shapes = load_dataset(dataset_dir)
        if shape_id is None:
            tests = [s for s in shapes if s.split == "test"]
            shape = tests[0] if tests else shapes[0]
        else:
            match = [s for s in shapes if s.shape_id == shape_id]
            if not match:
                raise InvalidArgument(f"shape_id: {shape_id!r} not in dataset")
            shape = match[0]
        if not 0 <= patch_index < len(shape.samples):
            raise InvalidArgument(
                f"patch_index: must be in [0, {len(shape.samples)}), "
                f"got {patch_index}")
        sample = shape.samples[patch_index]
        local_in, global_in, gt = sample.local_in, sample.global_in, sample.gt
        tag = f"{shape.shape_id}_p{patch_index}"
    needs_seg = model.kind != "baseline"
    grad_local, grad_seg = input_gradient(
        model, local_in, global_in if needs_seg else None, gt)
    out_dir = os.fspath(out_dir or os.path.join(
        cfg.out_dir, f"saliency_{model.kind}"))
    _provenance(out_dir, cfg)
    outputs = {}
    rows = []
    modes = [("patch", local_in, grad_local)]
    if grad_seg is not None:
        modes.append(("segment", global_in, grad_seg))
    for mode_name, pts, grads in modes:
        report = spherical_saliency(grads, pts, alpha=alpha)
        fit = saliency_regression(report)
        write_ply(os.path.join(out_dir, f"{tag}_{mode_name}.ply"), pts,
                  saliency=report.normalized)
        rows.append([mode_name, "%g" % alpha, report.mode,
                     "%.9g" % fit.slope, "%.9g" % fit.r_squared,
                     "%.9g" % fit.ols_slope, "%.9g" % fit.ols_intercept])
        outputs[mode_name] = (report, fit)
    write_csv(os.path.join(out_dir, f"{tag}_regression.csv"),
              REGRESSION_HEADER, rows)
    return outputs
