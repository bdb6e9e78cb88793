"""Dataset generation, the training loop, and the evaluation runs behind the
CLI subcommands. Everything is a pure function of (config, seed): worlds,
sample order, initialization, and batch order all derive from seeded
generators, so identical configs reproduce identical artifacts bit for bit.
"""

from __future__ import annotations

import math
import os

import numpy as np

from . import autodiff as ad
from . import baseline, checkpoint, evaluation, losses, model, synthdata
from .config import RunConfig
from .errors import ConfigError, DataError, NumericError

SPLITS = ("train", "val", "test")


# -- dataset generation -----------------------------------------------------------


def _split_kinds(n: int, semi_frac: float, rng):
    n_semi = int(round(n * semi_frac))
    kinds = ["positive"] * (n - n_semi) + ["semi-positive"] * n_semi
    return [kinds[i] for i in rng.permutation(n)]


def generate_datasets(cfg: RunConfig, log=None) -> str:
    """Build the train/val/test directories under data.dir.

    "same" split mode shares one world across splits with disjoint pose
    streams; "cross" gives every split its own world.
    """
    base = cfg["data.dir"]
    seed = cfg["seed"]
    sampler = cfg.sampler_config()
    counts = {
        "train": (cfg["data.train"], cfg["data.train_semi_frac"]),
        "val": (cfg["data.val"], cfg["data.val_semi_frac"]),
        "test": (cfg["data.test"], cfg["data.test_semi_frac"]),
    }
    shared_world = None
    if cfg["data.split_mode"] == "same":
        shared_world = synthdata.gen_world(
            seed, cfg["data.world_px"], cfg["data.meters_per_px"]
        )
    for split_idx, split in enumerate(SPLITS):
        world = shared_world
        if world is None:
            world = synthdata.gen_world(
                seed * 1000 + split_idx + 1,
                cfg["data.world_px"],
                cfg["data.meters_per_px"],
            )
        n, semi_frac = counts[split]
        rng = np.random.default_rng([seed, 71, split_idx])
        kinds = _split_kinds(n, semi_frac, rng)
        samples = [synthdata.sample_pair(world, rng, kind, sampler) for kind in kinds]
        synthdata.write_dataset(samples, os.path.join(base, split))
        if log:
            log(f"gen {split}: {n} samples ({kinds.count('semi-positive')} semi-positive)")
    with open(os.path.join(base, "meta.txt"), "w") as fh:
        fh.write(f"view = {cfg['data.view']}\n")
        fh.write(f"L = {cfg['model.L']}\n")
        fh.write(f"ground_h = {cfg['model.ground_h']}\n")
        fh.write(f"ground_w = {cfg['model.ground_w']}\n")
        fh.write(f"meters_per_px = {cfg['data.meters_per_px']!r}\n")
        fh.write(f"split_mode = {cfg['data.split_mode']}\n")
    return base


def load_split(cfg: RunConfig, split: str):
    path = os.path.join(cfg["data.dir"], split)
    if not os.path.isdir(path):
        raise DataError(f"dataset split missing: {path} (run `gen` first)")
    return synthdata.read_dataset(path)


def dataset_view(cfg: RunConfig) -> str:
    meta_path = os.path.join(cfg["data.dir"], "meta.txt")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            for line in fh:
                if line.startswith("view"):
                    return line.split("=")[1].strip()
    return cfg["data.view"]


# -- model plumbing ------------------------------------------------------------------


def build_params(cfg: RunConfig) -> dict:
    mc = cfg.model_config()
    if cfg["train.model"] == "dense":
        return model.init_localizer_params(mc)
    return baseline.init_cvr_params(mc)


def sample_loss(sample, params, cfg: RunConfig):
    """Total training loss for one sample under the configured model."""
    mc = cfg.model_config()
    lc = cfg.loss_config()
    if cfg["train.model"] == "dense":
        result = model.forward(sample.ground, sample.satellite, params, mc)
        target = losses.gaussian_target(sample.gt_pixel, mc.L, lc.sigma_px)
        return losses.total_loss(result.logits, result.match.m, target, lc)
    pred = baseline.cvr_forward(sample.ground, sample.satellite, params, mc)
    gt_norm = (sample.gt_pixel[0] / mc.L, sample.gt_pixel[1] / mc.L)
    return baseline.cvr_loss(pred, gt_norm)


def heatmap_fn(params, mc: model.ModelConfig):
    def fn(G, S):
        with ad.no_grad():
            return model.forward(G, S, params, mc).heatmap.h

    return fn


def logits_fn(params, mc: model.ModelConfig):
    def fn(G, S):
        with ad.no_grad():
            return model.forward(G, S, params, mc).logits.data

    return fn


def point_fn(params, mc: model.ModelConfig):
    def fn(G, S):
        with ad.no_grad():
            return baseline.cvr_forward(G, S, params, mc).predicted_pixel(mc.L)

    return fn


def _predict_errors_px(cfg: RunConfig, params, samples):
    """Per-sample pixel errors of the configured model's point prediction."""
    mc = cfg.model_config()
    errors = []
    if cfg["train.model"] == "dense":
        fn = heatmap_fn(params, mc)
        for s in samples:
            pred = model.predict_location(fn(s.ground, s.satellite))
            errors.append(math.dist(pred, s.gt_pixel))
    else:
        fn = point_fn(params, mc)
        for s in samples:
            errors.append(math.dist(fn(s.ground, s.satellite), s.gt_pixel))
    return errors


# -- training ---------------------------------------------------------------------------


def train_loop(cfg: RunConfig, run_dir: str, log=None) -> dict:
    """Adam training with per-epoch validation; keeps the checkpoint with the
    best validation median error.

    Returns paths and the per-epoch history. Zero epochs still writes the
    initial parameters as both `best` and `final`.
    """
    log = log or (lambda msg: None)
    os.makedirs(run_dir, exist_ok=True)
    train_samples = load_split(cfg, "train")
    val_samples = load_split(cfg, "val")
    if not train_samples:
        raise DataError("training split is empty")

    params = build_params(cfg)
    if cfg["train.model"] == "cvr":
        # Condition the regression head on the raw descriptor statistics of
        # the training set; without this the MLP sits on the descriptors'
        # large common offset and never gets traction.
        mc = cfg.model_config()
        subset = train_samples[: min(512, len(train_samples))]
        with ad.no_grad():
            descs = [
                baseline.descriptor_pair(s.ground, s.satellite, params, mc).data
                for s in subset
            ]
        baseline.calibrate_input_stats(params, descs)
    state = ad.AdamState.for_params(
        params,
        lr=cfg["optim.lr"],
        beta1=cfg["optim.beta1"],
        beta2=cfg["optim.beta2"],
        eps=cfg["optim.eps"],
    )
    batch_size = max(1, cfg["train.batch"])
    rng = np.random.default_rng([cfg["seed"], 17])

    best_path = os.path.join(run_dir, "best.cvml")
    final_path = os.path.join(run_dir, "final.cvml")
    checkpoint.save_params(best_path, params)

    with open(os.path.join(run_dir, "config.txt"), "w") as fh:
        fh.write(cfg.canonical_text())

    history = []
    best_median = math.inf
    log_lines = []
    for epoch in range(cfg["train.epochs"]):
        order = rng.permutation(len(train_samples))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), batch_size):
            batch = [train_samples[i] for i in order[start : start + batch_size]]
            batch_loss = 0.0
            for s in batch:
                loss = ad.mul(sample_loss(s, params, cfg), 1.0 / len(batch))
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} batch {n_batches}"
                    )
                ad.backward(loss)
                batch_loss += value
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            params, state = ad.adam_step(params, grads, state)
            epoch_loss += batch_loss
            n_batches += 1
        val_errors = _predict_errors_px(cfg, params, val_samples)
        val_median_px = float(np.median(val_errors)) if val_errors else math.inf
        marker = ""
        if val_median_px < best_median:
            best_median = val_median_px
            checkpoint.save_params(best_path, params)
            marker = " *"
        line = (
            f"epoch {epoch} train_loss {epoch_loss / max(1, n_batches):.6f} "
            f"val_median_px {val_median_px:.4f}{marker}"
        )
        log_lines.append(line)
        log(line)
        history.append((epoch, epoch_loss / max(1, n_batches), val_median_px))

    checkpoint.save_params(final_path, params)
    with open(os.path.join(run_dir, "train.log"), "w") as fh:
        fh.write("".join(line + "\n" for line in log_lines))
    return {
        "best": best_path,
        "final": final_path,
        "history": history,
        "best_val_median_px": best_median,
    }


def load_checkpoint_params(cfg: RunConfig, path) -> dict:
    """Load parameters, cross-checking shapes against the configured model."""
    loaded = checkpoint.load_params(path)
    expected = build_params(cfg)
    if set(loaded) != set(expected):
        raise ConfigError(
            f"checkpoint {path} does not match train.model={cfg['train.model']} "
            f"with the configured architecture (parameter names differ)"
        )
    for name, p in expected.items():
        if loaded[name].data.shape != p.data.shape:
            raise ConfigError(
                f"checkpoint {path}: parameter {name} has shape "
                f"{loaded[name].data.shape}, config expects {p.data.shape}"
            )
    return loaded


# -- evaluation runs -------------------------------------------------------------------


def estimate_cvr_sd(cfg: RunConfig, params) -> float:
    """Validation-set RMS pixel error of the baseline, unless overridden."""
    override = cfg["eval.cvr_sd_px"]
    if override > 0:
        return override
    val_samples = load_split(cfg, "val")
    errors = _predict_errors_px(cfg, params, val_samples)
    return baseline.estimate_sd(errors)


def eval_run(cfg: RunConfig, checkpoint_path, out_dir=None, log=None) -> dict:
    """Evaluate a checkpoint on the test split and write report files.

    Writes the model report plus the center-only reference; positives only by
    default, with the semi-positive pool included when configured.
    """
    log = log or (lambda msg: None)
    params = load_checkpoint_params(cfg, checkpoint_path)
    mc = cfg.model_config()
    test_samples = load_split(cfg, "test")
    if not test_samples:
        raise DataError("test split is empty")
    positives = [s for s in test_samples if s.kind == "positive"]
    pool = test_samples if cfg["eval.include_semi"] else positives
    if not pool:
        raise DataError("no test samples selected for evaluation")

    out_dir = out_dir or os.path.join(cfg.run_dir(), "eval")
    reports = {}
    if cfg["train.model"] == "dense":
        report = evaluation.evaluate_heatmap_model(
            heatmap_fn(params, mc), pool, cfg.rejection_fractions()
        )
        reports["dense"] = report
        evaluation.write_report(report, out_dir, "dense")
    else:
        sd_px = estimate_cvr_sd(cfg, params)
        report = evaluation.evaluate_point_model(point_fn(params, mc), pool, sd_px)
        reports["cvr"] = report
        evaluation.write_report(report, out_dir, "cvr")
        with open(os.path.join(out_dir, "cvr_sd.txt"), "w") as fh:
            fh.write(f"sd_px = {sd_px!r}\n")

    center = evaluation.center_only(pool, mc.L)
    reports["center"] = center
    evaluation.write_report(center, out_dir, "center")
    for name, rep in reports.items():
        log(
            f"{name}: mean {rep.mean_err_m:.3f} m, median {rep.median_err_m:.3f} m"
            + (
                f", prob_at_gt mean {rep.prob_at_gt_mean:.3e}"
                if rep.prob_at_gt_mean is not None
                else ""
            )
        )
    return reports


def orientation_run(cfg: RunConfig, checkpoint_path, out_dir=None, log=None) -> dict:
    """Orientation experiments: n-way classification of planted rotations and
    robustness to small heading noise. Panorama datasets shift ground-view
    columns; front-view datasets rotate the satellite patch."""
    log = log or (lambda msg: None)
    if cfg["train.model"] != "dense":
        raise ConfigError("orientation experiments need the dense model")
    params = load_checkpoint_params(cfg, checkpoint_path)
    mc = cfg.model_config()
    mode = "panorama" if dataset_view(cfg) == "panorama" else "satellite"
    test_samples = [s for s in load_split(cfg, "test") if s.kind == "positive"]
    n_samples = min(cfg["eval.orient_samples"], len(test_samples))
    if n_samples == 0:
        raise DataError("no positive test samples for the orientation run")
    n_rot = cfg["eval.orient_n"]
    rng = np.random.default_rng([cfg["seed"], 23])
    fn = logits_fn(params, mc)

    hits = 0
    confusion = np.zeros(n_rot, dtype=np.int64)
    for s in test_samples[:n_samples]:
        true_k = int(rng.integers(0, n_rot))
        angle = 2.0 * math.pi * true_k / n_rot
        if mode == "panorama":
            g = synthdata.shift_panorama(
                s.ground, int(round(true_k * s.ground.shape[2] / n_rot))
            )
            pred = evaluation.classify_orientation(fn, g, s.satellite, n_rot, mode)
        else:
            sat = synthdata.rotate_patch(s.satellite, -angle)
            pred = evaluation.classify_orientation(fn, s.ground, sat, n_rot, mode)
        confusion[(pred - true_k) % n_rot] += 1
        hits += int(pred == true_k)
    accuracy = hits / n_samples

    shifts_deg = (-20.0, -10.0, 0.0, 10.0, 20.0)
    perturb_medians = {}
    if mode == "panorama":
        per_shift = {d: [] for d in shifts_deg}
        for s in test_samples[:n_samples]:
            errs = evaluation.orientation_perturb(
                fn, s, [math.radians(d) for d in shifts_deg], view=mode
            )
            for d, e in zip(shifts_deg, errs):
                per_shift[d].append(e)
        perturb_medians = {d: float(np.median(v)) for d, v in per_shift.items()}

    out_dir = out_dir or os.path.join(cfg.run_dir(), "eval")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "orientation.txt"), "w") as fh:
        fh.write(f"mode = {mode}\n")
        fh.write(f"n_rot = {n_rot}\n")
        fh.write(f"samples = {n_samples}\n")
        fh.write(f"accuracy = {accuracy!r}\n")
        fh.write(
            "confusion_offsets = " + ",".join(str(int(c)) for c in confusion) + "\n"
        )
        for d, m in perturb_medians.items():
            fh.write(f"perturb_median_m[{d:+.0f}deg] = {m!r}\n")
    log(f"orientation accuracy {accuracy:.3f} over {n_rot} classes ({n_samples} samples)")
    return {
        "accuracy": accuracy,
        "confusion": confusion,
        "perturb_medians": perturb_medians,
        "mode": mode,
    }


# -- single-sample inference ----------------------------------------------------------


def write_pgm(path, values: np.ndarray) -> None:
    """8-bit binary PGM of min-max scaled values."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    img = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())


def infer(cfg: RunConfig, checkpoint_path, sample, out_dir, log=None) -> dict:
    """Run one sample through the dense model and export its heat map as a raw
    CVML tensor and a log-probability PGM."""
    log = log or (lambda msg: None)
    if cfg["train.model"] != "dense":
        raise ConfigError("infer exports heat maps; it needs the dense model")
    params = load_checkpoint_params(cfg, checkpoint_path)
    mc = cfg.model_config()
    with ad.no_grad():
        result = model.forward(sample.ground, sample.satellite, params, mc)
    h = result.heatmap.h
    os.makedirs(out_dir, exist_ok=True)
    raw_path = os.path.join(out_dir, "heatmap.cvml")
    pgm_path = os.path.join(out_dir, "heatmap.pgm")
    checkpoint.save_tensors(raw_path, {"heatmap": h})
    write_pgm(pgm_path, np.log(np.maximum(h.astype(np.float64), 1e-20)))
    pred = model.predict_location(result.heatmap)
    max_prob = float(h.max())
    log(f"pred_u={pred[0]!r} pred_v={pred[1]!r} max_prob={max_prob!r}")
    return {"pred": pred, "max_prob": max_prob, "raw": raw_path, "pgm": pgm_path}
