"""Command-line entry point: gen-data, train, eval, report.

Every command takes a TOML config (defaults apply when omitted) plus an
output directory; selected flags override config values.  All outputs are
deterministic functions of the config, and every file a command writes is
recorded in <out>/manifest.json with its sha256.  SMS_THREADS caps the
per-sample parallelism during eval (default 1); results are reduced in a
fixed order either way.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io
from .autodiff import Tensor
from .baseline import DiagonalGMM, baseline_heatmap, fit_gmm, whole_image_norms
from .config import ExperimentConfig
from .features import ContextEncoder, PatchGrid, build_dataset, patch_score_norms
from .flow import FlowModel, train_flow
from .inference import evaluate_sample, heatmap_for_storage, render_heatmap_pgm, spatial_heatmap_from_norms
from .optim import AdamState
from .phantom import LesionSpec, PhantomConfig, make_split
from .schedule import NoiseSchedule, calibrate_sigma_max, calibrate_sigma_min
from .scorenet import ConvScoreNet, TrainConfig, TrainState, train_score


def phantom_config(cfg: ExperimentConfig):
    scale = cfg.image_size / 32.0
    return PhantomConfig(
        size=cfg.image_size,
        background=cfg.background,
        ellipse_axes=(13.0 * scale, 11.0 * scale),
        tissue=cfg.tissue,
        texture_amplitude=cfg.texture_amplitude,
        blob_radius=max(1.5, 2.5 * scale),
        blob_row=13.0 * scale,
        blob_col=10.5 * scale,
        blob_min=cfg.blob_min,
        blob_max=cfg.blob_max,
    )


def lesion_spec(cfg: ExperimentConfig):
    return LesionSpec(
        load=cfg.lesion_load,
        radius_min=cfg.lesion_radius_min,
        radius_max=cfg.lesion_radius_max,
        factor=cfg.lesion_factor,
    )


# -- data ------------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, out: Path):
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    bundle = make_split(cfg.n_train, cfg.n_val, cfg.n_test, phantom_config(cfg), lesion_spec(cfg), seed=cfg.seed)
    files, roles = [], {}

    def emit(rel, writer, role):
        writer(out / rel)
        files.append(rel)
        roles[rel] = role

    for role, images, masks in (
        ("train", bundle.train, bundle.train_fg),
        ("val", bundle.val, bundle.val_fg),
        ("test", bundle.test, bundle.test_fg),
    ):
        for i in range(len(images)):
            emit(f"data/{role}_{i:03d}.dtf", lambda p, a=images[i]: io.write_dtf(p, a), f"{role}-image")
            emit(f"data/{role}_fg_{i:03d}.pgm", lambda p, m=masks[i]: io.write_pgm(p, m), f"{role}-foreground")
    for i in range(cfg.n_test):
        emit(f"data/test_lesioned_{i:03d}.dtf", lambda p, a=bundle.test_lesioned[i]: io.write_dtf(p, a), "test-lesioned")
        emit(f"data/test_gt_{i:03d}.pgm", lambda p, m=bundle.test_gt[i]: io.write_pgm(p, m), "test-lesion-gt")

    index = {
        "image_size": cfg.image_size,
        "n_train": cfg.n_train,
        "n_val": cfg.n_val,
        "n_test": cfg.n_test,
        "seeds": bundle.seeds,
    }
    io.write_json(data_dir / "index.json", index)
    files.append("data/index.json")
    roles["data/index.json"] = "data-index"
    io.write_json(out / "config_used.json", cfg.to_dict())
    files.append("config_used.json")
    io.update_manifest(out, files, roles)
    print(f"gen-data: wrote {cfg.n_train}+{cfg.n_val}+{cfg.n_test} phantoms to {data_dir}")
    return 0


def _load_split(out: Path, role, count, with_gt=False):
    images = np.stack([io.read_dtf(out / "data" / f"{role}_{i:03d}.dtf") for i in range(count)])
    fg = np.stack([io.read_pgm(out / "data" / f"{role}_fg_{i:03d}.pgm") > 0 for i in range(count)])
    if not with_gt:
        return images, fg
    lesioned = np.stack([io.read_dtf(out / "data" / f"test_lesioned_{i:03d}.dtf") for i in range(count)])
    gt = np.stack([io.read_pgm(out / "data" / f"test_gt_{i:03d}.pgm") > 0 for i in range(count)])
    return images, fg, lesioned, gt


def _data_index(out: Path):
    path = out / "data" / "index.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset at {out}/data; run gen-data first")
    return io.read_json(path)


# -- training ---------------------------------------------------------------------


def _save_snapshot(ck: Path, stage, arrays, state: TrainState):
    meta = {"iteration": state.iteration, "rng_state": state.rng_state, "losses": state.losses}
    blobs = dict(arrays)
    blobs.update({f"adam.{k}": v for k, v in state.adam.to_arrays().items() if k != "step"})
    meta["adam_step"] = state.adam.step
    io.save_checkpoint(ck, f"{stage}_snapshot", blobs, meta)


def _load_snapshot(ck: Path, stage):
    arrays, meta = io.load_checkpoint(ck, f"{stage}_snapshot")
    adam = AdamState(step=int(meta["adam_step"]))
    model_arrays = {}
    for key, arr in arrays.items():
        if key.startswith("adam.m."):
            adam.m[key[len("adam.m.") :]] = arr
        elif key.startswith("adam.v."):
            adam.v[key[len("adam.v.") :]] = arr
        else:
            model_arrays[key] = arr
    rng_state = meta["rng_state"]
    if rng_state is not None:  # JSON turns the big state ints into ints already
        rng_state = {
            "bit_generator": rng_state["bit_generator"],
            "state": {k: int(v) for k, v in rng_state["state"].items()},
            "has_uint32": int(rng_state["has_uint32"]),
            "uinteger": int(rng_state["uinteger"]),
        }
    state = TrainState(iteration=int(meta["iteration"]), adam=adam, rng_state=rng_state, losses=list(meta["losses"]))
    return model_arrays, state


def _drop_snapshot(ck: Path, stage):
    manifest = ck / f"{stage}_snapshot.json"
    if manifest.exists():
        arrays, _ = io.load_checkpoint(ck, f"{stage}_snapshot")
        for key in arrays:
            (ck / f"{stage}_snapshot" / f"{key}.dtf").unlink(missing_ok=True)
        manifest.unlink()
        try:
            (ck / f"{stage}_snapshot").rmdir()
        except OSError:
            pass


def _loss_csv(path, losses):
    io.write_csv(path, ["iteration", "loss"], [[i, repr(float(v))] for i, v in enumerate(losses)])


def cmd_train(cfg: ExperimentConfig, out: Path, resume=False):
    index = _data_index(out)
    size = index["image_size"]
    train_images, train_fg = _load_split(out, "train", index["n_train"])
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    files = []

    # -- noise schedule (calibrate unless overridden) --
    sigma_min = cfg.sigma_min if cfg.sigma_min > 0 else calibrate_sigma_min(train_images, train_fg)
    sigma_max = (
        cfg.sigma_max
        if cfg.sigma_max > 0
        else calibrate_sigma_max(train_images, min(cfg.calib_subsample, len(train_images)), seed=cfg.seed)
    )
    schedule = NoiseSchedule(sigma_min, sigma_max, cfg.n_scales)
    io.write_json(ck / "schedule.json", {"sigma_min": sigma_min, "sigma_max": sigma_max, "n_scales": cfg.n_scales})
    files.append("checkpoints/schedule.json")
    print(f"train: schedule sigma_min={sigma_min:.6g} sigma_max={sigma_max:.6g} L={cfg.n_scales}")

    # -- score model --
    if resume and (ck / "score.json").exists():
        arrays, meta = io.load_checkpoint(ck, "score")
        score_model = ConvScoreNet.from_arrays(arrays, meta)
        print("train: score checkpoint found, stage skipped")
    else:
        score_model = ConvScoreNet((size, size), schedule, channels=tuple(cfg.score_channels), seed=cfg.seed)
        state = None
        if resume and (ck / "score_snapshot.json").exists():
            arrays, state = _load_snapshot(ck, "score")
            score_model.params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
            print(f"train: resuming score training at iteration {state.iteration}")
        score_cfg = TrainConfig(
            iterations=cfg.score_iterations, batch_size=cfg.score_batch, lr=cfg.score_lr,
            seed=cfg.seed, batch_doubling=cfg.batch_doubling,
        )
        result = train_score(
            train_images, score_cfg, schedule, model=score_model, state=state,
            snapshot_fn=lambda m, s: _save_snapshot(ck, "score", m.to_arrays(), s),
            snapshot_every=cfg.snapshot_every,
        )
        score_model = result.model
        io.save_checkpoint(ck, "score", score_model.to_arrays(), score_model.meta())
        _loss_csv(ck / "score_loss.csv", result.losses)
        _drop_snapshot(ck, "score")
        files += ["checkpoints/score.json", "checkpoints/score_loss.csv"]
        files += [f"checkpoints/score/{k}.dtf" for k in sorted(score_model.to_arrays())]
        print(f"train: score model done ({cfg.score_iterations} iterations, final loss {result.losses[-1]:.4f})"
              if result.losses else "train: score model done (0 iterations)")

    # -- patch features --
    grid = PatchGrid((size, size), cfg.patch_size)
    encoder = ContextEncoder((size, size), d_ctx=cfg.ctx_dim, seed=cfg.seed + 1)
    dataset = build_dataset(score_model, train_images, schedule, grid, encoder, d_pos=cfg.pos_dim)
    print(f"train: built {dataset.n_rows} feature rows ({grid.n_patches} patches x {dataset.n_images} images)")

    # -- conditional flow (joint with encoder) --
    ctx_dim = cfg.pos_dim + cfg.ctx_dim
    if resume and (ck / "flow.json").exists():
        arrays, meta = io.load_checkpoint(ck, "flow")
        flow = FlowModel.from_arrays(arrays, meta)
        print("train: flow checkpoint found, stage skipped")
    else:
        flow = FlowModel(
            cfg.n_scales, ctx_dim, n_blocks=cfg.flow_blocks, hidden=cfg.flow_hidden,
            n_components=cfg.gmm_components, encoder=encoder, seed=cfg.seed + 2,
        )
        state = None
        if resume and (ck / "flow_snapshot.json").exists():
            arrays, state = _load_snapshot(ck, "flow")
            flow.set_params({k: Tensor(v, requires_grad=True) for k, v in arrays.items() if not k.startswith("whiten.")})
            flow.whiten_mu = arrays["whiten.mu"]
            flow.whiten_std = arrays["whiten.std"]
            print(f"train: resuming flow training at iteration {state.iteration}")
        flow_cfg = TrainConfig(iterations=cfg.flow_iterations, lr=cfg.flow_lr, seed=cfg.seed + 3)
        result = train_flow(
            dataset, flow, flow_cfg, batch_images=cfg.flow_batch_images,
            snapshot_fn=lambda m, s: _save_snapshot(ck, "flow", m.to_arrays(), s),
            snapshot_every=cfg.snapshot_every,
        )
        io.save_checkpoint(ck, "flow", flow.to_arrays(), flow.meta())
        _loss_csv(ck / "flow_loss.csv", result.losses)
        _drop_snapshot(ck, "flow")
        files += ["checkpoints/flow.json", "checkpoints/flow_loss.csv"]
        files += [f"checkpoints/flow/{k}.dtf" for k in sorted(flow.to_arrays())]
        print(f"train: flow done ({cfg.flow_iterations} iterations, final NLL {result.losses[-1]:.4f})"
              if result.losses else "train: flow done (0 iterations)")

    # persist the feature dataset with the trained encoder's context columns
    io.write_dtf(ck / "features.dtf", dataset.materialize(flow.encoder or encoder))
    io.write_json(ck / "features_columns.json", dataset.column_layout())
    files += ["checkpoints/features.dtf", "checkpoints/features_columns.json"]

    # -- whole-image GMM baseline --
    rows = whole_image_norms(dataset.extra["raw_norms"])
    gmm = fit_gmm(rows, cfg.baseline_components, seed=cfg.seed + 4)
    io.write_json(ck / "baseline_gmm.json", gmm.to_dict())
    files.append("checkpoints/baseline_gmm.json")
    print(f"train: baseline GMM fitted ({cfg.baseline_components} components, {len(rows)} rows)")

    io.update_manifest(out, files)
    return 0


# -- evaluation -------------------------------------------------------------------


def _load_artifacts(out: Path, cfg: ExperimentConfig):
    ck = out / "checkpoints"
    if not (ck / "schedule.json").exists():
        raise FileNotFoundError(f"missing checkpoint: {ck / 'schedule.json'} (run train first)")
    sched_meta = io.read_json(ck / "schedule.json")
    schedule = NoiseSchedule(sched_meta["sigma_min"], sched_meta["sigma_max"], sched_meta["n_scales"])
    arrays, meta = io.load_checkpoint(ck, "score")
    score_model = ConvScoreNet.from_arrays(arrays, meta)
    flow = None
    if (ck / "flow.json").exists():
        arrays, meta = io.load_checkpoint(ck, "flow")
        flow = FlowModel.from_arrays(arrays, meta)
    gmm = None
    if (ck / "baseline_gmm.json").exists():
        gmm = DiagonalGMM.from_dict(io.read_json(ck / "baseline_gmm.json"))
    return schedule, score_model, flow, gmm


def _sample_metrics(method_hm, fg, gt):
    row = evaluate_sample(method_hm, fg, gt)
    return row


def _format_float(v):
    return repr(float(v))


def _mean_se(values):
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    se = float(arr.std(ddof=1) / np.sqrt(len(arr))) if len(arr) > 1 else 0.0
    return f"{mean:.4f}±{se:.4f}"


def cmd_eval(cfg: ExperimentConfig, out: Path, method=None):
    method = method or cfg.method
    index = _data_index(out)
    size = index["image_size"]
    _, test_fg, lesioned, gt = _load_split(out, "test", index["n_test"], with_gt=True)
    schedule, score_model, flow, gmm = _load_artifacts(out, cfg)
    methods = []
    if method in ("spatial", "both"):
        if flow is None:
            raise FileNotFoundError("missing checkpoint: flow.json (train with method spatial|both first)")
        methods.append("spatial")
    if method in ("baseline", "both"):
        if gmm is None:
            raise FileNotFoundError("missing checkpoint: baseline_gmm.json")
        methods.append("baseline")

    grid = PatchGrid((size, size), cfg.patch_size)
    eval_dir = out / "eval"
    for m in methods:
        (eval_dir / m).mkdir(parents=True, exist_ok=True)

    # the gt masks are non-empty by construction; samples with empty gt
    # carry no defined surface distance and are skipped
    sample_ids = [i for i in range(index["n_test"]) if gt[i].any()]

    def run_sample(i):
        raw_norms = patch_score_norms(score_model, lesioned[i], schedule, grid)
        result = {}
        if "spatial" in methods:
            hm = spatial_heatmap_from_norms(flow, flow.encoder, grid, raw_norms, lesioned[i], d_pos=cfg.pos_dim)
            result["spatial"] = (hm, _sample_metrics(hm, test_fg[i], gt[i]))
        if "baseline" in methods:
            hm = baseline_heatmap(gmm, raw_norms, grid)
            result["baseline"] = (hm, _sample_metrics(hm, test_fg[i], gt[i]))
        return i, result

    threads = max(1, int(os.environ.get("SMS_THREADS", "1")))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outputs = list(pool.map(run_sample, sample_ids))
    else:
        outputs = [run_sample(i) for i in sample_ids]

    files = []
    metric_cols = ["hd99", "msd", "tp", "fp", "fn", "tpr", "ppv"]
    aggregate_rows = []
    for m in methods:
        rows = []
        for i, result in outputs:
            hm, metrics = result[m]
            masked = np.where(test_fg[i], hm.values, -np.inf)
            io.write_dtf(eval_dir / m / f"heatmap_{i:03d}.dtf", heatmap_for_storage(masked))
            io.write_pgm(eval_dir / m / f"heatmap_{i:03d}.pgm", render_heatmap_pgm(masked))
            io.write_pgm(eval_dir / m / f"seg_{i:03d}.pgm", metrics["segmentation"])
            files += [f"eval/{m}/heatmap_{i:03d}.dtf", f"eval/{m}/heatmap_{i:03d}.pgm", f"eval/{m}/seg_{i:03d}.pgm"]
            rows.append([i] + [_format_float(metrics[c]) if c not in ("tp", "fp", "fn") else metrics[c] for c in metric_cols])
        io.write_csv(eval_dir / f"per_sample_{m}.csv", ["sample_id"] + metric_cols, rows)
        files.append(f"eval/per_sample_{m}.csv")
        col = {c: [result[m][1][c] for _, result in outputs] for c in metric_cols}
        aggregate_rows.append([m, _mean_se(col["hd99"]), _mean_se(col["msd"]), _mean_se(col["tpr"]),
                               _mean_se(col["ppv"]), _mean_se(col["tp"]), _mean_se(col["fp"])])
        print(f"eval[{m}]: hd99={aggregate_rows[-1][1]} msd={aggregate_rows[-1][2]} "
              f"tpr={aggregate_rows[-1][3]} ppv={aggregate_rows[-1][4]} over {len(outputs)} samples")
    io.write_csv(eval_dir / "aggregate.csv", ["method", "hd99", "msd", "tpr", "ppv", "tp", "fp"], aggregate_rows)
    files.append("eval/aggregate.csv")
    io.update_manifest(out, files)
    return 0


def cmd_report(out: Path):
    agg_path = out / "eval" / "aggregate.csv"
    if not agg_path.exists():
        raise FileNotFoundError(f"no aggregate metrics at {agg_path}; run eval first")
    header, rows = io.read_csv(agg_path)
    lines = ["# Run report", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    lines.append("")
    lines.append("Distance metrics (hd99, msd) are in pixels, lower is better; "
                 "component metrics (tpr, ppv) are in [0,1], higher is better. "
                 "Cells are mean±standard error over test samples.")
    report = "\n".join(lines) + "\n"
    (out / "report.md").write_text(report)
    io.update_manifest(out, ["report.md"])
    print(report)
    return 0


# -- argument parsing ---------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None, help="TOML config file (defaults used when omitted)")
    parser.add_argument("--out", type=Path, required=True, help="run output directory")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--sigma-min", type=float, default=None, dest="sigma_min")
    parser.add_argument("--sigma-max", type=float, default=None, dest="sigma_max")
    parser.add_argument("--patch-size", type=int, default=None, dest="patch_size")
    parser.add_argument("--method", choices=("spatial", "baseline", "both"), default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="sms", description="score-matching patch anomaly segmenter")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "train", "eval"):
        p = sub.add_parser(name)
        _add_common(p)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="skip finished stages / continue from snapshots")
    p = sub.add_parser("report")
    p.add_argument("--out", type=Path, required=True)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return cmd_report(args.out)
    cfg = ExperimentConfig.load(
        args.config,
        seed=args.seed,
        sigma_min=args.sigma_min,
        sigma_max=args.sigma_max,
        patch_size=args.patch_size,
        method=args.method,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    if args.command == "gen-data":
        return cmd_gen_data(cfg, args.out)
    if args.command == "train":
        return cmd_train(cfg, args.out, resume=args.resume)
    if args.command == "eval":
        return cmd_eval(cfg, args.out, method=args.method)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
