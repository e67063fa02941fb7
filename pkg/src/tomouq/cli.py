"""Command-line entry point.

    tomouq generate <config> [--override k=v ...]
    tomouq train    <config> ...
    tomouq sample   <config> ...
    tomouq baseline <config> ...
    tomouq eval     <config> ...
    tomouq toy      <config> ...
    tomouq plot     <config> --kind KIND [--index N] ...

One command per process; every command validates the full config first,
then writes its artifacts plus a JSON manifest (config text, hash, seeds)
sufficient to reproduce the run bit-for-bit.

Exit codes: 0 success, 2 validation/missing-input error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .baselines import (MlemConfig, TvConfig, gm3_predict, gm3_train,
                        lgd_reconstruct, lgd_train, make_gm3_bundle,
                        make_lgd_bundle, mlem, save_gm3, save_lgd,
                        tv_reconstruct)
from .config import (ConfigError, ExperimentConfig, apply_overrides,
                     load_config_file, serialize_config)
from .cvae import load_bundle, make_bundle
from .gridio import load_grid, save_grid
from .metrics import QualityReport, psnr, ssim
from .phantoms import (StreamConfig, generate_ellipse_phantom,
                       insert_tumour, load_phantom_file, make_training_stream,
                       poissonize)
from .posterior import load_archive, sample_posterior, save_archive
from .radon import OperatorGeometry, default_num_bins, make_radon
from .training import TrainConfig, TrainingDiverged, train
from .toy2d import (histogram_distance, mode_coverage, ring_mixture,
                    sample_mixture, toy_sample, toy_train)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class MissingInputError(FileNotFoundError):
    pass


def build_operator(config: ExperimentConfig):
    g = config.geometry
    num_bins = g.num_bins or default_num_bins(g.image_height, g.image_width,
                                              g.bin_spacing)
    geometry = OperatorGeometry(g.image_height, g.image_width, g.num_angles,
                                num_bins, g.bin_spacing)
    return make_radon(geometry)


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(serialize_config(config).encode()).hexdigest()


def write_manifest(out_dir, command, config, artifacts):
    manifest = {
        "command": command,
        "config_sha256": config_hash(config),
        "config": serialize_config(config),
        "package_version": __version__,
        "artifacts": sorted(artifacts),
    }
    path = os.path.join(out_dir, f"manifest_{command}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _phantom_paths(config, out_dir=None):
    base = out_dir or config.output.dir
    return os.path.join(base, "phantoms"), os.path.join(base, "sinograms")


def _load_phantoms(config):
    phantom_dir, _ = _phantom_paths(config)
    if not os.path.isdir(phantom_dir):
        raise MissingInputError(
            f"no phantom directory at {phantom_dir}; run 'tomouq generate' first")
    paths = sorted(p for p in os.listdir(phantom_dir) if p.endswith(".grid"))
    if not paths:
        raise MissingInputError(f"no phantom grids in {phantom_dir}")
    return [load_grid(os.path.join(phantom_dir, p)) for p in paths]


def _load_sinograms(config):
    _, sino_dir = _phantom_paths(config)
    if not os.path.isdir(sino_dir):
        raise MissingInputError(
            f"no sinogram directory at {sino_dir}; run 'tomouq generate' first")
    paths = sorted(p for p in os.listdir(sino_dir) if p.endswith(".grid"))
    if not paths:
        raise MissingInputError(f"no sinograms in {sino_dir}")
    return [load_grid(os.path.join(sino_dir, p)) for p in paths]


# -- commands ---------------------------------------------------------------------

def cmd_generate(config: ExperimentConfig) -> list:
    op = build_operator(config)
    d = config.data
    h, w = op.geometry.image_shape
    phantom_dir, sino_dir = _phantom_paths(config)
    os.makedirs(phantom_dir, exist_ok=True)
    os.makedirs(sino_dir, exist_ok=True)
    artifacts = []
    for i in range(d.num_phantoms):
        if d.phantom_source == "synthetic-ellipses":
            phantom = generate_ellipse_phantom(h, w, d.peak, rng_seed=d.seed + i)
        else:
            files = sorted(p for p in os.listdir(d.phantom_source)
                           if p.endswith(".grid"))
            if i >= len(files):
                break
            phantom = load_phantom_file(os.path.join(d.phantom_source, files[i]),
                                        peak=d.peak)
        if d.tumour_index == i and d.tumour_radius > 0:
            phantom = insert_tumour(phantom, (d.tumour_row, d.tumour_col),
                                    d.tumour_radius)
        y = poissonize(op.apply(phantom.image), rng_seed=d.seed + 100000 + i)
        p_path = os.path.join(phantom_dir, f"phantom_{i:03d}.grid")
        s_path = os.path.join(sino_dir, f"sinogram_{i:03d}.grid")
        save_grid(p_path, phantom.image)
        save_grid(s_path, y)
        artifacts += [p_path, s_path]
    write_manifest(config.output.dir, "generate", config, artifacts)
    return artifacts


def cmd_train(config: ExperimentConfig) -> str:
    op = build_operator(config)
    m = config.model
    bundle = make_bundle(op.geometry, d_z=m.d_z, K=m.K, beta=m.beta,
                         e_mode=m.e_mode, r_mode=m.r_mode, width=m.width,
                         seed=m.init_seed)
    t = config.train
    stream = make_training_stream(
        StreamConfig(batch_size=t.M, peak=config.data.peak, rng_seed=config.data.seed),
        op)
    model_dir = os.path.join(config.output.dir, "model")
    train(TrainConfig(T=t.T, M=t.M, L=t.L, lr=t.lr, beta1=t.adam_beta1,
                      beta2=t.adam_beta2, eps=t.adam_eps,
                      checkpoint_every=t.checkpoint_every, rng_seed=t.seed),
          stream, bundle, out_dir=model_dir)
    model_path = os.path.join(model_dir, "model.tqpk")
    write_manifest(config.output.dir, "train", config,
                   [model_path, os.path.join(model_dir, "loss_trace.tsv")])
    return model_path


def cmd_sample(config: ExperimentConfig) -> list:
    model_path = os.path.join(config.output.dir, "model", "model.tqpk")
    if not os.path.exists(model_path):
        raise MissingInputError(f"no trained model at {model_path}; run 'tomouq train'")
    bundle = load_bundle(model_path)
    op = build_operator(config)
    sinograms = _load_sinograms(config)
    sample_dir = os.path.join(config.output.dir, "samples")
    os.makedirs(sample_dir, exist_ok=True)
    artifacts = []
    for i, y in enumerate(sinograms):
        rng = np.random.default_rng(config.sample.seed + i)
        summary = sample_posterior(bundle, y, op, S=config.sample.S, rng=rng,
                                   scale=config.data.peak)
        a_path = os.path.join(sample_dir, f"archive_{i:03d}.tqpk")
        save_archive(a_path, summary, seed=config.sample.seed + i, K=bundle.K)
        mean_path = os.path.join(sample_dir, f"mean_{i:03d}.grid")
        var_path = os.path.join(sample_dir, f"variance_{i:03d}.grid")
        save_grid(mean_path, summary.mean * summary.scale)
        save_grid(var_path, summary.variance * summary.scale ** 2)
        artifacts += [a_path, mean_path, var_path]
    write_manifest(config.output.dir, "sample", config, artifacts)
    return artifacts


def cmd_baseline(config: ExperimentConfig) -> list:
    op = build_operator(config)
    sinograms = _load_sinograms(config)
    b = config.baseline
    base_dir = os.path.join(config.output.dir, "baseline")
    os.makedirs(base_dir, exist_ok=True)
    artifacts = []

    lgd_bundle = make_lgd_bundle(op.geometry, K=config.model.K,
                                 width=config.model.width, seed=b.lgd_seed)
    lgd_stream = make_training_stream(
        StreamConfig(batch_size=config.train.M, peak=config.data.peak,
                     rng_seed=b.lgd_seed), op)
    lgd_train(lgd_bundle, lgd_stream, batches=b.lgd_batches, lr=b.lgd_lr)
    lgd_path = os.path.join(base_dir, "lgd.tqpk")
    save_lgd(lgd_path, lgd_bundle)
    artifacts.append(lgd_path)

    gm3_bundle = make_gm3_bundle(op.geometry, K=config.model.K,
                                 width=config.model.width, seed=b.gm3_seed)

    def stream_factory(c):
        return make_training_stream(
            StreamConfig(batch_size=config.train.M, peak=config.data.peak,
                         rng_seed=b.gm3_seed + 1000 * (c + 1)), op)

    gm3_train(gm3_bundle, stream_factory, mean_batches=b.gm3_mean_batches,
              var_batches=b.gm3_var_batches, lr=b.gm3_lr)
    gm3_path = os.path.join(base_dir, "gm3.tqpk")
    save_gm3(gm3_path, gm3_bundle)
    artifacts.append(gm3_path)

    for i, y in enumerate(sinograms):
        recons = {
            "mlem": mlem(op, y, MlemConfig(iterations=b.mlem_iterations,
                                           floor=b.mlem_floor)),
            "tv": tv_reconstruct(op, y, TvConfig(alpha=b.tv_alpha,
                                                 iterations=b.tv_iterations,
                                                 sigma=b.tv_sigma, tau=b.tv_tau)),
            "lgd": lgd_reconstruct(op, y, lgd_bundle, scale=config.data.peak),
        }
        gm3_mean, gm3_var = gm3_predict(op, y, gm3_bundle, scale=config.data.peak)
        recons["gm3_mean"] = gm3_mean
        recons["gm3_variance"] = gm3_var
        for name, image in recons.items():
            path = os.path.join(base_dir, f"{name}_{i:03d}.grid")
            save_grid(path, image)
            artifacts.append(path)
    write_manifest(config.output.dir, "baseline", config, artifacts)
    return artifacts


def cmd_eval(config: ExperimentConfig) -> str:
    phantoms = _load_phantoms(config)
    peak = config.data.peak
    report = QualityReport()
    found_any = False
    method_dirs = {
        "cvae": (os.path.join(config.output.dir, "samples"), "mean_{i:03d}.grid"),
        "mlem": (os.path.join(config.output.dir, "baseline"), "mlem_{i:03d}.grid"),
        "tv": (os.path.join(config.output.dir, "baseline"), "tv_{i:03d}.grid"),
        "lgd": (os.path.join(config.output.dir, "baseline"), "lgd_{i:03d}.grid"),
        "gm3": (os.path.join(config.output.dir, "baseline"), "gm3_mean_{i:03d}.grid"),
    }
    for i, truth in enumerate(phantoms):
        for method, (directory, pattern) in method_dirs.items():
            path = os.path.join(directory, pattern.format(i=i))
            if not os.path.exists(path):
                continue
            found_any = True
            recon = load_grid(path)
            report.add(i, method, peak, ssim(recon, truth, data_range=peak),
                       psnr(recon, truth, data_range=peak))
    if not found_any:
        raise MissingInputError(
            f"no reconstructions found under {config.output.dir}; run "
            "'tomouq sample' and/or 'tomouq baseline' first")
    report_dir = os.path.join(config.output.dir, "reports")
    os.makedirs(report_dir, exist_ok=True)
    quality_path = os.path.join(report_dir, "quality.tsv")
    with open(quality_path, "w") as fh:
        fh.write(report.to_tsv())
    series_path = os.path.join(report_dir, "quality_series.tsv")
    with open(series_path, "w") as fh:
        fh.write(report.series_tsv())
    write_manifest(config.output.dir, "eval", config, [quality_path, series_path])
    return quality_path


def cmd_toy(config: ExperimentConfig) -> str:
    t = config.toy
    spec = ring_mixture(components=t.components, radius=t.radius, var=t.variance)
    rng = np.random.default_rng(t.seed)
    model, trace = toy_train(spec, epochs=t.epochs, rng=rng)
    truth = sample_mixture(spec, t.samples, np.random.default_rng(t.seed + 1))
    approx = toy_sample(model, t.samples, np.random.default_rng(t.seed + 2))
    lim = float(t.radius + 3.0 * np.sqrt(t.variance) + 1.0)
    bounds = ((-lim, lim), (-lim, lim))
    tv = histogram_distance(truth, approx, grid=(t.grid, t.grid), bounds=bounds)
    coverage = mode_coverage(approx, spec)

    toy_dir = os.path.join(config.output.dir, "toy")
    os.makedirs(toy_dir, exist_ok=True)
    truth_path = os.path.join(toy_dir, "truth_points.grid")
    model_path = os.path.join(toy_dir, "model_points.grid")
    save_grid(truth_path, truth)
    save_grid(model_path, approx)
    ht, _, _ = np.histogram2d(truth[:, 0], truth[:, 1], bins=(t.grid, t.grid),
                              range=bounds)
    ha, _, _ = np.histogram2d(approx[:, 0], approx[:, 1], bins=(t.grid, t.grid),
                              range=bounds)
    save_grid(os.path.join(toy_dir, "hist_truth.grid"), ht / t.samples)
    save_grid(os.path.join(toy_dir, "hist_model.grid"), ha / t.samples)
    report_path = os.path.join(toy_dir, "toy_report.tsv")
    with open(report_path, "w") as fh:
        fh.write("metric\tvalue\n")
        fh.write(f"tv_distance\t{tv:.17g}\n")
        fh.write(f"final_loss\t{trace[-1]:.17g}\n")
        for c, frac in enumerate(coverage):
            fh.write(f"mode_{c}_mass\t{frac:.17g}\n")
    write_manifest(config.output.dir, "toy", config,
                   [truth_path, model_path, report_path])
    return report_path


def cmd_plot(config: ExperimentConfig, kind, index=0) -> str:
    from . import plots
    if kind not in plots.PLOT_KINDS:
        raise ConfigError(f"unknown plot kind {kind!r}; choose from {plots.PLOT_KINDS}")
    plot_dir = os.path.join(config.output.dir, "plots")
    os.makedirs(plot_dir, exist_ok=True)
    out = os.path.join(plot_dir, f"{kind.replace('-', '_')}_{index:03d}.png")

    if kind in ("mean-map", "variance-map", "hpd-slices"):
        archive = os.path.join(config.output.dir, "samples", f"archive_{index:03d}.tqpk")
        if not os.path.exists(archive):
            raise MissingInputError(f"no sample archive at {archive}")
        summary = load_archive(archive)
        if kind == "mean-map":
            plots.plot_mean_map(summary, out)
        elif kind == "variance-map":
            plots.plot_variance_map(summary, out)
        else:
            truth = None
            p_path = os.path.join(config.output.dir, "phantoms",
                                  f"phantom_{index:03d}.grid")
            if os.path.exists(p_path):
                truth = load_grid(p_path) / summary.scale
            h = summary.mean.shape[0]
            slices = [s for s in (10, 100) if s < h] or [h // 2]
            plots.plot_hpd_slices(summary, out, slice_indices=slices, truth=truth)
    elif kind == "error-map":
        mean_path = os.path.join(config.output.dir, "samples", f"mean_{index:03d}.grid")
        p_path = os.path.join(config.output.dir, "phantoms", f"phantom_{index:03d}.grid")
        if not (os.path.exists(mean_path) and os.path.exists(p_path)):
            raise MissingInputError(f"need {mean_path} and {p_path}")
        plots.plot_error_map(load_grid(mean_path), load_grid(p_path), out)
    elif kind == "toy-scatter":
        t_path = os.path.join(config.output.dir, "toy", "truth_points.grid")
        m_path = os.path.join(config.output.dir, "toy", "model_points.grid")
        if not (os.path.exists(t_path) and os.path.exists(m_path)):
            raise MissingInputError("toy point clouds missing; run 'tomouq toy'")
        n_show = 20000
        plots.plot_toy_scatter(load_grid(t_path)[:n_show], load_grid(m_path)[:n_show], out)
    elif kind == "loss-trace":
        trace_path = os.path.join(config.output.dir, "model", "loss_trace.tsv")
        if not os.path.exists(trace_path):
            raise MissingInputError(f"no loss trace at {trace_path}")
        from .training import read_loss_trace
        plots.plot_loss_trace(read_loss_trace(trace_path), out)
    return out


# -- argument handling ---------------------------------------------------------------

COMMANDS = ("generate", "train", "sample", "baseline", "eval", "toy", "plot")


def build_parser():
    parser = argparse.ArgumentParser(prog="tomouq",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", help="experiment config file")
        p.add_argument("--override", action="append", default=[],
                       metavar="KEY=VALUE", help="config override (repeatable)")
        p.add_argument("--out", default=None, help="override output.dir")
        if name == "plot":
            p.add_argument("--kind", required=True)
            p.add_argument("--index", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config_file(args.config)
        apply_overrides(config, args.override)
        if args.out:
            config.output.dir = args.out
        os.makedirs(config.output.dir, exist_ok=True)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        if args.command == "generate":
            artifacts = cmd_generate(config)
            print(f"wrote {len(artifacts)} files under {config.output.dir}")
        elif args.command == "train":
            path = cmd_train(config)
            print(f"model written to {path}")
        elif args.command == "sample":
            artifacts = cmd_sample(config)
            print(f"wrote {len(artifacts)} sample artifacts")
        elif args.command == "baseline":
            artifacts = cmd_baseline(config)
            print(f"wrote {len(artifacts)} baseline artifacts")
        elif args.command == "eval":
            path = cmd_eval(config)
            print(f"quality report at {path}")
        elif args.command == "toy":
            path = cmd_toy(config)
            print(f"toy report at {path}")
        elif args.command == "plot":
            path = cmd_plot(config, args.kind, args.index)
            print(f"plot at {path}")
    except (MissingInputError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failures get a distinct code
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
