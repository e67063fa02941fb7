"""Acceptance suite: one test per criterion, each printing a PASS line and
enforcing its runtime budget. Run with

    pytest tests/test_acceptance.py -v -s
"""

import time

import numpy as np
import pytest

from tomouq import autodiff as ad
from tomouq.baselines import MlemConfig, TvConfig, mlem, tv_reconstruct
from tomouq.cli import main
from tomouq.cvae import LatentGaussian, kl_diag_gauss, make_bundle, loss_minibatch
from tomouq.metrics import psnr
from tomouq.phantoms import (StreamConfig, TrainingTuple, generate_ellipse_phantom,
                             make_training_stream, poissonize)
from tomouq.posterior import estimate_stats, sample_posterior
from tomouq.radon import OperatorGeometry, default_num_bins, make_radon
from tomouq.toy2d import (histogram_distance, mode_coverage, ring_mixture,
                          sample_mixture, toy_sample, toy_train)
from tomouq.training import TrainConfig, train


def report(criterion, detail):
    print(f"\nACCEPTANCE {criterion}: PASS - {detail}")


class Budget:
    def __init__(self, seconds):
        self.limit = seconds
        self.start = time.time()

    @property
    def elapsed(self):
        return time.time() - self.start

    def check(self):
        assert self.elapsed < self.limit, (
            f"runtime {self.elapsed:.0f}s exceeds the {self.limit:.0f}s budget")


# -- shared trained models (each trained once per session) ------------------------

@pytest.fixture(scope="module")
def desk_model():
    """16x16 sampler trained for 500 batches of 10 on a stream mixing the two
    calibration peaks (both count levels in distribution), plus its operator
    and wall-clock cost. Shared by criteria 8 and 9."""
    t0 = time.time()
    geo = OperatorGeometry(16, 16, 12, default_num_bins(16, 16))
    op = make_radon(geo)
    bundle = make_bundle(geo, d_z=6, K=10, beta=5e-3, seed=0)
    stream = make_training_stream(
        StreamConfig(batch_size=10, peak=(1e2, 1e4), rng_seed=11), op)
    bundle, trace = train(TrainConfig(T=500, M=10, lr=2e-3, rng_seed=5),
                          stream, bundle)
    return {"bundle": bundle, "op": op, "trace": trace,
            "train_seconds": time.time() - t0}


@pytest.fixture(scope="module")
def toy_model():
    t0 = time.time()
    spec = ring_mixture()
    model, trace = toy_train(spec, epochs=800, rng=np.random.default_rng(0))
    return {"spec": spec, "model": model, "trace": trace,
            "train_seconds": time.time() - t0}


# -- criteria ----------------------------------------------------------------------

def test_criterion_01_adjoint():
    budget = Budget(10.0)
    geo = OperatorGeometry(32, 32, 16, default_num_bins(32, 32))
    op = make_radon(geo)
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=geo.image_shape)
        y = rng.normal(size=geo.sinogram_shape)
        ax = op.apply(x)
        lhs = float((ax * y).sum())
        rhs = float((x * op.adjoint(y)).sum())
        mismatch = abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y) + 1e-30)
        worst = max(worst, mismatch)
    assert worst < 1e-6

    geo8 = OperatorGeometry(8, 8, 6, default_num_bins(8, 8))
    op8 = make_radon(geo8)
    dense = np.zeros((geo8.num_angles * geo8.num_bins, 64))
    for j in range(64):
        e = np.zeros(64)
        e[j] = 1.0
        dense[:, j] = op8.apply(e.reshape(8, 8)).reshape(-1)
    assert np.abs(dense - op8.dense()).max() < 1e-10
    y = np.random.default_rng(1).normal(size=geo8.sinogram_shape)
    assert np.abs(op8.adjoint(y).reshape(-1) - dense.T @ y.reshape(-1)).max() < 1e-10
    budget.check()
    report(1, f"adjoint mismatch {worst:.2e} over 100 trials; dense equivalence "
              f"at 8x8 to 1e-10 ({budget.elapsed:.1f}s)")


def test_criterion_02_gradient_fidelity():
    budget = Budget(120.0)
    rng = np.random.default_rng(42)
    layer_worst = 0.0
    for kind in ("conv2d", "relu", "avgpool2", "global-mean", "affine"):
        if kind == "affine":
            graph = [ad.LayerSpec("affine", in_features=5, out_features=3)]
            x = rng.normal(size=(4, 5))
        else:
            graph = [ad.LayerSpec("conv2d", kernel_size=3, in_channels=2, out_channels=3)]
            if kind != "conv2d":
                graph.append(ad.LayerSpec(kind))
            x = rng.normal(size=(2, 2, 6, 6))
        params = ad.init_params(graph, rng)
        rep = ad.gradcheck(graph, params, x, tolerance=1e-4,
                           rng=np.random.default_rng(7))
        assert rep["passed"], f"{kind}: {rep['max_rel_error']:.2e}"
        layer_worst = max(layer_worst, rep["max_rel_error"])

    # full minibatch loss at a generic, well-conditioned 16x16 instance
    geo = OperatorGeometry(16, 16, 8, default_num_bins(16, 16))
    op = make_radon(geo)
    bundle = make_bundle(geo, d_z=3, K=2, beta=5e-3, seed=3)
    prng = np.random.default_rng(11)
    for ps in (bundle.teacher, bundle.student, bundle.recurrent):
        for k in ps.arrays:
            ps.arrays[k] += 0.05 * prng.normal(size=ps.arrays[k].shape)
    for k in ("layer4/weight", "layer4/bias"):
        bundle.recurrent.arrays[k] = 0.05 * prng.normal(
            size=bundle.recurrent.arrays[k].shape)
    x = prng.uniform(0.2, 1.0, size=geo.image_shape)
    y = op.apply(x) + prng.uniform(0.05, 0.15, size=geo.sinogram_shape)
    batch = [TrainingTuple(x=x, y=y, operator=op, peak=1.0)]

    def loss_value():
        l, _ = loss_minibatch(bundle, batch, L=1, rng=np.random.default_rng(42))
        return l

    loss0, grads = loss_minibatch(bundle, batch, L=1, rng=np.random.default_rng(42))
    h0 = 1e-5
    floor = max(1e-6, 1e4 * np.finfo(float).eps * abs(loss0) / (2 * h0))
    probe = np.random.default_rng(99)
    loss_worst = 0.0
    for net_name, params in (("teacher", bundle.teacher),
                             ("student", bundle.student),
                             ("recurrent", bundle.recurrent)):
        for name in params.names():
            flat = params.arrays[name].reshape(-1)
            for idx in probe.choice(flat.size, size=min(3, flat.size), replace=False):
                orig = flat[idx]
                h = h0 * max(1.0, abs(orig))
                flat[idx] = orig + h
                f_plus = loss_value()
                flat[idx] = orig - h
                f_minus = loss_value()
                flat[idx] = orig
                fd = (f_plus - f_minus) / (2 * h)
                an = grads[net_name][name].reshape(-1)[idx]
                loss_worst = max(loss_worst, abs(an - fd) / max(abs(an), abs(fd), floor))
    assert loss_worst < 1e-4
    budget.check()
    report(2, f"per-layer FD worst {layer_worst:.2e}; full loss FD worst "
              f"{loss_worst:.2e} ({budget.elapsed:.0f}s)")


def test_criterion_03_kl_oracle():
    budget = Budget(60.0)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        q = LatentGaussian(mean=rng.normal(size=4), log_var=0.5 * rng.normal(size=4))
        p = LatentGaussian(mean=rng.normal(size=4), log_var=0.5 * rng.normal(size=4))
        z = q.mean + np.exp(0.5 * q.log_var) * rng.normal(size=(1_000_000, 4))
        log_q = -0.5 * (((z - q.mean) ** 2) / np.exp(q.log_var) + q.log_var).sum(axis=1)
        log_p = -0.5 * (((z - p.mean) ** 2) / np.exp(p.log_var) + p.log_var).sum(axis=1)
        mc = float((log_q - log_p).mean())
        closed = kl_diag_gauss(q, p)
        worst = max(worst, abs(closed - mc) / abs(mc))
        g = LatentGaussian(mean=rng.normal(size=6), log_var=rng.normal(size=6))
        assert abs(kl_diag_gauss(g, g)) < 1e-12
    assert worst < 0.01
    budget.check()
    report(3, f"closed form vs 1e6-draw MC within {worst:.3%} over 20 pairs; "
              f"KL(q||q)=0 to 1e-12 ({budget.elapsed:.0f}s)")


def test_criterion_04_posterior_statistics():
    budget = Budget(60.0)
    rng = np.random.default_rng(3)
    # enumeration over a discrete latent with known decoder outputs
    outputs = [rng.normal(size=(6, 6)) for _ in range(4)]
    probs = np.array([0.5, 0.25, 0.125, 0.125])
    s = 2000
    counts = (probs * s).astype(int)
    samples = np.concatenate([np.repeat(o[None], c, axis=0)
                              for o, c in zip(outputs, counts)])
    beta = 0.125
    mean, var = estimate_stats(samples, beta)
    exact_mean = sum(p * o for p, o in zip(probs, outputs))
    exact_second = sum(p * o ** 2 for p, o in zip(probs, outputs))
    exact_var = beta + exact_second - exact_mean ** 2
    assert np.abs(mean - exact_mean).max() < 1e-12
    assert np.abs(var - exact_var).max() < 1e-12

    # Monte-Carlo Gaussian-scatter decoder: variance -> beta + sigma^2
    c = rng.normal(size=(4, 4))
    sigma = 0.6
    mc_samples = c[None] + sigma * rng.normal(size=(100_000, 4, 4))
    _, mc_var = estimate_stats(mc_samples, beta)
    rel = np.abs(mc_var - (beta + sigma ** 2)).max() / (beta + sigma ** 2)
    assert rel < 0.02
    budget.check()
    report(4, f"discrete enumeration exact to 1e-12; MC variance within "
              f"{rel:.3%} of beta+sigma^2 at S=1e5 ({budget.elapsed:.0f}s)")


def test_criterion_05_toy_multimodal_reproduction(toy_model):
    budget = Budget(600.0)
    budget.start = time.time() - toy_model["train_seconds"]
    spec = toy_model["spec"]
    truth = sample_mixture(spec, 100_000, np.random.default_rng(1))
    approx = toy_sample(toy_model["model"], 100_000, np.random.default_rng(100))
    bounds = ((-9.0, 9.0), (-9.0, 9.0))
    tv = histogram_distance(truth, approx, grid=(50, 50), bounds=bounds)
    coverage = mode_coverage(approx, spec)
    assert tv < 0.15, f"TV distance {tv:.4f}"
    assert coverage.min() >= 0.02, f"mode coverage {coverage.round(3)}"
    budget.check()
    report(5, f"TV distance {tv:.4f} < 0.15; min mode mass {coverage.min():.3f} "
              f">= 0.02 over 7 modes ({budget.elapsed:.0f}s incl. training)")


def test_criterion_06_mlem():
    budget = Budget(60.0)
    geo = OperatorGeometry(32, 32, 12, default_num_bins(32, 32))
    op = make_radon(geo)
    phantom = generate_ellipse_phantom(32, 32, 100.0, rng_seed=1).image
    y = poissonize(op.apply(phantom), rng_seed=2)
    _, trace = mlem(op, y, MlemConfig(iterations=200), track_loglik=True)
    trace = np.array(trace)
    tol = 1e-9 * (1.0 + np.abs(trace[:-1]))
    assert np.all(np.diff(trace) >= -tol), "log-likelihood decreased"

    rng = np.random.default_rng(0)
    x_star = 0.5 + np.abs(rng.normal(size=geo.image_shape))
    y_consistent = op.apply(x_star)
    out = mlem(op, y_consistent, MlemConfig(iterations=3), x0=x_star)
    fp_err = np.abs(out - x_star).max() / x_star.max()
    assert fp_err < 1e-10
    budget.check()
    report(6, f"likelihood monotone over 200 iterations (rel tol 1e-9); "
              f"fixed-point error {fp_err:.2e} < 1e-10 ({budget.elapsed:.0f}s)")


def test_criterion_07_tv_pdhg():
    budget = Budget(120.0)
    geo = OperatorGeometry(32, 32, 12, default_num_bins(32, 32))
    op = make_radon(geo)
    phantom = generate_ellipse_phantom(32, 32, 100.0, rng_seed=7).image
    y = poissonize(op.apply(phantom), rng_seed=8)
    out, trace = tv_reconstruct(op, y, TvConfig(alpha=2e-1, iterations=150),
                                track_objective=True)
    trace = np.array(trace)
    after = trace[10:]
    tol = 1e-9 * (1.0 + np.abs(after[:-1]))
    assert np.all(np.diff(after) <= tol), "objective increased after burn-in"
    assert np.all(out >= 0.0), "negative pixels in the reconstruction"

    # alpha extremes on a 16x16 instance
    geo16 = OperatorGeometry(16, 16, 10, default_num_bins(16, 16))
    op16 = make_radon(geo16)
    x_true = generate_ellipse_phantom(16, 16, 10.0, rng_seed=11).image
    clean = op16.apply(x_true)
    small = tv_reconstruct(op16, clean, TvConfig(alpha=1e-6, iterations=800))
    residual = np.linalg.norm(op16.apply(small) - clean) / np.linalg.norm(clean)
    assert residual < 0.02, f"alpha->0 residual {residual:.3f}"
    y16 = poissonize(clean, rng_seed=12)
    flat = tv_reconstruct(op16, y16, TvConfig(alpha=1e5, iterations=300))
    assert flat.max() - flat.min() < 1e-3 * max(flat.max(), 1e-12), "huge alpha not flat"
    budget.check()
    report(7, f"objective non-increasing after burn-in; output >= 0 exactly; "
              f"alpha extremes behave ({budget.elapsed:.0f}s)")


def test_criterion_08_desk_scale_direction_check(desk_model):
    budget = Budget(900.0)
    budget.start = time.time() - desk_model["train_seconds"]
    bundle, op = desk_model["bundle"], desk_model["op"]
    trace = desk_model["trace"]
    assert np.all(np.isfinite(trace))

    psnr_cvae, psnr_mlem, psnr_bp = [], [], []
    bg_excess, support_excess = [], []
    for i in range(20):
        phantom = generate_ellipse_phantom(16, 16, 1e2, rng_seed=5000 + i).image
        y = poissonize(op.apply(phantom), rng_seed=6000 + i)
        summary = sample_posterior(bundle, y, op, S=64,
                                   rng=np.random.default_rng(7000 + i), scale=1e2)
        psnr_cvae.append(psnr(summary.mean * summary.scale, phantom, 1e2))
        psnr_mlem.append(psnr(mlem(op, y, MlemConfig(iterations=20)), phantom, 1e2))
        psnr_bp.append(psnr(op.adjoint(y), phantom, 1e2))
        excess = summary.variance - summary.beta
        background = phantom == 0
        bg_excess.append(excess[background].mean())
        support_excess.append(excess[~background].mean())

    mean_cvae, mean_mlem, mean_bp = map(np.mean, (psnr_cvae, psnr_mlem, psnr_bp))
    assert mean_cvae > mean_bp, f"cVAE {mean_cvae:.2f} vs backprojection {mean_bp:.2f}"
    assert mean_cvae > mean_mlem, f"cVAE {mean_cvae:.2f} vs MLEM-20 {mean_mlem:.2f}"
    assert np.mean(bg_excess) < np.mean(support_excess), (
        f"background excess variance {np.mean(bg_excess):.3e} not below "
        f"support {np.mean(support_excess):.3e}")
    budget.check()
    report(8, f"PSNR cVAE {mean_cvae:.2f} > MLEM-20 {mean_mlem:.2f} > "
              f"backprojection {mean_bp:.2f}; background excess variance "
              f"{np.mean(bg_excess):.2e} < support {np.mean(support_excess):.2e} "
              f"({budget.elapsed:.0f}s incl. training)")


def test_criterion_09_noise_level_monotonicity(desk_model):
    bundle, op = desk_model["bundle"], desk_model["op"]
    var_lc, var_mc = [], []
    for i in range(20):
        phantom = generate_ellipse_phantom(16, 16, 1e2, rng_seed=5000 + i).image
        y_lc = poissonize(op.apply(phantom), rng_seed=6000 + i)
        y_mc = poissonize(op.apply(phantom * 100.0), rng_seed=8000 + i)
        s_lc = sample_posterior(bundle, y_lc, op, S=256,
                                rng=np.random.default_rng(40000 + i), scale=1e2)
        s_mc = sample_posterior(bundle, y_mc, op, S=256,
                                rng=np.random.default_rng(41000 + i), scale=1e4)
        var_lc.append(s_lc.variance.mean())
        var_mc.append(s_mc.variance.mean())
    lc, mc = np.mean(var_lc), np.mean(var_mc)
    assert lc > mc, f"low-count variance {lc:.4e} not above moderate-count {mc:.4e}"
    report(9, f"mean posterior variance (normalized units): peak 1e2 {lc:.4e} > "
              f"peak 1e4 {mc:.4e} (ratio {lc / mc:.3f})")


def test_criterion_10_reproducibility(tmp_path):
    config_text = """
geometry.image_height = 12
geometry.image_width = 12
geometry.num_angles = 8
data.peak = 1e2
data.seed = 7
data.num_phantoms = 2
model.d_z = 3
model.K = 2
train.T = 4
train.M = 2
sample.S = 6
sample.seed = 1
output.dir = {out}
"""
    outputs = []
    for run in ("a", "b"):
        out = tmp_path / f"run_{run}"
        cfg = tmp_path / f"cfg_{run}.cfg"
        cfg.write_text(config_text.format(out=out))
        assert main(["generate", str(cfg)]) == 0
        assert main(["train", str(cfg)]) == 0
        assert main(["sample", str(cfg)]) == 0
        assert main(["eval", str(cfg)]) == 0
        outputs.append(out)
    a, b = outputs
    compared = []
    for rel in ("model/model.tqpk", "model/loss_trace.tsv",
                "samples/archive_000.tqpk", "samples/archive_001.tqpk",
                "samples/mean_000.grid", "samples/variance_000.grid",
                "reports/quality.tsv", "reports/quality_series.tsv"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        compared.append(rel)
    report(10, f"two identical seeded runs produced bitwise-identical "
               f"checkpoints, archives and reports ({len(compared)} files)")
