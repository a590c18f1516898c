"""End-to-end acceptance criteria, each at its stated tolerance.

Run alone with ``pytest tests/test_acceptance.py -v``; the terminal summary
lists one PASS/FAIL line per criterion.
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm
from sklearn.mixture import GaussianMixture

from conftest import report_criterion, smooth_images, two_texture_image
from deepmrf import diagnostics as dg
from deepmrf.cli import read_kv, run
from deepmrf.lattice import check_decomposition, zigzag
from deepmrf.model import EmissionParams, gmm_logpdf, loss_only
from deepmrf.numerics import RngStream
from deepmrf.tasks import evaluate_sr, make_sr_dataset, synthesize_texture, train_sr, train_texture, write_image
from deepmrf.training import (TrainConfig, encode_checkpoint, load_checkpoint, save_checkpoint, train)

pytestmark = pytest.mark.slow

# Frozen from the first oracle run of the posterior simulation (Pearson 0.986).
POSTERIOR_PEARSON_FROZEN = 0.98
SR_MARGIN_DB = 0.3


def test_criterion_01_gradient_oracle():
    t0 = time.process_time()
    reps = [dg.grad_check(kind, cond, size=8, d=8, K=3, n_cycles=1, tol=1e-4)
            for kind in ("sigmoid", "relu") for cond in (False, True)]
    cpu = time.process_time() - t0
    worst = max(r.metrics["max_rel_err"] for r in reps)
    ok = all(r.passed for r in reps) and cpu < 120
    report_criterion(1, "backward vs central differences < 1e-4 (4 configs)", ok,
                     f"max rel err {worst:.2e}, cpu {cpu:.1f}s")
    assert ok


def test_criterion_02_eta_sigma_duality():
    reps = [dg.eta_sigma_check(k, n_points=10_000, tol=1e-6) for k in ("sigmoid", "relu")]
    ok = all(r.passed for r in reps)
    report_criterion(2, "|eta'(sigma(z)) - z| < 1e-6 on 1e4 points", ok,
                     ", ".join(f"{r.name} {r.metrics['sup_deviation']:.2e}" for r in reps))
    assert ok


def test_criterion_03_map_optimality():
    reps = [dg.map_optimality_check(k, trials=200) for k in ("sigmoid", "relu")]
    ok = all(r.passed for r in reps)
    report_criterion(3, "closed-form MAP within grid quantization bound (200 trials)", ok,
                     ", ".join(f"{r.name} slack {r.metrics['worst_margin_plus_bound']:.2e}" for r in reps))
    assert ok


def test_criterion_04_decomposition_invariants():
    rng = RngStream(4)
    sizes = [(int(rng.integers(1, 65)), int(rng.integers(1, 65))) for _ in range(50)]
    failures = []
    for h, w in sizes:
        res = check_decomposition(zigzag(h, w))
        if not all(res.values()):
            failures.append((h, w, [k for k, v in res.items() if not v]))
    ok = not failures
    report_criterion(4, "zigzag decomposition invariants on 50 random grids", ok,
                     f"failures {failures[:3]}" if failures else "all invariants hold")
    assert ok


def test_criterion_05_gmm_correctness():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        K, p = int(rng.integers(1, 8)), int(rng.integers(1, 4))
        w = rng.dirichlet(np.ones(K))
        mu = rng.uniform(-2, 2, (K, p))
        var = rng.uniform(0.05, 3, (K, p))
        x = rng.uniform(-2, 2, p)
        naive = math.log(sum(w[k] * np.prod(norm.pdf(x, mu[k], np.sqrt(var[k]))) for k in range(K)))
        worst = max(worst, abs(gmm_logpdf(x, EmissionParams(w, mu, var)) - naive))
    e = EmissionParams(np.array([0.2, 0.5, 0.3]), np.array([[-1.0], [0.3], [2.0]]),
                       np.array([[0.5], [0.01], [2.0]]))
    mass, _ = integrate.quad(lambda t: math.exp(gmm_logpdf([t], e)), -20, 20,
                             points=[-1.0, 0.3, 2.0], limit=500, epsabs=1e-12)
    ok = worst < 1e-12 and abs(mass - 1) < 1e-6
    report_criterion(5, "GMM logpdf vs naive (1000 cases) and unit mass", ok,
                     f"max |diff| {worst:.2e}, mass-1 {mass - 1:.2e}")
    assert ok


def test_criterion_06_posterior_approximation():
    rep = dg.posterior_approx_sim(trials=1000, d_small=1, min_corr=0.9)
    sweep = dg.zeta_sweep(trials=1000)
    r = rep.metrics["pearson"]
    ok = rep.passed and r >= POSTERIOR_PEARSON_FROZEN and sweep.passed
    report_criterion(6, "approximate vs full-conditional MAP correlation", ok,
                     f"pearson {r:.4f} (>= 0.9, frozen {POSTERIOR_PEARSON_FROZEN}), "
                     f"monotone in weight {sweep.metrics['monotone']}")
    assert ok


def _baseline_gmm_nll(img):
    pixels = img.reshape(-1, 1).astype(np.float64)
    gm = GaussianMixture(20, covariance_type="diag", reg_covar=1e-6, random_state=0, max_iter=500)
    gm.fit(pixels)
    return float(-gm.score(pixels))


def test_criterion_07_texture_overfit():
    t0 = time.process_time()
    img = two_texture_image(64)
    cfg = TrainConfig.for_texture(batch_size=4, epochs=20, steps_per_epoch=100, seed=0)
    assert cfg.K == 20 and cfg.patch_size == 25 and cfg.epochs * cfg.steps_per_epoch == 2000
    res = train_texture(img, cfg)
    params = res.checkpoint.params
    nll = loss_only(img, None, zigzag(64, 64), params, cfg.n_cycles)
    base = _baseline_gmm_nll(img)
    a = synthesize_texture(res.checkpoint, (64, 64), RngStream(11))
    b = synthesize_texture(res.checkpoint, (64, 64), RngStream(11))
    cpu = time.process_time() - t0
    ok = nll < base and np.array_equal(a, b) and cpu < 600
    report_criterion(7, "texture NLL below independent GMM baseline in 2000 steps", ok,
                     f"model {nll:.4f} vs EM baseline {base:.4f} nats/pixel, "
                     f"synthesis reproducible {np.array_equal(a, b)}, cpu {cpu:.0f}s")
    assert ok


def test_criterion_08_sr_beats_bicubic():
    t0 = time.process_time()
    train_imgs = smooth_images(20, size=48, sigma=2.0, seed=100)
    test_imgs = smooth_images(5, size=48, sigma=2.0, seed=200)
    # 6000 steps: chosen on a separate validation set (image seed 300), not on these held-out images
    cfg = TrainConfig.for_sr(d=16, batch_size=8, epochs=60, steps_per_epoch=100, seed=0)
    assert cfg.patch_size == 16 and cfg.K == 1 and cfg.fixed_var is not None
    ck = train_sr(make_sr_dataset(train_imgs, 2), cfg).checkpoint
    reps = evaluate_sr(test_imgs, 2, ck)
    bic, mod = reps["bicubic"].mean, reps["dmrf"].mean
    cpu = time.process_time() - t0
    ok = mod >= bic + SR_MARGIN_DB and cpu < 900
    report_criterion(8, "x2 SR mean PSNR >= bicubic + 0.3 dB on 5 held-out images", ok,
                     f"model {mod:.3f} dB vs bicubic {bic:.3f} dB (gain {mod - bic:+.3f}), cpu {cpu:.0f}s")
    assert ok


def _replay_identical(manifest, outputs):
    first = {p: p.read_bytes() for p in outputs}
    for p in outputs:
        p.unlink()
    code = run(["--config", str(manifest)])
    return code == 0 and all(p.read_bytes() == first[p] for p in outputs)


def test_criterion_09_cli_determinism(tmp_path):
    fast = ["--patch-size", "8", "--batch-size", "2", "--epochs", "2", "--steps-per-epoch", "3",
            "--d", "4", "--threads", "2"]
    write_image(tmp_path / "tex.pgm", two_texture_image(24))
    (tmp_path / "hr").mkdir()
    for i, im in enumerate(smooth_images(3, size=24, seed=3)):
        write_image(tmp_path / "hr" / f"h{i}.pgm", im)
    ck, syn, data = tmp_path / "tex.ckpt", tmp_path / "syn.pgm", tmp_path / "data"
    srck, up, pcsv, dgd = tmp_path / "sr.ckpt", tmp_path / "up.pgm", tmp_path / "psnr.csv", tmp_path / "dg"
    steps = [
        (["train-texture", "--input", str(tmp_path / "tex.pgm"), "--out", str(ck), "--K", "3",
          "--history", str(tmp_path / "hist.csv")] + fast, f"{ck}.manifest", [ck, tmp_path / "hist.csv"]),
        (["synth", "--ckpt", str(ck), "--size", "16x16", "--seed", "5", "--refine", "1", "--out", str(syn)],
         f"{syn}.manifest", [syn, tmp_path / "syn.pgm.seed.txt"]),
        (["make-sr-data", "--input", str(tmp_path / "hr"), "--factor", "2", "--out", str(data)],
         data / "run.manifest", [data / "index.csv", data / "h0_hr.pgm", data / "h1_lr.pgm", data / "h2_up.pgm"]),
        (["train-sr", "--data", str(data), "--out", str(srck)] + fast, f"{srck}.manifest", [srck]),
        (["sr", "--ckpt", str(srck), "--input", str(data / "h0_lr.pgm"), "--out", str(up)],
         f"{up}.manifest", [up]),
        (["eval-psnr", "--hires", str(tmp_path / "hr"), "--factor", "2", "--ckpt", str(srck), "--csv", str(pcsv)],
         f"{pcsv}.manifest", [pcsv]),
        (["diagnose", "map-opt", "--trials", "20", "--out-dir", str(dgd)], dgd / "run.manifest",
         [dgd / "summary.txt"]),
    ]
    results = {}
    for argv, manifest, outputs in steps:
        assert run(argv) == 0, argv
        assert read_kv(manifest)["subcommand"] == argv[0]
        results[argv[0]] = _replay_identical(manifest, outputs)
    ok = all(results.values())
    report_criterion(9, "manifest replay reproduces byte-identical outputs", ok,
                     ", ".join(f"{k} {'ok' if v else 'DIFF'}" for k, v in results.items()))
    assert ok


def test_criterion_10_checkpoint_roundtrip_and_resume(tmp_path):
    corpus = [two_texture_image(32)]
    cfg = TrainConfig(patch_size=10, batch_size=3, epochs=4, steps_per_epoch=5, d=6, K=3, seed=2)
    full = train(corpus, cfg)
    path = tmp_path / "a.ckpt"
    save_checkpoint(full.checkpoint, path)
    save_checkpoint(load_checkpoint(path), tmp_path / "b.ckpt")
    same_bytes = path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    mid = tmp_path / "mid.ckpt"
    train(corpus, cfg, ckpt_path=mid, max_epochs=2)
    rest = train(corpus, cfg, resume=load_checkpoint(mid))
    same_steps = rest.history == full.history[-len(rest.history):]
    same_final = encode_checkpoint(rest.checkpoint) == encode_checkpoint(full.checkpoint)
    ok = same_bytes and same_steps and same_final
    report_criterion(10, "save/load/save byte-identical; resume equals uninterrupted run", ok,
                     f"bytes {same_bytes}, per-step losses {same_steps}, final state {same_final}")
    assert ok
