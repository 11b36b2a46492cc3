import json
import math

import pytest

import pflow


def test_subvp_moments():
    sde = pflow.SubVpSde()
    t = 0.3
    b = 0.1 * t + 9.95 * t * t
    m, s = sde.kernel_moments(t)
    assert m == pytest.approx(math.exp(-b / 2), rel=1e-12)
    assert s == pytest.approx(1 - math.exp(-b), rel=1e-12)


def test_accurate_estimate_matches_mixture_density():
    g = pflow.reference_three_component()
    model = pflow.GaussianMixtureScore(g)
    cfg = pflow.SolverConfig.accurate(2)
    for x in ([0.1, -0.2], [-0.5, 0.4]):
        est = pflow.log_likelihood_forward(x, cfg, model)
        assert est.total == pytest.approx(pflow.gmm_logp0(x, g), abs=1e-3)
        assert est.total == pytest.approx(est.integral + est.prior)


def test_reverse_round_trip():
    model = pflow.GaussianMixtureScore(pflow.reference_two_component())
    cfg = pflow.SolverConfig.accurate(2)
    x1, logdet = pflow.solve([0.3, 0.1], cfg, model)
    est, x0 = pflow.log_likelihood_reverse(x1, cfg, model)
    assert x0 == pytest.approx([0.3, 0.1], abs=1e-6)
    assert est.integral == pytest.approx(logdet, abs=1e-6)


def test_complexity_of_flat_and_noisy_images():
    import random

    rng = random.Random(0)
    shape = (1, 16, 16)
    flat = [0.0] * 256
    noise = [rng.uniform(-1, 1) for _ in range(256)]
    assert pflow.complexity_png(flat, shape) < pflow.complexity_png(noise, shape)
    png = pflow.encode_png(flat, shape)
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    assert pflow.complexity_png(flat, shape) == pytest.approx(len(png) * 8 / (256 * 8))


def test_unrestricted_attack_reaches_a_mode():
    g = pflow.reference_two_component()
    model = pflow.GaussianMixtureScore(g)
    cfg = pflow.AttackConfig.defaults(pflow.AttackKind.UNRESTRICTED, seed=1)
    r = pflow.run_attack(model, cfg)
    assert not r.aborted
    assert len(r.objective) == r.steps + 1
    assert min(math.dist(r.x, mu) for mu in g.means) < 0.1


def test_bad_config_raises(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"version": 1, "experiment": "estimate", "bogus": 1}))
    with pytest.raises(pflow.ConfigError):
        pflow.run(p, output_dir=str(tmp_path / "out"))


def test_run_estimate_config(tmp_path):
    p = tmp_path / "est.json"
    p.write_text(json.dumps({
        "version": 1, "experiment": "estimate", "seed": 0,
        "model": {"type": "gmm", "preset": "three_component"},
        "dataset": {"type": "uniform", "n": 2, "seed": 1},
    }))
    code, out, summary = pflow.run(p, output_dir=str(tmp_path / "out"))
    assert code == 0
    assert (tmp_path / "out" / "estimates.csv").exists()
    assert isinstance(summary, dict)
