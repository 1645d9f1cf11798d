import json
import math

import numpy as np
import pytest
import torch
from helpers import tiny_model

import structdgp.metrics as metrics_mod
from structdgp import NormStats, toy_sine
from structdgp.checkpoint import load_checkpoint, save_checkpoint
from structdgp.cli import main
from structdgp.metrics import compare_runs, win_frequency
from structdgp.metrics import test_metrics as eval_metrics
from structdgp.model import eval_cache, predict
from structdgp.training import elbo, flatten_params


class FakeStats:
    pass


def make_stats(y_mean=2.0, y_std=3.0, d=1):
    return NormStats(np.zeros(d), np.ones(d), y_mean, y_std)


class TestTestMetrics:
    def test_perfect_predictor(self, monkeypatch):
        model, xn, yn = tiny_model("mf", seed=0)
        stats = make_stats(0.0, 1.0)
        y = stats.denorm_y(yn)
        with torch.no_grad():
            model.log_noise.fill_(math.log(1e-8))
        mu = torch.as_tensor(yn)[:, None].repeat(1, 4)
        var = torch.zeros_like(mu)
        monkeypatch.setattr(metrics_mod, "predict", lambda *a, **k: (mu, var))
        res = eval_metrics(model, xn, y, stats, num_paths=4)
        assert res["tll"] > 5.0
        assert res["rmse"] < 1e-12

    def test_single_component_reduces_to_gaussian(self, monkeypatch):
        model, xn, yn = tiny_model("mf", seed=1)
        stats = make_stats()
        y = stats.denorm_y(yn)
        gen = np.random.default_rng(2)
        mu = torch.as_tensor(gen.standard_normal((len(yn), 1)))
        var = torch.as_tensor(gen.uniform(0.1, 0.5, (len(yn), 1)))
        monkeypatch.setattr(metrics_mod, "predict", lambda *a, **k: (mu, var))
        res = eval_metrics(model, xn, y, stats, num_paths=1)
        s2 = float(model.noise_variance)
        m = stats.y_mean + stats.y_std * mu.numpy()[:, 0]
        v = stats.y_std**2 * (var.numpy()[:, 0] + s2)
        expect = -0.5 * np.log(2 * np.pi * v) - 0.5 * (y - m) ** 2 / v
        np.testing.assert_allclose(res["per_point"]["log_density"], expect, atol=1e-12)

    def test_single_layer_matches_sparse_gp_formula(self):
        model, xn, yn = tiny_model("mf", layers=1, tau=1, m=5, n=30, seed=3)
        stats = make_stats(1.5, 2.5)
        y = stats.denorm_y(yn)
        res = eval_metrics(model, xn, y, stats, num_paths=7, seed=0)
        # direct sparse-GP predictive: N(K~ mu, kd + K~ S K~^T + s2)
        cache = eval_cache(model)
        from structdgp.kernel import conditional_terms_with_chol

        kt, kd = conditional_terms_with_chol(
            model.kernels[0], model.inducing[0], cache.l_mm[0], torch.as_tensor(xn)
        )
        d = model.factor.diag_blocks()[0]
        s = d @ d.T
        mu_f = (kt @ model.factor.mu).numpy()
        var_f = (kd + torch.einsum("nm,mk,nk->n", kt, s, kt)).numpy()
        s2 = float(model.noise_variance)
        m = stats.y_mean + stats.y_std * mu_f
        v = stats.y_std**2 * (var_f + s2)
        expect = -0.5 * np.log(2 * np.pi * v) - 0.5 * (y - m) ** 2 / v
        np.testing.assert_allclose(res["per_point"]["log_density"], expect, atol=1e-6)
        assert abs(res["tll"] - expect.mean()) < 1e-6

    def test_denormalized_tll_shift(self):
        # de-normalized tll == normalized tll - log(std_y), exactly
        model, xn, yn = tiny_model("star", seed=4)
        y_std = 3.7
        stats_unit = make_stats(0.0, 1.0)
        stats_scaled = make_stats(0.0, y_std)
        res_unit = eval_metrics(model, xn, stats_unit.denorm_y(yn), stats_unit,
                                num_paths=6, seed=2)
        res_scaled = eval_metrics(model, xn, stats_scaled.denorm_y(yn), stats_scaled,
                                  num_paths=6, seed=2)
        np.testing.assert_allclose(
            res_scaled["tll"], res_unit["tll"] - math.log(y_std), atol=1e-12
        )


class TestWinFrequency:
    def test_ties_count_half(self):
        assert win_frequency([1.0, 2.0, 3.0], [1.0, 1.0, 4.0]) == pytest.approx(
            (0.5 + 1.0 + 0.0) / 3
        )

    def test_compare_runs(self):
        a = {"per_point": {"log_density": [1.0, 2.0]}}
        b = {"per_point": {"log_density": [0.0, 3.0]}}
        out = compare_runs([a, a], [b, b])
        assert out["mean"] == pytest.approx(0.5)
        assert out["se"] == pytest.approx(0.0)


class TestCheckpoint:
    @pytest.mark.parametrize("structure", ("mf", "star", "fc"))
    def test_round_trip_bitwise(self, structure, tmp_path):
        model, xn, yn = tiny_model(structure, seed=5)
        path = tmp_path / "m.bin"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        np.testing.assert_array_equal(
            flatten_params(loaded).numpy(), flatten_params(model).numpy()
        )
        for w1, w2 in zip(model.mean_maps, loaded.mean_maps):
            np.testing.assert_array_equal(w1.numpy(), w2.numpy())
        a = float(elbo(model, xn, yn, 2, seed=3, n_total=len(yn)))
        b = float(elbo(loaded, xn, yn, 2, seed=3, n_total=len(yn)))
        assert a == b

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.bin"
        p.write_bytes(b"nope" + b"\0" * 64)
        with pytest.raises(ValueError):
            load_checkpoint(p)


class TestCli:
    @pytest.fixture()
    def toy_csv(self, tmp_path):
        x, y = toy_sine(60, seed=0)
        path = tmp_path / "toy.csv"
        np.savetxt(path, np.column_stack([x, y]), delimiter=",")
        return path

    def test_train_evaluate_export_compare(self, toy_csv, tmp_path):
        run = tmp_path / "run"
        main([
            "train", "--data", str(toy_csv), "--split", "interp", "--structure",
            "star", "--layers", "2", "--width", "2", "--inducing", "4", "--iters",
            "20", "--mbs", "64", "--samples", "2", "--lr", "0.01", "--seed", "1",
            "--out", str(run),
        ])
        assert (run / "checkpoint.bin").exists()
        history = [json.loads(l) for l in (run / "history.jsonl").read_text().splitlines()]
        assert len(history) == 20
        assert {"iteration", "elbo", "lr", "val_tll", "wall_ms"} == set(history[0])

        main(["evaluate", "--run", str(run), "--samples", "5", "--seed", "2"])
        metrics = json.loads((run / "metrics.json").read_text())
        assert "tll" in metrics and len(metrics["per_point"]["mu"]) == 6

        cov_csv = tmp_path / "cov.csv"
        main(["export-cov", "--run", str(run), "--out", str(cov_csv)])
        mat = np.loadtxt(cov_csv, delimiter=",")
        assert mat.shape == (12, 12)  # T*M = 3*4

        cmp_out = tmp_path / "cmp.json"
        main([
            "compare", "--metrics-a", str(run / "metrics.json"), "--metrics-b",
            str(run / "metrics.json"), "--out", str(cmp_out),
        ])
        cmp = json.loads(cmp_out.read_text())
        assert cmp["mean"] == pytest.approx(0.5)  # self-comparison is all ties

    def test_bench_writes_table(self, tmp_path):
        out = tmp_path / "bench.csv"
        main([
            "bench", "--structure", "mf", "--inducing", "4,8", "--layers", "2",
            "--width", "2", "--reps", "20", "--mbs", "32", "--samples", "1",
            "--seed", "0", "--out", str(out),
        ])
        rows = out.read_text().splitlines()
        assert rows[0].startswith("structure,")
        assert len(rows) == 3

    def test_thread_cap_env(self, toy_csv, tmp_path, monkeypatch):
        import torch as _torch

        before = _torch.get_num_threads()
        monkeypatch.setenv("STRUCTDGP_THREADS", "1")
        out = tmp_path / "bench1.csv"
        main(["bench", "--structure", "mf", "--inducing", "4", "--layers", "2",
              "--width", "2", "--reps", "20", "--mbs", "16", "--samples", "1",
              "--seed", "0", "--out", str(out)])
        assert _torch.get_num_threads() == 1
        _torch.set_num_threads(before)
