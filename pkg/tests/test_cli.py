"""End-to-end checks of the `lopt` command line entry points."""

import csv
import io
import warnings

import numpy as np
import pytest

from lopt.cli import (
    BENCH_HEADER,
    BENCH_SCHEMA,
    DIST_SCHEMA,
    TRAIN_HEADER,
    TRAIN_SCHEMA,
    BenchConfig,
    CliError,
    cmd_bench,
    cmd_distbench,
    cmd_plot,
    cmd_train,
    cmd_weights_inspect,
    main,
)
from lopt.engine import load_weights, random_weights, save_weights, zero_weights
from lopt.features import small_fc_lopt_spec


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# bench


def test_bench_csv_layout_and_determinism(tmp_path):
    cfg = dict(widths=[32], depths=[1, 2], repeats=3, warmup=1, seed=7)
    p1, p2 = str(tmp_path / "b1.csv"), str(tmp_path / "b2.csv")
    cmd_bench(BenchConfig(out=p1, **cfg))
    cmd_bench(BenchConfig(out=p2, **cfg))
    r1, r2 = _rows(p1), _rows(p2)
    with open(p1, newline="") as f:
        assert next(csv.reader(f)) == BENCH_HEADER
    assert len(r1) == 2 * 2  # two depths x two default optimizers
    timing = {"median_ms", "p10_ms", "p90_ms"}
    for a, b in zip(r1, r2):
        assert {k: v for k, v in a.items() if k not in timing} == \
               {k: v for k, v in b.items() if k not in timing}
        assert a["schema"] == BENCH_SCHEMA
        assert float(a["median_ms"]) > 0
        assert int(a["elements"]) == 32 * 32 * int(a["depth"])


def test_bench_oom_row_for_naive_under_cap(tmp_path):
    out = str(tmp_path / "oom.csv")
    cmd_bench(BenchConfig(widths=[256], depths=[1], repeats=3,
                          scratch_cap_bytes=2 << 20, out=out))
    by_opt = {r["optimizer"]: r for r in _rows(out)}
    naive, fused = by_opt["lopt_naive"], by_opt["lopt_fused"]
    assert naive["status"] == "OOM"
    assert naive["median_ms"] == ""
    assert int(naive["kernel_equivalents"]) == 2 * 39 + 3 + 2
    assert fused["status"] == "ok"
    assert int(fused["scratch_peak_bytes"]) <= 2 << 20


def test_bench_transformer_proxy_inventory(tmp_path):
    out = str(tmp_path / "tp.csv")
    cmd_bench(BenchConfig(workload="transformer_proxy", optimizers=["adam"],
                          repeats=3, out=out))
    (row,) = _rows(out)
    assert row["point"] == "transformer_proxy"
    assert int(row["tensors"]) == 34
    assert int(row["elements"]) == 229952
    assert row["status"] == "ok"


def test_bench_config_validation():
    with pytest.raises(CliError):
        BenchConfig(optimizers=["sgd"])
    with pytest.raises(CliError):
        BenchConfig(repeats=2)
    with pytest.raises(CliError):
        BenchConfig(warmup=0)
    with pytest.raises(CliError):
        BenchConfig(widths=[])
    with pytest.raises(CliError):
        BenchConfig(workload="resnet")


# ---------------------------------------------------------------------------
# train


def test_train_adam_quadratic_monotone(tmp_path):
    out = str(tmp_path / "adam.csv")
    cmd_train("quadratic", "adam", 15, lr=0.05, out=out)
    rows = _rows(out)
    assert [r["schema"] for r in rows] == [TRAIN_SCHEMA] * 15
    assert all(r["status"] == "ok" for r in rows)
    losses = np.array([float(r["loss"]) for r in rows])
    assert np.all(np.diff(losses) < 0)


def test_train_zero_network_holds_loss_constant(tmp_path):
    wpath = str(tmp_path / "zero.lw")
    spec = small_fc_lopt_spec()
    save_weights(zero_weights(spec.d_feat), spec, wpath)
    out = str(tmp_path / "z.csv")
    cmd_train("quadratic", "lopt_fused", 6, weights_path=wpath, out=out)
    losses = [r["loss"] for r in _rows(out)]
    assert len(set(losses)) == 1  # exact repr equality: parameters never move


def test_train_fused_and_naive_losses_agree(tmp_path):
    pn, pf = str(tmp_path / "n.csv"), str(tmp_path / "f.csv")
    cmd_train("two_moons_mlp", "lopt_naive", 12, seed=4, lr=0.5, out=pn)
    cmd_train("two_moons_mlp", "lopt_fused", 12, seed=4, lr=0.5, out=pf)
    ln = np.array([float(r["loss"]) for r in _rows(pn)])
    lf = np.array([float(r["loss"]) for r in _rows(pf)])
    assert ln.shape == lf.shape == (12,)
    np.testing.assert_allclose(lf, ln, rtol=1e-5)


def test_train_divergence_is_recorded_not_raised(tmp_path, capsys):
    out = str(tmp_path / "div.csv")
    with warnings.catch_warnings():
        # the huge lr overflows f32 on purpose; the run must still finish
        warnings.simplefilter("ignore", RuntimeWarning)
        rc = main(["train", "--task", "quadratic", "--optimizer", "adafactor",
                   "--steps", "10", "--lr", "1e38", "--out", out])
    assert rc == 0
    rows = _rows(out)
    assert rows[-1]["status"] == "divergent"
    assert all(r["status"] == "ok" for r in rows[:-1])
    assert len(rows) < 10  # stopped early
    assert "diverged" in capsys.readouterr().err


def test_train_argument_validation(tmp_path):
    with pytest.raises(CliError):
        cmd_train("mnist", "adam", 5)
    with pytest.raises(CliError):
        cmd_train("quadratic", "sgd", 5)
    with pytest.raises(CliError):
        cmd_train("quadratic", "adam", 0)


# ---------------------------------------------------------------------------
# distbench


def test_distbench_reduce_scatter_trace(tmp_path):
    out = str(tmp_path / "rs.csv")
    rc = main(["distbench", "--strategy", "rs", "--workers", "4",
               "--width", "16", "--tensors", "4", "--out", out])
    assert rc == 0
    rows = _rows(out)
    assert {r["schema"] for r in rows} == {DIST_SCHEMA}
    assert {r["workers"] for r in rows} == {"4"}
    phases = {r["phase"] for r in rows}
    assert phases == {"gradient reduce", "factor merge", "stats merge",
                      "optimizer step", "parameter gather"}
    by_phase = {r["phase"]: r for r in rows}
    assert int(by_phase["optimizer step"]["bytes"]) == 0
    assert int(by_phase["gradient reduce"]["bytes"]) > 0
    for r in rows:
        float(r["time_ms"])
        if r["sim_time_ms"]:
            assert float(r["sim_time_ms"]) >= 0.0


def test_distbench_single_worker_moves_no_bytes(tmp_path):
    out = str(tmp_path / "ar1.csv")
    assert main(["distbench", "--strategy", "allreduce", "--workers", "1",
                 "--width", "8", "--tensors", "2", "--out", out]) == 0
    assert all(int(r["bytes"]) == 0 for r in _rows(out))


def test_distbench_rejects_unknown_strategy():
    with pytest.raises(CliError):
        cmd_distbench("ring", 2)


# ---------------------------------------------------------------------------
# plot


def test_plot_bench_and_train_curves(tmp_path):
    bench = str(tmp_path / "b.csv")
    cmd_bench(BenchConfig(widths=[16, 32], depths=[1], repeats=3, out=bench))
    png = str(tmp_path / "b.png")
    assert cmd_plot(bench, "step_time_vs_width", out=png) == png
    assert (tmp_path / "b.png").stat().st_size > 0

    train = str(tmp_path / "t.csv")
    cmd_train("quadratic", "adam", 5, out=train)
    png2 = str(tmp_path / "t.png")
    cmd_plot(train, "loss_curve", out=png2)
    assert (tmp_path / "t.png").stat().st_size > 0


def test_plot_rejects_schema_mismatch(tmp_path):
    train = str(tmp_path / "t.csv")
    cmd_train("quadratic", "adam", 3, out=train)
    with pytest.raises(CliError, match="schema"):
        cmd_plot(train, "step_time_vs_width", out=str(tmp_path / "x.png"))
    with pytest.raises(CliError):
        cmd_plot(train, "not_a_kind", out=str(tmp_path / "x.png"))


def test_plot_rejects_empty_csv(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("schema,task,optimizer,step,loss,status\n")
    with pytest.raises(CliError, match="no data rows"):
        cmd_plot(str(p), "loss_curve")


# ---------------------------------------------------------------------------
# weights tools + exit codes


def test_weights_inspect_reports_topology(tmp_path):
    spec = small_fc_lopt_spec()
    p = str(tmp_path / "w.lw")
    save_weights(random_weights(spec.d_feat, seed=3), spec, p)
    buf = io.StringIO()
    cmd_weights_inspect(p, stream=buf)
    text = buf.getvalue()
    assert "39 features" in text
    assert "39 -> 32 -> 32 -> 2" in text
    assert "update_sign: -1" in text


def test_weights_convert_round_trip(tmp_path):
    spec = small_fc_lopt_spec()
    src = str(tmp_path / "a.lw")
    dst = str(tmp_path / "b.lw")
    save_weights(random_weights(spec.d_feat, seed=5), spec, src)
    assert main(["weights", "convert", "--path", src, "--out", dst]) == 0
    wa, sa = load_weights(src)
    wb, sb = load_weights(dst)
    assert sa.id == sb.id
    for (lw, lb), (mw, mb) in zip(wa.layers, wb.layers):
        assert lw.tobytes() == mw.tobytes()
        assert lb.tobytes() == mb.tobytes()


def test_main_reports_errors_with_exit_code_one(tmp_path, capsys):
    rc = main(["weights", "inspect", "--path", str(tmp_path / "missing.lw")])
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")

    rc = main(["bench", "--repeats", "1", "--out", str(tmp_path / "x.csv")])
    assert rc == 1
    assert "repeats" in capsys.readouterr().err


def test_main_bench_end_to_end(tmp_path, capsys):
    out = str(tmp_path / "cli.csv")
    rc = main(["bench", "--widths", "16", "--depths", "1",
               "--optimizer", "adam,lopt_fused", "--repeats", "3", "--out", out])
    assert rc == 0
    assert f"wrote {out}" in capsys.readouterr().out
    assert [r["optimizer"] for r in _rows(out)] == ["adam", "lopt_fused"]
