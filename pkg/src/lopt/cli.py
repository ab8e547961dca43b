"""Command-line surface: benchmark sweeps, a toy training harness,
distributed-step traces, plots, and weights-file tools.

CSV schemas are versioned by a literal `schema` column on every row
(bench_v1, train_v1, dist_v1); cmd_plot refuses files whose schema does not
match the requested chart kind. All commands are deterministic for a fixed
seed except wall-clock columns.

Benchmark semantics: a workload point is a list of parameter tensor shapes
(an MLP of given width/depth, or a fixed transformer-like shape multiset).
Each optimizer row times the update computation itself on fresh accumulator
state; timing excludes the shared accumulator advance, which is identical
work for every optimizer path. Warmup iterations absorb JIT compilation and
allocator effects and never enter the statistics. Gradients above 64M
elements are zeros so that oversized sweep points stay within desk memory;
the update arithmetic is value-independent, so timing is unaffected.

Pass-count column: learned-optimizer rows use the engine's accounting;
baseline rows use fixed documented constants (adam 4 bulk passes: two
moment updates, update construction, apply; adafactor 3: squared-gradient
reduction, scale construction, apply).
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .distsim import (
    CostModel,
    Strategy,
    make_plan,
    run_allreduce_step,
    run_fsdp_a2a_step,
    run_reduce_scatter_step,
    validate_trace,
)
from .engine import (
    LoptWeights,
    ScratchLimitError,
    ScratchTracker,
    count_kernel_equivalents,
    load_weights,
    random_weights,
    save_weights,
    step_fused,
    step_naive,
    zero_weights,
)
from .features import small_fc_lopt_spec, spec_by_name
from .optim import (
    OptimizerHandle,
    ScheduleConfig,
    adafactor_step,
    adam_step,
    opt_step,
)
from .state import OptState, state_step

F32 = np.float32

WEIGHTS_ENV = "LOPT_WEIGHTS"

BENCH_SCHEMA = "bench_v1"
TRAIN_SCHEMA = "train_v1"
DIST_SCHEMA = "dist_v1"

BENCH_HEADER = [
    "schema", "workload", "point", "width", "depth", "tensors", "elements",
    "optimizer", "repeats", "warmup", "median_ms", "p10_ms", "p90_ms",
    "scratch_peak_bytes", "kernel_equivalents", "status",
]
TRAIN_HEADER = ["schema", "task", "optimizer", "step", "loss", "status"]
DIST_HEADER = ["schema", "strategy", "workers", "phase", "bytes", "time_ms", "sim_time_ms"]

BASELINE_PASSES = {"adam": 4, "adafactor": 3}

# gradient buffers above this element count are zeros, not random draws
RANDOM_GRAD_LIMIT = 64 * 1024 * 1024


class CliError(Exception):
    pass


@dataclass
class BenchConfig:
    workload: str = "mlp_sweep"
    widths: list[int] = field(default_factory=lambda: [256])
    depths: list[int] = field(default_factory=lambda: [1])
    optimizers: list[str] = field(default_factory=lambda: ["lopt_naive", "lopt_fused"])
    repeats: int = 5
    warmup: int = 1
    seed: int = 0
    out: str = "bench.csv"
    workers: int = 1
    scratch_cap_bytes: int | None = None
    weights_path: str | None = None

    def __post_init__(self):
        if self.workload not in ("mlp_sweep", "transformer_proxy"):
            raise CliError(f"unknown workload {self.workload!r}")
        bad = set(self.optimizers) - {"adam", "adafactor", "lopt_naive", "lopt_fused"}
        if bad:
            raise CliError(f"unknown optimizers {sorted(bad)}")
        if self.repeats < 3:
            raise CliError("repeats must be >= 3")
        if self.warmup < 1:
            raise CliError("warmup must be >= 1 (first-iteration effects excluded)")
        if not self.widths or not self.depths:
            raise CliError("widths and depths must be nonempty")


def _transformer_proxy_shapes() -> list[tuple[int, int]]:
    """Tensor-shape multiset of a small decoder-style model: embedding,
    per-block attention and MLP matrices plus norm vectors, final norm."""
    d, ff, vocab, blocks = 64, 256, 512, 4
    shapes: list[tuple[int, int]] = [(vocab, d)]
    for _ in range(blocks):
        shapes += [(d, d)] * 4        # q, k, v, out
        shapes += [(d, ff), (ff, d)]  # mlp in / out
        shapes += [(d, 1), (d, 1)]    # pre-attn / pre-mlp norm scales
    shapes.append((d, 1))
    return shapes


def _workload_points(cfg: BenchConfig):
    if cfg.workload == "mlp_sweep":
        for w in cfg.widths:
            for dpt in cfg.depths:
                yield f"mlp_w{w}_d{dpt}", w, dpt, [(w, w)] * dpt
    else:
        shapes = _transformer_proxy_shapes()
        yield "transformer_proxy", 0, 0, shapes


def _bench_weights(cfg: BenchConfig) -> LoptWeights:
    path = cfg.weights_path or os.environ.get(WEIGHTS_ENV)
    if path:
        w, _ = load_weights(path)
        return w
    return random_weights(small_fc_lopt_spec().d_feat, seed=cfg.seed)


def _point_tensors(shapes, seed):
    rng = np.random.default_rng(seed)
    Ws, gs, states = [], [], []
    for m, n in shapes:
        Ws.append(rng.standard_normal((m, n), dtype=F32))
        if m * n > RANDOM_GRAD_LIMIT:
            gs.append(np.zeros((m, n), dtype=F32))
        else:
            gs.append(rng.standard_normal((m, n), dtype=F32))
        states.append(OptState.zeros(m, n))
    return Ws, gs, states


def cmd_bench(cfg: BenchConfig) -> str:
    spec = small_fc_lopt_spec()
    weights = _bench_weights(cfg)
    rows = []
    for point, width, depth, shapes in _workload_points(cfg):
        Ws, gs, states = _point_tensors(shapes, cfg.seed)
        elements = sum(m * n for m, n in shapes)
        for opt in cfg.optimizers:
            row = {
                "schema": BENCH_SCHEMA, "workload": cfg.workload, "point": point,
                "width": width, "depth": depth, "tensors": len(shapes),
                "elements": elements, "optimizer": opt, "repeats": cfg.repeats,
                "warmup": cfg.warmup, "median_ms": "", "p10_ms": "", "p90_ms": "",
                "scratch_peak_bytes": 0, "kernel_equivalents": 0, "status": "ok",
            }
            try:
                times, peak, passes = _bench_one(opt, Ws, gs, states, weights, spec, cfg)
                arr = np.array(times)
                row["median_ms"] = f"{np.median(arr) * 1e3:.3f}"
                row["p10_ms"] = f"{np.percentile(arr, 10) * 1e3:.3f}"
                row["p90_ms"] = f"{np.percentile(arr, 90) * 1e3:.3f}"
                row["scratch_peak_bytes"] = peak
                row["kernel_equivalents"] = passes
            except ScratchLimitError as e:
                row["status"] = "OOM"
                row["scratch_peak_bytes"] = e.in_use
                row["kernel_equivalents"] = count_kernel_equivalents(
                    opt.removeprefix("lopt_"), spec
                )
            rows.append(row)
    with open(cfg.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=BENCH_HEADER)
        w.writeheader()
        w.writerows(rows)
    return cfg.out


def _bench_one(opt, Ws, gs, states, weights, spec, cfg: BenchConfig):
    times = []
    if opt in ("lopt_naive", "lopt_fused"):
        step_fn = step_naive if opt == "lopt_naive" else step_fused
        tracker = ScratchTracker(cfg.scratch_cap_bytes)
        for it in range(cfg.warmup + cfg.repeats):
            t0 = time.perf_counter()
            for W, g, s in zip(Ws, gs, states):
                kw = {"tracker": tracker}
                if opt == "lopt_fused":
                    kw["workers"] = cfg.workers
                step_fn(W, g, s, weights, spec, **kw)
            if it >= cfg.warmup:
                times.append(time.perf_counter() - t0)
        passes = count_kernel_equivalents(opt.removeprefix("lopt_"), spec, weights.n_layers)
        return times, tracker.peak_bytes, passes
    if opt == "adam":
        ms = [np.zeros_like(W) for W in Ws]
        vs = [np.zeros_like(W) for W in Ws]
        for it in range(cfg.warmup + cfg.repeats):
            t0 = time.perf_counter()
            for W, g, m, v in zip(Ws, gs, ms, vs):
                adam_step(W, g, m, v, lr=1e-3, t=it + 1)
            if it >= cfg.warmup:
                times.append(time.perf_counter() - t0)
        return times, 0, BASELINE_PASSES[opt]
    rs = [np.zeros(W.shape[0], dtype=F32) for W in Ws]
    cs = [np.zeros(W.shape[1], dtype=F32) for W in Ws]
    for it in range(cfg.warmup + cfg.repeats):
        t0 = time.perf_counter()
        for W, g, r, c in zip(Ws, gs, rs, cs):
            adafactor_step(W, g, r, c, lr=1e-3)
        if it >= cfg.warmup:
            times.append(time.perf_counter() - t0)
    return times, 0, BASELINE_PASSES[opt]


# ---------------------------------------------------------------------------
# toy training


def _two_moons(n: int, seed: int):
    rng = np.random.default_rng(seed)
    half = n // 2
    ang = rng.uniform(0.0, np.pi, size=half)
    x0 = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    x1 = np.stack([1.0 - np.cos(ang), 0.5 - np.sin(ang)], axis=1)
    X = np.concatenate([x0, x1]).astype(F32)
    X += rng.normal(scale=0.1, size=X.shape).astype(F32)
    y = np.concatenate([np.zeros(half), np.ones(half)]).astype(F32)
    return X, y


def _moons_loss_grads(params, X, y):
    """Two-layer classifier, binary cross-entropy with logits, manual
    gradients. params = [W1 (h,2), b1 (h,1), W2 (1,h), b2 (1,1)]."""
    W1, b1, W2, b2 = params
    z1 = X @ W1.T + b1.ravel()
    h = np.maximum(z1, 0.0)
    logits = (h @ W2.T + b2.ravel()).ravel()
    p = 1.0 / (1.0 + np.exp(-logits))
    eps = 1e-7
    loss = float(np.mean(-(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))))
    B = X.shape[0]
    dlogits = ((p - y) / B).astype(F32)
    gW2 = (dlogits[None, :] @ h).astype(F32)
    gb2 = np.array([[dlogits.sum()]], dtype=F32)
    dh = dlogits[:, None] * W2
    dz1 = (dh * (z1 > 0)).astype(F32)
    gW1 = (dz1.T @ X).astype(F32)
    gb1 = dz1.sum(axis=0).astype(F32)[:, None]
    return loss, [gW1, gb1, gW2, gb2]


def _quadratic_setup(seed):
    rng = np.random.default_rng(seed)
    theta = rng.standard_normal((8, 8), dtype=F32)
    return [("theta", theta)]


def cmd_train(
    task: str,
    optimizer: str,
    steps: int,
    seed: int = 0,
    out: str = "train.csv",
    lr: float = 0.1,
    workers: int = 1,
    weights_path: str | None = None,
) -> str:
    if task not in ("quadratic", "two_moons_mlp"):
        raise CliError(f"unknown task {task!r}")
    if optimizer not in ("adam", "adafactor", "lopt_naive", "lopt_fused"):
        raise CliError(f"unknown optimizer {optimizer!r}")
    if steps < 1:
        raise CliError("steps must be >= 1")

    if task == "quadratic":
        named = _quadratic_setup(seed)
        X = y = None
    else:
        rng = np.random.default_rng(seed)
        h = 16
        named = [
            ("W1", rng.standard_normal((h, 2), dtype=F32) * F32(0.5)),
            ("b1", np.zeros((h, 1), dtype=F32)),
            ("W2", rng.standard_normal((1, h), dtype=F32) * F32(0.5)),
            ("b2", np.zeros((1, 1), dtype=F32)),
        ]
        X, y = _two_moons(256, seed)

    def loss_grads(tensors):
        if task == "quadratic":
            th = tensors[0]
            return float(0.5 * np.sum(np.square(th, dtype=np.float64))), [th.copy()]
        return _moons_loss_grads(tensors, X, y)

    spec = small_fc_lopt_spec()
    handle = None
    adam_state = None
    ada_state = None
    if optimizer in ("lopt_naive", "lopt_fused"):
        wpath = weights_path or os.environ.get(WEIGHTS_ENV)
        if wpath:
            weights, spec = load_weights(wpath)
        else:
            weights = random_weights(spec.d_feat, seed=seed, scale=0.05)
        handle = OptimizerHandle.fresh(
            named, weights, spec,
            schedule=ScheduleConfig(kind="constant", max_lr=lr),
            path=optimizer.removeprefix("lopt_"),
            workers=workers,
        )
    elif optimizer == "adam":
        adam_state = [(np.zeros_like(p), np.zeros_like(p)) for _, p in named]
    else:
        ada_state = [
            (np.zeros(p.shape[0], dtype=F32), np.zeros(p.shape[1], dtype=F32))
            for _, p in named
        ]

    tensors = [p.copy() for _, p in named]
    rows = []
    status = "ok"
    for step in range(1, steps + 1):
        loss, grads = loss_grads(tensors)
        if not np.isfinite(loss):
            rows.append({"schema": TRAIN_SCHEMA, "task": task, "optimizer": optimizer,
                         "step": step, "loss": repr(loss), "status": "divergent"})
            status = "divergent"
            break
        rows.append({"schema": TRAIN_SCHEMA, "task": task, "optimizer": optimizer,
                     "step": step, "loss": repr(loss), "status": "ok"})
        if handle is not None:
            opt_step(handle, grads, loss=loss)
            tensors = [p.data.copy() for _, p in handle.params]
        elif optimizer == "adam":
            for j, (th, g) in enumerate(zip(tensors, grads)):
                m, v = adam_state[j]
                th2, m2, v2 = adam_step(th, g, m, v, lr=lr, t=step)
                tensors[j] = th2
                adam_state[j] = (m2, v2)
        else:
            for j, (th, g) in enumerate(zip(tensors, grads)):
                r, c = ada_state[j]
                th2, r2, c2 = adafactor_step(th, g, r, c, lr=lr)
                tensors[j] = th2
                ada_state[j] = (r2, c2)
    with open(out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRAIN_HEADER)
        w.writeheader()
        w.writerows(rows)
    if status == "divergent":
        print(f"training diverged at step {len(rows)}; partial log in {out}", file=sys.stderr)
    return out


# ---------------------------------------------------------------------------
# distributed trace


_STRATEGY_FLAGS = {
    "allreduce": Strategy.ALL_REDUCE,
    "rs": Strategy.REDUCE_SCATTER,
    "a2a": Strategy.FSDP_A2A,
}


def cmd_distbench(
    strategy: str,
    workers: int,
    width: int = 64,
    tensors: int = 8,
    seed: int = 0,
    out: str = "dist.csv",
) -> str:
    if strategy not in _STRATEGY_FLAGS:
        raise CliError(f"unknown strategy {strategy!r} (allreduce|rs|a2a)")
    strat = _STRATEGY_FLAGS[strategy]
    rng = np.random.default_rng(seed)
    spec = small_fc_lopt_spec()
    weights = random_weights(spec.d_feat, seed=seed, scale=0.05)
    named = [(f"t{j}", T.ParamTensor(rng.standard_normal((width, width), dtype=F32)))
             for j in range(tensors)]
    shapes = [p.shape for _, p in named]
    grads = [[rng.standard_normal((width, width), dtype=F32) for _ in range(tensors)]
             for _ in range(workers)]

    def fresh_handle():
        return OptimizerHandle(
            params=[(n, T.ParamTensor(p.data.copy())) for n, p in named],
            states=[OptState.zeros(*s) for s in shapes],
            weights=weights, spec=spec,
        )

    # single-device oracle on the same averaged gradient
    from .distsim import mean_grads

    oracle_h = fresh_handle()
    gbar = mean_grads(named, grads)
    opt_step(oracle_h, gbar)

    h = fresh_handle()
    cost = CostModel()
    if strat is Strategy.ALL_REDUCE:
        model2, trace = run_allreduce_step(named, grads, h, cost_model=cost)
        plan = make_plan(strat, shapes, workers)
    else:
        plan = make_plan(strat, shapes, workers)
        run = run_reduce_scatter_step if strat is Strategy.REDUCE_SCATTER else run_fsdp_a2a_step
        model2, trace = run(named, grads, h, plan, cost_model=cost)

    # relative check floored at the update magnitude: parameters that land
    # near zero after the step would otherwise blow up a bare relative error
    upd_scale = max(
        float(np.max(np.abs(p2.data - p0.data)))
        for (_, p2), (_, p0) in zip(model2, named)
    )
    for (name, p2), (_, po) in zip(model2, oracle_h.params):
        err = np.max(np.abs(p2.data - po.data) / (np.abs(po.data) + upd_scale + 1e-30))
        if err > 1e-6:
            raise CliError(f"strategy diverged from single-device oracle on {name!r}: {err}")
    validate_trace(trace, plan, shapes, spec.d_feat)

    with open(out, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(DIST_HEADER)
        for r in trace.records:
            sim = "" if r.sim_time_ms is None else f"{r.sim_time_ms:.6f}"
            w.writerow([DIST_SCHEMA, trace.strategy.value, trace.workers,
                        r.phase, r.bytes, f"{r.time_ms:.3f}", sim])
    return out


# ---------------------------------------------------------------------------
# plots


_KIND_SCHEMA = {
    "step_time_vs_width": BENCH_SCHEMA,
    "step_time_vs_depth": BENCH_SCHEMA,
    "loss_curve": TRAIN_SCHEMA,
}


def _read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise CliError(f"{path}: no data rows")
    return rows


def cmd_plot(csv_path: str, kind: str, out: str = "plot.png") -> str:
    if kind not in _KIND_SCHEMA:
        raise CliError(f"unknown plot kind {kind!r}")
    rows = _read_csv(csv_path)
    schema = rows[0].get("schema")
    if schema != _KIND_SCHEMA[kind]:
        raise CliError(
            f"{csv_path}: schema {schema!r} does not match kind {kind!r} "
            f"(expected {_KIND_SCHEMA[kind]!r})"
        )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 5))
    if kind in ("step_time_vs_width", "step_time_vs_depth"):
        xkey = "width" if kind == "step_time_vs_width" else "depth"
        series: dict[str, list[tuple[int, float]]] = {}
        for r in rows:
            if r["status"] != "ok":
                continue
            label = f"{r['optimizer']}"
            series.setdefault(label, []).append((int(r[xkey]), float(r["median_ms"])))
        if not series:
            raise CliError("no successful rows to plot")
        for label, pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
        ax.set_xlabel(xkey)
        ax.set_ylabel("optimizer step median [ms]")
        ax.set_xscale("log", base=2)
        ax.set_yscale("log")
    else:
        series = {}
        for r in rows:
            series.setdefault(r["optimizer"], []).append((int(r["step"]), float(r["loss"])))
        for label, pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=label)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return out


# ---------------------------------------------------------------------------
# weights tools


def cmd_weights_inspect(path: str, stream=None) -> None:
    stream = stream or sys.stdout
    w, spec = load_weights(path)
    print(f"feature set: {spec.id.value} ({spec.d_feat} features)", file=stream)
    dims = [w.input_dim] + [lw.shape[0] for lw, _ in w.layers]
    print(f"mlp: {' -> '.join(str(d) for d in dims)}", file=stream)
    for i, (lw, lb) in enumerate(w.layers):
        print(f"  layer {i}: weight {lw.shape}, bias {lb.shape}", file=stream)
    print(f"alpha: {w.alpha}  beta_out: {w.beta_out}  update_sign: {w.update_sign}", file=stream)
    print(f"momentum betas: {w.betas.momentum_betas}", file=stream)
    print(f"second moment beta: {w.betas.second_moment_beta}", file=stream)
    print(f"adafactor betas: {w.betas.adafactor_betas}", file=stream)


def cmd_weights_convert(path: str, out: str) -> str:
    w, spec = load_weights(path)
    save_weights(w, spec, out)
    return out


# ---------------------------------------------------------------------------
# argument parsing


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lopt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="optimizer step timing sweeps")
    b.add_argument("--workload", default="mlp_sweep",
                   choices=["mlp_sweep", "transformer_proxy"])
    b.add_argument("--widths", type=_int_list, default=[256])
    b.add_argument("--depths", type=_int_list, default=[1])
    b.add_argument("--optimizer", action="append", dest="optimizers",
                   help="repeatable; comma lists allowed")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--scratch-cap-bytes", type=int, default=None)
    b.add_argument("--weights", default=None, help=f"weights file (default ${WEIGHTS_ENV})")
    b.add_argument("--out", default="bench.csv")

    t = sub.add_parser("train", help="toy training runs")
    t.add_argument("--task", default="quadratic", choices=["quadratic", "two_moons_mlp"])
    t.add_argument("--optimizer", default="adam",
                   choices=["adam", "adafactor", "lopt_naive", "lopt_fused"])
    t.add_argument("--steps", type=int, default=50)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--weights", default=None)
    t.add_argument("--out", default="train.csv")

    d = sub.add_parser("distbench", help="simulated distributed step traces")
    d.add_argument("--strategy", default="rs", choices=sorted(_STRATEGY_FLAGS))
    d.add_argument("--workers", type=int, default=1)
    d.add_argument("--width", type=int, default=64)
    d.add_argument("--tensors", type=int, default=8)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", default="dist.csv")

    pl = sub.add_parser("plot", help="render charts from command CSVs")
    pl.add_argument("--csv", required=True)
    pl.add_argument("--kind", required=True, choices=sorted(_KIND_SCHEMA))
    pl.add_argument("--out", default="plot.png")

    w = sub.add_parser("weights", help="weights-file tools")
    wsub = w.add_subparsers(dest="action", required=True)
    wi = wsub.add_parser("inspect")
    wi.add_argument("--path", required=True)
    wc = wsub.add_parser("convert")
    wc.add_argument("--path", required=True)
    wc.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "bench":
            opts = []
            for chunk in args.optimizers or ["lopt_naive,lopt_fused"]:
                opts += [x for x in chunk.split(",") if x]
            cfg = BenchConfig(
                workload=args.workload, widths=args.widths, depths=args.depths,
                optimizers=opts, repeats=args.repeats, warmup=args.warmup,
                seed=args.seed, out=args.out, workers=args.workers,
                scratch_cap_bytes=args.scratch_cap_bytes, weights_path=args.weights,
            )
            out = cmd_bench(cfg)
            print(f"wrote {out}")
        elif args.command == "train":
            out = cmd_train(args.task, args.optimizer, args.steps, seed=args.seed,
                            out=args.out, lr=args.lr, workers=args.workers,
                            weights_path=args.weights)
            print(f"wrote {out}")
        elif args.command == "distbench":
            out = cmd_distbench(args.strategy, args.workers, width=args.width,
                                tensors=args.tensors, seed=args.seed, out=args.out)
            print(f"wrote {out}")
        elif args.command == "plot":
            out = cmd_plot(args.csv, args.kind, out=args.out)
            print(f"wrote {out}")
        elif args.command == "weights":
            if args.action == "inspect":
                cmd_weights_inspect(args.path)
            else:
                out = cmd_weights_convert(args.path, args.out)
                print(f"wrote {out}")
        return 0
    except (CliError, T.TensorError, T.FileFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
