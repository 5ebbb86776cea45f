"""Command-line entry point: gradient checks, sweeps, spread and k-weight reports.

Subcommands: gradcheck, sweep, spread, kweight, graph-demo. Exit codes are
0 on success, 1 on runtime or validation failure, 2 on usage errors. All
output files are byte-deterministic for fixed flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from susbp import attention_core, graph_stoch, kweight_model, spread_analysis
from susbp import sus_backprop, variance_lab
from susbp.numerics import RngStream, finite_diff_grad, fit_power_law

SWEEP_HEADER = "c,n,xi,kappa,kappa_se,sigma,sigma0,rho,rho_se,nnz_mean"

GRADCHECK_TOL = 1e-6
ALL_RETAINED_TOL = 1e-12
ENUM_TOL = 1e-10


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip() != ""]
    except ValueError as exc:
        raise ValueError(f"cannot parse float list {text!r}") from exc


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip() != ""]
    except ValueError as exc:
        raise ValueError(f"cannot parse int list {text!r}") from exc


def _random_attention(seed: int, n: int, d: int, tau, causal: bool):
    gen = RngStream(seed, stream_id=1).generator()
    inp = attention_core.AttnInput(
        q=gen.normal(size=(n, d)),
        k=gen.normal(size=(n, d)),
        v=gen.normal(size=(n, d)),
        tau=tau,
        causal=causal,
    )
    upstream = gen.normal(size=(n, d))
    return inp, attention_core.attn_forward(inp), upstream


def run_gradcheck(args) -> int:
    n, d = args.n, args.d
    inp, state, g = _random_attention(args.seed, n, d, args.tau, args.causal == "on")
    grads = attention_core.attn_backward_dense(state, inp, g)

    theta0 = np.concatenate([inp.q.ravel(), inp.k.ravel(), inp.v.ravel()])

    def loss_of(theta):
        probe = attention_core.AttnInput(
            q=theta[: n * d].reshape(n, d),
            k=theta[n * d : 2 * n * d].reshape(n, d),
            v=theta[2 * n * d :].reshape(n, d),
            tau=inp.tau,
            causal=inp.causal,
        )
        return float(np.sum(g * attention_core.attn_forward(probe).vbar))

    fd = finite_diff_grad(loss_of, theta0, h=1e-6)
    analytic = grads.flat()
    scale = max(np.max(np.abs(fd)), np.max(np.abs(analytic)), 1e-12)
    max_rel_err = float(np.max(np.abs(analytic - fd)) / scale)
    print(f"max_rel_err={_fmt(max_rel_err)}")

    allowed = np.tril_indices(n) if inp.causal else tuple(np.indices((n, n)).reshape(2, -1))
    c_all = 1.0 / float(state.w[allowed].min()) + 1.0
    mask = sus_backprop.sample_mask(state.w, c_all, causal=inp.causal, rng=RngStream(args.seed, 99))
    sparse = sus_backprop.attn_backward_sparse(mask, inp, state.vbar, g)
    all_retained_dev = float(np.max(np.abs(sparse.flat() - analytic)))
    print(f"all_retained_dev={_fmt(all_retained_dev)}")

    ok = max_rel_err < GRADCHECK_TOL and all_retained_dev < ALL_RETAINED_TOL

    if args.enumerate:
        q = np.minimum(args.c * state.w, 1.0)
        if inp.causal:
            stochastic = int(np.count_nonzero((q < 1.0) & (state.w > 0) & ~np.triu(np.ones((n, n), bool), 1)))
        else:
            stochastic = int(np.count_nonzero((q < 1.0) & (state.w > 0)))
        if stochastic > sus_backprop.ENUMERATION_ENTRY_LIMIT:
            raise ValueError(
                f"enumeration needs <= {sus_backprop.ENUMERATION_ENTRY_LIMIT} stochastic "
                f"entries, this instance has {stochastic}; use smaller --n/--d"
            )
        expected = sus_backprop.expected_sparse_grad(
            state.w, inp, state.vbar, g, c=args.c, causal=inp.causal
        )
        enum_dev = float(np.max(np.abs(expected.flat() - analytic)))
        print(f"enum_dev={_fmt(enum_dev)}")
        ok = ok and enum_dev < ENUM_TOL

    return 0 if ok else 1


def _sweep_cells(args) -> list[tuple[float, int]]:
    cs = _parse_floats(args.c)
    ns = _parse_ints(args.n)
    if args.mode == "c":
        if len(ns) != 1:
            raise ValueError("--mode c needs exactly one n value")
        return [(c, ns[0]) for c in cs]
    if len(cs) != 1:
        raise ValueError("--mode n needs exactly one c value")
    return [(cs[0], n) for n in ns]


def _write_sweep_csv(path: Path, reports, fits) -> None:
    lines = [SWEEP_HEADER]
    for r in reports:
        lines.append(
            ",".join(
                [
                    _fmt(r.c), str(r.n), _fmt(r.xi),
                    _fmt(r.kappa), _fmt(r.kappa_se),
                    _fmt(r.sigma), _fmt(r.sigma0),
                    _fmt(r.rho), _fmt(r.rho_se), _fmt(r.nnz_mean),
                ]
            )
        )
    if fits is not None:
        alpha, beta = fits
        lines.append(f"# alpha={_fmt(alpha)}")
        lines.append(f"# beta={_fmt(beta)}")
        lines.append(f"# alpha_minus_beta={_fmt(alpha - beta)}")
    path.write_text("\n".join(lines) + "\n")


def _write_sweep_json(path: Path, reports, fits) -> None:
    doc = {
        "reports": [
            {
                "c": r.c, "n": r.n, "xi": r.xi,
                "kappa": r.kappa, "kappa_se": r.kappa_se,
                "sigma": r.sigma, "sigma0": r.sigma0,
                "rho": r.rho, "rho_se": r.rho_se, "nnz_mean": r.nnz_mean,
            }
            for r in reports
        ],
        "fit": None
        if fits is None
        else {"alpha": fits[0], "beta": fits[1], "alpha_minus_beta": fits[0] - fits[1]},
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_sweep(args) -> int:
    cells = _sweep_cells(args)
    out = Path(args.output)
    if out.parent and not out.parent.exists():
        raise ValueError(f"output directory {out.parent} does not exist")
    cfg = variance_lab.ToyModelConfig(
        vocab=args.vocab, d_model=args.d_model, heads=args.heads,
        d_head=args.d_head, layers=args.layers, n=cells[0][1], seed=args.seed,
    )
    c_cells = len({c for c, _ in cells})
    want_fit = args.fit == "on" or (args.fit == "auto" and args.mode == "c" and c_cells >= 4)
    if args.fit == "on" and (args.mode != "c" or c_cells < 4):
        raise ValueError("fit needs --mode c with at least 4 distinct c cells")
    result = variance_lab.sweep_and_fit(
        cfg, cells, sequences=args.seqs, samples_per_sequence=args.samples,
        base_seed=args.seed, fit=want_fit, topic_scale=args.topic_scale,
    )
    fits = None
    if want_fit:
        fits = (result.kappa_fit.exponent, result.rho_fit.exponent)
        print(f"alpha={_fmt(fits[0])} beta={_fmt(fits[1])} gap={_fmt(fits[0] - fits[1])}")
    if args.format == "csv":
        _write_sweep_csv(out, result.reports, fits)
    else:
        _write_sweep_json(out, result.reports, fits)
    print(str(out))
    return 0


def run_spread(args) -> int:
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.manifest is None and not args.toy:
        raise ValueError("spread needs --manifest PATH or --toy")

    if args.toy:
        cfg = variance_lab.ToyModelConfig(
            vocab=args.vocab, d_model=args.d_model, heads=args.heads,
            d_head=args.d_head, layers=args.layers, n=args.n, seed=args.seed,
        )
        params = variance_lab.build_toy_model(cfg)
        seqs = variance_lab.sample_sequences(cfg, args.seqs, seed=args.seed)
        manifest = variance_lab.dump_mean_attention(params, seqs, out_dir / "dump")
    else:
        manifest = Path(args.manifest)

    dump = spread_analysis.load_weight_dump(manifest)
    cfg_spread = spread_analysis.SpreadConfig(p=args.p)

    rows = []
    ref_phis = []
    ref_pos = None
    for (layer, head) in sorted(dump.matrices):
        report = spread_analysis.spread_profile(dump.matrices[(layer, head)], cfg_spread)
        pos_s, s_means = spread_analysis.strided_means(report.s, stride=10)
        # s is averaged per 10-token window; phi is already aggregate, so it
        # is sampled at the window-end positions instead
        phi_at_pos = report.phi[pos_s]
        for p_, sm, pm in zip(pos_s, s_means, phi_at_pos):
            rows.append((layer, head, int(p_), sm, pm))
        ref_pos = int(pos_s[-1])
        ref_phis.append(float(report.phi_at(ref_pos)) if ref_pos >= 1 else float("nan"))

    table = out_dir / "spread.csv"
    lines = ["layer,head,position,s_mean,phi"]
    for layer, head, p_, sm, pm in rows:
        lines.append(f"{layer},{head},{p_},{_fmt(sm)},{_fmt(pm)}")
    table.write_text("\n".join(lines) + "\n")

    stats = spread_analysis.head_spread_stats(np.array(ref_phis))
    stats_doc = {
        "model": dump.meta.model,
        "n": dump.meta.n,
        "reference_position": ref_pos,
        "per_head": [
            {"layer": l, "head": h, "phi": phi}
            for (l, h), phi in zip(sorted(dump.matrices), ref_phis)
        ],
        "arithmetic_mean": stats.arithmetic_mean,
        "geometric_mean": stats.geometric_mean,
        "histogram": {
            "bin_width": stats.bin_width,
            "bins": [
                {"log2_left": float(left), "count": int(count)}
                for left, count in zip(stats.hist_bin_lefts, stats.hist_counts)
            ],
        },
    }
    stats_path = out_dir / "head_stats.json"
    stats_path.write_text(json.dumps(stats_doc, indent=2, sort_keys=True) + "\n")
    print(str(table))
    print(str(stats_path))
    return 0


def _read_kweight_csv(path: Path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.startswith("#"))
        if reader.fieldnames is None or not {"xi", "kappa", "rho"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: need columns xi, kappa, rho")
        xis, kappas, rhos = [], [], []
        for row in reader:
            xis.append(float(row["xi"]))
            kappas.append(float(row["kappa"]))
            rhos.append(float(row["rho"]))
    return np.array(xis), np.array(kappas), np.array(rhos)


def run_kweight(args) -> int:
    out = Path(args.output)
    if args.generate:
        params = kweight_model.TwoWeightParams(args.theta_minus, args.theta_plus)
        model = kweight_model.build_two_weight(params)
        xis = np.geomspace(args.xi_lo, args.xi_hi, args.points)
        lines = ["xi,kappa,rho"]
        for xi in xis:
            lines.append(
                f"{_fmt(xi)},{_fmt(kweight_model.kappa_of_xi(model, xi))},"
                f"{_fmt(kweight_model.rho_of_xi(model, xi))}"
            )
        out.write_text("\n".join(lines) + "\n")
        print(str(out))
        return 0

    if args.input is None:
        raise ValueError("kweight needs --input CSV or --generate")
    xis, kappas, rhos = _read_kweight_csv(Path(args.input))
    fit = kweight_model.fit_two_weight(xis, kappas, rhos)
    if not fit.success:
        raise ValueError(f"two-weight fit failed: {fit.message}")
    model = kweight_model.build_two_weight(fit.params)

    residuals = []
    for xi in xis:
        try:
            residuals.append(
                {"xi": float(xi), "residual": kweight_model.tradeoff_check(model, float(xi))}
            )
        except ValueError:
            residuals.append({"xi": float(xi), "residual": None})  # kink in stencil

    positive = rhos > 0
    data_fit = None
    if np.count_nonzero(positive) >= 2:
        alpha = fit_power_law(xis, kappas).exponent
        beta = fit_power_law(xis[positive], rhos[positive]).exponent
        data_fit = {"alpha": alpha, "beta": beta, "alpha_minus_beta": alpha - beta}

    doc = {
        "theta_minus": fit.params.theta_minus,
        "theta_plus": fit.params.theta_plus,
        "omega_minus": fit.params.omega_minus,
        "omega_plus": fit.params.omega_plus,
        "sigma0": kweight_model.sigma_limit(model),
        "objective": fit.objective,
        "implied_middle_exponents": {"alpha": 1.0, "beta": -1.0},
        "data_power_law": data_fit,
        "tradeoff_residuals": residuals,
    }
    out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(str(out))
    return 0


def run_graph_demo(args) -> int:
    checks = []

    chain = graph_stoch.chain_graph()
    truth = graph_stoch.path_sum_derivative(chain, "x", "y", {"x": 0.7})
    rm = graph_stoch.reverse_mode_derivative(chain, "x", "y", {"x": 0.7})
    enum = graph_stoch.exact_mask_expectation(
        chain, graph_stoch.EdgeMaskPolicy.uniform(chain, 0.5), "x", "y", {"x": 0.7}
    )
    checks.append(("chain_dev", max(abs(truth - rm), abs(truth - enum)), 1e-12))

    diamond = graph_stoch.diamond_graph()
    truth_d = graph_stoch.path_sum_derivative(diamond, "x", "y", {"x": 1.0})
    enum_d = graph_stoch.exact_mask_expectation(
        diamond, graph_stoch.EdgeMaskPolicy.uniform(diamond, 0.5), "x", "y", {"x": 1.0}
    )
    checks.append(("diamond_dev", abs(truth_d - enum_d), 1e-12))

    rand = graph_stoch.random_polynomial_dag(args.seed, extra_nodes=5)
    sink = rand.nodes[-1].name
    truth_r = graph_stoch.path_sum_derivative(rand, "x", sink, {"x": 0.8})
    enum_r = graph_stoch.exact_mask_expectation(
        rand, graph_stoch.EdgeMaskPolicy.uniform(rand, 0.6), "x", sink, {"x": 0.8}
    )
    checks.append(("random_dag_dev", abs(truth_r - enum_r), 1e-12))

    coupled = graph_stoch.exact_mask_expectation(
        chain,
        graph_stoch.EdgeMaskPolicy.uniform(chain, 0.5),
        "x", "y", {"x": 0.7},
        share={("x", "u"): 0, ("u", "y"): 0},
    )
    coupling_dev = abs(coupled - truth)

    ok = True
    for name, dev, tol in checks:
        status = "ok" if dev < tol else "FAIL"
        print(f"{name}={_fmt(dev)} ({status})")
        ok = ok and dev < tol
    status = "ok" if coupling_dev > 1e-3 else "FAIL"
    print(f"coupling_dev={_fmt(coupling_dev)} (expected > 0.001, {status})")
    ok = ok and coupling_dev > 1e-3
    return 0 if ok else 1


def _add_model_flags(sub, n_default=256):
    sub.add_argument("--vocab", type=int, default=128)
    sub.add_argument("--d-model", type=int, default=64)
    sub.add_argument("--heads", type=int, default=4)
    sub.add_argument("--d-head", type=int, default=16)
    sub.add_argument("--layers", type=int, default=2)
    return sub


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sus",
        description="Sparse unbiased stochastic attention backprop: checks and experiments.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gradcheck", help="dense-vs-finite-difference and sparse checks")
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--d", type=int, default=4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tau", type=float, default=None)
    g.add_argument("--causal", choices=("on", "off"), default="on")
    g.add_argument("--enumerate", action="store_true",
                   help="also enumerate the exact mask expectation (small n only)")
    g.add_argument("--c", type=float, default=1.2, help="retention parameter for --enumerate")
    g.set_defaults(func=run_gradcheck)

    s = subs.add_parser("sweep", help="variance sweep over c or n cells")
    s.add_argument("--mode", choices=("c", "n"), required=True)
    s.add_argument("--c", required=True, help="comma-separated retention values")
    s.add_argument("--n", required=True, help="comma-separated sequence lengths")
    s.add_argument("--seqs", type=int, default=64)
    s.add_argument("--samples", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--topic-scale", type=float, default=0.0,
                   help="per-sequence topic strength; 0 = uniform tokens")
    s.add_argument("--fit", choices=("auto", "on", "off"), default="auto")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    _add_model_flags(s)
    s.set_defaults(func=run_sweep)

    p = subs.add_parser("spread", help="attention spread tables from a dump or toy model")
    p.add_argument("--manifest", default=None)
    p.add_argument("--toy", action="store_true", help="analyze a seeded toy model dump")
    p.add_argument("--n", type=int, default=256)
    p.add_argument("--seqs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=float, default=0.9)
    p.add_argument("-o", "--output", required=True, help="output directory")
    _add_model_flags(p)
    p.set_defaults(func=run_spread)

    k = subs.add_parser("kweight", help="fit the two-weight model to sweep curves")
    k.add_argument("--input", default=None, help="CSV with xi,kappa,rho columns")
    k.add_argument("--generate", action="store_true",
                   help="write synthetic xi,kappa,rho curves instead of fitting")
    k.add_argument("--theta-minus", type=float, default=0.086)
    k.add_argument("--theta-plus", type=float, default=2.08)
    k.add_argument("--points", type=int, default=16)
    k.add_argument("--xi-lo", type=float, default=1e-3)
    k.add_argument("--xi-hi", type=float, default=0.3)
    k.add_argument("-o", "--output", required=True)
    k.set_defaults(func=run_kweight)

    d = subs.add_parser("graph-demo", help="run the DAG stochastization oracles")
    d.add_argument("--seed", type=int, default=3)
    d.set_defaults(func=run_graph_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
