"""Command-line front end: dataset generation, training, evaluation, lag
sweeps, generalization-bound reports, and landing experiments.

Every command validates its inputs before writing anything, writes one
manifest beside its outputs, and renders all numbers with 17 significant
digits so repeated runs are byte-identical (manifests may differ in wall
time only). Exit codes: 0 success, 1 usage/config error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, contract, geometry, landing, mlp, simulation
from . import jsonio

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class CliError(Exception):
    """Usage or configuration problem; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def _load_config(args) -> dict:
    if args.config is None:
        return {}
    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    try:
        doc = jsonio.load(path)
    except Exception as exc:
        raise CliError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError("config file must hold a JSON object")
    return doc


def _sim_config(args, extra_overrides: dict | None = None) -> simulation.SimConfig:
    doc = _load_config(args)
    overrides = dict(extra_overrides or {})
    if args.seed is not None:
        overrides["seed"] = args.seed
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return simulation.SimConfig.from_dict(doc)
    except ValueError as exc:
        raise CliError(f"bad simulation config: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out_dir: Path, stem: str, command: str, config_echo, seed,
                    inputs: list, outputs: list, started: float) -> None:
    manifest = {
        "command": command,
        "config": config_echo,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "wall_time_s": time.perf_counter() - started,
    }
    jsonio.dump(manifest, out_dir / f"{stem}.manifest.json", indent=2)


def _dataset_sidecar(dataset_path: Path) -> dict | None:
    """Manifest written beside a dataset by gen-data, if present."""
    sidecar = dataset_path.with_name(dataset_path.stem + ".manifest.json")
    if sidecar.exists():
        return jsonio.load(sidecar)
    return None


def _require_file(path_str: str, what: str) -> Path:
    path = Path(path_str)
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def cmd_gen_data(args) -> int:
    started = time.perf_counter()
    cfg = _sim_config(
        args,
        {
            "n_samples": args.samples,
            "buffer_size": args.buffer_size,
            "noise_sigma": args.noise_sigma,
        },
    )
    out = _out_dir(args)
    if args.trace_out:
        samples, trajectory = simulation.generate_dataset(cfg, with_trajectory=True)
        simulation.write_trajectory_csv(args.trace_out, trajectory)
    else:
        samples = simulation.generate_dataset(cfg)
    dataset_path = out / "dataset.jsonl"
    contract.write_dataset(dataset_path, samples)
    errors = np.array(
        [float(np.linalg.norm(s.perceived_c - s.truth_c)) for s in samples]
    )
    fingerprint = simulation.frame_fingerprint(cfg.rig)
    config_echo = cfg.to_dict()
    config_echo["fingerprint"] = fingerprint
    _write_manifest(
        out, "dataset", "gen-data", config_echo, cfg.seed, [], [dataset_path], started
    )
    _say(args, f"wrote {len(samples)} samples to {dataset_path}")
    _say(
        args,
        f"perception error magnitude: mean {jsonio.fmt(errors.mean())} m, "
        f"max {jsonio.fmt(errors.max())} m",
    )
    return EXIT_OK


def _train_config(args) -> contract.TrainConfig:
    doc = _load_config(args)
    for key, value in (
        ("alpha", args.alpha),
        ("lambda", getattr(args, "lam", None)),
        ("lr", args.lr),
        ("epochs", args.epochs),
        ("batch_size", args.batch_size),
        ("train_fraction", args.train_fraction),
        ("slope", args.slope),
        ("beta1", args.beta1),
        ("beta2", args.beta2),
        ("settle_epochs", args.settle_epochs),
        ("settle_batch_factor", args.settle_batch_factor),
        ("seed", args.seed),
    ):
        if value is not None:
            doc[key] = value
    try:
        return contract.TrainConfig.from_dict(doc)
    except ValueError as exc:
        raise CliError(f"bad training config: {exc}") from exc


def cmd_train(args) -> int:
    started = time.perf_counter()
    dataset_path = _require_file(args.dataset, "dataset")
    cfg = _train_config(args)
    dataset = contract.read_dataset(dataset_path)
    if not dataset:
        raise CliError(f"dataset is empty: {dataset_path}")
    sidecar = _dataset_sidecar(dataset_path)
    fingerprint = sidecar["config"].get("fingerprint") if sidecar else None
    sim_echo = (
        {k: v for k, v in sidecar["config"].items() if k != "fingerprint"}
        if sidecar
        else None
    )
    _say(
        args,
        f"training: alpha={jsonio.fmt(cfg.alpha)} lambda={jsonio.fmt(cfg.lam)} "
        f"lr={jsonio.fmt(cfg.lr)} epochs={cfg.epochs} batch_size={cfg.batch_size} "
        f"seed={cfg.seed}",
    )
    params, report = contract.train(dataset, cfg)

    out = _out_dir(args)
    model_path = out / "model.json"
    report_path = out / "train_report.json"
    contract.save_model(
        model_path,
        params,
        train_config=cfg,
        dataset_fingerprint=fingerprint,
        sim_config=sim_echo,
    )
    jsonio.dump(report.to_dict(), report_path, indent=2)
    _write_manifest(
        out,
        "model",
        "train",
        cfg.to_dict(),
        cfg.seed,
        [dataset_path],
        [model_path, report_path],
        started,
    )
    if report.heldout_error is not None:
        _say(args, f"held-out error: {jsonio.fmt(report.heldout_error)}")
    _say(args, f"final train error: {jsonio.fmt(report.final_train_error)}")
    _say(args, f"wrote {model_path}")
    return EXIT_OK


def _load_model(path_str: str) -> tuple[mlp.MlpParams, dict]:
    path = _require_file(path_str, "model")
    try:
        return contract.load_model(path)
    except (ValueError, KeyError) as exc:
        raise CliError(f"cannot load model {path}: {exc}") from exc


def cmd_eval(args) -> int:
    started = time.perf_counter()
    params, meta = _load_model(args.model)
    dataset_path = _require_file(args.dataset, "dataset")
    dataset = contract.read_dataset(dataset_path)
    if not dataset:
        raise CliError(f"dataset is empty: {dataset_path}")
    sidecar = _dataset_sidecar(dataset_path)
    dataset_fp = sidecar["config"].get("fingerprint") if sidecar else None
    model_fp = meta.get("dataset_fingerprint")
    if model_fp and dataset_fp and model_fp != dataset_fp:
        raise CliError(
            "frame fingerprint mismatch: the model was trained under a different "
            "camera rig or feature layout than this dataset; evaluating would be "
            "meaningless"
        )
    if not (model_fp and dataset_fp):
        _say(args, "warning: missing fingerprint; frame compatibility not verified")

    error = contract.evaluate_error(params, dataset)
    X, Y = contract.stack_samples(dataset)
    g = contract.gauges(params, X, Y)
    out = _out_dir(args)
    csv_path = out / "eval_gvalues.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("index,g_value\n")
        for i, value in enumerate(g):
            fh.write(f"{i},{jsonio.fmt(value)}\n")
    _write_manifest(
        out,
        "eval_gvalues",
        "eval",
        {"model": str(args.model), "dataset": str(dataset_path)},
        args.seed,
        [args.model, dataset_path],
        [csv_path],
        started,
    )
    _say(args, f"error rate: {jsonio.fmt(error)}")
    _say(args, f"wrote {csv_path}")
    return EXIT_OK


def cmd_sweep_lag(args) -> int:
    started = time.perf_counter()
    params, meta = _load_model(args.model)
    try:
        sizes = [int(s) for s in args.buffer_sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise CliError(f"bad --buffer-sizes list: {exc}") from exc
    if not sizes or any(s < 1 for s in sizes):
        raise CliError("--buffer-sizes must list integers >= 1")
    if meta.get("sim_config") is None and args.config is None:
        raise CliError(
            "the model carries no simulation echo; pass --config so evaluation "
            "flights match the training frame"
        )
    base_doc = meta.get("sim_config") or {}
    if args.config is not None:
        base_doc = {**base_doc, **_load_config(args)}
    base_cfg = simulation.SimConfig.from_dict(base_doc)
    eval_seed = args.seed if args.seed is not None else base_cfg.seed + 1000
    n_samples = args.samples if args.samples is not None else base_cfg.n_samples

    rows = []
    for k in sizes:
        cfg_k = replace(base_cfg, buffer_size=k, seed=eval_seed + k, n_samples=n_samples)
        samples = simulation.generate_dataset(cfg_k)
        error = contract.evaluate_error(params, samples)
        rows.append((k, len(samples), error))

    out = _out_dir(args)
    csv_path = out / "lag_sweep.csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("buffer_size,n_samples,error_rate\n")
        for k, n, error in rows:
            fh.write(f"{k},{n},{jsonio.fmt(error)}\n")
    _write_manifest(
        out,
        "lag_sweep",
        "sweep-lag",
        {"buffer_sizes": sizes, "n_samples": n_samples, "eval_seed": eval_seed},
        eval_seed,
        [args.model],
        [csv_path],
        started,
    )
    _say(args, "buffer size | " + " | ".join(str(k) for k, _, _ in rows))
    _say(args, "error rate  | " + " | ".join(jsonio.fmt(e) for _, _, e in rows))
    _say(args, f"wrote {csv_path}")
    return EXIT_OK


def cmd_pac(args) -> int:
    started = time.perf_counter()
    params, meta = _load_model(args.model)
    dataset_path = _require_file(args.dataset, "dataset")
    dataset = contract.read_dataset(dataset_path)
    if not dataset:
        raise CliError(f"dataset is empty: {dataset_path}")
    alpha = args.alpha
    if alpha is None:
        alpha = (meta.get("train_config") or {}).get("alpha", 0.1)
    estimated = args.lipschitz is None
    lipschitz = (
        contract.estimate_lipschitz(params, dataset) if estimated else args.lipschitz
    )
    loss = contract.empirical_truncated_loss(params, dataset, alpha)
    p = mlp.param_count(params)
    n = len(dataset)
    inputs = contract.PacInputs(
        empirical_trunc_loss=loss,
        alpha=alpha,
        lipschitz_lg=lipschitz,
        param_count_p=p,
        sample_count_n=n,
        epsilon=args.epsilon,
    )
    bound, confidence = contract.pac_bound(inputs)
    out = _out_dir(args)
    report_path = out / "pac_report.json"
    jsonio.dump(
        {
            "empirical_truncated_loss": loss,
            "alpha": alpha,
            "lipschitz_lg": lipschitz,
            "lipschitz_estimated": estimated,
            "param_count_p": p,
            "sample_count_n": n,
            "epsilon": args.epsilon,
            "bound": bound,
            "confidence": confidence,
        },
        report_path,
        indent=2,
    )
    _write_manifest(
        out,
        "pac_report",
        "pac",
        {"epsilon": args.epsilon, "alpha": alpha},
        args.seed,
        [args.model, dataset_path],
        [report_path],
        started,
    )
    _say(args, f"parameters p: {p}")
    _say(args, f"samples N: {n}")
    _say(args, f"empirical truncated loss: {jsonio.fmt(loss)}")
    source = "estimated from data (not certified)" if estimated else "supplied"
    _say(args, f"Lipschitz L_g: {jsonio.fmt(lipschitz)} ({source})")
    _say(args, f"bound: {jsonio.fmt(bound)} (conditional on supplied L_g)")
    _say(args, f"confidence: {jsonio.fmt(confidence)}")
    return EXIT_OK


def cmd_land(args) -> int:
    started = time.perf_counter()
    if args.baseline == (args.model is not None):
        raise CliError("pass exactly one of --model or --baseline")
    if args.runs < 1:
        raise CliError("--runs must be >= 1")

    if args.baseline:
        query_fn = landing.trivial_query
        sim_doc = _load_config(args)
        mode = "baseline"
    else:
        params, meta = _load_model(args.model)
        query_fn = lambda state_c, perceived_c: contract.query(params, state_c, perceived_c)
        sim_doc = meta.get("sim_config") or {}
        if args.config is not None:
            sim_doc = {**sim_doc, **_load_config(args)}
        mode = "learned"
    overrides = {"buffer_size": args.buffer_size, "noise_sigma": args.noise_sigma}
    sim_doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        sim_cfg = simulation.SimConfig.from_dict(sim_doc)
    except ValueError as exc:
        raise CliError(f"bad simulation config: {exc}") from exc

    seed = args.seed if args.seed is not None else 2024
    cfg = landing.LandingConfig(max_measurements=args.max_measurements)
    traces = landing.run_experiment(
        query_fn, sim_cfg, cfg, args.runs, seed, approach_frames=args.approach_frames
    )

    out = _out_dir(args)
    outputs = []
    kind = "star" if mode == "learned" else "cross"
    plot_rows = []
    for i, trace in enumerate(traces):
        trace_path = out / f"run_{i:02d}.trace.json"
        jsonio.dump(trace.to_dict(), trace_path, indent=2)
        outputs.append(trace_path)
        csv_path = out / f"run_{i:02d}.measurements.csv"
        with open(csv_path, "w", encoding="utf-8") as fh:
            fh.write("index,px,py,pz,aabb_lox,aabb_loy,aabb_loz,aabb_hix,aabb_hiy,aabb_hiz,trusted\n")
            for row in trace.measurement_rows():
                cells = [str(row["index"])]
                cells += [jsonio.fmt(x) for x in row["position"]]
                cells += [jsonio.fmt(x) for x in row["aabb_lo"]]
                cells += [jsonio.fmt(x) for x in row["aabb_hi"]]
                cells.append("1" if row["trusted"] else "0")
                fh.write(",".join(cells) + "\n")
        outputs.append(csv_path)
        # Plot rows are pad-relative, one shutdown marker per completed run
        # plus one circle per measurement sized by the mean half-extent.
        if trace.shutdown_point is not None:
            rel = trace.shutdown_point - trace.pad_world
            plot_rows.append((i, kind, rel[0], rel[1], 0.0))
        for row in trace.measurement_rows():
            rel = row["position"] - trace.pad_world
            radius = float(np.mean((row["aabb_hi"] - row["aabb_lo"]) / 2.0))
            plot_rows.append((i, "circle", rel[0], rel[1], radius))

    plot_path = out / "landing_plot.csv"
    with open(plot_path, "w", encoding="utf-8") as fh:
        fh.write("run,kind,x,y,radius\n")
        for run, k, x, y, radius in plot_rows:
            fh.write(f"{run},{k},{jsonio.fmt(x)},{jsonio.fmt(y)},{jsonio.fmt(radius)}\n")
    outputs.append(plot_path)

    successes = sum(1 for t in traces if t.success)
    aborts = sum(1 for t in traces if t.abort_reason is not None)
    summary = {
        "mode": mode,
        "runs": len(traces),
        "successes": successes,
        "aborts": aborts,
        "measurement_counts": [t.measurement_count for t in traces],
        "per_run": [
            {
                "run": i,
                "pad": t.pad_world.tolist(),
                "success": t.success,
                "measurements": t.measurement_count,
                "shutdown_point": None
                if t.shutdown_point is None
                else t.shutdown_point.tolist(),
                "abort_reason": t.abort_reason,
            }
            for i, t in enumerate(traces)
        ],
    }
    summary_path = out / "landing_summary.json"
    jsonio.dump(summary, summary_path, indent=2)
    outputs.append(summary_path)
    _write_manifest(
        out,
        "landing_summary",
        "land",
        {"mode": mode, "sim": sim_cfg.to_dict(), "runs": args.runs,
         "approach_frames": args.approach_frames},
        seed,
        [args.model] if args.model else [],
        outputs,
        started,
    )
    _say(args, f"{mode}: {successes}/{len(traces)} successful landings ({aborts} aborts)")
    _say(args, f"wrote {summary_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = _Parser(prog="ipcontract", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="fly the sweep path and record a dataset")
    p.add_argument("--samples", type=int, default=None, help="number of samples (default 5000)")
    p.add_argument("--buffer-size", type=int, default=None, help="perception lag in frames")
    p.add_argument("--noise-sigma", type=float, default=None, help="perception noise, m")
    p.add_argument("--trace-out", default=None, help="also write a trajectory CSV here")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="fit a contract to a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--alpha", type=float, default=None, help="hinge sharpness (default 0.1)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="volume-penalty weight (default 1e-3)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 0.001)")
    p.add_argument("--epochs", type=int, default=None, help="training epochs (default 20)")
    p.add_argument("--batch-size", type=int, default=None, help="mini-batch size (default 64)")
    p.add_argument("--train-fraction", type=float, default=None,
                   help="fraction used for training vs held out (default 0.9)")
    p.add_argument("--slope", type=float, default=None,
                   help="leaky-rectifier slope (default 0.01)")
    p.add_argument("--beta1", type=float, default=None, help="Adam beta1 (default 0.9)")
    p.add_argument("--beta2", type=float, default=None, help="Adam beta2 (default 0.999)")
    p.add_argument("--settle-epochs", type=int, default=None,
                   help="final epochs run at an enlarged batch (default 0)")
    p.add_argument("--settle-batch-factor", type=int, default=None,
                   help="batch multiplier during the settle phase (default 8)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="error rate of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lag", parents=[common],
                       help="evaluate a model over fresh flights at several lag settings")
    p.add_argument("--model", required=True)
    p.add_argument("--buffer-sizes", default="1,2,3,4,5")
    p.add_argument("--samples", type=int, default=None,
                   help="samples per evaluation flight (default: training size)")
    p.set_defaults(func=cmd_sweep_lag)

    p = sub.add_parser("pac", parents=[common], help="error bound report for a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epsilon", type=float, default=0.02)
    p.add_argument("--alpha", type=float, default=None,
                   help="hinge sharpness (default: model echo)")
    p.add_argument("--lipschitz", type=float, default=None,
                   help="override the estimated Lipschitz constant")
    p.set_defaults(func=cmd_pac)

    p = sub.add_parser("land", parents=[common], help="run the landing experiment")
    p.add_argument("--model", default=None)
    p.add_argument("--baseline", action="store_true",
                   help="use the trivial tiny-ball contract instead of a model")
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--buffer-size", type=int, default=None)
    p.add_argument("--noise-sigma", type=float, default=None)
    p.add_argument("--approach-frames", type=int, default=45,
                   help="frames flown toward the pad before the first measurement")
    p.add_argument("--max-measurements", type=int, default=20)
    p.set_defaults(func=cmd_land)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except contract.TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
