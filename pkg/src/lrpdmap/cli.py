"""Command-line entry point: ``lrpdmap <subcommand> ...``.

Every run writes its declared outputs plus one run manifest (``--manifest``,
default ``<first output>.manifest.json``) recording the resolved
configuration, seeds, input/output SHA-256 digests, wall time and package
version. ``lrpdmap replay --manifest m.json`` re-executes a run into a
scratch directory and checks that every output is byte-identical.

Exit codes: 0 success, 2 usage error (bad flag, missing file), 3 schema
violation, 4 numerical failure (divergence, oracle mismatch, replay
mismatch). Failures print one JSON object ``{"error": ..., "message": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from lrpdmap import __version__, calibration, encoding, fitting, lrpd, metrics, oracle, rng, schemas, synthetic
from lrpdmap.geometry import ClassProbs, GeometryError, Scenario
from lrpdmap.lrpd import ElementDistribution, ProbMap

log = logging.getLogger("lrpdmap")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_SCHEMA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname, "logger": record.name, "message": record.getMessage()})


# --------------------------------------------------------------------------
# loaders


def _load_scenario(path) -> Scenario:
    doc = schemas.load_json(path, schemas.SCENARIO)
    try:
        return Scenario.from_dict(doc)
    except (GeometryError, ValueError) as exc:
        raise schemas.SchemaError(f"{path}: {exc}") from None


def _load_probmap(path) -> ProbMap:
    doc = schemas.load_json(path, schemas.PROB_MAP)
    try:
        return ProbMap.from_dict(doc)
    except ValueError as exc:
        raise schemas.SchemaError(f"{path}: {exc}") from None


def _parse_noise(text: str | None) -> synthetic.NoiseModel | None:
    if text is None:
        return None
    p = Path(text)
    doc = schemas.load_json(p) if p.suffix == ".json" or p.exists() else json.loads(text)
    schemas.validate(doc, schemas.NOISE_MODEL, "noise model")
    try:
        return synthetic.NoiseModel.from_dict(doc)
    except ValueError as exc:
        raise schemas.SchemaError(f"noise model: {exc}") from None


# --------------------------------------------------------------------------
# subcommands; each returns (outputs, inputs, deterministic)


def cmd_gen(args):
    scn = synthetic.gen_map(
        args.seed, args.elements, args.points, args.extent, n_agents=args.agents, horizon=args.horizon
    )
    noise = _parse_noise(args.noise)
    if args.samples:
        scn = synthetic.with_samples(scn, noise or synthetic.NoiseModel("independent", 0.3), args.seed, args.samples)
    schemas.write_json(args.out, scn.to_dict())
    return [args.out], [], True


def _fit_one(targets, cls, n_classes, cfg):
    train, test = fitting.split_holdout(targets, cfg.seed)
    rep = fitting.fit_lrpd(train, cfg, holdout=test)
    probs = np.zeros(n_classes)
    probs[cls] = 1.0
    return ElementDistribution(ClassProbs(probs), rep.final_params, cls), rep


def cmd_fit(args):
    scn = _load_scenario(args.scenario)
    if scn.samples is None:
        raise schemas.SchemaError(f"{args.scenario}: scenario has no 'samples' to fit")
    jobs = []
    for k, ((cls, _), targets) in enumerate(zip(scn.gt_elements, scn.samples)):
        cfg = fitting.FitConfig(
            rank=min(args.rank, targets.shape[1]),
            lr=args.lr,
            epochs=args.epochs,
            warmup_epochs=args.warmup,
            ramp_epochs=args.ramp,
            seed=args.seed + k,
            batch_size=args.batch_size,
            kappa_mode=args.kappa_mode,
        )
        jobs.append((targets, cls, scn.n_classes, cfg))
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        results = list(pool.map(lambda j: _fit_one(*j), jobs))
    pmap = ProbMap(tuple(el for el, _ in results))
    schemas.write_json(args.out, pmap.to_dict())
    outputs = [args.out]
    if args.report:
        doc = {"elements": [rep.to_dict(include_wall_time=False) for _, rep in results]}
        for entry in doc["elements"]:
            entry.pop("final_params")
        schemas.write_json(args.report, doc)
        outputs.append(args.report)
    diverged = [k for k, (_, rep) in enumerate(results) if rep.diverged]
    if diverged:
        raise NumericFailure(f"fit diverged for elements {diverged}", outputs)
    return outputs, [args.scenario], True


def cmd_sample(args):
    pmap = _load_probmap(args.params)
    out = {
        "elements": [
            lrpd.sample(el.params, args.seed + k, args.count).tolist() for k, el in enumerate(pmap.elements)
        ]
    }
    schemas.write_json(args.out, out)
    return [args.out], [args.params], True


def cmd_encode(args):
    pmap = _load_probmap(args.params)
    if args.weights:
        try:
            w = encoding.FilmWeights.from_dict(schemas.load_json(args.weights, schemas.FILM_WEIGHTS))
        except ValueError as exc:
            raise schemas.SchemaError(f"{args.weights}: {exc}") from None
        inputs = [args.params, args.weights]
    else:
        rank = pmap.elements[0].params.rank if pmap.elements else 0
        w = encoding.FilmWeights.random(args.seed, rank, args.embed_dim)
        inputs = [args.params]
    elements = []
    for el in pmap.elements:
        feats = encoding.encode_element(el.params)
        conf = args.confidence if args.confidence is not None else encoding.element_confidence(el, args.confidence_class)
        elements.append({
            "confidence": conf,
            "features": feats.tolist(),
            "embeddings": encoding.film_modulate(feats, conf, w).tolist(),
        })
    schemas.write_json(args.out, {"embed_dim": w.embed_dim, "elements": elements})
    return [args.out], inputs, True


def cmd_eval_map(args):
    if len(args.pred) != len(args.gt):
        raise UsageError("--pred and --gt must be given the same number of times")
    preds, gts, n_classes, names = [], [], 1, None
    for p, g in zip(args.pred, args.gt):
        doc = schemas.load_json(p, schemas.MAP_PREDICTIONS)
        try:
            preds.append(metrics.MapPredictionSet.from_dict(doc))
        except ValueError as exc:
            raise schemas.SchemaError(f"{p}: {exc}") from None
        scn = _load_scenario(g)
        gts.append(scn.gt_elements)
        n_classes = max(n_classes, scn.n_classes)
        names = names or scn.metadata.get("class_names")
    try:
        score = metrics.map_score(preds, gts, n_classes, tuple(args.thresholds))
    except ValueError as exc:
        raise schemas.SchemaError(str(exc)) from None
    out = score.to_dict(names)
    out["thresholds"] = list(args.thresholds)
    schemas.write_json(args.out, out)
    return [args.out], [*args.pred, *args.gt], True


def cmd_eval_traj(args):
    doc = schemas.load_json(args.pred, schemas.TRAJECTORIES)
    scn = _load_scenario(args.gt)
    try:
        pred = metrics.TrajectoryPredictionSet.from_dict(doc, k=args.k)
        gt = np.array([a.future.points for a in scn.agents])
        result = metrics.trajectory_metrics(pred, gt)
    except ValueError as exc:
        raise schemas.SchemaError(str(exc)) from None
    result["n_agents"] = len(scn.agents)
    result["miss_threshold"] = metrics.MISS_THRESHOLD
    if args.out:
        schemas.write_json(args.out, result)
    else:
        sys.stdout.write(schemas.dumps(result))
    return ([args.out] if args.out else []), [args.pred, args.gt], True


def cmd_oracle_check(args):
    report = oracle.oracle_sweep(args.seed, args.trials, args.tol)
    doc = report.to_dict()
    doc["seed"] = args.seed
    outputs = []
    if args.out:
        schemas.write_json(args.out, doc)
        outputs.append(args.out)
    else:
        sys.stdout.write(schemas.dumps(doc))
    if not report.passed:
        raise NumericFailure(f"{len(report.failures)} oracle mismatches", outputs)
    return outputs, [], True


def cmd_bench(args):
    gen = rng.stream(args.seed, 0)
    rows = []
    for n in args.n:
        p = lrpd.random_params(gen, n, min(args.rank, 2 * n))
        targets = p.mu + gen.normal(size=(args.batch, p.dim))
        times = []
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            lrpd.nll(p, targets)
            times.append(time.perf_counter() - t0)
        row = {"n_points": n, "dim": p.dim, "rank": p.rank, "seconds": min(times)}
        if args.dense:
            t0 = time.perf_counter()
            for t in targets:
                oracle.dense_nll(p, t)
            row["dense_seconds"] = time.perf_counter() - t0
        rows.append(row)
    doc = {
        "rank": args.rank,
        "batch": args.batch,
        "rows": rows,
        "time_ratio": rows[-1]["seconds"] / rows[0]["seconds"],
        "n_ratio": rows[-1]["n_points"] / rows[0]["n_points"],
    }
    for r in rows:
        print(f"N={r['n_points']:6d}  2N={r['dim']:6d}  R={r['rank']:3d}  nll: {r['seconds'] * 1e3:9.3f} ms", file=sys.stderr)
    print(f"time ratio {doc['time_ratio']:.2f} for N ratio {doc['n_ratio']:.1f}", file=sys.stderr)
    outputs = []
    if args.out:
        schemas.write_json(args.out, doc)
        outputs.append(args.out)
    return outputs, [], False


def cmd_calib(args):
    pmap = _load_probmap(args.params)
    scn = _load_scenario(args.scenario)
    if scn.samples is None:
        raise schemas.SchemaError(f"{args.scenario}: scenario has no 'samples'")
    params = [el.params for el in pmap.elements]
    try:
        table = calibration.calib_export(params, [s - p.mu for s, p in zip(scn.samples, params)])
    except ValueError as exc:
        raise schemas.SchemaError(str(exc)) from None
    Path(args.out).write_text(table.to_csv())
    outputs = [args.out]
    if args.summary:
        schemas.write_json(args.summary, {"pearson": table.pearson, "n": int(table.error.size)})
        outputs.append(args.summary)
    return outputs, [args.params, args.scenario], True


def cmd_replay(args):
    manifest = schemas.load_json(args.manifest)
    cfg = dict(manifest["config"])
    out_keys = manifest["output_keys"]
    scratch = Path(args.outdir or tempfile.mkdtemp(prefix="lrpdmap-replay-"))
    scratch.mkdir(parents=True, exist_ok=True)
    mapping = {}
    for key in out_keys:
        if cfg.get(key):
            new = str(scratch / Path(cfg[key]).name)
            mapping[cfg[key]] = new
            cfg[key] = new
    cfg["manifest"] = str(scratch / "replay.manifest.json")
    ns = argparse.Namespace(**cfg)
    code = _execute(ns, manifest["subcommand"])
    result = {"manifest": args.manifest, "deterministic": manifest["deterministic"], "outputs": {}}
    mismatch = []
    for orig, digest in manifest["outputs"].items():
        new = mapping.get(orig)
        got = schemas.sha256_file(new) if new and Path(new).exists() else None
        same = got == digest
        result["outputs"][orig] = {"replayed": new, "identical": same}
        if not same and manifest["deterministic"]:
            mismatch.append(orig)
    result["identical"] = not mismatch
    sys.stdout.write(schemas.dumps(result))
    if code not in (EXIT_OK,) and not mismatch:
        return code
    if mismatch:
        raise NumericFailure(f"replay differs for {mismatch}", [])
    return EXIT_OK


COMMANDS = {
    "gen": (cmd_gen, ("out",)),
    "fit": (cmd_fit, ("out", "report")),
    "sample": (cmd_sample, ("out",)),
    "encode": (cmd_encode, ("out",)),
    "eval-map": (cmd_eval_map, ("out",)),
    "eval-traj": (cmd_eval_traj, ("out",)),
    "oracle-check": (cmd_oracle_check, ("out",)),
    "bench": (cmd_bench, ("out",)),
    "calib": (cmd_calib, ("out", "summary")),
}


def _csv_ints(text):
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    base = _Parser(add_help=False)
    base.add_argument("--seed", type=int, default=None, help=f"root seed (default: ${rng.SEED_ENV} or {rng.DEFAULT_SEED})")
    base.add_argument("--threads", type=int, default=1, help="maximum worker threads")
    base.add_argument("--json-logs", action="store_true", help="structured JSON log lines on stderr")
    common = _Parser(add_help=False, parents=[base])
    common.add_argument("--manifest", default=None, help="run manifest path (default: <first output>.manifest.json)")

    parser = _Parser(
        prog="lrpdmap",
        description="Low-rank-plus-diagonal Gaussian map elements: generate, fit, sample, encode, evaluate.",
        epilog="exit codes: 0 success, 2 usage, 3 schema, 4 numeric failure (divergence/oracle mismatch)",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic scenario")
    p.add_argument("--elements", type=int, default=8)
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--extent", type=float, default=30.0)
    p.add_argument("--agents", type=int, default=2)
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--noise", default=None, help="noise model as a JSON string or a .json file")
    p.add_argument("--samples", type=int, default=0, help="noisy observations per element")
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", parents=[common], help="fit LRPD parameters to scenario samples")
    p.add_argument("--scenario", required=True)
    p.add_argument("--rank", type=int, default=fitting.DEFAULT_RANK)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--ramp", type=int, default=None)
    p.add_argument("--lr", type=float, default=fitting.DEFAULT_LR)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--kappa-mode", choices=("fixed", "learned"), default="fixed")
    p.add_argument("--out", required=True, help="probabilistic map (params) JSON")
    p.add_argument("--report", default=None, help="per-element traces JSON")

    p = sub.add_parser("sample", parents=[common], help="draw samples from fitted parameters")
    p.add_argument("--params", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--out", required=True)

    p = sub.add_parser("encode", parents=[common], help="uncertainty features and FiLM embeddings")
    p.add_argument("--params", required=True)
    p.add_argument("--confidence", type=float, default=None, help="fixed confidence for every element")
    p.add_argument("--confidence-class", type=int, default=None, help="class whose probability is the confidence (default: centerline)")
    p.add_argument("--weights", default=None, help="FiLM weights JSON (default: random from --seed)")
    p.add_argument("--embed-dim", type=int, default=encoding.DEFAULT_EMBED_DIM)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-map", parents=[common], help="Chamfer AP / mAP of map predictions")
    p.add_argument("--pred", action="append", required=True)
    p.add_argument("--gt", action="append", required=True)
    p.add_argument("--thresholds", type=float, nargs="+", default=list(metrics.THRESHOLDS))
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval-traj", parents=[common], help="minADE / minFDE / miss rate")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--k", type=int, default=metrics.N_MODES)
    p.add_argument("--out", default=None)

    p = sub.add_parser("oracle-check", parents=[common], help="compare kernels with dense oracles")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", default=None)

    p = sub.add_parser("bench", parents=[common], help="time the NLL kernel against N")
    p.add_argument("--n", type=_csv_ints, default=[100, 200, 400, 800])
    p.add_argument("--rank", type=int, default=fitting.DEFAULT_RANK)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--dense", action="store_true", help="also time the dense oracle")
    p.add_argument("--out", default=None)

    p = sub.add_parser("calib", parents=[common], help="|error| vs predicted std table (CSV)")
    p.add_argument("--params", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--summary", default=None, help="JSON with the Pearson correlation")

    p = sub.add_parser("replay", parents=[base], help="re-run a manifest and compare outputs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--outdir", default=None)
    return parser


def _execute(args, command) -> int:
    """Run one subcommand from a resolved namespace and write its manifest."""
    func, out_keys = COMMANDS[command]
    t0 = time.perf_counter()
    config = {k: v for k, v in vars(args).items() if k not in ("command", "outdir")}
    for key in ("scenario", "params", "weights", "pred", "gt"):
        v = config.get(key)
        if isinstance(v, str):
            config[key] = str(Path(v).resolve())
        elif isinstance(v, list):
            config[key] = [str(Path(x).resolve()) for x in v]
    for key in out_keys:
        if config.get(key):
            config[key] = str(Path(config[key]).resolve())
    ns = argparse.Namespace(**config)
    code, failure = EXIT_OK, None
    try:
        outputs, inputs, deterministic = func(ns)
    except NumericFailure as exc:
        outputs = exc.args[1] if len(exc.args) > 1 else []
        inputs, deterministic = [], True
        code, failure = EXIT_NUMERIC, exc
    manifest_path = config.get("manifest") or (f"{outputs[0]}.manifest.json" if outputs else None)
    if manifest_path:
        flat_inputs = [x for x in inputs if x]
        manifest = {
            "subcommand": command,
            "config": config,
            "output_keys": list(out_keys),
            "seeds": {"seed": config.get("seed")},
            "inputs": {p: schemas.sha256_file(p) for p in flat_inputs},
            "outputs": {p: schemas.sha256_file(p) for p in outputs},
            "deterministic": deterministic,
            "wall_time": time.perf_counter() - t0,
            "version": __version__,
            "exit_code": code,
        }
        schemas.write_json(manifest_path, manifest)
    if failure is not None:
        raise failure
    return code


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        handler = logging.StreamHandler(sys.stderr)
        if args.json_logs:
            handler.setFormatter(_JsonFormatter())
        logging.basicConfig(level=logging.INFO, handlers=[handler], force=True)
        if args.seed is None:
            args.seed = rng.default_seed()
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        if args.command == "replay":
            return cmd_replay(args)
        return _execute(args, args.command)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except FileNotFoundError as exc:
        return _fail(EXIT_USAGE, "missing_file", f"{exc.filename}: no such file")
    except schemas.SchemaError as exc:
        return _fail(EXIT_SCHEMA, "schema", str(exc))
    except (NumericFailure, lrpd.NumericalError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", str(exc.args[0]))
    except (GeometryError, ValueError) as exc:
        return _fail(EXIT_SCHEMA, "invalid_input", str(exc))


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
