"""``intriuap`` command line: train, spectrum, attack, eval, transfer.

Exit codes: 0 success, 2 bad arguments, 3 I/O failure, 4 validation failure,
5 numeric failure. Failures print one line ``intriuap: error[<class>]: ...``
to stderr.
"""
import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import asdict, replace

import numpy as np
from threadpoolctl import threadpool_limits

from intriuap import __version__, defaults, linops, zoo
from intriuap.attack import AttackConfig, AttackNumericError, load_xi, run_attack, save_artifact
from intriuap.autodiff import ContractError
from intriuap.datasets import FIXTURE_DIR, MNIST_FIXTURE, DatasetError, load_dataset
from intriuap.evaluate import (dump_examples, parse_defense, robustness_table, transfer_csv,
                               transfer_matrix, write_reports)
from intriuap.model import ModelError, load_model, save_model
from intriuap.ntsr import NTSRError
from intriuap.spectral import layer_singular_pairs, lipschitz_product_bound, oracle_sigma
from intriuap.train import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3, 4, 5
MANIFEST_NAME = "run_manifest.json"


class CliError(Exception):
    def __init__(self, kind, msg):
        super().__init__(msg)
        self.kind = kind


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or action.default is False or action.required:
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("bad-args", message)


def resolve_model_path(ref):
    """Manifest path, directory holding ``model.json``, or a bundled fixture name."""
    for cand in (ref, os.path.join(ref, "model.json"), os.path.join(FIXTURE_DIR, ref, "model.json")):
        if os.path.isfile(cand):
            return cand
    raise FileNotFoundError(f"no model manifest at {ref!r}")


def resolve_data(ref):
    return MNIST_FIXTURE if ref in (None, "mnist5k") else ref


def _out_dir(args):
    return args.out or os.environ.get(defaults.OUTPUT_ENV) or defaults.DEFAULT_OUT


def _write_manifest(out, sub, config, inputs, outputs, seed, started):
    doc = {
        "subcommand": sub,
        "config": config,
        "inputs": inputs,
        "outputs": sorted(outputs),
        "seed": seed,
        "tool_version": __version__,
        "defaults_version": defaults.DEFAULTS_VERSION,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        "duration_s": round(time.time() - started, 3),
    }
    with open(os.path.join(out, MANIFEST_NAME), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def cmd_train(args, started):
    out = _out_dir(args)
    data = resolve_data(args.data)
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                      batch_size=args.batch_size, optimizer=args.optimizer,
                      dataset=os.path.basename(os.path.normpath(data)))
    res = train(zoo.build(args.arch, seed=args.seed), load_dataset(data, "train"), cfg,
                load_dataset(data, "test"))
    model = replace(res.model, metadata=dict(res.model.metadata, train_config=res.config,
                                             test_accuracy=res.final_accuracy,
                                             run_manifest=MANIFEST_NAME))
    save_model(model, os.path.join(out, "model.json"))
    report = {"arch": args.arch, "test_accuracy": res.test_accuracy,
              "train_loss": res.train_loss, "run_manifest": MANIFEST_NAME}
    with open(os.path.join(out, "train_report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "train", dict(asdict(cfg), arch=args.arch), {"data": data},
                    ["model.json", "train_report.json"], args.seed, started)
    print(f"test_accuracy={res.final_accuracy!r}")


def cmd_spectrum(args, started):
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    path = resolve_model_path(args.model)
    model = load_model(path, np.float64)
    pairs = layer_singular_pairs(model, tol=args.tol, max_iters=args.max_iters, seed=args.seed)
    header = ["layer_id", "sigma_max", "iterations", "residual"]
    oracle = {}
    if args.oracle:
        header += ["oracle_sigma", "rel_error"]
        for p in pairs:
            try:
                oracle[p.layer_id] = oracle_sigma(model, p.layer_id)
            except linops.MemoryCapExceeded:
                oracle[p.layer_id] = None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for p in pairs:
        row = [p.layer_id, repr(p.sigma_max), p.iterations, repr(p.residual)]
        if args.oracle:
            o = oracle[p.layer_id]
            row += ["unavailable", "unavailable"] if o is None else \
                [repr(o), repr(abs(p.sigma_max - o) / o if o else 0.0)]
        w.writerow(row)
    with open(os.path.join(out, "spectrum.csv"), "w") as fh:
        fh.write(buf.getvalue())
    cert = lipschitz_product_bound(model, pairs, probes=args.probes, seed=args.seed)
    doc = dict(asdict(cert), model=model.name, run_manifest=MANIFEST_NAME)
    with open(os.path.join(out, "certificate.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "spectrum", {"tol": args.tol, "max_iters": args.max_iters,
                                      "oracle": args.oracle, "probes": args.probes},
                    {"model": path}, ["spectrum.csv", "certificate.json"], args.seed, started)
    sys.stdout.write(buf.getvalue())
    if cert.violations:
        raise CliError("numeric", f"{cert.violations} probes exceed the product bound")


def cmd_attack(args, started):
    out = _out_dir(args)
    path = resolve_model_path(args.model)
    model = load_model(path)
    cfg = AttackConfig(epsilon=args.eps, epochs=args.epochs, learning_rate=args.lr,
                       init_data=args.init, xi_init=args.xi_init,
                       layer_fraction=args.layer_fraction, seed=args.seed,
                       prior_batch=args.prior_batch,
                       resample_prior_each_epoch=args.resample_prior)
    art = run_attack(model, cfg)
    save_artifact(art, out, manifest=MANIFEST_NAME)
    _write_manifest(out, "attack", cfg.to_dict(), {"model": path},
                    ["xi.ntsr", "report.json", "xi.ppm"], args.seed, started)
    print(f"final_objective={art.final_objective!r}")


def cmd_eval(args, started):
    out = _out_dir(args)
    path = resolve_model_path(args.model)
    model = load_model(path)
    data = resolve_data(args.data)
    ds = load_dataset(data, "test")
    xi = load_xi(args.uap)
    filters = [f for f in (parse_defense(d) for d in args.defense) if f is not None]
    reports = robustness_table(model, xi, ds, filters, uap_id=os.path.basename(os.path.normpath(args.uap)))
    write_reports(reports, out, manifest=MANIFEST_NAME)
    outputs = ["eval.csv", "eval.json"]
    if args.examples:
        outputs += [os.path.relpath(p, out) for p in
                    dump_examples(xi, ds, os.path.join(out, "examples"), args.examples)]
    _write_manifest(out, "eval", {"defense": args.defense, "examples": args.examples},
                    {"model": path, "uap": args.uap, "data": data}, outputs, None, started)
    for r in reports:
        print(f"{r.defense}: fooling_ratio={r.fooling_ratio!r}")


def cmd_transfer(args, started):
    out = _out_dir(args)
    os.makedirs(out, exist_ok=True)
    paths = [resolve_model_path(m) for m in args.models]
    models = [load_model(p) for p in paths]
    data = resolve_data(args.data)
    ds = load_dataset(data, "test")
    uaps = [load_xi(u) for u in args.uaps]
    matrix = transfer_matrix(models, uaps, ds, list(args.uaps))
    text = transfer_csv(matrix, list(args.uaps), [m.name for m in models])
    with open(os.path.join(out, "transfer.csv"), "w") as fh:
        fh.write(text)
    _write_manifest(out, "transfer", {}, {"models": paths, "uaps": list(args.uaps), "data": data},
                    ["transfer.csv"], None, started)
    sys.stdout.write(text)


def build_parser():
    a = defaults.ATTACK
    t = defaults.TRAIN
    s = defaults.SPECTRUM
    p = _Parser(prog="intriuap", description=__doc__.splitlines()[0],
                formatter_class=_Formatter)
    p.add_argument("--threads", type=int, default=1,
                   help="cap on BLAS/OpenMP threads; 1 guarantees bit-reproducibility")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = _Formatter
    out_help = f"output directory; falls back to ${defaults.OUTPUT_ENV}, then ./{defaults.DEFAULT_OUT}"

    q = sub.add_parser("train", help="train a victim classifier", formatter_class=fmt)
    q.add_argument("--arch", choices=sorted(zoo.ARCHITECTURES), default="smallcnn",
                   help="victim architecture")
    q.add_argument("--data", default="mnist5k", help="IDX or NTSR dataset directory, or 'mnist5k'")
    q.add_argument("--out", help=out_help)
    q.add_argument("--epochs", type=int, default=t["epochs"], help="training epochs")
    q.add_argument("--lr", type=float, default=t["learning_rate"], help="learning rate")
    q.add_argument("--batch-size", type=int, default=t["batch_size"], help="minibatch size")
    q.add_argument("--optimizer", choices=("adam", "sgd"), default=t["optimizer"],
                   help="adam, or sgd with momentum 0.9")
    q.add_argument("--seed", type=int, default=t["seed"], help="initialization and shuffling seed")
    q.set_defaults(func=cmd_train)

    q = sub.add_parser("spectrum", help="per-layer top singular values and Lipschitz certificate",
                       formatter_class=fmt)
    q.add_argument("--model", required=True, help="manifest, model directory or fixture name")
    q.add_argument("--out", help=out_help)
    q.add_argument("--tol", type=float, default=s["tol"], help="relative sigma tolerance")
    q.add_argument("--max-iters", type=int, default=s["max_iters"], help="power iteration cap")
    q.add_argument("--oracle", action="store_true", help="cross-check against dense SVD")
    q.add_argument("--probes", type=int, default=s["probes"], help="random probe pairs")
    q.add_argument("--seed", type=int, default=0, help="start-vector and probe seed")
    q.set_defaults(func=cmd_spectrum)

    q = sub.add_parser("attack", help="optimize a universal perturbation", formatter_class=fmt)
    q.add_argument("--model", required=True, help="manifest, model directory or fixture name")
    q.add_argument("--eps", type=float, default=a["epsilon"], help="l-inf budget on [0,1] scale")
    q.add_argument("--epochs", type=int, default=a["epochs"], help="optimization epochs T")
    q.add_argument("--lr", type=float, default=a["learning_rate"],
                   help="Adam learning rate; halved every max(1, T//5) epochs")
    q.add_argument("--init", choices=("range", "gaussian", "uniform"), default=a["init_data"],
                   help="pseudo-input prior")
    q.add_argument("--xi-init", choices=("zeros", "uniform_small"), default=a["xi_init"],
                   help="initial perturbation")
    q.add_argument("--layer-fraction", type=float, default=a["layer_fraction"],
                   help="attack only the first ceil(p * layers) linear layers")
    q.add_argument("--prior-batch", type=int, default=a["prior_batch"],
                   help="pseudo-inputs drawn from the prior")
    q.add_argument("--resample-prior", action="store_true",
                   help="redraw the prior jitter every epoch")
    q.add_argument("--seed", type=int, default=a["seed"], help="prior and init seed")
    q.add_argument("--out", help=out_help)
    q.set_defaults(func=cmd_attack)

    q = sub.add_parser("eval", help="fooling ratio with optional defenses", formatter_class=fmt)
    q.add_argument("--model", required=True, help="manifest, model directory or fixture name")
    q.add_argument("--uap", required=True, help="xi.ntsr or attack output directory")
    q.add_argument("--data", default="mnist5k", help="IDX or NTSR dataset directory, or 'mnist5k'")
    q.add_argument("--defense", action="append", default=[],
                   help="gaussian:SIGMA[:RADIUS] or median:K; repeatable")
    q.add_argument("--examples", type=int, default=defaults.EVAL["example_count"],
                   help="number of clean/perturbed PPM pairs to dump")
    q.add_argument("--out", help=out_help)
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("transfer", help="fooling-ratio matrix of UAPs x models", formatter_class=fmt)
    q.add_argument("--models", nargs="+", required=True, help="victim models (columns)")
    q.add_argument("--uaps", nargs="+", required=True, help="perturbations (rows)")
    q.add_argument("--data", default="mnist5k", help="IDX or NTSR dataset directory, or 'mnist5k'")
    q.add_argument("--out", help=out_help)
    q.set_defaults(func=cmd_transfer)
    return p


def _classify(exc):
    if isinstance(exc, CliError):
        return exc.kind
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError, NTSRError)):
        return "io"
    if isinstance(exc, (AttackNumericError, TrainingDiverged, ArithmeticError, np.linalg.LinAlgError)):
        return "numeric"
    if isinstance(exc, (ContractError, ModelError, DatasetError, ValueError)):
        return "validation"
    if isinstance(exc, OSError):
        return "io"
    return None


EXIT_CODES = {"bad-args": EXIT_ARGS, "io": EXIT_IO, "validation": EXIT_VALIDATION,
              "numeric": EXIT_NUMERIC}


def main(argv=None):
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError("bad-args", "--threads must be >= 1")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(args.threads):
            args.func(args, started)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one line and an exit code
        kind = _classify(exc)
        if kind is None:
            raise
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"intriuap: error[{kind}]: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_CODES[kind]
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
