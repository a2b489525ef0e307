"""ztric command line: key ceremony, data/model preparation, inference, pipeline runs.

Exit codes: 0 ok, 2 usage, 3 validation refused, 4 crypto error, 5 I/O.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import random
import secrets
import sys
from pathlib import Path

import numpy as np

from .canonical import CAL_SIZE, dims_for_window
from .errors import (
    DlogNotFoundError,
    FrameError,
    InferenceError,
    IssuanceRefused,
    ModelFormatError,
    ParameterError,
    ParseError,
    RangeError,
    ShapeError,
    TopologyError,
    TrainingError,
)
from .groups import get_group, group_names
from .ipfe import Ciphertext, MasterPublicKey, encrypt, key_der, setup
from .model_lab import SynthConfig, TrainConfig, accuracy, export_dataset, generate_dataset, import_dataset, train_mlp
from .quantizer import (
    FloatModel,
    QuantizedModel,
    calibrate,
    fuse_linear_relu,
    load_model,
    quantize_inputs,
    quantize_model,
    quantized_forward_batch,
    save_model,
)
from .secure_inference import build_context
from .serialize import dump_ciphertext, dump_functional_keys, dump_mpk, dump_msk, dumps, loads
from .validator import validate_for_issuance

logger = logging.getLogger("ztric")

EXIT_OK, EXIT_USAGE, EXIT_REFUSED, EXIT_CRYPTO, EXIT_IO = 0, 2, 3, 4, 5
DEFAULT_GROUP = "modp2048"


class UsageError(Exception):
    pass


def default_group() -> str:
    return os.environ.get("ZTRIC_GROUP", DEFAULT_GROUP)


def _rng(seed):
    """Seeded runs are reproducible (tests, demos); unseeded ones use the OS CSPRNG."""
    return random.Random(seed) if seed is not None else secrets.SystemRandom()


def _existing(path: str | None, what: str) -> Path:
    if path is None:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _quantized(path: Path) -> QuantizedModel:
    _, qm = load_model(path)
    if qm is None:
        raise ModelFormatError(f"{path}: no quantized weights; run `ztric quantize` first")
    return qm


def _float(path: Path) -> FloatModel:
    fm, _ = load_model(path)
    if fm is None:
        raise ModelFormatError(f"{path}: no float weights")
    return fm


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, f"{path}: {exc.msg}") from exc


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(obj if isinstance(obj, str) else json.dumps(obj, indent=1))


# -- subcommands --------------------------------------------------------------------
# Each returns (json_payload, human_text, exit_code).

def cmd_keygen(args):
    group = get_group(args.group)
    out = Path(args.out_dir)
    W = None
    if args.model:
        W = _quantized(_existing(args.model, "model file")).q_weights[0]
        l = W.shape[0]
    elif args.length:
        l = args.length
    else:
        raise UsageError("give --model (to also derive functional keys) or --length")
    report = None
    if W is not None:
        report = validate_for_issuance(W)
        if not report.passed:
            raise IssuanceRefused(report)
    mpk, msk = setup(group, l, _rng(args.seed))
    files = {"mpk": out / "mpk.json", "msk": out / "msk.json"}
    _write_json(files["mpk"], dumps(dump_mpk(mpk)))
    _write_json(files["msk"], dumps(dump_msk(msk)))
    if W is not None:
        files["fk"] = out / "fk.json"
        _write_json(files["fk"], dumps(dump_functional_keys(key_der(msk, W), group)))
    payload = {"group": group.name, "l": l, "files": {k: str(v) for k, v in files.items()},
               "functional_keys": int(W.shape[1]) if W is not None else 0}
    return payload, f"wrote {', '.join(str(v) for v in files.values())}", EXIT_OK


def cmd_gen_data(args):
    ds = generate_dataset(SynthConfig(seed=args.seed if args.seed is not None else 42, t=args.t,
                                      balance=args.balance), args.count)
    export_dataset(ds, args.out)
    payload = {"path": args.out, "count": len(ds), "t": ds.t, "jammer_fraction": float(ds.y.mean()) if len(ds) else 0.0}
    return payload, f"wrote {len(ds)} windows (t={ds.t}) to {args.out}", EXIT_OK


def cmd_train(args):
    ds = import_dataset(_existing(args.data, "dataset"))
    dims = tuple(int(v) for v in args.dims.split(",")) if args.dims else dims_for_window(ds.t)
    cfg = TrainConfig(lr=args.lr, epochs=args.epochs, seed=args.seed if args.seed is not None else 42)
    model = train_mlp(ds, dims, cfg)
    save_model(args.out, model)
    meta = {k: model.meta[k] for k in ("train_accuracy", "val_accuracy", "final_loss")}
    payload = {"path": args.out, "dims": list(dims), "params": model.n_params, **meta}
    return payload, (f"trained {dims} ({model.n_params} params): train {meta['train_accuracy']:.4f}, "
                     f"val {meta['val_accuracy']}; saved {args.out}"), EXIT_OK


def _cal_set(path: str, count: int) -> np.ndarray:
    return import_dataset(_existing(path, "calibration data")).X[:count]


def cmd_calibrate(args):
    fm = fuse_linear_relu(_float(_existing(args.model, "model file")))
    calib = calibrate(fm, _cal_set(args.data, args.count))
    payload = calib.to_dict()
    if args.out:
        _write_json(Path(args.out), payload)
    lines = [f"input scale {calib.input.scale:.6g}"] + [
        f"layer {i} output scale {qp.scale:.6g}" for i, qp in enumerate(calib.outputs)]
    if calib.degenerate:
        lines.append(f"degenerate ranges (floor scale used): {', '.join(calib.degenerate)}")
    return payload, "\n".join(lines), EXIT_OK


def cmd_quantize(args):
    fm = _float(_existing(args.model, "model file"))
    fused = fuse_linear_relu(fm)
    qm = quantize_model(fused, _cal_set(args.data, args.count))
    save_model(args.out, qm)
    payload = {"path": args.out, "dims": list(qm.dims), "params": qm.n_params}
    text = f"quantized {qm.dims}; saved {args.out}"
    if args.eval:
        test = import_dataset(_existing(args.eval, "evaluation data"))
        _, cls, _ = quantized_forward_batch(qm, quantize_inputs(qm, test.X))
        payload["float_accuracy"] = accuracy(fused, test.X, test.y)
        payload["quantized_accuracy"] = float(np.mean(cls == test.y))
        text += (f"\nfloat accuracy {payload['float_accuracy']:.4f}, "
                 f"quantized accuracy {payload['quantized_accuracy']:.4f}")
    return payload, text, EXIT_OK


def cmd_validate_weights(args):
    if args.matrix:
        W = np.asarray(_read_json(_existing(args.matrix, "matrix file")), dtype=np.int64)
    else:
        W = _quantized(_existing(args.model, "model file")).q_weights[0]
    report = validate_for_issuance(W)
    payload = report.to_dict()
    return payload, report.summary(), EXIT_OK if report.passed else EXIT_REFUSED


def cmd_encrypt(args):
    mpk = loads(_existing(args.mpk, "public key").read_text())
    if not isinstance(mpk, MasterPublicKey):
        raise ParameterError(f"{args.mpk} does not hold a public key")
    qm = _quantized(_existing(args.model, "model file"))
    ds = import_dataset(_existing(args.data, "dataset"))
    rng = _rng(args.seed)
    Xq = quantize_inputs(qm, ds.X)
    with open(args.out, "w") as fh:
        for row in Xq:
            fh.write(dumps(dump_ciphertext(encrypt(mpk, row.tolist(), rng), mpk.group)) + "\n")
    return {"path": args.out, "count": len(Xq)}, f"wrote {len(Xq)} ciphertexts to {args.out}", EXIT_OK


def _read_ciphertexts(path: Path) -> list[Ciphertext]:
    cts = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            ct = loads(line)
        except (ValueError, KeyError) as exc:
            raise ParseError(lineno, f"{path}: {exc}") from exc
        if not isinstance(ct, Ciphertext):
            raise ParseError(lineno, f"{path}: not a ciphertext envelope")
        cts.append(ct)
    return cts


def cmd_infer(args):
    qm = _quantized(_existing(args.model, "model file"))
    if args.encrypted:
        fk_path = _existing(args.fk, "functional keys")
        fk_env = _read_json(fk_path)
        keys = loads(json.dumps(fk_env))
        ctx = build_context(qm, keys, get_group(fk_env["group"]))
        if args.ciphertexts:
            cts = _read_ciphertexts(_existing(args.ciphertexts, "ciphertext file"))
        else:
            mpk = loads(_existing(args.mpk, "public key (--mpk, to encrypt --data)").read_text())
            rng = _rng(args.seed)
            Xq = quantize_inputs(qm, import_dataset(_existing(args.data, "dataset")).X)
            cts = [encrypt(mpk, row.tolist(), rng) for row in Xq]
        results = [ctx.evaluate(ct) for ct in cts]
        classes = [r.cls for r in results]
        logits = [r.logits.tolist() for r in results]
        path = "encrypted"
    else:
        Xq = quantize_inputs(qm, import_dataset(_existing(args.data, "dataset")).X)
        lg, cls, _ = quantized_forward_batch(qm, Xq)
        classes, logits, path = cls.tolist(), lg.tolist(), "plaintext"
    payload = {"path": path, "classes": [int(c) for c in classes], "logits": logits}
    text = "\n".join(f"{i}\t{'jammer' if c else 'benign'}" for i, c in enumerate(classes))
    return payload, text, EXIT_OK


def _pipeline_exit(result) -> int:
    if "kdc" in result.errors and "IssuanceRefused" in result.errors["kdc"]:
        return EXIT_REFUSED
    return EXIT_CRYPTO if result.partial else EXIT_OK


def cmd_pipeline(args):
    from .pipeline.harness import ScenarioConfig, run_pipeline
    from .pipeline.timing import format_table, write_summary_csv

    cfg = ScenarioConfig.load(_existing(args.config, "scenario config")) if args.config else ScenarioConfig(
        group=default_group())
    overrides = {k: v for k, v in (("mode", args.mode), ("windows", args.windows), ("group", args.group),
                                   ("seed", args.seed)) if v is not None}
    cfg = ScenarioConfig.from_dict({**cfg.to_dict(), **overrides})
    res = run_pipeline(cfg)
    if args.csv:
        write_summary_csv([res.summary], args.csv)
    payload = {"summary": res.summary.to_dict(), "partial": res.partial, "errors": res.errors,
               "decisions": {str(k): v for k, v in sorted(res.decisions.items())},
               "withheld": {str(k): v for k, v in res.withheld.items()},
               "matches_plaintext_path": res.decisions_match_oracle,
               "isolation_violations": res.isolation_violations,
               "records": [r.to_dict() for r in res.records]}
    text = format_table([res.summary])
    if res.partial:
        text += f"\nPARTIAL RESULTS: {res.errors or 'missing decisions'}"
    return payload, text, _pipeline_exit(res)


def cmd_bench(args):
    from .pipeline.harness import ScenarioConfig, run_pipeline
    from .pipeline.timing import format_table, write_summary_csv

    try:
        ts = [int(v) for v in args.windows.split(",")]
    except ValueError:
        raise UsageError(f"--windows expects comma-separated t values, got {args.windows!r}") from None
    rows, partial = [], False
    for t in ts:
        res = run_pipeline(ScenarioConfig(group=args.group, t=t, windows=args.count, mode=args.mode,
                                          seed=args.seed if args.seed is not None else 42))
        rows.append(res.summary)
        partial |= res.partial
    if args.csv:
        write_summary_csv(rows, args.csv)
    payload = {"rows": [r.to_dict() for r in rows], "partial": partial}
    return payload, format_table(rows), EXIT_CRYPTO if partial else EXIT_OK


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="structured JSON output")
    common.add_argument("--seed", type=int, default=None, help="seed every random choice")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="ztric", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("keygen", cmd_keygen, "master keys, plus functional keys for a model's first layer")
    sp.add_argument("--group", default=default_group())
    sp.add_argument("--model", help="quantized model file; derives fk.json after validation")
    sp.add_argument("--length", type=int, help="input length when no model is given")
    sp.add_argument("--out-dir", default=".")

    sp = add("gen-data", cmd_gen_data, "synthetic KPM windows as CSV")
    sp.add_argument("--t", type=int, default=10)
    sp.add_argument("--count", type=int, default=5000)
    sp.add_argument("--balance", type=float, default=0.5)
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train the float MLP")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--dims", help="comma-separated layer widths; default depends on t")
    sp.add_argument("--epochs", type=int, default=60)
    sp.add_argument("--lr", type=float, default=0.01)

    for name, fn, help_ in (("calibrate", cmd_calibrate, "activation ranges on a calibration set"),
                            ("quantize", cmd_quantize, "fuse, calibrate and quantize a float model")):
        sp = add(name, fn, help_)
        sp.add_argument("--model", required=True)
        sp.add_argument("--data", required=True, help="calibration CSV")
        sp.add_argument("--count", type=int, default=CAL_SIZE, help="calibration windows used")
        if name == "quantize":
            sp.add_argument("--out", required=True)
            sp.add_argument("--eval", help="CSV to report float vs quantized accuracy on")
        else:
            sp.add_argument("--out")

    sp = add("validate-weights", cmd_validate_weights, "key budget and basis checks (exit 3 on refusal)")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--model")
    src.add_argument("--matrix", help="JSON list of rows (l x n integers)")

    sp = add("encrypt", cmd_encrypt, "encrypt CSV windows to a JSON-lines ciphertext file")
    sp.add_argument("--mpk", required=True)
    sp.add_argument("--model", required=True, help="model file supplying input quantization")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)

    sp = add("infer", cmd_infer, "classify windows on the encrypted or plaintext path")
    mode = sp.add_mutually_exclusive_group(required=True)
    mode.add_argument("--encrypted", action="store_true")
    mode.add_argument("--plaintext", action="store_true")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data")
    sp.add_argument("--fk", help="functional keys (encrypted path)")
    sp.add_argument("--mpk", help="public key, to encrypt --data on the encrypted path")
    sp.add_argument("--ciphertexts", help="JSON-lines ciphertexts (encrypted path)")

    sp = add("pipeline", cmd_pipeline, "run the KDC / encryptor / RIC simulation")
    sp.add_argument("--config", help="scenario JSON")
    sp.add_argument("--mode", choices=("thread", "process"))
    sp.add_argument("--windows", type=int)
    sp.add_argument("--group")
    sp.add_argument("--csv", help="write the summary row as CSV")

    sp = add("bench", cmd_bench, "pipeline timing across window lengths")
    sp.add_argument("--windows", default="5,10,20", help="comma-separated t values")
    sp.add_argument("--count", type=int, default=20, help="windows per configuration")
    sp.add_argument("--group", default=default_group())
    sp.add_argument("--mode", choices=("thread", "process"), default="thread")
    sp.add_argument("--csv")
    return p


_EXIT_FOR = (
    (IssuanceRefused, EXIT_REFUSED),
    ((DlogNotFoundError, InferenceError, ParameterError, RangeError, FrameError), EXIT_CRYPTO),
    ((OSError, ParseError, ModelFormatError), EXIT_IO),
    ((UsageError, ShapeError, TopologyError, TrainingError, ValueError, KeyError), EXIT_USAGE),
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "group", None) is not None and args.group not in group_names():
        parser.error(f"unknown group {args.group!r}; known: {', '.join(group_names())}")
    if args.command == "infer" and not args.encrypted and not args.data:
        parser.error("infer --plaintext needs --data")
    if args.command == "infer" and args.encrypted and not (args.ciphertexts or (args.data and args.mpk)):
        parser.error("infer --encrypted needs --ciphertexts, or --data with --mpk")
    try:
        payload, text, code = args.func(args)
    except Exception as exc:
        for types, code in _EXIT_FOR:
            if isinstance(exc, types):
                break
        else:
            raise
        report = getattr(exc, "report", None)
        if args.json:
            err = {"error": str(exc), "exit_code": code}
            if report is not None and hasattr(report, "to_dict"):
                err["report"] = report.to_dict()
            print(json.dumps(err))
        else:
            print(f"ztric {args.command}: {exc}", file=sys.stderr)
        return code
    print(json.dumps(payload) if args.json else text)
    return code


if __name__ == "__main__":
    sys.exit(main())
