"""``signflip`` command line.

Every run prints a provenance header (lines starting with ``#``): tool
version, a SHA-256 of the resolved configuration, the seeds in use and the
number of engine traversals the command performed.  Outputs go only to the
paths given (or to ``$SIGNFLIP_OUT``); inputs are never rewritten.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 precondition
violation.  Failures print one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench.data import SyntheticDatasetSpec
from .bench.experiment import (METHODS as EVAL_METHODS, EvalReport, default_jobs, evaluate_prefixes,
                               reports_to_csv, reports_to_json, run_experiment, top_plan)
from .bench.metrics import FlipEvaluator, mar
from .bench.oracle import EVAL_SUBSAMPLE, brute_force_single_flip
from .bench.train import TrainConfig
from .bench.victim import load_victim, save_victim, train_desk_victim
from .errors import ConfigError, DataError, SignflipError
from .lesion import DEFAULT_L, FlipPlan, apply, plan_random
from .nnengine import count_passes, grad_sum_logits
from .scoring import ABLATIONS, hessian_vector_product, score_ablation, score_hybrid, score_magnitude
from .shield import (SCHEMES, SWEEP_FRACTIONS, encode, load_registry, load_sidecar, save_registry,
                     save_sidecar, select_protected, select_protected_random, stress_sweep, verify_and_repair)
from .tensorstore import candidate_set, load_archive, save_archive

OUT_ENV = "SIGNFLIP_OUT"
ATTACK_METHODS = ("dnl", "1p_dnl", "magnitude_unconstrained", "random") + ABLATIONS
STRESS_SCHEMA = "signflip-stress/1"


def _out_path(value: str | None, default_name: str) -> Path:
    if value:
        return Path(value)
    return Path(os.environ.get(OUT_ENV, ".")) / default_name


def _guard_inputs(outputs, inputs) -> None:
    ins = {Path(p).resolve() for p in inputs if p}
    for o in outputs:
        if o and Path(o).resolve() in ins:
            raise ConfigError(f"refusing to overwrite input file {o}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _seed_list(text) -> list[int]:
    """'20' means seeds 0..19; '3,7,9' lists them; '5:10' is a half-open range.

    Config files may also give an int (a count) or a list of seeds.
    """
    if isinstance(text, int):
        return list(range(text))
    if isinstance(text, list):
        return [int(t) for t in text]
    text = str(text)
    if ":" in text:
        lo, hi = text.split(":", 1)
        return list(range(int(lo), int(hi)))
    if "," in text:
        return _int_list(text)
    return list(range(int(text)))


def _seed_span(seeds: list[int]) -> str:
    if not seeds:
        return ""
    if seeds == list(range(seeds[0], seeds[0] + len(seeds))):
        return f"{seeds[0]}..{seeds[-1]}"
    return ",".join(map(str, seeds))


def _write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data, encoding="utf-8")
    else:
        path.write_bytes(data)


# ---------------------------------------------------------------- commands

def cmd_train(args, out: list[str]) -> dict:
    spec = SyntheticDatasetSpec(args.classes, args.samples_per_class, args.image_size, args.noise_sigma,
                                args.data_seed, args.amplitude)
    hyper = TrainConfig(args.epochs, args.lr, args.momentum, args.batch, args.seed)
    v = train_desk_victim(spec, hyper)
    dest = _out_path(args.out, "desk_model")
    save_victim(v, dest)
    out.append(f"wrote {dest}")
    out.append(f"train_acc {v.train_acc:.4f}")
    out.append(f"test_acc {v.test_acc:.4f}")
    return {"seeds": {"train": args.seed, "data": args.data_seed}}


def cmd_inspect(args, out: list[str]) -> dict:
    if args.archive and not args.model:
        a = load_archive(args.archive)
        out.append("tensor,dtype,shape,count")
        for name in a:
            rec = a[name]
            out.append(f"{name},F32,{'x'.join(map(str, rec.shape))},{rec.data.size}")
        return {}
    v = load_victim(args.model, args.archive)
    m, a = v.model.manifest, v.model.params
    out.append("tensor,dtype,shape,count,layer")
    layer_of = {l.weight_tensor: l.param_layer_index for l in m.param_layers}
    layer_of.update({l.bias_tensor: l.param_layer_index for l in m.param_layers if l.bias_tensor})
    for name in a:
        rec = a[name]
        out.append(f"{name},F32,{'x'.join(map(str, rec.shape))},{rec.data.size},{layer_of.get(name, '')}")
    table = score_magnitude(candidate_set(m, a, args.L))
    out.append("")
    out.append("rank,tensor,flat_index,layer,kernel,value")
    c = table.cands
    for r, i in enumerate(table.order()[:args.top].tolist(), 1):
        out.append(f"{r},{c.tensor_names[c.tensor_id[i]]},{int(c.flat_index[i])},{int(c.layer[i])},"
                   f"{int(c.kernel_index[i])},{float(c.values[i])!r}")
    return {}


def cmd_attack(args, out: list[str]) -> dict:
    v = load_victim(args.model, args.archive)
    _guard_inputs([args.out, args.apply_out], [args.archive, Path(args.model) / "model.safetensors"])
    if args.method == "random":
        plan = plan_random(v.model.manifest, v.model.params, args.k, args.seed, sign_only=not args.any_bit,
                           restrict_L=args.restrict_L)
    else:
        plan = top_plan(v.model, args.method, args.k, args.L, args.seed, args.alpha, args.beta)
    dest = _out_path(args.out, "plan.json")
    _write(dest, plan.dumps())
    out.append(f"wrote {dest}")
    for f in plan.flips:
        out.append(f"flip {f.tensor} {f.flat_index} bit {f.bit}")
    if args.apply_out:
        save_archive(apply(plan, v.model.params), args.apply_out)
        out.append(f"wrote {args.apply_out}")
    return {"seeds": {"plan": args.seed} if args.method not in ("dnl", "magnitude_unconstrained") else {}}


def _load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def cmd_eval(args, out: list[str]) -> dict:
    v = load_victim(args.model, args.archive)
    data = v.test
    ev = FlipEvaluator(v.model, data)
    reports: list[EvalReport] = []
    if args.plan:
        plan = FlipPlan.load(args.plan)
        pts = evaluate_prefixes(ev, plan)
        reports.append(EvalReport(plan.method, plan.L, [plan.seed] if plan.seed is not None else [],
                                  float(ev.baseline), pts, mar([p.ar for p in pts]) if pts else None))
        seeds = {"plan": plan.seed}
    else:
        rseeds = _seed_list(args.random_seeds)
        for method in args.methods:
            if method not in EVAL_METHODS:
                raise ConfigError(f"unknown method {method!r}; expected one of {EVAL_METHODS}")
            run_seeds = rseeds if method == "random" else [args.seed]
            reports.append(run_experiment(v.model, data, method, args.N, args.L, run_seeds, args.alpha, args.beta,
                                          jobs=args.jobs, evaluator=ev))
        seeds = {"method": args.seed, "random": _seed_span(rseeds)}
    csv_path = _out_path(args.csv, "report.csv")
    _write(csv_path, reports_to_csv(reports))
    out.append(f"wrote {csv_path}")
    if args.json:
        _write(Path(args.json), reports_to_json(reports))
        out.append(f"wrote {args.json}")
    for r in reports:
        if r.mAR is not None:
            out.append(f"{r.method} baseline {r.baseline_acc:.4f} mAR{r.N} {r.mAR:.4f}")
    return {"seeds": seeds}


def cmd_defend(args, out: list[str]) -> dict:
    if args.action == "encode":
        v = load_victim(args.model, args.archive)
        m, a = v.model.manifest, v.model.params
        if args.selection == "by_score":
            reg = select_protected(score_magnitude(candidate_set(m, a, args.L)), args.fraction)
        else:
            reg = select_protected_random(candidate_set(m, a, args.L), args.fraction, args.seed)
        side = encode(a, reg, args.scheme)
        rpath, spath = _out_path(args.registry, "registry.json"), _out_path(args.sidecar, "signs.nlsb")
        _guard_inputs([rpath, spath], [args.archive, Path(args.model) / "model.safetensors"])
        save_registry(reg, rpath)
        save_sidecar(side, spath)
        out.append(f"protected {len(reg)} sign bits ({args.fraction:g} of {reg.population})")
        out.append(f"wrote {rpath}")
        out.append(f"wrote {spath}")
        return {"seeds": {"selection": args.seed} if args.selection == "random" else {}}
    # verify
    if not (args.registry and args.sidecar and args.archive):
        raise ConfigError("defend verify needs --archive, --registry and --sidecar")
    _guard_inputs([args.out], [args.archive, args.registry, args.sidecar])
    res = verify_and_repair(load_archive(args.archive), load_registry(args.registry), load_sidecar(args.sidecar))
    for c in res.corrected:
        out.append(f"corrected {c.tensor} {c.flat_index}")
    for b in res.alarms:
        out.append(f"alarm block {b}")
    out.append(f"corrected {len(res.corrected)} alarms {len(res.alarms)}")
    if args.out:
        save_archive(res.repaired, args.out)
        out.append(f"wrote {args.out}")
    return {}


def cmd_stress(args, out: list[str]) -> dict:
    v = load_victim(args.model, args.archive)
    fractions = [f / 100.0 for f in args.fractions]
    if not args.no_baseline and 0.0 not in fractions:
        fractions = [0.0] + fractions
    seeds = _seed_list(args.seeds)
    ev = FlipEvaluator(v.model, v.test)
    rows = stress_sweep(v.model, v.test, fractions, seeds, args.selection, args.scheme,
                        args.flip_percent / 100.0, args.L, not args.any_bit, ev)
    lines = [f"# {STRESS_SCHEMA}", "selection,scheme,fraction_pct,seeds,n_flips,mean_ar,p95_ar,mean_acc"]
    for frac in fractions:
        sel = [r for r in rows if r.fraction == frac]
        ars = np.array([r.ar for r in sel])
        lines.append(f"{args.selection if frac else 'none'},{args.scheme if frac else ''},{frac * 100:g},"
                     f"{len(sel)},{sel[0].n_flips},{float(ars.mean())!r},{float(np.percentile(ars, 95))!r},"
                     f"{float(np.mean([r.acc for r in sel]))!r}")
    dest = _out_path(args.csv, "stress.csv")
    _write(dest, "\n".join(lines) + "\n")
    out.append(f"wrote {dest}")
    if args.runs_csv:
        body = ["selection,fraction_pct,seed,n_flips,acc,ar,corrected,alarms"]
        body += [f"{r.selection},{r.fraction * 100:g},{r.seed},{r.n_flips},{r.acc!r},{r.ar!r},{r.corrected},{r.alarms}"
                 for r in rows]
        _write(Path(args.runs_csv), "\n".join(body) + "\n")
        out.append(f"wrote {args.runs_csv}")
    out.extend(lines[1:])
    return {"seeds": {"stress": _seed_span(seeds)}}


def cmd_scores(args, out: list[str]) -> dict:
    v = load_victim(args.model, args.archive)
    cands = candidate_set(v.model.manifest, v.model.params, args.L)
    if args.method == "magnitude":
        table = score_magnitude(cands)
    else:
        g = grad_sum_logits(v.model, args.seed)
        if args.method == "hybrid":
            table = score_hybrid(cands, g, args.alpha, args.beta)
        else:
            hv = hessian_vector_product(v.model, g) if args.method == "grasp" else None
            table = score_ablation(args.method, cands, g, hv)
    dest = _out_path(args.csv, "scores.csv")
    _write(dest, table.to_csv())
    out.append(f"wrote {dest}")
    return {"seeds": {"gaussian": args.seed} if args.method != "magnitude" else {}}


def cmd_oracle(args, out: list[str]) -> dict:
    v = load_victim(args.model, args.archive)
    table = brute_force_single_flip(v.model, v.test, args.L, args.subsample, args.jobs)
    lines = ["rank,tensor,flat_index,ar1"]
    for r, (c, a) in enumerate(table.ranked(), 1):
        lines.append(f"{r},{c.tensor},{c.flat_index},{a!r}")
    dest = _out_path(args.csv, "oracle.csv")
    _write(dest, "\n".join(lines) + "\n")
    out.append(f"wrote {dest}")
    best = table.ranked()[0]
    out.append(f"best single flip {best[0].tensor} {best[0].flat_index} AR(1) {best[1]:.4f}")
    return {}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="signflip", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"signflip {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp, required=True):
        sp.add_argument("--model", required=required, help="model directory (from `signflip train`)")
        sp.add_argument("--archive", help="evaluate this archive instead of the directory's own")

    t = sub.add_parser("train", help="train the desk victim CNN")
    t.add_argument("--out", help="output model directory")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--data-seed", type=int, default=0)
    t.add_argument("--classes", type=int, default=8)
    t.add_argument("--samples-per-class", type=int, default=500)
    t.add_argument("--image-size", type=int, default=16)
    t.add_argument("--noise-sigma", type=float, default=0.3)
    t.add_argument("--amplitude", type=float, default=0.3)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("inspect", help="tensor table and largest-magnitude weights")
    model_args(i, required=False)
    i.add_argument("--top", type=int, default=10)
    i.add_argument("--L", type=int, default=None, help="restrict the ranking to the first L layers")
    i.set_defaults(func=cmd_inspect)

    a = sub.add_parser("attack", help="plan sign flips and optionally apply them")
    model_args(a)
    a.add_argument("--method", choices=ATTACK_METHODS, default="dnl")
    a.add_argument("--k", type=int, required=True)
    a.add_argument("--L", type=int, default=DEFAULT_L)
    a.add_argument("--seed", type=int, default=0, help="Gaussian-input / random-plan seed")
    a.add_argument("--alpha", type=float, default=1.0)
    a.add_argument("--beta", type=float, default=1.0)
    a.add_argument("--restrict-L", type=int, default=None, help="random method: limit to the first L layers")
    a.add_argument("--any-bit", action="store_true", help="random method: uniform bit position, not just the sign")
    a.add_argument("--out", help="plan JSON path")
    a.add_argument("--apply-out", help="also write the attacked archive here")
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("eval", help="AR(k)/mAR reports for a plan or for attack strategies")
    model_args(e)
    e.add_argument("--plan", help="evaluate every prefix of this plan")
    e.add_argument("--config", help="experiment JSON whose keys set this command's defaults (see experiments/)")
    e.add_argument("--methods", type=lambda s: s.split(","), default=["dnl"],
                   help=f"comma list from {','.join(EVAL_METHODS)}")
    e.add_argument("--N", type=int, default=10)
    e.add_argument("--L", type=int, default=DEFAULT_L)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--random-seeds", default="100", help="random-baseline seeds: N, a:b, or a comma list")
    e.add_argument("--alpha", type=float, default=1.0)
    e.add_argument("--beta", type=float, default=1.0)
    e.add_argument("--jobs", type=int, default=default_jobs())
    e.add_argument("--csv", help="report CSV path")
    e.add_argument("--json", help="report JSON path")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("defend", help="build or check a sign-bit sidecar")
    d.add_argument("action", choices=("encode", "verify"))
    model_args(d, required=False)
    d.add_argument("--fraction", type=float, default=0.10)
    d.add_argument("--selection", choices=("by_score", "random"), default="by_score")
    d.add_argument("--scheme", choices=SCHEMES, default="replicate3")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--L", type=int, default=None, help="rank only the first L layers (default: all)")
    d.add_argument("--registry", help="registry JSON (output for encode, input for verify)")
    d.add_argument("--sidecar", help="sidecar file (output for encode, input for verify)")
    d.add_argument("--out", help="verify: repaired archive path")
    d.set_defaults(func=cmd_defend)

    s = sub.add_parser("stress", help="random sign-flip barrage across protection fractions")
    model_args(s)
    s.add_argument("--config", help="experiment JSON whose keys set this command's defaults")
    s.add_argument("--fractions", type=_float_list, default=[f * 100 for f in SWEEP_FRACTIONS],
                   help="protection percentages, e.g. 1,5,10,20 (0%% is always added)")
    s.add_argument("--no-baseline", action="store_true", help="do not add the unprotected 0%% row")
    s.add_argument("--seeds", default="20", help="N (seeds 0..N-1), a:b, or a comma list")
    s.add_argument("--selection", choices=("by_score", "random"), default="by_score")
    s.add_argument("--scheme", choices=SCHEMES, default="replicate3")
    s.add_argument("--flip-percent", type=float, default=10.0)
    s.add_argument("--L", type=int, default=None)
    s.add_argument("--any-bit", action="store_true")
    s.add_argument("--csv", help="summary CSV path")
    s.add_argument("--runs-csv", help="per-seed CSV path")
    s.set_defaults(func=cmd_stress)

    sc = sub.add_parser("scores", help="export a saliency table as CSV")
    model_args(sc)
    sc.add_argument("--method", choices=("magnitude", "hybrid") + ABLATIONS, default="magnitude")
    sc.add_argument("--L", type=int, default=DEFAULT_L)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--alpha", type=float, default=1.0)
    sc.add_argument("--beta", type=float, default=1.0)
    sc.add_argument("--csv")
    sc.set_defaults(func=cmd_scores)

    o = sub.add_parser("oracle", help="exhaustive single-flip AR(1) table")
    model_args(o)
    o.add_argument("--L", type=int, default=DEFAULT_L)
    o.add_argument("--subsample", type=int, default=EVAL_SUBSAMPLE)
    o.add_argument("--jobs", type=int, default=default_jobs())
    o.add_argument("--csv")
    o.set_defaults(func=cmd_oracle)
    p.subcommands = sub.choices
    return p


def _apply_config(parser, args, argv):
    """Re-parse with the config file's keys as defaults, so explicit flags still win."""
    cfg = _load_config(args.config)
    sub = parser.subcommands[args.command]
    keys = {k.replace("-", "_"): v for k, v in cfg.items() if k not in ("comment", "description")}
    unknown = sorted(set(keys) - set(vars(args)) | {"config", "func", "command"} & set(keys))
    if unknown:
        raise ConfigError(f"{args.config}: unknown keys {unknown}")
    if "fractions" in keys:
        keys["fractions"] = [float(f) for f in keys["fractions"]]
    if "methods" in keys and isinstance(keys["methods"], str):
        keys["methods"] = keys["methods"].split(",")
    sub.set_defaults(**keys)
    return parser.parse_args(argv)


def _config_hash(args) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")}
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    body: list[str] = []
    try:
        if getattr(args, "config", None):
            args = _apply_config(parser, args, argv)
        with count_passes() as passes:
            meta = args.func(args, body) or {}
    except SignflipError as exc:
        return _fail(exc.exit_code, exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(DataError.exit_code, exc)
    print(f"# signflip {__version__} {args.command}")
    print(f"# config-sha256 {_config_hash(args)}")
    print(f"# seeds {json.dumps(meta.get('seeds', {}), sort_keys=True)}")
    print(f"# engine-passes forward={passes.forward} backward={passes.backward}")
    for line in body:
        print(line)
    return 0


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "code": code, "message": str(exc)}), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
