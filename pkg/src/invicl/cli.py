"""Command-line entry point: ``invicl {train,eval,verify,defcheck,dump}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import gd_equivalence as gde
from . import harness as H
from .checkpoint import CheckpointError, atomic_write, load_checkpoint
from .masks import is_non_leaking, mask_name, scan_invariant_masks, to_grid
from .model import ModelConfig, build_model
from .schemes import PEScheme, Scheme
from .tasks import OOD, TaskConfig, TaskKind, dump_episodes, sample_task

log = logging.getLogger("invicl")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_ASSERT = 0, 1, 2, 3

DEFAULTS = {
    "model": {"scheme": "invicl", "pe": "symmetric", "layers": 3, "heads": 4, "embed": 64, "max_examples": None},
    "task": {"task": "linreg", "d": 5, "n": 10},
    "train": {"steps": 2000, "batch": 64, "lr": 1e-4, "seed": 0, "eval_every": 100, "clip": 1.0},
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_range(text: str) -> list[int]:
    """Inclusive ``a..b`` range, or a comma list."""
    if ".." in text:
        a, b = text.split("..", 1)
        lo, hi = int(a), int(b)
        if lo > hi:
            raise argparse.ArgumentTypeError(f"empty range {text}")
        return list(range(lo, hi + 1))
    return [int(v) for v in text.split(",") if v]


def parse_int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _check_writable(paths, force: bool) -> None:
    clash = [str(p) for p in paths if Path(p).exists()]
    if clash and not force:
        raise FileExistsError(f"refusing to overwrite {', '.join(clash)} (use --force)")


def write_manifest(path: Path, snapshot: dict, artifacts: dict, **extra) -> None:
    data = {
        "tool": "invicl",
        "version": __version__,
        "config": snapshot,
        "seed": snapshot.get("train", {}).get("seed", snapshot.get("seed")),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        **extra,
    }
    blob = json.dumps(data, indent=2, sort_keys=True).encode()
    atomic_write(path, lambda fh: fh.write(blob))


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise UsageError(f"config file {path} must hold a mapping")
    return data


def resolve(args: argparse.Namespace, config: dict) -> dict:
    """Flags override the config file, which overrides built-in defaults."""
    out = {}
    for section, defaults in DEFAULTS.items():
        sect = config.get(section, {}) or {}
        out[section] = {}
        for key, default in defaults.items():
            flag = getattr(args, key, None)
            out[section][key] = flag if flag is not None else sect.get(key, default)
    return out


# train


def cmd_train(args) -> int:
    snap = resolve(args, _load_config(args.config))
    m, t, tr = snap["model"], snap["task"], snap["train"]
    if tr["steps"] < 1:
        raise UsageError("--steps must be >= 1")
    if tr["batch"] < 1:
        raise UsageError("--batch must be >= 1")
    scheme, pe = Scheme(m["scheme"]), PEScheme(m["pe"])
    if scheme is not Scheme.AR and pe is PEScheme.ABSOLUTE:
        log.warning("%s with absolute positions breaks permutation invariance", scheme.value)
    max_examples = m["max_examples"] or 2 * t["n"]
    mcfg = ModelConfig(m["layers"], m["heads"], m["embed"], t["d"], max_examples, scheme, pe)
    tcfg = TaskConfig(TaskKind(t["task"]), t["d"], t["n"], OOD.NONE, tr["seed"])
    out = Path(args.out)
    ckpt, trace_csv, manifest = out / "ckpt.npz", out / "loss_trace.csv", out / "manifest.json"
    _check_writable([ckpt, trace_csv, manifest], args.force)
    out.mkdir(parents=True, exist_ok=True)
    arts = {"checkpoint": ckpt, "loss_trace": trace_csv}
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    write_manifest(manifest, snap, arts, command="train", started=started)
    cfg = H.TrainConfig(mcfg, tcfg, tr["steps"], tr["batch"], tr["lr"], tr["seed"], tr["eval_every"],
                        str(ckpt), tr["clip"], args.query_only)
    res = H.train(cfg, callback=lambda s, l: log.info("step %d loss %.6f", s, l))
    H.write_csv(trace_csv, H.TRACE_HEADER, [(s, float(v)) for s, v in res.trace])
    write_manifest(manifest, snap, arts, command="train", started=started,
                   finished=time.strftime("%Y-%m-%dT%H:%M:%S"))
    print(f"trained {scheme.value}/{pe.value} for {cfg.steps} steps; final loss {res.trace[-1][1]:.6g}")
    return EXIT_OK


# eval


def _sidecar(csv_path: Path, tag: str) -> Path:
    return csv_path.with_name(f"{csv_path.stem}.{tag}{csv_path.suffix or '.csv'}")


def cmd_eval(args) -> int:
    model, header = load_checkpoint(args.ckpt)
    task_meta = header.get("meta", {}).get("task") or {}
    seed = args.seed if args.seed is not None else 1_000_003
    task = TaskConfig(TaskKind(task_meta.get("kind", "linreg")), model.cfg.d, task_meta.get("n", 10),
                      OOD(args.ood), seed)
    csv_path = Path(args.csv)
    outs = [csv_path]
    if args.sensitivity:
        outs.append(_sidecar(csv_path, "sensitivity"))
    if args.probe:
        outs.append(_sidecar(csv_path, "probe"))
    if args.against:
        outs.append(_sidecar(csv_path, "extrapolation"))
    _check_writable(outs, args.force)

    records = H.mse_curve(model, args.lengths, task, args.episodes)
    if args.reference:
        records += H.reference_curve(args.lengths, task, args.episodes)
    H.write_csv(csv_path, H.MSE_HEADER, H.mse_rows(records))
    for r in records:
        print(f"{r.scheme} length={r.length} mse={r.mse:.6g}")

    if args.sensitivity:
        res = H.sensitivity(model, task, args.sens_n or task.n, args.sensitivity, args.tau)
        H.write_csv(outs[1], H.SENS_HEADER, H.sens_rows([res]))
        print(f"sensitivity change_freq={res.change_freq:.2f} pred_std={res.pred_std:.3g}")
    if args.probe:
        probe, model_mse = H.linear_probe(model, args.probe, task, args.probe_episodes, args.probe_lambda)
        H.write_csv(_sidecar(csv_path, "probe"), H.PROBE_HEADER,
                    H.probe_rows(probe) + [(model.cfg.scheme.value, "model", model_mse)])
        for r in probe:
            print(f"probe layer={r.layer} mse={r.probe_mse:.6g} (model {model_mse:.6g})")
    if args.against:
        other, _ = load_checkpoint(args.against)
        train_len = args.train_len or task.n
        models = {f"{model.cfg.scheme.value}:{args.ckpt}": model, f"{other.cfg.scheme.value}:{args.against}": other}
        recs = H.length_extrapolation(models, train_len, args.factor, task, args.episodes)
        H.write_csv(_sidecar(csv_path, "extrapolation"), H.EXTRAP_HEADER, H.extrap_rows(recs))
        for r in recs:
            print(f"extrapolation {r.label} ratio={r.ratio:.4g}")
    return EXIT_OK


# verify


def verify_masks(args) -> int:
    t0 = time.perf_counter()
    scanned, survivors = scan_invariant_masks(args.n)
    names = sorted(filter(None, (mask_name(m) for m in survivors)))
    both = [m for m in survivors if is_non_leaking(m)]
    inter = ", ".join(mask_name(m) or "?" for m in both) or "none"
    print(f"{scanned} masks scanned, {len(survivors)} invariant, intersection: {inter}")
    for m in survivors:
        print(f"-- {mask_name(m) or 'unnamed'}\n{to_grid(m)}", end="")
    print(f"elapsed {time.perf_counter() - t0:.3f}s")
    expected = sorted(["diagonal", "off-diagonal", "full"])
    if names != expected or len(survivors) != 3:
        print(f"FAIL: invariant set {names} != {expected}")
        return EXIT_ASSERT
    if [mask_name(m) for m in both] != ["diagonal"]:
        print(f"FAIL: intersection {inter} != diagonal")
        return EXIT_ASSERT
    return EXIT_OK


SINGLE_LAYER_TOL = 1e-8
COLLAPSE_TOL = 1e-10


def verify_gd(args) -> int:
    timings = gde.TIMINGS if args.timing == "both" else (args.timing,)
    rows, ok = [], True
    for timing in timings:
        per_layer = np.zeros(args.layers)
        per_layer_gd = np.zeros(args.layers)
        for seed in range(args.seeds):
            X, y, x_t, w0 = gde.random_problem(seed, args.n, args.d)
            rep = gde.verify_equivalence(X, y, x_t, args.eta, args.layers, timing, w0)
            per_layer = np.maximum(per_layer, rep.dev_invicl)
            per_layer_gd = np.maximum(per_layer_gd, rep.dev_gd)
            rows += [(timing, seed, layer + 1, float(dev), float(g))
                     for layer, (dev, g) in enumerate(zip(rep.dev_invicl, rep.dev_gd))]
        print(f"[{timing}] max deviation from LOO recurrence per layer: "
              + " ".join(f"{v:.3g}" for v in per_layer))
        print(f"[{timing}] max deviation from plain GD per layer:       "
              + " ".join(f"{v:.3g}" for v in per_layer_gd))
        if timing == "fresh":
            passed = per_layer[0] <= SINGLE_LAYER_TOL
            ok &= passed
            print(f"[fresh] single-layer match (<= {SINGLE_LAYER_TOL:g}): {'PASS' if passed else 'FAIL'}")
        else:
            worst = 0.0
            for seed in range(args.seeds):
                X, y, x_t, w0 = gde.random_problem(seed, 1, args.d)
                rep = gde.verify_equivalence(X, y, x_t, args.eta, max(args.layers, 10), timing, w0)
                worst = max(worst, rep.dev_gd.max(), rep.dev_invicl.max())
            passed = worst <= COLLAPSE_TOL
            ok &= passed
            print(f"[stale] n=1 collapse to GD over {max(args.layers, 10)} layers: max dev {worst:.3g} "
                  f"(<= {COLLAPSE_TOL:g}): {'PASS' if passed else 'FAIL'}")
    if args.csv:
        _check_writable([args.csv], args.force)
        H.write_csv(args.csv, ("timing", "seed", "layer", "deviation", "deviation_gd"), rows)
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_ASSERT


# defcheck


def _defcheck_seed(payload):
    cfg_dict, n, seed = payload
    cfg = ModelConfig(**cfg_dict)
    model = build_model(cfg, seed=seed, dtype=__import__("torch").float64)
    inst = sample_task(TaskConfig(d=cfg.d, n=n, seed=seed))
    rep = H.definition_checks(model, inst, seed=seed)
    return rep.invariance_dev, rep.leak_effect, rep.effects, rep.context_encoding_shift


def summarize_defcheck(scheme: Scheme, results) -> dict:
    inv = np.array([r[0] for r in results])
    leak = np.array([r[1] for r in results])
    dep = [r[2] for r in results]
    has_dep = np.array([(e > H.INTERDEP_TOL).any() for e in dep])
    no_dep = np.array([e.max() <= H.LEAK_TOL for e in dep])

    def verdict(pass_mask, fail_mask):
        if pass_mask.all():
            return "PASS"
        if fail_mask.mean() >= 0.95:
            return "FAIL"
        return "INCONCLUSIVE"

    return {
        "invariance": verdict(inv <= H.INVARIANCE_TOL, inv > 1e-6),
        "nonleak": verdict(leak <= H.LEAK_TOL, leak > 1e-6),
        "interdep": "PASS" if has_dep.mean() >= 0.95 else ("FAIL" if no_dep.all() else "INCONCLUSIVE"),
        "max_invariance_dev": float(inv.max()),
        "max_leak": float(leak.max()),
        "max_context_shift": float(max(r[3] for r in results)),
    }


def cmd_defcheck(args) -> int:
    scheme = Scheme(args.scheme)
    pe = PEScheme(args.pe) if args.pe else (PEScheme.ABSOLUTE if scheme is Scheme.AR else PEScheme.SYMMETRIC)
    cfg = ModelConfig(args.layers, args.heads, args.embed, args.d, max(args.n, 1), scheme, pe, args.init_std)
    payloads = [(cfg.to_dict(), args.n, s) for s in range(args.seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as ex:
            results = list(ex.map(_defcheck_seed, payloads))
    else:
        results = [_defcheck_seed(p) for p in payloads]
    s = summarize_defcheck(scheme, results)
    print(f"invariance={s['invariance']} nonleak={s['nonleak']} interdep={s['interdep']}")
    print(f"max invariance dev {s['max_invariance_dev']:.3g}, max leak {s['max_leak']:.3g}, "
          f"max context-encoding shift {s['max_context_shift']:.3g}")
    expected = tuple("PASS" if v else "FAIL" for v in H.TABLE1[scheme])
    observed = (s["invariance"], s["nonleak"], s["interdep"])
    if observed != expected:
        print(f"pattern {observed} contradicts expected {expected} for {scheme.value}")
        return EXIT_ASSERT
    print(f"pattern matches expectation for {scheme.value}")
    return EXIT_OK


# dump


def cmd_dump(args) -> int:
    _check_writable([args.out], args.force)
    cfg = TaskConfig(TaskKind(args.task), args.d, args.n, OOD(args.ood), args.seed)
    dump_episodes((sample_task(cfg, e) for e in range(args.episodes)), args.out)
    print(f"wrote {args.episodes} episodes to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="invicl", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    t = sub.add_parser("train", help="train a model on synthetic regression")
    t.add_argument("--config", help="YAML file with model/task/train sections")
    t.add_argument("--scheme", choices=[s.value for s in Scheme])
    t.add_argument("--pe", choices=[s.value for s in PEScheme])
    t.add_argument("--task", choices=[k.value for k in TaskKind])
    t.add_argument("--d", type=int)
    t.add_argument("--n", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--embed", type=int)
    t.add_argument("--max-examples", dest="max_examples", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", dest="eval_every", type=int)
    t.add_argument("--clip", type=float)
    t.add_argument("--query-only", action="store_true", help="train on the query prediction only")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--lengths", type=parse_range, required=True, help="inclusive a..b or comma list")
    e.add_argument("--ood", choices=[o.value for o in OOD], default="none")
    e.add_argument("--episodes", type=int, default=1000)
    e.add_argument("--seed", type=int)
    e.add_argument("--csv", required=True)
    e.add_argument("--reference", action="store_true", help="add least-squares rows")
    e.add_argument("--sensitivity", type=int, metavar="P", help="random permutations for order sensitivity")
    e.add_argument("--sens-n", dest="sens_n", type=int)
    e.add_argument("--tau", type=float, default=H.DEFAULT_TAU)
    e.add_argument("--probe", type=parse_int_list, help="comma-separated layers to probe")
    e.add_argument("--probe-episodes", dest="probe_episodes", type=int, default=2000)
    e.add_argument("--probe-lambda", dest="probe_lambda", type=float, default=H.DEFAULT_PROBE_LAMBDA)
    e.add_argument("--against", help="second checkpoint for the length-extrapolation comparison")
    e.add_argument("--train-len", dest="train_len", type=int)
    e.add_argument("--factor", type=int, default=2)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="mask propositions and the linear-attention GD construction")
    vsub = v.add_subparsers(dest="what", required=True, parser_class=Parser)
    vm = vsub.add_parser("masks")
    vm.add_argument("--n", type=int, default=3)
    vm.set_defaults(func=verify_masks)
    vg = vsub.add_parser("gd")
    vg.add_argument("--n", type=int, default=8)
    vg.add_argument("--d", type=int, default=4)
    vg.add_argument("--eta", type=float, default=0.01)
    vg.add_argument("--layers", type=int, default=5)
    vg.add_argument("--seeds", type=int, default=100)
    vg.add_argument("--timing", choices=[*gde.TIMINGS, "both"], default="both")
    vg.add_argument("--csv")
    vg.add_argument("--force", action="store_true")
    vg.set_defaults(func=verify_gd)

    dc = sub.add_parser("defcheck", help="invariance / leakage / interdependence on random weights")
    dc.add_argument("--scheme", choices=[s.value for s in Scheme], required=True)
    dc.add_argument("--pe", choices=[s.value for s in PEScheme])
    dc.add_argument("--n", type=int, default=4)
    dc.add_argument("--seeds", type=int, default=20)
    dc.add_argument("--d", type=int, default=5)
    dc.add_argument("--layers", type=int, default=3)
    dc.add_argument("--heads", type=int, default=4)
    dc.add_argument("--embed", type=int, default=64)
    dc.add_argument("--init-std", dest="init_std", type=float, default=ModelConfig.init_std)
    dc.add_argument("--jobs", type=int, default=1)
    dc.set_defaults(func=cmd_defcheck)

    du = sub.add_parser("dump", help="write sampled episodes as JSON lines")
    du.add_argument("--task", choices=[k.value for k in TaskKind], default="linreg")
    du.add_argument("--d", type=int, default=5)
    du.add_argument("--n", type=int, default=10)
    du.add_argument("--ood", choices=[o.value for o in OOD], default="none")
    du.add_argument("--episodes", type=int, default=10)
    du.add_argument("--seed", type=int, default=0)
    du.add_argument("--out", required=True)
    du.add_argument("--force", action="store_true")
    du.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"invicl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, FileExistsError, OSError) as exc:
        print(f"invicl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
