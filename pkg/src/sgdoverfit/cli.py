"""Command-line entry point.

Exit status: 0 when every check passes, 1 when a check fails, 2 on a
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from .errors import AttemptsExhausted, ConfigError, InvalidRegime
from .harness import (Experiment, ExperimentConfig, baseline_checks, records_to_rows,
                      run_baseline_upper, run_coupon_check, run_coverage_check, run_lower_bound,
                      resolve, run_sweep_rates, run_verify_suite, summarize_lower_bound, sweep_checks,
                      write_csv)
from .packing import PackingKind, generate_packing, verify_packing

VARIANTS = {
    "large-k": Experiment.LB_MULTIPASS,
    "small-k": Experiment.LB_SMALL_K,
    "one-pass": Experiment.LB_ONE_PASS,
    "with-replacement": Experiment.LB_WITH_REPLACEMENT,
}

# config-file keys and how to parse them (same names as the long flags)
_KEYS = {
    "n": int, "k": int, "trials": int, "seed": int, "m": int, "d": int,
    "delta": float, "mode": str, "out": str, "variant": str, "kind": str,
    "eta": lambda s: [float(x) for x in s.split(",") if x],
    "tau": lambda s: [int(x) for x in s.split(",") if x],
    "fault": lambda s: [x for x in s.split(",") if x],
}


def read_config(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in _KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _KEYS[key](val.strip())
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def _csv_list(conv):
    def parse(s):
        try:
            return [conv(x) for x in s.split(",") if x]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--n", type=int)
    common.add_argument("--k", type=int)
    common.add_argument("--eta", type=_csv_list(float), help="comma-separated step sizes")
    common.add_argument("--trials", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=["strict", "scaled"])
    common.add_argument("--tau", type=_csv_list(int), help="comma-separated suffix lengths")
    common.add_argument("--out", help="output file")
    common.add_argument("--config", help="key=value file; flags override it")
    common.add_argument("--m", type=int)
    common.add_argument("--d", type=int)
    common.add_argument("--delta", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="sgdoverfit", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-packing", parents=[common], help="generate and certify a packing")
    g.add_argument("--kind", choices=[k.value for k in PackingKind])
    lb = sub.add_parser("lower-bound", parents=[common], help="adversarial lower-bound trials")
    lb.add_argument("--variant", choices=sorted(VARIANTS))
    sub.add_parser("coupon", parents=[common], help="coupon-collector coverage check")
    sub.add_parser("coverage", parents=[common], help="packing coverage probability")
    sub.add_parser("sweep", parents=[common], help="excess loss per epoch and step size")
    sub.add_parser("baseline", parents=[common], help="benign 1-d rate checks")
    v = sub.add_parser("verify", parents=[common], help="invariant battery")
    v.add_argument("--fault", type=_csv_list(str), help="inject faults: radius0.5, threshold44")
    return ap


def _settings(args) -> dict:
    opts = read_config(args.config) if args.config else {}
    for key in ("n", "k", "eta", "trials", "seed", "mode", "tau", "out", "m", "d", "delta",
                "variant", "kind", "fault"):
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    return opts


def _config(exp: Experiment, o: dict, trials: int) -> ExperimentConfig:
    mode = o.get("mode")
    return ExperimentConfig(
        experiment=exp, n=o.get("n"), K=o.get("k"), eta_grid=o.get("eta", []),
        trials=o.get("trials", trials), seed=o.get("seed", 0),
        mode=mode.capitalize() if mode else None, m=o.get("m"), d=o.get("d"),
        delta=o.get("delta"), tau_list=o.get("tau", []), output_path=o.get("out"),
        faults=o.get("fault", []))


def _mode_name(cfg: ExperimentConfig) -> str:
    if cfg.mode:
        return cfg.mode.value
    try:
        return resolve(cfg).mode.value
    except ConfigError:
        return "preset"


def _emit(rows, cfg: ExperimentConfig, mode: str) -> None:
    if cfg.output_path:
        write_csv(rows, cfg.output_path, cfg.seed, mode)
        print(f"wrote {len(rows)} rows to {cfg.output_path}")


def _cmd_gen_packing(o) -> int:
    kind = PackingKind(o.get("kind", PackingKind.BINARY_716.value))
    d = o.get("d", 1024)
    m = o.get("m", 256)
    ps = generate_packing(kind, d, m, o.get("seed", 0))
    rep = verify_packing(ps)
    if o.get("out"):
        ps.save(o["out"])
    print(f"{kind.value} d={d} m={m} seed={ps.seed} passed={rep.passed} "
          f"stat range [{rep.min_offdiag}, {rep.max_offdiag}] bound {rep.bound}")
    return 0 if rep.passed else 1


def _cmd_lower_bound(o) -> int:
    if "variant" not in o:
        raise ConfigError("lower-bound needs --variant")
    cfg = _config(VARIANTS[o["variant"]], o, trials=20)
    records = run_lower_bound(cfg)
    s = summarize_lower_bound(records)
    lo, hi = s["success_ci"]
    print(f"{cfg.experiment.value}: trials={s['trials']} success={s['success_rate']:.3f} "
          f"[{lo:.3f}, {hi:.3f}] event={s['event_rate']:.3f} "
          f"conditional={s['conditional_success']:.3f}")
    _emit(records_to_rows(records), cfg, _mode_name(cfg))
    cond = s["conditional_success"]
    return 0 if (math.isnan(cond) or cond == 1.0) else 1


def _summary_exit(summary) -> int:
    print(f"{summary.name}: {'PASS' if summary.passed else 'FAIL'} {summary.values}")
    return 0 if summary.passed else 1


def _cmd_coupon(o) -> int:
    cfg = _config(Experiment.COUPON, o, trials=2000)
    s = run_coupon_check(cfg)
    _emit([s.values | {"passed": s.passed}], cfg, "-")
    return _summary_exit(s)


def _cmd_coverage(o) -> int:
    cfg = _config(Experiment.COVERAGE, o, trials=1000)
    s = run_coverage_check(cfg)
    _emit([s.values | {"passed": s.passed}], cfg, "Strict")
    return _summary_exit(s)


def _cmd_sweep(o) -> int:
    cfg = _config(Experiment.SWEEP, o, trials=10)
    rows = run_sweep_rates(cfg)
    for r in rows:
        print(f"eta={r['eta']:.4g} epoch={r['epoch']} measured={r['measured']:.6g} "
              f"envelope={r['envelope']:.6g}")
    _emit(rows, cfg, _mode_name(cfg))
    return _summary_exit(sweep_checks(rows, cfg.n or 10))


def _cmd_baseline(o) -> int:
    cfg = _config(Experiment.BASELINE, o, trials=1000)
    rows = run_baseline_upper(cfg)
    for r in rows:
        print(f"{r['variant']:>16} n={r['n']:<6} eta={r['eta']:.3g} excess={r['excess']:.5f} "
              f"gap={r['gap']:.5f} opt={r['opt']:.5f}")
    _emit(rows, cfg, "-")
    return _summary_exit(baseline_checks(rows))


def _cmd_verify(o) -> int:
    cfg = _config(Experiment.VERIFY, o, trials=1)
    rep = run_verify_suite(cfg)
    for line in rep.lines():
        print(line)
    if cfg.output_path:
        Path(cfg.output_path).write_text("\n".join(rep.lines()) + "\n")
    return 0 if rep.passed else 1


COMMANDS = {
    "gen-packing": _cmd_gen_packing,
    "lower-bound": _cmd_lower_bound,
    "coupon": _cmd_coupon,
    "coverage": _cmd_coverage,
    "sweep": _cmd_sweep,
    "baseline": _cmd_baseline,
    "verify": _cmd_verify,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](_settings(args))
    except (ConfigError, InvalidRegime, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AttemptsExhausted as exc:
        print(f"packing generation failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
