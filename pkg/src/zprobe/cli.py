"""``zprobe`` command line: run, qcalc, selftest, replay.

Exit codes: 0 success, 1 check failure, 2 usage or config error,
3 protocol abort.
"""

from __future__ import annotations

import argparse
import logging
import random
import sys
import time
from pathlib import Path
from typing import Callable

import numpy as np

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("zprobe")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors map to exit 2 like config errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


# -- run ---------------------------------------------------------------------

def cmd_run(args) -> int:
    from zprobe.config import ConfigError, load_config
    from zprobe.data import DataError
    from zprobe.harness import run_training
    from zprobe.replay import write_transcript
    from zprobe.report import write_figures, write_metrics_csv, write_summary
    from zprobe.secagg import ProtocolError

    try:
        cfg = load_config(args.config)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.threads is not None:
            overrides["threads"] = args.threads
        if args.epochs is not None:
            overrides["epochs"] = args.epochs
        if args.timing:
            overrides["timing"] = True
        if overrides:
            cfg = cfg.with_overrides(**overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"cannot create output directory {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG

    def progress(m):
        log.info("epoch %d acc=%.4f flagged=%d/%d contributors=%d", m.epoch, m.accuracy,
                 len(m.flagged_correctness), len(m.flagged_robustness), m.contributors)

    try:
        result = run_training(cfg, progress=progress)
    except (DataError, ConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ProtocolError as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return EXIT_ABORT

    write_metrics_csv(result, out / "metrics.csv")
    write_summary(result, out / "summary.json")
    if result.records:
        write_transcript(out / "transcript.bin", ((r.inputs, r.transcript) for r in result.records))
    if cfg.figures:
        write_figures(result, out)
    print(f"final accuracy {result.final_accuracy:.4f} after {len(result.metrics)} epochs; "
          f"outputs in {out}")
    return EXIT_OK


# -- qcalc -------------------------------------------------------------------

def cmd_qcalc(args) -> int:
    from zprobe.robust import RobustnessError, compute_q, detection_probability

    try:
        budget = compute_q(args.l, args.sm, args.delta)
    except RobustnessError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    q_max = args.qmax or max(2 * budget.q, 10)
    curve = [(q, detection_probability(args.l, args.sm, q)) for q in range(1, min(q_max, args.l) + 1)]
    print(f"q={budget.q}")
    print("q,p")
    for q, p in curve:
        print(f"{q},{p:.10f}")
    if args.plot:
        from zprobe.plotting import plot_detection

        plot_detection(curve, budget.q, args.delta, args.plot)
    return EXIT_OK


# -- selftest ----------------------------------------------------------------

def _selftest_checks(inject_fault: bool) -> list[tuple[str, Callable[[], bool]]]:
    from zprobe import field
    from zprobe.primitives import shamir_reconstruct, shamir_share
    from zprobe.secagg import run_aggregation
    from zprobe.zk import ZKSession

    rng = random.Random(1234)

    def field_axioms() -> bool:
        for _ in range(500):
            a, b, c = (rng.randrange(field.P) for _ in range(3))
            if field.mul(a, field.add(b, c)) != field.add(field.mul(a, b), field.mul(a, c)):
                return False
            if a and field.mul(a, field.inv(a)) != 1:
                return False
            if field.add(a, field.neg(a)) != 0:
                return False
        return field.reduce(field.P) == 0

    def fixed_point() -> bool:
        xs = [-3.25, 0.0, 1e-4, 1234.5]
        return all(abs(field.fp_decode(field.fp_encode(x, 16), 16) - x) <= 2 ** -17 for x in xs)

    def shamir() -> bool:
        for t, n in [(1, 1), (2, 3), (3, 5), (5, 7)]:
            s = rng.randrange(field.P)
            shares = shamir_share(s, t, list(range(1, n + 1)), rng)
            rng.shuffle(shares)
            if shamir_reconstruct(shares[:t], t) != s:
                return False
        return True

    def it_mac() -> bool:
        sess = ZKSession(99)
        sess.preprocess(randoms=64, triples=32)
        for k in range(32):
            x = sess.authenticate(rng.randrange(field.P))
            mac = (x.mac + 1) % field.P if inject_fault and k == 0 else x.mac
            if not sess.check_opening(x.value, mac, x.key):
                return False
        a, b = sess.authenticate(7), sess.authenticate(6)
        return sess.open(sess.mul(a, b)) == 42

    def mask_cancellation() -> bool:
        gen = np.random.default_rng(5)
        ups = {i: field.FixedVec.from_real(gen.normal(size=16)) for i in range(1, 9)}
        tr = run_aggregation(ups, seed=17, q=2)
        want = field.vec_sum([u.coords for u in ups.values()], 16)
        return bool(np.array_equal(tr.aggregate.coords, want))

    return [("field axioms", field_axioms), ("fixed-point round trip", fixed_point),
            ("shamir round trip", shamir), ("IT-MAC relation", it_mac),
            ("mask cancellation n=8", mask_cancellation)]


def cmd_selftest(args) -> int:
    failures = 0
    print(f"{'check':<40}result   ms")
    for name, fn in _selftest_checks(args.inject_fault):
        t0 = time.perf_counter()
        try:
            ok = fn()
        except Exception as exc:  # a crash is a failed check, reported in the table
            ok = False
            name = f"{name} ({type(exc).__name__})"
        ms = 1e3 * (time.perf_counter() - t0)
        failures += not ok
        print(f"{name:<40}{'pass' if ok else 'FAIL':<9}{ms:.0f}")
    return EXIT_CHECK if failures else EXIT_OK


# -- replay ------------------------------------------------------------------

def cmd_replay(args) -> int:
    from zprobe.replay import replay

    result = replay(args.transcript)
    print(result.describe(), file=sys.stdout if result.ok else sys.stderr)
    return EXIT_OK if result.ok else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="zprobe", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run a training experiment from a config file")
    r.add_argument("config")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--seed", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--threads", type=int, help="cap on local-training worker threads")
    r.add_argument("--timing", action="store_true", help="record per-phase wall clock")
    r.set_defaults(fn=cmd_run)

    q = sub.add_parser("qcalc", help="minimal number of sampled checks for a detection target")
    q.add_argument("--l", type=int, required=True, help="update length")
    q.add_argument("--sm", type=float, required=True, help="fraction of tampered coordinates")
    q.add_argument("--delta", type=float, default=0.005, help="allowed miss probability")
    q.add_argument("--qmax", type=int, default=0, help="last q printed in the curve")
    q.add_argument("--plot", metavar="PNG", help="also write the detection curve figure")
    q.set_defaults(fn=cmd_qcalc)

    s = sub.add_parser("selftest", help="fast invariant checks")
    s.add_argument("--inject-fault", action="store_true", help="flip one MAC (test hook)")
    s.set_defaults(fn=cmd_selftest)

    rp = sub.add_parser("replay", help="re-execute a transcript and compare messages")
    rp.add_argument("transcript")
    rp.set_defaults(fn=cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
