"""``gpbd`` command line: ``simulate`` runs a scene, ``verify`` runs the oracle checks."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .scenes import CONFIG_DIR, SceneError, load_scene, run_scene

THREADS_ENV = "GPBD_NUM_THREADS"


def _set_threads():
    n = os.environ.get(THREADS_ENV)
    if n:
        import numba

        numba.set_num_threads(int(n))


def _scene_path(name):
    p = Path(name)
    if p.exists():
        return p
    bundled = CONFIG_DIR / f"{name}.yaml"
    if bundled.exists():
        return bundled
    raise SceneError(f"no scene file {name!r}")


def cmd_simulate(args):
    try:
        spec, base = load_scene(_scene_path(args.scene))
    except (SceneError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    mode = {"gs": "gauss-seidel", "jacobi": "jacobi", None: None}[args.mode]
    res = run_scene(spec, args.out, base=base, steps=args.steps, mode=mode, omega=args.omega, seed=args.seed)
    s = res.summary
    if res.ok:
        print(f"{spec.name}: {res.steps} steps, {res.frames} frames, t_avg {s['t_avg_ms']:.2f} ms/step -> {args.out}")
        return 0
    print(f"{spec.name}: diverged ({res.error}); last good frame {res.last_good_frame}", file=sys.stderr)
    return 1


def cmd_verify(args):
    from .verify import run_all

    results = run_all(quick=not args.full)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="gpbd", description="GPBD deformable-body simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a scene config")
    s.add_argument("scene", help="scene YAML file, or the name of a bundled scene")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--steps", type=int, default=None)
    s.add_argument("--mode", choices=("gs", "jacobi"), default=None)
    s.add_argument("--omega", type=float, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify", help="compare against the XPBD and backward Euler oracles")
    v.add_argument("--full", action="store_true", help="use acceptance-size sample counts")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    _set_threads()
    try:
        return args.func(args)
    except (SceneError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
