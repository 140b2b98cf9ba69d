"""Command-line entry point.

Exit codes: 0 success, 2 input error, 3 data degeneracy, 4 proposer unavailable.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path
from typing import Sequence

from .bench.march_leuba import generator_from_doc
from .bench.report import emit_report, write_report
from .bench.runner import run_bench
from .bench.systems import (
    DEFAULT_SPLIT,
    SystemSpec,
    fixture_replay_path,
    generate_trajectory,
    load_spec,
    read_spec_doc,
    spec_from_doc,
)
from .config import ConfigError, RunConfig, load_config
from .errors import (
    DegenerateRange,
    DegenerateVariance,
    DimensionMismatch,
    GrammarError,
    InvalidTrajectory,
    ProposerUnavailable,
    SpecError,
    TruthDivergence,
    UnstableConfiguration,
)
from .loop import baseline_dictionary, normalize_log, refine, run_baseline
from .propose import MutationProposer, Proposer, RemoteProposer, ScriptedProposer
from .regress import Trajectory, read_trajectory, write_trajectory
from .serialize import dumps, write_json

log = logging.getLogger("sindyloop")

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE, EXIT_PROPOSER = 0, 2, 3, 4
INPUT_ERRORS = (
    SpecError,
    ConfigError,
    InvalidTrajectory,
    GrammarError,
    TruthDivergence,
    UnstableConfiguration,
    DimensionMismatch,
    OSError,
)


def make_proposer(
    flag: str,
    cfg: RunConfig,
    system: str | None = None,
    spec_path: Path | None = None,
) -> Proposer:
    """Resolve ``remote``, ``replay[:<file-or-dir>]`` or ``mutate:<seed>``.

    A bare ``replay`` looks for ``<spec stem>.replay.json`` next to the spec
    file, then for the shipped fixture replay of ``system``.
    """
    kind, _, arg = flag.partition(":")
    if kind == "remote":
        p = cfg.proposer
        return RemoteProposer.from_env(
            p.endpoint, p.model, p.api_key_env,
            max_tokens=p.max_tokens, retries=p.retries, backoff=p.backoff, timeout=p.timeout,
        )
    if kind == "mutate":
        try:
            return MutationProposer(int(arg))
        except ValueError:
            raise ConfigError(f"mutate proposer needs an integer seed, got {arg!r}") from None
    if kind == "replay":
        if arg:
            path = Path(arg)
            if path.is_dir():
                if system is None:
                    raise ConfigError("replay:<dir> needs a system name")
                path = path / f"{system}.replay.json"
        elif spec_path is not None and spec_path.with_name(f"{spec_path.stem}.replay.json").exists():
            path = spec_path.with_name(f"{spec_path.stem}.replay.json")
        elif system is not None:
            path = fixture_replay_path(system)
        else:
            raise ProposerUnavailable("no replay file given and none can be inferred")
        if not path.exists():
            raise ProposerUnavailable(f"replay file {path} not found")
        return ScriptedProposer.from_file(path)
    raise ConfigError(f"unknown proposer {flag!r} (expected remote, replay:<file>, mutate:<seed>)")


def cmd_generate(args: argparse.Namespace) -> int:
    spec_path = Path(args.spec)
    doc = read_spec_doc(spec_path)
    if doc.get("generator") == "march_leuba":
        traj, _ = generator_from_doc(doc, args.split)
    else:
        traj = generate_trajectory(spec_from_doc(doc), args.split)
    if args.seed is not None:
        traj.meta["seed"] = args.seed
    side = write_trajectory(traj, args.out)
    print(
        f"wrote {args.out} + {side.name} ({traj.n} samples, {traj.n_states} states, "
        f"{traj.n_inputs} inputs, test from sample {traj.split})"
    )
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    traj = read_trajectory(args.traj)
    report = run_baseline(traj, baseline_dictionary(traj), cfg.loop_config())
    doc = report.to_doc()
    if args.out:
        write_json(doc, args.out)
    else:
        sys.stdout.write(dumps(doc))
    status = report.rollout.outcome.value
    log.info("baseline rollout %s, max NRMSE %s", status, report.rollout.max_nrmse)
    return EXIT_OK


def cmd_refine(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    traj = read_trajectory(args.traj)
    proposer = make_proposer(args.proposer, cfg, system=traj.meta.get("system"))
    result = refine(traj, proposer, cfg.loop_config())
    run_log = normalize_log(result.log) if args.normalize else result.log
    write_json(run_log, args.out)
    for line in result.best_model.equations():
        print(line)
    s = result.best_score
    print(
        f"stop={result.stop_reason} iterations={result.iterations} max_nrmse={s.max_nrmse:.6g} "
        f"J={s.J:.6g} safeguard={'yes' if result.safeguard_applied else 'no'}"
    )
    return EXIT_OK


def _spec_files(spec_dir: Path) -> list[Path]:
    if not spec_dir.is_dir():
        raise SpecError(f"{spec_dir} is not a directory")
    return sorted(
        p for p in spec_dir.glob("*.json") if not p.name.endswith((".replay.json", ".meta.json"))
    )


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    paths = _spec_files(Path(args.specs))
    if not paths:
        raise SpecError(f"no spec files in {args.specs}")
    specs = [(load_spec(p), p) for p in paths]
    if args.proposer == "remote":
        make_proposer("remote", cfg)  # fail fast on a missing credential

    def factory(spec: SystemSpec, path: Path | None) -> Proposer:
        return make_proposer(args.proposer, cfg, system=spec.name, spec_path=path)

    jobs = args.jobs or cfg.run.jobs
    results = run_bench(
        specs, factory, cfg.loop_config(), jobs, cfg.run.split,
        cfg.grading.match_fraction, cfg.grading.spurious_threshold,
    )
    report = emit_report(results, cfg.loop.tau)
    jpath, cpath = write_report(report, args.out)
    for r in results:
        if r.error:
            print(f"{r.system:12s} ERROR {r.error}")
        else:
            print(
                f"{r.system:12s} baseline={_fmt(r.baseline_max_nrmse)} refined={_fmt(r.refined_max_nrmse)} "
                f"grades={r.baseline_grade}/{r.refined_grade} stop={r.stop_reason}"
            )
    print(f"refined better on {report['refined_better']}/{len(results)}; report: {jpath}, {cpath}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("sindyloop.service.app:app", host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def _fmt(v: float | None) -> str:
    if v is None:
        return "-"
    return "inf" if math.isinf(v) else f"{v:.3g}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sindyloop", description="Proposal-guided sparse identification of ODEs.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")

    g = sub.add_parser("generate", help="simulate a system spec into a trajectory CSV")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--split", type=float, default=DEFAULT_SPLIT)
    g.add_argument("--seed", type=int, default=None, help="recorded in metadata; generation is noise-free")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("baseline", help="fit the fixed broad dictionary and report trust labels")
    b.add_argument("--traj", required=True)
    b.add_argument("--out")
    with_config(b)
    b.set_defaults(func=cmd_baseline)

    r = sub.add_parser("refine", help="run the refinement loop")
    r.add_argument("--traj", required=True)
    r.add_argument("--proposer", required=True, help="remote | replay[:<file-or-dir>] | mutate:<seed>")
    r.add_argument("--out", required=True)
    r.add_argument("--normalize", action="store_true", help="drop wall-clock fields from the run log")
    with_config(r)
    r.set_defaults(func=cmd_refine)

    h = sub.add_parser("bench", help="baseline + refine over a directory of specs")
    h.add_argument("--specs", required=True)
    h.add_argument("--proposer", required=True)
    h.add_argument("--out", required=True)
    h.add_argument("--jobs", type=int, default=0)
    with_config(h)
    h.set_defaults(func=cmd_bench)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if getattr(args, "split", None) is not None and not 0.0 < args.split < 1.0:
            raise ConfigError("--split must lie strictly between 0 and 1")
        return args.func(args)
    except BrokenPipeError:
        return EXIT_OK
    except ProposerUnavailable as exc:
        print(f"error: proposer unavailable: {exc}", file=sys.stderr)
        return EXIT_PROPOSER
    except (DegenerateRange, DegenerateVariance) as exc:
        print(f"error: degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
