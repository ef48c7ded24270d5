"""Terminal entry point: arrow-key menu plus scriptable subcommands.

The menu mirrors the numbered workflow techniques (1 generate, 2 split,
3 merge, 4 scores); every technique is also available as a subcommand
with identical behavior, so batch jobs never need the interactive path.
"""

from __future__ import annotations

import argparse
import os
import select
import sys
from pathlib import Path

from . import __version__
from .compose import (
    generate_batch,
    load_roster,
    load_student_data_config,
    load_template,
    load_toolconfig,
)
from .errors import ExamflowError
from .merge import MERGE_MODES
from .raster import DEFAULT_ROI, RegionOfInterest
from .scores import collect_scores, emit_distribution, load_grade_scheme, write_scores_csv
from .split import ingest_scan, split_batch


class NotATerminal(ExamflowError):
    pass


def _resolve_jobs(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("EXAMFLOW_JOBS", "")
    if env.strip().isdigit() and int(env) > 0:
        return int(env)
    return os.cpu_count() or 1


def _parse_roi(text: str) -> RegionOfInterest:
    try:
        x, y, w, h = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise ExamflowError(f"--roi expects x,y,w,h fractions, got {text!r}") from exc
    return RegionOfInterest(x, y, w, h)


def _load_context(ns):
    cfg = load_student_data_config(ns.config)
    roster = load_roster(cfg)
    tools = load_toolconfig(ns.tools) if ns.tools else None
    return cfg, roster, tools


def run_generate(ns) -> int:
    _, roster, tools = _load_context(ns)
    template = load_template(ns.template)
    result = generate_batch(
        template,
        roster,
        ns.out,
        dpi=ns.dpi,
        mode=ns.pipeline,
        tools=tools,
    )
    print(f"generated {result.total_pages} pages for {len(roster)} students")
    print(f"batch document: {result.document_path}")
    print(f"manifest:       {result.manifest_path}")
    return 0


def run_split(ns) -> int:
    _, roster, tools = _load_context(ns)
    pages = ingest_scan(ns.scan, tools=tools, dpi=ns.dpi)
    print(f"ingested {len(pages)} pages from {ns.scan}")

    def progress(index, outcome):
        if outcome["status"] == "decoded":
            print(f"page {index}: filed {outcome['payload']}")
        else:
            print(f"page {index}: {outcome['status']} ({outcome.get('reason', '?')})", file=sys.stderr)

    result = split_batch(
        pages,
        roster,
        _parse_roi(ns.roi),
        ns.skew_budget,
        out_dir=ns.out,
        jobs=_resolve_jobs(ns.jobs),
        progress=progress,
    )
    counts = result.counts()
    print(
        f"filed {counts['filed']}, quarantined {counts['quarantined']}, "
        f"duplicates {counts['duplicate_extras']} -> {ns.out}"
    )
    return 0


def run_merge(ns) -> int:
    merge_fn = MERGE_MODES[ns.mode]
    if ns.mode == "aggregate":
        _, roster, _ = _load_context(ns)
        report = merge_fn(ns.tree, ns.out, roster)
    else:
        report = merge_fn(ns.tree, ns.out)
    for warning in report.warnings:
        print(warning, file=sys.stderr)
    print(f"wrote {len(report.documents)} documents ({report.total_pages} pages) -> {ns.out}")
    return 0


def run_scores(ns) -> int:
    _, roster, _ = _load_context(ns)
    scheme = load_grade_scheme(ns.scheme)
    files = []
    for path in ns.scores:
        p = Path(path)
        files.extend(sorted(p.glob("*.csv")) if p.is_dir() else [p])
    table = collect_scores(files, roster, scheme)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(table, out / "scores.csv")
    counts = emit_distribution(table, out / "distribution.svg", sys.stdout)
    if table.missing:
        print(f"{len(table.missing)} (student, exercise) pairs missing, counted as 0", file=sys.stderr)
    print(f"scores for {sum(counts.values())} students -> {out / 'scores.csv'}")
    return 0


TECHNIQUES = [
    ("Generate personalised exams", run_generate),
    ("Split a scanned batch into pages", run_split),
    ("Merge filed pages for correction or review", run_merge),
    ("Collect scores and plot the distribution", run_scores),
]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="student_data.json", help="student_data.json path")
    common.add_argument("--tools", default=None, help="toolconfig.json path")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument(
        "--jobs",
        type=int,
        default=None,
        help="worker processes (default: EXAMFLOW_JOBS or logical CPUs)",
    )
    common.add_argument("--dpi", type=float, default=300.0, help="working raster resolution")

    gen = argparse.ArgumentParser(add_help=False)
    gen.add_argument("--template", default="exam_template.json", help="exam template JSON")
    gen.add_argument(
        "--pipeline",
        choices=("native", "external"),
        default="native",
        help="render pages natively or via the configured typesetter",
    )

    spl = argparse.ArgumentParser(add_help=False)
    spl.add_argument("--scan", default="scan", help="scan directory or PDF")
    spl.add_argument("--roi", default="0,0.85,1,0.15", help="barcode region as x,y,w,h fractions")
    spl.add_argument("--skew-budget", type=float, default=3.0, help="max scan rotation in degrees")

    mrg = argparse.ArgumentParser(add_help=False)
    mrg.add_argument(
        "--mode",
        choices=tuple(MERGE_MODES),
        default="exercise",
        help="student: one file per student; exercise: per student per exercise; "
        "aggregate: one file per exercise across all students",
    )
    mrg.add_argument("--tree", default="out", help="split output tree to merge")

    sco = argparse.ArgumentParser(add_help=False)
    sco.add_argument(
        "--scores",
        nargs="+",
        default=["scores"],
        help="corrector CSV files or directories of them",
    )
    sco.add_argument("--scheme", default="grade_scheme.json", help="grade scheme JSON")

    # the bare invocation opens the menu, so the top level accepts every flag
    parser = argparse.ArgumentParser(
        prog="examflow",
        parents=[common, gen, spl, mrg, sco],
        description="Barcode-stamped exam pipeline: generate, split, merge, score. "
        "Run without a subcommand for the interactive menu.",
    )
    parser.add_argument("--version", action="version", version=f"examflow {__version__}")

    sub = parser.add_subparsers(dest="command")
    sub.add_parser("generate", parents=[common, gen], help="technique 1: build the exam batch")
    sub.add_parser("split", parents=[common, spl], help="technique 2: file scanned pages")
    sub.add_parser("merge", parents=[common, mrg], help="technique 3: merge filed pages")
    sub.add_parser("scores", parents=[common, sco], help="technique 4: aggregate scores")
    sub.add_parser(
        "menu", parents=[common, gen, spl, mrg, sco], help="interactive technique menu"
    )
    parser.set_defaults(command=None)
    return parser


# --- interactive menu -------------------------------------------------------


def read_key_events(stdin=None):
    """Yield 'up', 'down', 'enter', 'escape' or literal characters from a tty."""
    import termios
    import tty

    stdin = stdin or sys.stdin
    fd = stdin.fileno()
    old = termios.tcgetattr(fd)
    try:
        tty.setcbreak(fd)
        while True:
            ch = os.read(fd, 1)
            if not ch:
                return
            if ch == b"\x1b":
                ready, _, _ = select.select([fd], [], [], 0.05)
                if not ready:
                    yield "escape"
                    continue
                seq = os.read(fd, 2)
                if seq == b"[A":
                    yield "up"
                elif seq == b"[B":
                    yield "down"
                else:
                    yield "escape"
            elif ch in (b"\r", b"\n"):
                yield "enter"
            else:
                yield ch.decode("latin-1")
    finally:
        termios.tcsetattr(fd, termios.TCSADRAIN, old)


def menu_select(items, keys, render=None) -> int | None:
    """Drive a vertical selection with key events; None means cancelled."""
    selected = 0
    if render:
        render(selected)
    for key in keys:
        if key == "up":
            selected = (selected - 1) % len(items)
        elif key == "down":
            selected = (selected + 1) % len(items)
        elif key == "enter":
            return selected
        elif key in ("escape", "q"):
            return None
        if render:
            render(selected)
    return None


def _render_menu(items, selected, out) -> None:
    out.write("\x1b[2J\x1b[H")
    out.write("examflow techniques\n\n")
    for i, label in enumerate(items):
        if i == selected:
            out.write(f"  \x1b[7m {i + 1}) {label} \x1b[0m\n")
        else:
            out.write(f"   {i + 1}) {label}\n")
    out.write("\nUse the arrow keys, Enter to run, Esc or q to quit.\n")
    out.flush()


def run_menu(ns) -> int:
    if not (sys.stdin.isatty() and sys.stdout.isatty()):
        print(
            "not a terminal: use the subcommands instead "
            "(examflow generate|split|merge|scores, see --help)",
            file=sys.stderr,
        )
        return 1
    labels = [label for label, _ in TECHNIQUES]
    choice = menu_select(
        labels,
        read_key_events(),
        render=lambda sel: _render_menu(labels, sel, sys.stdout),
    )
    sys.stdout.write("\x1b[2J\x1b[H")
    sys.stdout.flush()
    if choice is None:
        return 0
    label, runner = TECHNIQUES[choice]
    print(f"running technique {choice + 1}: {label}")
    return runner(ns)


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    dispatch = {
        "generate": run_generate,
        "split": run_split,
        "merge": run_merge,
        "scores": run_scores,
        "menu": run_menu,
        None: run_menu,
    }
    try:
        return dispatch[ns.command](ns)
    except (ExamflowError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
