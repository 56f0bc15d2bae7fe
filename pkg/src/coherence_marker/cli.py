"""Command-line pipeline: ingest, pairs, train, evaluate, marker, associate, report.

Every command writes into a fresh run directory under ``--out`` with a
``manifest.json``; later stages point at an earlier run with ``--from``.
Existing run directories are never modified.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import re
import shutil
import sys
from collections import Counter
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Sequence

from . import __version__, config as cfgmod
from .biomarkers import KINDS, association_table, bin_specs, write_association_tsv, write_insufficient_stub
from .ingest import Corpus, Diagnosis, SessionMeta, corpus_from_dict, corpus_to_dict, load_cohort
from .marker import (
    NarrativeScores,
    cohort_table,
    disruptive_analysis,
    score_narratives,
    subject_series,
    write_cohort_tsv,
    write_disruptive_tsv,
    write_marker_table,
)
from .metrics import average_rows, metrics_row, score_pairs, write_metrics_tsv, write_summary_json
from .pairs import SPLITS, SplitManifest, corpus_pairs, export_pairs, split_by_subject
from .models.training import (
    TRAINABLE,
    Checkpoint,
    build_scorer,
    evaluation_loss,
    generative_checkpoint,
    grid_search,
    train_scorer,
    write_trials,
)

log = logging.getLogger("coherence_marker")

MANIFEST = "manifest.json"
_RUN_DIR = re.compile(r"^(\d{4})-[a-z]+$")


class CLIError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# run store

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _input_hashes(paths: Sequence[Path]) -> dict[str, str]:
    out = {}
    for p in paths:
        files = [p] if p.is_file() else sorted(q for q in p.rglob("*") if q.is_file())
        for f in files:
            out[str(f)] = sha256(f)
    return out


class Run:
    """A new, append-only run directory."""

    def __init__(self, store: Path, command: str, cfg: dict, parent: "LoadedRun | None" = None):
        store.mkdir(parents=True, exist_ok=True)
        numbers = [int(m.group(1)) for p in store.iterdir() if (m := _RUN_DIR.match(p.name))]
        self.run_id = f"{max(numbers, default=0) + 1:04d}-{command}"
        self.dir = store / self.run_id
        self.dir.mkdir()
        self.command = command
        self.cfg = cfg
        self.parent = parent
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        self.refs: dict[str, str] = {}
        self.started = datetime.now(timezone.utc).isoformat(timespec="seconds")

    def path(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def finish(self, summary: dict | None = None) -> None:
        (self.dir / "config.toml").write_text(cfgmod.dumps(self.cfg))
        manifest = {
            "run_id": self.run_id,
            "command": self.command,
            "parent": self.parent.run_id if self.parent else None,
            "version": __version__,
            "config": self.cfg,
            "inputs": self.inputs,
            "refs": self.refs,
            "outputs": sorted(set(self.outputs) | {"config.toml"}),
            "started": self.started,
            "finished": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "summary": summary or {},
        }
        (self.dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


class LoadedRun:
    def __init__(self, directory: Path):
        self.dir = directory
        try:
            self.manifest = json.loads((directory / MANIFEST).read_text())
        except FileNotFoundError as exc:
            raise CLIError(f"unknown run {directory.name}: no {MANIFEST} in {directory}") from exc
        self.run_id = self.manifest["run_id"]
        self.command = self.manifest["command"]

    def ancestors(self, store: Path) -> list["LoadedRun"]:
        """This run and its parents, nearest first."""
        chain = [self]
        while chain[-1].manifest.get("parent"):
            chain.append(LoadedRun(store / chain[-1].manifest["parent"]))
        return chain

    def find(self, store: Path, command: str) -> "LoadedRun":
        for run in self.ancestors(store):
            if run.command == command:
                return run
        raise CLIError(f"run {self.run_id} has no {command!r} stage among its ancestors")


def resolve_run(store: Path, ref: str) -> LoadedRun:
    p = Path(ref)
    if (p / MANIFEST).exists():
        return LoadedRun(p)
    if (store / ref).is_dir():
        return LoadedRun(store / ref)
    matches = sorted(d for d in store.glob(f"{ref}-*") if d.is_dir()) if re.fullmatch(r"\d{4}", ref) else []
    if len(matches) == 1:
        return LoadedRun(matches[0])
    raise CLIError(f"unknown run id {ref!r} in {store}")


# --------------------------------------------------------------------------
# artifact helpers

def load_corpus(run: LoadedRun) -> Corpus:
    return corpus_from_dict(json.loads((run.dir / "corpus.json").read_text()))


def _write_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _split_narratives(corpus: Corpus, manifest: SplitManifest) -> dict[str, list]:
    parts: dict[str, list] = {s: [] for s in SPLITS}
    for nar in corpus:
        split = manifest.assignment.get(nar.meta.subject_id)
        if split is not None:
            parts[split].append(nar)
    return parts


def _meta_to_dict(m: SessionMeta) -> dict:
    return {"subject_id": m.subject_id, "visit_index": m.visit_index, "diagnosis": m.diagnosis.value,
            "mmse": m.mmse, "cdr": m.cdr, "hdr": m.hdr}


def _save_scores(scored: Sequence[NarrativeScores], path: Path) -> None:
    data = [{"meta": _meta_to_dict(ns.meta), "scores": list(ns.scores), "disruptive": list(ns.disruptive)}
            for ns in scored]
    _write_json(path, data)


def _load_scores(path: Path) -> list[NarrativeScores]:
    out = []
    for item in json.loads(path.read_text()):
        meta = dict(item["meta"])
        meta["diagnosis"] = Diagnosis(meta["diagnosis"])
        out.append(NarrativeScores(SessionMeta(**meta), tuple(item["scores"]), tuple(item["disruptive"])))
    return out


def _texts(narratives) -> list[str]:
    return [t for n in narratives for t in n.texts()]


def _load_checkpoints(run: LoadedRun) -> list[Checkpoint]:
    paths = sorted(run.dir.glob("checkpoint_run*.json"))
    if not paths:
        raise CLIError(f"run {run.run_id} has no checkpoints")
    return [Checkpoint.load(p) for p in paths]


def _scorer(ckpt: Checkpoint, train_texts: Sequence[str]):
    if ckpt.config.family == "generative" and not ckpt.parameters:
        return build_scorer(ckpt.config, texts=train_texts)
    return ckpt.scorer()


# --------------------------------------------------------------------------
# commands

def cmd_ingest(args, cfg, store: Path) -> Run:
    ing = cfg["ingest"]
    if args.speakers:
        ing["speakers"] = [s.strip() for s in args.speakers.split(",") if s.strip()]
    if args.dialect:
        ing["dialect"] = args.dialect
    if args.metadata:
        ing["metadata"] = str(args.metadata)
    paths = [Path(p) for p in args.paths]
    for p in paths:
        if not p.exists():
            raise CLIError(f"input not found: {p}")
    narratives = []
    for p in paths:
        metadata = ing["metadata"] or None
        if metadata is None and p.is_dir() and (p / "metadata.csv").exists():
            metadata = p / "metadata.csv"
        narratives.extend(load_cohort(p, metadata, ing["dialect"], ing["speakers"]).narratives)
    corpus = Corpus(narratives)
    run = Run(store, "ingest", cfg)
    run.inputs = _input_hashes(paths + ([Path(ing["metadata"])] if ing["metadata"] else []))
    _write_json(run.path("corpus.json"), corpus_to_dict(corpus))
    by_dx = Counter(n.meta.diagnosis.value for n in corpus)
    subjects_by_dx = Counter(narrs[0].meta.diagnosis.value for narrs in corpus.by_subject().values())
    report = {
        "errors": 0,
        "narratives": len(corpus),
        "subjects": len(corpus.by_subject()),
        "utterances": sum(len(n) for n in corpus),
        "narratives_by_diagnosis": dict(sorted(by_dx.items())),
        "subjects_by_diagnosis": dict(sorted(subjects_by_dx.items())),
        "dropped_utterances": sum(len(n.dropped) for n in corpus),
        "exclusion_codes": {"exc": sum(u.disruptive for n in corpus for u in n.utterances)},
        "speakers": ing["speakers"],
    }
    _write_json(run.path("ingest_report.json"), report)
    run.finish(report)
    return run


def cmd_pairs(args, cfg, store: Path) -> Run:
    parent = resolve_run(store, args.from_run)
    corpus = load_corpus(parent.find(store, "ingest"))
    cohort = cfg["pairs"]["cohort"]
    if args.cohort:
        cohort = cfg["pairs"]["cohort"] = args.cohort
    if cohort != "all":
        corpus = corpus.filter(Diagnosis.parse(cohort))
    if len(corpus) == 0:
        raise CLIError(f"no narratives in cohort {cohort!r}")
    manifest = split_by_subject(corpus, cfg["pairs"]["ratios"], cfg["run"]["seed"])
    run = Run(store, "pairs", cfg, parent)
    manifest.save(run.path("split.json"))
    counts = {}
    for split, narrs in _split_narratives(corpus, manifest).items():
        pos, neg = corpus_pairs(Corpus(list(narrs)))
        export_pairs(pos + neg, Corpus(list(narrs)), run.path(f"pairs_{split}.tsv"))
        counts[split] = {"subjects": manifest.counts()[split], "narratives": len(narrs),
                         "coherent": len(pos), "incoherent": len(neg)}
    _write_json(run.path("pair_counts.json"), counts)
    run.finish(counts)
    return run


def _evaluate(ckpts, parts, cfg, family: str, train_texts) -> tuple[list, Any]:
    alternative = cfg["stats"]["alternative"]
    rows = []
    for i, ck in enumerate(ckpts):
        scorer = _scorer(ck, train_texts)
        scored = score_pairs(scorer, parts["test"], family)
        loss = evaluation_loss(scorer, ck.config, parts["test"])
        rows.append(metrics_row(f"{family}#run{i}", scored, loss, alternative))
    return rows, average_rows(rows, family)


def cmd_train(args, cfg, store: Path) -> Run:
    model = cfg["model"]
    for flag in ("family", "backend", "margin", "learning_rate", "batch_size", "optimizer", "runs",
                 "max_epochs", "direction"):
        value = getattr(args, flag)
        if value is not None:
            model[flag] = value
    if args.finetune is not None:
        model["finetune_steps"] = args.finetune
    if args.grid:
        cfg["grid"]["enabled"] = True
    model["seed"] = cfg["run"]["seed"]
    config = cfgmod.scorer_config(cfg)

    parent = resolve_run(store, args.from_run)
    pairs_run = parent.find(store, "pairs")
    corpus = load_corpus(parent.find(store, "ingest"))
    manifest = SplitManifest.load(pairs_run.dir / "split.json")
    parts = _split_narratives(corpus, manifest)
    train_texts = _texts(parts["train"])

    run = Run(store, "train", cfg, pairs_run)
    run.refs["split"] = str(pairs_run.dir / "split.json")
    if cfg["grid"]["enabled"] and config.family in TRAINABLE:
        config, trials = grid_search(config, cfgmod.grid_pool(cfg), parts["train"], parts["validation"],
                                     cfg["grid"]["max_trials"], cfg["run"]["seed"])
        write_trials(trials, run.path("trials.tsv"))

    ckpts = []
    for r in range(config.runs):
        run_cfg = config.replace(seed=config.seed + r)
        if config.family in TRAINABLE:
            ck = train_scorer(run_cfg, parts["train"], parts["validation"])
        elif config.family == "generative":
            ck = generative_checkpoint(run_cfg, parts["train"], parts["validation"], train_texts)
        else:
            ck = Checkpoint(run_cfg, {}, math.nan, 0, run_cfg.seed)
        ckpts.append(ck)
    rows, avg = _evaluate(ckpts, parts, cfg, config.family, train_texts)
    for i, (ck, row) in enumerate(zip(ckpts, rows)):
        ck.metrics = {k: v for k, v in row.__dict__.items() if k != "scorer"}
        ck.save(run.dir / f"checkpoint_run{i}")
        run.outputs += [f"checkpoint_run{i}.json", f"checkpoint_run{i}.npz"]
    write_metrics_tsv(rows + [avg], run.path("metrics.tsv"))
    write_summary_json([avg], run.path("summary.json"))
    run.finish({"family": config.family, "runs": len(ckpts), "acc_temp": avg.acc_temp,
                "acc_entire": avg.acc_entire, "gap_p_value": avg.gap_p_value})
    return run


def cmd_evaluate(args, cfg, store: Path) -> Run:
    train_run = resolve_run(store, args.from_run).find(store, "train")
    ckpts = _load_checkpoints(train_run)
    corpus = load_corpus(train_run.find(store, "ingest"))
    manifest = SplitManifest.load(train_run.find(store, "pairs").dir / "split.json")
    parts = _split_narratives(corpus, manifest)
    family = ckpts[0].config.family
    rows, avg = _evaluate(ckpts, parts, cfg, family, _texts(parts["train"]))
    run = Run(store, "evaluate", cfg, train_run)
    write_metrics_tsv(rows + [avg], run.path("metrics.tsv"))
    write_summary_json([avg], run.path("summary.json"))
    run.finish({"acc_temp": avg.acc_temp, "acc_entire": avg.acc_entire})
    return run


def cmd_marker(args, cfg, store: Path) -> Run:
    train_run = resolve_run(store, args.from_run).find(store, "train")
    ckpts = _load_checkpoints(train_run)
    best = min(range(len(ckpts)), key=lambda i: (_nan_last(ckpts[i].validation_loss), i))
    ingest_run = train_run.find(store, "ingest")
    train_corpus = load_corpus(ingest_run)
    manifest = SplitManifest.load(train_run.find(store, "pairs").dir / "split.json")
    train_texts = _texts(_split_narratives(train_corpus, manifest)["train"])
    source = resolve_run(store, args.corpus).find(store, "ingest") if args.corpus else ingest_run
    corpus = load_corpus(source)
    scorer = _scorer(ckpts[best], train_texts)
    scored = score_narratives(scorer, corpus)
    run = Run(store, "marker", cfg, train_run)
    run.refs.update({"checkpoint": f"{train_run.run_id}/checkpoint_run{best}", "corpus": source.run_id})
    _save_scores(scored, run.path("narrative_scores.json"))
    write_marker_table(scored, run.path("markers.tsv"))
    series, excluded = subject_series(scored, cfg["marker"]["min_visits"])
    _write_json(run.path("exclusions.json"), {"single_visit_subjects": excluded})
    run.finish({"narratives": len(scored), "series": len(series), "excluded_subjects": len(excluded)})
    return run


def _nan_last(x: float) -> float:
    return math.inf if math.isnan(x) else x


def cmd_associate(args, cfg, store: Path) -> Run:
    marker_run = resolve_run(store, args.from_run).find(store, "marker")
    run = Run(store, "associate", cfg, marker_run)
    _association(marker_run, cfg, run.path("association.tsv"), args.cohort)
    run.finish()
    return run


def _association(marker_run: LoadedRun, cfg, path: Path, cohort: str = "AD") -> bool:
    """Write association tables, or an insufficient-data stub; returns whether tables were written."""
    scored = _load_scores(marker_run.dir / "narrative_scores.json")
    series, _ = subject_series(scored, cfg["marker"]["min_visits"])
    if cohort != "all":
        series = [s for s in series if s.diagnosis is Diagnosis.parse(cohort)]
    specs = bin_specs(cfg["bins"])
    tables = [association_table(series, specs[k], ddof=cfgmod.ddof(cfg), alternative=cfg["stats"]["alternative"])
              for k in KINDS]
    if not series or all(len(t.missing) == len(series) for t in tables):
        write_insufficient_stub(path, f"no {cohort} subject with at least 2 visits has biomarker records")
        return False
    write_association_tsv(tables, path)
    return True


def cmd_report(args, cfg, store: Path) -> Run:
    source = resolve_run(store, args.run_id)
    marker_run = source.find(store, "marker")
    metric_run = next((r for r in marker_run.ancestors(store) if (r.dir / "metrics.tsv").exists()), None)
    run = Run(store, "report", cfg, source)
    if metric_run is not None:
        shutil.copyfile(metric_run.dir / "metrics.tsv", run.path("metrics.tsv"))
    else:
        write_insufficient_stub(run.path("metrics.tsv"), "no trained scorer in the run's ancestry")
    scored = _load_scores(marker_run.dir / "narrative_scores.json")
    series, _ = subject_series(scored, cfg["marker"]["min_visits"])
    ddof, alt = cfgmod.ddof(cfg), cfg["stats"]["alternative"]
    if series:
        rows, tests = cohort_table(series, cfg["marker"]["long_mode"], ddof, alt)
        write_cohort_tsv(rows, tests, run.path("cohort_summary.tsv"))
    else:
        write_insufficient_stub(run.path("cohort_summary.tsv"), "no subject has at least 2 visits")
    ad = [ns for ns in scored if ns.meta.diagnosis is Diagnosis.AD]
    if ad:
        write_disruptive_tsv(disruptive_analysis(ad, ddof, alt), run.path("disruptive.tsv"))
    else:
        write_insufficient_stub(run.path("disruptive.tsv"), "no AD narratives")
    _association(marker_run, cfg, run.path("association.tsv"), args.cohort)
    plots = _plot_series(series, run)
    run.finish({"plots": plots})
    return run


def _plot_series(series, run: Run) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = []
    by_dx: dict[Diagnosis, list] = {}
    for s in series:
        by_dx.setdefault(s.diagnosis, []).append(s)
    for dx, members in sorted(by_dx.items(), key=lambda kv: kv[0].value):
        fig, ax = plt.subplots(figsize=(6, 4))
        for s in members:
            x = [v for v, _ in s.visits]
            ax.plot(x, [m for _, m in s.visits], marker="o", linewidth=1, alpha=0.7)
        ax.set_xlabel("visit")
        ax.set_ylabel("coherence marker")
        ax.set_title(f"{dx.value} (n={len(members)})")
        name = f"marker_series_{dx.value}.png"
        fig.savefig(run.path(name), dpi=100, metadata={"Software": None})
        plt.close(fig)
        names.append(name)
    return names


def cmd_synth(args, cfg, store: Path) -> None:
    from . import synthetic

    seed = cfg["run"]["seed"]
    if args.kind == "healthy":
        subjects = synthetic.healthy_subjects(args.narratives, seed)
    else:
        subjects = synthetic.generate_subjects(args.healthy, args.mci, args.ad, seed)
    out = synthetic.write_corpus(subjects, args.directory)
    print(out)


# --------------------------------------------------------------------------
# entry point

def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # subcommands repeat the global flags; SUPPRESS keeps them from clobbering values given earlier
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file", **kw)
    common.add_argument("--seed", type=int, help="global seed (splits, initialisation, sampling)", **kw)
    common.add_argument("--out", type=Path, help="run store directory (default: runs)", **kw)
    common.add_argument("-v", "--verbose", action="store_true", **kw)
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(
        prog="coherence-marker", description=__doc__.splitlines()[0], parents=[_global_flags(suppress=False)]
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="parse transcripts into a corpus")
    p.add_argument("paths", nargs="+", help="transcript files or directories")
    p.add_argument("--metadata", type=Path, help="metadata table overriding header values")
    p.add_argument("--speakers", help="comma-separated subject speaker codes (default PAR)")
    p.add_argument("--dialect")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pairs", parents=[common], help="split subjects and export utterance pairs")
    p.add_argument("--from", dest="from_run", required=True, help="ingest run id")
    p.add_argument("--cohort", help="diagnosis to draw pairs from, or 'all' (default healthy)")
    p.set_defaults(func=cmd_pairs)

    p = sub.add_parser("train", parents=[common], help="train (or set up) a scorer and report test metrics")
    p.add_argument("--from", dest="from_run", required=True, help="pairs run id")
    p.add_argument("--family", choices=("classifier", "cnn", "discriminative", "generative", "similarity_baseline"))
    p.add_argument("--backend")
    p.add_argument("--margin", type=float)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--optimizer", choices=("adam", "adamw"))
    p.add_argument("--runs", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--direction", choices=("forward", "backward", "mean"))
    p.add_argument("--finetune", type=int, metavar="STEPS", help="fine-tune a generative backend for STEPS steps")
    p.add_argument("--grid", action="store_true", help="grid-search the configured pool first")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="re-score the test split with a train run's checkpoints")
    p.add_argument("--from", dest="from_run", required=True, help="train run id")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("marker", parents=[common], help="score narratives into per-visit markers")
    p.add_argument("--from", dest="from_run", required=True, help="train run id")
    p.add_argument("--corpus", help="ingest run to score (default: the training corpus)")
    p.set_defaults(func=cmd_marker)

    p = sub.add_parser("associate", parents=[common], help="biomarker bins vs marker change")
    p.add_argument("--from", dest="from_run", required=True, help="marker run id")
    p.add_argument("--cohort", default="AD", help="diagnosis to analyse, or 'all'")
    p.set_defaults(func=cmd_associate)

    p = sub.add_parser("report", parents=[common], help="write all tables and plots for a run")
    p.add_argument("run_id", help="marker (or later) run id")
    p.add_argument("--cohort", default="AD", help="diagnosis for the association tables, or 'all'")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic CHAT corpus")
    p.add_argument("directory", type=Path)
    p.add_argument("--kind", choices=("healthy", "cohort"), default="cohort")
    p.add_argument("--narratives", type=int, default=200, help="healthy kind: total narratives")
    p.add_argument("--healthy", type=int, default=20)
    p.add_argument("--mci", type=int, default=14)
    p.add_argument("--ad", type=int, default=40)
    p.set_defaults(func=cmd_synth)
    return parser


def _one_line(exc: BaseException) -> str:
    return " ".join(f"{type(exc).__name__}: {exc}".split())


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load_config(args.config)
        if args.seed is not None:
            cfg["run"]["seed"] = args.seed
        store = args.out or Path("runs")
        result = args.func(args, cfg, store)
        if isinstance(result, Run):
            print(result.run_id)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one parsable line
        log.debug("command failed", exc_info=True)
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
