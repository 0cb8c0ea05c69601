"""Command-line entry point: ``ood3d <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 data error.
"""
import argparse
import csv
import io
import json
import shutil
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence

from .config import from_mapping, read_kv_file
from .errors import ConfigError, OodError, ParseError
from .forge import ForgeConfig, ForgeMethod, default_mesh_bank, load_mesh_dir
from .head import MlpHead, TrainConfig, load_jsonl, save_jsonl
from .matcher import hit_rates, match_scan, pooled_samples
from .metrics import evaluate
from .pipeline import (
    SCENE_METHODS,
    evaluate_scans,
    forge_scene,
    retained_scans,
    scan_scores,
    train_head,
    training_inputs,
)
from .probe import ProbeConfig
from .scan_io import EvalSubset, RunConfig, SortMode, load_manifest, load_scans, relocate, save_manifest, save_scan
from .scorers import ScorerConfig, score_scan
from .synth import WORLD_FILE, DetectorEmulation, WorldConfig, WorldModel, generate_world, load_world, rerender

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DATA = 0, 2, 3, 4

CSV_COLUMNS = ("delta_thresh", "d_thresh", "sort_mode", "method", "hits_open", "hits_closed", "auroc", "fpr95",
               "aupr_e", "aupr_s")
STORED = "stored"


class ConfigFileError(Exception):
    """A configuration file could not be read or parsed."""


# ---------------------------------------------------------------------------
# settings
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Settings:
    run: RunConfig = RunConfig()
    scorer: ScorerConfig = ScorerConfig()
    probe: ProbeConfig = ProbeConfig()
    train: TrainConfig = TrainConfig()
    forge: ForgeConfig = ForgeConfig()


def load_settings(args) -> Settings:
    sections = {}
    if getattr(args, "config", None):
        try:
            sections = read_kv_file(args.config)
        except OSError as exc:
            raise ConfigFileError(f"cannot read config {args.config}: {exc.strerror}") from None
        except ParseError as exc:
            raise ConfigFileError(str(exc)) from None
    unknown = set(sections) - {"", "run", "scorer", "probe", "train", "forge"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    run = {**sections.get("", {}), **sections.get("run", {})}
    s = Settings(
        run=from_mapping(RunConfig, run, "run"),
        scorer=from_mapping(ScorerConfig, sections.get("scorer", {}), "scorer"),
        probe=from_mapping(ProbeConfig, sections.get("probe", {}), "probe"),
        train=from_mapping(TrainConfig, sections.get("train", {}), "train"),
        forge=from_mapping(ForgeConfig, sections.get("forge", {}), "forge"),
    )
    seed = getattr(args, "seed", None)
    if seed is not None:
        s = replace(s, run=replace(s.run, rng_seed=seed), train=replace(s.train, rng_seed=seed),
                    forge=replace(s.forge, rng_seed=seed))
    if getattr(args, "subset", None):
        subset = EvalSubset.ALL_SCANS if args.subset == "all" else EvalSubset.OPEN_SCANS_ONLY
        s = replace(s, run=replace(s.run, eval_subset=subset))
    if getattr(args, "forge_method", None):
        s = replace(s, forge=replace(s.forge, method=ForgeMethod.parse(args.forge_method)))
    if getattr(args, "k", None) is not None:
        s = replace(s, forge=replace(s.forge, topk_k=args.k))
    return s


def _world_for(manifest) -> Optional[WorldModel]:
    echo = manifest.root / WORLD_FILE
    if not echo.exists():
        return None
    world, emulation = load_world(echo)
    return WorldModel(world, emulation)


def _mesh_bank(args):
    if getattr(args, "meshes", None):
        bank = load_mesh_dir(args.meshes)
        if not bank:
            raise ConfigError(f"no .off meshes in {args.meshes}")
        return bank
    return default_mesh_bank()


def _write_dataset(scans, manifest, out_dir: Path, name_suffix: str) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    rel = []
    for scan in scans:
        p = f"scans/{scan.scan_id}.json"
        save_scan(scan, out_dir / p, manifest, blobs=True)
        rel.append(p)
    src_echo = manifest.root / WORLD_FILE
    if src_echo.exists() and src_echo.resolve() != (out_dir / WORLD_FILE).resolve():
        shutil.copyfile(src_echo, out_dir / WORLD_FILE)
    new = relocate(manifest, rel, out_dir, name=manifest.name + name_suffix)
    return save_manifest(new, out_dir / "manifest.json")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def result_row(run: RunConfig, method: str, result) -> List[str]:
    m = result.metrics
    return [_fmt(run.delta_thresh), _fmt(run.d_thresh), run.sort_mode.value, method, _fmt(result.hits.hits_open),
            _fmt(result.hits.hits_closed), _fmt(m.auroc), _fmt(m.fpr95), _fmt(m.aupr_e), _fmt(m.aupr_s)]


def write_csv(rows: Sequence[Sequence[str]], path: Path) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(rows)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def read_csv_rows(path) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ParseError(f"unexpected report columns {reader.fieldnames}", path=path)
        return list(reader)


def markdown_table(rows: Sequence[dict]) -> str:
    """Methods x metrics in percent, one line per CSV row."""
    head = "| Method | δ | d (m) | Sort | Hits-O % | Hits-C % | AUROC % | FPR-95 % | AUPR-E % | AUPR-S % |"
    lines = [head, "|" + "---|" * 10]
    for r in rows:
        pct = [f"{100 * float(r[k]):.1f}" for k in ("hits_open", "hits_closed", "auroc", "fpr95", "aupr_e", "aupr_s")]
        lines.append(f"| {r['method']} | {float(r['delta_thresh']):g} | {float(r['d_thresh']):g} | {r['sort_mode']} | "
                     + " | ".join(pct) + " |")
    return "\n".join(lines) + "\n"


def _report_paths(out) -> tuple:
    out = Path(out)
    stem = out.with_suffix("") if out.suffix in (".csv", ".md") else out
    return stem.with_suffix(".csv"), stem.with_suffix(".md")


# ---------------------------------------------------------------------------
# scorer resolution
# ---------------------------------------------------------------------------


def resolve_scorer(name: str, settings: Settings, base: Path = Path(".")):
    """(label, scorer): a single-stage method name, 'stored', or a head model path."""
    if name == STORED:
        return STORED, None
    try:
        return name, replace(settings.scorer, method=name)
    except ConfigError:
        pass
    path = Path(name)
    if not path.is_absolute():
        path = base / path
    if path.suffix == ".json" or path.exists():
        return Path(name).stem, MlpHead.load(path)
    raise ConfigError(f"unknown scorer {name!r}: not a method name, '{STORED}', or a model file")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    world, emulation = WorldConfig(), DetectorEmulation()
    if args.config:
        try:
            world, emulation = load_world(args.config)
        except OSError as exc:
            raise ConfigFileError(f"cannot read world config {args.config}: {exc.strerror}") from None
        except ParseError as exc:
            raise ConfigFileError(str(exc)) from None
    if args.seed is not None:
        world = replace(world, rng_seed=args.seed)
    path = generate_world(world, emulation, args.out)
    print(path)
    return EXIT_OK


def cmd_score(args, settings: Settings) -> int:
    manifest = load_manifest(args.manifest)
    scans = load_scans(manifest)
    scored, errors = [], []
    for scan in scans:
        try:
            scored.append(score_scan(scan, settings.scorer))
        except OodError as exc:
            errors.append(f"{scan.scan_id}: {exc}")
    if errors:
        for line in errors:
            print(line, file=sys.stderr)
        return EXIT_DATA
    path = _write_dataset(scored, manifest, Path(args.out), "" if Path(args.out).resolve() == manifest.root.resolve()
                          else f"+{settings.scorer.method.value}")
    print(path)
    return EXIT_OK


def cmd_forge(args, settings: Settings) -> int:
    manifest = load_manifest(args.manifest)
    scans = load_scans(manifest)
    fc = settings.forge
    world = _world_for(manifest)
    if fc.method in SCENE_METHODS:
        kept = retained_scans(scans, fc.method)
        bank = _mesh_bank(args)
        edited = [forge_scene(s, fc, manifest, bank) for s in kept]
        if world is not None:
            edited = [rerender(world, s, fc.rng_seed) for s in edited]
        else:
            print("warning: no world echo; detections of forged scans are not re-rendered", file=sys.stderr)
        print(_write_dataset(edited, manifest, Path(args.out), f"+{fc.method.value}"))
        return EXIT_OK
    probe = None if args.embeddings == STORED else settings.probe
    inputs = training_inputs(scans, fc, settings.run, probe, world)
    print(save_jsonl(inputs, args.out))
    return EXIT_OK


def cmd_train_head(args, settings: Settings) -> int:
    fc = settings.forge
    probe = None if args.embeddings == STORED else settings.probe
    if args.inputs:
        inputs = load_jsonl(args.inputs)
    else:
        if not args.manifest:
            raise ConfigError("train-head needs --manifest or --inputs")
        manifest = load_manifest(args.manifest)
        world = _world_for(manifest)
        if fc.method in SCENE_METHODS and world is None:
            raise ConfigError(f"{fc.method.value} needs a synthetic dataset (world echo) to re-render scenes")
        inputs = training_inputs(load_scans(manifest), fc, settings.run, probe, world, _mesh_bank(args))
    head = train_head(inputs, settings.train, probe, fc)
    head.save(args.out)
    print(f"final training loss: {head.loss_history[-1]:.6f}")
    print(args.out)
    return EXIT_OK


def cmd_eval(args, settings: Settings) -> int:
    manifest = load_manifest(args.manifest)
    scans = load_scans(manifest)
    name = args.model if args.model else (args.scorer or STORED)
    label, scorer = resolve_scorer(name, settings)
    result = evaluate_scans(scans, settings.run, scorer)
    csv_path, md_path = _report_paths(args.out)
    write_csv([result_row(settings.run, label, result)], csv_path)
    md_path.write_text(markdown_table(read_csv_rows(csv_path)))
    print(markdown_table(read_csv_rows(csv_path)), end="")
    return EXIT_OK


@dataclass(frozen=True)
class SweepSpec:
    d_thresh: tuple
    delta_thresh: tuple
    sort_mode: tuple
    methods: tuple

    def __post_init__(self):
        for name in ("d_thresh", "delta_thresh", "sort_mode", "methods"):
            if not getattr(self, name):
                raise ConfigError(f"sweep grid '{name}' is empty")
        object.__setattr__(self, "sort_mode", tuple(SortMode.parse(s) for s in self.sort_mode))

    def cells(self):
        for delta in self.delta_thresh:
            for d in self.d_thresh:
                for sort in self.sort_mode:
                    yield float(delta), float(d), sort


def load_sweep_spec(path) -> SweepSpec:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigFileError(f"cannot read sweep spec {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigFileError(str(ParseError(exc.msg, line=exc.lineno, path=path))) from None
    if not isinstance(doc, dict):
        raise ConfigError("sweep spec must be a JSON object")
    extra = set(doc) - {"d_thresh", "delta_thresh", "sort_mode", "methods"}
    if extra:
        raise ConfigError(f"unknown sweep keys {sorted(extra)}")
    run = RunConfig()
    return SweepSpec(
        d_thresh=tuple(doc.get("d_thresh", [run.d_thresh])),
        delta_thresh=tuple(doc.get("delta_thresh", [run.delta_thresh])),
        sort_mode=tuple(doc.get("sort_mode", [run.sort_mode.value])),
        methods=tuple(doc.get("methods", [])),
    )


def sweep_rows(scans, spec: SweepSpec, settings: Settings, base: Path = Path(".")) -> List[List[str]]:
    from .pipeline import EvalResult, subset

    chosen = subset(scans, settings.run)
    rows = []
    for name in spec.methods:
        label, scorer = resolve_scorer(name, settings, base)
        scores = [scan_scores(scorer, s) for s in chosen]
        for delta, d, sort in spec.cells():
            run = replace(settings.run, delta_thresh=delta, d_thresh=d, sort_mode=sort)
            reports = [match_scan(s, run, sc) for s, sc in zip(chosen, scores)]
            result = EvalResult(evaluate(pooled_samples(reports)), hit_rates(reports), tuple(reports))
            rows.append(result_row(run, label, result))
    return rows


def cmd_sweep(args, settings: Settings) -> int:
    spec = load_sweep_spec(args.grid)
    manifest = load_manifest(args.manifest)
    rows = sweep_rows(load_scans(manifest), spec, settings, Path(args.grid).parent)
    path = write_csv(rows, Path(args.out))
    print(path)
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for p in args.csv:
        rows.extend(read_csv_rows(p))
    text = markdown_table(rows)
    Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ood3d", description="OOD evaluation toolkit for 3D object detection")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, manifest=True, config=True):
        if manifest:
            sp.add_argument("--manifest", required=manifest == "required", help="dataset manifest JSON")
        if config:
            sp.add_argument("--config", help="key = value run configuration")
        sp.add_argument("--seed", type=int, help="override every rng_seed")
        sp.add_argument("--out", required=True, help="output path")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--config", help="world config JSON ({'world': {...}, 'emulation': {...}})")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("score", help="annotate detections with a single-stage OOD score")
    common(sp, "required")
    sp.add_argument("--scorer", help="scorer method name (overrides scorer.method)")

    sp = sub.add_parser("forge", help="generate pseudo-unknown training data")
    common(sp, "required")
    sp.add_argument("--forge-method")
    sp.add_argument("--k", type=int, help="Top-K pseudo-unknowns per scan")
    sp.add_argument("--meshes", help="directory of .off meshes for injection")
    sp.add_argument("--embeddings", choices=["probe", STORED], default="probe")

    sp = sub.add_parser("train-head", help="train the two-stage MLP head")
    common(sp)
    sp.add_argument("--inputs", help="train from a JSON-lines record file instead of a dataset")
    sp.add_argument("--forge-method")
    sp.add_argument("--k", type=int)
    sp.add_argument("--meshes")
    sp.add_argument("--embeddings", choices=["probe", STORED], default="probe")

    for verb, helptext in (("eval", "match, score and report metrics"), ("sweep", "threshold grid sweep")):
        sp = sub.add_parser(verb, help=helptext)
        common(sp, "required")
        sp.add_argument("--subset", choices=["all", "open"])
        if verb == "eval":
            sp.add_argument("--scorer", help=f"method name or '{STORED}'")
            sp.add_argument("--model", help="trained head JSON")
        else:
            sp.add_argument("--grid", required=True, help="sweep spec JSON")

    sp = sub.add_parser("report", help="merge report CSVs into a markdown table")
    sp.add_argument("--out", required=True)
    sp.add_argument("csv", nargs="+")
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "synth":
            return cmd_synth(args)
        if args.verb == "report":
            return cmd_report(args)
        settings = load_settings(args)
        if getattr(args, "scorer", None) and args.verb == "score":
            settings = replace(settings, scorer=replace(settings.scorer, method=args.scorer))
        return {
            "score": cmd_score,
            "forge": cmd_forge,
            "train-head": cmd_train_head,
            "eval": cmd_eval,
            "sweep": cmd_sweep,
        }[args.verb](args, settings)
    except (ConfigError, ConfigFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (OodError, ValueError, RuntimeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
