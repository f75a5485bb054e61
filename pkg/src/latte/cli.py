"""Pipeline driver: synth -> tokenize -> train -> eval -> analyze -> report.

Every run writes into <out>/<run_id>/ where run_id is a digest of the
subcommand, the resolved config (minus the output root), and the input file
digests, so identical invocations land on identical artifacts. A manifest
records config snapshot, input digests, artifact names, and the tool version;
no artifact embeds a timestamp or an absolute path.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import inspect
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    build_prob_matrix,
    correlation_study,
    kendall_structure_study,
    latent_usage_study,
    reversal_bound_audit,
    sample_pairs_by_distance,
    transitivity_audit,
)
from .beam import save_rankings_csv
from .catalog import (
    build_catalog,
    load_catalog,
    load_features,
    load_interactions,
    save_catalog,
    save_features_jsonl,
    save_interactions_jsonl,
)
from .evaluation import build_examples, eval_history, evaluate, leave_one_out
from .model import (
    ScorerConfig,
    flatten_history,
    init_params,
    load_params,
    save_loss_curve,
    save_params,
    train,
)
from .synth import (
    apply_sibling_overrides,
    build_modality_catalog,
    make_benchmark_world,
    make_intransitive_world,
    make_modality_world,
    make_reversal_pair_world,
)
from .trie import all_position_permutations, build_forest, build_trie

WORLDS = {
    "benchmark": make_benchmark_world,
    "reversal_pair": make_reversal_pair_world,
    "intransitive": make_intransitive_world,
    "modality": make_modality_world,
}

STUDIES = ("correlation", "kendall_structure", "latent_usage", "reversal_bound", "transitivity")


class CliError(Exception):
    """One-line failure with the offending key or path in the message."""


@dataclass
class RunConfig:
    """Flat config; file values overridden by CLI flags (flags win)."""

    # synth
    world: str = "benchmark"
    n_users: int = 0  # 0 = world default
    n_items: int = 0
    # input paths
    features: str = ""
    interactions: str = ""
    world_meta: str = ""
    catalog: str = ""
    params: str = ""
    # tokenizer
    m: int = 3
    M: int = 8
    kmeans_iters: int = 50
    # scorer
    d: int = 32
    hidden: int = 64
    gamma: float = 0.8
    latent_count: int = 0
    bind_permutations: bool = False
    agg: str = "sum"
    # training
    epochs: int = 40
    lr: float = 0.01
    batch_size: int = 64
    patience: int = 10
    # evaluation
    beam_size: int = 50
    ks: str = "5,10"
    mode: str = "test"
    model_tag: str = "model"
    save_rankings: bool = False
    # analysis
    study: str = "all"
    users: int = 200
    pairs_per_stratum: int = 256
    distances: str = "2,4,6"
    tau: float = 0.5
    delta: int = 2
    prob_source: str = "prob"
    # report
    runs: str = ""
    # shared
    seed: int = 0
    out: str = "runs"


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise CliError(f"config key {key!r}: expected a boolean, got {raw!r}")


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise CliError(f"unknown config key {key!r}")
    raw = raw.strip()
    try:
        if kind == "bool":
            return _parse_bool(raw, key)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise CliError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        raw = raw[1:-1]
    return raw


def parse_config_file(path: str | Path) -> dict:
    """key = value lines; blank lines and # comments ignored."""
    out: dict = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CliError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
        key, _, raw = stripped.partition("=")
        out[key.strip()] = _coerce(key.strip(), raw)
    return out


def parse_int_list(raw: str, key: str) -> list[int]:
    try:
        values = [int(tok) for tok in raw.split(",") if tok.strip()]
    except ValueError:
        raise CliError(f"config key {key!r}: expected comma-separated integers, got {raw!r}") from None
    if not values:
        raise CliError(f"config key {key!r} is empty")
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig()
    if args.config:
        if not Path(args.config).is_file():
            raise CliError(f"config file not found: {args.config}")
        for key, value in parse_config_file(args.config).items():
            setattr(config, key, value)
    for field in dataclasses.fields(RunConfig):
        flag = getattr(args, field.name, None)
        if flag is not None:
            setattr(config, field.name, flag)
    return config


# ---------------------------------------------------------------------------
# artifact plumbing

def _digest_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[list]) -> None:
    lines = []
    for row in rows:
        lines.append(",".join(repr(c) if isinstance(c, float) else str(c) for c in row))
    path.write_text("\n".join(lines) + "\n")


INPUT_KEYS = {
    "synth": ([], []),
    "tokenize": (["features"], ["world_meta"]),
    "train": (["catalog", "interactions"], []),
    "eval": (["catalog", "interactions", "params"], []),
    "analyze": (["catalog", "interactions", "params"], []),
    "report": ([], []),  # report validates its run dirs itself
}


def _gather_inputs(subcommand: str, config: RunConfig) -> dict[str, Path]:
    required, optional = INPUT_KEYS[subcommand]
    inputs: dict[str, Path] = {}
    for key in required:
        value = getattr(config, key)
        if not value:
            raise CliError(f"missing required input {key!r} for {subcommand}")
        path = Path(value)
        if not path.is_file():
            raise CliError(f"input {key!r} does not exist: {path}")
        inputs[key] = path
    for key in optional:
        value = getattr(config, key)
        if value:
            path = Path(value)
            if not path.is_file():
                raise CliError(f"input {key!r} does not exist: {path}")
            inputs[key] = path
    return inputs


def _report_input_files(config: RunConfig) -> dict[str, Path]:
    if not config.runs:
        raise CliError("missing required input 'runs' for report (comma-separated run dirs)")
    inputs: dict[str, Path] = {}
    for token in config.runs.split(","):
        run_dir = Path(token.strip())
        if not run_dir.is_dir():
            raise CliError(f"input 'runs' entry does not exist: {run_dir}")
        metrics = run_dir / "metrics.csv"
        if metrics.is_file():
            inputs[f"{run_dir.name}/metrics.csv"] = metrics
        studies_dir = run_dir / "studies"
        if studies_dir.is_dir():
            for f in sorted(studies_dir.iterdir()):
                if f.is_file():
                    inputs[f"{run_dir.name}/studies/{f.name}"] = f
        if not metrics.is_file() and not studies_dir.is_dir():
            raise CliError(f"run dir has neither metrics.csv nor studies/: {run_dir}")
    return inputs


_PATH_FIELDS = ("features", "interactions", "world_meta", "catalog", "params", "runs", "out")


def _config_snapshot(config: RunConfig) -> dict:
    # paths are excluded: artifacts depend on input CONTENT (the digests),
    # never on where inputs or outputs happen to live
    doc = dataclasses.asdict(config)
    for key in _PATH_FIELDS:
        doc.pop(key)
    return doc


def _run_id(subcommand: str, config: RunConfig, digests: dict[str, str]) -> str:
    payload = {
        "subcommand": subcommand,
        "config": _config_snapshot(config),
        "inputs": digests,
        "tool_version": __version__,
    }
    blob = json.dumps(payload, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# subcommands; each returns the list of artifact names it wrote

def cmd_synth(config: RunConfig, run_dir: Path, inputs: dict[str, Path]) -> list[str]:
    maker = WORLDS.get(config.world)
    if maker is None:
        raise CliError(f"unknown world {config.world!r}; valid worlds: {', '.join(sorted(WORLDS))}")
    accepted = inspect.signature(maker).parameters
    kwargs: dict = {"seed": config.seed}
    if config.n_users > 0:
        kwargs["n_users"] = config.n_users
    if config.n_items > 0:
        if "n_items" not in accepted:
            raise CliError(f"world {config.world!r} does not take n_items")
        kwargs["n_items"] = config.n_items
    world = maker(**kwargs)

    save_features_jsonl(world.features, run_dir / "features.jsonl")
    save_interactions_jsonl(world.interactions, run_dir / "interactions.jsonl")
    _write_json(run_dir / "truth.json", world.truth.to_json_dict())
    meta = {
        "world": config.world,
        "seed": config.seed,
        "n_users": world.spec.n_users,
        "n_items": world.spec.n_items,
        "n_groups": world.spec.n_groups,
        "special": world.special,
        "sibling_groups": world.sibling_groups,
        "modality_blocks": world.modality_blocks,
        "recommended": world.recommended,
    }
    _write_json(run_dir / "world.json", meta)
    return ["features.jsonl", "interactions.jsonl", "truth.json", "world.json"]


def cmd_tokenize(config: RunConfig, run_dir: Path, inputs: dict[str, Path]) -> list[str]:
    features = load_features(inputs["features"])
    meta = {}
    if "world_meta" in inputs:
        meta = json.loads(inputs["world_meta"].read_text())
    blocks = meta.get("modality_blocks")
    if blocks:
        blocks = [tuple(b) for b in blocks]
        if config.m != len(blocks):
            raise CliError(f"m={config.m} does not match {len(blocks)} modality blocks")
        catalog = build_modality_catalog(
            features, blocks, config.M, max_iters=config.kmeans_iters, seed=config.seed
        )
    else:
        catalog = build_catalog(
            features, config.m, config.M, max_iters=config.kmeans_iters, seed=config.seed
        )
    siblings = meta.get("sibling_groups") or []
    if siblings:
        catalog = apply_sibling_overrides(catalog, [list(g) for g in siblings])
    save_catalog(catalog, run_dir / "catalog.json")
    return ["catalog.json"]


def _build_struct(config: RunConfig, catalog):
    """The decoding structure training and scoring share: trie or bound forest."""
    if config.bind_permutations:
        if config.latent_count != math.factorial(catalog.m):
            raise CliError(
                f"bind_permutations requires latent_count = m! = {math.factorial(catalog.m)}, "
                f"got latent_count={config.latent_count}"
            )
        return build_forest(catalog, all_position_permutations(catalog.m))
    return build_trie(catalog)


def cmd_train(config: RunConfig, run_dir: Path, inputs: dict[str, Path]) -> list[str]:
    catalog = load_catalog(inputs["catalog"])
    interactions = load_interactions(inputs["interactions"], known_items=set(catalog.sids))
    split = leave_one_out(interactions)
    train_examples, valid_examples = build_examples(catalog, split)
    struct = _build_struct(config, catalog)
    scorer_config = ScorerConfig(
        m=catalog.m,
        M=catalog.M,
        latent_count=config.latent_count,
        d=config.d,
        hidden=config.hidden,
        gamma=config.gamma,
        seed=config.seed,
    )
    params = init_params(scorer_config)
    best, curve = train(
        params,
        train_examples,
        valid_examples,
        struct,
        epochs=config.epochs,
        lr=config.lr,
        batch_size=config.batch_size,
        seed=config.seed,
        patience=config.patience,
        agg=config.agg,
    )
    save_params(best, run_dir / "params.json")
    save_loss_curve(curve, run_dir / "loss_curve.csv")
    return ["params.json", "loss_curve.csv"]


def _load_model(config: RunConfig, inputs: dict[str, Path]):
    catalog = load_catalog(inputs["catalog"])
    interactions = load_interactions(inputs["interactions"], known_items=set(catalog.sids))
    params = load_params(inputs["params"])
    if params.config.m != catalog.m or params.config.M != catalog.M:
        raise CliError(
            f"params trained for m={params.config.m}, M={params.config.M} but catalog "
            f"has m={catalog.m}, M={catalog.M}"
        )
    if config.bind_permutations and params.config.latent_count == 0:
        raise CliError("bind_permutations needs a latent model; params have latent_count=0")
    merged = dataclasses.replace(config, latent_count=params.config.latent_count)
    struct = _build_struct(merged, catalog)
    return catalog, interactions, params, struct


def cmd_eval(config: RunConfig, run_dir: Path, inputs: dict[str, Path]) -> list[str]:
    catalog, interactions, params, struct = _load_model(config, inputs)
    split = leave_one_out(interactions)
    ks = parse_int_list(config.ks, "ks")
    report, rankings = evaluate(
        params,
        struct,
        catalog,
        split,
        ks=tuple(ks),
        beam_size=config.beam_size,
        agg=config.agg,
        mode=config.mode,
        model_tag=config.model_tag,
        seed=config.seed,
        collect_rankings=config.save_rankings,
    )
    _write_csv(run_dir / "metrics.csv", report.csv_rows())
    artifacts = ["metrics.csv"]
    if config.save_rankings:
        save_rankings_csv(rankings, run_dir / "rankings.csv")
        artifacts.append("rankings.csv")
    return artifacts


def _sample_histories(config: RunConfig, catalog, split):
    users = split.user_ids
    take = min(config.users, len(users))
    if take < 2:
        raise CliError(f"config key 'users': need at least 2, got {take}")
    rng = np.random.default_rng(config.seed)
    idx = np.sort(rng.choice(len(users), size=take, replace=False))
    return {
        users[i]: flatten_history(catalog, eval_history(split, users[i], mode="test"))
        for i in idx
    }


def cmd_analyze(config: RunConfig, run_dir: Path, inputs: dict[str, Path]) -> list[str]:
    requested = (
        list(STUDIES) if config.study == "all" else [s.strip() for s in config.study.split(",")]
    )
    for name in requested:
        if name not in STUDIES:
            raise CliError(
                f"unknown study {name!r}; valid studies: {', '.join(STUDIES)}"
            )
    catalog, interactions, params, struct = _load_model(config, inputs)
    if params.config.latent_count == 0 and "latent_usage" in requested:
        if config.study == "all":
            requested.remove("latent_usage")
            print("skipping latent_usage (latent_count=0)")
        else:
            raise CliError("study 'latent_usage' needs a latent model; params have latent_count=0")

    split = leave_one_out(interactions)
    histories = _sample_histories(config, catalog, split)
    trie = build_trie(catalog)
    distances = parse_int_list(config.distances, "distances")

    studies_dir = run_dir / "studies"
    studies_dir.mkdir(exist_ok=True)
    pm = None
    pairs = None
    artifacts: list[str] = []
    for name in requested:
        if name != "latent_usage" and pm is None:
            pm = build_prob_matrix(params, struct, histories, agg=config.agg)
        if name in ("correlation", "kendall_structure", "reversal_bound") and pairs is None:
            pairs = sample_pairs_by_distance(
                trie, distances, config.pairs_per_stratum, seed=config.seed
            )
        if name == "correlation":
            report = correlation_study(pm, trie, pairs, config.prob_source, seed=config.seed)
        elif name == "kendall_structure":
            report = kendall_structure_study(pm, trie, pairs, config.prob_source, seed=config.seed)
        elif name == "reversal_bound":
            audit_pairs = [(a, b) for a, b, dist in pairs.pairs if dist > 0]
            if not audit_pairs:
                raise CliError("no item pairs at the requested distances to audit")
            report = reversal_bound_audit(pm, audit_pairs, seed=config.seed)
        elif name == "transitivity":
            report = transitivity_audit(pm, trie, config.tau, config.delta, seed=config.seed)
        else:
            report = latent_usage_study(
                params, struct, histories, agg=config.agg, seed=config.seed
            )
        stem = f"{name}_{config.seed}"
        report.write_csv(studies_dir / f"{stem}.csv")
        report.write_json(studies_dir / f"{stem}.json")
        artifacts += [f"studies/{stem}.csv", f"studies/{stem}.json"]
    return artifacts


def cmd_report(config: RunConfig, run_dir: Path, inputs: dict[str, Path]) -> list[str]:
    artifacts: list[str] = []
    comparison: list[list] = []
    header: list[str] | None = None
    studies_dir = run_dir / "studies"
    for label_path, path in sorted(inputs.items()):
        run_label, _, rel = label_path.partition("/")
        if rel == "metrics.csv":
            rows = [line.split(",") for line in path.read_text().splitlines() if line]
            if header is None:
                header = ["run"] + rows[0]
                comparison.append(header)
            for row in rows[1:]:
                comparison.append([run_label] + row)
        else:
            studies_dir.mkdir(exist_ok=True)
            target = studies_dir / f"{run_label}__{path.name}"
            target.write_bytes(path.read_bytes())
            artifacts.append(f"studies/{run_label}__{path.name}")
    if comparison:
        _write_csv(run_dir / "comparison.csv", comparison)
        artifacts.insert(0, "comparison.csv")
    if not artifacts:
        raise CliError("nothing to report: run dirs held no metrics or studies")
    return artifacts


COMMANDS = {
    "synth": cmd_synth,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "report": cmd_report,
}


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latte", description="Semantic-ID recommendation pipeline"
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key=value config file")
        for field in dataclasses.fields(RunConfig):
            kind = field.type
            if kind == "bool":
                p.add_argument(
                    f"--{field.name}",
                    default=None,
                    type=lambda raw, key=field.name: _parse_bool(raw, key),
                    metavar="BOOL",
                )
            elif kind == "int":
                p.add_argument(f"--{field.name}", default=None, type=int)
            elif kind == "float":
                p.add_argument(f"--{field.name}", default=None, type=float)
            else:
                p.add_argument(f"--{field.name}", default=None)
    return parser


def run(subcommand: str, config: RunConfig) -> Path:
    """Execute one subcommand; returns the run directory."""
    if subcommand == "report":
        inputs = _report_input_files(config)
    else:
        inputs = _gather_inputs(subcommand, config)
    digests = {key: _digest_file(path) for key, path in inputs.items()}
    run_id = _run_id(subcommand, config, digests)
    run_dir = Path(config.out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    for key, value in sorted(dataclasses.asdict(config).items()):
        print(f"{key} = {value}")
    artifacts = COMMANDS[subcommand](config, run_dir, inputs)

    manifest = {
        "run_id": run_id,
        "subcommand": subcommand,
        "config": _config_snapshot(config),
        "inputs": digests,
        "artifacts": artifacts,
        "tool_version": __version__,
    }
    _write_json(run_dir / "manifest.json", manifest)
    print(f"run_dir {run_dir}")
    for name in artifacts:
        print(f"wrote {name}")
    return run_dir


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        run(args.subcommand, config)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
