"""Command-line front end: synth, train, eval, explain, project, select-metadata.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure. Errors print one
line ``error: <kind>: <reason>`` on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data as D
from .explain import class_average_metadata_relevancy, explain_samples, render_saliency
from .metrics import METRICS
from .model import ModelConfig, VitAttParams, load_checkpoint, save_checkpoint
from .project import collect_embeddings, separation_score, tsne_3d, write_coordinates
from .tensor import NumericError
from .train import TrainConfig, evaluate, train

log = logging.getLogger("vitatt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ run config

_DERIVED = {"num_metadata_slots", "metadata_width", "num_classes", "image_only"}


@dataclass
class RunConfig:
    data: dict
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    split: dict = field(default_factory=lambda: {"ratios": [0.5, 0.15, 0.35], "seed": 0})
    metadata_subset: str = "all"
    image_only: bool = False
    seed: int = 0
    output_dir: str = "runs/vitatt"

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"unknown run-config keys {sorted(unknown)}")
        if "data" not in d:
            raise UsageError("run config needs a 'data' entry")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if isinstance(self.data, str):
            self.data = {"dir": self.data}
        if not ("dir" in self.data or {"csv", "images", "schema"} <= set(self.data)):
            raise UsageError("data must be a directory or {csv, images, schema}")
        bad = set(self.model) & _DERIVED - {"image_only"}
        if bad:
            raise UsageError(f"model keys {sorted(bad)} are derived from the dataset")
        model_keys = {f.name for f in fields(ModelConfig)}
        if set(self.model) - model_keys:
            raise UsageError(f"unknown model keys {sorted(set(self.model) - model_keys)}")
        try:
            TrainConfig(**self.train)
        except TypeError as e:
            raise UsageError(f"bad train config: {e}") from None
        try:
            D.parse_subset(self.metadata_subset)
        except ValueError as e:
            raise UsageError(str(e)) from None
        ratios = self.split.get("ratios", [0.5, 0.15, 0.35])
        if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9:
            raise UsageError("split ratios must be three numbers summing to 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _load_data(data: dict, image_size: int) -> D.Dataset:
    if "dir" in data:
        return D.load_dataset_dir(data["dir"], image_size)
    return D.load_dataset(
        data["csv"], data["images"], D.MetadataSchema.load(data["schema"]), image_size,
        id_column=data.get("id_column", "id"), label_column=data.get("label_column", "diagnostic"),
    )


def _split(ds: D.Dataset, split: dict):
    return D.stratified_split(ds.samples, split.get("ratios", [0.5, 0.15, 0.35]), split.get("seed", 0))


def _subset_schema(ds: D.Dataset, train_samples, subset: str) -> D.MetadataSchema:
    sel = D.parse_subset(subset)
    if sel is None:
        return ds.schema
    mode, k = sel
    report = D.correlation_ranking(train_samples, ds.schema)
    return ds.schema.subset(D.select_metadata(report, mode, k))


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def run_training(run: RunConfig, out_dir: Path, seed: int) -> dict:
    """One training run; writes checkpoint.json, history.csv, run_config.json."""
    image_size = run.model.get("image_size", ModelConfig.image_size)
    ds = _load_data(run.data, image_size)
    tr, va, te = _split(ds, run.split)
    schema = _subset_schema(ds, tr, run.metadata_subset)
    mcfg = ModelConfig(
        **run.model,
        num_metadata_slots=schema.num_slots,
        metadata_width=schema.slot_width,
        num_classes=len(ds.class_names),
        image_only=run.image_only,
    )
    tcfg = TrainConfig(**{**run.train, "seed": seed})
    rng = np.random.default_rng(seed)
    params = VitAttParams.init(mcfg, rng)
    result = train(params, tr, va, schema, tcfg, rng=rng)
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {**run.to_dict(), "seed": seed, "output_dir": str(out_dir)}
    extra = {
        "run": resolved,
        "schema": schema.to_dict(),
        "class_names": ds.class_names,
        "split": {"train": [s.id for s in tr], "val": [s.id for s in va], "test": [s.id for s in te]},
        "best_epoch": result.best_epoch,
    }
    save_checkpoint(out_dir / "checkpoint.json", result.best, extra)
    (out_dir / "history.csv").write_text(result.history_csv())
    _write_json(out_dir / "run_config.json", resolved)
    report = evaluate(result.best, te, schema, ds.class_names)
    report.to_csv(out_dir / "metrics_test.csv", model="vitatt-image-only" if run.image_only else "vitatt")
    return {"report": report, "best_epoch": result.best_epoch}


# -------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    try:
        spec_doc = json.loads(Path(args.spec).read_text())
    except FileNotFoundError:
        raise D.DataError(f"spec file not found: {args.spec}") from None
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    try:
        spec = D.SynthSpec.from_dict(spec_doc)
    except (TypeError, ValueError) as e:
        raise UsageError(f"bad synth spec: {e}") from None
    manifest = D.write_synthetic(spec, args.out)
    print(f"wrote {manifest['num_samples']} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        doc = json.loads(Path(args.config).read_text())
    except FileNotFoundError:
        raise D.DataError(f"config file not found: {args.config}") from None
    if args.image_only:
        doc["image_only"] = True
    if args.metadata_subset:
        doc["metadata_subset"] = args.metadata_subset
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.epochs is not None:
        doc.setdefault("train", {})["epochs"] = args.epochs
    if args.data is not None:
        doc["data"] = args.data
    if args.out is not None:
        doc["output_dir"] = args.out
    run = RunConfig.from_dict(doc)
    out = Path(run.output_dir)
    if args.repeats <= 1:
        res = run_training(run, out, run.seed)
        print(f"best epoch {res['best_epoch']}; test macro-ACC {res['report'].macro['ACC']:.4f}")
        return EXIT_OK
    reports = []
    for k in range(args.repeats):
        res = run_training(run, out / f"run_{k}", run.seed + k)
        reports.append(res["report"])
    name = "vitatt-image-only" if run.image_only else "vitatt"
    for k, rep in enumerate(reports):
        rep.to_csv(out / "metrics_runs.csv", model=f"{name}#{k}", append=k > 0)
    mean = _mean_report(reports)
    mean.to_csv(out / "metrics_mean.csv", model=name)
    _write_json(out / "run_config.json", {**run.to_dict(), "repeats": args.repeats})
    print(f"{args.repeats} runs; mean test macro-ACC {mean.macro['ACC']:.4f}")
    return EXIT_OK


def _mean_report(reports):
    first = reports[0]
    per = {m: np.nanmean([r.per_class[m] for r in reports], axis=0) for m in METRICS}
    macro = {m: float(np.nanmean([r.macro[m] for r in reports])) for m in METRICS}
    zero = np.zeros_like(first.tp)
    return type(first)(first.class_names, zero, zero, zero, zero, per, macro)


def _checkpoint_context(args):
    params, extra = load_checkpoint(args.checkpoint)
    run = extra.get("run")
    if run is None:
        raise D.DataError(f"{args.checkpoint}: no run provenance stored")
    data = {"dir": args.data} if getattr(args, "data", None) else run["data"]
    if isinstance(data, str):
        data = {"dir": data}
    ds = _load_data(data, params.config.image_size)
    schema = D.MetadataSchema.from_dict(extra["schema"])
    by_id = {s.id: s for s in ds.samples}
    return params, extra, ds, schema, by_id


def _split_samples(extra, by_id, split: str):
    if split == "all":
        ids = [i for part in ("train", "val", "test") for i in extra["split"][part]]
    else:
        ids = extra["split"][split]
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise D.DataError(f"{len(missing)} {split} samples missing from dataset (e.g. {missing[0]})")
    return [by_id[i] for i in ids]


def cmd_eval(args) -> int:
    params, extra, ds, schema, by_id = _checkpoint_context(args)
    samples = _split_samples(extra, by_id, args.split)
    report = evaluate(params, samples, schema, extra.get("class_names", ds.class_names))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_csv(out, model=args.model_name, append=args.append and out.is_file())
    print(f"{args.split}: macro-ACC {report.macro['ACC']:.4f} macro-AUC {report.macro['AUC']:.4f}")
    return EXIT_OK


def cmd_explain(args) -> int:
    params, extra, ds, schema, by_id = _checkpoint_context(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = extra.get("class_names", ds.class_names)
    if args.class_average:
        samples = _split_samples(extra, by_id, args.split)
        rel = class_average_metadata_relevancy(params, samples, schema, names)
        rel.to_csv(out / "relevancy_class_average.csv")
        rel.annotations_csv(out / "relevancy_annotations.csv")
        for c in rel.empty_classes:
            print(f"warning: class {c} has no samples in split {args.split}", file=sys.stderr)
        print(f"wrote {len(names)}x{schema.num_slots} relevancy matrix")
        return EXIT_OK
    if not args.ids:
        raise UsageError("explain needs --ids or --class-average")
    unknown = [i for i in args.ids if i not in by_id]
    if unknown:
        raise D.DataError(f"unknown sample ids {unknown}")
    samples = [by_id[i] for i in args.ids]
    targets = None
    if args.target == "pred":
        from .train import predict_proba

        images, meta, _ = D.encode_batch(samples, schema)
        targets = predict_proba(params, images, meta).argmax(axis=1)
    maps = explain_samples(params, samples, schema, targets)
    rows = []
    for s, m in zip(samples, maps):
        render_saliency(m, s.image, out / f"saliency_{s.id}_class={m.target_class}.ppm")
        rows.append([s.id, names[m.target_class], *(repr(float(v)) for v in m.metadata_scores)])
    with open(out / "sample_relevancy.csv", "w") as fh:
        fh.write(",".join(["id", "target", *schema.names]) + "\n")
        for r in rows:
            fh.write(",".join(r) + "\n")
    print(f"wrote {len(samples)} saliency maps")
    return EXIT_OK


def cmd_project(args) -> int:
    params, extra, ds, schema, by_id = _checkpoint_context(args)
    samples = _split_samples(extra, by_id, args.split)
    pre, post = collect_embeddings(params, samples, schema)
    n = len(samples)
    perplexity = args.perplexity
    if not perplexity < n / 3:
        perplexity = max((n - 1) / 3.0 - 1.0, 1.0)
        print(f"note: perplexity lowered to {perplexity:.3f} for {n} points", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scores = {"perplexity": perplexity, "iters": args.iters, "seed": args.seed, "n": n}
    sets = []
    for es in (pre, post):
        res = tsne_3d(es, perplexity=perplexity, iters=args.iters, seed=args.seed)
        sets.append((es, res.coords))
        scores[es.stage] = {
            "silhouette": separation_score(res.coords, es.labels),
            "silhouette_raw": separation_score(es.vectors, es.labels),
            "kl_final": float(res.kl[-1]),
        }
    write_coordinates(out / "coordinates.csv", sets)
    _write_json(out / "scores.json", scores)
    print(
        f"silhouette pre {scores['pre_fusion']['silhouette']:.4f} "
        f"post {scores['post_fusion']['silhouette']:.4f}"
    )
    return EXIT_OK


def cmd_select_metadata(args) -> int:
    ds = D.load_dataset_dir(args.data) if args.data else None
    if ds is None:
        raise UsageError("select-metadata needs --data")
    tr, _, _ = D.stratified_split(ds.samples, args.ratios, args.split_seed)
    report = D.correlation_ranking(tr, ds.schema)
    if args.out:
        report.to_csv(args.out)
    for name in D.select_metadata(report, args.mode, args.k):
        print(name)
    return EXIT_OK


# ---------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vitatt", description="Image + metadata fusion transformer pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--spec", required=True, help="synthetic spec JSON")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("--config", required=True, help="run config JSON")
    s.add_argument("--out", help="output directory (overrides config)")
    s.add_argument("--data", help="dataset directory (overrides config)")
    s.add_argument("--image-only", action="store_true", help="skip metadata and fusion")
    s.add_argument("--metadata-subset", help="all, HC-k or LC-k")
    s.add_argument("--repeats", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics table for a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--out", default="metrics.csv")
    s.add_argument("--data")
    s.add_argument("--model-name", default="vitatt")
    s.add_argument("--append", action="store_true", help="add rows to an existing metrics CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("explain", help="saliency images and relevancy tables")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--ids", nargs="*")
    s.add_argument("--class-average", action="store_true")
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--target", default="true", choices=["true", "pred"])
    s.add_argument("--out", required=True)
    s.add_argument("--data")
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("project", help="t-SNE of pre/post-fusion class embeddings")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--out", required=True)
    s.add_argument("--perplexity", type=float, default=30.0)
    s.add_argument("--iters", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data")
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("select-metadata", help="rank metadata fields by label correlation")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", default="HC", choices=["HC", "LC", "hc", "lc"])
    s.add_argument("--k", type=int, default=5)
    s.add_argument("--ratios", type=float, nargs=3, default=[0.5, 0.15, 0.35])
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--out", help="write the full ranking as CSV")
    s.set_defaults(func=cmd_select_metadata)
    return p


def _fail(kind: str, code: int, exc: BaseException) -> int:
    reason = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: {kind}: {reason}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        if not getattr(args, "func", None):
            raise UsageError("missing command")
        return args.func(args)
    except UsageError as e:
        return _fail("usage", EXIT_USAGE, e)
    except (D.DataError, OSError, KeyError) as e:
        return _fail("data", EXIT_DATA, e)
    except (NumericError, FloatingPointError) as e:
        return _fail("numeric", EXIT_NUMERIC, e)
    except ValueError as e:
        return _fail("usage", EXIT_USAGE, e)


if __name__ == "__main__":
    sys.exit(main())
