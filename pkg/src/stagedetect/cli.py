"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 data error, 4 model-format error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .agent import Policy, fixture_stream, read_stream, replay, write_stream
from .bundle import ModelBundle
from .config import RunConfig
from .dataset import (
    Dataset,
    DatasetSchema,
    LabeledSample,
    SyntheticConfig,
    generate_synthetic,
    load_jsonl,
    stratified_kfold,
    write_jsonl,
)
from .errors import ConfigError, DataError, StageDetectError
from .features import validate_vocabulary
from .metrics import compute_metrics, confusion, detection_latency, evaluate_folds
from .stage3_fusion import run_pipeline
from .training import bundle_trainer, train_bundle

log = logging.getLogger("stagedetect")

MANIFEST_VERSION = "stagedetect-data/1"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def load_config(path, seed: int | None = None) -> RunConfig:
    cfg = RunConfig.load(path) if path else RunConfig()
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def synthetic_config(cfg: RunConfig) -> SyntheticConfig:
    s = cfg.synthetic
    return SyntheticConfig(s.n_benign, s.n_malicious, cfg.dims.n, s.separation, s.min_len,
                           s.max_len, s.marker_rate, s.token_shift, s.with_traces, cfg.seed)


def load_vocabulary(path) -> dict[str, int]:
    try:
        vocab = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read vocabulary {path}: {exc}") from None
    if not isinstance(vocab, dict):
        raise DataError("vocabulary must be a JSON object mapping name -> id")
    vocab = {str(k): int(v) for k, v in vocab.items()}
    validate_vocabulary(vocab)
    return vocab


def _vocab_from_samples(path) -> dict[str, int]:
    names = set()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                for ev in json.loads(line).get("trace") or []:
                    names.add(str(ev.get("name")))
    return {name: i + 1 for i, name in enumerate(sorted(names))}


def load_dataset(cfg: RunConfig, data_path) -> Dataset:
    data_path = Path(data_path or cfg.paths.dataset or Path(cfg.paths.out_dir) / "dataset.jsonl")
    if not data_path.exists():
        raise DataError(f"dataset {data_path} not found")
    vocab_path = cfg.dims.vocabulary_path or data_path.with_name("vocabulary.json")
    if Path(vocab_path).exists():
        vocab = load_vocabulary(vocab_path)
    else:
        vocab = _vocab_from_samples(data_path)
        log.info("no vocabulary file; derived %d tokens from the dataset", len(vocab))
    schema = DatasetSchema(cfg.dims.n, vocab, tuple(cfg.dims.attr_keys))
    return load_jsonl(data_path, schema)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate_data(cfg: RunConfig, out: Path) -> dict:
    if cfg.dims.layout != "gaussian":
        raise ConfigError("generate-data draws gaussian static features; set dims.layout to 'gaussian'")
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_synthetic(synthetic_config(cfg))
    files = {
        "dataset.jsonl": out / "dataset.jsonl",
        "traces.jsonl": out / "traces.jsonl",
        "vocabulary.json": out / "vocabulary.json",
        "stream_benign.jsonl": out / "stream_benign.jsonl",
        "stream_malicious.jsonl": out / "stream_malicious.jsonl",
        "config.json": out / "config.json",
    }
    write_jsonl(ds, files["dataset.jsonl"])
    files["traces.jsonl"].write_text("".join(
        json.dumps({"id": s.id, "events": [e.to_json() for e in s.trace or ()]}, sort_keys=True) + "\n"
        for s in ds.samples), encoding="utf-8")
    _dump(dict(ds.schema.vocabulary), files["vocabulary.json"])
    sep = cfg.synthetic.separation
    write_stream(fixture_stream("benign", cfg.dims.n, sep, cfg.seed), files["stream_benign.jsonl"])
    write_stream(fixture_stream("malicious", cfg.dims.n, sep, cfg.seed), files["stream_malicious.jsonl"])
    files["config.json"].write_text(cfg.to_json() + "\n", encoding="utf-8")
    manifest = {
        "format_version": MANIFEST_VERSION,
        "seed": cfg.seed,
        "n_samples": len(ds),
        "n_malicious": int(ds.labels.sum()),
        "files": {name: _sha256(p) for name, p in files.items()},
    }
    _dump(manifest, out / "manifest.json")
    return manifest


def cmd_train(cfg: RunConfig, data_path, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg, data_path)
    if all(s.trace is None for s in ds.samples):
        log.warning("dataset has no behavior traces; stage 2 uses the neutral score 0.5 throughout")
    plan = stratified_kfold(ds, cfg.k_folds, cfg.seed)
    evaluation = evaluate_folds(bundle_trainer(cfg), plan, ds, cfg.seed)
    bundle = train_bundle(ds, cfg, cfg.seed)
    metrics = evaluation.to_json(include_latency=False)
    _dump(metrics, out / "metrics.json")
    _dump(evaluation.timing_json(), out / "timing.json")
    bundle.save(out / "bundle.json")
    return metrics


def cmd_evaluate(bundle: ModelBundle, ds: Dataset) -> dict:
    timings: dict = {}
    preds = []
    start = time.perf_counter()
    for s in ds.samples:
        preds.append(run_pipeline(bundle, s, timings).decision)
    total_ms = (time.perf_counter() - start) * 1000.0
    n = len(ds)
    report = compute_metrics(confusion(ds.labels, np.array(preds)), detection_latency(total_ms, n))
    out = report.to_json()
    out["latency_ms_model_only"] = detection_latency(timings.get("model_ms", 0.0), n)
    return out


def _read_samples(path, n: int) -> list[LabeledSample]:
    text = Path(path).read_text(encoding="utf-8").strip()
    if not text:
        raise DataError(f"{path} is empty")
    try:
        objs = [json.loads(text)]
    except json.JSONDecodeError:
        try:
            objs = [json.loads(line) for line in text.splitlines() if line.strip()]
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
    samples = []
    for i, obj in enumerate(objs, start=1):
        if isinstance(obj, dict) and "label" not in obj:
            obj = {**obj, "label": 0}
        try:
            samples.append(LabeledSample.from_json(obj, n))
        except DataError as exc:
            raise type(exc)(f"sample {i}: {exc}") from None
    return samples


def cmd_score(bundle: ModelBundle, sample_path) -> list[dict]:
    return [run_pipeline(bundle, s).to_json() for s in _read_samples(sample_path, bundle.n)]


def cmd_agent_run(bundle: ModelBundle, stream_path, policy: Policy, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    result = replay(read_stream(stream_path), bundle, policy)
    (out / "alerts.jsonl").write_text(result.alerts_jsonl(), encoding="utf-8")
    (out / "system_map.json").write_text(
        json.dumps(result.system_map, sort_keys=True) + "\n", encoding="utf-8")
    summary = result.summary()
    _dump(summary, out / "summary.json")
    return summary


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stagedetect", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, bundle=False, out=True):
        p.add_argument("--config", help="JSON file mirroring RunConfig")
        p.add_argument("--seed", type=int, help="overrides config.seed")
        if out:
            p.add_argument("--out", help="output directory (default: config paths.out_dir)")
        if bundle:
            p.add_argument("--bundle", required=True, help="model bundle JSON")

    p = sub.add_parser("generate-data", help="write a synthetic dataset, fixtures and manifest")
    common(p)
    p = sub.add_parser("train", help="k-fold evaluation plus a bundle trained on all data")
    common(p)
    p.add_argument("--data", help="dataset JSONL (default: <out>/dataset.jsonl)")
    p = sub.add_parser("evaluate", help="score a labeled dataset with a bundle")
    common(p, bundle=True)
    p.add_argument("--data", required=True, help="dataset JSONL")
    p = sub.add_parser("score", help="print a risk verdict per sample")
    common(p, bundle=True, out=False)
    p.add_argument("--input", required=True, help="sample JSON object or JSONL file")
    p = sub.add_parser("agent-run", help="replay an event stream through the monitor")
    common(p, bundle=True)
    p.add_argument("--stream", required=True, help="event stream JSONL")
    return parser


def _run(args) -> int:
    out = Path(args.out) if getattr(args, "out", None) else None
    if args.command == "generate-data":
        cfg = load_config(args.config, args.seed)
        manifest = cmd_generate_data(cfg, out or Path(cfg.paths.out_dir))
        print(json.dumps(manifest, sort_keys=True, indent=2))
        return 0
    if args.command == "train":
        cfg = load_config(args.config, args.seed)
        out = out or Path(cfg.paths.out_dir)
        metrics = cmd_train(cfg, args.data or cfg.paths.dataset or out / "dataset.jsonl", out)
        print(json.dumps(metrics["pooled"], sort_keys=True, indent=2))
        return 0

    bundle = ModelBundle.load(args.bundle)
    if args.config or args.seed is not None:
        cfg = load_config(args.config, args.seed)
    else:
        cfg = bundle.config
    if args.command == "evaluate":
        ds = load_dataset(cfg, args.data)
        report = cmd_evaluate(bundle, ds)
        if out:
            out.mkdir(parents=True, exist_ok=True)
            _dump(report, out / "evaluation.json")
        print(json.dumps(report, sort_keys=True, indent=2))
    elif args.command == "score":
        for verdict in cmd_score(bundle, args.input):
            print(json.dumps(verdict, sort_keys=True))
    elif args.command == "agent-run":
        summary = cmd_agent_run(bundle, args.stream, Policy.from_config(cfg),
                                out or Path(cfg.paths.out_dir) / "agent")
        print(json.dumps(summary, sort_keys=True, indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except StageDetectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
