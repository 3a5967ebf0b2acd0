"""Command-line entry point: gen, train, merge, assign, eval."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import evaluator as ev
from .baseline import COSINE, EUCLIDEAN, VqCodebook, rq_assign_batch, train_stream
from .batcher import TagBatcher
from .core import UNASSIGNED, AssignmentIndex, IndexConfig, audit_codebook
from .hierarchy import build_hierarchy
from .indexer import DynamicIndexer, match_scores
from .stream_io import (
    CodebookArtifact,
    SyntheticStreamSpec,
    iter_synthetic,
    load_artifact,
    load_stream,
    load_truth,
    save_artifact,
    write_stream,
    write_truth,
)

log = logging.getLogger("merge_index")


class CommandError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(command: str, config: dict, inputs: dict, outputs: dict, seed=None, **extra) -> dict:
    # basenames only, so reruns in another directory produce identical bytes
    return {
        "tool": "merge-index",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "inputs": {k: {"name": Path(p).name, "sha256": sha256_file(p)} for k, p in inputs.items()},
        "outputs": {k: Path(p).name for k, p in outputs.items()},
        **extra,
    }


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------------------ gen


def cmd_gen(args) -> int:
    spec = SyntheticStreamSpec(
        n_items=args.items,
        n_true_clusters=args.clusters,
        d=args.dim,
        tag_count=args.tags,
        concentration=args.concentration,
        zipf_exponent=args.zipf,
        drift_rate=args.drift,
        seed=args.seed,
        drift_interval=args.drift_interval,
    )
    try:
        spec.validate()
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out)
    truth_path = Path(args.truth) if args.truth else out.with_name(out.name + ".truth")
    truth = []

    def records():
        for item, cluster in iter_synthetic(spec):
            truth.append((item.item_id, cluster))
            yield item

    n = write_stream(out, records())
    write_truth(truth_path, truth)
    print(f"wrote {n} items to {out} (truth: {truth_path})")
    return 0


# ---------------------------------------------------------------------- train


def _config_from_args(args, base: Optional[dict] = None) -> IndexConfig:
    values = dict(base or {})
    for name in ("tau", "gamma", "tau_prime", "m", "eps1", "eps2", "M", "lam", "r", "batch_size", "d"):
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return IndexConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"invalid config: {exc}") from None


def cmd_train(args) -> int:
    stream_path = Path(args.stream)
    if not stream_path.exists():
        raise CommandError(f"stream not found: {stream_path}")
    cfg = _config_from_args(args)
    out = Path(args.out)
    step_log_path = Path(args.step_log) if args.step_log else out.with_name(out.name + ".steps.jsonl")
    records = load_stream(stream_path, cfg.d)

    with open(step_log_path, "w", encoding="utf-8", newline="\n") as step_log:
        if args.algo == "merge":
            indexer = DynamicIndexer(
                cfg, batcher=TagBatcher(cfg.batch_size, args.recycle_capacity), step_log=step_log
            )
            audit_failures = 0

            def audit(_rep):
                nonlocal audit_failures
                if args.audit_every_step:
                    audit_failures += len(audit_codebook(indexer.fine))

            indexer.train(records, on_step=audit)
            audit_failures += len(audit_codebook(indexer.fine))
            if audit_failures or not indexer.index.check_consistency():
                raise CommandError(f"internal audit failed ({audit_failures} codeword identity violations)")
            art = CodebookArtifact(kind="merge", d=cfg.d, fine=indexer.fine, index=indexer.index)
            n_slots = indexer.fine.n_active
            extra = {"unindexed": indexer.unindexed, "evicted": indexer.batcher.evicted}
        else:
            n_layers = 1 if args.algo == "vq" else args.layers
            layers = [VqCodebook(args.K, cfg.d, args.metric, cfg.gamma) for _ in range(n_layers)]
            index = AssignmentIndex()

            def log_step(step, batch):
                step_log.write(json.dumps({"step": step, "batch": len(batch)}) + "\n")

            train_stream(records, layers, cfg.batch_size, index, on_step=log_step)
            art = CodebookArtifact(kind=args.algo, d=cfg.d, layers=layers, index=index)
            n_slots = layers[0].K
            extra = {"K": args.K, "layers": n_layers, "metric": args.metric}

    art.config = cfg.to_dict()
    art.manifest = _manifest(
        "train",
        cfg.to_dict(),
        {"stream": stream_path},
        {"codebook": out, "step_log": step_log_path},
        seed=args.seed,
        algo=args.algo,
        **extra,
    )
    save_artifact(art, out)
    _write_json(out.with_name(out.name + ".manifest.json"), art.manifest)
    print(f"{args.algo}: {n_slots} {'Active slots' if args.algo == 'merge' else 'codewords'} -> {out}")
    return 0


# ---------------------------------------------------------------------- merge


def cmd_merge(args) -> int:
    art = load_artifact(args.codebook)
    if art.kind != "merge" or art.fine is None:
        raise CommandError(f"{args.codebook} is a {art.kind} codebook; merge needs a fine codebook")
    cfg = _config_from_args(args, art.config)
    n_active = art.fine.n_active
    if not 1 <= args.target <= n_active:
        raise CommandError(f"--target must lie in [1, {n_active}] (Active fine slots), got {args.target}")
    art.coarse = build_hierarchy(art.fine, cfg, args.target, args.max_rounds)
    if art.index is not None:
        art.index.coarse = art.coarse
    manifest = dict(art.manifest or {})
    manifest["merge"] = {"target": args.target, "max_rounds": args.max_rounds, "lam": cfg.lam, "r": cfg.r}
    art.manifest = manifest
    out = Path(args.out or args.codebook)
    save_artifact(art, out)
    print(f"coarse codebook: {len(art.coarse)} prototypes over {n_active} fine slots -> {out}")
    return 0


# --------------------------------------------------------------------- assign


def cmd_assign(args) -> int:
    art = load_artifact(args.codebook)
    items = list(load_stream(args.embeddings))
    if items and items[0].embedding.size != art.d:
        raise CommandError(f"embedding dimension {items[0].embedding.size} does not match codebook d={art.d}")
    emb = np.stack([it.embedding for it in items]) if items else np.zeros((0, art.d))
    ids = [it.item_id for it in items]
    out = Path(args.out)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        if art.kind == "merge":
            tau = art.config.get("tau", IndexConfig().tau) if args.tau is None else args.tau
            best, score = match_scores(emb, art.fine)
            fh.write("item_id,coarse_code,fine_code,score\n")
            for i, k, s in zip(ids, best, score):
                if k < 0 or s < tau:
                    coarse, fine = UNASSIGNED, UNASSIGNED
                else:
                    fine = int(k)
                    coarse = art.coarse.coarse_of(fine) if art.coarse is not None else UNASSIGNED
                fh.write(f"{i},{coarse},{fine},{float(s)!r}\n")
        else:
            codes, _ = rq_assign_batch(emb, art.layers)
            fh.write("item_id," + ",".join(f"code_{l + 1}" for l in range(len(art.layers))) + "\n")
            for i, row in zip(ids, codes):
                fh.write(f"{i}," + ",".join(str(int(c)) for c in row) + "\n")
    print(f"assigned {len(ids)} items -> {out}")
    return 0


# ----------------------------------------------------------------------- eval


def _snapshot(art: CodebookArtifact) -> ev.Snapshot:
    if art.kind == "merge":
        n = len(art.fine)
        return ev.Snapshot(art.fine.codewords[:n].copy(), art.fine.active[:n].copy())
    cb = art.layers[0]
    active = np.zeros(cb.K, dtype=bool)
    active[: cb.filled] = True
    return ev.Snapshot(cb.codewords.copy(), active)


def _sample(art: CodebookArtifact, stream, truth: Optional[dict], size: int, seed: int) -> ev.EvalSample:
    if art.index is None:
        raise CommandError("codebook carries no assignment index")
    fwd = art.index.forward
    ids, embs, codes, pops, tr = [], [], [], [], []
    for item in load_stream(stream, art.d):
        k = fwd.get(item.item_id)
        if k is None:
            continue
        ids.append(item.item_id)
        embs.append(item.embedding)
        codes.append(k)
        pops.append(item.popularity)
        if truth is not None:
            if item.item_id not in truth:
                raise CommandError(f"truth sidecar has no entry for item {item.item_id}")
            tr.append(truth[item.item_id])
    if not ids:
        raise CommandError("no stream item has an assignment in this codebook")
    sample = ev.EvalSample(
        np.array(ids, dtype=np.int64),
        np.stack(embs),
        np.array(codes, dtype=np.int64),
        np.array(pops, dtype=np.int64),
        np.array(tr, dtype=np.int64) if truth is not None else None,
    )
    if size < len(sample):
        pick = np.sort(np.random.default_rng(seed).choice(len(sample), size=size, replace=False))
        sample = sample.subset(pick)
    return sample


def _clean(obj):
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_clean(v) for v in obj]
    return obj


def write_report(report: ev.MetricReport, out_dir: Path, extra: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, hist in (("i2c", report.i2c), ("c2c", report.c2c)):
        if hist is None:
            continue
        with open(out_dir / f"{name}_hist.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("bin_left,bin_right,count\n")
            for lo, hi, c in hist.rows():
                fh.write(f"{lo!r},{hi!r},{c}\n")
    u = report.uniformity
    if u is not None:
        with open(out_dir / "cluster_sizes.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("slot,size\n")
            for k, s in zip(u.slot_ids, u.sizes):
                fh.write(f"{int(k)},{int(s)}\n")
        for curve in u.curves:
            hi = "inf" if math.isinf(curve.high) else f"{curve.high:g}"
            with open(out_dir / f"bucket_{curve.low:g}_{hi}.csv", "w", encoding="utf-8", newline="\n") as fh:
                fh.write("x,y\n")
                for x, y in zip(curve.x, curve.y):
                    fh.write(f"{int(x)},{float(y)!r}\n")
    summary = _clean({**extra, **report.summary()})
    _write_json(out_dir / "summary.json", summary)
    lines = [f"{k}: {v}" for k, v in summary.items() if not isinstance(v, (dict, list))]
    (out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return summary


def _evaluate(path, args, truth) -> tuple[ev.MetricReport, CodebookArtifact]:
    art = load_artifact(path)
    snap = _snapshot(art)
    sample = _sample(art, args.stream, truth, args.sample_size, args.seed)
    trials = args.stability_trials
    report = ev.evaluate(sample, snap, args.stability_eps if trials > 0 else None, trials, args.seed)
    return report, art


COMPARED = ("i2c_mean", "i2c_median", "c2c_mean", "c2c_median", "max_size", "median_size", "max_median_ratio", "gini", "n_active")


def cmd_eval(args) -> int:
    truth = load_truth(args.truth) if args.truth else None
    out_dir = Path(args.out_dir)
    report, art = _evaluate(args.codebook, args, truth)
    ref = {"codebook": {"name": Path(args.codebook).name, "sha256": sha256_file(args.codebook)}, "kind": art.kind}
    summary = write_report(report, out_dir, ref)
    if args.compare:
        report2, art2 = _evaluate(args.compare, args, truth)
        if art2.d != art.d:
            raise CommandError(f"incompatible dimensions: {art.d} vs {art2.d}")
        ref2 = {"codebook": {"name": Path(args.compare).name, "sha256": sha256_file(args.compare)}, "kind": art2.kind}
        summary2 = write_report(report2, out_dir / "compare", ref2)
        deltas = {}
        for key in COMPARED:
            a, b = summary.get(key), summary2.get(key)
            deltas[key] = None if a is None or b is None else a - b
        low = "0-1000"
        a = summary.get("bucket_clusters", {}).get(low)
        b = summary2.get("bucket_clusters", {}).get(low)
        deltas["low_bucket_clusters"] = None if a is None or b is None else a - b
        _write_json(out_dir / "compare.json", {"primary": ref, "other": ref2, "deltas": deltas})
    manifest = _manifest(
        "eval",
        {"sample_size": args.sample_size, "stability_eps": args.stability_eps, "stability_trials": args.stability_trials},
        {"codebook": args.codebook, "stream": args.stream, **({"compare": args.compare} if args.compare else {})},
        {"summary": out_dir / "summary.json"},
        seed=args.seed,
    )
    _write_json(out_dir / "manifest.json", manifest)
    c2c = "n/a" if summary["c2c_mean"] is None else f"{summary['c2c_mean']:.4f}"
    print(f"I2C mean {summary['i2c_mean']:.4f}  C2C mean {c2c}  Active {summary['n_active']}  -> {out_dir}")
    if report.stability is not None and report.stability.violations:
        raise CommandError(f"stability check found {report.stability.violations} violations")
    return 0


# ----------------------------------------------------------------------- main


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _add_config_flags(p: argparse.ArgumentParser, with_batch: bool = True) -> None:
    g = p.add_argument_group("index config (defaults: built-in values)")
    g.add_argument("--tau", type=float)
    g.add_argument("--gamma", type=float)
    g.add_argument("--tau-prime", dest="tau_prime", type=float)
    g.add_argument("--m", type=int)
    g.add_argument("--eps1", type=float)
    g.add_argument("--eps2", type=float)
    g.add_argument("--M", type=int)
    g.add_argument("--lambda", "--lam", dest="lam", type=float)
    g.add_argument("--r", type=float)
    if with_batch:
        g.add_argument("--batch-size", dest="batch_size", type=int)
        g.add_argument("--d", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="merge-index", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic item stream")
    p.add_argument("--items", type=_positive_int, required=True)
    p.add_argument("--clusters", type=_positive_int, required=True)
    p.add_argument("--dim", type=_positive_int, default=64)
    p.add_argument("--tags", type=_positive_int, default=100)
    p.add_argument("--concentration", type=float, default=1000.0)
    p.add_argument("--zipf", type=float, default=1.0)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--drift-interval", type=_positive_int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="truth sidecar path (default: <out>.truth)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train MERGE or a VQ/RQ baseline on a stream")
    p.add_argument("stream")
    p.add_argument("--algo", choices=("merge", "vq", "rq"), default="merge")
    p.add_argument("--out", required=True)
    p.add_argument("--step-log")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--K", type=_positive_int, default=500, help="baseline codebook size")
    p.add_argument("--layers", type=_positive_int, default=2, help="RQ depth")
    p.add_argument("--metric", choices=(COSINE, EUCLIDEAN), default=COSINE)
    p.add_argument("--recycle-capacity", type=int)
    p.add_argument("--audit-every-step", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="build the coarse codebook over a trained fine codebook")
    p.add_argument("codebook")
    p.add_argument("--target", type=_positive_int, required=True)
    p.add_argument("--max-rounds", type=_positive_int, default=10)
    p.add_argument("--out")
    _add_config_flags(p, with_batch=False)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("assign", help="assign codes to embeddings")
    p.add_argument("codebook")
    p.add_argument("embeddings", help="stream-format file")
    p.add_argument("--out", required=True)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_assign)

    p = sub.add_parser("eval", help="compute offline diagnostics")
    p.add_argument("codebook")
    p.add_argument("--stream", required=True)
    p.add_argument("--truth")
    p.add_argument("--sample-size", type=_positive_int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--stability-eps", type=float, default=0.05)
    p.add_argument("--stability-trials", type=int, default=10_000)
    p.add_argument("--compare")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CommandError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
