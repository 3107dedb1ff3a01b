"""Command-line entry point: ``gapkit <command> ...``.

Every command prints (or writes with ``--report``) a JSON run report whose
``config`` block is enough to re-run it: ``gapkit --replay report.json``.
Failures print a JSON error object to stderr and exit with 2 (config),
3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from gapkit import __version__
from gapkit.activation import (
    PeakBoundInput,
    construct_peaked_pair,
    cosine_upper_bound_finite,
    cosine_upper_bound_limit,
    monte_carlo_bound_check,
    profile_activations,
)
from gapkit.bnlayer import BnState, load_bn_states, save_bn_states
from gapkit.embstore import (
    ClassTemplateSet,
    PairedDataset,
    load_class_templates,
    load_embeddings,
    load_judgments,
    load_paired,
    normalize_rows,
    save_embeddings,
)
from gapkit.errors import ConfigError, DataError, GapkitError
from gapkit.evaltasks import (
    HIGHER,
    LOWER,
    ScoreConfig,
    Transform,
    kendall_tau_b,
    load_reference_table,
    pair_scores,
    rank_models,
    retrieval_r1,
    score_distribution,
    score_matrix,
    summarize_scores,
    zero_shot_classify,
)
from gapkit.gapmetrics import LsConfig, centroid_gap, gap_report
from gapkit.trainer import TrainerConfig, train_bn
from gapkit.transforms import (
    MgShiftConfig,
    ModalityStats,
    center,
    clip_activations,
    clip_raw,
    compute_modality_stats,
    i0t_post,
    mg_shift,
    mg_shift_raw,
)

METRIC_DIRECTIONS = {
    "centroid_distance": LOWER,
    "linear_separability": LOWER,
    "min_cosine_distance": LOWER,
    "r_at_1_i2t": HIGHER,
    "r_at_1_t2i": HIGHER,
    "balanced_accuracy": HIGHER,
    "kendall_tau_b": HIGHER,
}


def derive_seed(seed: int, stream: str) -> int:
    """Independent child seed per named stream, stable across releases."""
    ss = np.random.SeedSequence([seed, zlib.crc32(stream.encode())])
    return int(ss.generate_state(1, np.uint32)[0])


def _need_file(path, what):
    if path is not None and not Path(path).is_file():
        raise ConfigError(f"{what} file not found: {path}")


def _paired(args, prefix="") -> PairedDataset:
    images, texts = getattr(args, prefix + "images"), getattr(args, prefix + "texts")
    _need_file(images, "images")
    _need_file(texts, "texts")
    ids = getattr(args, "ids", None) if not prefix else None
    _need_file(ids, "ids")
    return load_paired(images, texts, ids, args.format)


def _ls_cfg(args) -> LsConfig:
    return LsConfig(train_fraction=args.train_fraction, shuffle_seed=derive_seed(args.seed, "gap.ls"))


def _load_stats(path) -> tuple[ModalityStats, ModalityStats]:
    _need_file(path, "stats")
    with open(path) as f:
        obj = json.load(f)
    try:
        return ModalityStats.from_dict(obj["image"]), ModalityStats.from_dict(obj["text"])
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"{path}: malformed stats file ({e})") from e


def cmd_gap(args) -> dict:
    ds = _paired(args)
    return {"gap": gap_report(ds, _ls_cfg(args), args.symmetric_mcd).to_dict(), "n": ds.n, "d": ds.d}


def cmd_transform(args) -> dict:
    ds = _paired(args)
    before = gap_report(ds, _ls_cfg(args), args.symmetric_mcd)
    x, y = normalize_rows(ds.images), normalize_rows(ds.texts)
    extra = {}
    if args.method == "i0t_post":
        if args.stats:
            sx, sy = _load_stats(args.stats)
        else:
            sx, sy = compute_modality_stats(x), compute_modality_stats(y)
        cx, cy = center(x, sx), center(y, sy)
        extra["pre_renorm_max_abs_column_mean"] = float(max(np.abs(cx.mean(0)).max(), np.abs(cy.mean(0)).max()))
        extra["pre_renorm_centroid_distance"] = centroid_gap(cx, cy)
        if args.save_stats:
            with open(args.save_stats, "w") as f:
                json.dump({"image": sx.to_dict(), "text": sy.to_dict()}, f)
        out = PairedDataset(i0t_post(x, sx), i0t_post(y, sy), ds.ids)
    elif args.method == "clip":
        rx, ry = clip_raw(x, args.lo, args.hi), clip_raw(y, args.lo, args.hi)
        extra["pre_renorm_centroid_distance"] = centroid_gap(rx, ry)
        out = PairedDataset(clip_activations(x, args.lo, args.hi), clip_activations(y, args.lo, args.hi), ds.ids)
    else:
        cfg = MgShiftConfig(args.lam)
        src = PairedDataset(x, y, ds.ids)
        rx, ry = mg_shift_raw(src, cfg)
        extra["pre_renorm_centroid_distance"] = centroid_gap(rx, ry)
        extra["expected_pre_renorm_centroid_distance"] = abs(1 - 2 * args.lam) * centroid_gap(x.data, y.data)
        out = mg_shift(src, cfg)
    if args.out_images:
        save_embeddings(out.images, args.out_images, args.out_format, dtype=args.dtype)
    if args.out_texts:
        save_embeddings(out.texts, args.out_texts, args.out_format, dtype=args.dtype)
    after = gap_report(out, _ls_cfg(args), args.symmetric_mcd)
    return {"method": args.method, "before": before.to_dict(), "after": after.to_dict(), **extra}


def cmd_profile(args) -> dict:
    _need_file(args.embeddings, "embeddings")
    m = normalize_rows(load_embeddings(args.embeddings, args.format))
    prof = profile_activations(m, args.peak_factor)
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["dim", "mean", "std", "is_peak"])
            for dim, mu, sd, peak in prof.rows():
                w.writerow([dim, repr(mu), repr(sd), int(peak)])
    return {
        "n": m.n,
        "d": m.d,
        "peak_factor": args.peak_factor,
        "peaks": [{"dim": p.dim, "mean": p.mean, "sign": p.sign} for p in prof.peaks],
        "max_abs_mean": float(np.abs(prof.per_dim_mean).max()),
        "mean_std": float(prof.per_dim_std.mean()),
    }


def cmd_bound(args) -> dict:
    inp = PeakBoundInput(args.p, args.q, args.d)
    res = {
        "p": args.p,
        "q": args.q,
        "d": args.d,
        "finite": cosine_upper_bound_finite(inp),
        "limit": cosine_upper_bound_limit(args.p, args.q),
    }
    if args.verify:
        res["monte_carlo"] = monte_carlo_bound_check(inp, args.verify, derive_seed(args.seed, "bound.mc"))
        x, y = construct_peaked_pair(inp, aligned=True)
        res["aligned_construction_cos"] = float(x @ y)
    return res


LOSS_CHOICES = {"clip": "clip", "cyclip": "cyclip", "mcsie": "mcsie_cyclip", "mcsie_clip": "mcsie_clip"}


def cmd_bnfit(args) -> dict:
    ds = _paired(args)
    aug = None
    if args.aug_images or args.aug_texts:
        if not (args.aug_images and args.aug_texts):
            raise ConfigError("--aug-images and --aug-texts go together")
        aug = _paired(args, "aug_")
    probe = _paired(args, "probe_") if args.probe_images and args.probe_texts else None
    cfg = TrainerConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        max_steps=args.steps,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        shuffle_seed=derive_seed(args.seed, "bnfit.shuffle"),
        loss_kind=LOSS_CHOICES[args.loss],
        forward_stats=args.forward_stats,
        joint_stats=args.joint_stats,
        probe_every=args.probe_every,
    )
    img, txt, trace = train_bn(ds, cfg, aug=aug, probe=probe)
    if args.state_out:
        save_bn_states(args.state_out, img, txt)
    if args.log:
        trace.write_csv(args.log)
    probe_ds = probe or ds
    after = PairedDataset(img.forward(normalize_rows(probe_ds.images)), txt.forward(normalize_rows(probe_ds.texts)))
    return {
        "steps": len(trace.records),
        "initial_probe_cd": trace.initial_probe_cd,
        "final_probe_cd": trace.final_probe_cd,
        "final_loss": trace.records[-1].total if trace.records else None,
        "probe_gap_after": gap_report(after, _ls_cfg(args)).to_dict(),
        "state_digest": _digest(img, txt),
    }


def _digest(*states: BnState) -> str:
    h = 0
    for s in states:
        for arr in (s.stats.mean, s.stats.var, s.params.weight, s.params.bias):
            h = zlib.crc32(np.ascontiguousarray(arr).tobytes(), h)
    return f"{h:08x}"


def _score_cfg(args) -> ScoreConfig:
    base = ScoreConfig.clip_s() if args.score == "clip-s" else ScoreConfig.i0t_s()
    transform = args.transform or base.transform.value
    omega = args.omega if args.omega is not None else base.omega
    clamp = base.clamp_negative if args.clamp is None else args.clamp
    return ScoreConfig(omega, clamp, Transform(transform))


def _transform_inputs(args, x, y):
    """Modality stats / BN states the chosen transform needs."""
    if args.eval_task in ("score", "correlate"):
        transform = _score_cfg(args).transform
    else:
        transform = Transform(args.transform or "none")
    stats = bn = None
    if transform is Transform.I0T_POST:
        stats = _load_stats(args.stats) if args.stats else (compute_modality_stats(x), compute_modality_stats(y))
    elif transform is Transform.BN:
        if not args.bn_state:
            raise ConfigError("--transform bn needs --bn-state")
        _need_file(args.bn_state, "bn state")
        bn = load_bn_states(args.bn_state)
    return transform, stats, bn


def _apply(transform, stats, bn, x, y):
    if transform is Transform.I0T_POST:
        return i0t_post(x, stats[0]), i0t_post(y, stats[1])
    if transform is Transform.BN:
        return bn[0].forward(x), bn[1].forward(y)
    return x, y


def cmd_eval(args) -> dict:
    task = args.eval_task
    if task == "classify":
        _need_file(args.images, "images")
        _need_file(args.templates, "templates")
        x = normalize_rows(load_embeddings(args.images, args.format))
        templates = load_class_templates(args.templates)
        if templates.image_labels is None:
            raise DataError("class template manifest has no image_labels")
        transform, stats, bn = _transform_inputs(args, x, x)
        if transform is not Transform.NONE:
            rows = np.concatenate(templates.class_text_embeddings)
            if stats is None and bn is None:
                raise ConfigError("classification transform needs --stats or --bn-state")
            _, ty = _apply(transform, stats, bn, x, normalize_rows(rows))
            bounds = np.cumsum([0] + [len(e) for e in templates.class_text_embeddings])
            blocks = tuple(ty.data[a:b] for a, b in zip(bounds[:-1], bounds[1:]))
            x, _ = _apply(transform, stats, bn, x, x)
            templates = ClassTemplateSet(templates.class_names, blocks, templates.image_labels)
        acc = zero_shot_classify(x, templates.image_labels, templates, support_weighted=args.support_weighted)
        return {"task": task, "transform": transform.value, "balanced_accuracy": acc,
                "support_weighted": args.support_weighted}

    ds = _paired(args)
    x, y = normalize_rows(ds.images), normalize_rows(ds.texts)
    if task == "retrieve":
        transform, stats, bn = _transform_inputs(args, x, y)
        tx, ty = _apply(transform, stats, bn, x, y)
        return {"task": task, "transform": transform.value, **retrieval_r1(PairedDataset(tx, ty, ds.ids)).to_dict()}

    if task == "correlate":
        _need_file(args.judgments, "judgments")
        _need_file(args.candidates, "candidates")
        cand = normalize_rows(load_embeddings(args.candidates, args.format))
        js = load_judgments(args.judgments, cand)
        js.validate(ds)
        cfg = _score_cfg(args)
        transform, stats, bn = _transform_inputs(args, x, cand)
        row_of = {pid: i for i, pid in enumerate(ds.ids)}
        imgs = x.data[[row_of[r.image_id] for r in js.records]]
        caps = cand.data[[r.candidate for r in js.records]]
        scores = pair_scores(imgs, caps, cfg, stats, bn)
        tau = kendall_tau_b(js.scores, scores)
        if args.dump:
            _dump_scores(args.dump, scores)
        return {"task": task, "score": args.score, "kendall_tau_b": "undefined" if tau is None else tau,
                "n": len(js.records)}

    cfg = _score_cfg(args)
    transform, stats, bn = _transform_inputs(args, x, y)
    summary = score_distribution(PairedDataset(x, y, ds.ids), cfg, stats, bn, bins=args.bins)
    res = {"task": task, "score": args.score, "omega": cfg.omega, "clamp_negative": cfg.clamp_negative,
           "transform": cfg.transform.value, "positive_pairs": summary.to_dict()}
    if args.negatives:
        full = score_matrix(x, y, cfg, stats, bn)
        off = full[~np.eye(ds.n, dtype=bool)]
        res["negative_pairs"] = summarize_scores(off, args.bins).to_dict()
    if args.dump:
        _dump_scores(args.dump, pair_scores(x, y, cfg, stats, bn), ds.ids)
    return res


def _dump_scores(path, scores, ids=None):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "score"])
        for i, s in enumerate(scores):
            w.writerow([ids[i] if ids else i, repr(float(s))])


def _flatten(obj):
    """Numeric leaves keyed by their own name; later keys win, so a transform
    report contributes its "after" gap rather than its "before" one."""
    out = {}
    for k, v in obj.items():
        if isinstance(v, dict):
            out.update(_flatten(v))
        elif isinstance(v, (int, float)) and not isinstance(v, bool):
            out[k] = float(v)
    return out


def cmd_rank(args) -> dict:
    if args.table == "table2":
        table = load_reference_table()
        models, directions = table["models"], table["directions"]
    elif args.table:
        _need_file(args.table, "table")
        with open(args.table) as f:
            table = json.load(f)
        models, directions = table["models"], table["directions"]
    else:
        if not args.reports:
            raise ConfigError("rank needs --table or --reports")
        names = args.names or [Path(p).stem for p in args.reports]
        if len(names) != len(args.reports):
            raise ConfigError("--names must match --reports in length")
        metrics = {}
        for name, path in zip(names, args.reports):
            _need_file(path, "report")
            with open(path) as f:
                rep = json.load(f)
            flat = _flatten(rep.get("results", rep))
            metrics[name] = {k: v for k, v in flat.items() if k in METRIC_DIRECTIONS}
        shared = set.intersection(*(set(m) for m in metrics.values()))
        if not shared:
            raise DataError("reports share no rankable metrics")
        directions = {k: METRIC_DIRECTIONS[k] for k in sorted(shared)}
        models = {n: {k: m[k] for k in directions} for n, m in metrics.items()}
    ranking = rank_models(models, directions)
    return {
        "metrics": directions,
        "ranking": [
            {"model": e.model, "mean_rank": e.mean_rank, "ranks": e.ranks, "nan_metrics": list(e.nan_metrics)}
            for e in ranking
        ],
    }


COMMANDS = {
    "gap": cmd_gap,
    "transform": cmd_transform,
    "profile": cmd_profile,
    "bound": cmd_bound,
    "bnfit": cmd_bnfit,
    "eval": cmd_eval,
    "rank": cmd_rank,
}


def _add_pair(p, required=True):
    p.add_argument("--images", required=required)
    p.add_argument("--texts", required=required)
    p.add_argument("--ids", help="text file, one pair id per line")


def _add_gap_opts(p):
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--symmetric-mcd", action="store_true")


def _add_transform_opts(p):
    p.add_argument("--transform", choices=[t.value for t in Transform])
    p.add_argument("--stats", help="modality stats JSON written by `transform --save-stats`")
    p.add_argument("--bn-state", help="state JSON written by `bnfit --out`")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gapkit {__version__}")
    parser.add_argument("--replay", metavar="REPORT", help="re-run the command recorded in a run report")
    parser.add_argument("--report", help="write the run report here instead of stdout")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--format", choices=["emb1", "csv"], help="input format (default: from extension)")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gap", parents=[common], help="modality gap report")
    _add_pair(p)
    _add_gap_opts(p)

    p = sub.add_parser("transform", parents=[common], help="apply a post-hoc repair")
    _add_pair(p)
    _add_gap_opts(p)
    p.add_argument("--method", choices=["i0t_post", "clip", "mg"], required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.add_argument("--lo", type=float, default=-0.1)
    p.add_argument("--hi", type=float, default=0.1)
    p.add_argument("--stats", help="reuse modality stats instead of computing them")
    p.add_argument("--save-stats")
    p.add_argument("--out-images")
    p.add_argument("--out-texts")
    p.add_argument("--out-format", choices=["emb1", "csv"])
    p.add_argument("--dtype", choices=["f4", "f8"], default="f4")

    p = sub.add_parser("profile", parents=[common], help="per-dimension activation profile")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--peak-factor", type=float, default=5.0)
    p.add_argument("--csv", help="write dim,mean,std,is_peak rows here")

    p = sub.add_parser("bound", parents=[common], help="cosine upper bound under peak activations")
    p.add_argument("--p", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--verify", type=int, default=0, metavar="TRIALS")

    p = sub.add_parser("bnfit", parents=[common], help="fit per-modality batch-norm layers")
    _add_pair(p)
    p.add_argument("--aug-images")
    p.add_argument("--aug-texts")
    p.add_argument("--probe-images")
    p.add_argument("--probe-texts")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--loss", choices=sorted(LOSS_CHOICES), default="cyclip")
    p.add_argument("--forward-stats", choices=["running", "batch"], default="running")
    p.add_argument("--joint-stats", action="store_true")
    p.add_argument("--probe-every", type=int, default=10)
    p.add_argument("--out", dest="state_out", help="batch-norm state JSON")
    p.add_argument("--log", help="loss trace CSV")
    p.set_defaults(train_fraction=0.7)

    p = sub.add_parser("eval", help="downstream evaluations")
    tasks = p.add_subparsers(dest="eval_task", required=True)
    q = tasks.add_parser("retrieve", parents=[common])
    _add_pair(q)
    _add_transform_opts(q)
    q = tasks.add_parser("classify", parents=[common])
    q.add_argument("--images", required=True)
    q.add_argument("--templates", required=True, help="class template manifest JSON")
    q.add_argument("--support-weighted", action="store_true")
    _add_transform_opts(q)
    for name in ("correlate", "score"):
        q = tasks.add_parser(name, parents=[common])
        _add_pair(q)
        _add_transform_opts(q)
        q.add_argument("--score", choices=["clip-s", "i0t-s"], default="i0t-s")
        q.add_argument("--omega", type=float)
        q.add_argument("--clamp", dest="clamp", action="store_true", default=None)
        q.add_argument("--no-clamp", dest="clamp", action="store_false")
        q.add_argument("--dump", help="per-pair score CSV")
        if name == "correlate":
            q.add_argument("--judgments", required=True, help="JSONL of image_id, candidate, score")
            q.add_argument("--candidates", required=True, help="candidate caption embeddings")
        else:
            q.add_argument("--bins", type=int, default=20)
            q.add_argument("--negatives", action="store_true", help="also summarize mismatched pairs")

    p = sub.add_parser("rank", parents=[common], help="mean rank across models")
    p.add_argument("--table", help="JSON with 'models' and 'directions', or 'table2' for the bundled reference")
    p.add_argument("--reports", nargs="+")
    p.add_argument("--names", nargs="+")
    return parser


def run(config: dict) -> dict:
    """Execute one command from its config dict and build the run report."""
    args = argparse.Namespace(**config)
    start = time.perf_counter()
    results = COMMANDS[args.command](args)
    return {
        "tool": "gapkit",
        "version": __version__,
        "command": args.command,
        "config": config,
        "results": results,
        "timing": {"seconds": time.perf_counter() - start},
    }


def _config_from(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(ns).items() if k not in ("replay", "report")}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    threads = os.environ.get("GAPKIT_THREADS")
    try:
        if ns.replay:
            _need_file(ns.replay, "report")
            with open(ns.replay) as f:
                config = json.load(f)["config"]
        elif ns.command is None:
            parser.print_usage(sys.stderr)
            raise ConfigError("no command given")
        else:
            config = _config_from(ns)
        if threads:
            from threadpoolctl import threadpool_limits

            if not threads.isdigit() or int(threads) < 1:
                raise ConfigError(f"GAPKIT_THREADS must be a positive integer, got {threads!r}")
            with threadpool_limits(int(threads)):
                report = run(config)
        else:
            report = run(config)
    except GapkitError as e:
        _fail(e, e.exit_code)
        return e.exit_code
    except (OSError, KeyError, json.JSONDecodeError) as e:
        _fail(e, DataError.exit_code)
        return DataError.exit_code
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        _fail(e, 4)
        return 4
    text = json.dumps(report, indent=2)
    if ns.report:
        with open(ns.report, "w") as f:
            f.write(text + "\n")
    else:
        print(text)
    return 0


def _fail(e: Exception, code: int) -> None:
    print(json.dumps({"error": type(e).__name__, "message": str(e), "exit_code": code}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
