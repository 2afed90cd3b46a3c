"""Command-line entry point: ``planeqc <command> [--workdir DIR] [--config FILE] [--set key=value ...]``.

All artifacts live under the work directory::

    corpus/             gen-data
    anchors.csv         select-anchors
    model.strq(.json)   train, with train_log.csv and checkpoints/
    calib.strq          calibrate
    scores.csv          score
    metrics.json        eval
    sweep.csv           sweep, with sweep_metrics.json
    embeddings.csv      export-embeddings
    run.json            every command: the fully resolved configuration
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
import time
from pathlib import Path
from typing import Callable

from threadpoolctl import threadpool_limits

from .anchors import embed_all, read_anchor_csv, select_per_plane, write_anchor_csv, STRATEGIES
from .config import RunConfig
from .encoder import EncoderConfig, build_encoder
from .errors import ConfigError, FormatError, PlaneQCError
from .evaluation import evaluate, severity_sweep, write_sweep
from .imaging import MANIFEST, AugmentConfig, CorpusSpec, DatasetSplit, Image, gen_synthetic_corpus, read_corpus, write_corpus
from .model import ModelConfig, QCModel
from .numerics import set_precision
from .scoring import AnchorCache, CalibrationStats, calibrate, quality_score, write_scores
from .training import TrainConfig, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationFailure(Exception):
    """A required input is missing or malformed; reported with exit code 1."""


def _require(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise ValidationFailure(f"missing {what}: {path} (run `planeqc {producer}` first)")
    return path


# -- shared loaders -----------------------------------------------------------

def _corpus(work: Path, cfg: RunConfig) -> DatasetSplit:
    root = _require(work / "corpus", "corpus directory", "gen-data")
    _require(root / MANIFEST, "corpus manifest", "gen-data")
    split = read_corpus(root, k1=None)
    return split


def _anchor_map(work: Path, split: DatasetSplit) -> dict[int, list[Image]]:
    path = _require(work / "anchors.csv", "anchor manifest anchors.csv", "select-anchors")
    pool = {img.name: img for imgs in split.pool.values() for img in imgs}
    by_plane = {p.name: p.id for p in split.planes}
    out: dict[int, list[Image]] = {p.id: [] for p in split.planes}
    for name, plane, _ in read_anchor_csv(path):
        if name not in pool or plane not in by_plane:
            raise ValidationFailure(f"anchors.csv names {name!r} ({plane}), which is not in the corpus pool")
        out[by_plane[plane]].append(pool[name])
    for p in split.planes:
        if not out[p.id]:
            raise ValidationFailure(f"anchors.csv has no anchors for plane {p.name!r}")
    return out


def _anchor_pixels(split: DatasetSplit, anchors: dict[int, list[Image]]) -> dict[str, dict[str, object]]:
    return {p.name: {a.name: a.pixels for a in anchors[p.id]} for p in split.planes}


def _model_config(cfg: RunConfig, n_planes: int) -> ModelConfig:
    return ModelConfig(
        channels=tuple(cfg["encoder.channels"]), n_planes=n_planes, rank=cfg["oks.r"], alpha=cfg["oks.alpha"],
        epsilon=cfg["oks.epsilon"], gamma=cfg["oks.gamma"], abs_activation=cfg["oks.abs_activation"],
        literal_projection=cfg["oks.literal_projection"], lra_mode=cfg["lra.mode"], lra_hidden=cfg["lra.hidden"],
        orth_variant=cfg["loss.orth_variant"], seed=cfg["encoder.seed"],
    )


def _load_model(work: Path) -> QCModel:
    return QCModel.load(_require(work / "model.strq", "trained model model.strq", "train"))


def _load_stats(work: Path) -> CalibrationStats:
    return CalibrationStats.load(_require(work / "calib.strq", "calibration artifact calib.strq", "calibrate"))


def _weights(cfg: RunConfig) -> dict[str, float]:
    return {"sim": cfg["score.w_sim"], "ncc": cfg["score.w_ncc"], "smooth": cfg["score.w_smooth"]}


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig, work: Path) -> None:
    spec = CorpusSpec(n_planes=cfg["data.n_planes"], size=cfg["data.size"], n_pool=cfg["data.n_pool"],
                      k1=cfg["anchors.k1"], k2=cfg["data.k2"], n_query_pristine=cfg["data.n_query_pristine"],
                      n_query_degraded=cfg["data.n_query_degraded"],
                      pool_degraded_frac=cfg["data.pool_degraded_frac"])
    split = gen_synthetic_corpus(spec, cfg["data.seed"])
    root = work / "corpus"
    if root.exists():
        shutil.rmtree(root)
    write_corpus(split, root)
    n = sum(len(v) for g in (split.pool, split.train, split.query) for v in g.values())
    print(f"wrote {n} images for {len(split.planes)} planes to {root}")


def cmd_select_anchors(args, cfg: RunConfig, work: Path) -> None:
    split = _corpus(work, cfg)
    k1 = cfg["anchors.k1"]
    if k1 * 5 > split.k2:
        raise ConfigError(f"anchors.k1={k1} violates k1 <= k2/5 with k2={split.k2}")
    enc = build_encoder(EncoderConfig(tuple(cfg["encoder.channels"]), seed=cfg["encoder.seed"]))
    groups = {p.name: [(img.name, img.pixels) for img in split.pool[p.id]] for p in split.planes}
    chosen = select_per_plane(cfg["anchors.strategy"], embed_all(enc, groups), k1, cfg["anchors.seed"])
    write_anchor_csv(work / "anchors.csv", chosen)
    print(f"selected {len(chosen)} anchors ({cfg['anchors.strategy']}) -> {work / 'anchors.csv'}")


def _train_config(cfg: RunConfig) -> TrainConfig:
    order = cfg["train.plane_order"]
    return TrainConfig(
        lr=cfg["train.lr"], general_lr=cfg["train.general_lr"], epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"], steps_per_epoch=cfg["train.steps_per_epoch"], seed=cfg["train.seed"],
        lam=cfg["loss.lambda"], plane_order=tuple(order) if order is not None else None,
        orth_all_experts=cfg["train.orth_all_experts"], checkpoint_every=cfg["train.checkpoint_every"],
        augment=AugmentConfig(contrast=tuple(cfg["augment.contrast"]), rotation_deg=cfg["augment.rotation_deg"],
                              translation=cfg["augment.translation"], scale=tuple(cfg["augment.scale"]),
                              noise_std=cfg["augment.noise_std"]),
    )


def cmd_train(args, cfg: RunConfig, work: Path) -> None:
    split = _corpus(work, cfg)
    split.anchors = _anchor_map(work, split)
    tcfg = _train_config(cfg)
    model = QCModel(_model_config(cfg, len(split.planes)))
    t0 = time.perf_counter()
    rows = train(tcfg, split, model, log_path=work / "train_log.csv", checkpoint_dir=work / "checkpoints")
    model.save(work / "model.strq")
    last = rows[-1].total if rows else float("nan")
    print(f"trained {len(rows)} plane-epochs in {time.perf_counter() - t0:.1f}s; final total loss {last:.4f}")


def cmd_calibrate(args, cfg: RunConfig, work: Path) -> None:
    split = _corpus(work, cfg)
    anchors = _anchor_pixels(split, _anchor_map(work, split))
    model = _load_model(work)
    images = {p.name: [img.pixels for img in split.train[p.id]] for p in split.planes}
    stats = calibrate(model, images, anchors)
    stats.save(work / "calib.strq")
    print(f"calibrated {len(stats.ranges)} planes -> {work / 'calib.strq'}")


def cmd_score(args, cfg: RunConfig, work: Path) -> None:
    split = _corpus(work, cfg)
    anchors = _anchor_pixels(split, _anchor_map(work, split))
    model = _load_model(work)
    stats = _load_stats(work)
    cache = AnchorCache.build(model, {n: px for g in anchors.values() for n, px in g.items()})
    reports = []
    t0 = time.perf_counter()
    for p in split.planes:
        for img in split.query[p.id]:
            reports.append(quality_score(model, img.pixels, p.name, anchors[p.name], stats, _weights(cfg),
                                         cfg["score.tau"], cache, cfg["score.literal_formula"], name=img.name))
    elapsed = time.perf_counter() - t0
    write_scores(work / "scores.csv", reports)
    n = max(len(reports), 1)
    accepted = sum(r.accepted for r in reports)
    print(f"scored {len(reports)} queries, {accepted} accepted; latency {1000.0 * elapsed / n:.1f} ms/frame")


def _read_scores(path: Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "Q" not in reader.fieldnames or "path" not in reader.fieldnames:
            raise FormatError(f"{path}: not a score file")
        return {r["path"]: float(r["Q"]) for r in reader}


def cmd_eval(args, cfg: RunConfig, work: Path) -> None:
    split = _corpus(work, cfg)
    scores = _read_scores(_require(work / "scores.csv", "score file scores.csv", "score"))
    truth = {img.name: img.score for p in split.planes for img in split.query[p.id]}
    names = [n for n in scores if truth.get(n) is not None]
    if len(names) < 3:
        raise ValidationFailure("fewer than 3 scored queries carry a reference score")
    baseline = None
    if args.baseline:
        other = _read_scores(_require(Path(args.baseline), "baseline score file", "score"))
        missing = [n for n in names if n not in other]
        if missing:
            raise ValidationFailure(f"baseline lacks {len(missing)} queries, e.g. {missing[0]}")
        baseline = [other[n] for n in names]
    metrics = evaluate([scores[n] for n in names], [truth[n] for n in names], baseline)
    (work / "metrics.json").write_text(metrics.to_json())
    print(f"SRCC {metrics.srcc:.4f}  PLCC {metrics.plcc:.4f}  n={metrics.n}")


def sweep_images(split: DatasetSplit, n: int) -> list[Image]:
    """Pristine query images, taken round-robin across planes."""
    pools = [[img for img in split.query[p.id] if not img.severity] for p in split.planes]
    out: list[Image] = []
    i = 0
    while len(out) < n and any(i < len(pl) for pl in pools):
        out += [pl[i] for pl in pools if i < len(pl)][: n - len(out)]
        i += 1
    return out


def cmd_sweep(args, cfg: RunConfig, work: Path) -> None:
    split = _corpus(work, cfg)
    anchors = _anchor_pixels(split, _anchor_map(work, split))
    model = _load_model(work)
    stats = _load_stats(work)
    images = sweep_images(split, cfg["sweep.n_images"])
    if not images:
        raise ValidationFailure("corpus has no pristine query images to sweep")
    points, per_kind = severity_sweep(model, stats, images, anchors, cfg["sweep.kinds"], cfg["sweep.levels"],
                                      cfg["sweep.seed"])
    write_sweep(work / "sweep.csv", points)
    doc = {"srcc": per_kind, "n_images": len(images), "levels": cfg["sweep.levels"]}
    (work / "sweep_metrics.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print("  ".join(f"SRCC[{k}] {v:.4f}" for k, v in per_kind.items()))


def cmd_export_embeddings(args, cfg: RunConfig, work: Path) -> None:
    split = _corpus(work, cfg)
    enc = build_encoder(EncoderConfig(tuple(cfg["encoder.channels"]), seed=cfg["encoder.seed"]))
    path = work / "embeddings.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "plane", "split"] + [f"e{i}" for i in range(cfg["encoder.channels"][-1])])
        for name, group in (("pool", split.pool), ("train", split.train), ("query", split.query)):
            for p in split.planes:
                for img in group[p.id]:
                    w.writerow([img.name, p.name, name] + [repr(float(v)) for v in enc.embed(img.pixels)])
    print(f"wrote embeddings -> {path}")


COMMANDS: dict[str, Callable] = {
    "gen-data": cmd_gen_data,
    "select-anchors": cmd_select_anchors,
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "score": cmd_score,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "export-embeddings": cmd_export_embeddings,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="directory holding all artifacts")
    common.add_argument("--config", default=None, help="JSON config file (flat dotted keys or nested objects)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key; repeatable")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads (1 = deterministic)")

    parser = argparse.ArgumentParser(prog="planeqc", description="Registration-based plane quality control.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("gen-data", parents=[common], help="render the synthetic corpus")
    p.add_argument("--seed", type=int, default=None)
    p = sub.add_parser("select-anchors", parents=[common], help="pick reference anchors per plane")
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.add_argument("--k1", type=int, default=None)
    sub.add_parser("train", parents=[common], help="train experts and aligners plane by plane")
    sub.add_parser("calibrate", parents=[common], help="freeze per-plane term ranges on the training split")
    sub.add_parser("score", parents=[common], help="score the query split")
    p = sub.add_parser("eval", parents=[common], help="correlate scores with reference quality")
    p.add_argument("--baseline", default=None, help="second scores.csv for a paired t-test on absolute errors")
    sub.add_parser("sweep", parents=[common], help="score pristine queries under graded deformations")
    sub.add_parser("export-embeddings", parents=[common], help="write frozen-encoder embeddings as CSV")
    return parser


def _resolve(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"data.seed={args.seed}")
    if getattr(args, "strategy", None) is not None:
        overrides.append(f'anchors.strategy="{args.strategy}"')
    if getattr(args, "k1", None) is not None:
        overrides.append(f"anchors.k1={args.k1}")
    return RunConfig.load(args.config, overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    work = Path(args.workdir)
    try:
        if args.threads < 1:
            raise ValidationFailure("--threads must be >= 1")
        cfg = _resolve(args)
        work.mkdir(parents=True, exist_ok=True)
        (work / "run.json").write_text(cfg.to_json())
        set_precision(cfg["numerics.precision"])
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, cfg, work)
    except (ValidationFailure, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except PlaneQCError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
