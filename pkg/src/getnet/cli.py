"""Command-line entry point: ``getnet <command> [options]``.

Every command accepts ``--config FILE`` (JSON); explicit flags override
values from the file, which override the built-in defaults shown in
``--help``.  Exit codes: 0 success, 2 usage, 3 data error, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .audio_io import load_clip, read_manifest
from .corpus import DcallSpec, SiteProfile, desk_profiles, generate_corpus
from .dataset import LabeledSet, load_corpus
from .dsp import CANONICAL, DESK, FrontendParams, Spectrogram, extract_clip, write_spectrogram
from .errors import DataError, FoldFailure, GetNetError
from .evaluation import NestedCvConfig, efficiency_bench, nested_cv, plan_folds
from .evaluation import report as rep
from .evaluation.metrics import compute_metrics
from .model import FLAGS, FULL, ArpanConfig, build, forward, load_checkpoint, save_checkpoint
from .rng import RandomState, derive_seed
from .saliency import export_overlay, saliency_batch
from .training import TrainConfig, prepare_training_set, train

log = logging.getLogger("getnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 2, 3, 4
CACHE_ENV = "GETNET_CACHE_DIR"

PRESETS = {
    "desk": {"frontend": DESK, "width_scale": 0.125, "pool_grid": (16, 16),
             "epochs": 10, "lr0": 0.003, "batch_size": 8, "dropout_p": 0.1},
    "canonical": {"frontend": CANONICAL, "width_scale": 1.0, "pool_grid": (64, 64),
                  "epochs": 15, "lr0": 0.01, "batch_size": 32, "dropout_p": 0.2},
}

DEFAULTS = {
    "seed": 0, "preset": "desk", "workers": 1, "k": 5, "halve_every": 5,
    "neg_downsample": 0.5, "threshold": 0.5, "flags": ",".join(f for f in FLAGS if f in FULL),
    "no_attention": False, "group_by_clip": False, "merge_events": False,
    "clips_per_block": 8, "clip_seconds": 65.536, "profiles": "desk", "outer": 0, "inner": 0,
    "repetitions": 5, "top_j": 5, "scale": 4, "site": None, "year": None,
    "epochs": None, "lr0": None, "batch_size": None, "width_scale": None, "dropout_p": None,
}


def rank_samples(scores: Sequence, top_j: int | None = None) -> list[int]:
    """Indices ordered by descending score; equal scores keep input order."""
    vals = [s["score"] if isinstance(s, dict) else s for s in scores]
    order = sorted(range(len(vals)), key=lambda i: -float(vals[i]))
    return order if top_j is None else order[:top_j]


def corpus_hash(manifest_path) -> str:
    """sha256 over the manifest bytes and every referenced audio file."""
    manifest_path = Path(manifest_path)
    h = hashlib.sha256(manifest_path.read_bytes())
    for rec in read_manifest(manifest_path):
        p = Path(rec["path"])
        p = p if p.is_absolute() else manifest_path.parent / p
        h.update(rec["path"].encode("utf-8"))
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    corpus_hash: str | None
    seeds: dict
    version: str = __version__
    started: float = field(default_factory=time.time)
    finished: float | None = None

    def write(self, out_dir) -> Path:
        self.finished = time.time()
        path = Path(out_dir) / "run_manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True,
                                   default=str) + "\n", encoding="utf-8")
        return path


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _opt(p, name, typ=str, help="", **kw):
    dest = name.lstrip("-").replace("-", "_")
    default = DEFAULTS.get(dest)
    shown = f" (default: {default})" if default not in (None, False) else ""
    p.add_argument(name, type=typ, default=None, help=help + shown, **kw)


def _flag(p, name, help=""):
    p.add_argument(name, action="store_true", default=None, help=help)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="getnet", description="Nested cross-validation benchmark for "
                "spectrogram-based detection of underwater calls.")
    p.add_argument("--version", action="version", version=f"getnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, manifest=True, model=True):
        sp.add_argument("--config", help="JSON file of option values")
        sp.add_argument("--out", required=True, help="output directory")
        if manifest:
            sp.add_argument("--manifest", required=True, help="corpus manifest.jsonl")
        _opt(sp, "--seed", int, "top-level seed")
        _opt(sp, "--preset", str, "frontend/model scale", choices=sorted(PRESETS))
        if model:
            _opt(sp, "--flags", str, "comma-separated architecture flags")
            _flag(sp, "--no-attention", "disable the spatial attention gate")
            _opt(sp, "--width-scale", float, "channel width multiplier (preset default)")
            _opt(sp, "--dropout-p", float, "spatial dropout probability (preset default)")

    def training_opts(sp):
        _opt(sp, "--epochs", int, "epochs (preset default)")
        _opt(sp, "--lr0", float, "initial learning rate (preset default)")
        _opt(sp, "--batch-size", int, "batch size (preset default)")
        _opt(sp, "--halve-every", int, "halve the learning rate every N epochs")
        _opt(sp, "--neg-downsample", float, "fraction of training negatives kept")
        _opt(sp, "--threshold", float, "decision threshold")
        _opt(sp, "--k", int, "inner folds")
        _flag(sp, "--group-by-clip", "keep every clip's windows in one inner fold")

    sp = sub.add_parser("datagen", help="generate a synthetic site-year corpus")
    common(sp, manifest=False, model=False)
    _opt(sp, "--clips-per-block", int, "clips per site-year")
    _opt(sp, "--clip-seconds", float, "clip length in seconds")
    _opt(sp, "--profiles", str, "'desk', 'separable' or a JSON file with a list of site profiles")

    sp = sub.add_parser("features", help="extract and cache spectrograms")
    common(sp, model=False)

    sp = sub.add_parser("train", help="train one (outer, inner) fold")
    common(sp)
    training_opts(sp)
    _opt(sp, "--outer", int, "held-out block index")
    _opt(sp, "--inner", int, "validation fold index")

    sp = sub.add_parser("nested-cv", help="full nested cross-validation run")
    common(sp)
    training_opts(sp)
    _opt(sp, "--workers", int, "parallel fold workers (results do not depend on it)")
    _flag(sp, "--merge-events", "score merged events instead of windows")

    sp = sub.add_parser("bench", help="time inference of a checkpoint")
    common(sp, model=False)
    sp.add_argument("--checkpoint", required=True)
    _opt(sp, "--repetitions", int, "timed repetitions after one warm-up")

    sp = sub.add_parser("saliency", help="overlays for the top-ranked samples")
    common(sp, model=False)
    sp.add_argument("--checkpoint", required=True)
    _opt(sp, "--site", str, "restrict to one site")
    _opt(sp, "--year", int, "restrict to one year")
    _opt(sp, "--top-j", int, "number of samples to export")
    _opt(sp, "--scale", int, "pixel upscaling of the PNGs")

    sp = sub.add_parser("report", help="render a report JSON as CSV and markdown")
    sp.add_argument("--config", help="JSON file of option values")
    sp.add_argument("--input", required=True, help="report.json from nested-cv")
    sp.add_argument("--out", required=True, help="output directory")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags; fill preset values."""
    opts = {k: v for k, v in DEFAULTS.items()}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise DataError("config file must hold a JSON object")
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    opts.update({k: v for k, v in vars(args).items() if v is not None})
    preset = PRESETS[opts["preset"]]
    for key in ("epochs", "lr0", "batch_size", "width_scale", "dropout_p"):
        if opts.get(key) is None:
            opts[key] = preset[key]
    return opts


def _frontend(opts) -> FrontendParams:
    return PRESETS[opts["preset"]]["frontend"]


def model_config(opts, seed: int | None = None) -> ArpanConfig:
    flags = frozenset(f for f in str(opts["flags"]).split(",") if f)
    fe = _frontend(opts)
    return ArpanConfig(flags=flags, attention=not opts["no_attention"],
                       width_scale=float(opts["width_scale"]), input_shape=fe.spectrogram_shape,
                       pool_grid=PRESETS[opts["preset"]]["pool_grid"],
                       dropout_p=float(opts["dropout_p"]),
                       seed=opts["seed"] if seed is None else seed)


def train_config(opts) -> TrainConfig:
    return TrainConfig(lr0=float(opts["lr0"]), halve_every=int(opts["halve_every"]),
                       epochs=int(opts["epochs"]), batch_size=int(opts["batch_size"]),
                       threshold=float(opts["threshold"]), seed=int(opts["seed"]),
                       neg_downsample=float(opts["neg_downsample"]))


def _cache_key(chash: str, fe: FrontendParams) -> str:
    return hashlib.sha256((chash + json.dumps(dataclasses.asdict(fe), sort_keys=True))
                          .encode("utf-8")).hexdigest()[:24]


def load_features(manifest, fe: FrontendParams, chash: str | None = None) -> LabeledSet:
    """Spectrograms for a manifest, through the cache directory when one is set."""
    cache = os.environ.get(CACHE_ENV)
    if not cache:
        return load_corpus(manifest, fe)
    chash = chash or corpus_hash(manifest)
    path = Path(cache) / f"features_{_cache_key(chash, fe)}.npz"
    if path.exists():
        z = np.load(path, allow_pickle=False)
        meta = json.loads(str(z["meta"]))
        return LabeledSet(z["x"], z["y"], meta["ids"], meta["site"], meta["year"],
                          meta["clip_id"], z["index"])
    ds = load_corpus(manifest, fe)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps({"ids": ds.ids, "site": ds.site, "year": ds.year, "clip_id": ds.clip_id})
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, x=ds.x, y=ds.y, index=ds.index, meta=np.array(meta))
    os.replace(tmp, path)
    return ds


def _profiles(spec: str) -> list[SiteProfile]:
    if spec == "desk":
        return desk_profiles()
    if spec == "separable":
        return desk_profiles(separable=True)
    try:
        raw = json.loads(Path(spec).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read profiles {spec}: {exc}") from exc
    out = []
    for d in raw:
        d = dict(d)
        if "call" in d:
            call = dict(d["call"])
            if "duration_range" in call:
                call["duration_range"] = tuple(call["duration_range"])
            d["call"] = DcallSpec(**call)
        d["interference"] = frozenset(d.get("interference", ()))
        out.append(SiteProfile(**d))
    return out


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_datagen(opts, out: Path) -> RunManifest:
    fe = _frontend(opts)
    records = generate_corpus(_profiles(opts["profiles"]), int(opts["clips_per_block"]),
                              float(opts["clip_seconds"]), out, seed=int(opts["seed"]),
                              fs=fe.sample_rate, frontend=fe)
    log.info("wrote %d clips to %s", len(records), out)
    return RunManifest("datagen", opts, corpus_hash(out / "manifest.jsonl"),
                       {"corpus": opts["seed"]})


def cmd_features(opts, out: Path) -> RunManifest:
    fe = _frontend(opts)
    manifest = Path(opts["manifest"])
    chash = corpus_hash(manifest)
    spec_dir = out / "spectrograms"
    spec_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for rec in read_manifest(manifest):
        clip = load_clip(rec, manifest.parent, fe.sample_rate)
        for s in extract_clip(clip, fe):
            name = f"{s.clip_id}_{s.index:04d}.spec"
            write_spectrogram(spec_dir / name, s, fe.sample_rate)
            index.append({"file": f"spectrograms/{name}", "clip_id": s.clip_id, "index": s.index,
                          "site": clip.site, "year": clip.year, "label": int(s.label),
                          "degenerate": bool(s.degenerate)})
    with open(out / "index.jsonl", "w", encoding="utf-8") as fh:
        for r in index:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    load_features(manifest, fe, chash)  # warm the cache when one is configured
    return RunManifest("features", opts, chash, {})


def cmd_train(opts, out: Path) -> RunManifest:
    manifest = Path(opts["manifest"])
    chash = corpus_hash(manifest)
    ds = load_features(manifest, _frontend(opts), chash)
    seed = int(opts["seed"])
    plans = plan_folds(ds, int(opts["k"]), seed, bool(opts["group_by_clip"]))
    i, j = int(opts["outer"]), int(opts["inner"])
    match = [p for p in plans if p.outer_index == i and p.inner_index == j]
    if not match:
        raise DataError(f"no fold ({i}, {j}); have {len(plans) // int(opts['k'])} blocks "
                        f"and k={opts['k']}")
    plan = match[0]
    seeds = {"model": derive_seed(seed, "model", i, j), "train": derive_seed(seed, "train", i, j)}
    tr = prepare_training_set(ds.select_ids(plan.train_ids), float(opts["neg_downsample"]),
                              RandomState(seed).child("downsample", i, j))
    val, test = ds.select_ids(plan.val_ids), ds.select_ids(plan.test_ids)
    tcfg = dataclasses.replace(train_config(opts), seed=seeds["train"])
    model, hist = train(build(model_config(opts, seeds["model"])), tr, val, tcfg,
                        log_path=out / "train_log.jsonl")
    save_checkpoint(model, out / "model.ckpt")
    scores = forward(model, test.x)
    with open(out / "scores.jsonl", "w", encoding="utf-8") as fh:
        for ident, y, s in zip(test.ids, test.y, scores):
            fh.write(json.dumps({"id": ident, "label": int(y), "score": float(s)}) + "\n")
    result = {"fold": plan.to_dict(), "history": hist.to_dict()}
    if test.n_pos:
        result["test_metrics"] = compute_metrics(scores, test.y, tcfg.threshold).to_dict()
    _write_json(out / "train_result.json", result)
    return RunManifest("train", opts, chash, seeds)


def cmd_nested_cv(opts, out: Path) -> RunManifest:
    manifest = Path(opts["manifest"])
    chash = corpus_hash(manifest)
    ds = load_features(manifest, _frontend(opts), chash)
    cv = NestedCvConfig(k=int(opts["k"]), seed=int(opts["seed"]),
                        group_by_clip=bool(opts["group_by_clip"]),
                        merge_events=bool(opts["merge_events"]), workers=int(opts["workers"]))
    report = nested_cv(ds, model_config(opts), train_config(opts), cv, out_dir=out)
    rep.write_json(report, out / "report.json")
    (out / "report.csv").write_text(rep.to_csv(report), encoding="utf-8")
    (out / "report.md").write_text(rep.to_markdown(report), encoding="utf-8")
    _write_json(out / "efficiency.json", report.efficiency)
    return RunManifest("nested-cv", opts, chash, {"top": cv.seed})


def cmd_bench(opts, out: Path) -> RunManifest:
    manifest = Path(opts["manifest"])
    chash = corpus_hash(manifest)
    model = load_checkpoint(opts["checkpoint"])
    ds = load_features(manifest, _frontend(opts), chash)
    res = efficiency_bench(model, ds.x, int(opts["repetitions"]))
    _write_json(out / "bench.json", res.to_dict())
    return RunManifest("bench", opts, chash, {})


def cmd_saliency(opts, out: Path) -> RunManifest:
    manifest = Path(opts["manifest"])
    chash = corpus_hash(manifest)
    fe = _frontend(opts)
    model = load_checkpoint(opts["checkpoint"])
    ds = load_features(manifest, fe, chash)
    keep = [n for n in range(len(ds))
            if (opts["site"] is None or ds.site[n] == opts["site"])
            and (opts["year"] is None or ds.year[n] == int(opts["year"]))]
    if not keep:
        raise DataError("no samples match the site/year filter")
    sub = ds.subset(keep)
    scores = forward(model, sub.x)
    order = rank_samples(list(scores), int(opts["top_j"]))
    sal = saliency_batch(model, sub.x[order])
    ranking = []
    for rank, (n, smap) in enumerate(zip(order, sal)):
        spec = Spectrogram(sub.x[n], fe.sample_rate / fe.n_fft, fe.stft_hop, fe.n_fft,
                           int(sub.y[n]), sub.clip_id[n], int(sub.index[n]))
        png = export_overlay(spec, smap, out / f"rank{rank:03d}_{sub.ids[n].replace('#', '_')}.png",
                             scale=int(opts["scale"]), top_j=5, params=fe)
        ranking.append({"rank": rank, "id": sub.ids[n], "score": float(scores[n]),
                        "label": int(sub.y[n]), "png": png.name})
    _write_json(out / "ranking.json", ranking)
    return RunManifest("saliency", opts, chash, {})


def cmd_report(opts, out: Path) -> RunManifest:
    report = rep.load_report(opts["input"])
    (out / "report.csv").write_text(rep.to_csv(report), encoding="utf-8")
    (out / "report.md").write_text(rep.to_markdown(report), encoding="utf-8")
    return RunManifest("report", opts, None, {})


COMMANDS = {"datagen": cmd_datagen, "features": cmd_features, "train": cmd_train,
            "nested-cv": cmd_nested_cv, "bench": cmd_bench, "saliency": cmd_saliency,
            "report": cmd_report}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, FoldFailure):
        return _exit_code(exc.cause)
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return EXIT_INVARIANT


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = resolve(args)
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        manifest = COMMANDS[args.command](opts, out)
        manifest.write(out)
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes
        category = exc.category if isinstance(exc, GetNetError) else type(exc).__name__
        print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
        if not isinstance(exc, (GetNetError, OSError)):
            log.debug("unexpected error", exc_info=True)
        return _exit_code(exc)
    return EXIT_OK


def run() -> None:
    """Console-script wrapper."""
    sys.exit(main())


if __name__ == "__main__":
    run()
