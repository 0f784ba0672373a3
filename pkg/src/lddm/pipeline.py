"""Pipeline stages driven by a :class:`~lddm.config.RunConfig`.

Each stage owns one namespace directory, reads other stages' outputs without
modifying them, and finishes by writing ``manifest.json`` (config hash, seed,
artifact paths, summary numbers). Manifests carry no timestamps, so a rerun
with the same config reproduces every file byte for byte.

    stage            namespace
    gen-toy          <data_dir>/toy
    train-ae         <checkpoint_dir>/ae
    encode-latents   <checkpoint_dir>/latents
    train-diff       <checkpoint_dir>/diffusion
    synthesize       <data_dir>/synthetic
    evaluate         <report_dir>/evaluate
    experiment       <report_dir>/experiment
    report           <report_dir>/plots
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import autoencoder as ae
from .checkpoint import load_checkpoint, save_checkpoint
from .classifier import CONDITIONS, augmentation_experiment, train_classifier
from .config import RunConfig
from .data import (
    LabeledClip,
    LabeledVideoDataset,
    ToyGenParams,
    generate_toy_dataset,
    generate_toy_images,
    read_dataset,
    segment_dataset,
    split_dataset,
    split_halves,
    write_dataset,
)
from .denoiser import train_diffusion
from .diffusion import NoiseSchedule, make_linear_schedule
from .errors import GeometryError, MissingArtifactError
from .metrics import (
    ClassifierFeatures,
    RandomConvPatchFeatures,
    corpus_distance,
    diversity_score,
    perceptual_patch_distance,
)
from .rng import derive_seed
from .synthesis import SynthesisBundle, SyntheticItem, batch_synthesize
from .video import LatentDynamic, SeedImage, VideoClip, read_video, static_repeat, write_video

log = logging.getLogger(__name__)

# stream tags for derive_seed(cfg.seed, tag)
_EVAL_STREAM, _AUGMENT_STREAM, _DIV_STREAM = 11, 12, 13


def _ns(cfg: RunConfig, stage: str) -> Path:
    base, sub = {
        "gen-toy": (cfg.data_dir, "toy"),
        "train-ae": (cfg.checkpoint_dir, "ae"),
        "encode-latents": (cfg.checkpoint_dir, "latents"),
        "train-diff": (cfg.checkpoint_dir, "diffusion"),
        "synthesize": (cfg.data_dir, "synthetic"),
        "evaluate": (cfg.report_dir, "evaluate"),
        "experiment": (cfg.report_dir, "experiment"),
        "report": (cfg.report_dir, "plots"),
    }[stage]
    return Path(base) / sub


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}: {hint}")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in fields})
    path.write_text(buf.getvalue())


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def _finish(cfg: RunConfig, stage: str, out: Path, artifacts: list[Path], inputs: list[Path],
            summary: dict | None = None) -> dict:
    manifest = {
        "command": stage,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "artifacts": sorted(str(p.relative_to(out)) for p in artifacts),
        "inputs": sorted(str(p) for p in inputs),
        "summary": summary or {},
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def toy_params(cfg: RunConfig) -> ToyGenParams:
    g, t = cfg.geometry, cfg.toy
    return ToyGenParams(t.n_per_class, t.raw_frames, g.height, g.width, g.channels, t.blob_size,
                        t.speed, t.amplitude, t.period, t.noise_std, t.class1_elongation, cfg.seed)


def schedule_of(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_linear_schedule(s.beta_start, s.beta_end, s.T, s.sigma_mode)


# ------------------------------------------------------------- loaders


def load_clip_dataset(cfg: RunConfig) -> LabeledVideoDataset:
    manifest = _require(_ns(cfg, "gen-toy") / "manifest.jsonl", "run gen-toy first")
    ds = segment_dataset(read_dataset(manifest), cfg.sampling.clip_len, cfg.sampling.sampled)
    if ds.geometry != cfg.geometry.clip_shape:
        raise GeometryError(f"toy clips have shape {ds.geometry}, config expects {cfg.geometry.clip_shape}")
    return ds


def generative_split(cfg: RunConfig, ds: LabeledVideoDataset):
    return split_dataset(ds, cfg.generative_split, cfg.seed)


def load_images(cfg: RunConfig) -> list[tuple[SeedImage, int, str]]:
    manifest = _require(_ns(cfg, "gen-toy") / "images" / "manifest.jsonl", "run gen-toy first")
    ds = read_dataset(manifest)
    return [(it.clip.first_frame, it.label, it.source_id) for it in ds]


def load_autoencoder(cfg: RunConfig):
    d = _ns(cfg, "train-ae")
    hint = "missing checkpoint; run train-ae first"
    enc, _ = load_checkpoint(_require(d / "encoder.ckpt", hint), "encoder")
    dec, _ = load_checkpoint(_require(d / "decoder.ckpt", hint), "decoder")
    return enc, dec


def load_bundle(cfg: RunConfig) -> SynthesisBundle:
    _, dec = load_autoencoder(cfg)
    path = _require(_ns(cfg, "train-diff") / "denoiser.ckpt", "missing checkpoint; run train-diff first")
    den, extra = load_checkpoint(path, "denoiser")
    return SynthesisBundle(dec, den, NoiseSchedule.from_config(extra["schedule"]))


def load_synthetic(cfg: RunConfig, name: str) -> LabeledVideoDataset:
    path = _require(_ns(cfg, "synthesize") / f"{name}.jsonl", "run synthesize first")
    return read_dataset(path)


def load_synthetic_rows(cfg: RunConfig, name: str) -> list[tuple[dict, VideoClip]]:
    """Manifest rows (with ``source_image_id`` and ``rng_key``) paired with their clips."""
    out = _ns(cfg, "synthesize")
    path = _require(out / f"{name}.jsonl", "run synthesize first")
    rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    return [(row, read_video(out / row["path"])) for row in rows]


# -------------------------------------------------------------- stages


def gen_toy(cfg: RunConfig) -> dict:
    out = _ns(cfg, "gen-toy")
    out.mkdir(parents=True, exist_ok=True)
    params = toy_params(cfg)
    ds = generate_toy_dataset(params)
    manifest = write_dataset(out, ds)
    images = generate_toy_images(params, cfg.toy.n_images)
    # still images are stored as single-frame videos
    img_ds = LabeledVideoDataset(
        tuple(LabeledClip(VideoClip(img.pixels[None]), label, iid) for img, label, iid in images), "toy")
    img_manifest = write_dataset(out / "images", img_ds)
    artifacts = [manifest, img_manifest] + sorted((out / "videos").iterdir()) \
        + sorted((out / "images" / "videos").iterdir())
    return _finish(cfg, "gen-toy", out, artifacts, [], {"videos": len(ds), "images": len(images)})


def train_ae(cfg: RunConfig) -> dict:
    ds = load_clip_dataset(cfg)
    train, _ = generative_split(cfg, ds)
    out = _ns(cfg, "train-ae")
    out.mkdir(parents=True, exist_ok=True)
    m = cfg.model
    enc, dec, tlog = ae.train_autoencoder(train.clips, cfg.stage1, geometry=cfg.geometry,
                                          width=m.ae_width, stages=m.ae_stages, style_grid=m.style_grid)
    save_checkpoint(out / "encoder.ckpt", enc)
    save_checkpoint(out / "decoder.ckpt", dec)
    _write_csv(out / "loss.csv", tlog.as_rows(), ["step", "loss"])
    losses = tlog.losses
    summary = {"initial_loss": losses[0], "final_loss": losses[-1],
               "final_over_initial": losses[-1] / losses[0], "train_clips": len(train)}
    log.info("train-ae: loss %.5f -> %.5f", losses[0], losses[-1])
    return _finish(cfg, "train-ae", out, [out / "encoder.ckpt", out / "decoder.ckpt", out / "loss.csv"],
                   [_ns(cfg, "gen-toy") / "manifest.jsonl"], summary)


def encode_latents(cfg: RunConfig) -> dict:
    enc, _ = load_autoencoder(cfg)
    ds = load_clip_dataset(cfg)
    train, _ = generative_split(cfg, ds)
    out = _ns(cfg, "encode-latents")
    out.mkdir(parents=True, exist_ok=True)
    latents = np.stack([ae.encode(c, enc).values for c in train.clips])
    seeds = np.stack([c.frames[0] for c in train.clips])
    np.save(out / "latents.npy", latents)
    np.save(out / "seeds.npy", seeds)
    (out / "index.jsonl").write_text("".join(
        json.dumps({"source_id": it.source_id, "label": it.label}, sort_keys=True) + "\n" for it in train))
    summary = {"count": len(latents), "shape": list(latents.shape[1:]),
               "mean": float(latents.mean()), "std": float(latents.std())}
    return _finish(cfg, "encode-latents", out,
                   [out / "latents.npy", out / "seeds.npy", out / "index.jsonl"],
                   [_ns(cfg, "train-ae") / "encoder.ckpt"], summary)


def train_diff(cfg: RunConfig) -> dict:
    load_autoencoder(cfg)  # dependency check: stage 1 must exist
    lat_dir = _ns(cfg, "encode-latents")
    latents = np.load(_require(lat_dir / "latents.npy", "run encode-latents first"))
    seeds = np.load(_require(lat_dir / "seeds.npy", "run encode-latents first"))
    pairs = [(LatentDynamic(z, cfg.geometry.r), SeedImage(s)) for z, s in zip(latents, seeds)]
    schedule = schedule_of(cfg)
    model, tlog = train_diffusion(pairs, schedule, cfg.stage2, width=cfg.model.denoiser_width,
                                  time_dim=cfg.model.time_dim)
    out = _ns(cfg, "train-diff")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "denoiser.ckpt", model, {"schedule": schedule.to_config()})
    _write_csv(out / "loss.csv", tlog.as_rows(), ["step", "loss"])
    L = np.asarray(tlog.losses)
    k = min(100, len(L))
    summary = {"leading_mean": float(L[:k].mean()), "trailing_mean": float(L[-k:].mean()),
               "trailing_over_leading": float(L[-k:].mean() / L[:k].mean())}
    log.info("train-diff: leading %.4f trailing %.4f", summary["leading_mean"], summary["trailing_mean"])
    return _finish(cfg, "train-diff", out, [out / "denoiser.ckpt", out / "loss.csv"],
                   [lat_dir / "latents.npy", lat_dir / "seeds.npy"], summary)


def _write_synthetic(out: Path, name: str, items: list[SyntheticItem]) -> list[Path]:
    (out / name).mkdir(parents=True, exist_ok=True)
    rows, paths = [], []
    for it in items:
        sid = f"{name}-{it.rng_key[1]:05d}"
        rel = f"{name}/{sid}.lddv"
        write_video(out / rel, it.clip)
        paths.append(out / rel)
        rows.append(json.dumps({"path": rel, "label": it.label, "source_id": sid,
                                "source_image_id": it.source_image_id, "rng_key": list(it.rng_key),
                                "provenance": "synthetic"}, sort_keys=True))
    (out / f"{name}.jsonl").write_text("\n".join(rows) + "\n")
    return paths + [out / f"{name}.jsonl"]


def synthesize(cfg: RunConfig) -> dict:
    bundle = load_bundle(cfg)
    ds = load_clip_dataset(cfg)
    _, test = generative_split(cfg, ds)
    images = load_images(cfg)
    out = _ns(cfg, "synthesize")
    out.mkdir(parents=True, exist_ok=True)
    s = cfg.synthesis

    test_seeds = [(it.clip.first_frame, it.label, it.source_id) for it in test]
    eval_items = batch_synthesize(test_seeds, 1, bundle, derive_seed(cfg.seed, _EVAL_STREAM))
    div_seeds = test_seeds[: s.div_conditions]
    div_items = batch_synthesize(div_seeds, s.div_samples, bundle, derive_seed(cfg.seed, _DIV_STREAM))
    aug_items = batch_synthesize(images, s.per_image, bundle, derive_seed(cfg.seed, _AUGMENT_STREAM),
                                 balance=s.balance)
    artifacts = (_write_synthetic(out, "eval", eval_items) + _write_synthetic(out, "div", div_items)
                 + _write_synthetic(out, "augment", aug_items))
    counts = {str(c): sum(1 for it in aug_items if it.label == c) for c in (0, 1)}
    return _finish(cfg, "synthesize", out, artifacts,
                   [_ns(cfg, "train-diff") / "denoiser.ckpt", _ns(cfg, "train-ae") / "decoder.ckpt"],
                   {"eval": len(eval_items), "div": len(div_items), "augment": len(aug_items),
                    "augment_per_class": counts})


METRIC_FIELDS = ["metric", "extractor", "real_corpus", "generated_corpus", "value", "n_real", "n_generated"]


def evaluate(cfg: RunConfig) -> dict:
    eval_rows = load_synthetic_rows(cfg, "eval")
    div_rows = load_synthetic_rows(cfg, "div")
    ds = load_clip_dataset(cfg)
    train, test = generative_split(cfg, ds)
    out = _ns(cfg, "evaluate")
    out.mkdir(parents=True, exist_ok=True)

    clf = train_classifier(train, cfg.classifier, width=cfg.model.classifier_width)
    save_checkpoint(out / "extractor.ckpt", clf)
    real = test.clips
    by_source = {row["source_image_id"]: clip for row, clip in eval_rows}
    generated = [by_source[sid] for sid in test.ids]
    static = [static_repeat(c.first_frame, c.shape[0]) for c in real]
    half_a, half_b = (h.clips for h in split_halves(test))
    rows, summary = [], {}

    for role, mode in (("fvd_role", "clip"), ("dtfvd_role", "frame_diff")):
        ex = ClassifierFeatures(clf, mode)
        for gen_name, gen, ref, ref_name in (("synthetic", generated, real, "real_test"),
                                             ("static_repeat", static, real, "real_test"),
                                             ("real_test_half_b", half_b, half_a, "real_test_half_a")):
            value = corpus_distance(ref, gen, ex)
            rows.append({"metric": role, "extractor": ex.descriptor, "real_corpus": ref_name,
                         "generated_corpus": gen_name, "value": value, "n_real": len(ref),
                         "n_generated": len(gen)})
            summary[f"{role}/{gen_name}"] = value

    patch = RandomConvPatchFeatures(cfg.geometry.channels, seed=cfg.seed)
    for gen_name, gen in (("synthetic", generated), ("static_repeat", static)):
        value = float(np.mean([perceptual_patch_distance(a, b, patch) for a, b in zip(real, gen)]))
        rows.append({"metric": "lpips_role", "extractor": patch.descriptor, "real_corpus": "real_test",
                     "generated_corpus": gen_name, "value": value, "n_real": len(real),
                     "n_generated": len(gen)})
        summary[f"lpips_role/{gen_name}"] = value

    ex = ClassifierFeatures(clf, "clip")
    groups: dict[str, list[VideoClip]] = {}
    for row, clip in div_rows:
        groups.setdefault(row["source_image_id"], []).append(clip)
    div = float(np.mean([diversity_score(v, ex) for v in groups.values()]))
    rows.append({"metric": "div_role", "extractor": ex.descriptor, "real_corpus": "",
                 "generated_corpus": "div", "value": div, "n_real": 0, "n_generated": len(div_rows)})
    summary["div_role/synthetic"] = div
    summary["synthetic_beats_static"] = {
        role: summary[f"{role}/synthetic"] < summary[f"{role}/static_repeat"]
        for role in ("fvd_role", "dtfvd_role")
    }
    _write_csv(out / "metrics.csv", rows, METRIC_FIELDS)
    _write_json(out / "summary.json", summary)
    return _finish(cfg, "evaluate", out, [out / "metrics.csv", out / "summary.json", out / "extractor.ckpt"],
                   [_ns(cfg, "synthesize") / "eval.jsonl", _ns(cfg, "synthesize") / "div.jsonl"], summary)


CELL_FIELDS = ["condition", "fraction", "seed", "n_train", "n_test", "test_ids", "accuracy", "f1",
               "status", "error"]


def experiment(cfg: RunConfig) -> dict:
    synthetic = load_synthetic(cfg, "augment")
    real = load_clip_dataset(cfg)
    out = _ns(cfg, "experiment")
    out.mkdir(parents=True, exist_ok=True)
    report = augmentation_experiment(real, synthetic, cfg.experiment.fractions, cfg.experiment.seeds,
                                     cfg.classifier, width=cfg.model.classifier_width)
    _write_csv(out / "cells.csv", report.cells, CELL_FIELDS)
    summary = report.summary()
    smallest = min(cfg.experiment.fractions)
    gain = summary["real_plus_synthetic"][str(smallest)]["median_accuracy"] - \
        summary["real_only"][str(smallest)]["median_accuracy"]
    summary = {"medians": summary, "smallest_fraction": smallest,
               "median_gain_at_smallest_fraction": gain,
               "augmentation_not_worse": bool(gain >= 0)}
    _write_json(out / "summary.json", summary)
    return _finish(cfg, "experiment", out, [out / "cells.csv", out / "summary.json"],
                   [_ns(cfg, "synthesize") / "augment.jsonl", _ns(cfg, "gen-toy") / "manifest.jsonl"],
                   summary)


def report(cfg: RunConfig) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cells_path = _require(_ns(cfg, "experiment") / "cells.csv", "run experiment first")
    with open(cells_path) as fh:
        cells = list(csv.DictReader(fh))
    out = _ns(cfg, "report")
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for metric in ("accuracy", "f1"):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for cond in CONDITIONS:
            fracs = sorted({float(c["fraction"]) for c in cells if c["condition"] == cond})
            med = []
            for f in fracs:
                vals = [float(c[metric]) for c in cells if c["condition"] == cond
                        and float(c["fraction"]) == f and c["status"] == "ok"]
                med.append(float(np.median(vals)) if vals else math.nan)
            ax.plot(fracs, med, marker="o", label=cond.replace("_", " "))
        ax.set_xlabel("real training fraction")
        ax.set_ylabel(f"median {metric}")
        ax.legend()
        fig.tight_layout()
        path = out / f"{metric}_vs_fraction.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        artifacts.append(path)
    return _finish(cfg, "report", out, artifacts, [cells_path])


STAGES = {
    "gen-toy": gen_toy,
    "train-ae": train_ae,
    "encode-latents": encode_latents,
    "train-diff": train_diff,
    "synthesize": synthesize,
    "evaluate": evaluate,
    "experiment": experiment,
    "report": report,
}
