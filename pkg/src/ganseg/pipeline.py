"""Experiment stages over the artifact layout

    <root>/<config-hash>/{data, gans/<m>, synth, seg/<config>/<repeat>, eval, report}

Every artifact records the config hash; a stage refuses upstream artifacts
written under a different hash. Completed units are skipped on rerun.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import normalize_image
from .config import ExperimentConfig, dump_config
from .dataio.container import read_dataset, write_dataset
from .dataio.ingest import iter_subject_dirs
from .dataio.phantom import generate_phantom
from .dataio.preprocess import build_dataset, split_validation
from .dataio.types import SliceDataset
from .evaluation import (
    DiceReport,
    TableRow,
    aggregate_runs,
    compare_configurations,
    comparisons_json,
    emit_table,
    read_results_csv,
    write_results_csv,
)
from .figures import save_prediction_panel, save_sample_grid
from .gan.ensemble import EnsembleSpec, generate_ensemble_dataset, member_seed
from .gan.train import GanCheckpoint, sample_synthetic, train_gan
from .seeding import derive_seed
from .segmenter.repeats import evaluate_test, run_repeats
from .segmenter.train import SegCheckpoint, classes_to_labels, predict_classes

logger = logging.getLogger(__name__)

OUTPUT_ENV = "GANSEG_OUT"


class StageValidationError(ValueError):
    """Bad configuration, missing inputs, or refused overwrite."""


class ProvenanceError(StageValidationError):
    pass


class StageRuntimeError(RuntimeError):
    """A training or generation unit failed."""


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


@dataclass
class Workspace:
    config: ExperimentConfig
    root: Path

    @classmethod
    def create(cls, config: ExperimentConfig, output_root: str | os.PathLike | None = None) -> "Workspace":
        base = output_root or os.environ.get(OUTPUT_ENV) or config.output_dir
        ws = cls(config, Path(base) / config.config_hash())
        ws.root.mkdir(parents=True, exist_ok=True)
        dump_config(config, ws.root / "config.json")
        return ws

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def provenance(self, stage: str, **extra) -> dict:
        return {"config_hash": self.config_hash, "seed": self.config.seed, "stage": stage, **extra}

    def path(self, *parts) -> Path:
        return self.root.joinpath(*map(str, parts))

    def check(self, found: dict, what: str) -> None:
        got = found.get("config_hash")
        if got != self.config_hash:
            raise ProvenanceError(f"{what} was produced under config hash {got}, current config is {self.config_hash}")


# ---------------------------------------------------------------- data


def _split_indices(ws: Workspace, train: SliceDataset) -> dict:
    cfg = ws.config.train
    tr, val = split_validation(train.subject_ids, cfg.val_fraction, derive_seed(ws.config.seed, "val-split"),
                               cfg.val_split_mode)
    if len(val) == 0 or len(tr) == 0:
        raise StageValidationError("the validation split left an empty train or validation set")
    return {"train": tr.tolist(), "val": val.tolist(), **ws.provenance("data")}


def _write_data(ws: Workspace, train: SliceDataset, test: SliceDataset) -> None:
    if len(train) == 0 or len(test) == 0:
        raise StageValidationError(f"preprocessing kept {len(train)} train and {len(test)} test slices")
    write_dataset(train, ws.path("data", "train.gsds"))
    write_dataset(test, ws.path("data", "test.gsds"))
    _write_json(ws.path("data", "split.json"), _split_indices(ws, train))


def _refuse_existing(ws: Workspace, force: bool) -> None:
    if ws.path("data", "train.gsds").exists() and not force:
        raise StageValidationError(f"dataset already exists in {ws.path('data')}; pass --force to overwrite")


def stage_phantom(ws: Workspace, force: bool = False) -> None:
    cfg = ws.config
    if cfg.dataset.source != "phantom":
        raise StageValidationError("dataset.source is not 'phantom'")
    _refuse_existing(ws, force)
    p, pre = cfg.dataset.phantom, cfg.preprocess
    seed = derive_seed(cfg.seed, "phantom")
    subjects = generate_phantom(seed, p.n_train + p.n_test, tuple(p.dims))
    extra = {"provenance": ws.provenance("phantom")}
    train = build_dataset(subjects[: p.n_train], pre.fraction, pre.threshold, pad_size=pre.pad_size, seed=seed,
                          extra={**extra, "split": "train"})
    test = build_dataset(subjects[p.n_train :], pre.fraction, pre.threshold, pad_size=pre.pad_size, seed=seed,
                         extra={**extra, "split": "test"})
    _write_data(ws, train, test)


def stage_preprocess(ws: Workspace, input_dir=None, test_dir=None, force: bool = False) -> None:
    cfg = ws.config
    input_dir = input_dir or cfg.dataset.train_dir
    test_dir = test_dir or cfg.dataset.test_dir
    if not input_dir or not test_dir:
        raise StageValidationError("preprocess needs a training and a test input directory")
    _refuse_existing(ws, force)
    pre = cfg.preprocess
    extra = {"provenance": ws.provenance("preprocess")}
    try:
        train = build_dataset(iter_subject_dirs(input_dir, "train"), pre.fraction, pre.threshold,
                              pad_size=pre.pad_size, extra={**extra, "split": "train", "input": str(input_dir)})
        test = build_dataset(iter_subject_dirs(test_dir, "test"), pre.fraction, pre.threshold,
                             pad_size=pre.pad_size, extra={**extra, "split": "test", "input": str(test_dir)})
    except (FileNotFoundError, ValueError) as exc:
        raise StageValidationError(str(exc)) from exc
    _write_data(ws, train, test)


@dataclass
class Data:
    train: SliceDataset  # training portion of the real data (validation subjects removed)
    val: SliceDataset
    test: SliceDataset


def load_data(ws: Workspace) -> Data:
    paths = [ws.path("data", n) for n in ("train.gsds", "test.gsds", "split.json")]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise StageValidationError(f"missing dataset artifacts {missing}; run 'phantom' or 'preprocess' first")
    full = read_dataset(paths[0])
    test = read_dataset(paths[1])
    split = json.loads(paths[2].read_text())
    for what, found in (("training data", full.manifest.get("provenance", {})),
                        ("test data", test.manifest.get("provenance", {})), ("split", split)):
        ws.check(found, what)
    return Data(full.subset(split["train"]), full.subset(split["val"]), test)


# ---------------------------------------------------------------- GANs


def _gan_done(ws: Workspace, member: int) -> bool:
    meta = ws.path("gans", member, "checkpoint.json")
    if not meta.exists() or not ws.path("gans", member, "params.bin").exists():
        return False
    data = json.loads(meta.read_text())
    ws.check(data, f"GAN member {member}")
    return True


def _train_member(args):
    ws, train, member = args
    cfg = ws.config.gan.model_copy(update={"seed": member_seed(ws.config.seed, member)})
    directory = ws.path("gans", member)
    logger.info("training GAN member %d (seed %d)", member, cfg.seed)
    ckpt = train_gan(train, cfg, member=member, checkpoint_dir=directory)
    ckpt.save(directory, ws.provenance("train-gan", member=member))
    logger.info("GAN member %d done after %d images", member, ckpt.images_seen)
    return member


def stage_train_gan(ws: Workspace, workers: int = 1, force: bool = False, dump_samples: int = 0) -> list[int]:
    """Train members 0..max(K)-1; smaller ensembles reuse the leading members."""
    data = load_data(ws)
    size = data.train.spatial_shape[0]
    if size != ws.config.gan.target_resolution:
        raise StageValidationError(f"GAN target resolution {ws.config.gan.target_resolution} differs from the "
                                   f"{size}x{size} slices; synthetic and real images must share a size")
    n_members = max(ws.config.ensemble.k_values)
    todo = [m for m in range(n_members) if force or not _gan_done(ws, m)]
    failed = {}
    jobs = [(ws, data.train, m) for m in todo]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            futures = {m: pool.submit(_train_member, job) for m, job in zip(todo, jobs)}
            for m, fut in futures.items():
                try:
                    fut.result()
                except Exception as exc:  # recorded per member
                    failed[m] = repr(exc)
    else:
        for m, job in zip(todo, jobs):
            try:
                _train_member(job)
            except Exception as exc:  # recorded per member
                logger.error("GAN member %d failed: %s", m, exc)
                failed[m] = repr(exc)
    if dump_samples:
        for m in range(n_members):
            if m not in failed:
                ckpt = GanCheckpoint.load(ws.path("gans", m))
                s = sample_synthetic(ckpt, dump_samples, derive_seed(ws.config.seed, "dump", m))
                save_sample_grid(s.images, s.annotations, ws.path("gans", m, "samples.png"))
    if failed:
        raise StageRuntimeError(f"GAN members failed: {failed}")
    return todo


# ---------------------------------------------------------------- synthetic data


def synth_path(ws: Workspace, k: int) -> Path:
    return ws.path("synth", f"k{k}.gsds")


def stage_gen_synth(ws: Workspace, force: bool = False) -> list[int]:
    done = []
    for k in sorted(ws.config.ensemble.k_values):
        path = synth_path(ws, k)
        if path.exists() and not force:
            ws.check(read_dataset(path).manifest.get("provenance", {}), f"synthetic set K={k}")
            continue
        ckpts = []
        for m in range(k):
            if not _gan_done(ws, m):
                raise StageValidationError(f"GAN member {m} is missing; run 'train-gan' first")
            ckpts.append(GanCheckpoint.load(ws.path("gans", m)))
        spec = EnsembleSpec.from_master(ws.config.seed, k, ws.config.ensemble.budget)
        ds = generate_ensemble_dataset(ckpts, spec)
        ds.manifest["provenance"] = ws.provenance("gen-synth", k=k)
        write_dataset(ds, path)
        logger.info("wrote synthetic set K=%d (%d slices)", k, len(ds))
        done.append(k)
    return done


def load_synth(ws: Workspace, k: int) -> SliceDataset:
    path = synth_path(ws, k)
    if not path.exists():
        raise StageValidationError(f"synthetic set for K={k} is missing; run 'gen-synth' first")
    ds = read_dataset(path)
    ws.check(ds.manifest.get("provenance", {}), f"synthetic set K={k}")
    return ds


# ---------------------------------------------------------------- segmenters


def _selected(ws: Workspace, data_mode: str | None, ks: list[int] | None):
    rows = ws.config.seg_configs()
    if data_mode is not None:
        prefix = {"real": "real", "synth": "synth-", "mixed": "mixed-"}[data_mode]
        rows = [r for r in rows if r[0].startswith(prefix)]
    if ks is not None:
        rows = [r for r in rows if r[2] in ks or r[2] == 0]
    return rows


def seg_master_seed(ws: Workspace) -> int:
    # shared by every configuration so repeat r is seed-paired across rows
    return derive_seed(ws.config.seed, "seg")


def stage_train_seg(ws: Workspace, workers: int = 1, data_mode: str | None = None,
                    ks: list[int] | None = None) -> dict:
    data = load_data(ws)
    summary = {}
    failures = []
    for config_id, uses_real, k in _selected(ws, data_mode, ks):
        synth = load_synth(ws, k) if k else None
        if synth is not None and synth.spatial_shape != data.test.spatial_shape:
            raise StageValidationError(f"synthetic slices {synth.spatial_shape} differ from test slices "
                                       f"{data.test.spatial_shape}")
        outcomes = run_repeats(data.train if uses_real else None, synth, data.val, data.test, ws.config.unet,
                               ws.config.train, master_seed=seg_master_seed(ws),
                               augment_config=ws.config.augment, out_dir=ws.path("seg", config_id),
                               provenance=ws.provenance("train-seg", config_id=config_id), workers=workers)
        summary[config_id] = [o.status for o in outcomes]
        failures += [f"{config_id}/{o.repeat}: {o.error}" for o in outcomes if o.status != "ok"]
    if failures:
        raise StageRuntimeError("segmenter repeats failed: " + "; ".join(failures))
    return summary


# ---------------------------------------------------------------- evaluation and report


def _repeat_dirs(ws: Workspace, config_id: str) -> list[Path]:
    return [ws.path("seg", config_id, r) for r in range(ws.config.train.repeats)]


def stage_evaluate(ws: Workspace, dump_overlays: int | None = None) -> list[dict]:
    data = load_data(ws)
    rows = []
    reports_json = {}
    models = {}
    for config_id, uses_real, k in ws.config.seg_configs():
        reports_json[config_id] = []
        for r, d in enumerate(_repeat_dirs(ws, config_id)):
            meta_path = d / "checkpoint.json"
            if not meta_path.exists():
                raise StageValidationError(f"no trained segmenter in {d}; run 'train-seg' first")
            ws.check(json.loads(meta_path.read_text()), f"segmenter {config_id}/{r}")
            ckpt = SegCheckpoint.load(d)
            model = ckpt.build_model()
            report = evaluate_test(model, data.test, run_id=str(r), seed=json.loads(meta_path.read_text())["seed"])
            rows += report.rows(config_id, uses_real, k)
            reports_json[config_id].append(report.to_json())
            if r == 0:
                models[config_id] = model
    ws.path("eval").mkdir(parents=True, exist_ok=True)
    write_results_csv(rows, ws.path("eval", "results.csv"))
    _write_json(ws.path("eval", "provenance.json"), ws.provenance("evaluate"))
    n_overlays = ws.config.evaluation.dump_overlays if dump_overlays is None else dump_overlays
    if n_overlays:
        _dump_overlays(ws, data.test, models, n_overlays)
    return rows


def _dump_overlays(ws: Workspace, test: SliceDataset, models: dict, n: int) -> None:
    rng = np.random.default_rng(derive_seed(ws.config.seed, "overlay"))
    picks = np.sort(rng.choice(len(test), size=min(n, len(test)), replace=False))
    for i in picks:
        image = normalize_image(test.images[i])[None]
        preds = {cid: classes_to_labels(predict_classes(m, image)[0]) for cid, m in models.items()}
        name = f"{test.subject_ids[i]}_z{int(test.z[i]):03d}"
        # FLAIR as background
        save_prediction_panel(test.images[i][3], test.annotations[i], preds, ws.path("eval", "overlays", f"{name}.png"),
                              ws.path("eval", "overlays", "columns.txt"))


def _reports_from_rows(rows: list[dict]) -> dict[str, list[DiceReport]]:
    grouped: dict[str, dict[str, dict]] = {}
    for row in rows:
        grouped.setdefault(row["config_id"], {}).setdefault(row["run_id"], {})[row["subject_id"]] = row
    out = {}
    for cid, runs in grouped.items():
        out[cid] = []
        for run_id in sorted(runs, key=int):
            subjects = sorted(runs[run_id])
            scores = {c: [runs[run_id][s][f"dice_{c}"] for s in subjects] for c in ("et", "ed", "ncr")}
            out[cid].append(DiceReport(run_id, subjects, scores))
    return out


def comparison_pairs(ws: Workspace) -> list[tuple[str, str]]:
    """Within each data mode, every pair of rows ordered by increasing K."""
    rows = ws.config.seg_configs()
    pairs = []
    for uses_real in (True, False):
        group = sorted((r for r in rows if r[1] == uses_real), key=lambda r: r[2])
        pairs += [(a[0], b[0]) for i, a in enumerate(group) for b in group[i + 1 :]]
    return pairs


def stage_report(ws: Workspace) -> tuple[str, str]:
    prov_path = ws.path("eval", "provenance.json")
    results_path = ws.path("eval", "results.csv")
    if not prov_path.exists() or not results_path.exists():
        raise StageValidationError("no evaluation results; run 'evaluate' first")
    ws.check(json.loads(prov_path.read_text()), "evaluation results")
    reports = _reports_from_rows(read_results_csv(results_path))
    table_rows = []
    for config_id, uses_real, k in ws.config.seg_configs():
        if config_id not in reports:
            raise StageValidationError(f"evaluation results lack configuration {config_id}")
        table_rows.append(TableRow(uses_real, k, aggregate_runs([r.class_means() for r in reports[config_id]])))
    csv_text, md_text = emit_table(table_rows)
    ev = ws.config.evaluation
    comparisons = compare_configurations(reports, comparison_pairs(ws), unit=ev.pairing,
                                         alternative=ev.alternative, n_permutations=ev.n_permutations,
                                         seed=derive_seed(ws.config.seed, "sign-flip"))
    out = ws.path("report")
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.csv").write_text(csv_text)
    (out / "table.md").write_text(md_text)
    (out / "comparisons.json").write_text(comparisons_json(comparisons))
    _write_json(out / "provenance.json", ws.provenance("report"))
    return csv_text, md_text


def run_all(ws: Workspace, workers: int = 1, dump_samples: int = 0) -> None:
    if not ws.path("data", "train.gsds").exists():
        if ws.config.dataset.source == "phantom":
            stage_phantom(ws)
        else:
            stage_preprocess(ws)
    stage_train_gan(ws, workers, dump_samples=dump_samples)
    stage_gen_synth(ws)
    stage_train_seg(ws, workers)
    stage_evaluate(ws)
    stage_report(ws)
