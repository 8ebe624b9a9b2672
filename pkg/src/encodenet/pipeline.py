"""End-to-end stages: baseline, clustering, ranking, CAE, assembly, head, ablation.

Every stage writes its artifacts to ``<run dir>/stages/<stage>-<key>/``
where ``key`` hashes the stage's configuration, seed, and upstream keys.
A manifest (``manifest.json``, file-locked) lists each completed stage
with artifact paths and SHA-256 digests. Re-running a completed stage
loads it from disk unless forced.
"""

from __future__ import annotations

import hashlib
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from filelock import FileLock

from .clustering import (
    cluster_all_classes,
    elbow_from_curve,
    embed_features,
    kmeans,
    read_assignments_csv,
    write_assignments_csv,
    write_elbow_csv,
)
from .config import TARGET_MODES, fingerprint
from .datasets import DataSplit, load_cifar10_bin, load_idx, make_synthetic, subsample
from .entropy import (
    RepresentativeMap,
    build_conversion_pairs,
    identity_pairs,
    read_pairs_csv,
    read_records_csv,
    score_dataset,
    select_representatives,
    verify_pairs,
    write_pairs_csv,
    write_records_csv,
)
from .errors import AssemblyError, ConfigError, EncodeNetError, PrerequisiteError
from .model_ir import autoencoder_spec, count_parameters, parse_model_spec, split_model, synthesize_decoder
from .network import Network
from .specs import builtin_spec_names, builtin_spec_text
from .trainer import RunRecord, checkpoint_load, checkpoint_save, train_autoencoder, train_classifier

STAGES = ("baseline", "cluster", "rank", "cae", "assemble", "head")
HEAD_SEED_OFFSET = 1000
ABLATION_ROWS = ("same_image", "baseline", "representative_unclustered", "representative_clustered")


# -- inputs ------------------------------------------------------------------------------


def spec_text(cfg):
    """Spec source: a builtin name, or a path relative to the config file."""
    if cfg.spec in builtin_spec_names():
        return builtin_spec_text(cfg.spec)
    path = cfg.resolve_path(cfg.spec)
    if not path.is_file():
        raise ConfigError(f"model spec {cfg.spec!r} is neither a builtin ({', '.join(builtin_spec_names())}) "
                          f"nor a file")
    return path.read_text(encoding="utf-8")


def data_seed(cfg, seed):
    return seed if cfg.data.seed is None else cfg.data.seed


def load_data(cfg, seed):
    d = cfg.data
    ds = data_seed(cfg, seed)
    if d.source == "synthetic":
        return make_synthetic(d.train_per_class, d.test_per_class, num_classes=d.num_classes, modes=d.modes,
                              noise=d.noise, seed=ds)
    if d.source == "idx":
        train = load_idx(cfg.resolve_path(d.train_images), cfg.resolve_path(d.train_labels))
        test = load_idx(cfg.resolve_path(d.test_images), cfg.resolve_path(d.test_labels),
                        num_classes=train.num_classes)
    else:
        train = load_cifar10_bin([cfg.resolve_path(p) for p in d.train_files])
        test = load_cifar10_bin([cfg.resolve_path(p) for p in d.test_files])
    if d.train_per_class:
        train = subsample(train, d.train_per_class, ds)
    if d.test_per_class:
        test = subsample(test, d.test_per_class, ds)
    return DataSplit(train, test, ds)


def parameter_digest(net, stop):
    """SHA-256 over every parameter and buffer of layers below ``stop``."""
    h = hashlib.sha256()
    for store in (net.params, net.buffers):
        for name in sorted(store):
            if net.layer_of(name) < stop:
                h.update(name.encode())
                h.update(np.ascontiguousarray(store[name]).tobytes())
    return h.hexdigest()


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- run directory -----------------------------------------------------------------------


class RunStore:
    """Run directory with a locked manifest of completed stages."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        self.lock = FileLock(str(self.manifest_path) + ".lock")

    def stage_dir(self, stage, key):
        return self.root / "stages" / f"{stage}-{key}"

    def read_manifest(self):
        if not self.manifest_path.exists():
            return {"version": 1, "stages": {}}
        return json.loads(self.manifest_path.read_text())

    def _write_manifest(self, doc):
        tmp = self.manifest_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.manifest_path)

    def lookup(self, stage, key):
        """The manifest entry if the stage completed and its artifacts are intact."""
        with self.lock:
            entry = self.read_manifest()["stages"].get(f"{stage}-{key}")
        if entry is None:
            return None
        for art in entry["artifacts"].values():
            path = self.root / art["path"]
            if not path.exists() or file_digest(path) != art["sha256"]:
                return None
        return entry

    def commit(self, stage, key, seed, artifacts, info=None):
        entry = {
            "stage": stage,
            "key": key,
            "seed": seed,
            "dir": str(self.stage_dir(stage, key).relative_to(self.root)),
            "artifacts": {
                name: {"path": str(Path(p).relative_to(self.root)), "sha256": file_digest(p)}
                for name, p in sorted(artifacts.items())
            },
            "info": info or {},
        }
        with self.lock:
            doc = self.read_manifest()
            doc["stages"][f"{stage}-{key}"] = entry
            self._write_manifest(doc)
        return entry

    def record_extra(self, name, value):
        with self.lock:
            doc = self.read_manifest()
            doc[name] = value
            self._write_manifest(doc)


# -- stage results -----------------------------------------------------------------------


@dataclass
class StageResult:
    stage: str
    key: str
    seed: int
    dir: Path
    record: RunRecord | None = None
    net: Network | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class EncodeNetModel:
    """Assembled classifier: frozen encoder from a CAE, trainable head."""

    net: Network
    split_index: int
    head_init: str
    cae_run: str
    encoder_digest: str

    @property
    def encoder_spec(self):
        return split_model(self.net.spec).encoder

    @property
    def head_spec(self):
        return split_model(self.net.spec).head

    def check_frozen(self):
        return parameter_digest(self.net, self.split_index) == self.encoder_digest


def cae_spec_for(baseline_spec):
    split = split_model(baseline_spec)
    decoder = synthesize_decoder(split.encoder, baseline_spec.input_shape)
    return autoencoder_spec(split.encoder, decoder), split.split_index


def assemble_encodenet(cae, baseline_spec, head_init="scratch", baseline=None, seed=0, cae_run=""):
    """Baseline-shaped network whose feature extractor comes from ``cae``.

    ``head_init="scratch"`` draws a fresh head; ``"from_baseline"`` copies
    the trained baseline's head (``baseline`` is then required).
    """
    split = split_model(baseline_spec)
    n = split.split_index
    cae_layers = cae.spec.layers[:n]
    if tuple(cae.spec.input_shape) != tuple(baseline_spec.input_shape) or cae_layers != split.encoder.layers:
        raise AssemblyError(f"CAE encoder ({cae.spec.name}) does not match the feature extractor of "
                            f"{baseline_spec.name}")
    if head_init == "scratch":
        net = Network(baseline_spec, seed=seed + HEAD_SEED_OFFSET)
    elif head_init == "from_baseline":
        if baseline is None:
            raise AssemblyError("head_init='from_baseline' needs the trained baseline")
        net = baseline.copy()
    else:
        raise AssemblyError(f"unknown head_init {head_init!r}")
    net.load_state(cae.state(), prefix_layers=n)
    if count_parameters(net.spec) != count_parameters(baseline_spec) or net.parameter_count() != count_parameters(
        baseline_spec
    ):
        raise AssemblyError("assembled model does not match the baseline parameter count")
    return EncodeNetModel(net, n, head_init, cae_run, parameter_digest(net, n))


# -- pipeline ----------------------------------------------------------------------------


class Pipeline:
    """Stage runner for one config over one run directory.

    With ``auto=True`` missing upstream stages are computed on demand;
    otherwise a missing prerequisite raises :class:`PrerequisiteError`.
    ``force`` names stages to recompute even when already complete.
    """

    def __init__(self, cfg, run_dir, auto=True, force=(), log=None, fresh=None):
        self.cfg = cfg
        self.store = RunStore(run_dir)
        self.auto = auto
        self.force = set(force)
        # (stage, key) pairs already recomputed; shared between pipelines so a
        # forced stage is redone once, not once per consumer.
        self.fresh = set() if fresh is None else fresh
        self.log = log or (lambda msg: None)
        self.spec = parse_model_spec(spec_text(cfg))
        self._data = {}
        self._cache = {}

    # keys ----------------------------------------------------------------------------

    def data(self, seed):
        if seed not in self._data:
            split = load_data(self.cfg, seed)
            if split.train.image_shape != self.spec.input_shape:
                raise ConfigError(f"data images are {split.train.image_shape} but {self.spec.name} expects "
                                  f"{self.spec.input_shape}")
            self._data[seed] = split
        return self._data[seed]

    def key(self, stage, seed):
        cfg = self.cfg
        if stage == "baseline":
            return fingerprint("baseline", spec_text(cfg), cfg.data, data_seed(cfg, seed), cfg.baseline, seed)
        if stage == "cluster":
            return fingerprint("cluster", self.key("baseline", seed), cfg.effective_cluster, seed)
        if stage == "rank":
            return fingerprint("rank", self.key("cluster", seed))
        if stage == "cae":
            source = "identity" if cfg.target_mode == "same_image" else self.key("rank", seed)
            return fingerprint("cae", self.key("baseline", seed), source, cfg.cae, cfg.holdout_fraction, seed)
        if stage == "assemble":
            return fingerprint("assemble", self.key("cae", seed), cfg.head_init, seed)
        if stage == "head":
            return fingerprint("head", self.key("assemble", seed), cfg.head, seed)
        raise ValueError(f"unknown stage {stage!r}")

    # dispatch ------------------------------------------------------------------------

    def run(self, stage, seed):
        """Run (or load) ``stage`` for ``seed``, computing it if it never completed."""
        return self._get(stage, seed, requested=True)

    def _get(self, stage, seed, requested=False):
        key = self.key(stage, seed)
        forced = stage in self.force and (stage, key) not in self.fresh
        cached = self._cache.get((stage, key))
        if cached is not None and not forced:
            return cached
        entry = None if forced else self.store.lookup(stage, key)
        if entry is not None:
            result = self._load(stage, key, seed)
        elif requested or self.auto:
            self.log(f"[{stage}] seed={seed} key={key}")
            result = getattr(self, f"_run_{stage}")(key, seed)
            self.fresh.add((stage, key))
        else:
            raise PrerequisiteError(f"stage '{stage}' (seed {seed}) has not been run; run it first")
        self._cache[(stage, key)] = result
        return result

    def _load(self, stage, key, seed):
        d = self.store.stage_dir(stage, key)
        result = StageResult(stage, key, seed, d)
        record = d / f"{stage}.json"
        if record.exists():
            result.record = RunRecord.load(record)
        ckpt = d / f"{stage}.ckpt"
        if ckpt.exists():
            result.net, _ = checkpoint_load(ckpt)
        info = d / "info.json"
        if info.exists():
            result.extra = json.loads(info.read_text())
        if stage == "cluster":
            _, result.extra["assignments"] = read_assignments_csv(d / "assignments.csv")
        if stage == "rank":
            data = self.data(seed).train
            result.extra["records"] = read_records_csv(d / "entropy.csv")
            result.extra["reps"] = RepresentativeMap.load(d / "representatives.json")
            result.extra["pairs"] = read_pairs_csv(d / "pairs.csv", data)
        return result

    def _commit(self, result, artifacts, info):
        d = result.dir
        (d / "info.json").write_text(json.dumps(info, indent=2, sort_keys=True, default=_plain) + "\n")
        artifacts = {**artifacts, "info": d / "info.json"}
        self.store.commit(result.stage, result.key, result.seed, artifacts, info)
        result.extra.update(info)
        return result

    def _start(self, stage, key, seed):
        d = self.store.stage_dir(stage, key)
        d.mkdir(parents=True, exist_ok=True)
        return StageResult(stage, key, seed, d)

    # stages --------------------------------------------------------------------------

    def _run_baseline(self, key, seed):
        res = self._start("baseline", key, seed)
        net, rec = train_classifier(self.spec, self.data(seed), self.cfg.baseline.replace(seed=seed),
                                    stage="baseline")
        res.net, res.record = net, rec
        js, cs = rec.save(res.dir, "baseline")
        ck = checkpoint_save(net, res.dir / "baseline.ckpt", {"stage": "baseline", "seed": seed})
        return self._commit(res, {"record": js, "metrics": cs, "checkpoint": ck},
                            {"accuracy": rec.final_metric, "param_count": rec.param_count})

    def _run_cluster(self, key, seed):
        res = self._start("cluster", key, seed)
        base = self._get("baseline", seed)
        data = self.data(seed).train
        cc = self.cfg.effective_cluster
        began = time.perf_counter()
        feats = embed_features(base.net, data.images)
        clusters = cluster_all_classes(feats, data.labels, k=cc.k, mode=cc.k_mode, k_range=cc.k_range, seed=seed,
                                       max_iters=cc.max_iters, num_classes=data.num_classes)
        write_assignments_csv(clusters, res.dir / "assignments.csv")
        # Elbow curve over the class-summed SSE, always emitted for inspection.
        ks = [k for k in cc.k_range if k <= int(data.class_counts().min())]
        sse = np.zeros(len(ks))
        per_class = []
        for c in range(data.num_classes):
            xc = feats.vectors[data.labels == c]
            for j, k in enumerate(ks):
                s = kmeans(xc, k, seed=seed, max_iters=cc.max_iters).sse
                sse[j] += s
                per_class.append((c, k, s))
        write_elbow_csv(ks, sse, res.dir / "elbow.csv")
        with open(res.dir / "elbow_per_class.csv", "w") as fh:
            fh.write("class,k,sse\n")
            fh.writelines(f"{c},{k},{s!r}\n" for c, k, s in per_class)
        elbow_k = elbow_from_curve(ks, sse).k if len(ks) >= 3 else None
        info = {
            "k_mode": cc.k_mode,
            "k_per_class": {str(c): m.k for c, m in clusters.models.items()},
            "flagged_classes": clusters.flagged(),
            "sse_monotone": all(np.all(np.diff(m.sse_trace) <= 1e-9 * max(1.0, m.sse_trace[0]))
                                for m in clusters.models.values()),
            "converged": all(m.converged for m in clusters.models.values()),
            "cells": len(clusters.cells),
            "embedding": feats.source,
            "elbow_k": elbow_k,
            "wall_seconds": time.perf_counter() - began,
        }
        res.extra["assignments"] = clusters.assignments
        return self._commit(res, {"assignments": res.dir / "assignments.csv", "elbow": res.dir / "elbow.csv",
                                  "elbow_per_class": res.dir / "elbow_per_class.csv"}, info)

    def _run_rank(self, key, seed):
        res = self._start("rank", key, seed)
        base = self._get("baseline", seed)
        clusters = self._get("cluster", seed)
        data = self.data(seed).train
        records = score_dataset(base.net, data, clusters.extra["assignments"])
        reps = select_representatives(records)
        pairs = build_conversion_pairs(data, clusters.extra["assignments"], reps)
        check = verify_pairs(pairs, records, reps)
        if check["class_violations"] or check["minimality_violations"] or check["target_mismatches"]:
            raise AssemblyError(f"conversion pairs failed verification: {check}")
        write_records_csv(records, res.dir / "entropy.csv")
        reps.save(res.dir / "representatives.json")
        write_pairs_csv(pairs, res.dir / "pairs.csv")
        res.extra.update(records=records, reps=reps, pairs=pairs)
        info = {"pair_check": check, "representatives": len(reps.cells())}
        return self._commit(res, {"entropy": res.dir / "entropy.csv", "representatives": res.dir / "representatives.json",
                                  "pairs": res.dir / "pairs.csv"}, info)

    def _pairs(self, seed):
        data = self.data(seed).train
        if self.cfg.target_mode == "same_image":
            return identity_pairs(data)
        return self._get("rank", seed).extra["pairs"]

    def _run_cae(self, key, seed):
        res = self._start("cae", key, seed)
        base = self._get("baseline", seed)
        pairs = self._pairs(seed)
        labels = pairs.data.labels
        violations = int((labels[pairs.inputs] != labels[pairs.targets]).sum())
        if violations:
            raise AssemblyError(f"{violations} conversion pairs cross class boundaries")
        spec, n = cae_spec_for(self.spec)
        init = Network(spec, seed=seed)
        # The encoder starts from the trained baseline's feature extractor.
        init.load_state(base.net.state(), prefix_layers=n)
        net, rec = train_autoencoder(init, pairs, self.cfg.cae.replace(seed=seed),
                                     holdout_fraction=self.cfg.holdout_fraction, stage="cae")
        rec.extra["target_mode"] = self.cfg.target_mode
        res.net, res.record = net, rec
        js, cs = rec.save(res.dir, "cae")
        ck = checkpoint_save(net, res.dir / "cae.ckpt", {"stage": "cae", "seed": seed})
        info = {"target_mode": self.cfg.target_mode, "reconstruction_mse": rec.final_metric, "split_index": n,
                "class_violations": violations}
        return self._commit(res, {"record": js, "metrics": cs, "checkpoint": ck}, info)

    def _run_assemble(self, key, seed):
        res = self._start("assemble", key, seed)
        cae = self._get("cae", seed)
        base = self._get("baseline", seed) if self.cfg.head_init == "from_baseline" else None
        model = assemble_encodenet(cae.net, self.spec, self.cfg.head_init, base.net if base else None, seed,
                                   cae_run=f"cae-{cae.key}")
        res.net = model.net
        ck = checkpoint_save(model.net, res.dir / "assemble.ckpt", {"stage": "assemble", "seed": seed})
        info = {
            "split_index": model.split_index,
            "head_init": model.head_init,
            "cae_run": model.cae_run,
            "encoder_digest": model.encoder_digest,
            "param_count": model.net.parameter_count(),
            "baseline_param_count": count_parameters(self.spec),
            "encoder_params": count_parameters(model.encoder_spec),
            "head_params": count_parameters(model.head_spec),
        }
        res.extra["model"] = model
        return self._commit(res, {"checkpoint": ck}, info)

    def _run_head(self, key, seed):
        res = self._start("head", key, seed)
        asm = self._get("assemble", seed)
        n = asm.extra["split_index"]
        before = parameter_digest(asm.net, n)
        if before != asm.extra["encoder_digest"]:
            raise AssemblyError("assembled encoder does not match its recorded digest")
        net, rec = train_classifier(asm.net, self.data(seed), self.cfg.head.replace(seed=seed, frozen_prefix=n),
                                    stage="head")
        after = parameter_digest(net, n)
        if after != before:
            raise AssemblyError("encoder parameters changed during head training")
        rec.extra.update(encoder_digest_before=before, encoder_digest_after=after, head_init=self.cfg.head_init,
                         target_mode=self.cfg.target_mode)
        res.net, res.record = net, rec
        js, cs = rec.save(res.dir, "head")
        ck = checkpoint_save(net, res.dir / "head.ckpt", {"stage": "head", "seed": seed})
        info = {"accuracy": rec.final_metric, "encoder_bit_identical": True, "encoder_digest": after,
                "target_mode": self.cfg.target_mode, "head_init": self.cfg.head_init}
        return self._commit(res, {"record": js, "metrics": cs, "checkpoint": ck}, info)


def _plain(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


# -- ablation ----------------------------------------------------------------------------


@dataclass
class AblationTable:
    rows: dict
    reconstruction: dict
    failures: list
    seeds: tuple
    ordering_ok: bool
    sources: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def _median(values):
    return statistics.median(values) if values else None


def run_ablation(cfg, run_dir, seeds=None, modes=TARGET_MODES, log=None, force=()):
    """Baseline plus one EncodeNet per target mode, for every seed.

    Returns an :class:`AblationTable` of per-row median accuracy (and CAE
    held-out reconstruction MSE per mode). A failing (seed, mode) run is
    recorded and left out of the medians.
    """
    seeds = tuple(cfg.seeds if seeds is None else seeds)
    per_row = {row: {} for row in ("baseline",) + tuple(modes)}
    recon = {mode: {} for mode in modes}
    sources = {row: {} for row in per_row}
    failures = []
    fresh = set()
    for seed in seeds:
        base_pipe = Pipeline(cfg, run_dir, auto=True, force=force, log=log, fresh=fresh)
        try:
            base = base_pipe.run("baseline", seed)
        except EncodeNetError as exc:
            failures.append({"seed": seed, "row": "baseline", "error": f"{type(exc).__name__}: {exc}"})
            continue
        per_row["baseline"][seed] = base.record.final_metric
        sources["baseline"][seed] = str(base.dir / "baseline.json")
        for mode in modes:
            pipe = Pipeline(cfg.with_target_mode(mode), run_dir, auto=True, force=force, log=log, fresh=fresh)
            pipe._data = base_pipe._data
            pipe._cache.update(base_pipe._cache)
            try:
                head = pipe.run("head", seed)
                cae = pipe._get("cae", seed)
            except EncodeNetError as exc:
                failures.append({"seed": seed, "row": mode, "error": f"{type(exc).__name__}: {exc}"})
                continue
            per_row[mode][seed] = head.record.final_metric
            recon[mode][seed] = cae.record.final_metric
            sources[mode][seed] = str(head.dir / "head.json")
    rows = {
        row: {"median_accuracy": _median(list(vals.values())), "per_seed": {str(s): v for s, v in vals.items()}}
        for row, vals in per_row.items()
    }
    reconstruction = {
        mode: {"median_mse": _median(list(vals.values())), "per_seed": {str(s): v for s, v in vals.items()}}
        for mode, vals in recon.items()
    }
    medians = [rows.get(r, {}).get("median_accuracy") for r in ABLATION_ROWS]
    ordering_ok = None not in medians and all(a < b for a, b in zip(medians, medians[1:]))
    table = AblationTable(rows, reconstruction, failures, seeds, ordering_ok,
                          {row: {str(s): p for s, p in v.items()} for row, v in sources.items()})
    write_ablation(table, Path(run_dir) / "ablation")
    RunStore(run_dir).record_extra("ablation", {"table": "ablation/ablation.json", "seeds": list(seeds)})
    return table


def write_ablation(table, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "ablation.json").write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    return directory / "ablation.json"


def load_ablation(run_dir):
    path = Path(run_dir) / "ablation" / "ablation.json"
    if not path.exists():
        raise PrerequisiteError(f"no ablation results in {run_dir}; run 'ablate' first")
    doc = json.loads(path.read_text())
    return AblationTable(**doc)
