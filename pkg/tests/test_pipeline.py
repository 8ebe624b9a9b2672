import json
import threading

import numpy as np
import pytest

from conftest import tiny_config
from encodenet.config import load_config
from encodenet.datasets import make_synthetic, write_idx
from encodenet.errors import AssemblyError, ConfigError, PrerequisiteError
from encodenet.model_ir import count_parameters, parse_model_spec
from encodenet.network import Network
from encodenet.pipeline import (
    ABLATION_ROWS,
    Pipeline,
    RunStore,
    assemble_encodenet,
    cae_spec_for,
    file_digest,
    load_ablation,
    parameter_digest,
    run_ablation,
)
from encodenet.specs import builtin_spec_names, load_builtin_spec


@pytest.mark.parametrize("name", builtin_spec_names())
def test_parameter_parity_for_every_builtin(name):
    spec = load_builtin_spec(name)
    cae_spec, n = cae_spec_for(spec)
    cae = Network(cae_spec, seed=0)
    for head_init, baseline in (("scratch", None), ("from_baseline", Network(spec, seed=1))):
        model = assemble_encodenet(cae, spec, head_init, baseline)
        assert model.net.parameter_count() == count_parameters(spec)
        assert model.encoder_spec.layers == spec.layers[:n]
        assert model.check_frozen()


def test_encoder_comes_from_cae_and_head_from_baseline():
    spec = load_builtin_spec("vgg8_mini")
    cae_spec, n = cae_spec_for(spec)
    cae, base = Network(cae_spec, seed=3), Network(spec, seed=4)
    model = assemble_encodenet(cae, spec, "from_baseline", base)
    for name, value in model.net.params.items():
        src = cae.params[name] if model.net.layer_of(name) < n else base.params[name]
        np.testing.assert_array_equal(value, src)
    scratch = assemble_encodenet(cae, spec, "scratch", seed=0)
    head = [k for k in scratch.net.params if scratch.net.layer_of(k) >= n]
    assert any(not np.array_equal(scratch.net.params[k], base.params[k]) for k in head)


def test_assembly_rejects_mismatched_encoder():
    spec = load_builtin_spec("vgg8_mini")
    other, _ = cae_spec_for(load_builtin_spec("fmnist_mini"))
    with pytest.raises(AssemblyError):
        assemble_encodenet(Network(other, seed=0), spec)
    cae, _ = cae_spec_for(spec)
    with pytest.raises(AssemblyError):
        assemble_encodenet(Network(cae, seed=0), spec, "from_baseline")
    with pytest.raises(AssemblyError):
        assemble_encodenet(Network(cae, seed=0), spec, "random")


def test_parameter_digest_tracks_prefix_only():
    net = Network(load_builtin_spec("vgg8_mini"), seed=0)
    d = parameter_digest(net, 16)
    last = max(net.params, key=net.layer_of)
    net.params[last] += 1
    assert parameter_digest(net, 16) == d
    first = min(net.params, key=net.layer_of)
    net.params[first][...] = np.nextafter(net.params[first], np.inf)
    assert parameter_digest(net, 16) != d


def test_stage_chain_and_frozen_encoder(tmp_path, tiny_cfg):
    pipe = Pipeline(tiny_cfg, tmp_path)
    head = pipe.run("head", 0)
    asm = pipe.run("assemble", 0)
    assert head.extra["encoder_bit_identical"]
    assert head.record.extra["encoder_digest_before"] == head.record.extra["encoder_digest_after"]
    assert parameter_digest(head.net, asm.extra["split_index"]) == asm.extra["encoder_digest"]
    assert asm.extra["param_count"] == asm.extra["baseline_param_count"]
    cluster = pipe.run("cluster", 0)
    assert cluster.extra["sse_monotone"] and cluster.extra["converged"]
    rank = pipe.run("rank", 0)
    check = rank.extra["pair_check"]
    assert check["class_violations"] == check["minimality_violations"] == 0
    assert check["pairs"] == len(pipe.data(0).train)


def test_unclustered_mode_uses_one_cluster(tmp_path):
    cfg = tiny_config("pipeline.target_mode=representative_unclustered")
    res = Pipeline(cfg, tmp_path).run("cluster", 0)
    assert set(res.extra["k_per_class"].values()) == {1}
    assert set(np.asarray(res.extra["assignments"]).tolist()) == {0}


def test_same_image_skips_clustering(tmp_path):
    cfg = tiny_config("pipeline.target_mode=same_image")
    pipe = Pipeline(cfg, tmp_path)
    pipe.run("cae", 0)
    stages = {e["stage"] for e in pipe.store.read_manifest()["stages"].values()}
    assert stages == {"baseline", "cae"}


def test_missing_prerequisite_raises(tmp_path, tiny_cfg):
    pipe = Pipeline(tiny_cfg, tmp_path, auto=False)
    with pytest.raises(PrerequisiteError):
        pipe.run("head", 0)
    pipe.run("baseline", 0)
    with pytest.raises(PrerequisiteError):
        pipe.run("rank", 0)


def test_rerun_is_idempotent_and_force_recomputes(tmp_path, tiny_cfg):
    Pipeline(tiny_cfg, tmp_path).run("cae", 0)
    manifest = (tmp_path / "manifest.json").read_text()
    log = []
    again = Pipeline(tiny_cfg, tmp_path, log=log.append).run("cae", 0)
    assert log == [] and (tmp_path / "manifest.json").read_text() == manifest
    assert again.record is not None and again.net is not None
    forced = Pipeline(tiny_cfg, tmp_path, force={"cae"}, log=log.append).run("cae", 0)
    assert len(log) == 1 and log[0].startswith("[cae]")
    assert forced.record.to_dict()["eval_metric"] == again.record.to_dict()["eval_metric"]


def test_corrupted_artifact_invalidates_stage(tmp_path, tiny_cfg):
    pipe = Pipeline(tiny_cfg, tmp_path)
    res = pipe.run("baseline", 0)
    ckpt = res.dir / "baseline.ckpt"
    ckpt.write_bytes(ckpt.read_bytes() + b"x")
    assert RunStore(tmp_path).lookup("baseline", res.key) is None


def test_determinism_across_run_dirs(tmp_path, tiny_cfg):
    a = Pipeline(tiny_cfg, tmp_path / "a").run("head", 0)
    b = Pipeline(tiny_cfg, tmp_path / "b").run("head", 0)
    assert a.key == b.key
    da, db = a.record.to_dict(), b.record.to_dict()
    da.pop("wall_seconds"), db.pop("wall_seconds")
    assert da == db
    assert file_digest(a.dir / "head.ckpt") == file_digest(b.dir / "head.ckpt")
    ra = Pipeline(tiny_cfg, tmp_path / "a").run("rank", 0)
    rb = Pipeline(tiny_cfg, tmp_path / "b").run("rank", 0)
    assert (ra.dir / "pairs.csv").read_bytes() == (rb.dir / "pairs.csv").read_bytes()


def test_manifest_records_artifact_hashes(tmp_path, tiny_cfg):
    Pipeline(tiny_cfg, tmp_path).run("rank", 0)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    for entry in doc["stages"].values():
        for art in entry["artifacts"].values():
            assert file_digest(tmp_path / art["path"]) == art["sha256"]


def test_concurrent_commits_are_not_lost(tmp_path):
    store = RunStore(tmp_path)

    def work(i):
        d = store.stage_dir("x", str(i))
        d.mkdir(parents=True)
        (d / "a.txt").write_text(str(i))
        store.commit("x", str(i), i, {"a": d / "a.txt"})

    threads = [threading.Thread(target=work, args=(i,)) for i in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(store.read_manifest()["stages"]) == 16


def test_data_shape_mismatch_is_config_error(tmp_path):
    cfg = tiny_config("model.spec=fmnist_mini")
    with pytest.raises(ConfigError):
        Pipeline(cfg, tmp_path).run("baseline", 0)
    with pytest.raises(ConfigError):
        Pipeline(tiny_config("model.spec=missing.spec"), tmp_path)


def test_single_seed_ablation_medians(tmp_path, tiny_cfg):
    table = run_ablation(tiny_cfg, tmp_path)
    assert table.failures == []
    assert set(table.rows) == set(ABLATION_ROWS)
    head = Pipeline(tiny_cfg, tmp_path).run("head", 0)
    assert table.rows["representative_clustered"]["median_accuracy"] == head.record.final_metric
    assert load_ablation(tmp_path).rows == json.loads(json.dumps(table.rows))
    with pytest.raises(PrerequisiteError):
        load_ablation(tmp_path / "nothing")


BLOB_SPEC = """input 1 8 8
conv 8 3 1 same
relu
maxpool
flatten
dense 3
softmax
"""


def _blob_images(rng, n_per_class):
    centers = [(1, 1), (1, 6), (6, 3)]
    images, labels = [], []
    for c, (r, col) in enumerate(centers):
        for _ in range(n_per_class):
            img = rng.uniform(0, 0.1, size=(1, 8, 8))
            img[0, max(r - 1, 0):r + 2, max(col - 1, 0):col + 2] = rng.uniform(0.8, 1.0)
            images.append(img)
            labels.append(c)
    return np.array(images, dtype=np.float32), np.array(labels)


def test_idx_source_pipeline(tmp_path):
    rng = np.random.default_rng(0)
    for part, n in (("train", 30), ("test", 20)):
        x, y = _blob_images(rng, n)
        write_idx(x, y, tmp_path / f"{part}-images.idx", tmp_path / f"{part}-labels.idx")
    (tmp_path / "blob.spec").write_text(BLOB_SPEC)
    (tmp_path / "c.toml").write_text(
        """version = 1
[model]
spec = "blob.spec"
[data]
source = "idx"
train_images = "train-images.idx"
train_labels = "train-labels.idx"
test_images = "test-images.idx"
test_labels = "test-labels.idx"
train_per_class = 0
test_per_class = 0
[cluster]
k = 2
[pipeline]
seeds = [0]
[train.baseline]
epochs = 20
batch_size = 16
[train.cae]
epochs = 5
[train.head]
epochs = 5
"""
    )
    cfg = load_config(tmp_path / "c.toml")
    pipe = Pipeline(cfg, tmp_path / "run")
    assert pipe.run("baseline", 0).record.final_metric >= 0.95
    head = pipe.run("head", 0)
    assert head.extra["encoder_bit_identical"]


def test_same_image_cae_memorizes_small_set(tmp_path):
    rng = np.random.default_rng(1)
    x, y = _blob_images(rng, 17)
    write_idx(x[:50], y[:50], tmp_path / "i.idx", tmp_path / "l.idx")
    (tmp_path / "blob.spec").write_text(BLOB_SPEC)
    (tmp_path / "c.toml").write_text(
        """version = 1
[model]
spec = "blob.spec"
[data]
source = "idx"
train_images = "i.idx"
train_labels = "l.idx"
test_images = "i.idx"
test_labels = "l.idx"
train_per_class = 0
test_per_class = 0
[pipeline]
target_mode = "same_image"
holdout_fraction = 0.0
seeds = [0]
[train.baseline]
epochs = 5
[train.cae]
epochs = 400
batch_size = 50
lr = 0.01
"""
    )
    cae = Pipeline(load_config(tmp_path / "c.toml"), tmp_path / "run").run("cae", 0)
    assert cae.record.final_metric < 1e-3
