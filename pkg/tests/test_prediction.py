import numpy as np
import pytest
import torch
from torch import nn

from lesionfuse.catalog import load_manifest
from lesionfuse.dihedral import ELEMENTS, apply
from lesionfuse.errors import InferenceError, MissingArtifactError, SchemaError
from lesionfuse.prediction import predict_dataset, tta_predict
from lesionfuse.preprocess import PreprocessConfig, materialize_cache
from lesionfuse.tables import PredictionStore, PredictionTable, read_table, write_table

from conftest import make_manifest_csv


class ConstantLogits(nn.Module):
    def forward(self, x):
        return torch.zeros(x.shape[0], 3)


class CornerLogits(nn.Module):
    """Orientation-sensitive by construction: logits read specific pixels."""

    def forward(self, x):
        return torch.stack([x[:, 0, 0, 0], x[:, 1, 0, -1], x[:, 2, -1, -1]], dim=1)


class ConvStub(nn.Module):
    def __init__(self):
        super().__init__()
        torch.manual_seed(0)
        self.conv = nn.Conv2d(3, 8, kernel_size=3, padding=1)
        self.out = nn.Linear(8, 3)

    def forward(self, x):
        feats = torch.relu(self.conv(x)).mean(dim=(2, 3))
        return self.out(feats)


class NaNLogits(nn.Module):
    def forward(self, x):
        return torch.full((x.shape[0], 3), float("nan"))


class CountingStub(ConstantLogits):
    def __init__(self):
        super().__init__()
        self.calls = 0

    def forward(self, x):
        self.calls += 1
        return super().forward(x)


def test_constant_logits_give_uniform_vector():
    x = np.random.default_rng(0).normal(size=(3, 8, 8)).astype(np.float32)
    p = tta_predict(ConstantLogits(), x)
    assert np.allclose(p, [1 / 3, 1 / 3, 1 / 3], atol=1e-7)


def test_tta_invariant_under_every_dihedral_transform():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 8, 8)).astype(np.float32)
    model = ConvStub()
    base = tta_predict(model, x)
    for g in ELEMENTS:
        moved = tta_predict(model, apply(g, x))
        assert np.allclose(moved, base, atol=1e-5)


def test_tta_output_is_a_simplex_vector():
    rng = np.random.default_rng(2)
    model = ConvStub()
    for _ in range(20):
        p = tta_predict(model, rng.normal(size=(3, 8, 8)).astype(np.float32) * 5)
        assert abs(p.sum() - 1.0) < 1e-6
        assert (p >= 0).all() and (p <= 1).all()


def test_softmax_applied_before_averaging():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 8, 8)).astype(np.float32) * 4
    model = CornerLogits()
    got = tta_predict(model, x)

    variants = np.stack([apply(g, x) for g in ELEMENTS]).astype(np.float32)
    with torch.no_grad():
        logits = model(torch.from_numpy(variants)).numpy()
    probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    mean_of_softmax = probs.mean(axis=0)
    softmax_of_mean = np.exp(logits.mean(0)) / np.exp(logits.mean(0)).sum()

    assert np.abs(mean_of_softmax - softmax_of_mean).max() > 1e-3
    assert np.allclose(got, mean_of_softmax, atol=1e-6)
    assert not np.allclose(got, softmax_of_mean, atol=1e-3)


def test_non_finite_logits_raise_inference_error():
    x = np.zeros((3, 8, 8), dtype=np.float32)
    with pytest.raises(InferenceError, match="non-finite"):
        tta_predict(NaNLogits(), x)


# --- prediction tables ------------------------------------------------------


def test_table_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    raw = rng.dirichlet((1.0, 1.0, 1.0), size=5)
    table = PredictionTable("runA", {f"img{i}": raw[i] for i in range(5)})
    path = write_table(table, tmp_path / "runA.csv")
    again = read_table(path)
    assert again.source_id == "runA"
    assert again.image_ids == table.image_ids
    for image_id in table.image_ids:
        assert np.allclose(again.rows[image_id], table.rows[image_id], atol=1e-9)


def test_table_rows_are_sorted_and_9_significant_digits(tmp_path):
    table = PredictionTable("t", {"b": [0.123456789123, 0.2, 0.676543210877],
                                  "a": [1.0, 0.0, 0.0]})
    lines = write_table(table, tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "image_id,p_mm,p_sk,p_bn"
    assert lines[1] == "a,1,0,0"
    assert lines[2] == "b,0.123456789,0.2,0.676543211"


def test_table_rejects_non_simplex_rows():
    with pytest.raises(ValueError, match="sum"):
        PredictionTable("t", {"a": [0.5, 0.5, 0.5]})
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        PredictionTable("t", {"a": [1.5, -0.5, 0.0]})


def test_read_table_rejects_duplicates(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("image_id,p_mm,p_sk,p_bn\na,1,0,0\na,0,1,0\n")
    with pytest.raises(SchemaError, match="duplicate"):
        read_table(path)


# --- dataset prediction -------------------------------------------------------


@pytest.fixture(scope="module")
def cached_tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("pred")
    rng = np.random.default_rng(5)
    rows = []
    from conftest import random_png
    for i, (label, split) in enumerate([("MM", "test"), ("SK", "test"), ("BN", "test"),
                                        ("MM", "train")]):
        image_id = f"im{i}"
        random_png(root / f"{image_id}.png", rng, height=32, width=40)
        rows.append(f"{image_id},{image_id}.png,{label},{split}")
    manifest = load_manifest(make_manifest_csv(root / "m.csv", sorted(rows)))
    materialize_cache(manifest, PreprocessConfig(target_resolution=64), root / "cache")
    return manifest, root / "cache", root


def test_predict_dataset_covers_test_split(cached_tiny, tmp_path):
    manifest, cache_root, _ = cached_tiny
    store = PredictionStore(tmp_path / "preds")
    table = predict_dataset(ConvStub(), manifest, 64, cache_root,
                            source_id="stub_run", store=store)
    assert len(table) == 3
    assert table.image_ids == ["im0", "im1", "im2"]
    assert store.exists("stub_run")


def test_predict_dataset_is_deterministic(cached_tiny, tmp_path):
    manifest, cache_root, _ = cached_tiny
    store = PredictionStore(tmp_path / "preds")
    model = ConvStub()
    predict_dataset(model, manifest, 64, cache_root, source_id="a", store=store)
    predict_dataset(model, manifest, 64, cache_root, source_id="b", store=store)
    a = store.path_for("a").read_text().splitlines()[1:]
    b = store.path_for("b").read_text().splitlines()[1:]
    assert a == b


def test_predict_empty_split_writes_header_only(tmp_path):
    manifest = load_manifest(make_manifest_csv(tmp_path / "m.csv",
                                               ["x,x.png,MM,train"]))
    store = PredictionStore(tmp_path / "preds")
    table = predict_dataset(ConstantLogits(), manifest, 64, tmp_path / "cache",
                            source_id="empty", store=store)
    assert len(table) == 0
    assert store.path_for("empty").read_text() == "image_id,p_mm,p_sk,p_bn\n"


def test_missing_cache_enumerated_before_any_inference(cached_tiny, tmp_path):
    manifest, _, _ = cached_tiny
    stub = CountingStub()
    with pytest.raises(MissingArtifactError, match="3 test entries"):
        predict_dataset(stub, manifest, 64, tmp_path / "nonexistent-cache",
                        source_id="never")
    assert stub.calls == 0
