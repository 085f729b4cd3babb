"""HTTP endpoints: request validation, run plumbing, and error mapping."""

import os
import sys

import pytest
from fastapi.testclient import TestClient

from protograph import __version__
from protograph.service.app import create_app
from protograph.trainer import TrainAbort

# "protograph.service.app" the attribute is the FastAPI instance (re-exported
# by the package); go through sys.modules for the module itself.
app_module = sys.modules["protograph.service.app"]


@pytest.fixture(scope="module")
def client():
    return TestClient(create_app(), raise_server_exceptions=True)


@pytest.fixture(scope="module")
def embeddings_csv(client, tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    resp = client.post("/synthetic", json={
        "config": {"synthetic": "20x8", "seed": 7, "out_dir": str(out)},
        "kind": "embeddings"})
    assert resp.status_code == 200
    return resp.json()["path"]


def train_body(embeddings_csv, out_dir, **extra):
    cfg = {"embeddings_csv": embeddings_csv, "seed": 7, "out_dir": str(out_dir),
           "epochs": 1, "episodes_per_epoch": 3, "val_episodes": 2,
           "pairs_per_kind": 10, "eval_episodes": 4}
    cfg.update(extra)
    return {"config": cfg}


class TestHealth:
    def test_reports_ok_and_version(self, client):
        resp = client.get("/health")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "version": __version__}


class TestTrain:
    def test_happy_path_writes_artifacts(self, client, embeddings_csv,
                                         tmp_path):
        resp = client.post("/train", json=train_body(embeddings_csv, tmp_path))
        assert resp.status_code == 200
        body = resp.json()
        assert body["summary"]["epochs"] == 1
        for path in body["files"].values():
            assert os.path.exists(path)

    def test_invalid_config_maps_to_422_code_2(self, client, embeddings_csv,
                                               tmp_path):
        resp = client.post("/train", json=train_body(
            embeddings_csv, tmp_path, lambda_loss=1.5))
        assert resp.status_code == 422
        detail = resp.json()["detail"]
        assert detail["code"] == 2
        assert "lambda_loss" in detail["error"]

    def test_dataset_error_maps_to_404_code_3(self, client, tmp_path):
        resp = client.post("/train", json={
            "config": {"images_dir": str(tmp_path / "missing"),
                       "out_dir": str(tmp_path)}})
        assert resp.status_code == 404
        detail = resp.json()["detail"]
        assert detail["code"] == 3

    def test_numeric_abort_maps_to_500_code_4(self, client, embeddings_csv,
                                              tmp_path, monkeypatch):
        def explode(cfg):
            raise TrainAbort("non-finite loss nan at epoch 1, episode 2")
        monkeypatch.setattr(app_module, "run_train", explode)
        resp = client.post("/train", json=train_body(embeddings_csv, tmp_path))
        assert resp.status_code == 500
        detail = resp.json()["detail"]
        assert detail["code"] == 4
        assert "episode 2" in detail["error"]

    def test_unknown_fields_are_rejected(self, client):
        resp = client.post("/train", json={"config": {"bogus_knob": 1}})
        assert resp.status_code == 422
        resp = client.post("/train", json={"config": {}, "extra": True})
        assert resp.status_code == 422


class TestEval:
    @pytest.fixture(scope="class")
    def checkpoint(self, client, embeddings_csv, tmp_path_factory):
        out = tmp_path_factory.mktemp("svc_train")
        resp = client.post("/train", json=train_body(embeddings_csv, out))
        assert resp.status_code == 200
        return resp.json()["files"]["checkpoint_best"], out

    def test_biometric_mode_summary(self, client, embeddings_csv, checkpoint,
                                    tmp_path):
        ckpt, _ = checkpoint
        resp = client.post("/eval", json={
            **train_body(embeddings_csv, tmp_path),
            "checkpoint": ckpt, "mode": "biometric"})
        assert resp.status_code == 200
        body = resp.json()
        for key in ("rank1", "rank5", "eer", "auc"):
            assert key in body["summary"]
        assert body["registry_classes"] >= 5

    def test_missing_checkpoint_maps_to_404(self, client, embeddings_csv,
                                            tmp_path):
        resp = client.post("/eval", json={
            **train_body(embeddings_csv, tmp_path),
            "checkpoint": str(tmp_path / "ghost.ckpt")})
        assert resp.status_code == 404
        assert resp.json()["detail"]["code"] == 3

    def test_unknown_mode_rejected_by_schema(self, client, embeddings_csv,
                                             tmp_path):
        resp = client.post("/eval", json={
            **train_body(embeddings_csv, tmp_path),
            "checkpoint": "x.ckpt", "mode": "party"})
        assert resp.status_code == 422


class TestSweepAndAblate:
    def test_duplicate_lambdas_map_to_422(self, client, embeddings_csv,
                                          tmp_path):
        resp = client.post("/sweep-lambda", json={
            **train_body(embeddings_csv, tmp_path), "lambdas": [0.2, 0.2]})
        assert resp.status_code == 422
        assert resp.json()["detail"]["code"] == 2

    def test_sweep_single_point(self, client, embeddings_csv, tmp_path):
        resp = client.post("/sweep-lambda", json={
            **train_body(embeddings_csv, tmp_path), "lambdas": [0.4]})
        assert resp.status_code == 200
        rows = resp.json()["rows"]
        assert len(rows) == 1
        assert rows[0]["lambda"] == 0.4
        assert 0.0 <= rows[0]["overall_acc"] <= 100.0

    def test_ablate_returns_paired_rows(self, client, embeddings_csv, tmp_path):
        resp = client.post("/ablate", json={
            **train_body(embeddings_csv, tmp_path),
            "variant": "no_prototype_node"})
        assert resp.status_code == 200
        rows = resp.json()["rows"]
        assert [r["variant"] for r in rows] == ["full", "no_prototype_node"]

    def test_unknown_variant_rejected_by_schema(self, client, embeddings_csv,
                                                tmp_path):
        resp = client.post("/ablate", json={
            **train_body(embeddings_csv, tmp_path), "variant": "no_lunch"})
        assert resp.status_code == 422


class TestSynthetic:
    def test_images_response_shape(self, client, tmp_path):
        resp = client.post("/synthetic", json={
            "config": {"synthetic": "3x2", "seed": 1, "out_dir": str(tmp_path)},
            "kind": "images"})
        assert resp.status_code == 200
        body = resp.json()
        assert body["classes"] == 3
        assert body["impressions_per_class"] == 2
        assert os.path.isdir(body["path"])

    def test_missing_size_maps_to_422(self, client, tmp_path):
        resp = client.post("/synthetic", json={
            "config": {"out_dir": str(tmp_path)}, "kind": "images"})
        assert resp.status_code == 422
        assert resp.json()["detail"]["code"] == 2
