import numpy as np
import pytest

from co4.data import DatasetSpec
from co4.errors import ConfigError
from co4.manifest import RunManifest, load_checkpoint, read_csv
from co4.model import Classifier, ModelConfig
from co4.train import ABLATION_COLUMNS, OptConfig, ablate, sweep, train

BLOBS = DatasetSpec(source="SYNTHETIC_BLOBS", train_limit=200, val_limit=100, image_size=8, patch_size=4,
                    channels=1, num_classes=4, blob_noise=1.0)
SMALL = dict(embed_dim=16, num_classes=4)


@pytest.mark.parametrize("cfg", [
    ModelConfig(model="co4", **SMALL),
    ModelConfig(model="co4", variant="NORMAL_INIT", readout="TOPK_ATTN", k=2, **SMALL),
    ModelConfig(model="vit", **SMALL),
])
def test_learns_separable_blobs(cfg):
    m = train(cfg, BLOBS, OptConfig(lr=3e-3, epochs=4, batch_size=32, warmup_steps=5))
    assert m.epochs[-1]["val_acc"] >= 0.95


def test_zero_lr_leaves_parameters(tmp_path):
    cfg = ModelConfig(model="co4", **SMALL)
    train(cfg, BLOBS, OptConfig(lr=0.0, epochs=1, batch_size=50), seed=3, out_dir=tmp_path)
    state, meta = load_checkpoint(tmp_path / "checkpoint")
    fresh = Classifier(cfg, BLOBS.num_tokens, BLOBS.token_dim, seed=3).state_dict()
    assert meta["step"] == 4
    assert state.keys() == fresh.keys()
    assert all(np.array_equal(state[k], fresh[k]) for k in fresh)


def test_runs_are_deterministic(tmp_path):
    cfg = ModelConfig(model="co4", **SMALL)
    opt = OptConfig(epochs=2, batch_size=32, flip=True)
    train(cfg, BLOBS, opt, seed=1, out_dir=tmp_path / "a")
    train(cfg, BLOBS, opt, seed=1, out_dir=tmp_path / "b")
    assert (tmp_path / "a/metrics.csv").read_bytes() == (tmp_path / "b/metrics.csv").read_bytes()
    a, b = RunManifest.read(tmp_path / "a/manifest.json"), RunManifest.read(tmp_path / "b/manifest.json")
    assert a.epochs[-1]["val_loss"] == b.epochs[-1]["val_loss"]


def test_models_see_identical_token_stream():
    opt = OptConfig(epochs=2, batch_size=32, flip=True, prefetch=2)
    a = train(ModelConfig(model="co4", **SMALL), BLOBS, opt, seed=5)
    b = train(ModelConfig(model="vit", **SMALL), BLOBS, opt, seed=5)
    c = train(ModelConfig(model="vit", **SMALL), BLOBS, opt, seed=6)
    assert a.notes["token_stream_sha256"] == b.notes["token_stream_sha256"]
    assert a.notes["token_stream_sha256"] != c.notes["token_stream_sha256"]


def test_checkpoint_roundtrip(tmp_path):
    cfg = ModelConfig(model="vit", **SMALL)
    train(cfg, BLOBS, OptConfig(epochs=1, batch_size=64), out_dir=tmp_path)
    state, _ = load_checkpoint(tmp_path / "checkpoint")
    model = Classifier(cfg, BLOBS.num_tokens, BLOBS.token_dim, seed=9)
    model.load_state_dict(state)
    assert all(np.array_equal(model.state_dict()[k], state[k]) for k in state)


def test_hybrid_block_list():
    cfg = ModelConfig(blocks=["co4", "vit"], variant="NORMAL_INIT", readout="TOPK_ATTN", k=2, **SMALL)
    model = Classifier(cfg, BLOBS.num_tokens, BLOBS.token_dim)
    logits, diags = model(np.zeros((3, BLOBS.num_tokens, BLOBS.token_dim)))
    assert logits.shape == (3, 4) and len(diags) == 1


def test_sweep_and_ablation(tmp_path):
    opt = OptConfig(epochs=1, batch_size=64)
    rows = sweep(ModelConfig(model="co4", **SMALL), "embed_dim", [8, 16], BLOBS, opt, [0])
    assert [r["value"] for r in rows] == [8, 16]
    rows = ablate(["canonical", "v_passthrough"], BLOBS, opt, [0], ModelConfig(model="co4", **SMALL),
                  out_csv=tmp_path / "ab.csv")
    assert len(read_csv(tmp_path / "ab.csv", ABLATION_COLUMNS)) == 2


def test_config_errors():
    with pytest.raises(ConfigError):
        ablate(["bogus"], BLOBS, OptConfig(), [0])
    with pytest.raises(ConfigError):
        sweep(ModelConfig(), "nope", [1], BLOBS, OptConfig(), [0])
    with pytest.raises(ConfigError):
        ModelConfig(model="cnn")
    with pytest.raises(ConfigError):
        OptConfig(epochs=0)
