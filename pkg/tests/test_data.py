import numpy as np
import pytest

from daclora.data import (
    GeneratorParams,
    adversarial_accuracy,
    clean_accuracy,
    evaluate,
    make_dataset,
)
from daclora.io import CheckpointError, load_dataset, save_checkpoint, save_dataset
from daclora.model import build_model, encode_image
from daclora.trainer import TrainConfig, train


@pytest.fixture(scope="module")
def ds():
    return make_dataset(num_classes=4, shots=3, seed=1, side=8, test_per_class=10, pretrain_per_class=8)


def test_same_seed_same_bytes(ds):
    again = make_dataset(num_classes=4, shots=3, seed=1, side=8, test_per_class=10, pretrain_per_class=8)
    assert again.digest() == ds.digest()
    other = make_dataset(num_classes=4, shots=3, seed=2, side=8, test_per_class=10, pretrain_per_class=8)
    assert other.digest() != ds.digest()


def test_split_structure(ds):
    assert ds.d_pixels == 64 and ds.x_train.shape == (12, 64) and ds.x_test.shape == (40, 64)
    assert np.bincount(ds.y_train).tolist() == [3, 3, 3, 3]
    assert np.bincount(ds.y_test).tolist() == [10] * 4
    for x in (ds.x_train, ds.x_test, ds.x_pretrain):
        assert x.min() >= 0.0 and x.max() <= 1.0
    train_rows = {r.tobytes() for r in ds.x_train}
    assert not any(r.tobytes() in train_rows for r in ds.x_test)


def test_templates_shared_across_shot_counts():
    a = make_dataset(num_classes=3, shots=2, seed=4, side=6, difficulty=0.0, pretrain_per_class=2)
    b = make_dataset(num_classes=3, shots=5, seed=4, side=6, difficulty=0.0, pretrain_per_class=2)
    for c in range(3):
        np.testing.assert_array_equal(a.x_train[a.y_train == c][0], b.x_train[b.y_train == c][0])


def test_bad_arguments():
    with pytest.raises(ValueError):
        make_dataset(num_classes=1)
    with pytest.raises(ValueError):
        make_dataset(shots=0)


def test_zero_difficulty_is_easy():
    d = make_dataset(num_classes=4, shots=2, seed=0, side=8, difficulty=0.0, test_per_class=16, pretrain_per_class=1)
    m = build_model(d.d_pixels, 4, hidden=(32,), embed_dim=8, seed=0)
    train(m, d.x_train, d.y_train, TrainConfig(total_iters=100, lr=0.3, mode="clean", batch_size=8))
    assert clean_accuracy(m, d.x_test, d.y_test) >= 0.99


def test_generator_params_change_images():
    a = make_dataset(num_classes=2, shots=1, seed=0, side=4, pretrain_per_class=1)
    b = make_dataset(num_classes=2, shots=1, seed=0, side=4, pretrain_per_class=1,
                     params=GeneratorParams(shortcut_amp=0.0))
    assert a.digest() != b.digest()


# ---------------------------------------------------------------- accuracy


def test_oracle_class_embeddings_give_perfect_accuracy():
    d = make_dataset(num_classes=3, shots=2, seed=0, side=6, difficulty=0.0, test_per_class=5, pretrain_per_class=1)
    m = build_model(d.d_pixels, 3, hidden=(16,), embed_dim=6, seed=0)
    emb = encode_image(m, d.x_test).data
    m.class_embeddings.data = np.stack([emb[d.y_test == c].mean(axis=0) for c in range(3)])
    assert clean_accuracy(m, d.x_test, d.y_test) == 1.0


def test_random_labels_near_chance():
    C, n = 4, 2000
    rng = np.random.default_rng(0)
    m = build_model(16, C, hidden=(8,), embed_dim=4, seed=0)
    acc = clean_accuracy(m, rng.uniform(size=(n, 16)), rng.integers(0, C, size=n))
    sigma = np.sqrt(0.25 * 0.75 / n)
    assert abs(acc - 1 / C) <= 3 * sigma


def test_accuracy_repeatable_and_null_attack(ds):
    m = build_model(ds.d_pixels, 4, hidden=(8,), embed_dim=4, seed=0)
    a1, a2 = clean_accuracy(m, ds.x_test, ds.y_test), clean_accuracy(m, ds.x_test, ds.y_test)
    assert a1 == a2
    assert adversarial_accuracy(m, ds.x_test, ds.y_test, epsilon=0.0) == a1


def test_empty_split_rejected(ds):
    m = build_model(ds.d_pixels, 4, hidden=(8,), embed_dim=4)
    with pytest.raises(ValueError):
        clean_accuracy(m, np.zeros((0, 64)), [])
    with pytest.raises(ValueError):
        adversarial_accuracy(m, np.zeros((0, 64)), [])


def test_evaluate_report(ds):
    m = build_model(ds.d_pixels, 4, hidden=(8,), embed_dim=4, seed=1)
    rep = evaluate(m, ds.x_test, ds.y_test)
    assert len(rep.per_class_accuracy) == 4 and rep.epsilon == 8 / 255
    assert rep.clean_accuracy == pytest.approx(np.mean(rep.per_class_accuracy))
    assert 0.0 <= rep.adv_accuracy <= rep.clean_accuracy + 0.02


# ---------------------------------------------------------------- snapshots


def test_dataset_snapshot_round_trip(tmp_path, ds):
    path = save_dataset(ds, tmp_path / "d.npz", generator={"template_amp": 0.12})
    back = load_dataset(path)
    assert back.digest() == ds.digest()
    assert (back.num_classes, back.shots, back.side, back.seed) == (4, 3, 8, 1)


def test_snapshot_kinds_not_interchangeable(tmp_path, ds):
    ckpt = save_checkpoint(build_model(4, 2, hidden=(), embed_dim=2), tmp_path / "m.npz")
    with pytest.raises(CheckpointError, match="magic"):
        load_dataset(ckpt)
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nope.npz")
