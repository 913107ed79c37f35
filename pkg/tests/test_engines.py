"""Forward surrogate, tandem gradients, inference, and closed-loop scoring."""

import numpy as np
import pytest

from rispa import dataio, neural
from rispa.engines import (
    FseModel,
    closed_loop_eval,
    design_batch,
    encode_phases,
    fse_layer_dims,
    fse_predict,
    ide_layer_dims,
    infer_design,
    load_fse,
    load_ide,
    save_fse,
    save_ide,
    soft_hard_gap_rms,
    tandem_forward,
    tandem_loss_and_grads,
    train_fse,
    train_ide,
)
from rispa.quantizer import QuantizerConfig
from rispa.scene import default_scene


def test_layer_dims_match_contract():
    assert fse_layer_dims(20, 3) == [40, 100, 100, 3]
    assert ide_layer_dims(20, 3) == [3, 50, 50, 20]


# ---------------------------------------------------------------------------
# phase encoding
# ---------------------------------------------------------------------------

def test_encode_phases_examples():
    enc = encode_phases(np.zeros(20))
    assert enc.shape == (40,)
    assert np.allclose(enc[0::2], 1.0) and np.allclose(enc[1::2], 0.0)

    angles = np.zeros(20)
    angles[0] = 90.0
    enc = encode_phases(angles)
    assert enc[0] == pytest.approx(0.0, abs=1e-12)
    assert enc[1] == pytest.approx(1.0)

    enc = encode_phases(np.array([225.0]))
    assert enc == pytest.approx([-0.70711, -0.70711], abs=1e-5)


def test_encode_phases_batched():
    rng = np.random.default_rng(0)
    angles = rng.uniform(0, 360, size=(5, 20))
    batched = encode_phases(angles)
    assert batched.shape == (5, 40)
    for i in range(5):
        assert np.array_equal(batched[i], encode_phases(angles[i]))


# ---------------------------------------------------------------------------
# tandem gradient flow
# ---------------------------------------------------------------------------

def test_tandem_gradients_match_finite_differences():
    # tiny configuration: 2 columns, 2 probes, 3-dim target input
    ide = neural.init_mlp([3, 4, 4, 2], seed=1)
    fse = neural.init_mlp([4, 5, 2], seed=2)
    qcfg = QuantizerConfig()
    rng = np.random.default_rng(3)
    x = rng.uniform(0.0, 0.6, size=(3, 3))
    y = rng.uniform(0.0, 0.6, size=(3, 2))

    loss, grads = tandem_loss_and_grads(ide, fse, qcfg, x, y)
    assert np.isfinite(loss)

    def loss_now():
        return neural.mse(tandem_forward(ide, fse, qcfg, x), y)

    h = 1e-5
    gi = 0
    for arr in neural.mlp_params(ide):
        analytic = grads[gi]
        gi += 1
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = loss_now()
            arr[idx] = old - h
            dn = loss_now()
            arr[idx] = old
            fd = (up - dn) / (2 * h)
            denom = max(1e-7, abs(fd), abs(analytic[idx]))
            assert abs(fd - analytic[idx]) / denom < 1e-4


# ---------------------------------------------------------------------------
# surrogate training and prediction
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_corpus():
    scene = default_scene()
    scene.noise_sigma = 0.0
    return scene, dataio.collect(scene, count=24, seed=5)


def test_train_fse_memorizes_tiny_dataset(tiny_corpus):
    _, ds = tiny_corpus
    train = ds.subset(np.arange(20))
    val = ds.subset(np.arange(20, 24))
    model, report = train_fse(train, val, epochs=1500, learning_rate=3e-3,
                              batch_size=20, seed=6)
    assert report.train_losses[-1] < 1e-4
    assert model.i_max == ds.i_max
    assert model.mlp.layer_dims == [40, 100, 100, 3]


def test_fse_predict_contract(tiny_corpus):
    _, ds = tiny_corpus
    model = FseModel(mlp=neural.init_mlp([40, 100, 100, 3], seed=0),
                     column_count=20, i_max=1.0)
    a = fse_predict(model, ds.profiles[0])
    b = fse_predict(model, ds.profiles[0])
    assert np.array_equal(a, b)
    assert a.shape == (3,)
    batch = fse_predict(model, ds.profiles[:5])
    assert batch.shape == (5, 3)
    with pytest.raises(ValueError, match="20 states"):
        fse_predict(model, np.zeros(19, dtype=int))


@pytest.fixture(scope="module")
def tiny_tandem(tiny_corpus):
    scene, ds = tiny_corpus
    train = ds.subset(np.arange(20))
    val = ds.subset(np.arange(20, 24))
    fse, _ = train_fse(train, val, epochs=300, learning_rate=3e-3,
                       batch_size=20, seed=6)
    targets = dataio.generate_targets(40, seed=7)
    t_train = targets.subset(np.arange(32))
    t_val = targets.subset(np.arange(32, 40))
    ide, report = train_ide(fse, t_train, t_val, epochs=50,
                            learning_rate=2e-3, batch_size=16, seed=8)
    return scene, fse, ide, report, targets


def test_train_ide_freezes_surrogate(tiny_tandem):
    _, fse, ide, report, _ = tiny_tandem
    assert ide.fse_digest == fse.digest()
    assert len(report.train_losses) == 50
    assert len(report.val_losses) == 50
    assert ide.mlp.layer_dims == [3, 50, 50, 20]


def test_train_ide_loss_decreases(tiny_tandem):
    _, _, _, report, _ = tiny_tandem
    assert report.train_losses[-1] < report.train_losses[0]


def test_infer_design_contract(tiny_tandem):
    _, _, ide, _, _ = tiny_tandem
    a = infer_design(ide, [0.1, 0.2, 0.3])
    b = infer_design(ide, [0.1, 0.2, 0.3])
    assert np.array_equal(a, b)
    assert a.shape == (20,)
    assert a.dtype.kind == "i"
    assert np.all((a >= 0) & (a < 8))

    with pytest.warns(UserWarning, match="outside trained range"):
        infer_design(ide, [0.9, 0.0, 0.0])
    with pytest.raises(ValueError, match="non-finite"):
        infer_design(ide, [np.nan, 0.0, 0.0])


def test_design_batch_matches_single(tiny_tandem):
    _, _, ide, _, targets = tiny_tandem
    batch = design_batch(ide, targets.targets[:4])
    for i in range(4):
        assert np.array_equal(batch[i], infer_design(ide, targets.targets[i]))


def test_closed_loop_eval_shapes_and_threads(tiny_tandem):
    scene, fse, ide, _, targets = tiny_tandem
    sub = targets.subset(np.arange(10))
    res = closed_loop_eval(ide, fse, scene, sub)
    assert res.table.shape == (10, 9)
    assert res.mse_measured.shape == (3,)
    assert np.all(res.mse_measured >= 0.0)
    assert np.array_equal(res.table[:, :3], sub.targets)
    res4 = closed_loop_eval(ide, fse, scene, sub, threads=4)
    assert np.array_equal(res.table, res4.table)


def test_closed_loop_eval_rejects_empty_targets(tiny_tandem):
    scene, fse, ide, _, _ = tiny_tandem
    with pytest.raises(ValueError):
        dataio.TargetDataset(targets=np.empty((0, 3)))
    empty = dataio.generate_targets(1, seed=0)
    empty.targets = np.empty((0, 3))  # bypass constructor validation
    with pytest.raises(ValueError, match="empty"):
        closed_loop_eval(ide, fse, scene, empty)


def test_soft_hard_gap_is_finite(tiny_tandem):
    _, fse, ide, _, targets = tiny_tandem
    gap = soft_hard_gap_rms(ide, fse, targets)
    assert np.isfinite(gap) and gap >= 0.0


def test_mismatched_surrogate_warns(tiny_tandem):
    scene, fse, ide, _, targets = tiny_tandem
    other = FseModel(mlp=neural.init_mlp([40, 100, 100, 3], seed=99),
                     column_count=20, i_max=fse.i_max)
    with pytest.warns(UserWarning, match="different surrogate"):
        closed_loop_eval(ide, other, scene, targets.subset(np.arange(3)))


# ---------------------------------------------------------------------------
# model bundle files
# ---------------------------------------------------------------------------

def test_fse_file_round_trip(tmp_path, tiny_tandem):
    _, fse, _, _, _ = tiny_tandem
    path = tmp_path / "fse.json"
    save_fse(fse, path)
    loaded = load_fse(path)
    assert loaded.digest() == fse.digest()
    assert loaded.i_max == fse.i_max
    assert loaded.column_count == fse.column_count
    assert loaded.scene_digest == fse.scene_digest


def test_ide_file_round_trip(tmp_path, tiny_tandem):
    _, _, ide, _, _ = tiny_tandem
    path = tmp_path / "ide.json"
    save_ide(ide, path)
    loaded = load_ide(path)
    assert neural.param_digest(loaded.mlp) == neural.param_digest(ide.mlp)
    assert loaded.fse_digest == ide.fse_digest
    assert loaded.quantizer == ide.quantizer
    assert (loaded.target_low, loaded.target_high) == (ide.target_low, ide.target_high)


def test_model_files_reject_kind_mixups(tmp_path, tiny_tandem):
    _, fse, ide, _, _ = tiny_tandem
    save_fse(fse, tmp_path / "fse.json")
    save_ide(ide, tmp_path / "ide.json")
    with pytest.raises(ValueError, match="not a"):
        load_ide(tmp_path / "fse.json")
    with pytest.raises(ValueError, match="not a"):
        load_fse(tmp_path / "ide.json")
