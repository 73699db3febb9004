import itertools
import json
import math
import os
from dataclasses import replace

import numpy as np
import pytest

from dggat.dggr import DGConfig
from dggat.model import Checkpoint, NetworkConfig, init_params
from dggat.molio import Dataset, SplitSpec, parse_jsonl, split_dataset
from dggat.numerics import Tensor
from dggat.train import (
    ABLATION_CELLS,
    PRESETS,
    ConfigError,
    EvaluationError,
    RunConfig,
    SyntheticSpec,
    evaluate,
    gen_synthetic,
    load_run_config,
    model_label,
    parse_run_config,
    rmse,
    run_ablation,
    synthetic_run_config,
    train_model,
)

from conftest import random_molecule, read_fixture

TINY = NetworkConfig(embed=4, hidden=4, depth=2, heads=2, head_widths=(3,))


def tiny_cfg(**kw):
    base = RunConfig(target="y", network=TINY, max_epochs=3, batch_size=8, split_sizes=(20, 5, 5))
    return replace(base, **kw)


@pytest.fixture(scope="module")
def small_synthetic():
    return gen_synthetic(SyntheticSpec(n_molecules=30, atoms=(5, 7), seed=3))


# --- synthetic generator ----------------------------------------------------------


def test_two_atom_target():
    d = gen_synthetic(SyntheticSpec(n_molecules=5, atoms=(2, 2), seed=1))
    for m in d.molecules:
        r = math.dist(*m.positions)
        assert m.bonds == ((0, 1, 1),)
        assert m.targets["y"] == pytest.approx(0.5 * (math.cos(math.pi * r / 10) + 1), abs=1e-15)


def oracle_target(m):
    n = m.n_atoms
    inf = float("inf")
    dist = [[0 if i == j else inf for j in range(n)] for i in range(n)]
    for i, j, _ in m.bonds:
        dist[i][j] = dist[j][i] = 1
    for k, i, j in itertools.product(range(n), repeat=3):
        dist[i][j] = min(dist[i][j], dist[i][k] + dist[k][j])
    total = 0.0
    for i in range(n):
        for j in range(i + 1, n):
            if dist[i][j] <= 3:
                r = math.dist(m.atoms[i].pos, m.atoms[j].pos)
                total += 0.5 * (math.cos(math.pi * min(r, 10.0) / 10.0) + 1) if r < 10 else 0.0
    return total


def test_synthetic_targets_match_oracle():
    d = gen_synthetic(SyntheticSpec(n_molecules=100, atoms=(4, 12), seed=7))
    assert max(abs(m.targets["y"] - oracle_target(m)) for m in d.molecules) < 1e-10


def test_synthetic_molecules_are_valid(small_synthetic):
    valence = {1: 1, 6: 4, 7: 3, 8: 2}
    for m in small_synthetic.molecules:
        deg = np.zeros(m.n_atoms, dtype=int)
        for i, j, _ in m.bonds:
            deg[i] += 1
            deg[j] += 1
        assert all(deg[k] <= valence[a.z] for k, a in enumerate(m.atoms))
        assert all(deg >= 1)
        pos = m.positions
        gaps = [np.linalg.norm(pos[i] - pos[j]) for i, j, _ in m.bonds]
        assert min(gaps) > 0.8


def test_synthetic_deterministic():
    a = gen_synthetic(SyntheticSpec(20, (5, 9), 11))
    b = gen_synthetic(SyntheticSpec(20, (5, 9), 11))
    assert [m.to_record() for m in a.molecules] == [m.to_record() for m in b.molecules]
    c = gen_synthetic(SyntheticSpec(20, (5, 9), 12))
    assert [m.to_record() for m in a.molecules] != [m.to_record() for m in c.molecules]


# --- training --------------------------------------------------------------------


def test_zero_learning_rate_keeps_init(small_synthetic):
    cfg = tiny_cfg(lr=0.0, max_epochs=2)
    ckpt, _ = train_model(cfg, small_synthetic)
    init = init_params(TINY, len(small_synthetic.element_vocab), cfg.dg.edge_dim, cfg.seed)
    for name, t in init.items():
        assert np.array_equal(ckpt.params[name].data, t.data)


def test_same_seed_same_report(small_synthetic):
    a = train_model(tiny_cfg(), small_synthetic)
    b = train_model(tiny_cfg(), small_synthetic)
    assert a[1].to_json() == b[1].to_json()
    assert a[0].to_json() == b[0].to_json()
    c = train_model(tiny_cfg(seed=1), small_synthetic)
    assert c[1].to_json() != a[1].to_json()


def test_training_reduces_train_error(small_synthetic):
    _, rep = train_model(tiny_cfg(max_epochs=30, lr=1e-2), small_synthetic)
    assert min(rep.train_rmse) < rep.train_rmse[0]


def test_early_stopping_keeps_best_validation(small_synthetic):
    cfg = tiny_cfg(max_epochs=40, lr=2e-2, patience=3)
    ckpt, rep = train_model(cfg, small_synthetic)
    assert rep.best_epoch == int(np.argmin(rep.val_rmse))
    assert len(rep.val_rmse) <= rep.best_epoch + 4
    split = split_dataset(small_synthetic, cfg.split_sizes, cfg.split_seed)
    assert evaluate(ckpt, small_synthetic, split.val) == pytest.approx(rep.val_rmse[rep.best_epoch], abs=1e-12)
    assert evaluate(ckpt, small_synthetic, split.test) == rep.test_rmse


def test_report_shape(small_synthetic):
    _, rep = train_model(tiny_cfg(synthetic=SyntheticSpec(n_molecules=30, atoms=(5, 7), seed=3)), small_synthetic)
    doc = json.loads(rep.to_json())
    assert doc["model"] == "DG-GAT - 3rd Nbrs"
    assert doc["epochs_run"] == 3 and len(doc["train_rmse"]) == 3
    assert "wall_time_s" not in doc and "wall_time_s" in rep.to_dict(include_timing=True)
    assert parse_run_config(doc["config"]).to_dict() == doc["config"]


def test_model_labels():
    assert model_label(NetworkConfig(conv="gcn"), DGConfig()) == "GCN"
    assert [model_label(NetworkConfig(), DGConfig(max_order=k)) for k in (1, 2, 3)] == [
        "DG-GAT - 1st Nbrs", "DG-GAT - 2nd Nbrs", "DG-GAT - 3rd Nbrs"]


# --- evaluation ------------------------------------------------------------------


def constant_checkpoint(value, vocab, mean=0.0, std=1.0):
    params = {k: Tensor(np.zeros(v.shape)) for k, v in init_params(TINY, len(vocab), 4, 0).items()}
    params["head1.b"] = Tensor([value])
    return Checkpoint(TINY, DGConfig(), list(vocab), "y", mean, std, params)


def dataset_with_targets(ys, rng):
    mols = [random_molecule(rng, 4, name=str(k)) for k in range(len(ys))]
    for m, y in zip(mols, ys):
        m.targets["y"] = y
    return Dataset.from_molecules(mols)


def test_rmse_by_hand():
    assert rmse([1.0, 2.0, 3.0], [1.0, 4.0, 0.0]) == pytest.approx(math.sqrt(13 / 3), abs=1e-15)


def test_constant_predictor_rmse(rng):
    ys = [1.0, 2.0, 4.0, 5.0]
    d = dataset_with_targets(ys, rng)
    ck = constant_checkpoint(0.0, d.element_vocab, mean=3.0, std=2.0)
    # standardised 0 maps back to the mean, so RMSE is the population std of ys
    assert evaluate(ck, d, range(4)) == pytest.approx(float(np.std(ys)), abs=1e-14)


def test_perfect_predictor(rng):
    d = dataset_with_targets([2.5, 2.5, 2.5], rng)
    assert evaluate(constant_checkpoint(0.25, d.element_vocab, mean=2.0, std=2.0), d, [0, 1, 2]) == 0.0


def test_rmse_scales_with_target_units(rng):
    ys = np.array([0.3, -1.2, 2.0, 0.7])
    d1 = dataset_with_targets(list(ys), rng)
    d2 = Dataset.from_molecules([replace(m, targets={"y": 7.0 * m.targets["y"]}) for m in d1.molecules])
    a = evaluate(constant_checkpoint(0.1, d1.element_vocab, 0.2, 1.5), d1, range(4))
    b = evaluate(constant_checkpoint(0.1, d1.element_vocab, 1.4, 10.5), d2, range(4))
    assert b == pytest.approx(7.0 * a, rel=1e-12)


def test_vocab_mismatch(rng):
    d = parse_jsonl(read_fixture("methane.jsonl"))
    d.molecules[0].targets["y"] = 0.0
    with pytest.raises(EvaluationError, match="vocab"):
        evaluate(constant_checkpoint(0.0, [6]), d, [0], "y")


# --- configuration -----------------------------------------------------------------


def test_config_collects_all_problems():
    doc = {"dataset": {"format": "xyz"}, "batch_size": 0, "optimizer": {"beta1": 2.0},
           "network": {"conv": "mlp"}, "bogus": 1}
    with pytest.raises(ConfigError) as exc:
        parse_run_config(doc)
    text = "\n".join(exc.value.problems)
    for key in ("dataset.path", "dataset.format", "batch_size", "optimizer.beta1", "network", "bogus", "target",
                "split"):
        assert key in text, key


def test_config_preset_and_synthetic():
    cfg = parse_run_config({"dataset": {"synthetic": {"n_molecules": 50}}, "preset": "synthetic"})
    assert cfg.target == "y" and cfg.split_sizes == (200, 50, 50)
    assert cfg.synthetic == SyntheticSpec(n_molecules=50)


def test_config_patience_null_disables():
    cfg = parse_run_config({"dataset": {"synthetic": {}}, "preset": "synthetic", "patience": None})
    assert cfg.patience is None


def test_config_round_trip():
    cfg = synthetic_run_config()
    assert parse_run_config(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_split_file(tmp_path, small_synthetic):
    spec = SplitSpec(train=tuple(range(10)), test=(10, 11), val=(12, 13))
    (tmp_path / "split.json").write_text(json.dumps(spec.to_dict()))
    cfg = parse_run_config({"dataset": {"synthetic": {"n_molecules": 30}}, "split": {"file": "split.json"}},
                           base_dir=str(tmp_path))
    assert cfg.split_file == str(tmp_path / "split.json")


# --- ablation ------------------------------------------------------------------


def test_ablation_table_rows(small_synthetic):
    cfg = tiny_cfg(max_epochs=1, seeds=(0, 1))
    table = run_ablation(cfg, small_synthetic, dataset_name="tiny")
    assert [r["model"] for r in table.rows] == ["GCN", "DG-GAT - 1st Nbrs", "DG-GAT - 2nd Nbrs", "DG-GAT - 3rd Nbrs"]
    assert len(ABLATION_CELLS) == 4
    for r in table.rows:
        assert r["rmse"] == float(np.median(list(r["seed_rmse"].values())))
    lines = table.format().splitlines()
    assert lines[0].split() == ["Dataset", "Model", "RMSE"] and lines[1].startswith("tiny")
    # an ablation cell equals a direct training run
    direct = train_model(replace(cfg, seed=1, network=replace(TINY, conv="gcn"), dg=DGConfig(max_order=1)),
                         small_synthetic)[1].test_rmse
    assert table.rows[0]["seed_rmse"]["1"] == direct


@pytest.mark.parametrize("name", ["synthetic", "esol", "freesolv", "qm9"])
def test_shipped_configs_parse(name):
    path = os.path.join(os.path.dirname(__file__), "..", "configs", f"{name}.json")
    cfg = load_run_config(path)
    assert cfg.split_sizes == PRESETS[name]
    if name == "synthetic":
        assert cfg == synthetic_run_config()
