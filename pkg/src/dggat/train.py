"""Training, evaluation, ablation tables and the synthetic geometry benchmark."""
from __future__ import annotations

import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Optional, Sequence

import numpy as np

from . import numerics as nx
from .dggr import DGConfig, DGGraph, build_dg_graph, expand_neighbors, pair_distance_sum
from .model import Checkpoint, NetworkConfig, collate, copy_params, forward_network, init_params, predict
from .molio import (
    Atom,
    Dataset,
    DatasetError,
    FeaturizationError,
    Molecule,
    SplitSpec,
    TargetScaler,
    featurize_nodes,
    fit_scaler,
    load_dataset,
    split_dataset,
)

logger = logging.getLogger(__name__)

# split sizes as (train, test, validation)
PRESETS = {
    "esol": (901, 113, 113),
    "freesolv": (510, 65, 64),
    "qm9": (1100, 100, 100),
    "synthetic": (200, 50, 50),
}


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        super().__init__("invalid config: " + "; ".join(problems))
        self.problems = list(problems)


class TrainingDivergence(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticSpec:
    n_molecules: int = 300
    atoms: tuple[int, int] = (9, 9)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"n_molecules": self.n_molecules, "atoms": list(self.atoms), "seed": self.seed}


_VALENCE = {6: 4, 7: 3, 8: 2, 1: 1}
_ELEMENT_P = {6: 0.45, 7: 0.15, 8: 0.15, 1: 0.25}
SYNTHETIC_TARGET = "y"


def _synthetic_molecule(rng: np.random.Generator, n_atoms: int, name: str) -> Molecule:
    zs = [6]
    bonds: list[tuple[int, int, int]] = []
    degree = [0]
    pos = [np.zeros(3)]
    for k in range(1, n_atoms):
        open_heavy = [i for i, z in enumerate(zs) if z != 1 and degree[i] < _VALENCE[z]]
        parent = int(rng.choice(open_heavy))
        spare = sum(_VALENCE[zs[i]] - degree[i] for i in open_heavy) - 1
        elements = list(_ELEMENT_P)
        z = int(rng.choice(elements, p=list(_ELEMENT_P.values())))
        if z == 1 and spare == 0 and k < n_atoms - 1:
            z = 6  # keep the tree growable
        length = (1.09 if 1 in (z, zs[parent]) else 1.45) + rng.normal(0.0, 0.04)
        best, best_gap = None, -1.0
        for _ in range(30):
            u = rng.normal(size=3)
            cand = pos[parent] + length * u / np.linalg.norm(u)
            gap = min(np.linalg.norm(cand - p) for i, p in enumerate(pos) if i != parent) if k > 1 else 9.9
            if gap > best_gap:
                best, best_gap = cand, gap
            if gap >= 1.3:
                break
        zs.append(z)
        degree.append(1)
        degree[parent] += 1
        pos.append(best)
        bonds.append((parent, k, 1))

    # up to two ring closures between nearby heavy atoms at least three bonds apart
    for _ in range(int(rng.integers(0, 3))):
        near = expand_neighbors(bonds, n_atoms, 2)
        cands = [
            (i, j) for i in range(n_atoms) for j in range(i + 1, n_atoms)
            if zs[i] != 1 and zs[j] != 1 and (i, j) not in near
            and degree[i] < _VALENCE[zs[i]] and degree[j] < _VALENCE[zs[j]]
            and np.linalg.norm(pos[i] - pos[j]) < 2.6
        ]
        if not cands:
            break
        i, j = cands[int(rng.integers(len(cands)))]
        bonds.append((i, j, 1))
        degree[i] += 1
        degree[j] += 1

    atoms = tuple(Atom(z, tuple(float(c) for c in p)) for z, p in zip(zs, pos))
    m = Molecule(name, atoms, tuple(bonds), {})
    return Molecule(name, atoms, tuple(bonds), {SYNTHETIC_TARGET: pair_distance_sum(m, 3, 10.0)})


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Random connected molecule-like graphs whose target is the sum of encoded
    distances over every pair within three bonds (cutoff 10 Å)."""
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.atoms
    mols = []
    for k in range(spec.n_molecules):
        n = int(rng.integers(lo, hi + 1))
        mols.append(_synthetic_molecule(rng, n, f"syn{k:05d}"))
    return Dataset.from_molecules(mols)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    target: str
    dataset_path: Optional[str] = None
    dataset_format: Optional[str] = None
    synthetic: Optional[SyntheticSpec] = None
    dg: DGConfig = field(default_factory=DGConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 300
    patience: Optional[int] = 30
    seed: int = 0
    split_sizes: Optional[tuple[int, int, int]] = None
    split_seed: int = 0
    split_file: Optional[str] = None
    seeds: tuple[int, ...] = (0, 1, 2)
    workers: int = 1

    def to_dict(self) -> dict:
        if self.synthetic is not None:
            dataset: dict[str, Any] = {"synthetic": self.synthetic.to_dict()}
        else:
            dataset = {"path": self.dataset_path, "format": self.dataset_format}
            dataset = {k: v for k, v in dataset.items() if v is not None}
        if self.split_file is not None:
            split: dict[str, Any] = {"file": self.split_file}
        else:
            split = {"sizes": list(self.split_sizes or ()), "seed": self.split_seed}
        return {
            "dataset": dataset,
            "target": self.target,
            "dg": self.dg.to_dict(),
            "network": self.network.to_dict(),
            "optimizer": {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps},
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "split": split,
            "seeds": list(self.seeds),
            "workers": self.workers,
        }


def synthetic_run_config(**overrides) -> RunConfig:
    """Benchmark protocol shared by every cell of the synthetic ablation.

    The narrower network (width 32) and longer patience apply to GCN and
    DG-GAT alike; at width 64 the attention model overfits 200 molecules.
    """
    base = RunConfig(
        target=SYNTHETIC_TARGET,
        synthetic=SyntheticSpec(),
        network=NetworkConfig(embed=32, hidden=32, head_widths=(16,)),
        patience=50,
        split_sizes=PRESETS["synthetic"],
    )
    return replace(base, **overrides)


def _want(doc: dict, key: str, kind, problems: list, where: str, default=None, positive=False):
    if key not in doc:
        return default
    val = doc[key]
    ok = isinstance(val, kind) and not (isinstance(val, bool) and kind is not bool)
    if ok and positive and not val > 0:
        ok = False
    if not ok:
        need = "positive " if positive else ""
        tname = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        problems.append(f"{where}{key}: expected {need}{tname}, got {val!r}")
        return default
    return val


def parse_run_config(doc: Any, base_dir: str = ".") -> RunConfig:
    """Validate a JSON config document, collecting every problem before raising."""
    problems: list[str] = []
    if not isinstance(doc, dict):
        raise ConfigError(["config must be a JSON object"])
    known = {"dataset", "target", "dg", "network", "optimizer", "batch_size", "max_epochs",
             "patience", "seed", "split", "seeds", "workers", "preset"}
    for key in sorted(set(doc) - known):
        problems.append(f"{key}: unknown field")

    kw: dict[str, Any] = {}
    preset = doc.get("preset")
    if preset is not None and preset not in PRESETS:
        problems.append(f"preset: expected one of {sorted(PRESETS)}, got {preset!r}")
        preset = None

    ds = doc.get("dataset")
    if ds is None:
        problems.append("dataset: missing field")
    elif not isinstance(ds, dict):
        problems.append("dataset: expected object")
    elif "synthetic" in ds:
        sy = ds["synthetic"] if isinstance(ds["synthetic"], dict) else {}
        if not isinstance(ds["synthetic"], dict):
            problems.append("dataset.synthetic: expected object")
        n = _want(sy, "n_molecules", int, problems, "dataset.synthetic.", 300, positive=True)
        atoms = sy.get("atoms", [9, 9])
        if not (isinstance(atoms, list) and len(atoms) == 2 and all(isinstance(a, int) for a in atoms)
                and 2 <= atoms[0] <= atoms[1]):
            problems.append(f"dataset.synthetic.atoms: expected [min, max] with 2 <= min <= max, got {atoms!r}")
            atoms = [9, 9]
        s = _want(sy, "seed", int, problems, "dataset.synthetic.", 0)
        kw["synthetic"] = SyntheticSpec(n, (atoms[0], atoms[1]), s)
    else:
        path = _want(ds, "path", str, problems, "dataset.")
        if path is None:
            problems.append("dataset.path: missing field")
        else:
            kw["dataset_path"] = path if os.path.isabs(path) else os.path.join(base_dir, path)
        fmt = _want(ds, "format", str, problems, "dataset.")
        if fmt is not None and fmt not in ("jsonl", "sdf"):
            problems.append(f"dataset.format: expected 'jsonl' or 'sdf', got {fmt!r}")
        kw["dataset_format"] = fmt

    target = doc.get("target")
    if target is None and kw.get("synthetic") is not None:
        target = SYNTHETIC_TARGET
    if not isinstance(target, str):
        problems.append("target: missing field" if target is None else f"target: expected string, got {target!r}")
    kw["target"] = target

    dg = doc.get("dg", {})
    if isinstance(dg, dict):
        try:
            kw["dg"] = DGConfig(**dg)
        except (TypeError, ValueError) as exc:
            problems.append(f"dg: {exc}")
    else:
        problems.append("dg: expected object")
    net = doc.get("network", {})
    if isinstance(net, dict):
        try:
            kw["network"] = NetworkConfig(**net)
        except (TypeError, ValueError) as exc:
            problems.append(f"network: {exc}")
    else:
        problems.append("network: expected object")

    opt = doc.get("optimizer", {})
    if not isinstance(opt, dict):
        problems.append("optimizer: expected object")
        opt = {}
    kw["lr"] = _want(opt, "lr", (int, float), problems, "optimizer.", 1e-3)
    if kw["lr"] < 0:
        problems.append("optimizer.lr: must be >= 0")
    for name, default in (("beta1", 0.9), ("beta2", 0.999)):
        v = _want(opt, name, (int, float), problems, "optimizer.", default)
        if not 0 <= v < 1:
            problems.append(f"optimizer.{name}: must lie in [0, 1)")
        kw[name] = float(v)
    kw["eps"] = float(_want(opt, "eps", (int, float), problems, "optimizer.", 1e-8, positive=True))
    kw["lr"] = float(kw["lr"])

    kw["batch_size"] = _want(doc, "batch_size", int, problems, "", 32, positive=True)
    kw["max_epochs"] = _want(doc, "max_epochs", int, problems, "", 300, positive=True)
    if doc.get("patience") is not None:
        kw["patience"] = _want(doc, "patience", int, problems, "", 30, positive=True)
    elif "patience" in doc:
        kw["patience"] = None
    kw["seed"] = _want(doc, "seed", int, problems, "", 0)
    kw["workers"] = _want(doc, "workers", int, problems, "", 1, positive=True)
    seeds = doc.get("seeds", [0, 1, 2])
    if not (isinstance(seeds, list) and seeds and all(isinstance(s, int) for s in seeds)):
        problems.append(f"seeds: expected nonempty list of integers, got {seeds!r}")
    else:
        kw["seeds"] = tuple(seeds)

    split = doc.get("split")
    if split is None and preset is not None:
        split = {"sizes": list(PRESETS[preset])}
    if split is None:
        problems.append("split: missing field")
    elif not isinstance(split, dict):
        problems.append("split: expected object")
    elif "file" in split:
        f = _want(split, "file", str, problems, "split.")
        if f is not None:
            kw["split_file"] = f if os.path.isabs(f) else os.path.join(base_dir, f)
    else:
        sizes = split.get("sizes")
        if not (isinstance(sizes, list) and len(sizes) == 3 and all(isinstance(s, int) and s > 0 for s in sizes)):
            problems.append(f"split.sizes: expected [train, test, val] positive integers, got {sizes!r}")
        else:
            kw["split_sizes"] = tuple(sizes)
        kw["split_seed"] = _want(split, "seed", int, problems, "split.", 0)

    if problems:
        raise ConfigError(problems)
    return RunConfig(**kw)


def load_run_config(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"invalid JSON: {exc}"]) from None
    return parse_run_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))


def load_run_data(cfg: RunConfig) -> tuple[Dataset, SplitSpec]:
    d = gen_synthetic(cfg.synthetic) if cfg.synthetic is not None else load_dataset(cfg.dataset_path, cfg.dataset_format)
    if cfg.target not in d.target_names:
        raise DatasetError(f"target {cfg.target!r} not present in every molecule; available: {d.target_names}")
    if cfg.split_file is not None:
        with open(cfg.split_file, encoding="utf-8") as fh:
            split = SplitSpec.from_dict(json.load(fh), len(d))
    else:
        split = split_dataset(d, cfg.split_sizes, cfg.split_seed)
    return d, split


# ---------------------------------------------------------------------------
# training


@dataclass
class RunReport:
    model: str
    target: str
    train_rmse: list[float]
    val_rmse: list[float]
    best_epoch: int
    test_rmse: float
    config: dict
    wall_time_s: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "model": self.model,
            "target": self.target,
            "best_epoch": self.best_epoch,
            "epochs_run": len(self.val_rmse),
            "best_val_rmse": self.val_rmse[self.best_epoch] if self.val_rmse else None,
            "test_rmse": self.test_rmse,
            "train_rmse": self.train_rmse,
            "val_rmse": self.val_rmse,
            "config": self.config,
        }
        if include_timing:
            d["wall_time_s"] = self.wall_time_s
        return d

    def to_json(self, include_timing: bool = False) -> str:
        return json.dumps(self.to_dict(include_timing), indent=1) + "\n"


def model_label(network: NetworkConfig, dg: DGConfig) -> str:
    if network.conv == "gcn":
        return "GCN"
    suffix = {1: "1st", 2: "2nd", 3: "3rd"}[dg.max_order]
    return f"DG-GAT - {suffix} Nbrs"


def prepare_graphs(d: Dataset, vocab: Sequence[int], dg: DGConfig) -> list[DGGraph]:
    return [build_dg_graph(m, featurize_nodes(m, vocab), dg) for m in d.molecules]


def rmse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean((pred - target) ** 2)))


def _batches(graphs: Sequence[DGGraph], size: int = 256):
    return [collate(graphs[k : k + size]) for k in range(0, len(graphs), size)]


def _predict_batches(batches, network, params) -> np.ndarray:
    return np.concatenate([forward_network(b, network, params).data for b in batches])


def train_model(
    cfg: RunConfig,
    d: Dataset,
    split: Optional[SplitSpec] = None,
    graphs: Optional[Sequence[DGGraph]] = None,
) -> tuple[Checkpoint, RunReport]:
    """Fit one network with Adam on standardised targets, early-stopping on validation RMSE.

    ``graphs`` may carry prebuilt graphs for ``d`` (built with ``cfg.dg``);
    the best-validation parameters are restored before the single test evaluation.
    """
    start = time.perf_counter()
    if split is None:
        split = split_dataset(d, cfg.split_sizes, cfg.split_seed)
    scaler = fit_scaler(d, split, cfg.target)
    vocab = list(d.element_vocab)
    if graphs is None:
        graphs = prepare_graphs(d, vocab, cfg.dg)
    y = d.targets(cfg.target)
    y_std = scaler.transform(y)

    network = cfg.network
    params = init_params(network, len(vocab), cfg.dg.edge_dim, cfg.seed)
    opt = nx.Adam(list(params.values()), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)

    train_idx = np.array(split.train)
    train_eval = _batches([graphs[i] for i in split.train])
    val_eval = _batches([graphs[i] for i in split.val])

    train_curve: list[float] = []
    val_curve: list[float] = []
    best = (math.inf, -1, copy_params(params))
    for epoch in range(cfg.max_epochs):
        order = train_idx[rng.permutation(train_idx.size)]
        for k in range(0, order.size, cfg.batch_size):
            chunk = order[k : k + cfg.batch_size]
            with nx.Tape():
                pred = forward_network([graphs[i] for i in chunk], network, params)
                loss = nx.mse_loss(pred, nx.Tensor(y_std[chunk]))
                if not np.isfinite(loss.item()):
                    raise TrainingDivergence(epoch)
                nx.backward(loss)
            opt.step()
            opt.zero_grad()
        tr = rmse(scaler.inverse(_predict_batches(train_eval, network, params)), y[list(split.train)])
        va = rmse(scaler.inverse(_predict_batches(val_eval, network, params)), y[list(split.val)])
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise TrainingDivergence(epoch)
        train_curve.append(tr)
        val_curve.append(va)
        if va < best[0]:
            best = (va, epoch, copy_params(params))
        elif cfg.patience and epoch - best[1] >= cfg.patience:
            break

    params = best[2]
    ckpt = Checkpoint(network, cfg.dg, vocab, cfg.target, scaler.mean, scaler.std, params)
    test_pred = scaler.inverse(_predict_batches(_batches([graphs[i] for i in split.test]), network, params))
    report = RunReport(
        model=model_label(network, cfg.dg),
        target=cfg.target,
        train_rmse=train_curve,
        val_rmse=val_curve,
        best_epoch=best[1],
        test_rmse=rmse(test_pred, y[list(split.test)]),
        config=cfg.to_dict(),
        wall_time_s=time.perf_counter() - start,
    )
    logger.info("%s seed=%d best_epoch=%d test_rmse=%.4f", report.model, cfg.seed, report.best_epoch, report.test_rmse)
    return ckpt, report


def predict_checkpoint(ckpt: Checkpoint, d: Dataset, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """Predictions in original target units."""
    mols = d.molecules if indices is None else [d.molecules[i] for i in indices]
    try:
        graphs = [build_dg_graph(m, featurize_nodes(m, ckpt.vocab), ckpt.dg) for m in mols]
    except FeaturizationError as exc:
        raise EvaluationError(f"dataset does not match checkpoint vocab: {exc}") from None
    scaler = TargetScaler(ckpt.scaler_mean, ckpt.scaler_std)
    return scaler.inverse(predict(graphs, ckpt.network, ckpt.params))


def evaluate(ckpt: Checkpoint, d: Dataset, indices: Sequence[int], target: Optional[str] = None) -> float:
    """RMSE in original target units over the molecules at ``indices``."""
    target = target or ckpt.target
    return rmse(predict_checkpoint(ckpt, d, indices), d.targets(target, indices))


# ---------------------------------------------------------------------------
# ablation


ABLATION_CELLS = (
    ("gcn", 1),
    ("gatv2", 1),
    ("gatv2", 2),
    ("gatv2", 3),
)


@dataclass
class AblationTable:
    dataset: str
    rows: list[dict]

    def to_dict(self) -> dict:
        return {"dataset": self.dataset, "rows": self.rows}

    def format(self) -> str:
        name_w = max(len("Model"), *(len(r["model"]) for r in self.rows))
        ds_w = max(len("Dataset"), len(self.dataset))
        lines = [f"{'Dataset':<{ds_w}}  {'Model':<{name_w}}  RMSE"]
        for k, r in enumerate(self.rows):
            ds = self.dataset if k == 0 else ""
            lines.append(f"{ds:<{ds_w}}  {r['model']:<{name_w}}  {r['rmse']:.4f}")
        return "\n".join(lines) + "\n"

    def rmse_of(self, model: str) -> float:
        return next(r["rmse"] for r in self.rows if r["model"] == model)


def _run_cell(args) -> float:
    cfg, d, split, graphs = args
    return train_model(cfg, d, split, graphs)[1].test_rmse


def run_ablation(
    cfg: RunConfig,
    d: Dataset,
    split: Optional[SplitSpec] = None,
    cells: Sequence[tuple[str, int]] = ABLATION_CELLS,
    dataset_name: str = "",
) -> AblationTable:
    """Train every (model, neighbor order) cell over ``cfg.seeds``; report median test RMSE."""
    if split is None:
        split = split_dataset(d, cfg.split_sizes, cfg.split_seed)
    full_dg = replace(cfg.dg, max_order=3)
    full = prepare_graphs(d, d.element_vocab, full_dg)
    jobs = []
    for conv, order in cells:
        dg = replace(cfg.dg, max_order=order)
        cell_cfg = replace(cfg, dg=dg, network=replace(cfg.network, conv=conv))
        graphs = [g.restrict(order) for g in full]
        for seed in cfg.seeds:
            jobs.append((replace(cell_cfg, seed=seed), d, split, graphs))
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]

    rows = []
    n_seeds = len(cfg.seeds)
    for k, (conv, order) in enumerate(cells):
        per_seed = results[k * n_seeds : (k + 1) * n_seeds]
        label = model_label(NetworkConfig(conv=conv), DGConfig(max_order=order))
        rows.append({
            "model": label,
            "conv": conv,
            "max_order": order,
            "rmse": statistics.median(per_seed),
            "seed_rmse": dict(zip([str(s) for s in cfg.seeds], per_seed)),
        })
    name = dataset_name or ("synthetic" if cfg.synthetic is not None else os.path.basename(cfg.dataset_path or ""))
    return AblationTable(name, rows)
