"""Reproducible experiment pipeline behind the command line.

Every run is described by one nested config dictionary (see
``DEFAULT_CONFIG``). All randomness derives from the top-level ``seed``.
Outputs are CSV/JSON files whose bytes depend only on the config and the
inputs, with the exception of the timing column of the benchmark.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

import numpy as np

from lowrank_ggn.baseline import (
    PowerIterConfig,
    benchmark_topk,
    finite_difference_hessian,
)
from lowrank_ggn.errors import ConfigError, CurvatureError, UnknownReferenceError
from lowrank_ggn.linalg import sym_eig
from lowrank_ggn.lowrank import CurvatureConfig, LowRankGGN
from lowrank_ggn.metrics import overlap_leading, snr
from lowrank_ggn.net import Batch, FeedForwardNet, forward, make_rng, per_sample_gradients
from lowrank_ggn.newton import NewtonConfig, newton_step
from lowrank_ggn.serialization import (
    load_checkpoint,
    read_dataset,
    save_checkpoint,
    write_csv,
    write_dataset,
    write_derivs_csv,
    write_spectrum_csv,
)

REFERENCES = ("full_batch_ggn", "mini_batch_ggn", "fd_hessian")

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {"classes": 3, "dim": 4, "n_per_class": 40, "spread": 0.7, "path": None},
    "net": {"hidden": [8], "activation": "tanh", "loss": "cross_entropy", "bias": True},
    "train": {"batch_size": 16, "lr": 0.05, "momentum": 0.9, "epochs": 5, "checkpoints": 20},
    "curvature": {
        "factor_mode": "exact",
        "sample_mode": "mb",
        "sub_size": None,
        "mc_samples": 1,
        "block_mode": "full",
        "clip": 1e-4,
    },
    "analysis": {
        "batch_size": 16,
        "repeats": 5,
        "reference": "full_batch_ggn",
        "damping": 1.0,
        "newton_mode": "eigen",
        "k_max": 10,
        "bench_repeats": 20,
    },
}


class DivergenceError(CurvatureError, FloatingPointError):
    """Training produced a non-finite loss."""


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            out[key] = _merge(out[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the JSON file, then explicit overrides (dotted keys)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}") from err
        cfg = _merge(cfg, doc)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    d, t, a = cfg["data"], cfg["train"], cfg["analysis"]
    positive = {
        "data.classes": d["classes"], "data.dim": d["dim"], "data.n_per_class": d["n_per_class"],
        "train.batch_size": t["batch_size"], "train.epochs": t["epochs"],
        "train.checkpoints": t["checkpoints"], "analysis.batch_size": a["batch_size"],
        "analysis.repeats": a["repeats"], "analysis.k_max": a["k_max"],
        "analysis.bench_repeats": a["bench_repeats"],
    }
    for key, value in positive.items():
        if not isinstance(value, int) or value <= 0:
            raise ConfigError(f"{key} must be a positive integer, got {value!r}")
    if d["spread"] < 0 or t["lr"] < 0 or a["damping"] <= 0:
        raise ConfigError("spread and lr must be non-negative, damping positive")
    if a["reference"] not in REFERENCES:
        raise UnknownReferenceError(f"unknown reference {a['reference']!r}; expected {REFERENCES}")
    curvature_config(cfg)
    NewtonConfig(a["damping"], a["newton_mode"], cfg["curvature"]["block_mode"])


def curvature_config(cfg: dict) -> CurvatureConfig:
    c = cfg["curvature"]
    return CurvatureConfig(
        sample_mode=c["sample_mode"],
        factor_mode=c["factor_mode"],
        mc_samples=int(c["mc_samples"]),
        sub_size=c["sub_size"],
        block_mode=c["block_mode"],
        clip_threshold=float(c["clip"]),
        seed=int(cfg["seed"]),
    )


def gen_synthetic(classes: int, dim: int, n_per_class: int, spread: float, seed: int):
    """Gaussian blobs around random class means, in shuffled order."""
    if min(classes, dim, n_per_class) <= 0 or spread < 0:
        raise ConfigError("classes, dim and n_per_class must be positive, spread non-negative")
    rng = make_rng(seed)
    means = 2.0 * rng.standard_normal((classes, dim))
    labels = np.repeat(np.arange(classes), n_per_class)
    features = means[labels] + spread * rng.standard_normal((labels.size, dim))
    perm = rng.permutation(labels.size)
    return features[perm], labels[perm]


def checkpoint_grid(total_steps: int, count: int) -> np.ndarray:
    """Log-spaced steps between 1 and ``total_steps + 1``, shifted by -1."""
    if total_steps < 0 or count < 1:
        raise ConfigError("need a non-negative step count and at least one checkpoint")
    raw = np.logspace(0.0, np.log10(total_steps + 1), count)
    return np.unique(np.round(raw).astype(np.int64)) - 1


def build_net(cfg: dict, input_dim: int, num_classes: int) -> FeedForwardNet:
    n = cfg["net"]
    sizes = [input_dim, *n["hidden"], num_classes]
    activations = [n["activation"]] * len(n["hidden"]) + ["identity"]
    return FeedForwardNet.init(sizes, activations, seed=cfg["seed"], bias=n["bias"])


def accuracy(outputs: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(outputs, axis=1) == targets))


def train(cfg: dict, data_dir, out_dir) -> list[Path]:
    """SGD with momentum on the mean loss, checkpointing on a log grid.

    Writes ``checkpoint_<step>.json`` files and ``metrics.csv`` with the
    mini-batch loss and accuracy observed before each update.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss = cfg["net"]["loss"]
    num_classes = cfg["data"]["classes"]
    data = read_dataset(data_dir, loss, num_classes)
    if loss == "cross_entropy":
        num_classes = max(num_classes, int(np.max(data.targets)) + 1)
    else:
        num_classes = data.targets.shape[1]
    net = build_net(cfg, data.inputs.shape[1], num_classes)
    t = cfg["train"]
    n = data.size
    per_epoch = int(np.ceil(n / t["batch_size"]))
    total = per_epoch * t["epochs"]
    grid = set(checkpoint_grid(total, t["checkpoints"]).tolist())
    rng = make_rng(np.random.SeedSequence(cfg["seed"]).spawn(3)[2])
    theta = net.get_params()
    velocity = np.zeros_like(theta)
    rows, paths = [], []
    order = np.arange(n)
    for step in range(total + 1):
        if step in grid:
            path = out_dir / f"checkpoint_{step:06d}.json"
            save_checkpoint(path, net.with_params(theta), loss)
            paths.append(path)
        if step == total:
            break
        pos = step % per_epoch
        if pos == 0:
            order = rng.permutation(n)
        batch = data.subset(order[pos * t["batch_size"]:(pos + 1) * t["batch_size"]])
        current = net.with_params(theta)
        trace = forward(current, batch, loss)
        if not np.isfinite(trace.mean_loss):
            raise DivergenceError(f"loss became {trace.mean_loss} at step {step}")
        acc = accuracy(trace.outputs, trace.targets) if loss == "cross_entropy" else ""
        rows.append((step, trace.mean_loss, acc))
        grad = per_sample_gradients(current, trace).mean(axis=0)
        velocity = t["momentum"] * velocity + grad
        theta = theta - t["lr"] * velocity
    write_csv(out_dir / "metrics.csv", ["step", "train_loss", "train_accuracy"], rows)
    return paths


def draw_batches(data: Batch, size: int, repeats: int, seed: int) -> list[np.ndarray]:
    """Index sets of the analysis mini-batches, shared by all checkpoints."""
    rng = make_rng(np.random.SeedSequence(seed).spawn(4)[3])
    size = min(size, data.size)
    return [np.sort(rng.permutation(data.size)[:size]) for _ in range(repeats)]


def _load(cfg: dict, checkpoint, data_dir):
    net, loss = load_checkpoint(checkpoint)
    data = read_dataset(data_dir, loss, net.output_dim)
    return net, loss, data


def run_spectrum(cfg: dict, checkpoints, data_dir, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for ckpt in checkpoints:
        net, loss, data = _load(cfg, ckpt, data_dir)
        idx = draw_batches(data, cfg["analysis"]["batch_size"], 1, cfg["seed"])[0]
        model = LowRankGGN(net, data.subset(idx), loss, curvature_config(cfg))
        path = out_dir / f"spectrum_{Path(ckpt).stem}.csv"
        write_spectrum_csv(path, model.eigenvalues)
        paths.append(path)
    return paths


def _reference_eigvecs(reference: str, net, loss, data: Batch, batch: Batch, c: int) -> np.ndarray:
    exact = CurvatureConfig()
    if reference == "full_batch_ggn":
        model = LowRankGGN(net, data, loss, exact)
        return model.eigenvectors(min(c, model.num_retained))
    if reference == "mini_batch_ggn":
        model = LowRankGGN(net, batch, loss, exact)
        return model.eigenvectors(min(c, model.num_retained))
    if reference == "fd_hessian":
        hess = finite_difference_hessian(net, data, loss)
        return sym_eig(hess, method="lapack").eigenvectors[:, :c]
    raise UnknownReferenceError(f"unknown reference {reference!r}; expected {REFERENCES}")


def run_overlap(cfg: dict, checkpoints, data_dir, out_dir) -> Path:
    """Overlap of top-C eigenspaces with a reference, per checkpoint and draw."""
    a = cfg["analysis"]
    if a["reference"] not in REFERENCES:
        raise UnknownReferenceError(f"unknown reference {a['reference']!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    ccfg = curvature_config(cfg)
    for ckpt in checkpoints:
        net, loss, data = _load(cfg, ckpt, data_dir)
        c = net.output_dim
        draws = draw_batches(data, a["batch_size"], a["repeats"], cfg["seed"])
        full_ref = None
        for idx in draws:
            batch = data.subset(idx)
            model = LowRankGGN(net, batch, loss, ccfg)
            approx = model.eigenvectors(min(c, model.num_retained))
            if a["reference"] == "mini_batch_ggn" or full_ref is None:
                ref = _reference_eigvecs(a["reference"], net, loss, data, batch, c)
                if a["reference"] != "mini_batch_ggn":
                    full_ref = ref
            else:
                ref = full_ref
            value, eff = overlap_leading(approx, ref, c)
            rows.append((Path(ckpt).stem, value, eff))
    path = out_dir / "overlap.csv"
    write_csv(path, ["checkpoint", "overlap", "effective_C"], rows)
    return path


def run_derivs(cfg: dict, checkpoints, data_dir, out_dir) -> list[Path]:
    """Per-sample directional derivatives along the top-C directions and their SNRs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    snr_rows, paths = [], []
    for ckpt in checkpoints:
        net, loss, data = _load(cfg, ckpt, data_dir)
        idx = draw_batches(data, cfg["analysis"]["batch_size"], 1, cfg["seed"])[0]
        model = LowRankGGN(net, data.subset(idx), loss, curvature_config(cfg))
        k = min(net.output_dim, model.num_retained)
        stem = Path(ckpt).stem
        path = out_dir / f"derivs_{stem}.csv"
        if k == 0:
            write_csv(path, ["n", "k", "gamma_nk", "lambda_nk"], [])
        else:
            d = model.directional_derivatives(k)
            write_derivs_csv(path, d.gammas, d.lambdas, d.curvature_samples)
            for j in range(k):
                lam_snr = snr(d.lambdas[:, j]) if d.lambdas.shape[0] >= 2 else float("nan")
                snr_rows.append((stem, j + 1, snr(d.gammas[:, j]), lam_snr))
        paths.append(path)
    snr_path = out_dir / "snr.csv"
    write_csv(snr_path, ["checkpoint", "k", "snr_gamma", "snr_lambda"], snr_rows)
    return [*paths, snr_path]


def run_newton(cfg: dict, checkpoints, data_dir, out_dir) -> list[Path]:
    a = cfg["analysis"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ncfg = NewtonConfig(a["damping"], a["newton_mode"], cfg["curvature"]["block_mode"])
    paths = []
    for ckpt in checkpoints:
        net, loss, data = _load(cfg, ckpt, data_dir)
        idx = draw_batches(data, a["batch_size"], 1, cfg["seed"])[0]
        batch = data.subset(idx)
        step = newton_step(net, batch, loss, curvature_config(cfg), ncfg)
        before = forward(net, batch, loss).mean_loss
        after = forward(net.with_params(net.get_params() + step), batch, loss).mean_loss
        doc = {
            "delta": ncfg.damping,
            "mode": ncfg.mode,
            "block_mode": ncfg.block_mode,
            "loss_before": before,
            "loss_after": after,
            "step_norm": float(np.linalg.norm(step)),
        }
        path = out_dir / f"newton_{Path(ckpt).stem}.json"
        path.write_text(json.dumps(doc, indent=1) + "\n")
        paths.append(path)
    return paths


def run_bench(cfg: dict, checkpoint, data_dir, out_dir) -> Path:
    """Minimum-of-R timings of top-k eigenpairs, Gram method vs power iteration."""
    a = cfg["analysis"]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net, loss, data = _load(cfg, checkpoint, data_dir)
    idx = draw_batches(data, a["batch_size"], 1, cfg["seed"])[0]
    rows = benchmark_topk(net, data.subset(idx), loss, range(1, a["k_max"] + 1),
                          a["bench_repeats"], curvature_config(cfg),
                          PowerIterConfig(seed=cfg["seed"]))
    path = out_dir / "bench.csv"
    write_csv(path, ["method", "k", "seconds"], rows)
    return path


def gen_data(cfg: dict, out_dir) -> tuple[Path, Path]:
    d = cfg["data"]
    features, labels = gen_synthetic(d["classes"], d["dim"], d["n_per_class"], d["spread"], cfg["seed"])
    return write_dataset(out_dir, features, labels)
