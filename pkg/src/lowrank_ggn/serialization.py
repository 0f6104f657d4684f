"""Checkpoint JSON, dataset CSV and result CSV files."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from lowrank_ggn.net import Batch, FeedForwardNet, Layer

CHECKPOINT_VERSION = 1


def net_to_dict(net: FeedForwardNet, loss: str) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "loss": loss,
        "layers": [
            {
                "rows": layer.out_dim,
                "cols": layer.in_dim,
                "activation": layer.activation,
                "weights": [float(w) for w in layer.weight.ravel(order="C")],
                "bias": None if layer.bias is None else [float(b) for b in layer.bias],
            }
            for layer in net.layers
        ],
    }


def net_from_dict(doc: dict) -> tuple[FeedForwardNet, str]:
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    layers = []
    for entry in doc["layers"]:
        w = np.array(entry["weights"], dtype=np.float64).reshape(entry["rows"], entry["cols"])
        b = entry.get("bias")
        layers.append(Layer(w, None if b is None else np.array(b, dtype=np.float64),
                            entry["activation"]))
    return FeedForwardNet(layers), doc["loss"]


def save_checkpoint(path, net: FeedForwardNet, loss: str) -> None:
    """Write a network as JSON.

    ``json`` emits the shortest decimal that round-trips each double, so
    loading restores the parameters bit for bit.
    """
    Path(path).write_text(json.dumps(net_to_dict(net, loss), indent=1) + "\n")


def load_checkpoint(path) -> tuple[FeedForwardNet, str]:
    return net_from_dict(json.loads(Path(path).read_text()))


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


def write_spectrum_csv(path, eigenvalues) -> None:
    write_csv(path, ["k", "eigenvalue"], [(k + 1, lam) for k, lam in enumerate(eigenvalues)])


def write_derivs_csv(path, gammas, lambdas, curvature_samples) -> None:
    """Rows ``n,k,gamma_nk,lambda_nk``.

    ``lambda_nk`` is left empty for samples outside the curvature subset.
    """
    pos = {int(n): i for i, n in enumerate(curvature_samples)}
    rows = []
    for n in range(gammas.shape[0]):
        for k in range(gammas.shape[1]):
            lam = lambdas[pos[n], k] if n in pos else ""
            rows.append((n, k + 1, gammas[n, k], lam))
    write_csv(path, ["n", "k", "gamma_nk", "lambda_nk"], rows)


def write_dataset(directory, features: np.ndarray, labels: np.ndarray) -> tuple[Path, Path]:
    """Write ``features.csv`` (columns ``x0..``) and ``labels.csv`` (column ``label``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    fpath, lpath = directory / "features.csv", directory / "labels.csv"
    write_csv(fpath, [f"x{j}" for j in range(features.shape[1])], features.tolist())
    write_csv(lpath, ["label"], [[int(y)] for y in labels])
    return fpath, lpath


def read_dataset(directory, loss: str, num_outputs: int | None = None) -> Batch:
    """Load a dataset written by :func:`write_dataset`.

    A ``labels.csv`` with a single ``label`` column yields class indices for
    cross-entropy and one-hot targets for square loss. A ``targets.csv``
    with real-valued columns is used as-is for square loss.
    """
    directory = Path(directory)
    _, frows = read_csv(directory / "features.csv")
    x = np.array(frows, dtype=np.float64)
    tpath = directory / "targets.csv"
    if tpath.exists() and loss == "square":
        _, trows = read_csv(tpath)
        return Batch(x, np.array(trows, dtype=np.float64))
    _, lrows = read_csv(directory / "labels.csv")
    labels = np.array([int(r[0]) for r in lrows], dtype=np.int64)
    if loss == "cross_entropy":
        return Batch(x, labels)
    c = num_outputs if num_outputs is not None else int(labels.max()) + 1
    return Batch(x, np.eye(c)[labels])
