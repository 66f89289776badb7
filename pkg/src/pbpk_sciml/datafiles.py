"""CSV/JSON readers and writers for datasets, plot data, and the run manifest.

Floats are written with ``repr`` so every value round-trips exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .pkode import PKProfile, TwoCompartmentParams
from .synthdata import (
    GENERATOR_VERSION,
    NODE_FEATURES,
    PHYSIO_COLUMNS,
    SPECIES,
    Dataset1,
    Dataset3,
    MoleculeGraph,
    XSpeciesRecord,
)

DATASET1_FILE = "dataset1.csv"
PATIENTS_FILE = "patients.csv"
PHYSIO_FILE = "physio.csv"
XSPECIES_FILE = "xspecies.csv"
XSPECIES_PARAMS_FILE = "xspecies_params.csv"
DRUGS_FILE = "drugs.json"
MANIFEST_FILE = "manifest.json"
DATASET_FILES = (DATASET1_FILE, PATIENTS_FILE, PHYSIO_FILE, XSPECIES_FILE, XSPECIES_PARAMS_FILE, DRUGS_FILE)


class DataFileError(OSError):
    pass


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, np.integer):
        return int(v)
    if v is None:
        return ""
    return v


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as err:
        raise DataFileError(f"cannot write {path}: {err}") from err
    return path


def read_csv(path) -> list[dict[str, str]]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as err:
        raise DataFileError(f"cannot read {path}: {err}") from err


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- Dataset 1 ----------------------------------------------------------------


def write_dataset1(out: Path, ds: Dataset1) -> list[Path]:
    split = {int(i): "train" for i in ds.train_idx}
    split.update({int(i): "test" for i in ds.test_idx})
    prof = write_csv(out / DATASET1_FILE, ("subject_id", "time_h", "conc_mg_per_L"),
                     ((i, t, c) for i, p in enumerate(ds.profiles) for t, c in zip(p.times, p.concentrations)))
    pat = write_csv(out / PATIENTS_FILE, ("subject_id", "CL", "V1", "V2", "Q", "dose_mg", "split"),
                    ((i, p.CL, p.V1, p.V2, p.Q, ds.profiles[i].dose, split[i]) for i, p in enumerate(ds.params)))
    return [prof, pat]


def read_dataset1(out: Path) -> Dataset1:
    rows = read_csv(out / DATASET1_FILE)
    patients = read_csv(out / PATIENTS_FILE)
    by_subject: dict[int, list[tuple[float, float]]] = {}
    for r in rows:
        by_subject.setdefault(int(r["subject_id"]), []).append((float(r["time_h"]), float(r["conc_mg_per_L"])))
    params, profiles, train, test = [], [], [], []
    for r in patients:
        sid = int(r["subject_id"])
        params.append(TwoCompartmentParams(float(r["CL"]), float(r["V1"]), float(r["V2"]), float(r["Q"])))
        pts = np.array(by_subject[sid])
        profiles.append(PKProfile(pts[:, 0], pts[:, 1], float(r["dose_mg"]), {"subject_id": sid}))
        (train if r["split"] == "train" else test).append(sid)
    return Dataset1(params, profiles, np.array(train, dtype=int), np.array(test, dtype=int))


# -- Dataset 2 ----------------------------------------------------------------


def write_physio(path, x: np.ndarray, violates: np.ndarray | None = None) -> Path:
    header = list(PHYSIO_COLUMNS) + (["violates"] if violates is not None else [])
    rows = (list(r) + ([bool(v)] if violates is not None else []) for r, v in
            zip(x, violates if violates is not None else [None] * len(x)))
    return write_csv(path, header, rows)


def read_physio(path) -> np.ndarray:
    rows = read_csv(path)
    return np.array([[float(r[c]) for c in PHYSIO_COLUMNS] for r in rows])


# -- Dataset 3 ----------------------------------------------------------------


def write_xspecies(out: Path, ds: Dataset3) -> list[Path]:
    paths = [
        write_csv(out / XSPECIES_FILE, ("drug_id", "species", "time_h", "conc_norm"),
                  ((r.drug_id, r.species, t, c) for r in ds.records for t, c in zip(ds.times, r.conc_norm))),
        write_csv(out / XSPECIES_PARAMS_FILE,
                  ("drug_id", "species", "weight_kg", "CL_L_per_h", "V_L", "dose_mg", "C0_mg_per_L"),
                  ((r.drug_id, r.species, r.weight_kg, r.CL, r.V, r.profile.dose, r.profile.concentrations[0])
                   for r in ds.records)),
    ]
    graphs = [{"drug_id": g.drug_id, "features": g.features.tolist(), "edges": [list(e) for e in g.edges]}
              for g in ds.graphs]
    path = out / DRUGS_FILE
    path.write_text(json.dumps({"node_features": NODE_FEATURES, "graphs": graphs}, sort_keys=True) + "\n")
    paths.append(path)
    return paths


def read_xspecies(out: Path) -> Dataset3:
    doc = json.loads((out / DRUGS_FILE).read_text())
    graphs = [MoleculeGraph(np.array(g["features"], dtype=np.float64), [tuple(e) for e in g["edges"]], g["drug_id"])
              for g in doc["graphs"]]
    curves: dict[tuple[int, str], list[tuple[float, float]]] = {}
    for r in read_csv(out / XSPECIES_FILE):
        curves.setdefault((int(r["drug_id"]), r["species"]), []).append((float(r["time_h"]), float(r["conc_norm"])))
    records = []
    times = None
    for r in read_csv(out / XSPECIES_PARAMS_FILE):
        key = (int(r["drug_id"]), r["species"])
        pts = np.array(curves[key])
        times = pts[:, 0]
        c0 = float(r["C0_mg_per_L"])
        prof = PKProfile(times.copy(), pts[:, 1] * c0, float(r["dose_mg"]), {"drug_id": key[0], "species": key[1]})
        records.append(XSpeciesRecord(key[0], key[1], float(r["weight_kg"]), float(r["CL_L_per_h"]),
                                      float(r["V_L"]), prof, pts[:, 1].copy()))
    present = {r.species for r in records}
    return Dataset3(graphs, records, times, tuple(s for s in SPECIES if s.name in present))


# -- manifest -------------------------------------------------------------------


def update_manifest(out: Path, config_digest: str, seed: int, files: Sequence[Path],
                    timings: dict[str, float] | None = None, metrics: dict | None = None) -> Path:
    """Merge artifact checksums, timings, and metrics into ``manifest.json``.

    A manifest written under a different config digest is replaced.
    """
    path = out / MANIFEST_FILE
    doc = {}
    if path.exists():
        doc = json.loads(path.read_text())
        if doc.get("config_hash") != config_digest:
            doc = {}
    doc.update({
        "toolkit_version": __version__,
        "generator_version": GENERATOR_VERSION,
        "config_hash": config_digest,
        "seed": seed,
    })
    arts = doc.setdefault("artifacts", {})
    for f in files:
        arts[Path(f).name] = sha256_file(f)
    doc.setdefault("timings_s", {}).update(timings or {})
    doc.setdefault("metrics", {}).update(metrics or {})
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path
