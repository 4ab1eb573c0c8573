"""Versioned JSON file formats for certificates and trajectories, plus flat exports."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .certificate import CertEntry, Certificate
from .grasps import BimanualGrasp, GraspParams
from .trajectory import ManipulationTrajectory, TransferSegment, TransitSegment
from .transforms import MetricWeights, matrix_to_quat
from .world import PlacementCoord

FORMAT_VERSION = 1


class FileFormatError(ValueError):
    pass


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        mask = os.umask(0)
        os.umask(mask)
        os.chmod(tmp, 0o666 & ~mask)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _grasp_to(g: BimanualGrasp) -> list:
    return [[p.l, p.a, p.b, p.delta, p.tilt] for p in g]


def _grasp_from(d) -> BimanualGrasp:
    return BimanualGrasp(*(GraspParams(int(l), int(a), int(b), float(dl), float(t)) for l, a, b, dl, t in d))


def segment_to_dict(seg) -> dict:
    if seg.is_transfer:
        return {"type": "transfer", "kind": seg.kind, "grasp": _grasp_to(seg.grasp),
                "poses": np.asarray(seg.poses)[:, :3, :].reshape(len(seg), 12).tolist(),
                "q1": seg.q1.tolist(), "q2": seg.q2.tolist(), "s": seg.s.tolist(), "meta": _jsonable(seg.meta)}
    return {"type": "transit", "pose": seg.pose[:3, :].reshape(12).tolist(), "q1": seg.q1.tolist(),
            "q2": seg.q2.tolist(), "s": seg.s.tolist(), "meta": _jsonable(seg.meta)}


def _poses_from(rows) -> np.ndarray:
    a = np.asarray(rows, dtype=float).reshape(-1, 3, 4)
    out = np.zeros((len(a), 4, 4))
    out[:, :3, :] = a
    out[:, 3, 3] = 1.0
    return out


def segment_from_dict(d: dict):
    if d["type"] == "transfer":
        return TransferSegment(_grasp_from(d["grasp"]), _poses_from(d["poses"]), d["q1"], d["q2"], d["s"],
                               d["kind"], d.get("meta", {}))
    if d["type"] == "transit":
        return TransitSegment(_poses_from([d["pose"]])[0], d["q1"], d["q2"], d["s"], d.get("meta", {}))
    raise FileFormatError(f"unknown segment type {d['type']!r}")


def trajectory_to_dict(traj: ManipulationTrajectory) -> dict:
    return {"segments": [segment_to_dict(s) for s in traj.segments]}


def trajectory_from_dict(d: dict) -> ManipulationTrajectory:
    return ManipulationTrajectory(tuple(segment_from_dict(s) for s in d["segments"]))


def _coord_to(c: PlacementCoord) -> list:
    return [c.class_id, c.x, c.y, c.theta]


def _coord_from(v) -> PlacementCoord:
    return PlacementCoord(int(v[0]), float(v[1]), float(v[2]), float(v[3]))


def certificate_to_dict(cert: Certificate, metadata: dict | None = None) -> dict:
    return {
        "version": FORMAT_VERSION,
        "kind": "certificate",
        "fingerprint": cert.fingerprint,
        "nodes": [list(n) for n in cert.nodes],
        "unreachable": list(cert.unreachable),
        "entries": [{"a": list(e.a), "b": list(e.b), "start": _coord_to(e.start), "goal": _coord_to(e.goal),
                     "trajectory": trajectory_to_dict(e.trajectory)} for e in cert.entries],
        "meta": _jsonable(cert.meta),
        "metadata": metadata or {},
    }


def certificate_from_dict(d: dict) -> Certificate:
    _check(d, "certificate")
    nodes = [tuple(int(v) for v in n) for n in d["nodes"]]
    entries = [CertEntry(tuple(e["a"]), tuple(e["b"]), _coord_from(e["start"]), _coord_from(e["goal"]),
                         trajectory_from_dict(e["trajectory"])) for e in d["entries"]]
    return Certificate(d["fingerprint"], nodes, entries, list(d.get("unreachable", [])), d.get("meta", {}))


def _check(d: dict, kind: str):
    if not isinstance(d, dict) or "version" not in d:
        raise FileFormatError("missing version field")
    if d["version"] != FORMAT_VERSION:
        raise FileFormatError(f"unsupported version {d['version']}")
    if d.get("kind") != kind:
        raise FileFormatError(f"expected a {kind} file, found {d.get('kind')!r}")


def dumps(d: dict) -> str:
    return json.dumps(d, indent=1, sort_keys=False) + "\n"


def save_certificate(cert: Certificate, path, metadata: dict | None = None) -> Path:
    return atomic_write_text(path, dumps(certificate_to_dict(cert, metadata)))


def load_certificate(path) -> Certificate:
    return certificate_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_trajectory(traj: ManipulationTrajectory, path, fingerprint: str = "", metadata: dict | None = None) -> Path:
    d = {"version": FORMAT_VERSION, "kind": "trajectory", "fingerprint": fingerprint,
         "sample_count": traj.sample_count, **trajectory_to_dict(traj), "metadata": metadata or {}}
    return atomic_write_text(path, dumps(d))


def load_trajectory(path) -> tuple[ManipulationTrajectory, dict]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    _check(d, "trajectory")
    traj = trajectory_from_dict(d)
    if d.get("sample_count", traj.sample_count) != traj.sample_count:
        raise FileFormatError("declared sample count does not match the stored samples")
    return traj, d


def comparable(d: dict) -> dict:
    """A file dictionary without its metadata block (timestamps and timings)."""
    return {k: v for k, v in d.items() if k != "metadata"}


def export_csv(traj: ManipulationTrajectory) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    n1 = traj.segments[0].q1.shape[1] if traj.segments else 0
    n2 = traj.segments[0].q2.shape[1] if traj.segments else 0
    wr.writerow(["segment", "type", "kind", "sample", "s"] + [f"q1_{i}" for i in range(n1)]
                + [f"q2_{i}" for i in range(n2)] + ["x", "y", "z", "qw", "qx", "qy", "qz"])
    for k, seg in enumerate(traj.segments):
        typ = "transfer" if seg.is_transfer else "transit"
        kind = seg.kind if seg.is_transfer else ""
        for i in range(len(seg)):
            P = seg.pose_at(i)
            wr.writerow([k, typ, kind, i, repr(float(seg.s[i]))] + [repr(float(v)) for v in seg.q1[i]]
                        + [repr(float(v)) for v in seg.q2[i]] + [repr(float(v)) for v in P[:3, 3]]
                        + [repr(float(v)) for v in matrix_to_quat(P[:3, :3])])
    return buf.getvalue()


def summary(traj: ManipulationTrajectory, weights: MetricWeights = MetricWeights()) -> dict:
    return {
        "segments": len(traj.segments),
        "transfer_segments": traj.length,
        "transit_segments": len(traj.segments) - traj.length,
        "typeb_segments": traj.n_typeb,
        "typea_transfers": traj.length - traj.n_typeb,
        "regrasps": traj.regrasps,
        "samples": traj.sample_count,
        "path_length": traj.path_length(weights),
    }
