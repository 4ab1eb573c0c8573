"""Scene files: YAML documents describing arms, gripper, object, surfaces and planner
settings. Unknown keys are rejected with the line they appear on."""

from __future__ import annotations

import hashlib
import json
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .kinematics import Box, BranchPredicate, Joint, SerialArm
from .transforms import MetricWeights, Transform, rot_x, rot_y, rot_z
from .world import Gripper, ObjectModel, SupportSurface, World

SCENE_VERSION = 1

PLANNER_DEFAULTS = {
    "grid_dx": 0.02,
    "grid_dtheta_deg": 5.0,
    "grid_deltas": [0.25, 0.5, 0.75],
    "ds": 0.005,
    "check_resolution": 0.01,
    "cc_step_size": 0.15,
    "cc_k_nn": 5,
    "cc_max_iters": 2000,
    "cc_equilibrium": True,
    "shortcut_iterations": 200,
    "typea_budget": 512,
    "transit_budget": 3000,
    "query_retries": 10,
    "pair_time_cap": 600.0,
    "ik_seeds": 8,
}


class SceneError(ValueError):
    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line is not None else msg)
        self.line = line


class _LineDict(dict):
    """Mapping that remembers the source line of each key."""

    lines: dict


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node):
    loader.flatten_mapping(node)
    d = _LineDict()
    d.lines = {}
    for k_node, v_node in node.value:
        key = loader.construct_object(k_node, deep=True)
        d[key] = loader.construct_object(v_node, deep=True)
        d.lines[key] = k_node.start_mark.line + 1
    d.lines["__self__"] = node.start_mark.line + 1
    return d


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _line(d, key=None):
    if isinstance(d, _LineDict):
        return d.lines.get(key, d.lines.get("__self__"))
    return None


def _mapping(d, allowed: set, required: set, where: str):
    if not isinstance(d, dict):
        raise SceneError(f"{where}: expected a mapping")
    for k in d:
        if k not in allowed:
            raise SceneError(f"{where}: unknown key {k!r}", _line(d, k))
    for k in required:
        if k not in d:
            raise SceneError(f"{where}: missing key {k!r}", _line(d))
    return d


def _vec(d, key, n, where, default=None):
    v = d.get(key, default)
    try:
        a = np.array(v, dtype=float)
    except (TypeError, ValueError):
        raise SceneError(f"{where}.{key}: expected {n} numbers", _line(d, key)) from None
    if a.shape != (n,) or not np.all(np.isfinite(a)):
        raise SceneError(f"{where}.{key}: expected {n} numbers", _line(d, key))
    return a


def _num(d, key, where, default=None):
    v = d.get(key, default)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SceneError(f"{where}.{key}: expected a number", _line(d, key))
    return float(v)


def rpy_matrix(rpy) -> np.ndarray:
    r, p, y = rpy
    return rot_z(y) @ rot_y(p) @ rot_x(r)


def _pose(d, where) -> Transform:
    if d is None:
        return Transform.identity()
    _mapping(d, {"translation", "rpy"}, set(), where)
    t = _vec(d, "translation", 3, where, [0.0, 0.0, 0.0])
    rpy = _vec(d, "rpy", 3, where, [0.0, 0.0, 0.0])
    return Transform(rpy_matrix(rpy), t, check=False)


def _box(d, where) -> Box:
    _mapping(d, {"half", "origin"}, {"half"}, where)
    half = _vec(d, "half", 3, where)
    if np.any(half <= 0):
        raise SceneError(f"{where}.half: extents must be positive", _line(d, "half"))
    return Box(half, _pose(d.get("origin"), where + ".origin"))


def _arm(d, where) -> SerialArm:
    _mapping(d, {"name", "base", "joints", "links", "tool", "branch_predicates"},
             {"base", "joints", "links", "tool"}, where)
    joints = []
    for i, jd in enumerate(d["joints"]):
        w = f"{where}.joints[{i}]"
        _mapping(jd, {"axis", "origin", "limits"}, {"axis", "limits"}, w)
        axis = _vec(jd, "axis", 3, w)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise SceneError(f"{w}.axis: must be a unit vector", _line(jd, "axis"))
        lim = _vec(jd, "limits", 2, w)
        if not lim[0] < lim[1]:
            raise SceneError(f"{w}.limits: need lo < hi", _line(jd, "limits"))
        joints.append(Joint(axis, _pose(jd.get("origin"), w + ".origin"), lim[0], lim[1]))
    links = d["links"]
    if not isinstance(links, list) or len(links) != len(joints) + 1:
        raise SceneError(f"{where}.links: need {len(joints) + 1} entries (base link plus one per joint)",
                         _line(d, "links"))
    shapes = [[_box(b, f"{where}.links[{i}][{j}]") for j, b in enumerate(lk or [])]
              for i, lk in enumerate(links)]
    preds = []
    for i, pd in enumerate(d.get("branch_predicates", []) or []):
        w = f"{where}.branch_predicates[{i}]"
        _mapping(pd, {"kind", "joint", "offset", "ref", "component"}, {"kind", "joint"}, w)
        if pd["kind"] not in ("joint_sin", "point_coord"):
            raise SceneError(f"{w}.kind: unknown predicate kind {pd['kind']!r}", _line(pd, "kind"))
        preds.append(BranchPredicate(pd["kind"], int(pd["joint"]), float(pd.get("offset", 0.0)),
                                     int(pd.get("ref", 0)), int(pd.get("component", 0))))
    try:
        return SerialArm(_pose(d["base"], where + ".base"), joints, shapes,
                         _pose(d["tool"], where + ".tool"), preds, str(d.get("name", "arm")))
    except ValueError as exc:
        raise SceneError(f"{where}: {exc}", _line(d)) from None


def _strip(obj):
    if isinstance(obj, dict):
        return {str(k): _strip(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_strip(v) for v in obj]
    return obj


def fingerprint_of(data) -> str:
    canon = json.dumps(_strip(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


TOP_KEYS = {"version", "name", "arms", "gripper", "object", "surfaces", "obstacles", "gravity",
            "metric", "friction", "manipulation_point", "center_line", "planner", "models"}


def world_from_data(data) -> World:
    _mapping(data, TOP_KEYS, {"arms", "gripper", "object", "surfaces"}, "scene")
    if data.get("version", SCENE_VERSION) != SCENE_VERSION:
        raise SceneError(f"unsupported scene version {data.get('version')!r}", _line(data, "version"))
    arms = data["arms"]
    if not isinstance(arms, list) or len(arms) != 2:
        raise SceneError("scene.arms: exactly two arms are required", _line(data, "arms"))
    arm_objs = [_arm(a, f"arms[{i}]") for i, a in enumerate(arms)]

    gd = _mapping(data["gripper"], {"stroke", "finger_depth", "pad_length", "pad_width", "finger_thickness",
                                    "palm_half", "flange_offset"}, {"stroke"}, "gripper")
    base = Gripper()
    gripper = Gripper(
        stroke=_num(gd, "stroke", "gripper"),
        finger_depth=_num(gd, "finger_depth", "gripper", base.finger_depth),
        pad_length=_num(gd, "pad_length", "gripper", base.pad_length),
        pad_width=_num(gd, "pad_width", "gripper", base.pad_width),
        finger_thickness=_num(gd, "finger_thickness", "gripper", base.finger_thickness),
        palm_half=tuple(_vec(gd, "palm_half", 3, "gripper", base.palm_half)),
        flange_offset=_num(gd, "flange_offset", "gripper", base.flange_offset),
    )

    od = _mapping(data["object"], {"links", "mass", "center_of_mass"}, {"links", "mass"}, "object")
    links = [_box(b, f"object.links[{i}]") for i, b in enumerate(od["links"] or [])]
    if not links:
        raise SceneError("object.links: at least one box is required", _line(od, "links"))
    mass = _num(od, "mass", "object")
    if mass <= 0:
        raise SceneError("object.mass: must be positive", _line(od, "mass"))
    if "center_of_mass" in od:
        com = _vec(od, "center_of_mass", 3, "object")
    else:
        vols = np.array([np.prod(b.half) for b in links])
        com = sum(v * b.frame.translation for v, b in zip(vols, links)) / vols.sum()
    obj = ObjectModel(tuple(links), mass, com)

    surfaces = []
    for i, sd in enumerate(data["surfaces"] or []):
        w = f"surfaces[{i}]"
        _mapping(sd, {"origin", "half_extents", "thickness"}, {"half_extents"}, w)
        try:
            surfaces.append(SupportSurface(_pose(sd.get("origin"), w + ".origin"),
                                           tuple(_vec(sd, "half_extents", 2, w)),
                                           _num(sd, "thickness", w, 0.02)))
        except ValueError as exc:
            raise SceneError(f"{w}: {exc}", _line(sd)) from None
    if not surfaces:
        raise SceneError("scene.surfaces: at least one support surface is required", _line(data, "surfaces"))
    obstacles = [_box(b, f"obstacles[{i}]") for i, b in enumerate(data.get("obstacles") or [])]

    md = _mapping(data.get("metric", {}), {"alpha", "rot_weight", "trans_weight"}, set(), "metric")
    try:
        weights = MetricWeights(_num(md, "alpha", "metric", 0.5), _num(md, "rot_weight", "metric", 1.0),
                                _num(md, "trans_weight", "metric", 1.0))
    except ValueError as exc:
        raise SceneError(f"metric: {exc}", _line(data, "metric")) from None
    fd = _mapping(data.get("friction", {}), {"mu", "cone_edges"}, set(), "friction")
    mu = _num(fd, "mu", "friction", 0.5)
    edges = int(_num(fd, "cone_edges", "friction", 8))
    if mu < 0 or edges < 3:
        raise SceneError("friction: need mu >= 0 and cone_edges >= 3", _line(data, "friction"))
    pd = data.get("planner", {}) or {}
    _mapping(pd, set(PLANNER_DEFAULTS), set(), "planner")
    params = dict(PLANNER_DEFAULTS)
    params.update(_strip(pd))
    gravity = _vec(data, "gravity", 3, "scene", [0.0, 0.0, -9.81])
    mp = _vec(data, "manipulation_point", 2, "scene", [0.0, 0.0])
    cl = _vec(data, "center_line", 2, "scene", [1.0, 0.0])
    return World(arm_objs, gripper, obj, surfaces, obstacles, gravity, weights, mu, edges, mp, cl,
                 fingerprint_of(data), params)


def parse_scene(text: str) -> World:
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise SceneError(f"YAML syntax error: {exc.problem}", line) from None
    if not isinstance(data, dict):
        raise SceneError("scene must be a mapping", 1)
    return world_from_data(data)


def load_scene(path) -> World:
    """Load a scene file; bare names resolve to the bundled scenes."""
    p = Path(path)
    if not p.exists() and not p.suffix:
        p = Path(str(resources.files("bimanip") / "scenes" / f"{path}.yaml"))
    try:
        text = p.read_text()
    except OSError as exc:
        raise SceneError(f"cannot read scene file {path}: {exc.strerror}") from None
    return parse_scene(text)


def bundled_scenes() -> list[str]:
    return sorted(p.name[:-5] for p in (resources.files("bimanip") / "scenes").iterdir()
                  if p.name.endswith(".yaml"))
