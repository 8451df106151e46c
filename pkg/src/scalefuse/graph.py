"""Multi-session Sim(3) pose graph with per-session anchor vertices.

World pose of keyframe ``i`` of session ``r`` is ``anchor_r @ keyframe_r_i``.
Vertices are keyed ``("kf", session, index)`` and ``("anchor", session)``;
all perturbations are on the left, ``v <- exp(d) @ v``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import lie
from .lie import Sim3


class GraphError(ValueError):
    """Referential-integrity or lookup failure."""


class IllConditionedResidualError(ValueError):
    """A residual hit the logarithm singularity."""


class SnapshotError(ValueError):
    """Token is stale or belongs to another graph."""


@dataclass(frozen=True)
class InformationWeights:
    """Diagonal information ``diag(w_R I3, w_t I3, w_s)``."""

    w_R: float = 1.0
    w_t: float = 1.0
    w_s: float = 1.0

    def __post_init__(self):
        for name in ("w_R", "w_t", "w_s"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")

    def diagonal(self):
        return np.array([self.w_R] * 3 + [self.w_t] * 3 + [self.w_s])

    def to_dict(self):
        return {"w_R": self.w_R, "w_t": self.w_t, "w_s": self.w_s}


ODOMETRY_WEIGHTS = InformationWeights(100.0, 100.0, 100.0)
LOOP_WEIGHTS = InformationWeights(1.0, 1.0, 1.0)


@dataclass(frozen=True)
class KeyframeVertex:
    session: int
    index: int
    pose: Sim3
    fixed: bool = False

    @property
    def key(self):
        return ("kf", self.session, self.index)


@dataclass(frozen=True)
class AnchorVertex:
    session: int
    transform: Sim3
    fixed: bool = False

    @property
    def key(self):
        return ("anchor", self.session)


@dataclass(frozen=True)
class OdometryEdge:
    session: int
    from_index: int
    to_index: int
    measurement: Sim3
    weights: InformationWeights = ODOMETRY_WEIGHTS

    def __post_init__(self):
        if self.to_index != self.from_index + 1:
            raise GraphError("odometry edges join consecutive keyframes")


@dataclass(frozen=True)
class LoopEdge:
    """4-vertex loop factor between ``(session_a, index_a)`` and ``(session_b, index_b)``.

    ``measurement`` is the relative world pose ``T_a^-1 T_b``.
    """

    endpoint_a: tuple
    endpoint_b: tuple
    measurement: Sim3
    weights: InformationWeights = LOOP_WEIGHTS
    edge_id: int = -1

    def __post_init__(self):
        object.__setattr__(self, "endpoint_a", (int(self.endpoint_a[0]), int(self.endpoint_a[1])))
        object.__setattr__(self, "endpoint_b", (int(self.endpoint_b[0]), int(self.endpoint_b[1])))
        (r, i), (s, j) = self.endpoint_a, self.endpoint_b
        if r == s and abs(i - j) <= 1:
            raise GraphError("same-session loop edges need an index gap above 1")

    @property
    def inter_session(self):
        return self.endpoint_a[0] != self.endpoint_b[0]

    def reversed(self):
        return replace(self, endpoint_a=self.endpoint_b, endpoint_b=self.endpoint_a,
                       measurement=self.measurement.inverse())

    def label(self):
        (r, i), (s, j) = self.endpoint_a, self.endpoint_b
        return f"{r}:{i}-{s}:{j}"


def _edges_equal(x, y):
    if x is y:
        return True
    if type(x) is not type(y):
        return False
    for f in fields(x):
        u, v = getattr(x, f.name), getattr(y, f.name)
        same = u.equals(v) if isinstance(u, Sim3) else u == v
        if not same:
            return False
    return True


# kept for readers who know the factor by its multi-robot name
InterSessionLoopEdge = LoopEdge


@dataclass(frozen=True)
class SnapshotToken:
    graph_id: int
    serial: int


@dataclass
class _State:
    keyframes: dict = field(default_factory=dict)
    anchors: dict = field(default_factory=dict)
    odometry: list = field(default_factory=list)
    loops: dict = field(default_factory=dict)

    def copy(self):
        # contents are immutable, shallow copies are exact
        return _State(dict(self.keyframes), dict(self.anchors), list(self.odometry), dict(self.loops))


_graph_ids = itertools.count()


def _residual(Z, Ti, Tj):
    delta = lie.compose(lie.compose(Z.inverse(), Ti.inverse()), Tj)
    try:
        return lie.log(delta), Tj
    except lie.IllConditionedLogError as exc:
        raise IllConditionedResidualError(str(exc)) from exc


def relative_jacobians(e, Tj):
    """Jacobians of ``log(Z^-1 Ti^-1 Tj)`` w.r.t. left perturbations of Ti and Tj."""
    J = lie.jr_inv(e) @ lie.adjoint(Tj.inverse())
    return -J, J


class PoseGraph:
    """Keyframes, anchors, odometry edges and loop edges, with snapshot/restore."""

    def __init__(self):
        self._state = _State()
        self._id = next(_graph_ids)
        self._serial = itertools.count()
        self._snapshots = {}
        self._edge_ids = itertools.count()

    # -- construction -----------------------------------------------------
    def add_anchor(self, session, transform=None, fixed=False):
        session = int(session)
        if session < 0:
            raise GraphError("session ids are non-negative")
        transform = Sim3.identity() if transform is None else transform
        self._state.anchors[session] = AnchorVertex(session, transform, fixed)

    def add_keyframe(self, session, index, pose, fixed=False):
        session, index = int(session), int(index)
        expected = self.num_keyframes(session)
        if index != expected:
            raise GraphError(f"session {session}: next keyframe index is {expected}, got {index}")
        if session not in self._state.anchors:
            self.add_anchor(session)
        self._state.keyframes[(session, index)] = KeyframeVertex(session, index, pose, fixed)

    def add_odometry(self, edge: OdometryEdge):
        for idx in (edge.from_index, edge.to_index):
            self._require_keyframe(edge.session, idx)
        self._state.odometry.append(edge)

    def add_loop(self, edge: LoopEdge):
        """Insert a loop edge and return its id."""
        self._require_keyframe(*edge.endpoint_a)
        self._require_keyframe(*edge.endpoint_b)
        edge_id = next(self._edge_ids) if edge.edge_id < 0 else edge.edge_id
        edge = replace(edge, edge_id=edge_id)
        if edge_id in self._state.loops:
            raise GraphError(f"duplicate loop edge id {edge_id}")
        self._state.loops[edge_id] = edge
        return edge_id

    add_edge = add_loop

    def remove_edge(self, edge_id):
        try:
            del self._state.loops[edge_id]
        except KeyError:
            raise GraphError(f"no loop edge with id {edge_id}") from None

    def add_session(self, session, poses, measurements=None, weights=ODOMETRY_WEIGHTS):
        """Append a whole session chain; measurements default to the pose deltas."""
        for k, pose in enumerate(poses):
            self.add_keyframe(session, k, pose)
        for k in range(len(poses) - 1):
            Z = (lie.compose(poses[k].inverse(), poses[k + 1]) if measurements is None
                 else measurements[k])
            self.add_odometry(OdometryEdge(session, k, k + 1, Z, weights))

    def _require_keyframe(self, session, index):
        if (session, index) not in self._state.keyframes:
            raise GraphError(f"unknown keyframe ({session}, {index})")

    # -- queries ----------------------------------------------------------
    @property
    def sessions(self):
        return sorted(self._state.anchors)

    @property
    def loops(self):
        return [self._state.loops[k] for k in sorted(self._state.loops)]

    @property
    def odometry(self):
        return list(self._state.odometry)

    def loop(self, edge_id):
        return self._state.loops[edge_id]

    def num_keyframes(self, session=None):
        if session is None:
            return len(self._state.keyframes)
        n = 0
        while (session, n) in self._state.keyframes:
            n += 1
        return n

    def keyframe(self, session, index):
        try:
            return self._state.keyframes[(session, index)]
        except KeyError:
            raise GraphError(f"unknown keyframe ({session}, {index})") from None

    def anchor(self, session):
        try:
            return self._state.anchors[session]
        except KeyError:
            raise GraphError(f"unknown session {session}") from None

    def keyframe_keys(self, session=None):
        keys = sorted(self._state.keyframes)
        if session is not None:
            keys = [k for k in keys if k[0] == session]
        return keys

    def local_poses(self, session):
        return [self._state.keyframes[k].pose for k in self.keyframe_keys(session)]

    def world_pose(self, session, index):
        kf = self.keyframe(session, index)
        return lie.compose(self.anchor(session).transform, kf.pose)

    def world_poses(self, session=None):
        """World poses keyed by ``(session, index)`` in sorted order."""
        return {k: self.world_pose(*k) for k in self.keyframe_keys(session)}

    def world_scales(self, keys=None):
        keys = self.keyframe_keys() if keys is None else keys
        return np.array([self.anchor(k[0]).transform.scale * self._state.keyframes[k].pose.scale
                         for k in keys])

    # -- vertex access for the optimizer ---------------------------------
    def vertex_keys(self):
        return ([("anchor", s) for s in self.sessions]
                + [("kf", s, i) for s, i in self.keyframe_keys()])

    def get_pose(self, key):
        if key[0] == "anchor":
            return self.anchor(key[1]).transform
        return self.keyframe(key[1], key[2]).pose

    def set_pose(self, key, pose):
        if key[0] == "anchor":
            v = self.anchor(key[1])
            self._state.anchors[key[1]] = replace(v, transform=pose)
        else:
            v = self.keyframe(key[1], key[2])
            self._state.keyframes[(key[1], key[2])] = replace(v, pose=pose)

    def is_fixed(self, key):
        if key[0] == "anchor":
            return self.anchor(key[1]).fixed
        return self.keyframe(key[1], key[2]).fixed

    def set_fixed(self, key, fixed=True):
        if key[0] == "anchor":
            self._state.anchors[key[1]] = replace(self.anchor(key[1]), fixed=fixed)
        else:
            self._state.keyframes[(key[1], key[2])] = replace(self.keyframe(key[1], key[2]),
                                                              fixed=fixed)

    # -- residuals and Jacobians ------------------------------------------
    def loop_residual(self, edge: LoopEdge):
        Ti = self.world_pose(*edge.endpoint_a)
        Tj = self.world_pose(*edge.endpoint_b)
        return _residual(edge.measurement, Ti, Tj)[0]

    def odometry_residual(self, edge: OdometryEdge):
        Xi = self.keyframe(edge.session, edge.from_index).pose
        Xj = self.keyframe(edge.session, edge.to_index).pose
        return _residual(edge.measurement, Xi, Xj)[0]

    def loop_jacobians(self, edge: LoopEdge):
        """Residual and the four blocks ``(dS_r, dX_i, dS_s, dX_j)``."""
        (r, i), (s, j) = edge.endpoint_a, edge.endpoint_b
        Sr, Ss = self.anchor(r).transform, self.anchor(s).transform
        Ti = lie.compose(Sr, self.keyframe(r, i).pose)
        Tj = lie.compose(Ss, self.keyframe(s, j).pose)
        e, _ = _residual(edge.measurement, Ti, Tj)
        J_Ti, J_Tj = relative_jacobians(e, Tj)
        return e, (J_Ti, J_Ti @ lie.adjoint(Sr), J_Tj, J_Tj @ lie.adjoint(Ss))

    def linearize_loop(self, edge: LoopEdge):
        e, (JSr, JXi, JSs, JXj) = self.loop_jacobians(edge)
        (r, i), (s, j) = edge.endpoint_a, edge.endpoint_b
        blocks = [(("anchor", r), JSr), (("kf", r, i), JXi),
                  (("anchor", s), JSs), (("kf", s, j), JXj)]
        return e, blocks

    def linearize_odometry(self, edge: OdometryEdge):
        Xi = self.keyframe(edge.session, edge.from_index).pose
        Xj = self.keyframe(edge.session, edge.to_index).pose
        e, _ = _residual(edge.measurement, Xi, Xj)
        Ji, Jj = relative_jacobians(e, Xj)
        return e, [(("kf", edge.session, edge.from_index), Ji),
                   (("kf", edge.session, edge.to_index), Jj)]

    def edges(self):
        """All edges in a fixed order: odometry first, then loops by id."""
        return [("odometry", e) for e in self._state.odometry] + [("loop", e) for e in self.loops]

    def residual(self, kind, edge):
        return self.odometry_residual(edge) if kind == "odometry" else self.loop_residual(edge)

    def weighted_chi2(self):
        total = 0.0
        for kind, edge in self.edges():
            e = self.residual(kind, edge)
            total += float(e @ (edge.weights.diagonal() * e))
        return total

    # -- gauge ------------------------------------------------------------
    def session_components(self):
        """Connected components of the session graph induced by loop edges."""
        parent = {s: s for s in self.sessions}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for edge in self.loops:
            a, b = find(edge.endpoint_a[0]), find(edge.endpoint_b[0])
            if a != b:
                parent[max(a, b)] = min(a, b)
        groups = {}
        for s in self.sessions:
            groups.setdefault(find(s), []).append(s)
        return sorted(groups.values())

    def fix_gauge(self):
        """Fix the lowest-id anchor of each component to identity; free the rest."""
        for comp in self.session_components():
            gauge = comp[0]
            self._state.anchors[gauge] = AnchorVertex(gauge, Sim3.identity(), True)
            for s in comp[1:]:
                self._state.anchors[s] = replace(self._state.anchors[s], fixed=False)

    # -- transactions -----------------------------------------------------
    def snapshot(self):
        token = SnapshotToken(self._id, next(self._serial))
        self._snapshots[token.serial] = self._state.copy()
        return token

    def restore(self, token):
        self._check_token(token)
        self._state = self._snapshots[token.serial].copy()

    def discard(self, token):
        self._check_token(token)
        del self._snapshots[token.serial]

    def _check_token(self, token):
        if not isinstance(token, SnapshotToken) or token.graph_id != self._id:
            raise SnapshotError("snapshot token belongs to another graph")
        if token.serial not in self._snapshots:
            raise SnapshotError("snapshot token is stale")

    def copy(self):
        g = PoseGraph()
        g._state = self._state.copy()
        g._edge_ids = itertools.count(max(self._state.loops, default=-1) + 1)
        return g

    def state_equal(self, other):
        """Bit-exact comparison of vertices and edge sets."""
        a, b = self._state, other._state
        if a.keyframes.keys() != b.keyframes.keys() or a.anchors.keys() != b.anchors.keys():
            return False
        for k, v in a.keyframes.items():
            w = b.keyframes[k]
            if v.fixed != w.fixed or not v.pose.equals(w.pose):
                return False
        for k, v in a.anchors.items():
            w = b.anchors[k]
            if v.fixed != w.fixed or not v.transform.equals(w.transform):
                return False
        return (len(a.odometry) == len(b.odometry)
                and all(map(_edges_equal, a.odometry, b.odometry))
                and a.loops.keys() == b.loops.keys()
                and all(_edges_equal(a.loops[k], b.loops[k]) for k in a.loops))


def world_pose(graph: PoseGraph, session, index):
    return graph.world_pose(session, index)


def loop_residual(graph: PoseGraph, edge: LoopEdge):
    return graph.loop_residual(edge)


def odometry_residual(graph: PoseGraph, edge: OdometryEdge):
    return graph.odometry_residual(edge)


def loop_jacobians(graph: PoseGraph, edge: LoopEdge):
    return graph.loop_jacobians(edge)[1]


def weighted_chi2(graph: PoseGraph):
    return graph.weighted_chi2()


def align_component(graph: PoseGraph, edge: LoopEdge, moving, use_scale=True):
    """Move every anchor in ``moving`` by one common transform so ``edge`` is satisfied.

    With ``use_scale=False`` the correction keeps the moving side's world scale
    (rotation and position of the far keyframe are matched, scale is not).
    """
    (r, i), (s, j) = edge.endpoint_a, edge.endpoint_b
    Z = edge.measurement
    if s in moving:
        target = lie.compose(graph.world_pose(r, i), Z)
        current = graph.world_pose(s, j)
    else:
        target = lie.compose(graph.world_pose(s, j), Z.inverse())
        current = graph.world_pose(r, i)
    if not use_scale:
        target = Sim3(target.rotation, target.translation, current.scale)
    G = lie.compose(target, current.inverse())
    for q in moving:
        graph.set_pose(("anchor", q), lie.compose(G, graph.anchor(q).transform))
