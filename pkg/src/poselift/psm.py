"""Tree-structured pictorial-structure model over 2D joint locations.

Unary score maps are supplied as dense grids (loaded from file or
synthesized); binary potentials are Gaussian mixtures over joint offsets,
fitted by seeded k-means.  MAP inference is exact max-product on the
skeleton tree in the log domain, restricted to per-joint candidate lists.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from .skeleton import DEFAULT_SKELETON, JOINT_SET_LABELS, Pose2D, Skeleton

UNARY_MAGIC = b"DSUM"
UNARY_VERSION = 1

SCORE_FLOOR = 1e-300


class DeadJointError(ValueError):
    """A joint has no candidate with positive unary score."""


@dataclass
class UnaryMap:
    """Per-joint dense score grids over image coordinates.

    ``grids`` has shape (n_joints, height, width); cell (r, c) of joint i
    scores the location (c * stride, r * stride) in pixels (y-up convention,
    consistent with the rest of the library).  Scores are nonnegative and
    need not be normalized.
    """

    grids: np.ndarray
    stride: float = 1.0
    provenance: str = "synthetic"

    def __post_init__(self) -> None:
        self.grids = np.asarray(self.grids, dtype=np.float32)

    @property
    def n_joints(self) -> int:
        return self.grids.shape[0]

    def sample(self, joint: int, xy: np.ndarray) -> np.ndarray:
        """Bilinear interpolation of joint ``joint``'s grid; zero outside."""
        xy = np.asarray(xy, dtype=float)
        g = self.grids[joint]
        h, w = g.shape
        gx = xy[..., 0] / self.stride
        gy = xy[..., 1] / self.stride
        x0 = np.floor(gx).astype(int)
        y0 = np.floor(gy).astype(int)
        fx = gx - x0
        fy = gy - y0
        out = np.zeros(xy.shape[:-1], dtype=float)
        for dx, dy, wgt in (
            (0, 0, (1 - fx) * (1 - fy)),
            (1, 0, fx * (1 - fy)),
            (0, 1, (1 - fx) * fy),
            (1, 1, fx * fy),
        ):
            xi = x0 + dx
            yi = y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            out += np.where(ok, wgt * g[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)], 0.0)
        return out

    def sample_pose(self, joints_xy: np.ndarray) -> np.ndarray:
        """Sum of per-joint unary scores for full poses (..., n_joints, 2)."""
        joints_xy = np.asarray(joints_xy, dtype=float)
        total = np.zeros(joints_xy.shape[:-2], dtype=float)
        for j in range(self.n_joints):
            total += self.sample(j, joints_xy[..., j, :])
        return total

    def _subpixel(self, joint: int, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Quadratic peak interpolation around grid cells, (m, 2) in pixels."""
        g = self.grids[joint].astype(float)
        h, w = g.shape
        fx = np.zeros(len(rows))
        fy = np.zeros(len(rows))
        inx = (cols > 0) & (cols < w - 1)
        iny = (rows > 0) & (rows < h - 1)
        r, c = rows[inx], cols[inx]
        denom = g[r, c - 1] - 2.0 * g[r, c] + g[r, c + 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            off = 0.5 * (g[r, c - 1] - g[r, c + 1]) / denom
        fx[inx] = np.clip(np.where(np.isfinite(off), off, 0.0), -0.5, 0.5)
        r, c = rows[iny], cols[iny]
        denom = g[r - 1, c] - 2.0 * g[r, c] + g[r + 1, c]
        with np.errstate(divide="ignore", invalid="ignore"):
            off = 0.5 * (g[r - 1, c] - g[r + 1, c]) / denom
        fy[iny] = np.clip(np.where(np.isfinite(off), off, 0.0), -0.5, 0.5)
        return np.stack([(cols + fx) * self.stride, (rows + fy) * self.stride], axis=1)

    def argmax_locations(self) -> np.ndarray:
        """Sub-pixel location of the best-scoring cell per joint, (n_joints, 2)."""
        n, h, w = self.grids.shape
        flat = self.grids.reshape(n, -1).argmax(axis=1)
        return np.stack(
            [
                self._subpixel(j, np.array([flat[j] // w]), np.array([flat[j] % w]))[0]
                for j in range(n)
            ]
        ).astype(float)

    def local_maxima(self, joint: int, top_n: int = 20) -> np.ndarray:
        """Sub-pixel locations of the top local maxima of one grid, (m, 2)."""
        g = self.grids[joint]
        h, w = g.shape
        pad = np.full((h + 2, w + 2), -np.inf, dtype=g.dtype)
        pad[1:-1, 1:-1] = g
        core = pad[1:-1, 1:-1]
        is_max = (
            (core >= pad[:-2, 1:-1])
            & (core >= pad[2:, 1:-1])
            & (core >= pad[1:-1, :-2])
            & (core >= pad[1:-1, 2:])
            & (core > 0)
        )
        rows, cols = np.nonzero(is_max)
        if rows.size == 0:
            return np.empty((0, 2))
        order = np.argsort(-core[rows, cols], kind="stable")[:top_n]
        return self._subpixel(joint, rows[order], cols[order]).astype(float)

    def candidate_grid(self, joint: int, quantile: float = 0.99) -> np.ndarray:
        """All cell locations whose score exceeds the given quantile floor."""
        g = self.grids[joint]
        floor = np.quantile(g, quantile)
        rows, cols = np.nonzero(g > max(floor, 0.0))
        if rows.size == 0:
            rows, cols = np.nonzero(g == g.max())
        return np.stack([cols * self.stride, rows * self.stride], axis=1).astype(float)

    def save(self, path) -> None:
        n, h, w = self.grids.shape
        with open(path, "wb") as fh:
            fh.write(UNARY_MAGIC)
            fh.write(struct.pack("<HHIIf", UNARY_VERSION, n, w, h, self.stride))
            fh.write(self.grids.astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "UnaryMap":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != UNARY_MAGIC:
                raise ValueError(f"not a unary map file (magic {magic!r})")
            version, n, w, h, stride = struct.unpack("<HHIIf", fh.read(16))
            if version != UNARY_VERSION:
                raise ValueError(f"unsupported unary map version {version}")
            grids = np.frombuffer(fh.read(4 * n * h * w), dtype="<f4").reshape(n, h, w)
        return cls(grids.copy(), float(stride), provenance="loaded")


def synthesize_unaries(
    joints_2d: np.ndarray,
    sigma: float,
    width: int,
    height: int,
    stride: float = 4.0,
    corrupt_joints: np.ndarray | None = None,
    corrupt_offset: np.ndarray | None = None,
) -> UnaryMap:
    """Isotropic Gaussian score maps around given 2D joints.

    ``corrupt_joints`` moves the listed joints' peaks by ``corrupt_offset``
    pixels, emulating a failing 2D joint detector.
    """
    joints_2d = np.asarray(joints_2d, dtype=float).copy()
    if corrupt_joints is not None:
        joints_2d[np.asarray(corrupt_joints, dtype=int)] += np.asarray(corrupt_offset, dtype=float)
    gw = int(np.ceil(width / stride))
    gh = int(np.ceil(height / stride))
    xs = np.arange(gw) * stride
    ys = np.arange(gh) * stride
    gx, gy = np.meshgrid(xs, ys)
    sig = max(float(sigma), 1e-6)
    grids = np.empty((joints_2d.shape[0], gh, gw), dtype=np.float32)
    for j, (jx, jy) in enumerate(joints_2d):
        grids[j] = np.exp(-((gx - jx) ** 2 + (gy - jy) ** 2) / (2.0 * sig * sig))
    return UnaryMap(grids, stride, provenance="synthetic")


@dataclass
class GMMBinary:
    """Gaussian mixture over the 2D offset between an edge's joints.

    Component ``c`` contributes weight * exp(-0.5 (d-mu)' inv(Sigma) (d-mu))
    with d = x_child - x_parent.
    """

    means: np.ndarray  # (C, 2)
    covariances: np.ndarray  # (C, 2, 2)
    weights: np.ndarray  # (C,)
    alpha: float = 0.1
    normalized: bool = False
    _inv: np.ndarray = field(init=False, repr=False)
    _norm: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=float)
        self.covariances = np.asarray(self.covariances, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        self._inv = np.linalg.inv(self.covariances)
        if self.normalized:
            self._norm = 1.0 / (2.0 * np.pi * np.sqrt(np.linalg.det(self.covariances)))
        else:
            self._norm = np.ones(len(self.weights))

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def score(self, d: np.ndarray) -> np.ndarray:
        """Mixture score for offsets d of shape (..., 2), floored at 1e-300.

        With ``normalized`` the components are proper Gaussian densities, so
        broad covariances score low; otherwise each component peaks at its
        bare cluster weight.
        """
        d = np.asarray(d, dtype=float)
        dev = d[..., None, :] - self.means  # (..., C, 2)
        quad = np.einsum("...ca,cab,...cb->...c", dev, self._inv, dev)
        val = (self.weights * self._norm * np.exp(-0.5 * quad)).sum(axis=-1)
        return np.maximum(val, SCORE_FLOOR)


@dataclass
class PsmModel:
    """Skeleton tree plus one fitted GMM binary per edge."""

    skeleton: Skeleton
    binaries: dict[tuple[int, int], GMMBinary]

    def __post_init__(self) -> None:
        missing = [e for e in self.skeleton.edges if e not in self.binaries]
        if missing:
            raise ValueError(f"missing binaries for edges {missing}")


def fit_binaries(
    offsets: dict[tuple[int, int], np.ndarray],
    n_components: int,
    alpha: float = 0.1,
    seed: int = 0,
    cov_reg: float = 1.0,
    normalized: bool = False,
) -> dict[tuple[int, int], GMMBinary]:
    """Cluster per-edge offsets with seeded k-means and fit one Gaussian each.

    Cluster weight is (cluster fraction) ** alpha; covariances get +cov_reg*I
    (default 1 px^2) so single-point clusters stay positive definite.  When an
    edge has fewer offsets than requested components the count is reduced
    with a warning.  ``normalized`` makes the components proper densities,
    which is needed whenever scores are compared across differently fitted
    models.
    """
    out = {}
    for k, (edge, d) in enumerate(sorted(offsets.items())):
        d = np.asarray(d, dtype=float)
        c = n_components
        if len(d) < c:
            warnings.warn(f"edge {edge}: only {len(d)} offsets, reducing components from {c}")
            c = len(d)
        if c < 1:
            raise ValueError(f"edge {edge}: no offsets to fit")
        if c == 1 or np.allclose(d, d[0]):
            labels = np.zeros(len(d), dtype=int)
            c = 1
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")  # kmeans2 warns on empty clusters
                _, labels = kmeans2(d, c, minit="++", seed=seed + k, iter=25)
        means, covs, wts = [], [], []
        for ci in range(c):
            mask = labels == ci
            if not mask.any():
                continue
            pts = d[mask]
            means.append(pts.mean(axis=0))
            dev = pts - pts.mean(axis=0)
            covs.append(dev.T @ dev / len(pts) + cov_reg * np.eye(2))
            wts.append((len(pts) / len(d)) ** alpha)
        out[edge] = GMMBinary(np.array(means), np.array(covs), np.array(wts), alpha, normalized)
    return out


def eval_binary(binary: GMMBinary, xi: np.ndarray, xj: np.ndarray) -> np.ndarray:
    """Mixture score for child location(s) xi relative to parent xj."""
    return binary.score(np.asarray(xi, dtype=float) - np.asarray(xj, dtype=float))


def _children_of(skeleton: Skeleton) -> dict[int, list[tuple[int, tuple[int, int]]]]:
    by_parent: dict[int, list[tuple[int, tuple[int, int]]]] = {}
    for edge in skeleton.edges:
        child, parent = edge
        by_parent.setdefault(parent, []).append((child, edge))
    for lst in by_parent.values():
        lst.sort()
    return by_parent


def infer_map(
    model: PsmModel,
    unaries: UnaryMap,
    candidates: dict[int, np.ndarray] | None = None,
    candidate_quantile: float = 0.99,
) -> tuple[Pose2D, float]:
    """Exact MAP over the tree restricted to per-joint candidate lists.

    Returns the best pose and its unnormalized log-posterior.  Ties are
    broken toward lower candidate indices.  Without explicit candidates, all
    grid cells above the quantile floor are used.
    """
    skeleton = model.skeleton
    n = skeleton.n_joints
    if candidates is None:
        candidates = {j: unaries.candidate_grid(j, candidate_quantile) for j in range(n)}

    log_unary = {}
    for j in range(n):
        cand = np.asarray(candidates[j], dtype=float)
        if cand.ndim != 2 or cand.shape[0] == 0:
            raise DeadJointError(f"joint {j}: empty candidate list")
        scores = unaries.sample(j, cand)
        if not (scores > 0).any():
            raise DeadJointError(f"joint {j}: no candidate with positive unary score")
        log_unary[j] = np.log(np.maximum(scores, SCORE_FLOOR))

    by_parent = _children_of(skeleton)
    # upward max-product pass, children before parents
    order = []
    stack = [skeleton.root]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(child for child, _ in by_parent.get(j, []))

    belief = {j: log_unary[j].copy() for j in range(n)}
    backptr: dict[tuple[int, int], np.ndarray] = {}
    for j in reversed(order):
        for child, edge in by_parent.get(j, []):
            ci = np.asarray(candidates[child], dtype=float)
            pj = np.asarray(candidates[j], dtype=float)
            d = ci[:, None, :] - pj[None, :, :]  # (mc, mp, 2)
            logb = np.log(model.binaries[edge].score(d))
            msg = belief[child][:, None] + logb  # (mc, mp)
            backptr[(child, j)] = msg.argmax(axis=0)
            belief[j] = belief[j] + msg.max(axis=0)

    pick = np.zeros(n, dtype=int)
    pick[skeleton.root] = int(belief[skeleton.root].argmax())
    score = float(belief[skeleton.root][pick[skeleton.root]])
    for j in order:
        for child, _ in by_parent.get(j, []):
            pick[child] = int(backptr[(child, j)][pick[j]])

    pose = np.stack([np.asarray(candidates[j], dtype=float)[pick[j]] for j in range(n)])
    return Pose2D(pose), score


def refine_pose(
    unaries: UnaryMap,
    projected_candidates: dict[str, np.ndarray],
    n_components: int = 5,
    seed: int = 0,
    skeleton: Skeleton = DEFAULT_SKELETON,
    peak_candidates: int = 20,
    prefer: str | None = None,
    prefer_margin: float = 0.0,
) -> tuple[Pose2D, str, dict[str, float]]:
    """Posterior-based joint-set selection and 2D refinement.

    For each joint set, GMM binaries are fitted from the offsets of that
    set's projected full-body poses and MAP inference runs over candidates
    drawn from the projected joint locations plus local unary peaks.  The
    set with the highest posterior wins; ties break in the fixed label
    order all, up, lw, lt, rt.  When `prefer` names a set whose score is
    within `prefer_margin` of the best, it wins instead (hysteresis, so a
    previously selected set is only abandoned on clear evidence).
    """
    peaks = [unaries.local_maxima(j, peak_candidates) for j in range(skeleton.n_joints)]
    results: dict[str, Pose2D] = {}
    scores: dict[str, float] = {}
    best: str | None = None
    for label in JOINT_SET_LABELS:
        if label not in projected_candidates:
            continue
        proj = np.asarray(projected_candidates[label], dtype=float)  # (m, J, 2)
        if proj.shape[0] < 1:
            continue
        offsets = {
            edge: proj[:, edge[0], :] - proj[:, edge[1], :] for edge in skeleton.edges
        }
        binaries = fit_binaries(offsets, n_components, seed=seed, cov_reg=4.0, normalized=True)
        model = PsmModel(skeleton, binaries)
        candidates = {
            j: np.unique(np.vstack([proj[:, j, :], peaks[j]]), axis=0)
            for j in range(skeleton.n_joints)
        }
        pose, score = infer_map(model, unaries, candidates)
        results[label] = pose
        scores[label] = score
        if best is None or score > scores[best]:
            best = label
    if best is None:
        raise ValueError("no joint set had projected candidates")
    if prefer in scores and scores[prefer] >= scores[best] - prefer_margin:
        best = prefer
    return results[best], best, scores
