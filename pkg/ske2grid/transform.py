"""Skeleton-to-grid transforms: up-sampling (UPT), node-index assignment (GIT) and their cascade.

A stage maps ``N_in`` node features onto an ``H×W`` grid::

    X' = (Λ·A)·X        (or Λ·X without adjacency regulation)
    Y  = reshape(Φ·X')  Φ binary, one-hot rows, derived from the real matrix Ψ

Φ is piecewise constant in Ψ, so the backward pass copies the gradient with
respect to Φ straight through to Ψ. Stages chain: stage ``k`` consumes the
flat ``H_{k-1}·W_{k-1}`` output of stage ``k-1``; only stage 1 is regulated
by the skeleton adjacency.
"""

import logging
import re
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .errors import ConfigError, DimensionError
from .functional import matmul, mix_nodes, node_mixing_weight_grad
from .tensor import Function, Tensor, resolve_dtype

logger = logging.getLogger("ske2grid.transform")

GIT_MODES = ("bijective", "surjective", "unconstrained")
GREEDY_ORDERS = ("global", "row")


class GridSize(NamedTuple):
    height: int
    width: int

    @property
    def cells(self) -> int:
        return self.height * self.width

    def __str__(self) -> str:
        return f"{self.height}x{self.width}"

    @classmethod
    def parse(cls, text: str) -> "GridSize":
        match = re.fullmatch(r"\s*(\d+)\s*[xX×]\s*(\d+)\s*", str(text))
        if not match:
            raise ConfigError(f"grid size '{text}' is not of the form HxW", "grid")
        height, width = int(match.group(1)), int(match.group(2))
        if height < 1 or width < 1:
            raise ConfigError(f"grid size '{text}' must be positive", "grid")
        return cls(height, width)


def parse_grid_list(text: str) -> List[GridSize]:
    """``"5x5,6x6,7x7"`` → three grid sizes."""
    return [GridSize.parse(part) for part in str(text).split(",") if part.strip()]


# --- binarization ---------------------------------------------------------------


def binarize_rowwise(psi: np.ndarray) -> np.ndarray:
    """One-hot at each row's argmax; ties go to the lowest column."""
    psi = np.asarray(psi)
    phi = np.zeros_like(psi, dtype=psi.dtype if psi.dtype.kind == "f" else np.float64)
    if psi.size:
        phi[np.arange(psi.shape[0]), np.argmax(psi, axis=1)] = 1
    return phi


def _greedy_pairs(psi: np.ndarray) -> List[Tuple[int, int]]:
    """Repeatedly claim the largest entry whose row and column are both free.

    Entries are visited by descending value, then ascending row, then column,
    so ties resolve to the lowest (row, column).
    """
    rows, cols = np.indices(psi.shape)
    order = np.lexsort((cols.ravel(), rows.ravel(), -psi.ravel()))
    limit = min(psi.shape)
    row_free = np.ones(psi.shape[0], dtype=bool)
    col_free = np.ones(psi.shape[1], dtype=bool)
    pairs: List[Tuple[int, int]] = []
    for flat in order:
        r, c = divmod(int(flat), psi.shape[1])
        if row_free[r] and col_free[c]:
            pairs.append((r, c))
            row_free[r] = col_free[c] = False
            if len(pairs) == limit:
                break
    return pairs


def binarize_bijective(psi: np.ndarray, order: str = "global") -> np.ndarray:
    """Permutation matrix by greedy assignment.

    ``order="global"`` takes the largest remaining entry over the whole
    matrix; ``order="row"`` walks rows top to bottom and gives each the best
    still-free column.
    """
    psi = np.asarray(psi)
    if psi.ndim != 2 or psi.shape[0] != psi.shape[1]:
        raise DimensionError(f"bijective binarization needs a square matrix, got {psi.shape}")
    if order not in GREEDY_ORDERS:
        raise ConfigError(f"unknown greedy order '{order}' ({', '.join(GREEDY_ORDERS)})", "ablation.greedy")
    phi = np.zeros_like(psi, dtype=psi.dtype if psi.dtype.kind == "f" else np.float64)
    if order == "global":
        for r, c in _greedy_pairs(psi):
            phi[r, c] = 1
        return phi
    free = np.ones(psi.shape[1], dtype=bool)
    for r in range(psi.shape[0]):
        candidates = np.where(free, psi[r], -np.inf)
        c = int(np.argmax(candidates))
        phi[r, c] = 1
        free[c] = False
    return phi


def binarize_surjective(psi: np.ndarray) -> np.ndarray:
    """Cover every column once by global greedy, then let leftover rows take their argmax."""
    psi = np.asarray(psi)
    if psi.ndim != 2 or psi.shape[0] < psi.shape[1]:
        raise DimensionError(
            f"surjective binarization needs at least as many rows as columns, got {psi.shape}"
        )
    phi = np.zeros_like(psi, dtype=psi.dtype if psi.dtype.kind == "f" else np.float64)
    claimed = np.zeros(psi.shape[0], dtype=bool)
    for r, c in _greedy_pairs(psi):
        phi[r, c] = 1
        claimed[r] = True
    rest = np.flatnonzero(~claimed)
    if rest.size:
        phi[rest, np.argmax(psi[rest], axis=1)] = 1
    return phi


def binarize(psi: np.ndarray, mode: str, greedy: str = "global") -> np.ndarray:
    if mode == "bijective":
        return binarize_bijective(psi, greedy)
    if mode == "surjective":
        return binarize_surjective(psi)
    if mode == "unconstrained":
        return binarize_rowwise(psi)
    raise ConfigError(f"unknown GIT mode '{mode}' ({', '.join(GIT_MODES)})", "ablation.git_mode")


# --- transform types ------------------------------------------------------------


@dataclass
class Upt:
    """Up-sampling matrix Λ of shape (H·W, N_in)."""

    lam: Tensor
    use_adjacency: bool = True

    @property
    def shape(self) -> Tuple[int, int]:
        return self.lam.shape


@dataclass
class Git:
    """Real assistant Ψ and its binarized assignment Φ."""

    psi: Tensor
    mode: str = "bijective"
    greedy: str = "global"
    phi: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        if self.mode not in GIT_MODES:
            raise ConfigError(f"unknown GIT mode '{self.mode}' ({', '.join(GIT_MODES)})", "ablation.git_mode")
        rows, cols = self.psi.shape
        if self.mode == "bijective" and rows != cols:
            raise ConfigError(
                f"bijective GIT needs H·W == input width, got Ψ {rows}×{cols}", "ablation.git_mode"
            )
        if self.mode == "surjective" and rows < cols:
            raise ConfigError(
                f"surjective GIT needs H·W >= input width, got Ψ {rows}×{cols}", "ablation.git_mode"
            )

    def derive_phi(self) -> np.ndarray:
        """Binarize the current Ψ and cache the result."""
        self.phi = binarize(self.psi.data, self.mode, self.greedy).astype(self.psi.dtype)
        return self.phi

    def current_phi(self) -> np.ndarray:
        return self.phi if self.phi is not None else self.derive_phi()


@dataclass
class GridTransformStage:
    """One (UPT, GIT) pair producing an H×W grid; ``upt`` is None for GIT-only stages."""

    grid: GridSize
    git: Git
    upt: Optional[Upt] = None

    @property
    def n_in(self) -> int:
        return self.upt.lam.shape[1] if self.upt is not None else self.git.psi.shape[1]

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        params = {}
        if self.upt is not None:
            params[f"{prefix}.lambda"] = self.upt.lam
        params[f"{prefix}.psi"] = self.git.psi
        return params

    def set_trainable(self, trainable: bool) -> None:
        for tensor in self.named_parameters("").values():
            tensor.requires_grad = trainable
            tensor.grad = None

    def describe(self) -> Dict[str, object]:
        return {
            "height": self.grid.height,
            "width": self.grid.width,
            "n_in": self.n_in,
            "use_upt": self.upt is not None,
            "use_adjacency": bool(self.upt is not None and self.upt.use_adjacency),
            "mode": self.git.mode,
            "greedy": self.git.greedy,
        }


@dataclass
class TransformOptions:
    """How new stages are built; mirrors the ablation switches."""

    git_mode: str = "bijective"
    use_upt: bool = True
    use_adjacency: bool = True
    greedy: str = "global"
    lambda_init_high: Optional[float] = None


@dataclass
class PlsCascade:
    """Ordered transform stages; the first ``frozen_prefix`` stages never train."""

    n_joints: int
    stages: List[GridTransformStage] = field(default_factory=list)
    frozen_prefix: int = 0
    options: TransformOptions = field(default_factory=TransformOptions)

    @property
    def grid(self) -> GridSize:
        if not self.stages:
            raise ConfigError("cascade has no stages", "grid")
        return self.stages[-1].grid

    def __len__(self) -> int:
        return len(self.stages)

    def validate(self) -> None:
        width = self.n_joints
        previous: Optional[GridSize] = None
        for k, stage in enumerate(self.stages, start=1):
            if stage.n_in != width:
                raise ConfigError(
                    f"stage {k} expects input width {stage.n_in}, previous output is {width}",
                    f"grid.stage{k}",
                )
            cells = stage.grid.cells
            if stage.upt is not None:
                if stage.upt.lam.shape != (cells, width):
                    raise ConfigError(
                        f"stage {k} Λ is {stage.upt.lam.shape}, expected ({cells}, {width})",
                        f"grid.stage{k}",
                    )
                git_cols = cells
            else:
                git_cols = width
            if stage.git.psi.shape != (cells, git_cols):
                raise ConfigError(
                    f"stage {k} Ψ is {stage.git.psi.shape}, expected ({cells}, {git_cols})",
                    f"grid.stage{k}",
                )
            if previous is not None and not (
                stage.grid.height > previous.height and stage.grid.width > previous.width
            ):
                raise ConfigError(
                    f"stage {k} grid {stage.grid} must be larger than {previous} in both extents",
                    f"grid.stage{k}",
                )
            previous = stage.grid
            width = cells

    def named_parameters(self, trainable_only: bool = False) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for k, stage in enumerate(self.stages, start=1):
            if trainable_only and k <= self.frozen_prefix:
                continue
            params.update(stage.named_parameters(f"stage{k}"))
        return params

    def named_tensors(self) -> Dict[str, np.ndarray]:
        """Λ, Ψ and the cached Φ of every stage, for checkpointing."""
        tensors = {name: t.data for name, t in self.named_parameters().items()}
        for k, stage in enumerate(self.stages, start=1):
            tensors[f"stage{k}.phi"] = stage.git.current_phi()
        return tensors

    def refresh_phi(self) -> None:
        for stage in self.stages:
            stage.git.derive_phi()

    def describe(self) -> Dict[str, object]:
        return {
            "n_joints": self.n_joints,
            "frozen_prefix": self.frozen_prefix,
            "stages": [stage.describe() for stage in self.stages],
        }

    @classmethod
    def from_description(cls, description: Dict[str, object], dtype: str = "f32") -> "PlsCascade":
        """Rebuild the stage skeleton (zero tensors) from :meth:`describe` output."""
        dt = resolve_dtype(dtype)
        cascade = cls(n_joints=int(description["n_joints"]))
        for entry in description["stages"]:
            grid = GridSize(int(entry["height"]), int(entry["width"]))
            n_in = int(entry["n_in"])
            upt = None
            if entry["use_upt"]:
                upt = Upt(Tensor(np.zeros((grid.cells, n_in)), dt), bool(entry["use_adjacency"]))
            cols = grid.cells if upt is not None else n_in
            git = Git(Tensor(np.zeros((grid.cells, cols)), dt), entry["mode"], entry["greedy"])
            cascade.stages.append(GridTransformStage(grid, git, upt))
        cascade.options = TransformOptions(
            git_mode=cascade.stages[0].git.mode if cascade.stages else "bijective",
            use_upt=bool(cascade.stages and cascade.stages[0].upt is not None),
            use_adjacency=bool(cascade.stages and description["stages"][0]["use_adjacency"]),
            greedy=cascade.stages[0].git.greedy if cascade.stages else "global",
        )
        freeze_prefix(cascade, int(description.get("frozen_prefix", 0)))
        return cascade


# --- application ----------------------------------------------------------------


def upt_apply(upt: Upt, A: Optional[np.ndarray], X: Tensor) -> Tensor:
    """``(Λ·A)·X`` (or ``Λ·X``) applied to the node axis of ``X[..., N_in, C]``."""
    if upt.use_adjacency and A is None:
        raise DimensionError("adjacency-regulated up-sampling needs the adjacency matrix")
    if not upt.use_adjacency and A is not None:
        raise DimensionError("adjacency given to an up-sampling stage without regulation")
    if X.ndim < 2 or X.shape[-2] != upt.lam.shape[1]:
        raise DimensionError(f"Λ is {upt.lam.shape} but features are {X.shape}")
    if upt.use_adjacency:
        regulation = Tensor(np.asarray(A), dtype=upt.lam.dtype)
        return mix_nodes(matmul(upt.lam, regulation), X)
    return mix_nodes(upt.lam, X)


class GitAssign(Function):
    """``Φ·X`` on the node axis with the straight-through gradient to Ψ."""

    @staticmethod
    def forward(ctx, psi, x, phi):
        if x.ndim < 2 or x.shape[-2] != phi.shape[1] or psi.shape != phi.shape:
            raise DimensionError(f"GIT Φ is {phi.shape} but features are {x.shape}")
        ctx.save_for_backward(x, phi)
        return np.matmul(phi, x)

    @staticmethod
    def backward(ctx, grad):
        x, phi = ctx.saved
        grad_psi = node_mixing_weight_grad(grad, x) if ctx.needs_input_grad[0] else None
        grad_x = np.matmul(phi.T, grad) if ctx.needs_input_grad[1] else None
        return grad_psi, grad_x


def git_assign(git: Git, X: Tensor, training: bool = True) -> Tensor:
    """Flat ``Φ·X'``: Φ is re-derived in training and reused from cache otherwise."""
    phi = git.derive_phi() if training or git.phi is None else git.phi
    return GitAssign.apply(git.psi, X, phi=phi)


def to_grid(flat: Tensor, grid: GridSize) -> Tensor:
    """``[..., H·W, C]`` → ``[..., C, H, W]``; row ``i`` fills cell ``(i div W, i mod W)``."""
    lead = flat.shape[:-2]
    channels = flat.shape[-1]
    if flat.shape[-2] != grid.cells:
        raise DimensionError(f"{flat.shape[-2]} rows do not fill a {grid} grid")
    shaped = flat.reshape(lead + (grid.height, grid.width, channels))
    n = len(lead)
    return shaped.permute(tuple(range(n)) + (n + 2, n, n + 1))


def git_apply(git: Git, X: Tensor, grid: GridSize, training: bool = True) -> Tensor:
    return to_grid(git_assign(git, X, training), grid)


def cascade_flat(
    cascade: PlsCascade, A: np.ndarray, X: Tensor, training: bool = True, upto: Optional[int] = None
) -> Tensor:
    """Run the first ``upto`` stages (all by default) and keep the output flat."""
    stages = cascade.stages if upto is None else cascade.stages[:upto]
    if not stages:
        raise ConfigError("cascade has no stages", "grid")
    out = X
    for k, stage in enumerate(stages):
        if stage.upt is not None:
            out = upt_apply(stage.upt, A if k == 0 and stage.upt.use_adjacency else None, out)
        out = git_assign(stage.git, out, training)
    return out


def cascade_forward(
    cascade: PlsCascade, A: np.ndarray, X: Tensor, training: bool = True
) -> Tensor:
    """``reshape(Φ_k·Λ_k ··· Φ_1·(Λ_1·A)·X)`` onto the final grid, ``[..., C, H, W]``."""
    return to_grid(cascade_flat(cascade, A, X, training), cascade.grid)


def composed_matrix(cascade: PlsCascade, A: np.ndarray, upto: Optional[int] = None) -> np.ndarray:
    """The single (H·W × N) matrix equivalent to the first ``upto`` stages."""
    stages = cascade.stages if upto is None else cascade.stages[:upto]
    if not stages:
        raise ConfigError("cascade has no stages", "grid")
    dtype = stages[0].git.psi.dtype
    P = np.eye(cascade.n_joints, dtype=dtype)
    for k, stage in enumerate(stages):
        if stage.upt is not None:
            lam = stage.upt.lam.data
            if k == 0 and stage.upt.use_adjacency:
                lam = lam @ np.asarray(A, dtype=dtype)
            P = lam @ P
        P = stage.git.current_phi() @ P
    return P


# --- lifecycle ------------------------------------------------------------------


def freeze_prefix(cascade: PlsCascade, k: int) -> None:
    """Exclude stages ``1..k`` from gradient updates."""
    if not 0 <= k <= len(cascade.stages):
        raise ConfigError(
            f"cannot freeze {k} stages of a {len(cascade.stages)}-stage cascade", "grid.freeze"
        )
    cascade.frozen_prefix = k
    for index, stage in enumerate(cascade.stages, start=1):
        stage.set_trainable(index > k)
    if k:
        logger.debug(f"Froze transform stages 1..{k}")


def init_stage(
    cascade: PlsCascade,
    stage_index: int,
    n_in: int,
    grid: GridSize,
    seed: int,
    dtype: str = "f32",
) -> GridTransformStage:
    """Create (or replace) stage ``stage_index`` (0-based) with fresh Λ and Ψ.

    Λ starts as an identity block over the first ``n_in`` rows followed by
    uniform(0, high) rows (``high`` defaults to ``1/n_in``); Ψ is uniform(0, 1).
    """
    if not 0 <= stage_index <= len(cascade.stages):
        raise ConfigError(
            f"stage index {stage_index} out of range for {len(cascade.stages)} stages", "grid"
        )
    opts = cascade.options
    dt = resolve_dtype(dtype)
    rng = np.random.default_rng([seed, stage_index])
    cells = grid.cells
    upt = None
    if opts.use_upt:
        if cells < n_in:
            raise ConfigError(
                f"grid {grid} has {cells} cells, fewer than the {n_in} inputs to up-sample",
                "grid",
            )
        high = opts.lambda_init_high if opts.lambda_init_high is not None else 1.0 / n_in
        lam = np.zeros((cells, n_in))
        lam[:n_in] = np.eye(n_in)
        lam[n_in:] = rng.uniform(0.0, high, size=(cells - n_in, n_in))
        upt = Upt(Tensor(lam, dt, requires_grad=True), opts.use_adjacency and stage_index == 0)
    cols = cells if upt is not None else n_in
    psi = Tensor(rng.uniform(0.0, 1.0, size=(cells, cols)), dt, requires_grad=True)
    git = Git(psi, opts.git_mode, opts.greedy)
    git.derive_phi()
    stage = GridTransformStage(grid, git, upt)
    if stage_index == len(cascade.stages):
        cascade.stages.append(stage)
    else:
        cascade.stages[stage_index] = stage
    stage.set_trainable(stage_index >= cascade.frozen_prefix)
    return stage


def build_cascade(
    n_joints: int,
    grids: List[GridSize],
    seed: int,
    options: Optional[TransformOptions] = None,
    dtype: str = "f32",
) -> PlsCascade:
    """Fresh cascade over ``grids`` (validated)."""
    cascade = PlsCascade(n_joints=n_joints, options=options or TransformOptions())
    width = n_joints
    for index, grid in enumerate(grids):
        init_stage(cascade, index, width, grid, seed, dtype)
        width = grid.cells
    cascade.validate()
    return cascade


def append_stage(cascade: PlsCascade, grid: GridSize, seed: int, dtype: str = "f32") -> GridTransformStage:
    """Freeze every existing stage and add a new trainable one growing to ``grid``."""
    freeze_prefix(cascade, len(cascade.stages))
    stage = init_stage(cascade, len(cascade.stages), cascade.grid.cells, grid, seed, dtype)
    cascade.validate()
    return stage
