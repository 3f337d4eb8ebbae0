"""Optimizer update rules and their supporting machinery.

Each step function consumes the running per-layer state and a raw gradient
and returns an UpdateReport holding the preconditioned update direction
(learning rate NOT applied; the trainer owns learning rates, weight decay
and residual multipliers). Steps mutate the passed LayerState in place and
are deterministic: identical (state, gradient, config) gives identical
output.

Conventions shared by every rule:
  - first moment  m_t = beta1 m_{t-1} + (1 - beta1) g_t, bias-corrected
    by 1 / (1 - beta1^t) where the rule calls for it
  - second-moment EMAs use beta2 the same way
  - blocking partitions the gradient into independent b_out x b_in tiles,
    trailing tiles at their natural (smaller) size
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .linalg import (
    Matrix,
    PowerIterState,
    as_matrix,
    mat_inv_power,
    newton_schulz,
    power_iter_step,
    spectral_norm_exact,
    sym_eig,
)

RULES = ("sgd", "adam", "shampoo", "soap", "muon", "adamuon")
GRAFT_RULES = ("sgd", "adam")
NORMALIZE_MODES = ("none", "spectral", "rms")
EPS_MODES = ("absolute", "relative")
WD_MODES = ("independent", "coupled")


@dataclass
class OptimizerConfig:
    """Static description of one optimizer.

    rule         one of sgd | adam | shampoo | soap | muon | adamuon
    e_l, e_r     inverse-power exponents per side (shampoo) or 0/1 side
                 indicators selecting which eigenbases are tracked (soap)
    beta1/beta2  first/second-moment EMA coefficients
    eps          damping; for shampoo interpreted per eps_mode, either an
                 absolute shift or a fraction of the factor's top eigenvalue
    graft_rule   optional reference rule whose update norm is grafted onto
                 this rule's direction (full-matrix norms)
    graft_eps    guard added to the direction norm in the graft ratio
    graft_ref_eps damping used inside the reference rule's own step
    block_in/out tile sizes for blocked preconditioning (shampoo/soap only)
    normalize    post-step update normalization applied by the trainer
    precond_freq soap eigenbasis refresh period, in steps
    ns_iters     orthogonalization iteration count for muon/adamuon
    rms_align    adamuon option: rescale the update to a fixed entrywise RMS
                 of 0.2 with a sqrt(d_in * d_out) norm target
    """

    rule: str
    e_l: float = 0.5
    e_r: float = 0.5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    eps_mode: str = "relative"
    graft_rule: str | None = None
    graft_eps: float = 0.0
    graft_ref_eps: float = 1e-8
    block_in: int | None = None
    block_out: int | None = None
    normalize: str = "none"
    precond_freq: int = 1
    ns_iters: int = 5
    rms_align: bool = False

    def __post_init__(self):
        if self.rule not in RULES:
            raise ValueError(f"unknown rule {self.rule!r}, expected one of {RULES}")
        if self.rule == "soap" and not (
            self.e_l in (0.0, 1.0) and self.e_r in (0.0, 1.0)
        ):
            raise ValueError("soap side exponents must be 0 or 1 (side indicators)")
        if min(self.e_l, self.e_r) < 0:
            raise ValueError("side exponents must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps < 0 or self.graft_eps < 0 or self.graft_ref_eps < 0:
            raise ValueError("eps values must be >= 0")
        if self.eps_mode not in EPS_MODES:
            raise ValueError(f"eps_mode must be one of {EPS_MODES}")
        if self.graft_rule is not None and self.graft_rule not in GRAFT_RULES:
            raise ValueError(f"graft_rule must be one of {GRAFT_RULES}")
        if (self.block_in or self.block_out) and self.rule not in ("shampoo", "soap"):
            raise ValueError("blocking is only defined for shampoo and soap")
        for b in (self.block_in, self.block_out):
            if b is not None and b < 1:
                raise ValueError("block sizes must be >= 1")
        if self.normalize not in NORMALIZE_MODES:
            raise ValueError(f"normalize must be one of {NORMALIZE_MODES}")
        if self.precond_freq < 1:
            raise ValueError("precond_freq must be >= 1")
        if self.ns_iters < 1:
            raise ValueError("ns_iters must be >= 1")


class UpdateReport:
    """An update direction plus its norm statistics.

    frob is computed eagerly; the exact spectral norm and the stable rank
    frob^2 / spec^2 are computed on first access (they need an
    eigendecomposition, which per-step callers may not want). srank is
    defined as 0 for an all-zero update.
    """

    def __init__(self, update: Matrix):
        self.update = update
        self.frob = float(np.linalg.norm(update))

    @cached_property
    def spec(self) -> float:
        if self.frob == 0.0:
            return 0.0
        return spectral_norm_exact(self.update)

    @cached_property
    def srank(self) -> float:
        if self.spec == 0.0:
            return 0.0
        return self.frob**2 / self.spec**2


@dataclass
class BlockState:
    """Per-tile preconditioner accumulators."""

    l: Matrix | None = None
    r: Matrix | None = None
    q_l: Matrix | None = None
    q_r: Matrix | None = None
    v: Matrix | None = None


@dataclass
class LayerState:
    """Mutable per-layer optimizer state shared by all rules.

    t counts completed steps. m/v are full-matrix first/second moments
    (v doubles as the graft reference's second moment). blocks holds the
    per-tile factor state for shampoo/soap. pi carries the power-iteration
    state when spectral normalization is on.
    """

    t: int = 0
    m: Matrix | None = None
    v: Matrix | None = None
    blocks: list[BlockState] = field(default_factory=list)
    pi: PowerIterState | None = None


@dataclass
class BlockPartition:
    """Index map for the b_out x b_in tiling of a (rows x cols) matrix."""

    rows: int
    cols: int
    b_out: int
    b_in: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("cannot partition an empty matrix")
        if self.b_out < 1 or self.b_in < 1:
            raise ValueError("block sizes must be >= 1")
        self.row_edges = list(range(0, self.rows, self.b_out)) + [self.rows]
        self.col_edges = list(range(0, self.cols, self.b_in)) + [self.cols]

    @property
    def n_out(self) -> int:
        return len(self.row_edges) - 1

    @property
    def n_in(self) -> int:
        return len(self.col_edges) - 1

    def __len__(self) -> int:
        return self.n_out * self.n_in

    def spans(self):
        """Yield ((r0, r1), (c0, c1)) tile bounds in row-major tile order."""
        for i in range(self.n_out):
            for j in range(self.n_in):
                yield (
                    (self.row_edges[i], self.row_edges[i + 1]),
                    (self.col_edges[j], self.col_edges[j + 1]),
                )

    def split(self, g: Matrix) -> list[Matrix]:
        g = as_matrix(g, "block split input")
        if g.shape != (self.rows, self.cols):
            raise ValueError(f"expected shape {(self.rows, self.cols)}, got {g.shape}")
        return [g[r0:r1, c0:c1] for (r0, r1), (c0, c1) in self.spans()]

    def join(self, blocks: list[Matrix]) -> Matrix:
        if len(blocks) != len(self):
            raise ValueError(f"expected {len(self)} blocks, got {len(blocks)}")
        out = np.empty((self.rows, self.cols))
        for block, ((r0, r1), (c0, c1)) in zip(blocks, self.spans()):
            if block.shape != (r1 - r0, c1 - c0):
                raise ValueError("block shape does not match its tile")
            out[r0:r1, c0:c1] = block
        return out


def block_partition(g: Matrix, b_out: int | None, b_in: int | None) -> BlockPartition:
    """Partition covering g; a missing block size means one full-extent tile."""
    g = as_matrix(g, "block_partition input")
    rows, cols = g.shape
    return BlockPartition(rows, cols, min(b_out or rows, rows), min(b_in or cols, cols))


def _bias_correction(beta: float, t: int) -> float:
    # beta = 0 gives 1 - 0^t = 1: no correction needed or applied.
    return 1.0 - beta**t


def _update_first_moment(state: LayerState, g: Matrix, beta1: float) -> Matrix:
    if state.m is None:
        state.m = np.zeros_like(g)
    state.m = beta1 * state.m + (1.0 - beta1) * g
    return state.m


def _adam_ratio(m_hat: Matrix, v_hat: Matrix, eps: float) -> Matrix:
    """Entrywise m_hat / (sqrt(v_hat) + eps).

    Entries with a zero denominator necessarily have a zero numerator (the
    second moment majorizes the first along the history), so they map to 0.
    """
    denom = np.sqrt(v_hat) + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(denom > 0.0, m_hat / np.where(denom > 0.0, denom, 1.0), 0.0)
    return out


def adam_step(state: LayerState, g: Matrix, cfg: OptimizerConfig) -> UpdateReport:
    """Bias-corrected Adam: m^ / (sqrt(v^) + eps)."""
    g = as_matrix(g, "gradient")
    state.t += 1
    m = _update_first_moment(state, g, cfg.beta1)
    if state.v is None:
        state.v = np.zeros_like(g)
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (g * g)
    m_hat = m / _bias_correction(cfg.beta1, state.t)
    v_hat = state.v / _bias_correction(cfg.beta2, state.t)
    if cfg.eps == 0.0 and not np.any(v_hat):
        raise ZeroDivisionError("adam_step with eps=0 and an all-zero gradient history")
    return UpdateReport(_adam_ratio(m_hat, v_hat, cfg.eps))


def sgd_step(state: LayerState, g: Matrix, cfg: OptimizerConfig) -> UpdateReport:
    """Momentum SGD; the update is the bias-corrected first moment."""
    g = as_matrix(g, "gradient")
    state.t += 1
    m = _update_first_moment(state, g, cfg.beta1)
    return UpdateReport(m / _bias_correction(cfg.beta1, state.t))


def _ensure_blocks(state: LayerState, n: int) -> list[BlockState]:
    if not state.blocks:
        state.blocks = [BlockState() for _ in range(n)]
    if len(state.blocks) != n:
        raise ValueError("layer state was created for a different block partition")
    return state.blocks


def _shampoo_factor(acc: Matrix, e: float, eps: float, eps_mode: str) -> Matrix | None:
    """(acc + eps I)^(-e) with eps resolved per mode; None means zero factor
    input, which can only pair with a zero momentum block."""
    if e == 0.0:
        return None  # exact identity, skip the multiply entirely
    if eps_mode == "relative":
        top = float(sym_eig(acc).eigenvalues[0])
        if top <= 0.0:
            return None
        eps = eps * top
    return mat_inv_power(acc, e, eps)


def shampoo_step(state: LayerState, g: Matrix, cfg: OptimizerConfig) -> UpdateReport:
    """Two-sided inverse-power preconditioning of the first moment.

    Per tile: L += GG^T and R += G^T G EMAs (beta2, bias-corrected), then
    update = (L^ + eps I)^(-e_l) M (R^ + eps I)^(-e_r). In relative mode the
    eps shift for each factor is eps times that factor's top eigenvalue.
    """
    g = as_matrix(g, "gradient")
    state.t += 1
    m = _update_first_moment(state, g, cfg.beta1)
    part = block_partition(g, cfg.block_out, cfg.block_in)
    blocks = _ensure_blocks(state, len(part))
    corr1 = _bias_correction(cfg.beta1, state.t)
    corr2 = _bias_correction(cfg.beta2, state.t)
    g_blocks = part.split(g)
    m_blocks = part.split(m)
    out_blocks = []
    for bs, gb, mb in zip(blocks, g_blocks, m_blocks):
        if bs.l is None:
            bs.l = np.zeros((gb.shape[0], gb.shape[0]))
            bs.r = np.zeros((gb.shape[1], gb.shape[1]))
        bs.l = cfg.beta2 * bs.l + (1.0 - cfg.beta2) * (gb @ gb.T)
        bs.r = cfg.beta2 * bs.r + (1.0 - cfg.beta2) * (gb.T @ gb)
        # symmetrize accumulated round-off before factorizing
        bs.l = (bs.l + bs.l.T) / 2.0
        bs.r = (bs.r + bs.r.T) / 2.0
        upd = mb / corr1
        p_l = _shampoo_factor(bs.l / corr2, cfg.e_l, cfg.eps, cfg.eps_mode)
        p_r = _shampoo_factor(bs.r / corr2, cfg.e_r, cfg.eps, cfg.eps_mode)
        if (p_l is None and cfg.e_l > 0.0) or (p_r is None and cfg.e_r > 0.0):
            # zero factor input implies a zero gradient history for the tile
            out_blocks.append(np.zeros_like(mb))
            continue
        if p_l is not None:
            upd = p_l @ upd
        if p_r is not None:
            upd = upd @ p_r
        out_blocks.append(upd)
    return UpdateReport(part.join(out_blocks))


def soap_step(state: LayerState, g: Matrix, cfg: OptimizerConfig) -> UpdateReport:
    """Adam run inside the (refreshed) eigenbases of the factor EMAs.

    Side indicators e_l / e_r pick which bases are tracked; an indicator of
    0 leaves that side in the coordinate basis, so e_l = e_r = 0 is exactly
    adam_step. Second moments live in the rotated space per tile.
    """
    g = as_matrix(g, "gradient")
    state.t += 1
    m = _update_first_moment(state, g, cfg.beta1)
    part = block_partition(g, cfg.block_out, cfg.block_in)
    blocks = _ensure_blocks(state, len(part))
    corr1 = _bias_correction(cfg.beta1, state.t)
    corr2 = _bias_correction(cfg.beta2, state.t)
    refresh = state.t == 1 or (state.t - 1) % cfg.precond_freq == 0
    g_blocks = part.split(g)
    m_blocks = part.split(m)
    out_blocks = []
    for bs, gb, mb in zip(blocks, g_blocks, m_blocks):
        if cfg.e_l == 1.0:
            if bs.l is None:
                bs.l = np.zeros((gb.shape[0], gb.shape[0]))
            bs.l = cfg.beta2 * bs.l + (1.0 - cfg.beta2) * (gb @ gb.T)
            bs.l = (bs.l + bs.l.T) / 2.0
            if refresh or bs.q_l is None:
                bs.q_l = sym_eig(bs.l / corr2).eigenvectors
        if cfg.e_r == 1.0:
            if bs.r is None:
                bs.r = np.zeros((gb.shape[1], gb.shape[1]))
            bs.r = cfg.beta2 * bs.r + (1.0 - cfg.beta2) * (gb.T @ gb)
            bs.r = (bs.r + bs.r.T) / 2.0
            if refresh or bs.q_r is None:
                bs.q_r = sym_eig(bs.r / corr2).eigenvectors
        g_rot = gb
        m_rot = mb
        if bs.q_l is not None:
            g_rot = bs.q_l.T @ g_rot
            m_rot = bs.q_l.T @ m_rot
        if bs.q_r is not None:
            g_rot = g_rot @ bs.q_r
            m_rot = m_rot @ bs.q_r
        if bs.v is None:
            bs.v = np.zeros_like(gb)
        bs.v = cfg.beta2 * bs.v + (1.0 - cfg.beta2) * (g_rot * g_rot)
        upd = _adam_ratio(m_rot / corr1, bs.v / corr2, cfg.eps)
        if bs.q_l is not None:
            upd = bs.q_l @ upd
        if bs.q_r is not None:
            upd = upd @ bs.q_r.T
        out_blocks.append(upd)
    return UpdateReport(part.join(out_blocks))


def muon_step(state: LayerState, g: Matrix, cfg: OptimizerConfig) -> UpdateReport:
    """Orthogonalized momentum: newton_schulz(m_t) with plain EMA momentum."""
    g = as_matrix(g, "gradient")
    state.t += 1
    m = _update_first_moment(state, g, cfg.beta1)
    return UpdateReport(newton_schulz(m, cfg.ns_iters, cfg.eps))


def adamuon_step(state: LayerState, g: Matrix, cfg: OptimizerConfig) -> UpdateReport:
    """Adam with both moments accumulated on the orthogonalized gradient.

    o_t = newton_schulz(g_t) replaces the raw gradient in an otherwise
    standard Adam step (the first moment provides the momentum). With
    rms_align the update is rescaled to Frobenius norm
    0.2 sqrt(d_in d_out), i.e. entrywise RMS 0.2.
    """
    g = as_matrix(g, "gradient")
    state.t += 1
    # cfg.eps is the Adam denominator guard here; the orthogonalization keeps
    # its own normalization guard.
    o = newton_schulz(g, cfg.ns_iters)
    m = _update_first_moment(state, o, cfg.beta1)
    if state.v is None:
        state.v = np.zeros_like(g)
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (o * o)
    m_hat = m / _bias_correction(cfg.beta1, state.t)
    v_hat = state.v / _bias_correction(cfg.beta2, state.t)
    upd = _adam_ratio(m_hat, v_hat, cfg.eps)
    if cfg.rms_align:
        fro = float(np.linalg.norm(upd))
        if fro > 0.0:
            d_out, d_in = upd.shape
            upd = upd * (0.2 * np.sqrt(d_in * d_out) / fro)
    return UpdateReport(upd)


def graft(q1: UpdateReport, q2: UpdateReport, eps: float = 0.0) -> UpdateReport:
    """Take the norm of q1 and the direction of q2.

    update = (|Q1|_F / (|Q2|_F + eps)) Q2. A zero direction (with eps = 0)
    returns the zero update rather than dividing by zero.
    """
    denom = q2.frob + eps
    if denom == 0.0:
        return UpdateReport(np.zeros_like(q2.update))
    return UpdateReport((q1.frob / denom) * q2.update)


_STEP_FNS = {
    "sgd": sgd_step,
    "adam": adam_step,
    "shampoo": shampoo_step,
    "soap": soap_step,
    "muon": muon_step,
    "adamuon": adamuon_step,
}


def optimizer_step(state: LayerState, g: Matrix, cfg: OptimizerConfig) -> UpdateReport:
    """Dispatch on cfg.rule, wrapping the result in grafting when configured.

    The graft reference rule shares the layer's first moment (both rules use
    the same beta1 EMA of the gradient) and owns the spare second-moment slot,
    so a single LayerState carries the whole grafted pair.
    """
    if cfg.graft_rule is None:
        return _STEP_FNS[cfg.rule](state, g, cfg)
    g = as_matrix(g, "gradient")
    q2 = _STEP_FNS[cfg.rule](state, g, cfg)  # advances t and the shared moment
    m_hat = state.m / _bias_correction(cfg.beta1, state.t)
    if cfg.graft_rule == "adam":
        if state.v is None:
            state.v = np.zeros_like(g)
        state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * (g * g)
        v_hat = state.v / _bias_correction(cfg.beta2, state.t)
        if cfg.graft_ref_eps == 0.0 and not np.any(v_hat):
            raise ZeroDivisionError(
                "graft reference adam with eps=0 and an all-zero gradient history"
            )
        q1 = UpdateReport(_adam_ratio(m_hat, v_hat, cfg.graft_ref_eps))
    else:
        q1 = UpdateReport(m_hat)
    return graft(q1, q2, cfg.graft_eps)


def spectral_normalize(
    update: Matrix,
    state: PowerIterState,
    d_out: int,
    d_in: int,
    exact: bool = False,
) -> tuple[Matrix, PowerIterState]:
    """Rescale an update to spectral norm sqrt(d_out / d_in).

    The norm estimate comes from one online power-iteration step (or the
    dense decomposition when exact=True, for oracle substitution). A zero
    estimate passes the update through unscaled; a zero update leaves the
    state untouched.
    """
    update = as_matrix(update, "spectral_normalize input")
    if not np.any(update):
        return update, state
    new_state = power_iter_step(update, state)
    sigma = spectral_norm_exact(update) if exact else new_state.sigma_hat
    if sigma == 0.0:
        return update, new_state
    return (np.sqrt(d_out / d_in) / sigma) * update, new_state


def rms_normalize(update: Matrix, d_out: int, d_in: int) -> Matrix:
    """Rescale an update to entrywise RMS sqrt(d_out / d_in) / sqrt(d_out).

    Under that RMS a one-hot input picks out a column whose 2-norm is the
    sqrt(d_out / d_in) spectral target, which is the right scale for lookup
    style layers where the spectral norm itself is the wrong yardstick.
    A zero update passes through.
    """
    update = as_matrix(update, "rms_normalize input")
    rms = float(np.sqrt(np.mean(update * update)))
    if rms == 0.0:
        return update
    target = np.sqrt(d_out / d_in) / np.sqrt(d_out)
    return (target / rms) * update


def apply_weight_decay(w: Matrix, lam: float, mode: str, eta: float = 0.0) -> Matrix:
    """Decay weights before the update is applied.

    independent: W - lam W (decoupled from the learning rate)
    coupled:     W - eta lam W
    """
    if lam < 0:
        raise ValueError(f"weight decay must be >= 0, got {lam}")
    if mode not in WD_MODES:
        raise ValueError(f"weight decay mode must be one of {WD_MODES}")
    w = as_matrix(w, "weights")
    if mode == "independent":
        return (1.0 - lam) * w
    return (1.0 - eta * lam) * w
