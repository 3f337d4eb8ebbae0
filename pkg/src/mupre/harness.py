"""Verification experiments over the testbed models.

Coordinate checks and learning-rate sweeps across width, depth-scaling
checks, stable-rank scans, closed-form rank-1 and Gram-matrix oracles for
the optimizer updates, log-log exponent regression, and compute-multiplier
estimation. Every run is deterministic given its seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import partial

import numpy as np
from scipy.interpolate import interp1d

from .linalg import NS_DEFAULT_EPS, NS_POLISH_STEPS, NS_QUINTIC, PowerIterState, mat_inv_power, sym_eig
from .models import (
    MlpModel,
    ResMlpModel,
    coord_probe,
    make_teacher,
    mlp_manifest,
    resmlp_manifest,
    synth_batch,
)
from .optim import (
    LayerState,
    OptimizerConfig,
    UpdateReport,
    apply_weight_decay,
    optimizer_step,
    rms_normalize,
    spectral_normalize,
)
from .scaling import (
    LayerHyper,
    LayerSpec,
    ScalingPlan,
    _graft_ref_eps_scale,
    _rule_eps_scale,
    build_plan,
    eps_scale,
    lr_multiplier,
)

CSV_HEADER = "run_id,width,depth,step,eta_base,loss,layer,delta_h_rms,srank,spec_norm"

ARCHS = ("mlp", "resmlp")

# stride separating per-step batch seeds between runs
_SEED_STRIDE = 1_000_003


@dataclass(frozen=True)
class SweepConfig:
    opt: OptimizerConfig
    plan: ScalingPlan
    widths: tuple[int, ...]
    depths: tuple[int, ...] = (1,)
    arch: str = "mlp"
    n_layers: int = 3
    activation: str = "tanh"
    steps: int = 300
    batch_size: int = 32
    lr_grid: tuple[float, ...] = (1.0,)
    seeds: tuple[int, ...] = (0,)
    probe_steps: tuple[int, ...] = (10, 200)
    probe_batch: int = 16
    teacher_seed: int = 7
    probe_seed: int = 9999
    record_every: int = 0
    divergence_factor: float = 1e4
    wd_variant: str = "independent"

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        for name in ("widths", "depths", "lr_grid", "seeds", "probe_steps"):
            vals = getattr(self, name)
            object.__setattr__(self, name, tuple(vals))
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        if list(self.widths) != sorted(self.widths):
            raise ValueError("widths must be ascending")
        if list(self.depths) != sorted(self.depths):
            raise ValueError("depths must be ascending")
        if min(self.widths) < 1 or min(self.depths) < 1:
            raise ValueError("widths and depths must be positive")
        if self.steps < 1 or self.batch_size < 1 or self.probe_batch < 1:
            raise ValueError("steps and batch sizes must be positive")
        if min(self.probe_steps) < 1:
            raise ValueError("probe steps count from 1")
        if min(self.lr_grid) <= 0:
            raise ValueError("lr grid entries must be positive")
        if self.record_every < 0:
            raise ValueError("record_every must be >= 0")
        if self.n_layers < 2:
            raise ValueError("need at least two layers")
        if self.divergence_factor <= 1:
            raise ValueError("divergence_factor must exceed 1")


@dataclass(frozen=True)
class MetricRecord:
    run_id: str
    width: int
    depth: int
    step: int
    eta_base: float
    loss: float
    layer: str
    delta_h_rms: float
    srank: float
    spec_norm: float


@dataclass
class RunResult:
    run_id: str
    width: int
    depth: int
    eta_base: float
    seed: int
    diverged: bool
    final_loss: float
    losses: tuple[float, ...]
    records: list[MetricRecord]
    layer_names: tuple[str, ...]

    @property
    def steps_completed(self) -> int:
        return len(self.losses)


@dataclass(frozen=True)
class CoordCheckResult:
    slopes: dict[int, dict[str, tuple[float, float]]]
    runs: list[RunResult]
    excluded: list[str]


@dataclass(frozen=True)
class LrSweepResult:
    losses: dict[int, dict[float, float]]
    argmin: dict[int, float]
    drift_octaves: float
    runs: list[RunResult]


@dataclass(frozen=True)
class RankScanResult:
    summary: dict[int, dict[str, tuple[float, float]]]
    runs: list[RunResult]


@dataclass(frozen=True)
class MultiplierEstimate:
    value: float
    flagged: bool
    extrapolated: bool


@dataclass(frozen=True)
class ExponentCheck:
    measured_slope: float
    multiplier_slope: float
    r2: float


def _layer_config(spec: LayerSpec, opt: OptimizerConfig, plan: ScalingPlan) -> OptimizerConfig:
    """The optimizer config with every damping knob scaled for this layer."""
    eps = opt.eps * _rule_eps_scale(spec, opt, plan)
    if opt.graft_rule is None:
        return replace(opt, eps=eps)
    return replace(
        opt,
        eps=eps,
        graft_eps=opt.graft_eps * eps_scale(spec, opt, plan),
        graft_ref_eps=opt.graft_ref_eps * _graft_ref_eps_scale(spec, opt, plan),
    )


def _opt_tag(opt: OptimizerConfig) -> str:
    if opt.graft_rule is None:
        return opt.rule
    return f"{opt.graft_rule}.graft.{opt.rule}"


def _run_id(cfg: SweepConfig, width: int, depth: int, eta_base: float, seed: int) -> str:
    return (
        f"{cfg.arch}_{cfg.plan.param}_{_opt_tag(cfg.opt)}"
        f"_w{width}_d{depth}_lr{eta_base!r}_s{seed}"
    )


def run_training(
    cfg: SweepConfig, width: int, depth: int, eta_base: float, seed: int
) -> RunResult:
    """Train one model, recording probes; stops early on divergence."""
    plan = replace(cfg.plan, eta_base=eta_base)
    if cfg.arch == "mlp":
        manifest = mlp_manifest(width, plan.base_width, cfg.n_layers)
    else:
        manifest = resmlp_manifest(width, depth, plan.base_width, plan.base_depth)
    table = build_plan(manifest, cfg.opt, plan)
    specs = {s.name: s for s in manifest.layers}
    model_cls = MlpModel if cfg.arch == "mlp" else ResMlpModel
    model = model_cls.build(manifest, table, seed=seed, activation=cfg.activation)

    layer_cfgs = {n: _layer_config(specs[n], cfg.opt, plan) for n in specs}
    states = {n: LayerState() for n in specs}
    pi_states = {
        n: PowerIterState(v=np.ones(specs[n].d_in) / math.sqrt(specs[n].d_in))
        for n in specs
    }
    teacher = make_teacher(cfg.teacher_seed)
    probe = synth_batch(cfg.probe_seed, cfg.probe_batch, teacher)
    run_id = _run_id(cfg, width, depth, eta_base, seed)
    probe_set = set(cfg.probe_steps)

    records: list[MetricRecord] = []
    losses: list[float] = []
    diverged = False
    initial_loss = None
    for t in range(1, cfg.steps + 1):
        batch = synth_batch(seed * _SEED_STRIDE + t, cfg.batch_size, teacher)
        loss, cache = model.forward(batch)
        if initial_loss is None:
            initial_loss = loss
        if not math.isfinite(loss) or loss > cfg.divergence_factor * max(initial_loss, 1e-12):
            diverged = True
            break
        losses.append(loss)
        grads = model.backward(cache)
        recording = t in probe_set or (cfg.record_every > 0 and t % cfg.record_every == 0)
        cache_pre = model.forward(probe)[1] if recording else None
        applied: dict[str, UpdateReport] = {}
        try:
            for name in model.layer_names:
                spec = specs[name]
                report = optimizer_step(states[name], grads[name], layer_cfgs[name])
                update = report.update
                if cfg.opt.normalize == "spectral":
                    update, pi_states[name] = spectral_normalize(
                        update, pi_states[name], spec.d_out, spec.d_in
                    )
                elif cfg.opt.normalize == "rms":
                    update = rms_normalize(update, spec.d_out, spec.d_in)
                hyper = table[name]
                w = model.weights[name]
                if hyper.lambda_wd > 0:
                    w = apply_weight_decay(w, hyper.lambda_wd, cfg.wd_variant, hyper.eta)
                model.weights[name] = w - hyper.eta * update
                if recording:
                    applied[name] = report if update is report.update else UpdateReport(update)
        except np.linalg.LinAlgError:
            diverged = True
            break
        if recording:
            cache_post = model.forward(probe)[1]
            step_records = []
            finite = True
            for name in model.layer_names:
                rms = coord_probe(cache_pre, cache_post, name)
                rep = applied[name]
                if not (math.isfinite(rms) and math.isfinite(rep.frob)):
                    finite = False
                    break
                step_records.append(
                    MetricRecord(
                        run_id=run_id, width=width, depth=depth, step=t,
                        eta_base=eta_base, loss=loss, layer=name,
                        delta_h_rms=rms, srank=rep.srank, spec_norm=rep.spec,
                    )
                )
            if not finite:
                diverged = True
                break
            records.extend(step_records)
    final_loss = math.inf if diverged else losses[-1]
    return RunResult(
        run_id=run_id, width=width, depth=depth, eta_base=eta_base, seed=seed,
        diverged=diverged, final_loss=final_loss, losses=tuple(losses),
        records=records, layer_names=tuple(model.layer_names),
    )


def run_cell(cfg: SweepConfig, cell: tuple[int, int, float, int]) -> RunResult:
    """One grid cell; top-level so process pools can pickle the call."""
    width, depth, eta_base, seed = cell
    return run_training(cfg, width, depth, eta_base, seed)


def _map_cells(cfg: SweepConfig, cells, mapper) -> list[RunResult]:
    return list((mapper or map)(partial(run_cell, cfg), cells))


def _probe_slopes(
    runs: list[RunResult],
    axis: dict[str, float],
    probe_steps: tuple[int, ...],
) -> tuple[dict[int, dict[str, tuple[float, float]]], list[str]]:
    """Fit log-log slopes of delta_h_rms against the given axis value per run."""
    excluded = [r.run_id for r in runs if r.diverged]
    valid = [r for r in runs if not r.diverged]
    slopes: dict[int, dict[str, tuple[float, float]]] = {}
    for step in probe_steps:
        per_layer: dict[str, tuple[list[float], list[float]]] = {}
        for run in valid:
            for rec in run.records:
                if rec.step != step or rec.delta_h_rms <= 0:
                    continue
                xs, ys = per_layer.setdefault(rec.layer, ([], []))
                xs.append(axis[run.run_id])
                ys.append(rec.delta_h_rms)
        fitted = {
            layer: exponent_fit(xs, ys)
            for layer, (xs, ys) in per_layer.items()
            if len(xs) >= 2
        }
        if fitted:
            slopes[step] = fitted
    return slopes, excluded


def coord_check(cfg: SweepConfig, mapper=None) -> CoordCheckResult:
    """Feature-update growth across width at fixed eta_base."""
    if len(cfg.widths) < 3:
        raise ValueError("coordinate check needs at least 3 widths")
    depth = cfg.depths[0]
    seed = cfg.seeds[0]
    cells = [(w, depth, cfg.plan.eta_base, seed) for w in cfg.widths]
    runs = _map_cells(cfg, cells, mapper)
    axis = {r.run_id: float(r.width) for r in runs}
    slopes, excluded = _probe_slopes(runs, axis, cfg.probe_steps)
    return CoordCheckResult(slopes=slopes, runs=runs, excluded=excluded)


def depth_check(cfg: SweepConfig, mapper=None) -> CoordCheckResult:
    """Feature-update growth across depth at fixed width (residual model)."""
    if cfg.arch != "resmlp":
        raise ValueError("depth check requires the residual architecture")
    if len(cfg.depths) < 3:
        raise ValueError("depth check needs at least 3 depths")
    width = cfg.widths[0]
    seed = cfg.seeds[0]
    cells = [(width, d, cfg.plan.eta_base, seed) for d in cfg.depths]
    runs = _map_cells(cfg, cells, mapper)
    axis = {r.run_id: float(r.depth) for r in runs}
    slopes, excluded = _probe_slopes(runs, axis, cfg.probe_steps)
    return CoordCheckResult(slopes=slopes, runs=runs, excluded=excluded)


def lr_sweep(cfg: SweepConfig, mapper=None) -> LrSweepResult:
    """Final loss over the width x eta_base grid, plus optimum drift."""
    depth = cfg.depths[0]
    cells = [
        (width, depth, eta, seed)
        for width in cfg.widths
        for eta in cfg.lr_grid
        for seed in cfg.seeds
    ]
    runs = _map_cells(cfg, cells, mapper)
    totals: dict[tuple[int, float], float] = {}
    for run in runs:
        key = (run.width, run.eta_base)
        totals[key] = totals.get(key, 0.0) + run.final_loss
    losses = {
        width: {eta: totals[(width, eta)] / len(cfg.seeds) for eta in cfg.lr_grid}
        for width in cfg.widths
    }
    argmin = {
        width: min(row, key=lambda eta: (row[eta], eta))
        for width, row in losses.items()
    }
    low, high = cfg.widths[0], cfg.widths[-1]
    drift = math.log2(argmin[high]) - math.log2(argmin[low])
    return LrSweepResult(losses=losses, argmin=argmin, drift_octaves=drift, runs=runs)


def rank_scan(cfg: SweepConfig, mapper=None) -> RankScanResult:
    """Per-step stable rank and spectral norm of every layer's update."""
    scan_cfg = replace(cfg, record_every=1)
    depth = cfg.depths[0]
    seed = cfg.seeds[0]
    cells = [(w, depth, cfg.plan.eta_base, seed) for w in cfg.widths]
    runs = _map_cells(scan_cfg, cells, mapper)
    summary: dict[int, dict[str, tuple[float, float]]] = {}
    for run in runs:
        if not run.records:
            continue
        first = min(r.step for r in run.records)
        last = max(r.step for r in run.records)
        layer_summary = {}
        for layer in run.layer_names:
            start = [r.srank for r in run.records if r.step == first and r.layer == layer]
            end = [r.srank for r in run.records if r.step == last and r.layer == layer]
            if start and end:
                layer_summary[layer] = (start[0], end[0])
        summary[run.width] = layer_summary
    return RankScanResult(summary=summary, runs=runs)


# ---------------------------------------------------------------------------
# closed-form oracles


def _ns_scalar(s: float, iters: int, eps: float) -> float:
    """Scalar shadow of the orthogonalization iteration on a rank-1 input.

    A rank-1 matrix stays rank-1 through the iteration, so the whole matrix
    recursion collapses to this recursion on its single singular value.
    """
    a, b, c = NS_QUINTIC
    polish_from = max(iters - NS_POLISH_STEPS, 1) if iters > NS_POLISH_STEPS else iters
    y = s / (s + eps)
    for k in range(iters):
        g = y * y
        if k < polish_from:
            y = a * y + b * y * g + c * y * g * g
        else:
            y = 1.5 * y - 0.5 * y * g
    return y


def _chunk_edges(n: int, b: int | None) -> list[tuple[int, int]]:
    size = n if b is None else min(b, n)
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _elementwise_adam(delta, x, x_probe, eps):
    g = np.outer(delta, x)
    q = np.divide(g, np.abs(g) + eps, out=np.zeros_like(g), where=g != 0)
    return q @ x_probe, float(np.linalg.norm(q))


def _rank1_shampoo(opt, delta, x, x_probe, eps):
    s = opt.e_l + opt.e_r
    out = np.zeros_like(delta)
    frob2 = 0.0
    for r0, r1 in _chunk_edges(delta.shape[0], opt.block_out):
        di = delta[r0:r1]
        ndi = float(di @ di)
        if ndi == 0.0:
            continue
        acc = 0.0
        for c0, c1 in _chunk_edges(x.shape[0], opt.block_in):
            xj = x[c0:c1]
            lam = ndi * float(xj @ xj)
            if lam == 0.0:
                continue
            eff = eps * lam if opt.eps_mode == "relative" else eps
            coeff = (lam + eff) ** (-s)
            acc += coeff * float(xj @ x_probe[c0:c1])
            frob2 += coeff * coeff * lam
        out[r0:r1] = acc * di
    return out, math.sqrt(frob2)


def _rank1_soap(opt, delta, x, x_probe, eps):
    out = np.zeros_like(delta)
    frob2 = 0.0
    two_sided = opt.e_l == 1.0 and opt.e_r == 1.0
    for r0, r1 in _chunk_edges(delta.shape[0], opt.block_out):
        di = delta[r0:r1]
        ndi = float(np.linalg.norm(di))
        for c0, c1 in _chunk_edges(x.shape[0], opt.block_in):
            xj = x[c0:c1]
            xpj = x_probe[c0:c1]
            nxj = float(np.linalg.norm(xj))
            if ndi == 0.0 or nxj == 0.0:
                continue
            if two_sided:
                sv = ndi * nxj
                coeff = sv / (sv + eps)
                out[r0:r1] += coeff * float(xj @ xpj) / (ndi * nxj) * di
                frob2 += coeff * coeff
            elif opt.e_r == 1.0:
                # right basis rotated; rows stay elementwise
                h = di * nxj / (np.abs(di) * nxj + eps)
                out[r0:r1] += h * (float(xj @ xpj) / nxj)
                frob2 += float(h @ h)
            elif opt.e_l == 1.0:
                h = xj * ndi / (np.abs(xj) * ndi + eps)
                out[r0:r1] += (di / ndi) * float(h @ xpj)
                frob2 += float(h @ h)
            else:
                block_out, block_frob = _elementwise_adam(di, xj, xpj, eps)
                out[r0:r1] += block_out
                frob2 += block_frob * block_frob
    return out, math.sqrt(frob2)


def _rank1_direction(opt: OptimizerConfig, rule: str, delta, x, x_probe, eps):
    """(Q(delta x^T) @ x_probe, frobenius(Q)) for one rule at t=1, betas=0."""
    if rule == "sgd":
        return delta * float(x @ x_probe), float(np.linalg.norm(delta) * np.linalg.norm(x))
    if rule == "adam":
        return _elementwise_adam(delta, x, x_probe, eps)
    if rule == "muon":
        nd, nx = float(np.linalg.norm(delta)), float(np.linalg.norm(x))
        c = _ns_scalar(nd * nx, opt.ns_iters, eps)
        return (c / (nd * nx)) * delta * float(x @ x_probe), c
    if rule == "adamuon":
        nd, nx = float(np.linalg.norm(delta)), float(np.linalg.norm(x))
        c = _ns_scalar(nd * nx, opt.ns_iters, NS_DEFAULT_EPS)
        o = np.outer((c / nd) * delta, x / nx)
        q = np.divide(o, np.abs(o) + eps, out=np.zeros_like(o), where=o != 0)
        frob = float(np.linalg.norm(q))
        if opt.rms_align and frob > 0.0:
            target = 0.2 * math.sqrt(o.shape[0] * o.shape[1])
            q *= target / frob
            frob = target
        return q @ x_probe, frob
    if rule == "shampoo":
        return _rank1_shampoo(opt, delta, x, x_probe, eps)
    if rule == "soap":
        return _rank1_soap(opt, delta, x, x_probe, eps)
    raise ValueError(f"no closed form for rule {rule!r}")


def rank1_oracle(
    opt: OptimizerConfig,
    delta: np.ndarray,
    x: np.ndarray,
    x_probe: np.ndarray,
    hyper: LayerHyper,
) -> np.ndarray:
    """Analytic eta * Q(delta x^T) @ x_probe from inner products and scalars.

    Evaluates the update rule at step 1 with zero momentum constants, the
    regime where the single-sample gradient is exactly rank 1.
    """
    delta = np.asarray(delta, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    x_probe = np.asarray(x_probe, dtype=np.float64).ravel()
    if x.shape != x_probe.shape:
        raise ValueError("x and x_probe must have the same length")
    if not np.any(delta) or not np.any(x):
        raise ValueError("delta and x must be nonzero")
    out, frob = _rank1_direction(opt, opt.rule, delta, x, x_probe, hyper.eps)
    if opt.graft_rule is None:
        return hyper.eta * out
    _, ref_frob = _rank1_direction(opt, opt.graft_rule, delta, x, x_probe, opt.graft_ref_eps)
    if frob == 0.0:
        return np.zeros_like(out)
    return hyper.eta * (ref_frob / (frob + opt.graft_eps)) * out


def _pseudo_sqrt(k: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(K^{1/2}, K^{-1/2+}) for a PSD Gram matrix, by eigendecomposition."""
    eig = sym_eig(k)
    w = np.clip(eig.eigenvalues, 0.0, None)
    cutoff = (w[0] if w.size else 0.0) * 1e-12
    root = np.sqrt(w)
    inv_root = np.where(w > cutoff, 1.0 / np.where(w > cutoff, root, 1.0), 0.0)
    v = eig.eigenvectors
    return (v * root) @ v.T, (v * inv_root) @ v.T


def gram_oracle_shampoo(
    delta: np.ndarray, x: np.ndarray, eps: float, e_l: float, e_r: float
) -> np.ndarray:
    """Shampoo update of G = (1/B) Delta X^T through B x B Gram matrices.

    Never forms the d x d factor matrices: both inverse-power factors act
    inside the B-dimensional column spaces of Delta and X, with pseudo
    inverse square roots covering rank-deficient batches.
    """
    delta = np.asarray(delta, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if delta.ndim != 2 or x.ndim != 2 or delta.shape[1] != x.shape[1]:
        raise ValueError("expected d_out x B and d_in x B with matching B")
    b = delta.shape[1]
    k_d = delta.T @ delta
    k_x = x.T @ x
    sqrt_kd, pinv_sqrt_kd = _pseudo_sqrt(k_d)
    sqrt_kx, pinv_sqrt_kx = _pseudo_sqrt(k_x)
    s_l = sqrt_kd @ k_x @ sqrt_kd / b**2
    s_r = sqrt_kx @ k_d @ sqrt_kx / b**2
    w_l = pinv_sqrt_kd @ mat_inv_power(s_l, e_l, eps) @ sqrt_kd
    w_r = pinv_sqrt_kx @ mat_inv_power(s_r, e_r, eps) @ sqrt_kx
    return delta @ (w_l @ w_r.T) @ x.T / b


def dense_shampoo(g: np.ndarray, eps: float, e_l: float, e_r: float) -> np.ndarray:
    """Reference path through the full d x d factor eigendecompositions."""
    g = np.asarray(g, dtype=np.float64)
    return mat_inv_power(g @ g.T, e_l, eps) @ g @ mat_inv_power(g.T @ g, e_r, eps)


def exponent_fit(xs, ys) -> tuple[float, float]:
    """Least-squares slope and r^2 of log(ys) against log(xs)."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1 or xs.size < 2:
        raise ValueError("need at least two matching points")
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ValueError("log-log fit needs positive values")
    lx, ly = np.log(xs), np.log(ys)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(slope), r2


def compute_multiplier(
    baseline: list[tuple[float, float]], candidate: tuple[float, float]
) -> MultiplierEstimate:
    """How much more compute the baseline needs to reach the candidate's loss.

    Interpolates the baseline (compute, loss) series linearly in log-log
    space; outside the observed range the two nearest points extrapolate.
    Non-monotone series are reduced to their strictly-improving envelope
    and the estimate is flagged.
    """
    if len(baseline) < 2:
        raise ValueError("baseline series needs at least two points")
    cand_c, cand_l = candidate
    if cand_c <= 0 or cand_l <= 0:
        raise ValueError("candidate compute and loss must be positive")
    pts = sorted(baseline)
    if any(c <= 0 or l <= 0 for c, l in pts):
        raise ValueError("baseline points must be positive")
    envelope: list[tuple[float, float]] = []
    flagged = False
    best = math.inf
    for c, l in pts:
        if l < best:
            envelope.append((c, l))
            best = l
        else:
            flagged = True
    if len(envelope) < 2:
        raise ValueError("monotone envelope has fewer than two points")
    log_c = np.log([c for c, _ in envelope])
    log_l = np.log([l for _, l in envelope])
    # losses fall as compute grows; reverse for an ascending interpolation axis
    f = interp1d(log_l[::-1], log_c[::-1], kind="linear", fill_value="extrapolate",
                 assume_sorted=True)
    target = math.log(cand_l)
    base_c = float(np.exp(f(target)))
    extrapolated = bool(target < log_l[-1] or target > log_l[0])
    return MultiplierEstimate(value=base_c / cand_c, flagged=flagged,
                              extrapolated=extrapolated)


def mup_exponent_check(
    opt: OptimizerConfig,
    plan: ScalingPlan,
    widths: tuple[int, ...],
    seed: int = 0,
    n_draws: int = 8,
) -> ExponentCheck:
    """End-to-end check that measured update growth matches the lr formula.

    Feeds rank-1 gradients delta x^T with delta entries ~ 1/D to the oracle
    at eta=1 and regresses rms(Q x') against width; the negative of that
    slope should equal the learning-rate multiplier's slope.
    """
    rng = np.random.default_rng(seed)
    rms_means = []
    mults = []
    for width in widths:
        spec = LayerSpec(
            "probe", "hidden", d_in=width, d_out=width,
            base_d_in=plan.base_width, base_d_out=plan.base_width,
        )
        cfg = _layer_config(spec, opt, plan)
        hyper = LayerHyper(
            eta=1.0, eps=cfg.eps, sigma_init=0.0, residual_mult=1.0, lambda_wd=0.0
        )
        vals = []
        for _ in range(n_draws):
            delta = rng.standard_normal(width) / width
            x = rng.standard_normal(width)
            z = rng.standard_normal(width)
            x_probe = 0.5 * x + math.sqrt(1.0 - 0.25) * z
            v = rank1_oracle(cfg, delta, x, x_probe, hyper)
            vals.append(float(np.linalg.norm(v)) / math.sqrt(width))
        rms_means.append(float(np.mean(vals)))
        mults.append(lr_multiplier(spec, opt, plan))
    measured, r2 = exponent_fit(widths, rms_means)
    predicted, _ = exponent_fit(widths, mults)
    return ExponentCheck(measured_slope=measured, multiplier_slope=predicted, r2=r2)


def oracle_agreement(
    opt: OptimizerConfig,
    n_draws: int = 100,
    seed: int = 0,
    d_out: int = 12,
    d_in: int = 9,
) -> float:
    """Max relative gap between rank1_oracle and the full optimizer step.

    eps draws stay above 1e-5: the dense eigendecomposition reference itself
    carries rounding noise of order (lambda / eps) * machine epsilon, so
    smaller guards would drown a 1e-8 comparison in reference error.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_draws):
        delta = rng.standard_normal(d_out)
        x = rng.standard_normal(d_in)
        x_probe = rng.standard_normal(d_in)
        eta = 10.0 ** rng.uniform(-1, 1)
        eps = 10.0 ** rng.uniform(-5, -2)
        hyper = LayerHyper(eta=eta, eps=eps, sigma_init=0.0, residual_mult=1.0,
                           lambda_wd=0.0)
        analytic = rank1_oracle(opt, delta, x, x_probe, hyper)
        cfg = replace(opt, beta1=0.0, beta2=0.0, eps=eps)
        report = optimizer_step(LayerState(), np.outer(delta, x), cfg)
        full = eta * (report.update @ x_probe)
        scale = max(float(np.linalg.norm(full)), 1e-30)
        worst = max(worst, float(np.linalg.norm(analytic - full)) / scale)
    return worst


def muon_svd_error(
    opt: OptimizerConfig,
    n_draws: int = 100,
    seed: int = 0,
    d_out: int = 12,
    d_in: int = 9,
) -> float:
    """Max relative gap between rank1_oracle for muon and exact msign.

    The reference orthogonalization comes from an SVD, an independent route
    from the polynomial iteration; the gap bounds how far the iteration sits
    from the true nearest semi-orthogonal matrix on these inputs.
    """
    if opt.rule != "muon":
        raise ValueError("the SVD reference is defined for the muon rule")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_draws):
        delta = rng.standard_normal(d_out)
        x = rng.standard_normal(d_in)
        x_probe = rng.standard_normal(d_in)
        hyper = LayerHyper(eta=1.0, eps=opt.eps, sigma_init=0.0, residual_mult=1.0,
                           lambda_wd=0.0)
        got = rank1_oracle(opt, delta, x, x_probe, hyper)
        u, _, vt = np.linalg.svd(np.outer(delta, x), full_matrices=False)
        want = (u[:, :1] @ vt[:1]) @ x_probe
        scale = max(float(np.linalg.norm(want)), 1e-30)
        worst = max(worst, float(np.linalg.norm(got - want)) / scale)
    return worst


def records_csv(records: list[MetricRecord]) -> str:
    """Render records with a fixed header; floats via repr for determinism."""
    lines = [CSV_HEADER]
    for r in records:
        lines.append(
            f"{r.run_id},{r.width},{r.depth},{r.step},{float(r.eta_base)!r},"
            f"{float(r.loss)!r},{r.layer},{float(r.delta_h_rms)!r},"
            f"{float(r.srank)!r},{float(r.spec_norm)!r}"
        )
    return "\n".join(lines) + "\n"


def run_summary(result: RunResult) -> dict:
    return {
        "run_id": result.run_id,
        "width": result.width,
        "depth": result.depth,
        "eta_base": result.eta_base,
        "seed": result.seed,
        "diverged": result.diverged,
        "final_loss": result.final_loss,
        "steps_completed": result.steps_completed,
    }
