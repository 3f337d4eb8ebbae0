"""Per-layer hyperparameter scaling rules.

Maps layer geometry (fan-in, fan-out, residual depth, block layout) to
learning rate, damping, initialization, residual and weight-decay
multipliers under each parameterization. Multipliers are ratios of a
closed-form formula evaluated at the layer's shape over the same formula
at the base shape, so a base-shaped layer always gets exactly 1.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

from .optim import GRAFT_RULES, OptimizerConfig

ROLES = ("embedding", "hidden", "readout", "bias")
PARAMS = (
    "sp",
    "mup",
    "spectral_norm",
    "muon_kimi_theta1",
    "muon_kimi_adamexp",
    "muon_adamexp",
)
ALT_MUON_PARAMS = ("muon_kimi_theta1", "muon_kimi_adamexp", "muon_adamexp")
WD_MODES = ("constant", "inv_width")

# Hidden layers initialize at c/sqrt(d_in); embeddings at a fixed scale.
HIDDEN_INIT_C = 1.0
EMBEDDING_INIT_SIGMA = 0.1


@dataclass(frozen=True)
class LayerSpec:
    """Geometry of one weight matrix, plus its base-shape counterpart.

    base_d_in / base_d_out override the derived base shape; when left None
    the base dims come from the plan's base width for width-bearing dims
    (role-dependent) and stay equal to the actual dims otherwise. Size-1
    dims never rescale.
    """

    name: str
    role: str
    d_in: int
    d_out: int
    in_residual: bool = False
    depth_l: int = 1
    b_in: int | None = None
    b_out: int | None = None
    base_d_in: int | None = None
    base_d_out: int | None = None

    def __post_init__(self) -> None:
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}; expected one of {ROLES}")
        if self.d_in < 1 or self.d_out < 1:
            raise ValueError(f"layer {self.name!r}: dims must be positive")
        if self.role == "bias" and self.d_in != 1:
            raise ValueError(f"bias layer {self.name!r} must have d_in=1")
        if self.depth_l < 1:
            raise ValueError(f"layer {self.name!r}: depth_l must be >= 1")
        for b in (self.b_in, self.b_out):
            if b is not None and b < 1:
                raise ValueError(f"layer {self.name!r}: block sizes must be positive")
        for b in (self.base_d_in, self.base_d_out):
            if b is not None and b < 1:
                raise ValueError(f"layer {self.name!r}: base dims must be positive")

    @property
    def b_in_eff(self) -> int:
        return self.d_in if self.b_in is None else min(self.b_in, self.d_in)

    @property
    def b_out_eff(self) -> int:
        return self.d_out if self.b_out is None else min(self.b_out, self.d_out)

    @property
    def n_in(self) -> int:
        return math.ceil(self.d_in / self.b_in_eff)

    @property
    def n_out(self) -> int:
        return math.ceil(self.d_out / self.b_out_eff)

    @property
    def n_blk(self) -> int:
        return self.n_in * self.n_out

    def base_shape(self, base_width: int | None = None) -> tuple[int, int]:
        """Return (base_d_in, base_d_out), deriving unset dims from base_width."""
        scale_in, scale_out = _WIDTH_BEARING[self.role]
        base_in = self.base_d_in
        if base_in is None:
            base_in = (
                base_width
                if base_width is not None and scale_in and self.d_in != 1
                else self.d_in
            )
        base_out = self.base_d_out
        if base_out is None:
            base_out = (
                base_width
                if base_width is not None and scale_out and self.d_out != 1
                else self.d_out
            )
        return base_in, base_out


# Which dims follow model width, by role: (d_in scales, d_out scales).
_WIDTH_BEARING = {
    "embedding": (False, True),
    "hidden": (True, True),
    "readout": (True, False),
    "bias": (False, True),
}


@dataclass(frozen=True)
class ScalingPlan:
    param: str
    base_width: int
    eta_base: float
    base_depth: int = 1
    wd_base: float = 0.0
    wd_mode: str = "constant"
    alpha_depth: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "param", self.param.lower())
        if self.param not in PARAMS:
            raise ValueError(f"unknown param {self.param!r}; expected one of {PARAMS}")
        if self.base_width < 1:
            raise ValueError("base_width must be positive")
        if self.base_depth < 1:
            raise ValueError("base_depth must be positive")
        if not self.eta_base > 0:
            raise ValueError("eta_base must be positive")
        if self.wd_base < 0:
            raise ValueError("wd_base must be >= 0")
        if self.wd_mode not in WD_MODES:
            raise ValueError(f"unknown wd_mode {self.wd_mode!r}")
        if not 0.0 <= self.alpha_depth <= 1.0:
            raise ValueError("alpha_depth must lie in [0, 1]")
        if self.param == "sp" and self.alpha_depth != 0.0:
            raise ValueError("sp fixes alpha_depth = 0")


@dataclass(frozen=True)
class LayerHyper:
    eta: float
    eps: float
    sigma_init: float
    residual_mult: float
    lambda_wd: float

    def __post_init__(self) -> None:
        for field_name in ("eta", "eps", "sigma_init", "residual_mult", "lambda_wd"):
            v = getattr(self, field_name)
            if not math.isfinite(v):
                raise ValueError(f"{field_name} must be finite, got {v!r}")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.eps < 0 or self.sigma_init < 0 or self.lambda_wd < 0:
            raise ValueError("eps, sigma_init and lambda_wd must be >= 0")


@dataclass(frozen=True)
class ModelManifest:
    width: int
    depth: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self) -> None:
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be positive")
        if not self.layers:
            raise ValueError("manifest needs at least one layer")
        names = [s.name for s in self.layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")


def _with_base_dims(spec: LayerSpec, plan: ScalingPlan) -> LayerSpec:
    base_in, base_out = spec.base_shape(plan.base_width)
    return replace(spec, base_d_in=base_in, base_d_out=base_out)


def _resolve_blocks(spec: LayerSpec, opt: OptimizerConfig) -> LayerSpec:
    """Fill unset layer block sizes from the optimizer config."""
    b_in = spec.b_in if spec.b_in is not None else opt.block_in
    b_out = spec.b_out if spec.b_out is not None else opt.block_out
    if (b_in, b_out) == (spec.b_in, spec.b_out):
        return spec
    return replace(spec, b_in=b_in, b_out=b_out)


def _base_geometry(spec: LayerSpec, plan: ScalingPlan) -> LayerSpec:
    """The same layer as it would appear in the base model."""
    base_in, base_out = spec.base_shape(plan.base_width)
    return replace(
        spec,
        d_in=base_in,
        d_out=base_out,
        depth_l=plan.base_depth,
        base_d_in=base_in,
        base_d_out=base_out,
    )


def _depth(spec: LayerSpec) -> int:
    return spec.depth_l if spec.in_residual else 1


def _lr_formula(rule: str, e_l: float, e_r: float, spec: LayerSpec) -> float:
    d_in, d_out, l = spec.d_in, spec.d_out, _depth(spec)
    if rule == "sgd":
        return l * d_out / d_in
    if rule in ("adam", "adamuon"):
        return 1.0 / d_in
    if rule == "muon":
        return math.sqrt(d_out / d_in)
    if rule == "shampoo":
        s = e_l + e_r
        return (d_out / d_in) ** (1.0 - s) / (l ** (2.0 * s - 1.0) * spec.n_blk**s)
    if rule == "soap":
        return spec.b_out_eff ** (e_l / 2.0) * spec.b_in_eff ** (e_r / 2.0) / d_in
    raise ValueError(f"no learning-rate rule for {rule!r}")


def _eps_formula(rule: str, e_l: float, e_r: float, spec: LayerSpec) -> float:
    d_in, d_out, l = spec.d_in, spec.d_out, _depth(spec)
    if rule == "sgd":
        return 1.0
    if rule == "adam":
        return 1.0 / (l * d_out)
    if rule == "muon":
        return math.sqrt(d_in / d_out) / l
    if rule == "adamuon":
        return 1.0 / math.sqrt(d_in * d_out)
    if rule == "shampoo":
        return d_in / (l**2 * d_out * spec.n_blk)
    if rule == "soap":
        return (
            spec.b_out_eff ** (e_l / 2.0)
            * spec.b_in_eff ** (e_r / 2.0)
            / (l * d_out)
        )
    raise ValueError(f"no damping rule for {rule!r}")


def _lr_column(opt: OptimizerConfig, role: str) -> tuple[str, float, float]:
    """Pick (rule, e_l, e_r) governing the learning-rate column."""
    if role == "bias":
        return "adam", 0.0, 0.0
    if opt.graft_rule is not None:
        # norm comes from the reference optimizer, so its rule sets the lr
        return opt.graft_rule, 0.0, 0.0
    return opt.rule, opt.e_l, opt.e_r


def _ratio(formula, rule: str, e_l: float, e_r: float, spec: LayerSpec, plan: ScalingPlan) -> float:
    cur = formula(rule, e_l, e_r, spec)
    base = formula(rule, e_l, e_r, _base_geometry(spec, plan))
    return cur / base


def _check_pair(opt: OptimizerConfig, plan: ScalingPlan) -> None:
    if plan.param in ALT_MUON_PARAMS and (opt.rule != "muon" or opt.graft_rule):
        raise ValueError(
            f"parameterization {plan.param!r} applies only to plain muon, "
            f"got rule {opt.rule!r}"
            + (f" grafted onto {opt.graft_rule!r}" if opt.graft_rule else "")
        )


def lr_multiplier(spec: LayerSpec, opt: OptimizerConfig, plan: ScalingPlan) -> float:
    """Per-layer learning-rate factor relative to the base shape."""
    _check_pair(opt, plan)
    if plan.param in ("sp", "spectral_norm"):
        return 1.0
    if plan.param in ALT_MUON_PARAMS:
        return alt_muon_multiplier(_with_base_dims(spec, plan), plan.param)
    rule, e_l, e_r = _lr_column(opt, spec.role)
    return _ratio(_lr_formula, rule, e_l, e_r, _resolve_blocks(spec, opt), plan)


def eps_scale(spec: LayerSpec, opt: OptimizerConfig, plan: ScalingPlan) -> float:
    """Damping factor relative to the base shape.

    For grafted configs this is the guard on the direction norm,
    (1/lr_formula(Q2)) * sqrt(d_out/d_in); for relative-mode Shampoo the
    damping already tracks the factor spectrum, so the factor is 1.
    """
    _check_pair(opt, plan)
    if plan.param in ("sp", "spectral_norm"):
        return 1.0
    if opt.graft_rule is not None:

        def guard(rule: str, e_l: float, e_r: float, s: LayerSpec) -> float:
            return math.sqrt(s.d_out / s.d_in) / _lr_formula(rule, e_l, e_r, s)

        return _ratio(guard, opt.rule, opt.e_l, opt.e_r, _resolve_blocks(spec, opt), plan)
    return _rule_eps_scale(spec, opt, plan)


def _rule_eps_scale(spec: LayerSpec, opt: OptimizerConfig, plan: ScalingPlan) -> float:
    """Damping factor for the main rule's own eps, ignoring any graft."""
    if plan.param in ("sp", "spectral_norm"):
        return 1.0
    if opt.rule == "shampoo" and opt.eps_mode == "relative":
        return 1.0
    rule, e_l, e_r = (opt.rule, opt.e_l, opt.e_r)
    if spec.role == "bias":
        rule, e_l, e_r = "adam", 0.0, 0.0
    return _ratio(_eps_formula, rule, e_l, e_r, _resolve_blocks(spec, opt), plan)


def _graft_ref_eps_scale(spec: LayerSpec, opt: OptimizerConfig, plan: ScalingPlan) -> float:
    """Damping factor for the grafting reference optimizer's eps."""
    if plan.param in ("sp", "spectral_norm") or opt.graft_rule is None:
        return 1.0
    return _ratio(_eps_formula, opt.graft_rule, 0.0, 0.0, spec, plan)


def init_sigma(spec: LayerSpec, plan: ScalingPlan) -> float:
    if spec.role == "hidden":
        return HIDDEN_INIT_C / math.sqrt(spec.d_in)
    if spec.role == "embedding":
        return EMBEDDING_INIT_SIGMA
    # readout is zero-initialized; biases start at zero
    return 0.0


def residual_multiplier(depth: int, alpha: float) -> float:
    if depth < 1:
        raise ValueError("depth must be positive")
    return float(depth) ** (-alpha)


def wd_scale(width: int, base_width: int, mode: str) -> float:
    if mode not in WD_MODES:
        raise ValueError(f"unknown wd_mode {mode!r}")
    if width < 1 or base_width < 1:
        raise ValueError("widths must be positive")
    if mode == "constant":
        return 1.0
    return base_width / width


def alt_muon_multiplier(spec: LayerSpec, variant: str) -> float:
    """Learning-rate factor under the published Muon heuristics.

    muon_kimi_theta1 rescales by gamma = 0.2 sqrt(max(d_in, d_out));
    muon_kimi_adamexp additionally carries Adam's 1/d_in exponent;
    muon_adamexp uses the 1/d_in exponent alone.
    """
    if variant not in ALT_MUON_PARAMS:
        raise ValueError(f"unknown muon variant {variant!r}")
    base_in, base_out = spec.base_shape()
    gamma_ratio = math.sqrt(max(spec.d_in, spec.d_out) / max(base_in, base_out))
    if variant == "muon_kimi_theta1":
        return gamma_ratio
    if variant == "muon_kimi_adamexp":
        return gamma_ratio * base_in / spec.d_in
    return base_in / spec.d_in


def build_plan(
    manifest: ModelManifest,
    opt: OptimizerConfig,
    plan: ScalingPlan,
    overrides: dict[str, dict[str, float]] | None = None,
) -> dict[str, LayerHyper]:
    """Assemble the per-layer hyperparameter table for one model."""
    overrides = dict(overrides or {})
    unknown = set(overrides) - {s.name for s in manifest.layers}
    if unknown:
        raise ValueError(f"overrides name unknown layers: {sorted(unknown)}")
    lam = plan.wd_base * wd_scale(manifest.width, plan.base_width, plan.wd_mode)
    table: dict[str, LayerHyper] = {}
    for spec in manifest.layers:
        eps_base = opt.graft_eps if opt.graft_rule is not None else opt.eps
        fields = {
            "eta": plan.eta_base * lr_multiplier(spec, opt, plan),
            "eps": eps_base * eps_scale(spec, opt, plan),
            "sigma_init": init_sigma(spec, plan),
            "residual_mult": (
                residual_multiplier(spec.depth_l, plan.alpha_depth)
                if spec.in_residual
                else 1.0
            ),
            "lambda_wd": lam,
        }
        if spec.name in overrides:
            patch = overrides[spec.name]
            bad = set(patch) - set(fields)
            if bad:
                raise ValueError(
                    f"override for {spec.name!r} has unknown fields: {sorted(bad)}"
                )
            fields.update(patch)
        table[spec.name] = LayerHyper(**fields)
    return table


def plan_to_json(table: dict[str, LayerHyper]) -> str:
    doc = {
        name: {
            "eta": h.eta,
            "eps": h.eps,
            "sigma_init": h.sigma_init,
            "residual_mult": h.residual_mult,
            "lambda_wd": h.lambda_wd,
        }
        for name, h in table.items()
    }
    return json.dumps(doc, indent=2)


def plan_from_json(text: str) -> dict[str, LayerHyper]:
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError("plan document must be a JSON object")
    return {name: LayerHyper(**fields) for name, fields in doc.items()}
