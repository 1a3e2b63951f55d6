"""Run configuration: strict JSON validation with path-qualified errors."""

import difflib
import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .cuts import CutConfig
from .density import BridgeConfig
from .dynamics import SimConfig
from .env import EnvSpec, intensity_for_cell_mean, parse_variant

EXPERIMENTS = ("simulate", "cuts", "velocity", "clt", "density", "calibrate-eps", "decouple", "quenched-scan", "mclt")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending key."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class EnvSection(_Strict):
    d1: int = Field(ge=1)
    d2: int = Field(ge=1)
    kappa: float = Field(0.1, ge=0, allow_inf_nan=False)
    range_R: float = Field(0.5, gt=0, allow_inf_nan=False)
    intensity: float = Field(0.0, ge=0, allow_inf_nan=False)
    cell_mean: Optional[float] = Field(None, ge=0, allow_inf_nan=False)
    variant: str = "zero"
    master_seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("variant")
    @classmethod
    def _variant(cls, v):
        parse_variant(v)
        return v


class SimSection(_Strict):
    dt: float = Field(0.01, gt=0)
    horizon_T: float = Field(100.0, gt=0)
    path_seed: int = Field(0, ge=0, lt=2**64)
    start: Optional[list[float]] = None


class CutSection(_Strict):
    margin: Optional[float] = Field(None, ge=0)
    window_past: int = Field(50, ge=1)
    window_future: int = Field(50, ge=1)
    refine: int = Field(4, ge=1)


class BridgeSection(_Strict):
    n_bridges: int = Field(32, ge=1)
    steps_per_unit: int = Field(10, ge=2)
    seed: int = Field(0, ge=0, lt=2**64)


class OptionsSection(_Strict):
    """Experiment-specific knobs; each experiment reads the ones it needs."""

    eps: Optional[float] = Field(None, gt=0, lt=1)
    rescale_n: int = Field(100, ge=1)
    coupled_runs: int = Field(0, ge=0)
    negative_control: bool = False
    min_blocks: int = Field(500, ge=1)
    alpha: float = Field(0.01, gt=0, lt=1)
    density_points: int = Field(20, ge=1)
    safety_factor: float = Field(0.5, gt=0, le=1)
    n_envs: int = Field(200, ge=2)
    paths_per_env: int = Field(200, ge=2)
    scan_T: float = Field(1.0 / 400, gt=0)
    dyadic_m: tuple[int, int] = (3, 8)
    generator: Literal["iid_gaussian", "rank_one", "g_stream", "bounded", "t3"] = "iid_gaussian"
    stream_d: int = Field(2, ge=1)
    n_list: list[int] = Field(default_factory=lambda: [1000, 10_000])
    lindeberg_eps: float = Field(0.5, gt=0)


class RunSection(_Strict):
    env: EnvSection
    sim: SimSection = SimSection()
    cut: CutSection = CutSection()
    bridge: BridgeSection = BridgeSection()
    options: OptionsSection = OptionsSection()
    experiment: Optional[Literal[EXPERIMENTS]] = None
    replicas: int = Field(1, ge=1)
    output_dir: Optional[str] = None
    emit_plots: bool = False


class RunConfig:
    """Validated configuration with the package's native config objects."""

    def __init__(self, section):
        self.section = section
        e = section.env
        try:
            spec = EnvSpec(d1=e.d1, d2=e.d2, kappa=e.kappa, range_R=e.range_R, intensity=e.intensity,
                           variant=e.variant, master_seed=e.master_seed)
            if e.cell_mean is not None:
                if e.intensity:
                    raise ConfigError("env.cell_mean", "give either intensity or cell_mean, not both")
                spec = spec.replace(intensity=intensity_for_cell_mean(spec, e.cell_mean))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(_guess_path("env", str(exc), EnvSection), str(exc)) from None
        self.env = spec
        s = section.sim
        try:
            self.sim = SimConfig(dt=s.dt, horizon_T=s.horizon_T, path_seed=s.path_seed,
                                 start=None if s.start is None else tuple(s.start))
            if s.start is not None and len(s.start) != spec.d:
                raise ValueError(f"start must have {spec.d} coordinates")
        except ValueError as exc:
            raise ConfigError(_guess_path("sim", str(exc), SimSection), str(exc)) from None
        c = section.cut
        try:
            self.cut = CutConfig(range_R=spec.range_R, margin=c.margin, window_past=c.window_past,
                                 window_future=c.window_future, refine=c.refine)
        except ValueError as exc:
            raise ConfigError(_guess_path("cut", str(exc), CutSection), str(exc)) from None
        b = section.bridge
        self.bridge = BridgeConfig(n_bridges=b.n_bridges, steps_per_unit=b.steps_per_unit, seed=b.seed)
        self.options = section.options
        self.experiment = section.experiment
        self.replicas = section.replicas
        self.output_dir = section.output_dir
        self.emit_plots = section.emit_plots

    def resolved(self):
        """The full configuration as plain JSON data."""
        out = self.section.model_dump(mode="json")
        out["env"] = self.env.to_dict()
        out["env"]["cell_mean"] = self.section.env.cell_mean
        out["sim"] = self.sim.to_dict()
        out["cut"] = self.cut.to_dict()
        out["bridge"] = self.bridge.to_dict()
        out["experiment"] = self.experiment
        return out

    def with_overrides(self, **kw):
        data = self.section.model_dump()
        for key, val in kw.items():
            sec, _, name = key.rpartition(".")
            (data[sec] if sec else data)[name] = val
        try:
            return RunConfig(RunSection.model_validate(data))
        except ValidationError as exc:
            raise _format(exc.errors()[0]) from None


def _guess_path(section, message, model):
    if message.startswith("constant"):
        return f"{section}.variant"
    for name in model.model_fields:
        if message.startswith(name) or f" {name}" in message or f"{name}=" in message:
            return f"{section}.{name}"
    return section


def _model_at(loc):
    model = RunSection
    for part in loc:
        field = model.model_fields.get(part) if isinstance(part, str) else None
        if field is None:
            return None
        ann = field.annotation
        args = getattr(ann, "__args__", ())
        cand = [a for a in (ann, *args) if isinstance(a, type) and issubclass(a, BaseModel)]
        if not cand:
            return None
        model = cand[0]
    return model


def _format(err):
    loc = tuple(err["loc"])
    path = ".".join(str(p) for p in loc)
    if err["type"] == "extra_forbidden":
        parent = _model_at(loc[:-1])
        known = list(parent.model_fields) if parent else []
        near = difflib.get_close_matches(str(loc[-1]), known, n=1, cutoff=0.5)
        hint = f"; did you mean {'.'.join(str(p) for p in loc[:-1] + (near[0],))!r}?" if near else ""
        return ConfigError(path, f"unknown key{hint}")
    if err["type"] == "missing":
        return ConfigError(path, "missing required field")
    return ConfigError(path, err["msg"])


def parse_config(document):
    """Validate a JSON document (text, bytes or already-parsed dict) into a RunConfig."""
    if isinstance(document, (str, bytes)):
        try:
            data = json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"malformed JSON: {exc}") from None
    else:
        data = document
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be a JSON object")
    try:
        section = RunSection.model_validate(_listify(data))
    except ValidationError as exc:
        errs = [_format(e) for e in exc.errors()]
        first = errs[0]
        if len(errs) > 1:
            first = ConfigError(first.path, str(first).split(": ", 1)[-1]
                                + "".join(f"\n  {e}" for e in errs[1:]))
        raise first from None
    return RunConfig(section)


def _listify(data):
    # JSON has no tuples; strict mode wants them for dyadic_m
    opts = data.get("options")
    if isinstance(opts, dict) and isinstance(opts.get("dyadic_m"), list):
        data = dict(data, options=dict(opts, dyadic_m=tuple(opts["dyadic_m"])))
    return data


def load_config(path):
    with open(path, "rb") as fh:
        return parse_config(fh.read().decode("utf-8"))


__all__ = ["EXPERIMENTS", "ConfigError", "RunConfig", "load_config", "parse_config"]
