"""Instance-dependent prompt generators and the static prompt baselines.

A generator maps a sentence representation ``rep`` (width ``enc_dim``) to
``t`` prompt vectors of width ``d`` through a bottleneck:

    prompt = reshape(up(act(down(rep))), [t, d])

``down`` and ``up`` are dense or PHM layers. In multi-layer mode one prompt is
produced per transformer layer; the sharing variant decides which pieces are
layer-specific:

    S  one (down, up, bias) set for every layer
    M  shared down/up weights, one up-bias per layer
    L  an independent (down, up) pair per layer
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as F
from .errors import BiasIndexError, ConfigError
from .phm import DenseLinear, PhmLinear, SharedAPool, phm_param_count
from .tensor import Tensor

FLAVORS = ("dnn", "phm")
SHARING = ("S", "M", "L")
INPUT_SOURCES = ("layer0", "previous_layer")
ENCODERS = ("backbone_cls", "bag_of_vectors")
ARCH_VARIANTS = ("plain", "residual", "layernorm", "residual_layernorm")
NONLINEARITIES = {"tanh": F.tanh, "relu": F.relu, "gelu": F.gelu}


@dataclass(frozen=True)
class GeneratorConfig:
    flavor: str = "phm"
    t: int = 5
    m: int = 16
    d: int = 32
    n: int = 4
    depth_mode: str = "multi"
    num_layers: int = 2
    sharing: str = "M"
    input_source: str = "previous_layer"
    encoder: str = "backbone_cls"
    enc_dim: int | None = None
    arch_variant: str = "plain"
    nonlinearity: str = "tanh"

    def __post_init__(self):
        if self.enc_dim is None:
            object.__setattr__(self, "enc_dim", self.d)
        if self.flavor not in FLAVORS:
            raise ConfigError(f"flavor must be one of {FLAVORS}, got {self.flavor!r}")
        if self.depth_mode not in ("single", "multi"):
            raise ConfigError(f"depth_mode must be single or multi, got {self.depth_mode!r}")
        if self.sharing not in SHARING:
            raise ConfigError(f"sharing must be one of {SHARING}, got {self.sharing!r}")
        if self.input_source not in INPUT_SOURCES:
            raise ConfigError(f"input_source must be one of {INPUT_SOURCES}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}")
        if self.arch_variant not in ARCH_VARIANTS:
            raise ConfigError(f"arch_variant must be one of {ARCH_VARIANTS}")
        if self.nonlinearity not in NONLINEARITIES:
            raise ConfigError(f"unknown nonlinearity {self.nonlinearity!r}")
        for name in ("t", "m", "d", "enc_dim", "num_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.flavor == "phm":
            n = self.n
            if n < 1 or self.m % n or self.d % n or self.enc_dim % n:
                raise ConfigError(
                    f"PHM factor n={n} must divide m={self.m}, d={self.d} and enc_dim={self.enc_dim}"
                )
        if (self.depth_mode == "multi" and self.input_source == "previous_layer"
                and self.enc_dim != self.d):
            raise ConfigError("previous_layer input needs enc_dim == d")

    @property
    def multi(self):
        return self.depth_mode == "multi"

    @property
    def num_prompts(self):
        """How many distinct layer slots the generator serves."""
        return self.num_layers if self.multi else 1

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _sharing_key(sharing, multi):
    return sharing if multi else "single"


def dnn_generator_param_count(m, d_enc, t, d, sharing="single", N=1):
    """Trainable parameters of a dense bottleneck generator (biases included)."""
    single = m * (d_enc + 1) + t * d * (m + 1)
    if sharing in ("single", "S"):
        return single
    if sharing == "M":
        return m * d_enc + m + m * t * d + t * d * N
    if sharing == "L":
        return N * single
    raise ConfigError(f"unknown sharing {sharing!r}")


def phm_generator_param_count(m, d_enc, t, d, n, sharing="single", N=1):
    """Trainable parameters of a PHM bottleneck generator.

    Single-layer generators share one A set between both projections;
    multi-layer generators keep one A set per projection.
    """
    down = phm_param_count(n, m, d_enc, own_A=False, num_biases=1)
    if sharing == "single":
        return down + phm_param_count(n, t * d, m, own_A=False, num_biases=1) + n ** 3
    if sharing == "S":
        return down + phm_param_count(n, t * d, m, own_A=False, num_biases=1) + 2 * n ** 3
    if sharing == "M":
        return down + phm_param_count(n, t * d, m, own_A=False, num_biases=N) + 2 * n ** 3
    if sharing == "L":
        return N * phm_generator_param_count(m, d_enc, t, d, n, "S")
    raise ConfigError(f"unknown sharing {sharing!r}")


def arch_extra_param_count(variant, enc_dim, d):
    proj = 0 if enc_dim == d else d * enc_dim + d
    if variant == "plain":
        return 0
    if variant == "residual":
        return proj
    if variant == "layernorm":
        return 2 * d
    if variant == "residual_layernorm":
        return proj + 3 * 2 * d
    raise ConfigError(f"unknown arch variant {variant!r}")


def generator_param_count(cfg):
    key = _sharing_key(cfg.sharing, cfg.multi)
    if cfg.flavor == "dnn":
        core = dnn_generator_param_count(cfg.m, cfg.enc_dim, cfg.t, cfg.d, key, cfg.num_layers)
    else:
        core = phm_generator_param_count(cfg.m, cfg.enc_dim, cfg.t, cfg.d, cfg.n, key,
                                         cfg.num_layers)
    return core + arch_extra_param_count(cfg.arch_variant, cfg.enc_dim, cfg.d)


def _norm_params(d, dtype, prefix):
    gain = Tensor(np.ones(d, dtype=dtype), requires_grad=True, name=f"{prefix}/gain")
    shift = Tensor(np.zeros(d, dtype=dtype), requires_grad=True, name=f"{prefix}/shift")
    return gain, shift


class PromptGenerator:
    """The generator G; see the module docstring for the sharing rules."""

    def __init__(self, config, units, pool=None, extras=None):
        self.config = config
        self.units = units          # list of (down, up) layer pairs
        self.pool = pool
        self.extras = extras or {}

    @classmethod
    def init(cls, config, seed=0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        cfg = config
        td = cfg.t * cfg.d
        n_units = cfg.num_layers if (cfg.multi and cfg.sharing == "L") else 1
        up_biases = cfg.num_layers if (cfg.multi and cfg.sharing == "M") else 1
        pool = SharedAPool() if cfg.flavor == "phm" else None
        units = []
        for u in range(n_units):
            tag = f"generator/u{u}"
            if cfg.flavor == "dnn":
                down = DenseLinear.init(cfg.enc_dim, cfg.m, rng, 1, dtype, f"{tag}/down")
                up = DenseLinear.init(cfg.m, td, rng, up_biases, dtype, f"{tag}/up")
            else:
                a_down = pool.new(cfg.n, rng, dtype, name=f"{tag}/A" if not cfg.multi
                                  else f"{tag}/down.A")
                a_up = a_down if not cfg.multi else pool.new(cfg.n, rng, dtype, name=f"{tag}/up.A")
                down = PhmLinear.init(cfg.enc_dim, cfg.m, cfg.n, rng, a_set=a_down, num_biases=1,
                                      dtype=dtype, name=f"{tag}/down")
                up = PhmLinear.init(cfg.m, td, cfg.n, rng, a_set=a_up, num_biases=up_biases,
                                    dtype=dtype, name=f"{tag}/up")
            units.append((down, up))
        extras = {}
        if cfg.arch_variant in ("residual", "residual_layernorm") and cfg.enc_dim != cfg.d:
            extras["rep_proj"] = DenseLinear.init(cfg.enc_dim, cfg.d, rng, 1, dtype,
                                                  "generator/rep_proj")
        if cfg.arch_variant == "layernorm":
            extras["ln_out"] = _norm_params(cfg.d, dtype, "generator/ln_out")
        if cfg.arch_variant == "residual_layernorm":
            for key in ("ln_tok", "ln_rep", "ln_out"):
                extras[key] = _norm_params(cfg.d, dtype, f"generator/{key}")
        return cls(config, units, pool, extras)

    @property
    def dtype(self):
        return self.units[0][1].biases[0].dtype

    def named_parameters(self):
        """Every trainable tensor exactly once (shared A sets included once)."""
        out = {}
        if self.pool is not None:
            out.update(self.pool.named_parameters())
        for down, up in self.units:
            for layer in (down, up):
                if isinstance(layer, PhmLinear):
                    out.update(layer.named_parameters(include_A=False))
                else:
                    out.update(layer.named_parameters())
        for key, value in self.extras.items():
            if isinstance(value, DenseLinear):
                out.update(value.named_parameters())
            else:
                out.update({t.name: t for t in value})
        return out

    def param_count(self):
        return generator_param_count(self.config)

    def set_weights_zero(self):
        """Zero every projection weight, keeping the bias bank (prompt-tuning limit)."""
        for down, up in self.units:
            for layer in (down, up):
                mats = layer.B if isinstance(layer, PhmLinear) else [layer.weight]
                for w in mats:
                    w.data[...] = 0.0
        return self

    def bias_bank(self):
        """The up-projection biases, one entry per layer slot (reshaped t x d)."""
        cfg = self.config
        out = []
        for layer in range(cfg.num_prompts):
            _, up, bias_index = self._route(layer)
            out.append(up.biases[bias_index].data.reshape(cfg.t, cfg.d))
        return out

    def _route(self, layer_index):
        cfg = self.config
        limit = cfg.num_prompts
        if not 0 <= layer_index < limit:
            raise BiasIndexError(f"layer_index={layer_index} out of range [0, {limit})")
        if not cfg.multi or cfg.sharing == "S":
            down, up = self.units[0]
            return down, up, 0
        if cfg.sharing == "M":
            down, up = self.units[0]
            return down, up, layer_index
        down, up = self.units[layer_index]
        return down, up, 0

    def generate(self, rep, layer_index=0, tape=None):
        """Prompt rows for ``rep`` ([enc] -> [t, d], or [B, enc] -> [B, t, d])."""
        cfg = self.config
        if tape is None:
            tape = rep.tape
        down, up, bias_index = self._route(layer_index)
        act = NONLINEARITIES[cfg.nonlinearity]
        hid = act(down(rep, 0, tape), tape=tape)
        out = up(hid, bias_index, tape)
        lead = rep.shape[:-1]
        out = F.reshape(out, lead + (cfg.t, cfg.d), tape=tape)
        variant = cfg.arch_variant
        if variant == "plain":
            return out
        if variant == "layernorm":
            gain, shift = self.extras["ln_out"]
            return F.layer_norm(out, gain, shift, tape=tape)
        res = rep
        if "rep_proj" in self.extras:
            res = self.extras["rep_proj"](rep, 0, tape)
        res = F.reshape(res, lead + (1, cfg.d), tape=tape)
        if variant == "residual":
            return F.add(out, res, tape=tape)
        tok = F.layer_norm(out, *self.extras["ln_tok"], tape=tape)
        res = F.layer_norm(res, *self.extras["ln_rep"], tape=tape)
        return F.layer_norm(F.add(tok, res, tape=tape), *self.extras["ln_out"], tape=tape)


def generate_prompt(g, rep, layer_index=0, tape=None):
    return g.generate(rep, layer_index, tape)


class StaticPrompt:
    """Input-independent prompts: prompt tuning (single) or P-tuning v2 (deep).

    Prompts are stored as flat [t*d] rows so the forward pass performs the
    same arithmetic as a generator whose projection weights are zero.
    """

    def __init__(self, t, d, prompts, deep=False):
        self.t, self.d = t, d
        self.prompts = list(prompts)
        self.deep = deep

    @classmethod
    def init(cls, t, d, num_layers=1, deep=False, seed=0, dtype=np.float64, std=0.5):
        rng = np.random.default_rng(seed)
        count = num_layers if deep else 1
        prompts = [
            Tensor(rng.normal(0.0, std, size=t * d).astype(dtype), requires_grad=True,
                   name=f"prompt/layer{i}")
            for i in range(count)
        ]
        return cls(t, d, prompts, deep)

    @classmethod
    def from_values(cls, values, deep=False, dtype=np.float64):
        values = [np.asarray(v, dtype=dtype) for v in values]
        t, d = values[0].shape
        prompts = [Tensor(v.reshape(-1).copy(), requires_grad=True, name=f"prompt/layer{i}")
                   for i, v in enumerate(values)]
        return cls(t, d, prompts, deep)

    @property
    def dtype(self):
        return self.prompts[0].dtype

    @property
    def num_prompts(self):
        return len(self.prompts)

    def named_parameters(self):
        return {p.name: p for p in self.prompts}

    def param_count(self):
        return sum(p.size for p in self.prompts)

    def generate(self, rep, layer_index=0, tape=None):
        if tape is None:
            tape = rep.tape
        if not 0 <= layer_index < len(self.prompts):
            raise BiasIndexError(f"layer_index={layer_index} out of range [0, {len(self.prompts)})")
        lead = rep.shape[:-1]
        zeros = Tensor(np.zeros(lead + (self.t * self.d,), dtype=self.dtype))
        out = F.add(zeros, self.prompts[layer_index], tape=tape)
        return F.reshape(out, lead + (self.t, self.d), tape=tape)
