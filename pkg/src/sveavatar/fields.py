"""The three learnable networks: SVE generator, per-point deformation, and the
SVE-conditioned SDF/color field, bundled as one ``torch.nn.Module``."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


@dataclass
class NetConfig:
    n_expr: int = 64
    n_sve: int = 8
    pe_levels: int = 6
    gen_width: int = 128
    gen_layers: int = 8
    shortcut_width: int = 64
    deform_width: int = 64
    sdf_width: int = 128
    sdf_layers: int = 4
    feature_width: int = 128
    color_width: int = 128
    color_layers: int = 2
    init_radius: float = 1.0
    inv_std_init: float = 20.0
    softplus_beta: float = 100.0
    hidden_activation: str = "softplus"  # activation of the generator and deformer
    use_sve: bool = True
    compress_sve: bool = True
    color_uses_gradient: bool = True

    def __post_init__(self):
        if self.n_expr < 1 or self.pe_levels < 0:
            raise ConfigError("n_expr must be >= 1 and pe_levels >= 0")
        if self.hidden_activation not in ("softplus", "relu"):
            raise ConfigError(f"unknown activation {self.hidden_activation!r}")
        if self.use_sve and self.compress_sve and self.n_sve >= self.n_expr:
            raise ConfigError("compression violated: n_sve must be smaller than n_expr")

    @property
    def cond_dim(self) -> int:
        if self.use_sve and self.compress_sve:
            return self.n_sve
        return self.n_expr

    @property
    def pe_dim(self) -> int:
        return 3 + 6 * self.pe_levels

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def positional_encode(p, levels: int):
    """``[p, sin(2^0 pi p), cos(2^0 pi p), ..., sin(2^(L-1) pi p), cos(2^(L-1) pi p)]``."""
    p = torch.as_tensor(p)
    if levels == 0:
        return p
    feats = [p]
    for i in range(levels):
        w = (2.0**i) * math.pi
        feats.append(torch.sin(w * p))
        feats.append(torch.cos(w * p))
    return torch.cat(feats, dim=-1)


def axis_angle_to_matrix(rotvec):
    """Rodrigues map for ``(..., 3)`` rotation vectors, smooth through zero."""
    theta2 = (rotvec * rotvec).sum(-1, keepdim=True)
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / safe2)
    x, y, z = rotvec.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(*rotvec.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=rotvec.dtype, device=rotvec.device).expand_as(k)
    return eye + a[..., None] * k + b[..., None] * (k @ k)


def _activation(cfg: NetConfig):
    if cfg.hidden_activation == "relu":
        return nn.ReLU()
    return nn.Softplus(beta=cfg.softplus_beta)


def _kaiming(lin: nn.Linear):
    nn.init.normal_(lin.weight, 0.0, math.sqrt(2.0 / lin.in_features))
    nn.init.zeros_(lin.bias)


class SVEGenerator(nn.Module):
    """Integrating MLP over (encoded position, expression) plus a shortcut on
    the expression alone; the two branches are summed."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        out = cfg.cond_dim
        dims = [cfg.pe_dim + cfg.n_expr] + [cfg.gen_width] * (cfg.gen_layers - 1) + [out]
        self.integrating = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        if cfg.compress_sve:
            self.shortcut = nn.ModuleList([nn.Linear(cfg.n_expr, cfg.shortcut_width),
                                           nn.Linear(cfg.shortcut_width, out)])
        else:
            self.shortcut = nn.ModuleList()  # identity mapping, K' = K
        for lin in list(self.integrating) + list(self.shortcut):
            _kaiming(lin)
        self.act = _activation(cfg)

    def shortcut_code(self, eps):
        h = eps
        for i, lin in enumerate(self.shortcut):
            h = lin(h)
            if i < len(self.shortcut) - 1:
                h = self.act(h)
        return h

    def integrate(self, eps, p_o):
        h = torch.cat([positional_encode(p_o, self.cfg.pe_levels), eps.expand(p_o.shape[0], -1)], -1)
        for i, lin in enumerate(self.integrating):
            h = lin(h)
            if i < len(self.integrating) - 1:
                h = self.act(h)
        return h

    def forward(self, eps, p_o):
        return self.integrate(eps, p_o) + self.shortcut_code(eps)


class Deformer(nn.Module):
    """Two-layer MLP predicting a per-point rotation vector and translation."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.hidden = nn.Linear(cfg.pe_dim + cfg.cond_dim, cfg.deform_width)
        self.out = nn.Linear(cfg.deform_width, 6)
        _kaiming(self.hidden)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.act = _activation(cfg)

    def forward(self, p_o, cond):
        h = torch.cat([positional_encode(p_o, self.cfg.pe_levels), cond], -1)
        motion = self.out(self.act(self.hidden(h)))
        rot = axis_angle_to_matrix(motion[:, :3])
        p_c = (rot @ p_o[:, :, None])[:, :, 0] + motion[:, 3:]
        return motion, p_c


class SDFColorField(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        dims = [cfg.pe_dim + cfg.cond_dim] + [cfg.sdf_width] * cfg.sdf_layers + [1 + cfg.feature_width]
        self.sdf_layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.sphere_init(cfg.init_radius)
        cin = cfg.feature_width + 3 + cfg.cond_dim + (3 if cfg.color_uses_gradient else 0)
        cdims = [cin] + [cfg.color_width] * cfg.color_layers + [3]
        self.color_layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(cdims[:-1], cdims[1:]))
        self.act = nn.Softplus(beta=cfg.softplus_beta)

    @torch.no_grad()
    def sphere_init(self, radius):
        # geometric initialisation: the untrained field approximates |p| - radius
        n = len(self.sdf_layers)
        for i, lin in enumerate(self.sdf_layers):
            if i == n - 1:
                nn.init.normal_(lin.weight, math.sqrt(math.pi) / math.sqrt(lin.in_features), 1e-4)
                nn.init.constant_(lin.bias, -radius)
            else:
                nn.init.normal_(lin.weight, 0.0, math.sqrt(2.0) / math.sqrt(lin.out_features))
                nn.init.zeros_(lin.bias)
                if i == 0:
                    lin.weight[:, 3:] = 0.0
        self._calibrate_sphere(radius)

    @torch.no_grad()
    def _calibrate_sphere(self, radius, n_points=4096, ridge=1e-3):
        # At desk-scale widths the random-feature sphere above is rough (sign
        # errors on ~10% of points).  Refit the sdf output row by ridge least
        # squares to |p| - radius on a fixed point set; hidden layers untouched.
        g = torch.Generator().manual_seed(0)
        d = torch.randn(n_points, 3, generator=g, dtype=torch.float64)
        p = d / d.norm(dim=-1, keepdim=True) * torch.empty(n_points, 1, dtype=torch.float64).uniform_(
            0.3 * radius, 1.7 * radius, generator=g)
        first = self.sdf_layers[0]
        h = torch.cat([positional_encode(p, self.cfg.pe_levels),
                       torch.zeros(n_points, first.in_features - self.cfg.pe_dim, dtype=torch.float64)], -1)
        for lin in self.sdf_layers[:-1]:
            h = F.softplus(F.linear(h, lin.weight.double(), lin.bias.double()), beta=self.cfg.softplus_beta)
        a = torch.cat([h, torch.ones(n_points, 1, dtype=torch.float64)], -1)
        target = p.norm(dim=-1) - radius
        sol = torch.linalg.solve(a.T @ a + ridge * torch.eye(a.shape[1], dtype=torch.float64), a.T @ target)
        last = self.sdf_layers[-1]
        last.weight[0] = sol[:-1].to(last.weight.dtype)
        last.bias[0] = sol[-1].to(last.bias.dtype)

    def sdf_feature(self, p_c, cond):
        h = torch.cat([positional_encode(p_c, self.cfg.pe_levels), cond], -1)
        for i, lin in enumerate(self.sdf_layers):
            h = lin(h)
            if i < len(self.sdf_layers) - 1:
                h = self.act(h)
        return h[:, 0], h[:, 1:]

    def color(self, feature, dirs, gradient, cond):
        parts = [feature, dirs] + ([gradient] if self.cfg.color_uses_gradient else []) + [cond]
        h = torch.cat(parts, -1)
        for i, lin in enumerate(self.color_layers):
            h = lin(h)
            if i < len(self.color_layers) - 1:
                h = F.relu(h)
        return torch.sigmoid(h)


class SVEField(nn.Module):
    """Composed observation-space field ``p_o -> (sdf, color)`` under expression ``eps``."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        self.generator = SVEGenerator(cfg) if cfg.use_sve else None
        self.deformer = Deformer(cfg)
        self.field = SDFColorField(cfg)
        self.log_inv_std = nn.Parameter(torch.tensor(math.log(cfg.inv_std_init)))

    @property
    def inv_std(self):
        return torch.exp(self.log_inv_std)

    def parameter_groups(self) -> dict:
        return {
            "theta_G": list(self.generator.parameters()) if self.generator is not None else [],
            "theta_D": list(self.deformer.parameters()),
            "theta_F": list(self.field.parameters()),
            "inv_std": [self.log_inv_std],
        }

    def _eps(self, eps, like):
        eps = torch.as_tensor(eps, dtype=like.dtype, device=like.device).reshape(1, -1)
        if eps.shape[1] != self.cfg.n_expr:
            raise ConfigError(f"expression length {eps.shape[1]} != configured {self.cfg.n_expr}")
        return eps

    def condition(self, p_o, eps):
        eps = self._eps(eps, p_o)
        if self.generator is None:
            return eps.expand(p_o.shape[0], -1)
        return self.generator(eps, p_o)

    def sdf(self, p_o, eps):
        cond = self.condition(p_o, eps)
        _, p_c = self.deformer(p_o, cond)
        return self.field.sdf_feature(p_c, cond)[0]

    def query(self, p_o, dirs, eps, create_graph=False) -> dict:
        """Evaluate sdf, observation-space sdf gradient and color at ``p_o``."""
        with torch.enable_grad():
            if not p_o.requires_grad:
                p_o = p_o.detach().requires_grad_(True)
            cond = self.condition(p_o, eps)
            motion, p_c = self.deformer(p_o, cond)
            sdf, feat = self.field.sdf_feature(p_c, cond)
            grad, = torch.autograd.grad(sdf, p_o, torch.ones_like(sdf), create_graph=create_graph)
        color = self.field.color(feat, dirs, grad, cond)
        return {"sdf": sdf, "gradient": grad, "color": color, "cond": cond, "p_c": p_c,
                "motion": motion}


# ---------------------------------------------------------------------------
# operation-level helpers

@dataclass
class Motion6D:
    rotation_params: torch.Tensor
    translation: torch.Tensor


@dataclass
class FieldOutput:
    sdf: torch.Tensor
    color: torch.Tensor
    geo_feature: torch.Tensor


def init_params(seed: int, cfg: NetConfig, dtype=torch.float32) -> SVEField:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SVEField(cfg)
    return model.to(dtype)


def generate_sve(model: SVEField, eps, p_o):
    return model.condition(torch.as_tensor(p_o).reshape(-1, 3), eps)


def deform(model: SVEField, p_o, cond):
    motion, p_c = model.deformer(torch.as_tensor(p_o).reshape(-1, 3), cond)
    return Motion6D(motion[:, :3], motion[:, 3:]), p_c


def field_gradient(model: SVEField, p_c, cond, create_graph=False):
    """Exact gradient of the canonical sdf with respect to ``p_c``."""
    with torch.enable_grad():
        p_c = torch.as_tensor(p_c).detach().reshape(-1, 3).requires_grad_(True)
        sdf, _ = model.field.sdf_feature(p_c, cond)
        grad, = torch.autograd.grad(sdf, p_c, torch.ones_like(sdf), create_graph=create_graph)
    return grad


def field_query(model: SVEField, p_c, dirs, cond) -> FieldOutput:
    dirs = torch.as_tensor(dirs).reshape(-1, 3)
    if torch.any((dirs.norm(dim=-1) - 1).abs() > 1e-6):
        raise ValueError("view directions must be unit vectors")
    p_c = torch.as_tensor(p_c).reshape(-1, 3)
    grad = field_gradient(model, p_c, cond)
    sdf, feat = model.field.sdf_feature(p_c, cond)
    return FieldOutput(sdf, model.field.color(feat, dirs, grad, cond), feat)
