import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sveavatar import fields as fl

from conftest import tiny_net


def test_pe_zero_point():
    out = fl.positional_encode(torch.zeros(3), 2)
    assert out.shape == (15,)
    assert torch.all(out[:3] == 0)
    for i in range(2):
        sin = out[3 + 6 * i:6 + 6 * i]
        cos = out[6 + 6 * i:9 + 6 * i]
        assert torch.all(sin == 0) and torch.all(cos == 1)


def test_pe_identity_at_zero_levels():
    p = torch.tensor([0.3, -0.1, 0.7])
    assert torch.equal(fl.positional_encode(p, 0), p)


def test_pe_substitution():
    out = fl.positional_encode(torch.tensor([0.5, 0.0, 0.0], dtype=torch.float64), 1)
    assert out[3].item() == pytest.approx(1.0)
    assert out[6].item() == pytest.approx(0.0, abs=1e-15)


@given(st.integers(0, 6))
def test_pe_length(levels):
    assert fl.positional_encode(torch.zeros(5, 3), levels).shape == (5, 3 + 6 * levels)


def test_compression_enforced():
    with pytest.raises(fl.ConfigError, match="compression violated"):
        fl.NetConfig(n_expr=4, n_sve=4)
    fl.NetConfig(n_expr=4, n_sve=4, compress_sve=False)


def test_zero_generator_gives_zero_code():
    m = fl.init_params(0, tiny_net())
    with torch.no_grad():
        for p in m.generator.parameters():
            p.zero_()
    code = fl.generate_sve(m, torch.ones(4), torch.randn(7, 3))
    assert code.shape == (7, 2) and torch.all(code == 0)


def test_generator_hand_rolled(f64):
    cfg = fl.NetConfig(n_expr=2, n_sve=1, pe_levels=0, gen_width=3, shortcut_width=3, deform_width=4,
                       sdf_width=8, sdf_layers=2, feature_width=4, color_width=4,
                       hidden_activation="relu")
    m = fl.init_params(0, cfg, torch.float64)
    with torch.no_grad():
        for p in m.generator.parameters():
            p.fill_(0.0 if p.dim() == 1 else 0.1)
    p_o = np.array([0.2, -0.4, 0.9])
    eps = np.array([0.5, -1.5])
    relu = lambda x: np.maximum(x, 0)
    h = np.concatenate([p_o, eps])
    for i in range(8):
        h = np.full(3 if i < 7 else 1, 0.1 * h.sum())
        if i < 7:
            h = relu(h)
    s = relu(np.full(3, 0.1 * eps.sum()))
    s = np.full(1, 0.1 * s.sum())
    got = fl.generate_sve(m, torch.tensor(eps), torch.tensor(p_o)).detach().numpy()
    assert np.allclose(got, h + s, atol=1e-12)


def test_spatial_variation():
    m = fl.init_params(1, tiny_net())
    eps = torch.randn(4)
    p = torch.rand(100, 3) * 2 - 1
    code = fl.generate_sve(m, eps, p)
    assert code.var(0).sum() > 0
    sc1 = m.generator.shortcut_code(eps.reshape(1, -1))
    assert torch.equal(sc1, m.generator.shortcut_code(eps.reshape(1, -1)))


def test_global_mode_is_constant():
    m = fl.init_params(1, tiny_net(use_sve=False))
    code = fl.generate_sve(m, torch.randn(4), torch.rand(100, 3))
    assert code.shape == (100, 4)
    assert torch.all(code.var(0) == 0)


def test_shortcut_residual_property():
    m = fl.init_params(2, tiny_net())
    with torch.no_grad():
        for p in m.generator.integrating.parameters():
            p.zero_()
    code = fl.generate_sve(m, torch.randn(4), torch.randn(50, 3))
    assert torch.all(code == code[0])


def test_uncompressed_shortcut_is_identity():
    m = fl.init_params(0, tiny_net(n_sve=4, compress_sve=False))
    eps = torch.randn(1, 4)
    assert torch.equal(m.generator.shortcut_code(eps), eps)


def test_deformer_identity_at_init():
    m = fl.init_params(3, tiny_net())
    p = torch.randn(1000, 3)
    cond = fl.generate_sve(m, torch.randn(4), p)
    motion, p_c = fl.deform(m, p, cond)
    assert torch.all(motion.rotation_params == 0) and torch.all(motion.translation == 0)
    assert torch.allclose(p_c, p, atol=1e-6)


def test_deformer_forced_motion(f64):
    m = fl.init_params(0, tiny_net(), torch.float64)
    with torch.no_grad():
        m.deformer.out.bias.copy_(torch.tensor([0, 0, math.pi / 2, 1.0, 0, 0]))
    cond = torch.zeros(1, 2)
    _, p_c = fl.deform(m, torch.tensor([[1.0, 0, 0]]), cond)
    assert torch.allclose(p_c, torch.tensor([[1.0, 1.0, 0.0]]), atol=1e-12)


def test_deformer_random_bounded():
    m = fl.init_params(4, tiny_net())
    with torch.no_grad():
        torch.manual_seed(0)
        m.deformer.out.weight.normal_(0, 1e-3)
    p = torch.rand(1000, 3) * 2 - 1
    cond = fl.generate_sve(m, torch.randn(4), p).detach()
    motion, p_c = fl.deform(m, p, cond)
    h = m.deformer.act(m.deformer.hidden(torch.cat([fl.positional_encode(p, 2), cond], -1)))
    out_norm = torch.linalg.matrix_norm(m.deformer.out.weight, ord=2) * h.norm(dim=-1)
    # rotation moves p by at most |theta| |p|; translation adds at most |t|
    bound = out_norm * p.norm(dim=-1) + out_norm
    assert torch.all((p_c - p).norm(dim=-1) <= bound + 1e-6)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=3, max_size=3))
def test_axis_angle_orthonormal(v):
    r = fl.axis_angle_to_matrix(torch.tensor(v, dtype=torch.float64))
    assert torch.allclose(r.T @ r, torch.eye(3, dtype=torch.float64), atol=1e-10)
    assert torch.det(r).item() == pytest.approx(1.0, abs=1e-10)


def test_axis_angle_zero():
    assert torch.equal(fl.axis_angle_to_matrix(torch.zeros(3, dtype=torch.float64)),
                       torch.eye(3, dtype=torch.float64))


def test_color_midpoint_when_output_zeroed():
    m = fl.init_params(0, tiny_net())
    with torch.no_grad():
        m.field.color_layers[-1].weight.zero_()
        m.field.color_layers[-1].bias.zero_()
    out = fl.field_query(m, torch.randn(5, 3), torch.tensor([[0, 0, 1.0]] * 5), torch.randn(5, 2))
    assert torch.allclose(out.color, torch.full((5, 3), 0.5))


def test_output_arity():
    cfg = tiny_net()
    out = fl.field_query(fl.init_params(0, cfg), torch.randn(6, 3), torch.tensor([[1.0, 0, 0]] * 6),
                         torch.randn(6, 2))
    assert out.sdf.shape == (6,) and out.color.shape == (6, 3)
    assert out.geo_feature.shape == (6, cfg.feature_width)


def test_non_unit_direction_rejected():
    m = fl.init_params(0, tiny_net())
    with pytest.raises(ValueError):
        fl.field_query(m, torch.randn(2, 3), torch.tensor([[0, 0, 2.0]] * 2), torch.randn(2, 2))


@pytest.fixture(scope="module")
def default_field():
    return fl.init_params(0, fl.NetConfig(n_expr=8, n_sve=4))


def test_sphere_init_shape(default_field):
    p = torch.randn(1000, 3)
    p = p / p.norm(dim=-1, keepdim=True) * torch.empty(1000, 1).uniform_(0.5, 1.5)
    sdf, _ = default_field.field.sdf_feature(p, torch.randn(1000, 4))
    rel = (sdf - (p.norm(dim=-1) - 1.0)).abs() / p.norm(dim=-1)
    assert rel.max() < 0.05


def test_sphere_init_sign_agreement(default_field):
    p = torch.rand(1000, 3) * 3 - 1.5
    sdf = default_field.sdf(p, torch.randn(8))
    agree = (sdf.sign() == (p.norm(dim=-1) - 1.0).sign()).float().mean()
    assert agree >= 0.99


def test_gradient_on_sphere(default_field):
    g = fl.field_gradient(default_field, torch.tensor([[1.0, 0, 0]]), torch.zeros(1, 4))
    cos = torch.nn.functional.cosine_similarity(g, torch.tensor([[1.0, 0, 0]]))
    assert cos.item() > 0.99


def test_gradient_matches_finite_difference(f64):
    m = fl.init_params(0, tiny_net(hidden_activation="softplus"), torch.float64)
    p = torch.rand(100, 3) * 2 - 1
    cond = torch.randn(100, 2)
    g = fl.field_gradient(m, p, cond)
    h = 1e-4
    fd = torch.stack([(m.field.sdf_feature(p + h * e, cond)[0] - m.field.sdf_feature(p - h * e, cond)[0])
                      / (2 * h) for e in torch.eye(3)], -1)
    rel = (g - fd).norm(dim=-1) / fd.norm(dim=-1).clamp(min=1e-8)
    assert rel.max() < 1e-4


def test_constant_head_zero_gradient():
    m = fl.init_params(0, tiny_net())
    with torch.no_grad():
        m.field.sdf_layers[-1].weight.zero_()
    g = fl.field_gradient(m, torch.randn(4, 3), torch.randn(4, 2))
    assert torch.all(g == 0)


def test_inv_std_init_and_groups():
    m = fl.init_params(0, tiny_net())
    assert float(m.inv_std.detach()) == pytest.approx(20.0)
    groups = m.parameter_groups()
    assert set(groups) == {"theta_G", "theta_D", "theta_F", "inv_std"}
    n = sum(p.numel() for g in groups.values() for p in g)
    assert n == sum(p.numel() for p in m.parameters())
    assert len(m.generator.integrating) == 8 and len(m.generator.shortcut) == 2
    assert len(list(m.deformer.children())) == 3  # hidden, out, activation


def test_init_deterministic():
    a, b = fl.init_params(5, tiny_net()), fl.init_params(5, tiny_net())
    for x, y in zip(a.parameters(), b.parameters()):
        assert torch.equal(x, y)


def test_wrong_expression_length():
    m = fl.init_params(0, tiny_net())
    with pytest.raises(fl.ConfigError):
        m.sdf(torch.randn(3, 3), torch.randn(5))
