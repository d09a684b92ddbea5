import math
import struct
import zlib

import numpy as np
import pytest
import torch
from torch.func import functional_call

from cleanctg.numeric import ops
from cleanctg.numeric.layers import (
    Attention, CrossAttentionLayer, Encoder, EncoderLayer, FeedForward, LayerNorm, Linear, MultiKernelConv,
)
from cleanctg.numeric.state import (
    AdamMoments, CheckpointError, ModelState, adam_step, decode_checkpoint, encode_checkpoint,
    load_checkpoint, load_into, save_checkpoint,
)

F64 = torch.float64
H = 1e-5
TOL = 1e-4
INSTANCES = 100


def rel_err(a: torch.Tensor, n: torch.Tensor) -> float:
    scale = max(a.abs().max().item(), n.abs().max().item(), 1e-12)
    return (a - n).abs().max().item() / scale


def fd_gradient_error(fn, inputs, gen) -> float:
    """Max relative error between autograd and element-wise central differences.

    The scalar objective is <w, fn(inputs)> for a random w.
    """
    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    w = torch.randn(out.shape, generator=gen, dtype=F64)
    (out * w).sum().backward()
    worst = 0.0
    with torch.no_grad():
        for i, x in enumerate(xs):
            num = torch.zeros_like(x)
            flat = x.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + H
                up = (fn(*xs) * w).sum().item()
                flat[j] = orig - H
                down = (fn(*xs) * w).sum().item()
                flat[j] = orig
                num.view(-1)[j] = (up - down) / (2 * H)
            worst = max(worst, rel_err(x.grad, num))
    return worst


def directional_error(module: torch.nn.Module, inputs, gen) -> float:
    """Directional central difference over all parameters and inputs at once."""
    params = {k: v.detach().clone() for k, v in module.named_parameters()}
    names = list(params)
    leaves = [params[k].requires_grad_(True) for k in names] + [x.detach().clone().requires_grad_(True)
                                                              for x in inputs]

    def objective(vals):
        p = dict(zip(names, vals[:len(names)]))
        out = functional_call(module, p, tuple(vals[len(names):]))
        out = out[0] if isinstance(out, tuple) else out
        return (out * w).sum()

    probe = functional_call(module, params, tuple(inputs))
    probe = probe[0] if isinstance(probe, tuple) else probe
    w = torch.randn(probe.shape, generator=gen, dtype=F64)
    grads = torch.autograd.grad(objective(leaves), leaves, allow_unused=True)
    dirs = [torch.randn(v.shape, generator=gen, dtype=F64) for v in leaves]
    analytic = sum((g * d).sum().item() for g, d in zip(grads, dirs) if g is not None)
    with torch.no_grad():
        up = objective([v + H * d for v, d in zip(leaves, dirs)]).item()
        down = objective([v - H * d for v, d in zip(leaves, dirs)]).item()
    numeric = (up - down) / (2 * H)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def rand(gen, *shape, lo=-1.0, hi=1.0):
    return torch.rand(*shape, generator=gen, dtype=F64) * (hi - lo) + lo


def away_from_zero(gen, *shape):
    sign = torch.where(torch.rand(*shape, generator=gen) < 0.5, -1.0, 1.0).to(F64)
    return sign * rand(gen, *shape, lo=0.05, hi=2.0)


def _softmax_on(axis):
    return lambda x: ops.softmax(x, axis=axis)


OP_CASES = {
    "matmul": lambda g: (ops.matmul, [rand(g, 3, 4), rand(g, 4, 2)]),
    "add": lambda g: (ops.add, [rand(g, 3, 4), rand(g, 4)]),
    "mul": lambda g: (ops.mul, [rand(g, 2, 3), rand(g, 2, 1)]),
    "conv1d": lambda g: (ops.conv1d, [rand(g, 1, 2, 7), rand(g, 3, 2, 3), rand(g, 3)]),
    "layer_norm": lambda g: (ops.layer_norm, [rand(g, 3, 5, lo=-2, hi=2), rand(g, 5), rand(g, 5)]),
    "softmax": lambda g: (_softmax_on(int(torch.randint(0, 2, (1,), generator=g))), [rand(g, 3, 4, lo=-3, hi=3)]),
    "sigmoid": lambda g: (ops.sigmoid, [rand(g, 6, lo=-4, hi=4)]),
    "relu": lambda g: (ops.relu, [away_from_zero(g, 6)]),
    "gelu": lambda g: (ops.gelu, [rand(g, 6, lo=-3, hi=3)]),
    "mean": lambda g: (lambda x: ops.mean(x, axis=1), [rand(g, 3, 4)]),
    "concat": lambda g: (lambda a, b: ops.concat([a, b], axis=0), [rand(g, 2, 3), rand(g, 1, 3)]),
    "slice": lambda g: (lambda x: ops.slice_(x, 1, 1, 4), [rand(g, 2, 5)]),
    "multi_head_attention": lambda g: (lambda q, k, v: ops.multi_head_attention(q, k, v, 2),
                                       [rand(g, 3, 4), rand(g, 5, 4), rand(g, 5, 4)]),
    "bce_loss": lambda g: (lambda p: ops.bce_loss(p, (torch.arange(6) % 2).to(F64)),
                           [rand(g, 6, lo=0.05, hi=0.95)]),
    "mse_loss": lambda g: (ops.mse_loss, [rand(g, 6), rand(g, 6)]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name):
    gen = torch.Generator().manual_seed(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(INSTANCES):
        fn, inputs = OP_CASES[name](gen)
        worst = max(worst, fd_gradient_error(fn, inputs, gen))
    assert worst < TOL, f"{name}: max relative error {worst:.3e}"


def _pool_head():
    from cleanctg.detector import ArtefactDetector, DetectorConfig
    det = ArtefactDetector(DetectorConfig(channels=4, d_model=8, heads=2, ffn_dim=8, encoder_layers=1,
                                          head_hidden=4, dropout=0.0)).to(F64).eval()

    class Head(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.det = det

        def forward(self, fused):
            return self.det.classify_logits(self.det.class_pool(fused))
    return Head()


BLOCK_CASES = {
    "linear": (lambda: Linear(4, 3), [(2, 4)]),
    "layer_norm": (lambda: LayerNorm(5), [(3, 5)]),
    "multi_kernel_conv": (lambda: MultiKernelConv(2, (3, 5), 3), [(1, 2, 9)]),
    "feed_forward": (lambda: FeedForward(4, 6), [(3, 4)]),
    "attention": (lambda: Attention(4, 2), [(3, 4), (5, 4)]),
    "encoder_layer": (lambda: EncoderLayer(4, 2, 6), [(1, 5, 4)]),
    "cross_attention_layer": (lambda: CrossAttentionLayer(4, 2, 6), [(1, 5, 4), (1, 3, 4)]),
    "encoder": (lambda: Encoder(4, 2, 6, 2), [(1, 4, 4)]),
    "classifier_head": (_pool_head, [(2, 6, 8)]),
}


@pytest.mark.parametrize("name", sorted(BLOCK_CASES))
def test_block_gradients_match_finite_differences(name):
    factory, shapes = BLOCK_CASES[name]
    gen = torch.Generator().manual_seed(zlib.crc32(name.encode()))
    torch.manual_seed(0)
    worst = 0.0
    for _ in range(INSTANCES):
        module = factory().to(F64).eval()
        with torch.no_grad():
            for p in module.parameters():
                p.copy_(rand(gen, *p.shape))
        inputs = [rand(gen, *s) for s in shapes]
        worst = max(worst, directional_error(module, inputs, gen))
    assert worst < TOL, f"{name}: max relative error {worst:.3e}"


def test_sigmoid_value_and_slope():
    x = ops.tensor([0.0], requires_grad=True)
    y = ops.sigmoid(x)
    y.backward()
    assert y.item() == 0.5 and x.grad.item() == 0.25


def test_layer_norm_of_constant_returns_shift():
    beta = ops.tensor([0.1, -0.2, 0.3, 0.0])
    out = ops.layer_norm(torch.full((4,), 7.0, dtype=F64), ops.tensor([2.0] * 4), beta)
    torch.testing.assert_close(out, beta, rtol=0, atol=1e-12)


def test_softmax_rows_sum_to_one():
    x = torch.randn(50, 17, dtype=F64) * 30
    torch.testing.assert_close(ops.softmax(x).sum(-1), torch.ones(50, dtype=F64), rtol=0, atol=1e-6)
    _, w = ops.multi_head_attention(torch.randn(2, 5, 8), torch.randn(2, 7, 8), torch.randn(2, 7, 8), 4,
                                    return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones(()), atol=1e-6)


def test_attention_scales_by_sqrt_dk():
    q = torch.randn(3, 4, dtype=F64)
    k = torch.randn(5, 4, dtype=F64)
    v = torch.randn(5, 4, dtype=F64)
    expected = torch.softmax(q @ k.T / math.sqrt(4), -1) @ v
    torch.testing.assert_close(ops.multi_head_attention(q, k, v, 1), expected)


def test_shape_and_config_errors():
    with pytest.raises(ops.ShapeError):
        ops.matmul(torch.ones(2, 3), torch.ones(2, 3))
    with pytest.raises(ops.ShapeError):
        ops.add(torch.ones(2, 3), torch.ones(4))
    with pytest.raises(ops.ShapeError):
        ops.conv1d(torch.ones(1, 2, 5), torch.ones(1, 2, 4))
    with pytest.raises(ops.ConfigError):
        ops.multi_head_attention(torch.ones(2, 6), torch.ones(2, 6), torch.ones(2, 6), 4)
    with pytest.raises(ops.ConfigError):
        Attention(6, 4)
    with pytest.raises(ops.ShapeError):
        ops.bce_loss(torch.ones(3) * 0.5, torch.ones(2))


def test_bce_is_clamped():
    loss = ops.bce_loss(ops.tensor([0.0, 1.0]), ops.tensor([1.0, 0.0]))
    assert math.isfinite(loss.item())
    assert loss.item() == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_forward_is_deterministic():
    torch.manual_seed(3)
    enc = Encoder(8, 2, 16, 2).to(F64).eval()
    x = torch.randn(2, 6, 8, dtype=F64)
    assert torch.equal(enc(x), enc(x))


# ---------------------------------------------------------------------------
# optimizer


def _scalar_state(value=1.0):
    return ModelState({"w": torch.tensor([value], dtype=F64), "frozen.b": torch.tensor([2.0], dtype=F64)})


def test_adam_zero_gradient_is_identity():
    st = _scalar_state()
    adam_step(st, {"w": torch.zeros(1, dtype=F64)}, AdamMoments(), lr=0.1)
    assert st.params["w"].item() == 1.0


def test_adam_frozen_group_untouched():
    st = _scalar_state().freeze("frozen")
    before = st.params["frozen.b"].clone()
    adam_step(st, {"w": torch.ones(1, dtype=F64), "frozen.b": torch.ones(1, dtype=F64)}, AdamMoments(), lr=0.1)
    assert torch.equal(st.params["frozen.b"], before)
    assert st.params["w"].item() != 1.0


def test_adam_first_step_closed_form():
    # bias-corrected m_hat = v_hat = 1, so the step is lr / (1 + eps)
    st = _scalar_state()
    adam_step(st, {"w": torch.ones(1, dtype=F64)}, AdamMoments(), lr=0.1)
    assert st.params["w"].item() == pytest.approx(0.900000001, abs=1e-15)


def test_adam_rejects_bad_lr_and_unknown_grads():
    with pytest.raises(ops.ConfigError):
        adam_step(_scalar_state(), {}, AdamMoments(), lr=0.0)
    with pytest.raises(ops.ConfigError):
        adam_step(_scalar_state(), {"nope": torch.ones(1)}, AdamMoments(), lr=0.1)


def test_adam_minimizes_quadratic():
    st = ModelState({"w": torch.tensor([3.0, -2.0], dtype=F64)})
    mom = AdamMoments()
    for _ in range(2000):
        adam_step(st, {"w": 2 * st.params["w"]}, mom, lr=0.05)
    assert st.params["w"].abs().max().item() < 1e-3


# ---------------------------------------------------------------------------
# checkpoint format


def test_checkpoint_roundtrip_all_dtypes():
    arrays = {
        "a.f32": np.arange(6, dtype=np.float32).reshape(2, 3),
        "b.f64": np.array([np.pi]),
        "c.i64": np.array([[-1, 2]], dtype=np.int64),
        "d.u8": np.array([0, 1, 255], dtype=np.uint8),
        "e.scalar": np.array(1.5),
    }
    back = decode_checkpoint(encode_checkpoint(arrays))
    assert set(back) == set(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype
        np.testing.assert_array_equal(back[k], v)


def test_checkpoint_header_layout():
    blob = encode_checkpoint({"w": np.array([1.0], dtype=np.float32)})
    assert blob[:4] == b"CCTG"
    assert struct.unpack_from("<II", blob, 4) == (1, 1)
    assert struct.unpack_from("<I", blob, 12) == (1,)
    assert blob[16:17] == b"w"
    assert struct.unpack_from("<BBI", blob, 17) == (0, 1, 1)
    assert struct.unpack_from("<f", blob, 23) == (1.0,)
    assert len(blob) == 27


def test_checkpoint_rejects_corruption():
    blob = encode_checkpoint({"w": np.ones(3)})
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(CheckpointError):
        decode_checkpoint(blob + b"\0")


def test_save_load_into_module(tmp_path):
    torch.manual_seed(0)
    src = Encoder(8, 2, 16, 1)
    path = tmp_path / "m.cctg"
    save_checkpoint(path, ModelState.from_module(src, frozen=["layers"]), {"d": 8})
    state, meta = load_checkpoint(path)
    assert meta["architecture"] == {"d": 8} and meta["frozen"] == ["layers"]
    assert meta["sha256"] == state.digest() == ModelState.from_module(src).digest()
    dst = Encoder(8, 2, 16, 1)
    load_into(dst, state)
    x = torch.randn(1, 3, 8)
    assert torch.equal(src.eval()(x), dst.eval()(x))
    with pytest.raises(CheckpointError):
        load_into(Encoder(8, 2, 16, 2), state)
