import numpy as np
import pytest
from scipy import ndimage

from specrecon import tensor as T
from specrecon.errors import ConfigError, FormatError, ShapeError
from specrecon.gradsuite import end_to_end_check
from specrecon.model import (
    ArchConfig, ModelParams, hrnet_forward, init_params, load_checkpoint, model_report,
    param_shapes, predict, res_dense_block, res_global_block, save_checkpoint, tiny_arch,
    xavier_uniform, zero_params,
)
from specrecon.tensor import Tensor


def rand_block_params(prefix, shapes, seed, zero=False):
    rng = np.random.default_rng(seed)
    return {f"{prefix}.{k}": Tensor(np.zeros(s) if zero else 0.3 * rng.standard_normal(s))
            for k, s in shapes.items()}


def resdb_shapes(w, g):
    shapes = {}
    for j in range(4):
        shapes[f"conv{j + 1}.weight"] = (g, w + j * g, 3, 3)
        shapes[f"conv{j + 1}.bias"] = (g,)
    shapes["conv5.weight"] = (w, w + 4 * g, 3, 3)
    shapes["conv5.bias"] = (w,)
    return shapes


def resgb_shapes(w, s):
    return {"conv1.weight": (w, w, 3, 3), "conv1.bias": (w,), "conv2.weight": (w, w, 3, 3),
            "conv2.bias": (w,), "fc1.weight": (s, w), "fc1.bias": (s,), "fc2.weight": (w, s),
            "fc2.bias": (w,)}


# --- init ---------------------------------------------------------------------

def test_init_deterministic_and_zero_bias():
    arch = tiny_arch()
    a, b = init_params(arch, seed=3), init_params(arch, seed=3)
    for k in a:
        assert a[k].data.tobytes() == b[k].data.tobytes()
        if k.endswith(".bias"):
            assert not a[k].data.any()
    c = init_params(arch, seed=4)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a if k.endswith("weight"))


def test_xavier_variance():
    w = xavier_uniform((64, 64, 3, 3), np.random.default_rng(0))
    target = 2.0 / (64 * 9 + 64 * 9)
    assert abs(w.var() / target - 1) < 0.2
    bound = np.sqrt(6.0 / (64 * 9 * 2))
    assert np.abs(w).max() <= bound


def test_param_names_and_levels():
    shapes = param_shapes(ArchConfig())
    assert "level2.resdb0.conv3.weight" in shapes
    assert shapes["level0.head.weight"] == (64, 3, 3, 3)
    assert shapes["level3.head.weight"] == (512, 192, 3, 3)
    assert shapes["level3.tone.weight"] == (512, 512, 1, 1)
    # level 0 fuses its own 64 channels with 128 / 4 shuffled channels from level 1
    assert shapes["level0.fuse.weight"] == (64, 96, 3, 3)
    assert shapes["out.weight"] == (31, 64, 3, 3)
    assert sum(k.startswith("level0.resdb") and k.endswith("conv1.weight") for k in shapes) == 2
    assert "level3.fuse.weight" not in shapes


@pytest.mark.parametrize("bad", [
    dict(width_scale=0.3), dict(levels=3), dict(base_width=2, width_scale=0.5),
    dict(blocks_per_level=((1, 1), (2, 2), (1, 1), (1, 1))), dict(block_order="x"),
    dict(attention_reduction=0), dict(base_width=3),
])
def test_arch_validation(bad):
    with pytest.raises(ConfigError):
        init_params(ArchConfig(**bad))


# --- blocks --------------------------------------------------------------------

def test_resdb_zero_params_is_identity():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 8, 6, 6)))
    params = rand_block_params("b", resdb_shapes(8, 4), 0, zero=True)
    out = res_dense_block(x, params, "b")
    assert np.array_equal(out.data, x.data)


def test_resdb_shape_and_param_count():
    w, g = 8, 4
    params = rand_block_params("b", resdb_shapes(w, g), 1)
    x = Tensor(np.random.default_rng(1).standard_normal((1, w, 5, 7)))
    assert res_dense_block(x, params, "b").shape == x.shape
    # closed form: sum_i 3*3*in_i*out_i + out_i over the five dense layers
    ins = [w, w + g, w + 2 * g, w + 3 * g, w + 4 * g]
    outs = [g, g, g, g, w]
    expected = sum(9 * i * o + o for i, o in zip(ins, outs))
    assert sum(v.data.size for v in params.values()) == expected
    n_convs = sum(k.endswith(".weight") for k in param_shapes(tiny_arch()) if ".resdb0." in k
                  and k.startswith("level1"))
    assert n_convs == 5
    with pytest.raises(ShapeError):
        res_dense_block(Tensor(np.zeros((1, w + 1, 4, 4))), params, "b")


def test_resgb_zero_params_is_identity():
    x = Tensor(np.random.default_rng(2).standard_normal((1, 8, 5, 5)))
    params = rand_block_params("g", resgb_shapes(8, 2), 0, zero=True)
    out = res_global_block(x, params, "g")
    assert np.array_equal(out.data, x.data)


def test_resgb_attention_limits_and_monotonicity():
    w = 8
    x = Tensor(np.random.default_rng(3).standard_normal((1, w, 6, 6)))
    params = rand_block_params("g", resgb_shapes(w, 2), 3)
    params["g.fc1.weight"] = Tensor(np.zeros((2, w)))
    params["g.fc2.weight"] = Tensor(np.zeros((w, 2)))

    def run(bias):
        params["g.fc2.bias"] = Tensor(np.full(w, bias))
        return res_global_block(x, params, "g").data

    # trunk alone: zero attention weights, bias +20 gives sigmoid ~ 1
    trunk = T.leaky_relu(T.conv2d(T.leaky_relu(T.conv2d(x, params["g.conv1.weight"], params["g.conv1.bias"])),
                                  params["g.conv2.weight"], params["g.conv2.bias"])).data
    np.testing.assert_allclose(run(20.0), x.data + trunk, atol=1e-7)
    np.testing.assert_allclose(run(-20.0), x.data, atol=1e-7)
    deltas = [np.abs(run(b) - x.data) for b in np.linspace(-20, 20, 9)]
    for lo, hi in zip(deltas, deltas[1:]):
        assert np.all(hi >= lo)
    assert res_global_block(x, params, "g").shape == x.shape


# --- forward ---------------------------------------------------------------------

@pytest.mark.parametrize("scale", [1.0, 0.5, 0.25, 0.125])
def test_forward_shape_for_width_scales(scale):
    arch = ArchConfig(width_scale=scale, base_width=16 if scale >= 0.25 else 32)
    out = hrnet_forward(Tensor(np.random.default_rng(0).random((1, 3, 16, 24), dtype=np.float32)),
                        init_params(arch, 0))
    assert out.shape == (1, 31, 16, 24)


def test_forward_deterministic_and_errors():
    arch = tiny_arch()
    x = np.random.default_rng(1).random((1, 3, 64, 64)).astype(np.float32)
    a = hrnet_forward(Tensor(x), init_params(arch, 5)).data
    b = hrnet_forward(Tensor(x), init_params(arch, 5)).data
    assert a.shape == (1, 31, 64, 64) and a.tobytes() == b.tobytes()
    with pytest.raises(ShapeError):
        hrnet_forward(Tensor(np.zeros((1, 3, 30, 30))), init_params(arch, 5))
    with pytest.raises(ShapeError):
        hrnet_forward(Tensor(np.zeros((1, 4, 32, 32))), init_params(arch, 5))
    p = init_params(arch, 5)
    wrong = ModelParams(p.tensors, tiny_arch(base_width=16), p.seed)
    with pytest.raises(ConfigError):
        hrnet_forward(Tensor(np.zeros((1, 3, 32, 32))), wrong)


def test_zero_network_outputs_final_bias():
    arch = tiny_arch()
    params = zero_params(arch)
    bias = np.linspace(-1, 1, 31)
    params.tensors["out.bias"] = Tensor(bias)
    out = hrnet_forward(Tensor(np.random.default_rng(2).random((2, 3, 16, 16))), params).data
    np.testing.assert_array_equal(out, np.broadcast_to(bias[None, :, None, None], out.shape))


def test_block_order_swap_changes_output():
    x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)).astype(np.float32))
    a = init_params(tiny_arch(), 1)
    b = ModelParams(a.tensors, tiny_arch(block_order="gb_db"), a.seed)
    assert not np.allclose(hrnet_forward(x, a).data, hrnet_forward(x, b).data)


def test_predict_clamps_and_accepts_single_image():
    params = init_params(tiny_arch(), 0)
    rgb = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
    out = predict(rgb, params)
    assert out.shape == (31, 16, 16) and out.min() >= 0 and out.max() <= 1


# --- locality of the level interaction (impulse response) ----------------------------

def dependency_mask(arch, impulse, size):
    """Propagate "may depend on the impulse" through the architecture's conv/reshape graph."""
    H, W = size

    def dilate(m, k):
        return ndimage.maximum_filter(m, size=k, mode="mirror") if k > 1 else m

    def pool(m, f):
        return m.reshape(m.shape[0] // f, f, m.shape[1] // f, f).any(axis=(1, 3))

    src = np.zeros((H, W), dtype=bool)
    src[impulse] = True
    below = None
    for lvl in reversed(range(arch.levels)):
        m = dilate(pool(src, 2 ** lvl), 3)
        if below is not None:
            m = dilate(m | np.kron(below, np.ones((2, 2), dtype=bool)), 3)
        for kind, _ in [(k, i) for k, i in _seq(arch, lvl)]:
            m = dilate(m, 11) if kind == "resdb" else dilate(m, 5)
        if lvl == arch.levels - 1:
            m = dilate(m, 1)
        below = m
    return dilate(below, 3)


def _seq(arch, lvl):
    from specrecon.model import _block_sequence
    return _block_sequence(arch, lvl)


def test_impulse_response_stays_inside_receptive_field():
    # attention pools globally, so locality is checked on a conv-only stack
    arch = tiny_arch(blocks_per_level=((1, 0),) * 4)
    params = init_params(arch, 0, dtype=np.float64)
    size = (320, 320)
    rng = np.random.default_rng(0)
    x = rng.random((1, 3) + size)
    y = x.copy()
    y[0, :, 150, 161] += 0.5
    base = predict(x, params, clamp=False)
    moved = predict(y, params, clamp=False)
    changed = np.abs(moved - base).max(axis=(0, 1)) > 0
    allowed = dependency_mask(arch, (150, 161), size)
    assert changed.any()
    assert not np.any(changed & ~allowed)
    assert allowed.mean() < 0.5


def test_attention_makes_response_global():
    arch = tiny_arch()
    params = init_params(arch, 0, dtype=np.float64)
    for k, t in params.items():
        if k.endswith("bias"):
            params.tensors[k] = Tensor(np.full(t.shape, 0.05))
    x = np.random.default_rng(0).random((1, 3, 256, 256))
    y = x.copy()
    y[0, :, 120, 131] += 0.5
    diff = np.abs(predict(y, params, clamp=False) - predict(x, params, clamp=False))
    assert diff[0, :, 0, 0].max() > 0


# --- gradients -----------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_end_to_end_grad_check_tiny_arch(seed):
    report = end_to_end_check(seed)
    assert report.passed and report.skipped == 0, report.max_rel_err


# --- accounting ----------------------------------------------------------------------

def test_report_matches_exhaustive_count_and_checkpoint_size(tmp_path):
    arch = tiny_arch()
    rep = model_report(arch)
    params = init_params(arch, 0)
    assert rep.params == sum(t.data.size for _, t in params.items())
    save_checkpoint(tmp_path / "m.hrck", params)
    assert rep.weights_bytes == (tmp_path / "m.hrck").stat().st_size
    assert rep.weights_bytes > 4 * rep.params


def test_report_macs_hand_count_single_conv_level():
    arch = tiny_arch()
    shapes = param_shapes(arch)
    rep = model_report(arch, size=(16, 16))
    macs = 0
    for name, s in shapes.items():
        if name.endswith("weight"):
            if len(s) == 2:
                macs += s[0] * s[1]
            else:
                lvl = int(name[5]) if name.startswith("level") else 0
                side = 16 // 2 ** lvl
                macs += s[0] * s[1] * s[2] * s[3] * side * side
    assert rep.macs == macs


def test_report_monotone_in_base_width():
    reps = [model_report(ArchConfig(base_width=b)) for b in (16, 32, 64)]
    for small, big in zip(reps, reps[1:]):
        assert small.params < big.params and small.macs < big.macs
        assert 3.2 <= big.params / small.params <= 4.3


def test_reference_width_ratio_is_in_band():
    # published sizes: 31.705 M parameters at full width, 8.185 M at half width
    reference = 31.705 / 8.185
    ours = model_report(ArchConfig()).params / model_report(ArchConfig(width_scale=0.5)).params
    assert 3.2 <= reference <= 4.3
    assert 3.2 <= ours <= 4.3


# --- checkpoints ---------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = init_params(tiny_arch(block_order="gb_db"), 11)
    save_checkpoint(tmp_path / "a.hrck", params)
    back = load_checkpoint(tmp_path / "a.hrck")
    assert back.arch == params.arch and back.seed == 11
    assert list(back.tensors) == list(params.tensors)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].data.tobytes() == params[k].data.tobytes()
    save_checkpoint(tmp_path / "b.hrck", back)
    assert (tmp_path / "a.hrck").read_bytes() == (tmp_path / "b.hrck").read_bytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    params = init_params(tiny_arch(), 0)
    path = tmp_path / "a.hrck"
    save_checkpoint(path, params)
    raw = path.read_bytes()
    (tmp_path / "bad.hrck").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(tmp_path / "bad.hrck")
    (tmp_path / "short.hrck").write_bytes(raw[:-10])
    with pytest.raises(FormatError, match="10 more bytes"):
        load_checkpoint(tmp_path / "short.hrck")
