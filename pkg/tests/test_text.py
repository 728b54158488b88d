import os
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from occ4d import tensor as T
from occ4d import text as X
from occ4d.errors import EmptyPrompt, MalformedFeatureFile, WidthMismatch


def arrays(params):
    return {k: np.array(v) for k, v in params.items()}


def make_refiner(d_text=6, d=8, n_ref=2, seed=0):
    return X.init_refiner(np.random.default_rng(seed), d_text, d, n_ref)


# ---------------------------------------------------------------- stub encoder

def test_stub_encode_is_deterministic():
    a = X.stub_encode("a car turns left", 16)
    b = X.stub_encode("a car turns left", 16)
    assert a.values.tobytes() == b.values.tobytes()
    assert a.values.shape == (4, 16)


def test_word_order_matters():
    assert not np.array_equal(X.stub_encode("a b", 8).values, X.stub_encode("b a", 8).values)


def test_seed_changes_vectors():
    assert not np.array_equal(X.stub_encode("car", 8, seed=0).values, X.stub_encode("car", 8, seed=1).values)


def test_golden_fixture(fixtures_dir):
    golden = X.load_features(os.path.join(fixtures_dir, "vehicle_stops_d8_s0.txtf"))
    np.testing.assert_array_equal(X.stub_encode("vehicle stops", 8, 0).values, golden.values)


@pytest.mark.parametrize("prompt", ["", "   ", "\n"])
def test_empty_prompt(prompt):
    with pytest.raises(EmptyPrompt):
        X.stub_encode(prompt)


def test_tokenizer_splits_punctuation():
    assert X.tokenize("Car, then stop.") == ["car", ",", "then", "stop", "."]


# ---------------------------------------------------------------- refiner

def test_zero_blocks_reduce_to_projection(rng):
    p = make_refiner()
    for k in p:
        if ".blocks." in k:
            p[k] = np.zeros_like(p[k])
    feats = rng.standard_normal((5, 6)).astype(np.float32)
    out = X.refine(p, feats).data[0]
    np.testing.assert_allclose(out, feats @ p["ref.w_in.w"], rtol=1e-6, atol=1e-6)


def _np_refiner_one_token(p, x):
    """Single-token refiner written directly: attention over one key is its value."""
    c = x @ p["ref.w_in.w"]
    for i in range(2):
        b = f"ref.blocks.{i}"

        def ln(v, name):
            mu = v.mean(-1, keepdims=True)
            var = ((v - mu) ** 2).mean(-1, keepdims=True)
            return (v - mu) / np.sqrt(var + 1e-6) * p[f"{name}.g"] + p[f"{name}.b"]

        h = ln(c, f"{b}.ln1")
        v = h @ p[f"{b}.attn.v.w"] + p[f"{b}.attn.v.b"]
        c = c + v @ p[f"{b}.attn.o.w"] + p[f"{b}.attn.o.b"]
        h = ln(c, f"{b}.ln2")
        u = h @ p[f"{b}.mlp.fc1.w"] + p[f"{b}.mlp.fc1.b"]
        g = 0.5 * u * (1 + np.tanh(np.sqrt(2 / np.pi) * (u + 0.044715 * u ** 3)))
        c = c + g @ p[f"{b}.mlp.fc2.w"] + p[f"{b}.mlp.fc2.b"]
    return c


def test_single_token_closed_form(rng):
    p = make_refiner()
    for k in p:
        if k.endswith((".g", ".b")) and ".ln" in k:
            p[k] = rng.standard_normal(p[k].shape).astype(np.float32)
    x = rng.standard_normal((1, 6)).astype(np.float64)
    want = _np_refiner_one_token({k: v.astype(np.float64) for k, v in p.items()}, x)
    np.testing.assert_allclose(X.refine(p, x).data[0], want, rtol=1e-4, atol=1e-5)


def test_full_size_refiner_depth():
    from occ4d.backbone import ModelConfig, init_params
    assert ModelConfig.paper().n_ref == 2
    assert X.refiner_depth(init_params(ModelConfig.desk(), 0)) == 1


@given(st.integers(0, 2**32 - 1))
def test_refiner_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    p = make_refiner(seed=seed % 7)
    x = rng.standard_normal((5, 6)).astype(np.float32)
    perm = rng.permutation(5)
    a = X.refine(p, x).data[0]
    b = X.refine(p, x[perm]).data[0]
    np.testing.assert_allclose(a[perm], b, atol=1e-5)
    assert np.all(np.isfinite(a))


def test_padding_does_not_change_valid_rows(rng):
    p = make_refiner()
    short = X.TextFeatures(rng.standard_normal((2, 6)))
    long = X.TextFeatures(rng.standard_normal((4, 6)))
    vals, mask, _ = X.pad_features([short, long])
    batched = X.refine(p, vals, mask).data
    alone = X.refine(p, short.values).data[0]
    np.testing.assert_allclose(batched[0, :2], alone, atol=1e-5)


def test_width_mismatch():
    with pytest.raises(WidthMismatch):
        X.refine(make_refiner(), np.zeros((3, 5), np.float32))
    with pytest.raises(WidthMismatch):
        X.pad_features([X.TextFeatures(np.zeros((1, 3))), X.TextFeatures(np.zeros((1, 4)))])


# ---------------------------------------------------------------- null condition

def test_null_condition_shape_and_stability():
    p = make_refiner()
    a, b = X.null_condition(p), X.null_condition(p)
    assert a.shape == (1, 8)
    np.testing.assert_array_equal(a, b)


def test_null_rows_ignore_the_prompt(rng):
    p = make_refiner()
    f1 = X.TextFeatures(rng.standard_normal((3, 6)))
    f2 = X.TextFeatures(rng.standard_normal((5, 6)))
    out = []
    for f in (f1, f2):
        vals, mask, nulls = X.pad_features([f], [True])
        out.append(X.refine(p, vals, mask, nulls).data[0, 0])
    np.testing.assert_allclose(out[0], out[1], atol=1e-6)


def test_null_vector_gradient_only_with_drop_flag(rng):
    from occ4d import backbone as B
    cfg = B.ModelConfig.desk(depth=1)
    from occ4d.diagnostics import randomize_params
    params = randomize_params(B.init_params(cfg, 0), 0)
    x = rng.standard_normal((1, cfg.latent_channels, 2, 8, 8)).astype(np.float32)
    feats = [X.stub_encode("a car", cfg.d_text)]
    null0 = params["ref.null"].data.copy()
    grads = {}
    for flag in (False, True):
        cond = B.Condition.from_features(feats, null_flags=np.array([flag]))

        def loss(v):
            params["ref.null"] = v
            return T.sum_(T.square(B.model_forward(params, cfg, x, 0.5, cond)))

        assert T.grad_check(loss, null0) < 1e-3
        v = T.Tensor(null0.copy(), requires_grad=True)
        loss(v).backward()
        grads[flag] = np.zeros_like(null0) if v.grad is None else v.grad
    assert not np.any(grads[False])
    assert np.any(grads[True])


# ---------------------------------------------------------------- TXTF

def test_txtf_round_trip(tmp_path, rng):
    f = X.TextFeatures(rng.standard_normal((3, 4)))
    X.save_features(tmp_path / "f.txtf", f)
    np.testing.assert_array_equal(X.load_features(tmp_path / "f.txtf").values, f.values)


def test_txtf_hand_built_file(tmp_path):
    vals = np.arange(12, dtype="<f4")
    data = b"TXTF" + struct.pack("<II", 3, 4) + vals.tobytes()
    (tmp_path / "h.txtf").write_bytes(data)
    got = X.load_features(tmp_path / "h.txtf").values
    np.testing.assert_array_equal(got, [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]])
    assert X.encode_features(got) == data


@pytest.mark.parametrize("data", [b"TXT", b"TXTF" + struct.pack("<II", 3, 4) + b"\0" * 44,
                                  b"FTXT" + struct.pack("<II", 1, 1) + b"\0" * 4,
                                  b"TXTF" + struct.pack("<II", 0, 4)])
def test_txtf_malformed(data):
    with pytest.raises(MalformedFeatureFile):
        X.decode_features(data)
