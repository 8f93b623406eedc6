import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pln.autodiff import Tensor, grad_check, ops
from pln.branch import (
    PLN, Batch, ScoreMap, conv_stack, forward_progressive, fuse, inject_previous, predict_scores,
    upsampling_connection,
)
from pln.config import ConfigError, ModelConfig, make_stages
from pln.encoders import ClipSet, QueryTokens, UnitFeatureSequence
from pln.errors import ShapeError
from pln.temporal_map import build_moment_map, valid_mask


def micro_config(**kw):
    base = dict(d_raw=3, d=4, vocab_size=6, embed_dim=3, query_hidden=4, stages=make_stages([4, 8]),
                conv_kernel=3, init_seed=1)
    base.update(kw)
    return ModelConfig(**base)


def random_batch(rng, B=2, l_v=8, d_raw=3, vocab=6):
    return Batch(rng.standard_normal((B, l_v, d_raw)), [list(rng.integers(0, vocab, 3)) for _ in range(B)],
                 np.full(B, float(l_v)))


def lin(W, b=None):
    W = np.asarray(W, float)
    return {"W": Tensor(W), "b": Tensor(np.zeros(W.shape[1]) if b is None else b)}


def conv_params(rng, c, k, scale=0.3):
    return {"W": Tensor(rng.standard_normal((c, c, k, k)) * scale), "b": Tensor(rng.standard_normal(c) * 0.1)}


# fuse ------------------------------------------------------------------


def fixture_map(rng, N=4, d=2):
    clips = ClipSet(1, Tensor(rng.standard_normal((1, N, d))))
    return build_moment_map(clips)


def test_fuse_zero_query_gives_zero():
    tmap = fixture_map(np.random.default_rng(0))
    F = fuse(tmap, Tensor(np.ones((1, 3))), lin(np.eye(2)), lin(np.zeros((3, 2))))
    assert F.shape == (1, 2, 4, 4)
    assert np.all(F.data == 0)


def test_fuse_matches_scalar_oracle_and_masks():
    rng = np.random.default_rng(0)
    tmap = fixture_map(rng)
    tmap.sample_mask = tmap.sample_mask.copy()
    tmap.sample_mask[0, 3] = False
    q = rng.standard_normal((1, 2))
    F = fuse(tmap, Tensor(q), lin(np.eye(2)), lin(np.eye(2))).data[0]
    feats = tmap.features.data[0]
    for i in range(4):
        for j in range(4):
            for k in range(2):
                want = feats[i, j, k] * q[0, k] if tmap.sample_mask[i, j] else 0.0
                assert F[k, i, j] == want
    assert np.all(F[:, np.tril_indices(4, -1)[0], np.tril_indices(4, -1)[1]] == 0)


def test_fuse_width_mismatch():
    tmap = fixture_map(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        fuse(tmap, Tensor(np.ones((1, 3))), lin(np.eye(3)), lin(np.zeros((3, 2))))


# upsampling connection / injection / conv stack ---------------------------


@pytest.mark.parametrize("N,n", [(32, 2), (16, 1), (4, 3)])
def test_upsampling_connection_shape(N, n):
    rng = np.random.default_rng(0)
    d = 2
    blocks = [{"conv1.W": Tensor(rng.standard_normal((d, d, 3, 3))), "conv1.b": Tensor(np.zeros(d)),
               "conv2.W": Tensor(rng.standard_normal((d, d, 3, 3))), "conv2.b": Tensor(np.zeros(d))}
              for _ in range(n)]
    out = upsampling_connection(Tensor(rng.standard_normal((1, d, N, N))), blocks)
    assert out.shape == (1, d, N * 2 ** n, N * 2 ** n)


def test_upsampling_connection_zero_network():
    d = 3
    z = {"conv1.W": Tensor(np.zeros((d, d, 3, 3))), "conv1.b": Tensor(np.zeros(d)),
         "conv2.W": Tensor(np.zeros((d, d, 3, 3))), "conv2.b": Tensor(np.zeros(d))}
    out = upsampling_connection(Tensor(np.ones((d, 4, 4))), [z, z])
    assert out.shape == (d, 16, 16) and np.all(out.data == 0)


def test_inject_previous():
    rng = np.random.default_rng(0)
    F = rng.standard_normal((1, 2, 4, 4))
    np.testing.assert_array_equal(inject_previous(Tensor(F), None).data, F)
    np.testing.assert_array_equal(inject_previous(Tensor(F), Tensor(np.full_like(F, -1e30))).data, F)
    up = rng.standard_normal(F.shape)
    got = inject_previous(Tensor(np.zeros_like(F)), Tensor(up)).data
    np.testing.assert_array_equal(got, np.where(up > 0, up, 0.0))
    got = inject_previous(Tensor(F), Tensor(up)).data
    for idx in np.ndindex(F.shape):
        assert got[idx] == max(F[idx], up[idx])
    with pytest.raises(ConfigError):
        inject_previous(Tensor(F), Tensor(np.zeros((1, 2, 8, 8))))


def test_conv_stack_shape_zero_and_sharing():
    rng = np.random.default_rng(0)
    shared = {"conv1.W": Tensor(rng.standard_normal((2, 2, 5, 5))), "conv1.b": Tensor(np.zeros(2)),
              "conv2.W": Tensor(rng.standard_normal((2, 2, 5, 5))), "conv2.b": Tensor(np.zeros(2))}
    G = Tensor(rng.standard_normal((1, 2, 6, 6)))
    H1, H2 = conv_stack(G, shared), conv_stack(G, shared)
    assert H1.shape == G.shape
    np.testing.assert_array_equal(H1.data, H2.data)
    zero = {k: Tensor(np.zeros_like(v.data)) for k, v in shared.items()}
    assert np.all(conv_stack(G, zero).data == 0)


def test_predict_scores_heads():
    rng = np.random.default_rng(0)
    H = Tensor(rng.standard_normal((1, 2, 4, 4)))
    zero = {"W": Tensor(np.zeros((1, 2, 1, 1))), "b": Tensor(np.zeros(1))}
    P = predict_scores(H, zero, "convnet")
    assert P.shape == (1, 4, 4) and np.all(P.data == 0.5)
    P = predict_scores(H, {"W": Tensor(rng.standard_normal((1, 2, 1, 1)) * 3), "b": Tensor(np.zeros(1))}, "convnet")
    assert np.all((P.data > 0) & (P.data < 1))
    Hd = np.zeros((1, 2, 4, 4))
    Hd[0, 0] = 1.0
    P = predict_scores(Tensor(Hd), lin(np.array([[0.0, 1.0]])), "dot", f_s=Tensor(np.ones((1, 1))))
    assert np.all(P.data == 0.5)
    with pytest.raises(ConfigError):
        predict_scores(H, zero, "attention")


def test_score_map_ranking_sentinel():
    N = 4
    keep = valid_mask(N).copy()
    keep[0, 3] = False
    sm = ScoreMap(N, np.full((N, N), 0.3), valid_mask(N), keep, 1)
    r = sm.ranking_scores()
    assert r[0, 3] == -np.inf and r[0, 0] == 0.3


# progressive model -------------------------------------------------------


def test_two_stage_shapes_and_call_trace():
    cfg = ModelConfig(d_raw=4, d=8, vocab_size=6, embed_dim=4, query_hidden=6, stages=make_stages([8, 32]))
    model = PLN(cfg)
    rng = np.random.default_rng(0)
    states = model.forward(random_batch(rng, B=1, l_v=40, d_raw=4))
    assert [s.P.shape for s in states] == [(1, 8, 8), (1, 32, 32)]
    for s in states:
        assert s.F.shape == s.G.shape == s.H.shape == (1, 8, s.N, s.N)
        assert np.all((s.P.data > 0) & (s.P.data < 1))
    assert "cfm" not in states[0].calls and "uc" not in states[0].calls
    assert "cfm" in states[1].calls and "uc" in states[1].calls
    np.testing.assert_array_equal(states[0].G.data, states[0].F.data)


def test_forward_progressive_single_sample():
    cfg = micro_config()
    model = PLN(cfg)
    rng = np.random.default_rng(3)
    video = UnitFeatureSequence(rng.standard_normal((8, 3)), 8.0)
    states = forward_progressive(video, QueryTokens([1, 2, 3], 6), model)
    assert [s.N for s in states] == [4, 8]


def test_shape_theorem_32_to_128():
    cfg = ModelConfig(d_raw=2, d=2, vocab_size=4, embed_dim=2, query_hidden=2, stages=make_stages([32, 128]),
                      conv_kernel=1)
    assert cfg.stages[1].uc_blocks == 2
    model = PLN(cfg)
    H1 = Tensor(np.random.default_rng(0).standard_normal((1, 2, 32, 32)))
    up = upsampling_connection(H1, [model.group(f"stage2.uc.{b}") for b in range(2)])
    assert up.shape == (1, 2, 128, 128)
    G = inject_previous(Tensor(np.zeros((1, 2, 128, 128))), up)
    assert G.shape == (1, 2, 128, 128)


def test_stage_configs_reject_bad_ratios():
    with pytest.raises(ConfigError):
        make_stages([8, 24])
    with pytest.raises(ConfigError):
        make_stages([32, 8])


def test_single_stage_has_no_cfm_or_uc():
    model = PLN(micro_config(stages=make_stages([8])))
    assert not any(".cfm" in k or ".uc." in k for k in model.params)
    (state,) = model.forward(random_batch(np.random.default_rng(0)))
    assert state.calls == ("clips", "fuse", "predict")


def test_ablated_model_equals_independent_single_stage_models():
    rng = np.random.default_rng(0)
    cfg = micro_config(use_cfm=False, use_uc=False)
    multi = PLN(cfg)
    batch = random_batch(rng)
    states = multi.forward(batch)
    for t, N in enumerate(cfg.clip_counts, start=1):
        single = PLN(cfg.replace(stages=make_stages([N])))
        arrays = {k: v.data for k, v in multi.params.items() if not k.startswith("stage")}
        arrays.update({k.replace(f"stage{t}.", "stage1."): v.data for k, v in multi.params.items()
                       if k.startswith(f"stage{t}.")})
        single.load_arrays(arrays)
        (s,) = single.forward(batch)
        np.testing.assert_array_equal(s.P.data, states[t - 1].P.data)


def test_convnet_weights_shared_across_stages():
    model = PLN(micro_config(stages=make_stages([4, 8, 16])))
    assert sum(k.startswith("convnet.") for k in model.params) == 4
    assert not any(k.startswith("stage") and "convnet" in k for k in model.params)


@pytest.mark.parametrize("head", ["convnet", "dot"])
def test_micro_model_gradcheck(head):
    cfg = micro_config(head=head)
    model = PLN(cfg)
    rng = np.random.default_rng(0)
    batch = random_batch(rng, B=1)
    weights = [rng.standard_normal((N, N)) for N in cfg.clip_counts]

    def loss(*params):
        states = model.forward(batch)
        terms = [ops.sum(ops.mask(s.P, w[None])) for s, w in zip(states, weights)]
        return ops.add_n(terms)

    params = model.parameters()
    err = grad_check(loss, params, max_elements=400, seed=0)
    assert err <= 1e-3


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_scores_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    model = PLN(micro_config(init_seed=seed % 1000))
    for s in model.forward(random_batch(rng)):
        assert np.all((s.P.data > 0) & (s.P.data < 1))
