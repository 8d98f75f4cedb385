import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuitseek import tensor as T
from circuitseek.patching import (
    AlignmentError,
    AlternateCache,
    BinaryMask,
    Mask,
    binary_forward,
    cache_alternate,
    load_mask,
    masked_forward,
    round_mask,
    save_mask,
)
from circuitseek.tensor import ContractError, Tensor
from circuitseek.transformer import ComponentId, ModelConfig, enumerate_components, forward, forward_traced, init_params

from .oracles import reference_forward

CFG = ModelConfig(n_layers=3, n_heads=4, d_model=32, d_mlp=64, vocab_size=18, max_seq_len=16, seed=0)


def pair(seed, n=12, batch=None):
    """Original and alternate sequences sharing the final token."""
    rng = np.random.default_rng(seed)
    shape = (n,) if batch is None else (batch, n)
    o = rng.integers(0, 18, size=shape)
    a = rng.integers(0, 18, size=shape)
    a[..., -1] = o[..., -1]
    return o, a


@pytest.fixture(scope="module")
def params():
    # larger init so that patches move logits visibly
    p = init_params(CFG, 11)
    for _, t in p.named():
        if t.ndim > 1:
            t.data *= 10
    return p


class TestCache:
    def test_self_cache_equals_trace(self, params):
        o, _ = pair(0, batch=3)
        cache = cache_alternate(params, o, (-1, 4))
        tr = forward_traced(params, o, (4, 11))
        for c in enumerate_components(CFG):
            assert cache.get(c).tobytes() == tr.contributions[c].tobytes()

    def test_zero_outputs(self):
        p = init_params(CFG, zero_outputs=True)
        o, a = pair(1)
        cache = cache_alternate(p, a, orig_tokens=o)
        assert all(not v.any() for v in cache.as_dict().values())

    def test_length_mismatch(self, params):
        with pytest.raises(AlignmentError):
            cache_alternate(params, [1, 2, 3], orig_tokens=[1, 2, 3, 3])

    def test_token_mismatch_at_patched_position(self, params):
        with pytest.raises(AlignmentError):
            cache_alternate(params, [1, 2, 4], orig_tokens=[1, 2, 3])

    def test_position_out_of_range(self, params):
        with pytest.raises(AlignmentError):
            cache_alternate(params, [1, 2, 3], positions=(5,))


class TestMaskedForward:
    def test_all_ones_is_plain_forward(self, params):
        o, a = pair(2, batch=4)
        cache = cache_alternate(params, a, orig_tokens=o)
        with T.no_grad():
            out = masked_forward(params, o, cache, Mask.full(CFG, 1.0)).data
        np.testing.assert_allclose(out, forward(params, o)[:, -1], atol=1e-6)

    def test_all_zeros_is_alternate_run(self, params):
        o, a = pair(3, batch=4)
        cache = cache_alternate(params, a, orig_tokens=o)
        with T.no_grad():
            out = masked_forward(params, o, cache, Mask.full(CFG, 0.0)).data
        np.testing.assert_allclose(out, forward(params, a)[:, -1], atol=1e-4)
        np.testing.assert_allclose(out, cache.alt_logits, atol=1e-4)

    @pytest.mark.parametrize("k", [0, 3, 4, 9, 11])
    def test_single_patch_matches_manual_oracle(self, params, k):
        o, a = pair(4)
        c = enumerate_components(CFG)[k]
        cache = cache_alternate(params, a, orig_tokens=o)
        mask = Mask.from_dict(CFG, {c: 0.0})
        with T.no_grad():
            out = masked_forward(params, o, cache, mask).data[0]
        # the oracle reads v_alt from its own clean run of the alternate
        key = (c.layer, c.kind, c.head)
        v_alt = _reference_write(params, a, key)
        expected = reference_forward(params, o, replace={key: v_alt})
        np.testing.assert_allclose(out, expected, atol=1e-4)
        assert not np.allclose(out, forward(params, o)[-1], atol=1e-3)

    def test_absorption_all_zero(self, params):
        o, _ = pair(5, batch=3)
        cache = cache_alternate(params, o)
        with T.no_grad():
            out = masked_forward(params, o, cache, Mask.full(CFG, 0.0)).data
        np.testing.assert_allclose(out, forward(params, o)[:, -1], atol=1e-4)

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=CFG.n_components, max_size=CFG.n_components))
    def test_absorption_any_mask(self, params, weights):
        o, _ = pair(6, batch=2)
        cache = cache_alternate(params, o)
        mask = Mask(CFG, Tensor(np.array(weights, np.float32)))
        with T.no_grad():
            out = masked_forward(params, o, cache, mask).data
        np.testing.assert_allclose(out, forward(params, o)[:, -1], atol=1e-4)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000))
    def test_identity_property(self, params, seed):
        o, a = pair(seed, batch=2)
        cache = cache_alternate(params, a, orig_tokens=o)
        with T.no_grad():
            out = masked_forward(params, o, cache, Mask.full(CFG)).data
        np.testing.assert_allclose(out, forward(params, o)[:, -1], atol=1e-6)

    def test_multi_position_patching(self, params):
        o, a = pair(7)
        a[5] = o[5]
        cache = cache_alternate(params, a, positions=(5, -1), orig_tokens=o)
        with T.no_grad():
            out = masked_forward(params, o, cache, Mask.full(CFG, 1.0, positions=(5, -1))).data
        np.testing.assert_allclose(out[0], forward(params, o)[-1], atol=1e-6)

    def test_missing_cache_entry(self, params):
        o, a = pair(8)
        cache = cache_alternate(params, a, orig_tokens=o)
        c = ComponentId(1, "head", 2)
        cache.components = cache.components - {c}
        with pytest.raises(ContractError):
            masked_forward(params, o, cache, Mask.from_dict(CFG, {c: 0.5}))
        masked_forward(params, o, cache, Mask.from_dict(CFG, {ComponentId(0, "mlp"): 0.5}))

    def test_weights_out_of_range(self, params):
        o, a = pair(8)
        cache = cache_alternate(params, a, orig_tokens=o)
        with pytest.raises(ContractError):
            masked_forward(params, o, cache, Mask.full(CFG, 1.5))

    def test_gradient_matches_finite_differences(self, params):
        p64 = params.astype(np.float64)
        o, a = pair(9, batch=3)
        cache = cache_alternate(p64, a, orig_tokens=o)
        rng = np.random.default_rng(0)
        w0 = rng.uniform(0.2, 0.8, CFG.n_components)
        targets, competing = rng.integers(0, 18, 3), rng.integers(0, 18, 3)

        def loss(w):
            logits = masked_forward(p64, o, cache, Mask(CFG, w))
            rows = np.arange(3)
            return (logits[rows, competing] - logits[rows, targets]).mean()

        wt = Tensor(w0, requires_grad=True, dtype=np.float64)
        T.backward(loss(wt))
        step = 1e-3
        for i in rng.choice(CFG.n_components, 10, replace=False):
            hi, lo = w0.copy(), w0.copy()
            hi[i] += step
            lo[i] -= step
            num = (loss(Tensor(hi, dtype=np.float64)).item() - loss(Tensor(lo, dtype=np.float64)).item()) / (2 * step)
            rel = abs(wt.grad[i] - num) / max(abs(wt.grad[i]), abs(num), 1e-8)
            assert rel < 1e-3, (i, wt.grad[i], num)

    @pytest.mark.parametrize("k", [2, 7])
    def test_continuity_in_weight(self, params, k):
        o, a = pair(10)
        cache = cache_alternate(params, a, orig_tokens=o)
        c = enumerate_components(CFG)[k]
        outs = []
        with T.no_grad():
            for w in np.linspace(0, 1, 101):
                outs.append(masked_forward(params, o, cache, Mask.from_dict(CFG, {c: w})).data[0])
        jumps = np.abs(np.diff(np.array(outs), axis=0)).max()
        span = np.abs(outs[0] - outs[-1]).max()
        assert jumps < 0.1 * span + 1e-6


def _reference_write(params, tokens, key):
    """Clean write of one component at the final position, by re-running the oracle."""
    # write = logits-free: difference between residuals is awkward, so recompute the layer directly
    a = {n: t.data.astype(np.float64) for n, t in params.named()}
    cfg = params.config
    H, dh = cfg.n_heads, cfg.d_head
    toks = list(tokens)
    n = len(toks)
    resid = a["tok_emb"][toks] + a["pos_emb"][:n]

    def rms(x, g):
        return x / np.sqrt((x * x).mean(-1, keepdims=True) + 1e-5) * g

    for layer in range(cfg.n_layers):
        p = lambda k: a[f"layers.{layer}.{k}"]  # noqa: E731
        h = rms(resid, p("ln1"))
        q, k_, v = h @ p("w_q"), h @ p("w_k"), h @ p("w_v")
        total = np.zeros_like(resid)
        for hh in range(H):
            sl = slice(hh * dh, (hh + 1) * dh)
            s = q[:, sl] @ k_[:, sl].T / np.sqrt(dh) + np.triu(np.full((n, n), -np.inf), 1)
            e = np.exp(s - s.max(-1, keepdims=True))
            out = (e / e.sum(-1, keepdims=True) @ v[:, sl]) @ p("w_o")[hh]
            if key == (layer, "head", hh):
                return out[-1]
            total += out
        resid = resid + total
        h2 = rms(resid, p("ln2"))
        g = h2 @ p("w_gate")
        m = (g / (1 + np.exp(-g)) * (h2 @ p("w_up"))) @ p("w_down")
        if key == (layer, "mlp", None):
            return m[-1]
        resid = resid + m
    raise KeyError(key)


def test_reference_forward_agrees_with_model(params):
    o, _ = pair(12)
    np.testing.assert_allclose(forward(params, o)[-1], reference_forward(params, o), atol=1e-4)


class TestRounding:
    def test_all_ones(self):
        assert len(round_mask(Mask.full(CFG, 1.0))) == 0

    def test_threshold(self):
        comps = enumerate_components(CFG)
        m = Mask.from_dict(CFG, {comps[0]: 0.1, comps[1]: 0.9})
        assert round_mask(m, 0.5).patched == {comps[0]}

    def test_tie_is_unpatched(self):
        comps = enumerate_components(CFG)
        assert round_mask(Mask.from_dict(CFG, {comps[0]: 0.5}), 0.5).patched == frozenset()

    def test_bad_threshold(self):
        with pytest.raises(ValueError):
            round_mask(Mask.full(CFG), 1.0)

    def test_unknown_component(self):
        with pytest.raises(ValueError):
            BinaryMask(CFG, frozenset({ComponentId(7, "mlp")}))


class TestBinaryForward:
    def test_empty_is_plain(self, params):
        o, a = pair(13, batch=2)
        cache = cache_alternate(params, a, orig_tokens=o)
        out = binary_forward(params, o, cache, BinaryMask(CFG, frozenset()))
        np.testing.assert_allclose(out, forward(params, o)[:, -1], atol=1e-6)

    def test_full_is_alternate(self, params):
        o, a = pair(14, batch=2)
        cache = cache_alternate(params, a, orig_tokens=o)
        out = binary_forward(params, o, cache, BinaryMask(CFG, frozenset(enumerate_components(CFG))))
        np.testing.assert_allclose(out, forward(params, a)[:, -1], atol=1e-4)

    def test_equals_masked_forward(self, params):
        o, a = pair(15, batch=2)
        cache = cache_alternate(params, a, orig_tokens=o)
        comps = enumerate_components(CFG)
        b = BinaryMask(CFG, frozenset(comps[::3]))
        m = Mask.from_dict(CFG, {c: 0.0 for c in comps[::3]})
        with T.no_grad():
            ref = masked_forward(params, o, cache, m).data
        assert binary_forward(params, o, cache, b).tobytes() == ref.tobytes()


class TestMaskFiles:
    def test_continuous_roundtrip(self, tmp_path):
        w = np.random.default_rng(0).uniform(0, 1, CFG.n_components).astype(np.float32)
        m = Mask(CFG, Tensor(w))
        save_mask(m, tmp_path / "m.json")
        back = load_mask(tmp_path / "m.json", CFG)
        assert back.weights.data.tobytes() == w.tobytes()

    def test_binary_roundtrip(self, tmp_path):
        comps = enumerate_components(CFG)
        b = BinaryMask(CFG, frozenset(comps[:3]))
        save_mask(b, tmp_path / "b.json")
        assert load_mask(tmp_path / "b.json", CFG) == b

    def test_wrong_config(self, tmp_path):
        save_mask(Mask.full(CFG), tmp_path / "m.json")
        with pytest.raises(ValueError):
            load_mask(tmp_path / "m.json", ModelConfig(n_layers=1, n_heads=4, d_model=32))


def test_zero_cache_ablation_shape():
    cache = AlternateCache.zeros(CFG, [[1, 2, 3]], positions=(0, 1, 2))
    assert cache.heads[0].shape == (1, 4, 3, 32)
