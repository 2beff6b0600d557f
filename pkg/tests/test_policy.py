import numpy as np
import pytest

from ssopd.env import EnvSpec
from ssopd.oracle import finite_difference_check
from ssopd.policy import (
    Context,
    PolicyParams,
    distribution,
    feature_layout,
    featurize,
    init_params,
    load_params,
    logprob_gradient,
    random_params,
    sample_completion,
    save_params,
    snapshot,
)

from helpers import EOS, mod_task, random_tokens, toy_policy

ENV = EnvSpec(vocab_size=3, horizon=4, prompt_symbols=8)


def _random_context(rng, env=ENV, hinted=None):
    prompt = tuple(env.prompt_token(int(s)) for s in rng.integers(0, env.prompt_symbols, size=2))
    prefix = random_tokens(rng, env)[: int(rng.integers(0, env.horizon))]
    prefix = tuple(a for a in prefix if a != EOS)
    hinted = rng.random() < 0.5 if hinted is None else hinted
    if not hinted:
        return Context(prompt + prefix)
    witness = random_tokens(rng, env)
    return Context(prompt + (env.hint_open,) + witness + (env.hint_close,) + prefix, True)


def test_zero_weights_give_uniform():
    params = init_params(ENV)
    d = distribution(params, Context((ENV.prompt_token(1),)))
    np.testing.assert_array_equal(d.probs, np.full(ENV.n_actions, 1 / ENV.n_actions))


def test_hint_prior_leaves_plain_contexts_uniform():
    params = init_params(ENV, hint_strength=3.0)
    plain = distribution(params, Context((ENV.prompt_token(1), 2)))
    np.testing.assert_allclose(plain.probs, 1 / ENV.n_actions, atol=1e-15)
    hinted = Context((ENV.prompt_token(1), ENV.hint_open, 2, 3, 0, ENV.hint_close, 2), True)
    assert int(np.argmax(distribution(params, hinted).probs)) == 3


def test_saturation():
    params = init_params(ENV)
    ctx = Context((ENV.prompt_token(0),))
    w = params.weights.copy()
    w[params.layout.bias, 2] = 1000.0
    assert distribution(params.replace(w), ctx).probs[2] >= 1 - 1e-9


def test_normalization_and_mask_safety():
    rng = np.random.default_rng(0)
    for i in range(200):
        params = random_params(ENV, rng, scale=3.0)
        d = distribution(params, _random_context(rng))
        assert d.probs.shape == (ENV.n_actions,)  # delimiters are outside the support
        assert abs(d.probs.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(np.exp(d.logprobs), d.probs, atol=1e-12)


def test_featurize_examples():
    prompt = (ENV.prompt_token(2), ENV.prompt_token(5))
    layout = feature_layout(ENV, 2)
    idx = set(featurize(Context(prompt), ENV))
    assert idx == {layout.lag_feature(1, prompt[1]), layout.lag_feature(2, prompt[0]), layout.bias}

    prefix = (1, 2)
    plain = set(featurize(Context(prompt + prefix), ENV))
    hinted = set(featurize(Context(prompt + (ENV.hint_open, 3, 1, 2, 0, ENV.hint_close) + prefix,
                                   True), ENV))
    assert hinted - plain == {layout.hint_flag, layout.hint_align + 2}
    assert plain - hinted == set()

    # identical last-k tokens give identical features
    a = featurize(Context((ENV.prompt_token(0), 3, 1, 2)), ENV)
    b = featurize(Context((ENV.prompt_token(7), 1, 2)), ENV)
    np.testing.assert_array_equal(np.sort(a), np.sort(b))


def test_hint_alignment_past_end():
    layout = feature_layout(ENV, 2)
    ctx = Context((ENV.prompt_token(0), ENV.hint_open, 1, 0, ENV.hint_close, 1, 0), True)
    assert layout.hint_align + layout.past_end in set(featurize(ctx, ENV))


def test_featurize_rejects_bad_contexts():
    with pytest.raises(ValueError):
        featurize(Context(()), ENV)
    with pytest.raises(ValueError):
        featurize(Context((ENV.prompt_token(0), ENV.hint_open)), ENV)


def test_logprob_gradient_hand_example():
    env = EnvSpec(vocab_size=1, horizon=2, prompt_symbols=2)
    params = init_params(env, feature_order=1)
    ctx = Context((env.prompt_token(0),))
    g = logprob_gradient(params, ctx, 1)
    # every active feature row sees +0.5 on the taken action and -0.5 on the other
    for row in featurize(ctx, env, 1):
        np.testing.assert_allclose(g[row], [-0.5, 0.5])
    assert np.count_nonzero(g) == 2 * len(featurize(ctx, env, 1))


def test_logprob_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        params = random_params(ENV, rng, scale=1.0)
        ctx = _random_context(rng)
        a = int(rng.integers(ENV.n_actions))

        def fn(w):
            p = params.replace(w)
            return distribution(p, ctx).logprobs[a], logprob_gradient(p, ctx, a)

        worst = max(worst, finite_difference_check(fn, params.weights, 1e-5, n_coords=20, rng=rng))
    assert worst < 1e-6


def test_score_function_has_zero_mean():
    rng = np.random.default_rng(2)
    for _ in range(50):
        params = random_params(ENV, rng, scale=2.0)
        ctx = _random_context(rng)
        probs = distribution(params, ctx).probs
        mean = sum(probs[a] * logprob_gradient(params, ctx, a) for a in range(ENV.n_actions))
        assert np.abs(mean).max() < 1e-10


def test_weights_are_immutable_and_snapshot_isolated():
    src = np.zeros((feature_layout(ENV, 2).n_features, ENV.n_actions))
    params = PolicyParams(src, ENV)
    src[:] = 5.0  # the constructor copied
    assert params.weights.sum() == 0.0
    with pytest.raises(ValueError):
        params.weights[0, 0] = 1.0
    snap = snapshot(params)
    ctx = Context((ENV.prompt_token(3),))
    before = distribution(snap, ctx).probs.copy()
    moved = params.replace(params.weights + 1.0)
    assert np.all(moved.weights == 1.0)
    assert np.all(snap.weights == 0.0)
    np.testing.assert_array_equal(distribution(snap, ctx).probs, before)
    np.testing.assert_array_equal(distribution(snapshot(init_params(ENV)), ctx).probs,
                                  distribution(init_params(ENV), ctx).probs)


def test_rejects_non_finite_and_misshaped_weights():
    shape = (feature_layout(ENV, 2).n_features, ENV.n_actions)
    bad = np.zeros(shape)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        PolicyParams(bad, ENV)
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((3, 3)), ENV)


def test_saturated_policy_emits_eos():
    task = mod_task(m=3, t=0, vocab=3, H=4)
    params = init_params(task.env)
    w = params.weights.copy()
    w[params.layout.bias, EOS] = 50.0
    comp = sample_completion(params.replace(w), task, np.random.default_rng(0))
    assert comp.tokens == (EOS,) and comp.stop_time == 1 and comp.reward == 1


def test_sampling_is_seed_deterministic():
    task = mod_task(m=5, t=2, vocab=3, H=5)
    params = toy_policy(task.env, 3)
    a = [sample_completion(params, task, np.random.default_rng(9)) for _ in range(5)]
    b = [sample_completion(params, task, np.random.default_rng(9)) for _ in range(5)]
    assert a == b


def test_sampling_records_temperature_one_logprobs():
    task = mod_task(m=5, t=2, vocab=3, H=5)
    params = toy_policy(task.env, 4, scale=1.5)
    comp = sample_completion(params, task, np.random.default_rng(0), temperature=1.7)
    for t, a in enumerate(comp.tokens):
        lp = distribution(params, Context(task.prompt + comp.tokens[:t])).logprobs[a]
        assert comp.token_logprobs[t] == lp
    assert comp.tokens[-1] == EOS or comp.stop_time == task.horizon
    assert comp.reward == task.verify(comp.tokens)


@pytest.mark.parametrize("temperature", [1.0, 1.2])
def test_first_token_frequencies_are_uniform_at_zero_weights(temperature):
    task = mod_task(m=5, t=0, vocab=3, H=1)
    params = init_params(task.env)
    rng = np.random.default_rng(5)
    n = 100_000
    counts = np.zeros(task.env.n_actions)
    for _ in range(n):
        counts[sample_completion(params, task, rng, temperature).tokens[0]] += 1
    p = 1 / task.env.n_actions
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(counts / n - p) < 3 * se)


def test_sampling_matches_distribution_at_temperature():
    task = mod_task(m=5, t=0, vocab=2, H=1)
    params = toy_policy(task.env, 6, scale=1.0)
    idx = featurize(Context(task.prompt), task.env)
    logits = params.weights[idx].sum(axis=0) / 1.2
    expected = np.exp(logits - logits.max())
    expected /= expected.sum()
    rng = np.random.default_rng(7)
    n = 40_000
    counts = np.bincount([sample_completion(params, task, rng, 1.2).tokens[0] for _ in range(n)],
                         minlength=task.env.n_actions)
    se = np.sqrt(expected * (1 - expected) / n)
    assert np.all(np.abs(counts / n - expected) < 4 * se)


def test_checkpoint_roundtrip(tmp_path):
    params = toy_policy(ENV, 8)
    path = save_params(tmp_path / "w.npz", params, step=7, config_digest="abc")
    loaded, header = load_params(path)
    np.testing.assert_array_equal(loaded.weights, params.weights)
    assert loaded.env == ENV and loaded.feature_order == params.feature_order
    assert header["step"] == 7 and header["config_digest"] == "abc"
    assert header["vocab_size"] == ENV.vocab_size and "seed" in header


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_params(bad)
    with pytest.raises(ValueError):
        load_params(tmp_path / "missing.npz")
