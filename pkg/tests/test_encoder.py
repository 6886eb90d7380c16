import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from focal import encoder, nn
from focal.encoder import ContextEncoder, DmlConfig, LatentEmbedding
from focal.nn import ContractError, GradTape


def make_encoder(seed=0, width=16, depth=2, l=5):
    return ContextEncoder.build(l, width, depth, np.random.default_rng(seed))


def rows(n, seed=0):
    return np.random.default_rng(seed).normal(size=(n, 7))


def test_zero_weight_encoder():
    enc = ContextEncoder(nn.Mlp([7, 4, 3], None, "relu", "tanh"))
    assert np.array_equal(encoder.embed_batch(enc, rows(5)).value, np.zeros((5, 3)))


def test_duplicate_and_per_row():
    enc = make_encoder()
    x = rows(8)
    out = encoder.embed_batch(enc, x).value
    for k in range(8):
        np.testing.assert_allclose(out[k], encoder.embed_batch(enc, x[k:k + 1]).value[0],
                                   rtol=0, atol=1e-15)
    dup = encoder.embed_batch(enc, np.stack([x[0], x[0]])).value
    assert np.array_equal(dup[0], dup[1])
    assert np.all(np.abs(out) < 1)


def test_empty_context():
    with pytest.raises(ContractError):
        encoder.embed_batch(make_encoder(), np.zeros((0, 7)))


def test_embed_task_mean_properties():
    enc = make_encoder(1)
    x = rows(10, 1)
    single = encoder.embed_task(enc, x[:1]).z
    np.testing.assert_allclose(single, encoder.embed_batch(enc, x[:1]).value[0], rtol=0, atol=1e-15)
    assert np.array_equal(encoder.embed_task(enc, x).z, encoder.embed_task(enc, x[::-1]).z)
    za, zb = encoder.embed_task(enc, x[:3]).z, encoder.embed_task(enc, x[3:]).z
    np.testing.assert_allclose(encoder.embed_task(enc, x).z, (3 * za + 7 * zb) / 10, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_permutation_invariance_exact(n, seed):
    enc = make_encoder(2)
    x = rows(n, seed)
    perm = np.random.default_rng(seed + 1).permutation(n)
    assert encoder.embed_task(enc, x).z.tobytes() == encoder.embed_task(enc, x[perm]).z.tobytes()


def test_embed_contexts_matches_embed_task():
    enc = make_encoder(3)
    ctx = np.random.default_rng(0).normal(size=(2, 3, 6, 7))
    z = encoder.embed_contexts(enc, ctx).value
    assert z.shape == (2, 3, 5)
    np.testing.assert_array_equal(z[1, 2], encoder.embed_task(enc, ctx[1, 2]).z)


def test_pair_loss_values():
    cfg = DmlConfig("inverse-square", 1.0, 0.1)
    z = np.zeros(5)
    assert float(encoder.dml_pair_loss(z, z, True, cfg).value) == 0.0
    e = np.eye(5)[0]
    assert abs(float(encoder.dml_pair_loss(e, z, False, cfg).value) - 1 / 1.1) < 1e-12
    inv = DmlConfig("inverse", 2.0, 0.1)
    assert abs(float(encoder.dml_pair_loss(0.5 * e, z, False, inv).value) - 2 / 0.6) < 1e-12
    sq = DmlConfig.for_variant("square", 5)
    m = math.sqrt(10 / 3)
    assert abs(float(encoder.dml_pair_loss(e, z, False, sq).value) - 16 * (m - 1) ** 2) < 1e-12
    lin = DmlConfig.for_variant("linear", 5)
    assert float(encoder.dml_pair_loss(3 * e, z, False, lin).value) == 0.0
    with pytest.raises(ContractError):
        encoder.dml_pair_loss(np.zeros(3), np.zeros(4), True, cfg)


def test_table_weights():
    assert [DmlConfig.for_variant(v).beta for v in encoder.VARIANTS] == [1, 2, 8, 16]
    assert all(DmlConfig.for_variant(v).epsilon == 0.1 for v in encoder.VARIANTS)


def test_collapsed_meta_loss():
    enc = ContextEncoder(nn.Mlp([7, 4, 5], None, "relu", "tanh"))  # constant output 0
    cfg = DmlConfig("inverse-square", 1.0, 0.1)
    batches = [(rows(4, 0), rows(4, 1)), (rows(4, 2), rows(4, 3))]
    assert abs(float(encoder.dml_meta_loss(enc, batches, cfg).value) - 2 / 0.1) < 1e-12


def brute_meta_loss(enc, batches, cfg):
    """Double loop over tasks with scalar arithmetic (independent oracle)."""
    def z_of(c):
        return np.mean([encoder.embed_batch(enc, c[k:k + 1]).value[0] for k in range(len(c))], 0)

    main = [z_of(c) for c, _ in batches]
    total = 0.0
    for i, (c, c2) in enumerate(batches):
        total += float(np.sum((main[i] - z_of(c2)) ** 2))
        for j in range(len(batches)):
            if i == j:
                continue
            d = math.sqrt(float(np.sum((main[i] - main[j]) ** 2)))
            if cfg.variant == "inverse-square":
                total += cfg.beta / (d ** 2 + cfg.epsilon)
            elif cfg.variant == "inverse":
                total += cfg.beta / (d + cfg.epsilon)
            else:
                total += cfg.beta * max(0.0, cfg.margin - d) ** cfg.power
    return total


@pytest.mark.parametrize("variant", encoder.VARIANTS)
def test_meta_loss_matches_brute_force(variant):
    enc = make_encoder(4)
    cfg = DmlConfig.for_variant(variant, 5)
    batches = [(rows(6, 10 + k), rows(6, 20 + k)) for k in range(4)]
    got = float(encoder.dml_meta_loss(enc, batches, cfg).value)
    assert abs(got - brute_meta_loss(enc, batches, cfg)) < 1e-10 * max(1.0, abs(got))
    # ragged batch sizes go through the per-task path
    ragged = [(rows(3, 1), rows(5, 2)), (rows(4, 3), rows(2, 4)), (rows(6, 5), rows(1, 6))]
    got = float(encoder.dml_meta_loss(enc, ragged, cfg).value)
    assert abs(got - brute_meta_loss(enc, ragged, cfg)) < 1e-10 * max(1.0, abs(got))


def test_m2_enumeration():
    enc = make_encoder(5)
    cfg = DmlConfig.for_variant("inverse", 5)
    (c1, c1b), (c2, c2b) = (rows(5, 1), rows(5, 2)), (rows(5, 3), rows(5, 4))
    z = {k: encoder.embed_task(enc, v).z for k, v in
         {"c1": c1, "c1b": c1b, "c2": c2, "c2b": c2b}.items()}
    pair = lambda a, b, same: float(encoder.dml_pair_loss(z[a], z[b], same, cfg).value)
    expected = pair("c1", "c1b", True) + pair("c1", "c2", False) + pair("c2", "c1", False) \
        + pair("c2", "c2b", True)
    got = float(encoder.dml_meta_loss(enc, [(c1, c1b), (c2, c2b)], cfg).value)
    assert abs(got - expected) < 1e-12


def test_meta_loss_errors():
    enc = make_encoder()
    cfg = DmlConfig()
    with pytest.raises(ContractError):
        encoder.dml_meta_loss(enc, [(rows(3), rows(3))], cfg)
    with pytest.raises(ContractError):
        encoder.dml_meta_loss(enc, [(rows(3), rows(3)), (np.zeros((0, 7)), rows(3))], cfg)


def test_meta_loss_gradient_matches_finite_differences():
    enc = make_encoder(6, width=6, depth=1)
    cfg = DmlConfig.for_variant("inverse-square", 5)
    batches = [(rows(4, k), rows(4, 10 + k)) for k in range(3)]
    tape = GradTape()
    grads = nn.backward(tape, encoder.dml_meta_loss(enc, batches, cfg, tape))
    fd = nn.finite_diff_grad(lambda: float(encoder.dml_meta_loss(enc, batches, cfg).value),
                             enc.params)
    for p in enc.params:
        np.testing.assert_allclose(grads[p], fd[p], rtol=1e-4, atol=1e-8)


@pytest.mark.parametrize("variant", ["inverse-square", "inverse"])
def test_push_gradient_sign(variant):
    rng = np.random.default_rng(0)
    cfg = DmlConfig.for_variant(variant, 5)
    for _ in range(20):
        zi, zj = nn.Parameter(rng.uniform(-1, 1, 5)), rng.uniform(-1, 1, 5)
        tape = GradTape()
        loss = encoder.dml_pair_loss(tape.watch(zi), zj, False, cfg)
        g = nn.backward(tape, loss)[zi]
        assert float(g @ (zj - zi.value)) > 0  # descent direction -g points away from z_j


def test_pull_step_contracts():
    zi = nn.Parameter(np.array([0.3, -0.2, 0.1, 0.0, 0.5]))
    zj = np.array([-0.1, 0.2, 0.0, 0.4, 0.1])
    cfg = DmlConfig()
    tape = GradTape()
    g = nn.backward(tape, encoder.dml_pair_loss(tape.watch(zi), zj, True, cfg))[zi]
    before = np.linalg.norm(zi.value - zj)
    assert np.linalg.norm(zi.value - 0.01 * g - zj) < before


def test_variance_identity():
    assert encoder.contrastive_variance_check([2.5] * 7) == (0.0, 0.0)
    assert encoder.contrastive_variance_check([0.0, 1.0]) == (2.0, 2.0)
    x = np.random.default_rng(3).normal(size=64)
    brute = sum((a - b) ** 2 for a, b in itertools.permutations(x, 2))
    lhs, rhs = encoder.contrastive_variance_check(x)
    assert abs(lhs - brute) / brute < 1e-12
    assert abs(lhs - rhs) / max(lhs, 1.0) < 1e-9


def test_esr_threshold_value():
    assert abs(encoder.esr_threshold(5) - 1.8257418583505538) < 1e-15
    u = np.random.default_rng(0).uniform(-1, 1, size=(200_000, 2, 5))
    d = np.sqrt(np.sum((u[:, 0] - u[:, 1]) ** 2, axis=1))
    # sqrt(2l/3) is the root-mean-square distance
    assert abs(np.sqrt(np.mean(d * d)) / encoder.esr_threshold(5) - 1) < 0.02
    # the plain mean sits below it (Jensen); 1.7576 +- 0.0004 from a 2e6-pair Monte-Carlo run
    assert abs(np.mean(d) - 1.7576) < 0.005


def test_esr_and_rms_simple_cases():
    same = [LatentEmbedding(np.zeros(5), k) for k in range(4)]
    assert encoder.esr(same) == 0.0 and encoder.rms_distance(same) == 0.0
    corners = [LatentEmbedding(np.full(5, -0.999), 0), LatentEmbedding(np.full(5, 0.999), 1)]
    assert encoder.esr(corners) == 1.0
    two = (np.array([0, 1]), np.array([[0.0, 0, 0, 0, 0], [0.3, 0.4, 0, 0, 0]]))
    assert abs(encoder.rms_distance(two) - 0.5) < 1e-15
    with pytest.raises(ValueError):
        encoder.esr((np.array([3, 3]), np.zeros((2, 5))))


def test_esr_rms_against_double_loop():
    rng = np.random.default_rng(8)
    ids = rng.integers(0, 5, size=30)
    z = rng.uniform(-1, 1, size=(30, 5))
    d = [math.dist(z[i], z[j]) for i in range(30) for j in range(i + 1, 30) if ids[i] != ids[j]]
    assert encoder.esr((ids, z)) == np.mean(np.array(d) > math.sqrt(10 / 3))
    assert abs(encoder.rms_distance((ids, z)) - math.sqrt(np.mean(np.square(d)))) < 1e-12


def _free_point_esr(variant, seed, n=20, l=5, steps=1500):
    rng = np.random.default_rng(seed)
    u = nn.Parameter(rng.normal(0, 0.1, (n, l)))
    cfg = DmlConfig.for_variant(variant, l)
    state = nn.AdamState(1e-2)
    eye = np.eye(n)
    for _ in range(steps):
        tape = GradTape()
        z = nn.tanh(tape.watch(u))
        diff = z.reshape(n, 1, l) - z.reshape(1, n, l)
        push = encoder._push((diff * diff).sum(axis=-1) + eye, cfg) * (1 - eye)
        nn.adam_step([u], nn.backward(tape, push.sum()), state)
    return encoder.esr((np.arange(n), np.tanh(u.value)), l)


def test_square_push_degenerates_relative_to_inverse_square():
    for seed in range(2):
        assert _free_point_esr("square", seed) < _free_point_esr("inverse-square", seed)


def test_embedding_csv_round_trip(tmp_path):
    ids = np.array([0, 0, 3])
    z = np.random.default_rng(0).uniform(-1, 1, (3, 5))
    encoder.write_embeddings(tmp_path / "e.csv", ids, z)
    assert (tmp_path / "e.csv").read_text().startswith("task_id,z0,z1,z2,z3,z4\n")
    back_ids, back_z = encoder.read_embeddings(tmp_path / "e.csv")
    assert np.array_equal(back_ids, ids) and np.array_equal(back_z, z)
