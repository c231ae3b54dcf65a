import math

import numpy as np
import pytest
import scipy.sparse as sp

from case_lab import nn
from case_lab.nn import ParamStore, ShapeError, Tensor
from gradcheck import check_tensor_fn


def rng(seed=0):
    return np.random.default_rng(seed)


def away_from_zero(x, gap=1e-2):
    """Nudge entries away from relu's kink so finite differences stay one-sided-safe."""
    return np.where(np.abs(x) < gap, gap * np.sign(x + 1e-30) + x, x)


def test_dense_identity_and_bias():
    x = rng().normal(size=(3, 4))
    out = nn.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    assert np.array_equal(out.data, x)
    b = rng(1).normal(size=5)
    out = nn.dense(Tensor(np.zeros((2, 3))), Tensor(rng(2).normal(size=(3, 5))), Tensor(b))
    assert np.array_equal(out.data, np.tile(b, (2, 1)))


def test_dense_shape_errors_name_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nn.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))
    with pytest.raises(ShapeError):
        nn.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 5))), Tensor(np.zeros(4)))


def test_dense_gradcheck_tight():
    r = rng(3)
    x, w, b = r.normal(size=(4, 5)), r.normal(size=(5, 3)), r.normal(size=3)
    c = r.normal(size=(4, 3))
    err = check_tensor_fn(lambda x, w, b: nn.mean(nn.weighted_sum([(1.0, nn.dense(x, w, b))]) - Tensor(c)), [x, w, b])
    # mean(dense - c) is linear, so differences are exact up to rounding
    assert err < 1e-6
    err = check_tensor_fn(
        lambda x, w, b: nn.softmax_xent_batch(nn.dense(x, w, b), np.array([0, 1, 2, 0])), [x, w, b]
    )
    assert err < 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_op_gradchecks(seed):
    r = rng(seed)
    a, b = r.normal(size=(3, 4)), r.normal(size=(3, 4))
    t = np.array([3, 0, 1])
    xent = lambda z: nn.softmax_xent_batch(z, t)
    assert check_tensor_fn(lambda a, b: xent(nn.add(a, b)), [a, b]) < 1e-6
    assert check_tensor_fn(lambda a, b: xent(nn.sub(a, b)), [a, b]) < 1e-6
    assert check_tensor_fn(lambda a: xent(nn.scale(a, -1.7)), [a]) < 1e-6
    assert check_tensor_fn(lambda a: xent(nn.relu(a)), [away_from_zero(a)]) < 1e-6
    assert check_tensor_fn(lambda a: xent(nn.take_rows(a, [2, 2, 0])), [a]) < 1e-6
    assert check_tensor_fn(lambda a, b: xent(nn.take_rows(nn.concat([a, b], axis=0), [0, 4, 5])), [a, b]) < 1e-6
    assert check_tensor_fn(lambda a, b: nn.mean(nn.relu(nn.concat([a, b]))), [away_from_zero(a), away_from_zero(b)]) < 1e-6
    w = r.normal(size=(4, 4))
    assert check_tensor_fn(lambda a, w: xent(nn.matmul(a, w)), [a, w]) < 1e-6
    x = sp.random(3, 4, density=0.5, random_state=seed, format="csr")
    assert check_tensor_fn(lambda w: xent(nn.sparse_matmul(x, w)), [w]) < 1e-6
    assert check_tensor_fn(lambda a: nn.mean(nn.relu(a)), [away_from_zero(a)]) < 1e-6
    # broadcast add of a bias row
    assert check_tensor_fn(lambda a, c: xent(nn.add(a, c)), [a, r.normal(size=4)]) < 1e-6


def test_sparse_matmul_matches_dense():
    x = sp.random(5, 7, density=0.3, random_state=1, format="csr")
    w = rng().normal(size=(7, 3))
    assert np.allclose(nn.sparse_matmul(x, Tensor(w)).data, x.toarray() @ w)


def test_softmax_xent_uniform():
    loss, grad = nn.softmax_xent(np.zeros(6), 2)
    assert loss == pytest.approx(math.log(6), abs=1e-15)
    assert np.exp(nn.log_softmax(np.zeros(6))).sum() == pytest.approx(1.0)
    assert grad.sum() == pytest.approx(0.0, abs=1e-15)


def test_softmax_xent_dominant_logit():
    logits = np.zeros(6)
    logits[4] = 50.0
    loss, _ = nn.softmax_xent(logits, 4)
    assert abs(loss) < 1e-9


def test_softmax_xent_bad_index():
    with pytest.raises(IndexError):
        nn.softmax_xent(np.zeros(6), 6)
    with pytest.raises(IndexError):
        nn.softmax_xent_batch(Tensor(np.zeros((2, 6))), np.array([0, 7]))


def test_softmax_xent_gradcheck():
    for seed in range(10):
        z = rng(seed).normal(size=6)
        target = seed % 6
        _, g = nn.softmax_xent(z, target)
        numeric = nn.finite_difference_grad(lambda: nn.softmax_xent(z, target)[0], z)
        assert nn.max_relative_error(g, numeric, floor=1e-6) < 1e-6


def test_triplet_examples():
    a = np.array([1.0, 2.0])
    assert nn.triplet_margin(a, a, a + np.array([3.0, 0.0]), 1.0)[0] == 0.0
    loss, grads = nn.triplet_margin(a, a, a, 1.0)
    assert loss == 1.0
    assert all(np.array_equal(g, np.zeros(2)) for g in grads)


def test_triplet_errors():
    with pytest.raises(ShapeError):
        nn.triplet_margin(np.zeros(2), np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        nn.triplet_margin(np.zeros(2), np.zeros(2), np.ones(2), margin=0.0)


def test_triplet_kink_subgradient_is_zero():
    # d(a,p) - d(a,n) + margin == 0 exactly
    a, p, n = np.zeros(2), np.array([1.0, 0.0]), np.array([2.0, 0.0])
    loss, grads = nn.triplet_margin(a, p, n, 1.0)
    assert loss == 0.0 and all(not g.any() for g in grads)


def test_triplet_gradcheck():
    checked = 0
    for seed in range(40):
        r = rng(seed)
        a, p, n = r.normal(size=(3, 5))
        raw = np.linalg.norm(a - p) - np.linalg.norm(a - n) + 1.0
        if abs(raw) < 1e-3:
            continue
        _, (ga, gp, gn) = nn.triplet_margin(a, p, n)
        for x, g in ((a, ga), (p, gp), (n, gn)):
            numeric = nn.finite_difference_grad(lambda: nn.triplet_margin(a, p, n)[0], x)
            assert nn.max_relative_error(g, numeric, floor=1e-6) < 1e-6
        checked += 1
    assert checked >= 20


def test_triplet_batch_is_mean_of_rows():
    r = rng(5)
    a, p, n = (r.normal(size=(4, 3)) for _ in range(3))
    batch = nn.triplet_margin_batch(Tensor(a), Tensor(p), Tensor(n)).data
    assert batch == pytest.approx(np.mean([nn.triplet_margin(a[i], p[i], n[i])[0] for i in range(4)]), abs=1e-15)


def test_backward_reuses_shared_nodes():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = nn.add(x, x)
    nn.mean(nn.add(y, y)).backward()
    assert x.grad.tolist() == [4.0]


def _store(seed=0):
    s = ParamStore()
    nn.init_dense(s, "l", 4, 3, rng(seed))
    return s


def test_init_dense_bounds():
    s = _store()
    assert np.all(np.abs(s["l.w"].data) <= 0.5) and not s["l.b"].data.any()


def test_adam_zero_grad_no_change():
    s = _store()
    before = {k: t.data.copy() for k, t in s.params.items()}
    s.zero_grad()
    nn.adam_step(s)
    assert all(np.array_equal(before[k], s[k].data) for k in before)


def test_adam_constant_grad_step_tends_to_lr():
    s = ParamStore()
    p = s.add("p", np.zeros(3))
    g = np.array([0.5, -2.0, 1e-3])
    for _ in range(1000):
        before = p.data.copy()
        p.grad = g.copy()
        nn.adam_step(s, lr=1e-2)
    step = np.abs(p.data - before)
    assert np.all(np.abs(step / 1e-2 - 1) < 1e-3)


def test_adam_matches_reference_formula():
    r = rng(7)
    s = ParamStore()
    p = s.add("p", r.normal(size=(40000,)))
    w, m, v = p.data.copy(), np.zeros(40000), np.zeros(40000)
    for t in range(1, 4):
        g = r.normal(size=40000)
        p.grad = g.copy()
        nn.adam_step(s, lr=1e-3)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-3 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert np.allclose(p.data, w, rtol=0, atol=1e-14)


def test_adam_deterministic():
    def run():
        s = _store(3)
        r = rng(4)
        for _ in range(20):
            for t in s.params.values():
                t.grad = r.normal(size=t.shape)
            nn.adam_step(s)
        return s

    a, b = run(), run()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a.params)


def test_checkpoint_round_trip(tmp_path):
    s = _store()
    for t in s.params.values():
        t.grad = np.ones(t.shape)
    nn.adam_step(s)
    cfg = {"hidden": 3, "name": "x"}
    nn.save_checkpoint(s, cfg, tmp_path / "c.json")
    loaded, got = nn.load_checkpoint(tmp_path / "c.json", expect_config=cfg)
    assert got == cfg and loaded.step == 1
    for k in s.params:
        assert np.array_equal(loaded[k].data, s[k].data)
        assert np.array_equal(loaded.m[k], s.m[k]) and np.array_equal(loaded.v[k], s.v[k])
    assert nn.checkpoint_text(loaded, cfg) == nn.checkpoint_text(s, cfg)


def test_checkpoint_rejections(tmp_path):
    import json

    s = _store()
    path = tmp_path / "c.json"
    nn.save_checkpoint(s, {"a": 1}, path)
    with pytest.raises(nn.CheckpointError, match="different configuration"):
        nn.load_checkpoint(path, expect_config={"a": 2})
    doc = json.loads(path.read_text())
    doc["config"]["a"] = 5
    path.write_text(json.dumps(doc))
    with pytest.raises(nn.CheckpointError, match="fingerprint"):
        nn.load_checkpoint(path)
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(nn.CheckpointError, match="version"):
        nn.load_checkpoint(path)
