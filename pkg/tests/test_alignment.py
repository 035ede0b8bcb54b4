import numpy as np
import pytest

from densealign import alignment as A
from densealign import tensor as T
from gradcheck import finite_difference, rel_error


# ---- text concept pooling -------------------------------------------------

def test_pool_text_singleton():
    z = T.tensor(np.arange(12.0).reshape(4, 3))
    out = A.pool_text_concept(z, [2])
    np.testing.assert_array_equal(out.data, z.data[2])


def test_pool_text_constant_rows():
    z = T.tensor(np.tile([1.0, 2.0], (5, 1)))
    out = A.pool_text_concept(z, list(range(5)))
    np.testing.assert_allclose(out.data, [1.0, 2.0])


def test_pool_text_hand_mean():
    z = T.tensor([[1.0, 0.0], [0.0, 1.0]])
    out = A.pool_text_concept(z, [0, 1])
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_pool_text_empty_raises():
    with pytest.raises(A.ContractError):
        A.pool_text_concept(T.tensor(np.zeros((2, 2))), [])


# ---- visual concept pooling -----------------------------------------------

def test_pool_visual_identical_patches():
    patch = np.array([0.3, -1.2, 0.5])
    z_v = T.tensor(np.tile(patch, (7, 1)))
    out = A.pool_visual_concept(z_v, T.tensor([1.0, 2.0, 3.0]), tau=0.7)
    np.testing.assert_allclose(out.data, patch, atol=1e-12)


def test_pool_visual_uniform_limit():
    rng = np.random.default_rng(0)
    z_v = rng.normal(size=(6, 4))
    c_t = rng.normal(size=4)
    out = A.pool_visual_concept(T.tensor(z_v), T.tensor(c_t), tau=1e9)
    np.testing.assert_allclose(out.data, z_v.mean(axis=0), atol=1e-6)


def test_pool_visual_argmax_limit():
    rng = np.random.default_rng(1)
    z_v = rng.normal(size=(5, 3))
    c_t = z_v[3] * 2.0  # patch 3 is the unique best match
    out = A.pool_visual_concept(T.tensor(z_v), T.tensor(c_t), tau=1e-6)
    np.testing.assert_allclose(out.data, z_v[3], atol=1e-6)


def test_pool_visual_scalar_oracle():
    # 3 patches, d=2, tau=1, hand-evaluated softmax weights
    z_v = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    c_t = np.array([1.0, 0.5])
    scores = z_v @ c_t  # [1.0, 0.5, 1.5]
    w = np.exp(scores) / np.exp(scores).sum()
    expected = z_v.T @ w
    out = A.pool_visual_concept(T.tensor(z_v), T.tensor(c_t), tau=1.0)
    np.testing.assert_allclose(out.data, expected, rtol=1e-12)


def test_pool_visual_bad_tau():
    with pytest.raises(T.ParameterError):
        A.pool_visual_concept(T.tensor(np.zeros((2, 2))), T.tensor([1.0, 0.0]), tau=0.0)


def test_pool_visual_weights_sum_to_one_and_permutation_equivariant():
    rng = np.random.default_rng(2)
    z_v = rng.normal(size=(8, 5))
    c_t = rng.normal(size=5)
    w = A.visual_pool_weights(T.tensor(z_v), T.tensor(c_t), tau=0.3)
    np.testing.assert_allclose(w.data.sum(), 1.0, atol=1e-12)

    perm = rng.permutation(8)
    out1 = A.pool_visual_concept(T.tensor(z_v), T.tensor(c_t), tau=0.3)
    out2 = A.pool_visual_concept(T.tensor(z_v[perm]), T.tensor(c_t), tau=0.3)
    w2 = A.visual_pool_weights(T.tensor(z_v[perm]), T.tensor(c_t), tau=0.3)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)
    np.testing.assert_allclose(w.data[perm], w2.data, atol=1e-12)


def test_pool_visual_tau_scale_covariance():
    rng = np.random.default_rng(3)
    z_v = rng.normal(size=(6, 4))
    c_t = rng.normal(size=4)
    out1 = A.pool_visual_concept(T.tensor(z_v), T.tensor(c_t), tau=2.0)
    out2 = A.pool_visual_concept(T.tensor(z_v), T.tensor(c_t * 0.5), tau=1.0)
    np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)


# ---- global contrastive loss ----------------------------------------------

def test_global_loss_perfect_alignment_limit():
    z = np.array([[1.0, 0.0], [0.0, 1.0]])
    loss = A.global_contrastive_loss(T.tensor(z), T.tensor(z), scale=100.0)
    assert loss.data < 1e-9


def test_global_loss_degenerate_identical():
    z = np.tile([0.6, 0.8], (4, 1))
    loss = A.global_contrastive_loss(T.tensor(z), T.tensor(z), scale=3.3)
    np.testing.assert_allclose(loss.data, np.log(4.0), rtol=1e-12)


def test_global_loss_scalar_oracle():
    zv = np.array([[1.0, 0.0], [0.6, 0.8]])
    zt = np.array([[0.8, 0.6], [0.0, 1.0]])
    logits = zv @ zt.T  # rows already unit norm
    expected = 0.0
    for m in (logits, logits.T):
        for i in range(2):
            p = np.exp(m[i]) / np.exp(m[i]).sum()
            expected += -np.log(p[i])
    expected /= 4
    loss = A.global_contrastive_loss(T.tensor(zv), T.tensor(zt), scale=1.0)
    np.testing.assert_allclose(loss.data, expected, rtol=1e-12)


def test_global_loss_rescaling_invariance():
    rng = np.random.default_rng(4)
    zv = rng.normal(size=(3, 5))
    zt = rng.normal(size=(3, 5))
    base = A.global_contrastive_loss(T.tensor(zv), T.tensor(zt), 2.0).data
    zv2 = zv.copy()
    zv2[1] *= 17.0
    again = A.global_contrastive_loss(T.tensor(zv2), T.tensor(zt), 2.0).data
    np.testing.assert_allclose(base, again, rtol=1e-12)


def test_global_loss_upper_bound_when_diagonal_maximal():
    rng = np.random.default_rng(5)
    zv = np.eye(4) + 0.01 * rng.normal(size=(4, 4))
    zt = np.eye(4) + 0.01 * rng.normal(size=(4, 4))
    loss = A.global_contrastive_loss(T.tensor(zv), T.tensor(zt), 1.0).data
    assert loss <= np.log(4.0)


def test_global_loss_needs_two():
    z = np.ones((1, 3))
    with pytest.raises(A.ContractError):
        A.global_contrastive_loss(T.tensor(z), T.tensor(z), 1.0)


# ---- concept loss ----------------------------------------------------------

def test_concept_loss_confident_correct():
    cv = [T.tensor([1.0, 0.0])]
    h = T.tensor(np.array([[1e3, 0.0], [0.0, 1e3]]))
    loss = A.concept_loss(cv, [0], h)
    assert loss.data < 1e-9


def test_concept_loss_zero_head_uniform():
    cv = [T.tensor([0.3, -0.2]), T.tensor([1.0, 1.0])]
    h = T.tensor(np.zeros((5, 2)))
    loss = A.concept_loss(cv, [2, 4], h)
    np.testing.assert_allclose(loss.data, np.log(5.0), rtol=1e-12)


def test_concept_loss_scalar_oracle():
    # C=3, d=2 hand case
    cv_arr = np.array([[1.0, -0.5], [0.2, 0.7]])
    h_arr = np.array([[0.5, 0.1], [-0.3, 0.9], [0.0, 0.4]])
    labels = [0, 2]
    logits = cv_arr @ h_arr.T
    expected = 0.0
    for row, lab in zip(logits, labels):
        p = np.exp(row) / np.exp(row).sum()
        expected += -np.log(p[lab])
    expected /= 2
    loss = A.concept_loss([T.tensor(r) for r in cv_arr], labels, T.tensor(h_arr))
    np.testing.assert_allclose(loss.data, expected, rtol=1e-12)


def test_concept_loss_empty_returns_exact_zero():
    loss = A.concept_loss([], [], T.tensor(np.zeros((2, 2), ), ))
    assert loss.data == 0.0
    assert not loss.requires_grad


def test_concept_loss_grad_at_zero_head_closed_form():
    rng = np.random.default_rng(6)
    cv_arr = rng.normal(size=(4, 3))
    labels = np.array([0, 1, 1, 0])
    C = 2
    h = T.tensor(np.zeros((C, 3)), requires_grad=True)
    loss = A.concept_loss([T.tensor(r) for r in cv_arr], labels, h)
    loss.backward()
    # classic softmax-regression gradient at h=0: (p - q) outer c_v, p uniform
    p = np.full(C, 1.0 / C)
    expected = np.zeros((C, 3))
    for row, lab in zip(cv_arr, labels):
        q = np.zeros(C)
        q[lab] = 1.0
        expected += np.outer(p - q, row)
    expected /= len(labels)
    np.testing.assert_allclose(h.grad, expected, rtol=1e-10)


# ---- total loss -------------------------------------------------------------

def test_total_loss_lambda_zero():
    out = A.total_loss(T.tensor(1.7), T.tensor(9.9), 0.0)
    assert out.data == 1.7


def test_total_loss_arithmetic():
    out = A.total_loss(T.tensor(1.0), T.tensor(2.0), 0.5)
    assert out.data == 2.0


def test_total_loss_gradient_linearity():
    rng = np.random.default_rng(7)
    x_arr = rng.normal(size=4)
    lam = 0.7

    def grads(weight_g, weight_l):
        x = T.tensor(x_arr, True)
        lg = T.tsum(T.mul(x, x))
        ll = T.tsum(x)
        A.total_loss(T.mul(lg, T.tensor(weight_g)), T.mul(ll, T.tensor(weight_l)),
                     lam).backward()
        return x.grad

    total = grads(1.0, 1.0)
    only_g = grads(1.0, 0.0)
    only_l = grads(0.0, 1.0)
    np.testing.assert_allclose(total, only_g + only_l, rtol=1e-12)


def test_total_loss_negative_lambda():
    with pytest.raises(T.ParameterError):
        A.total_loss(T.tensor(1.0), T.tensor(1.0), -0.1)


# ---- end-to-end differentiability -------------------------------------------

def test_full_chain_gradcheck():
    """Gradient of L_tot w.r.t. token embeddings matches finite differences."""
    from densealign import encoder as E

    vocab = E.build_vocab(["a cow and a tree .", "the grass ."])
    cfg = E.EncoderConfig(d_t=8, n_layers=1, n_heads=2, max_len=12,
                          vocab_size=len(vocab), d_out=4)
    enc = E.TextEncoder(cfg, seed=9)
    head = A.AlignmentHead(num_concepts=3, dim=4, seed=9, lam=0.8, tau=0.5)
    rng = np.random.default_rng(10)
    z_v_arr = [rng.normal(size=(6, 4)), rng.normal(size=(6, 4))]
    z_bar_v = np.stack([z.mean(axis=0) for z in z_v_arr])
    captions = ["a cow and a tree .", "the grass ."]
    toks = [E.tokenize(c, vocab) for c in captions]
    from densealign import concepts as C

    spans = []
    for i, c in enumerate(captions):
        for np_ in C.extract_concepts(c):
            idx = C.span_to_token_indices(np_, toks[i])
            spans.append((i, idx, hash(np_.head) % 3))

    def forward():
        z_bar_t, z_t = enc.encode(toks)
        cvs, labels = [], []
        for i, idx, lab in spans:
            c_t = A.pool_text_concept(T.take(z_t, np.asarray(i), axis=0), idx)
            cvs.append(A.pool_visual_concept(T.tensor(z_v_arr[i]), c_t, head.tau))
            labels.append(lab)
        lg = head.global_loss(T.tensor(z_bar_v), z_bar_t)
        ll = head.concept_loss(cvs, labels)
        return head.total(lg, ll)

    loss = forward()
    loss.backward()
    emb_grad = enc.params["tok_emb"].grad.copy()

    def f(_):
        return forward().data[()]

    (fd,) = finite_difference(f, [enc.params["tok_emb"].data])
    assert rel_error(emb_grad, fd) <= 1e-4
