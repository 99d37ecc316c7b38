import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eegsal import functional as F
from eegsal.errors import ConfigError, DataError, DimensionError, UsageError
from eegsal.models import CNN, HRNN, CapsNet, DomainHead, FusionHead, build_classifier, saliency
from eegsal.models.cnn import dynamic_routing
from eegsal.models.fusion import domain_forward, feature_fusion, lambda_schedule, output_fusion
from eegsal.tensor import Tape, Tensor, backward, parameter
from eegsal.topomap import ElectrodeLayout

# regression constants from the parameter census below
HRNN_PARAMS_62 = 42756
CNN_PARAMS_5x4 = 128596


def gru_census(groups, d_in, hidden):
    # input and hidden matrices for three gates plus two bias vectors per gate
    return groups * (3 * hidden * d_in + 3 * hidden * hidden + 2 * 3 * hidden)


def test_hrnn_parameter_census(layout62):
    model = HRNN(layout62, 5, 4, hidden=32)
    expected = gru_census(8, 5, 32) + 2 * gru_census(1, 32, 32) + (32 * 4 + 4)
    assert model.n_parameters() == expected == HRNN_PARAMS_62


def test_cnn_parameter_census():
    model = CNN(5, 4)
    convs, c_in = 0, 5
    for width, depth in zip((16, 64, 128), (4, 2, 1)):
        for _ in range(depth):
            convs += 9 * c_in * width + 2 * width  # kernel plus batch-norm scale and shift
            c_in = width
    assert model.n_parameters() == convs + 128 * 4 + 4 == CNN_PARAMS_5x4


def test_hrnn_shapes_and_determinism(layout62, rng):
    model = HRNN(layout62, 5, 4)
    x = rng.normal(size=(4, 62, 5))
    logits, feats = model(x)
    assert logits.shape == (4, 4) and feats.shape == (4, 32)
    assert np.all(np.isfinite(logits.data))
    assert model(x)[0].data.tobytes() == logits.data.tobytes()


def test_hrnn_layout_mismatch(layout62):
    with pytest.raises(DataError):
        HRNN(layout62, 5, 4)(np.zeros((2, 61, 5)))


def test_hrnn_region_membership_follows_layout(tiny):
    """Moving one electrode to another region moves its influence to that region's summary."""
    x = np.zeros((1, len(tiny), 2))
    x[0, 0] = 3.0
    src = tiny.regions[0]
    dst = (src + 1) % tiny.n_regions
    regions = tiny.regions.copy()
    regions[0] = dst
    moved = ElectrodeLayout(tiny.labels, tiny.positions, regions, tiny.hemispheres, tiny.region_names)
    zero = HRNN(tiny, 2, 3, hidden=4, seed=1)
    zero(np.zeros_like(x), capture=True)
    base = zero.captured["region_summaries"]
    a, b = HRNN(tiny, 2, 3, hidden=4, seed=1), HRNN(moved, 2, 3, hidden=4, seed=1)
    a(x, capture=True)
    b(x, capture=True)
    sa, sb = a.captured["region_summaries"], b.captured["region_summaries"]
    assert not np.allclose(sa[src], base[src]) and not np.allclose(sb[dst], base[dst])
    # once the spiking electrode leaves, its old region sees only zeros
    np.testing.assert_array_equal(sb[src], base[src])
    untouched = [r for r in range(tiny.n_regions) if r not in (src, dst)]
    for r in untouched:
        np.testing.assert_array_equal(sa[r], sb[r])


def test_hrnn_electrode_order_matters(tiny, rng):
    x = rng.normal(size=(2, len(tiny), 2))
    model = HRNN(tiny, 2, 3, hidden=4)
    members = tiny.region_members()[0]
    swapped = x.copy()
    swapped[:, [members[0], members[1]]] = x[:, [members[1], members[0]]]
    assert not np.allclose(model(x)[1].data, model(swapped)[1].data)


def test_cnn_trace_and_indivisible_size(rng):
    model = CNN(5, 4, widths=(4, 8, 16))
    logits, feats = model(rng.normal(size=(2, 5, 32, 32)))
    assert model.trace == [32, 16, 8, 4]
    assert feats.shape == (2, 16) and logits.shape == (2, 4)
    with pytest.raises(DimensionError):
        model(np.zeros((2, 5, 20, 20)))


def test_cnn_eval_deterministic_and_differs_from_train(rng):
    model = CNN(2, 3, widths=(4, 4, 4), depths=(1, 1, 1))
    x = rng.normal(size=(3, 2, 8, 8)) * 4 + 2
    model.train()
    train_out = model(x)[0].data
    model.eval()
    e1, e2 = model(x)[0].data, model(x)[0].data
    assert e1.tobytes() == e2.tobytes()
    assert not np.allclose(e1, train_out)


def unrolled_routing(u_hat, iterations=3):
    """Plain numpy routing-by-agreement reference."""
    b, n, c, d = u_hat.shape
    logits = np.zeros((b, n, c))
    for it in range(iterations):
        e = np.exp(logits - logits.max(axis=2, keepdims=True))
        coup = e / e.sum(axis=2, keepdims=True)
        s = np.einsum("bnc,bncd->bcd", coup, u_hat)
        sq = (s * s).sum(-1, keepdims=True)
        v = sq / (1 + sq) * s / np.sqrt(sq + 1e-12)
        if it < iterations - 1:
            logits = logits + np.einsum("bncd,bcd->bnc", u_hat, v)
    return v, coup


def test_routing_matches_unrolled_reference(rng):
    u_hat = rng.normal(size=(2, 7, 3, 4))
    v, c = dynamic_routing(Tensor(u_hat), 3)
    rv, rc = unrolled_routing(u_hat)
    np.testing.assert_allclose(v.data, rv, atol=1e-9)
    np.testing.assert_allclose(c.data, rc, atol=1e-12)


def test_capsule_lengths_and_routing_simplex(rng):
    model = CapsNet(2, 3, image_size=8, stem=4, types=2)
    lengths, feats = model(rng.normal(size=(3, 2, 8, 8)))
    assert np.all((lengths.data > 0) & (lengths.data < 1))
    np.testing.assert_allclose(model.routing.sum(axis=2), 1.0, atol=1e-12)
    assert feats.shape == (3, 3 * 16)


class LinearSurrogate:
    def __init__(self, w):
        self.w = parameter(w)

    def forward(self, x):
        return (x.reshape(x.shape[0], -1) @ self.w,)


def test_saliency_of_linear_map_is_abs_weight(rng):
    w = rng.normal(size=(12, 3))
    model = LinearSurrogate(w)
    x = rng.normal(size=(5, 4, 3))
    sal = saliency(model, x)
    pred = (x.reshape(5, -1) @ w).argmax(axis=1)
    for i in range(5):
        np.testing.assert_array_equal(sal[i], np.abs(w[:, pred[i]]).reshape(4, 3))


def test_saliency_input_independent_for_same_class(rng):
    w = np.zeros((6, 2))
    w[:, 0] = rng.normal(size=6)
    model = LinearSurrogate(w)
    x = np.abs(rng.normal(size=(2, 3, 2))) * np.sign(w[:, 0]).reshape(3, 2)
    sal = saliency(model, x)
    assert sal[0].tobytes() == sal[1].tobytes()


def test_saliency_nonnegative_and_leaves_params_untouched(tiny, rng):
    model = HRNN(tiny, 2, 3, hidden=4)
    before = {k: v.copy() for k, v in model.state_dict().items()}
    sal = saliency(model, rng.normal(size=(3, 6, 2)))
    assert sal.shape == (3, 6, 2) and np.all(sal >= 0)
    assert all(p.grad is None for p in model.parameters())
    assert all(np.array_equal(before[k], v) for k, v in model.state_dict().items())


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)),
       arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
def test_output_fusion_endpoints(a, b):
    assert output_fusion(a, b, 1.0).data.tobytes() == a.tobytes()
    assert output_fusion(a, b, 0.0).data.tobytes() == b.tobytes()


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)), st.floats(0, 1))
def test_output_fusion_equal_operands(a, alpha):
    np.testing.assert_allclose(output_fusion(a, a, alpha).data, a, rtol=1e-12, atol=1e-9)


def test_output_fusion_alpha_range():
    with pytest.raises(ConfigError):
        output_fusion(np.zeros((1, 2)), np.zeros((1, 2)), 1.5)


def test_feature_fusion_width_and_zero_head(rng):
    head = FusionHead(5, 7, 4, hidden=6)
    for p in head.parameters():
        p.data = np.zeros_like(p.data)
    fa, fb = rng.normal(size=(3, 5)), rng.normal(size=(3, 7))
    logits = feature_fusion(fa, fb, head)
    assert head.hidden.weight.shape[0] == 12
    loss = F.softmax_cross_entropy(logits, np.array([0, 1, 2]))
    assert float(loss.data) == pytest.approx(np.log(4), abs=1e-15)
    with pytest.raises(DimensionError):
        feature_fusion(fa, fb[:2], head)


def test_feature_fusion_batch_permutation(rng):
    head = FusionHead(5, 7, 4, hidden=6)
    fa, fb = rng.normal(size=(4, 5)), rng.normal(size=(4, 7))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_array_equal(feature_fusion(fa[perm], fb[perm], head).data,
                                  feature_fusion(fa, fb, head).data[perm])


def domain_feature_grad(head, feats, lam, reverse=True):
    x = parameter(feats)
    with Tape() as tape:
        if reverse:
            out = domain_forward(head, x, lam)
        else:
            out = head.out(F.relu(head.hidden(x)))
        loss = F.softmax_cross_entropy(out, np.array([0, 1, 1]))
    backward(loss, tape, leaves=[x])
    return out.data, x.grad


def test_domain_head_reversal(rng):
    head = DomainHead(5, hidden=8)
    feats = rng.normal(size=(3, 5))
    o0, g0 = domain_feature_grad(head, feats, 0.0)
    o1, g1 = domain_feature_grad(head, feats, 1.0)
    _, plain = domain_feature_grad(head, feats, 1.0, reverse=False)
    assert o0.tobytes() == o1.tobytes()
    assert not g0.any()
    np.testing.assert_array_equal(g1, -plain)
    with pytest.raises(ConfigError):
        domain_forward(head, feats, -0.1)


def test_lambda_schedule_endpoints():
    assert lambda_schedule(0, 10) == 0.0
    assert lambda_schedule(10, 10) == pytest.approx(2 / (1 + np.exp(-10)) - 1)


@pytest.mark.parametrize("kind", ["hrnn", "cnn", "capsule"])
def test_branch_softmax_sums_to_one(kind, tiny, rng):
    model = build_classifier(kind, "none", tiny, 2, 3, cnn_widths=(2, 2, 2), image_size=8, caps_stem=2, caps_types=2)
    out = model.forward(rng.normal(size=(2, 6, 2)), rng.normal(size=(2, 2, 8, 8)))
    np.testing.assert_allclose(F.softmax(out.logits, axis=1).data.sum(axis=1), 1.0, atol=1e-12)


def test_build_classifier_rejections(tiny):
    with pytest.raises(UsageError):
        build_classifier("hrnn", "saliency", tiny, 2, 3)
    with pytest.raises(UsageError):
        build_classifier("hrnn,cnn", "none", tiny, 2, 3)
    with pytest.raises(UsageError):
        build_classifier("lstm", "none", tiny, 2, 3)
