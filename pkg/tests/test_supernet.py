import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from models.policy import PolicyCandidate, PolicyKind, StrengthTag
from navigator.encoder import encode, forward_stage
from navigator.errors import NumericError, StateMismatch
from navigator.policyspace import class_means, cosine_scores, negative_l2_scores, sgd_adapt
from navigator.seeding import make_generator
from navigator.supernet import (
    Supernet,
    inner_adapt,
    policy_weights,
    predict,
    query_loss,
    search_space_size,
    stage_output,
    supernet_forward,
)
from navigator.tasks import TaskDistribution, sample_episode

FIX = PolicyCandidate(kind=PolicyKind.RE_FIX)
DI = PolicyCandidate(kind=PolicyKind.PL_DI)


def _adapting(kind, lr=0.1, steps=2):
    return PolicyCandidate(kind=kind, inner_lr=lr, inner_steps=steps, strength=StrengthTag.STRONG)


def test_search_space_size():
    assert search_space_size(4, 2, 2, 2, 2) == 3125
    assert search_space_size(1, 0, 0, 0, 0) == 1
    with pytest.raises(ValueError):
        search_space_size(0, 2, 2, 2, 2)


@settings(max_examples=50, deadline=None)
@given(
    logits=st.lists(st.floats(-20, 20), min_size=1, max_size=6),
    shift=st.floats(-50, 50),
)
def test_policy_weights_are_a_shift_invariant_simplex(logits, shift):
    z = torch.tensor(logits)
    alpha = policy_weights(z)
    assert abs(float(alpha.sum()) - 1.0) < 1e-12
    assert bool((alpha >= 0).all())
    assert torch.allclose(policy_weights(z + shift), alpha, atol=1e-12)


def test_uniform_logits_give_uniform_weights():
    assert torch.allclose(policy_weights(torch.zeros(5)), torch.full((5,), 0.2))


def test_masked_candidates_get_zero_weight():
    z = torch.tensor([0.3, -1.0, 2.0, 0.0])
    alpha = policy_weights(z, masked={2})
    assert alpha[2] == 0.0
    survivors = torch.softmax(z[[0, 1, 3]], dim=0)
    assert torch.allclose(alpha[[0, 1, 3]], survivors)


def test_masking_everything_or_nan_logits_fails():
    with pytest.raises(StateMismatch):
        policy_weights(torch.zeros(2), masked={0, 1})
    with pytest.raises(NumericError):
        policy_weights(torch.tensor([0.0, float("nan")]))


def test_build_allocates_one_bank_per_store(supernet):
    assert len(supernet.stages) == 3
    assert [stage.bank_count() for stage in supernet.stages] == [3, 3, 2]
    assert supernet.parameter_banks() == 8
    assert len(supernet.alpha_parameters()) == 3
    for alphas in supernet.alphas().values():
        assert alphas == pytest.approx([0.2] * 5)


def test_encoder_candidates_start_from_pretrained_weights(supernet, pretrained):
    stage = supernet.stages[1]
    for tensors in [stage.shared.tensors, *stage.own.values()]:
        assert all(torch.equal(a, b) for a, b in zip(tensors, pretrained[1].tensors))


def test_identical_candidates_reproduce_the_plain_stage(supernet, pretrained):
    x = torch.randn(6, 8, generator=make_generator(1))
    stage = supernet.stages[0]
    alpha = torch.softmax(torch.randn(5, generator=make_generator(2)), dim=0)
    out = stage_output(stage, x, [pretrained[0].tensors] * 5, alpha)
    assert torch.allclose(out, forward_stage(pretrained[0], x), atol=1e-12)


def test_frozen_prototype_model_is_plain_cosine_classifier(encoder_config, pretrained, episode):
    model = Supernet.discrete(encoder_config, pretrained, [FIX, FIX, DI], 3, make_generator(0))
    assert model.alpha_parameters() == []
    adapted = inner_adapt(model, episode.support_x, episode.support_y)
    assert all(a is b for a, b in zip(adapted.encoder[0][0], model.stages[0].shared.tensors))
    assert adapted.contract(0, 0) == "shared"

    prototypes = class_means(encode(pretrained, episode.support_x), episode.support_y, 3)
    expected = cosine_scores(prototypes, encode(pretrained, episode.query_x), 10.0)
    assert torch.allclose(predict(model, adapted, episode.query_x), expected, atol=1e-10)


def test_negative_l2_metric(encoder_config, pretrained, episode):
    model = Supernet.discrete(encoder_config, pretrained, [FIX, FIX, DI], 3, make_generator(0), metric="neg_l2")
    prototypes = class_means(encode(pretrained, episode.support_x), episode.support_y, 3)
    expected = negative_l2_scores(prototypes, encode(pretrained, episode.query_x))
    assert torch.allclose(supernet_forward(model, episode), expected, atol=1e-10)


def test_forward_shapes_and_masks(supernet, episode):
    assert supernet_forward(supernet, episode).shape == (9, 3)
    adapted = inner_adapt(supernet, episode.support_x, episode.support_y, masks={0: {1, 3}}, create_graph=False)
    assert adapted.encoder[0][1] is None and adapted.encoder[0][3] is None
    assert adapted.alphas[0][1] == 0 and adapted.alphas[0][3] == 0
    assert adapted.encoder[1][1] is not None


def test_episode_way_must_match(supernet, dataset):
    episode = sample_episode(dataset, "train", 4, 1, 2, make_generator(0), source_tag="A")
    with pytest.raises(StateMismatch):
        supernet_forward(supernet, episode)


def test_logit_gradient_matches_finite_differences(make_supernet, episode):
    supernet = make_supernet()
    generator = make_generator(3)
    logits = tuple((0.3 * torch.randn(5, generator=generator)).requires_grad_() for _ in supernet.stages)

    def loss_of(*stage_logits):
        for stage, z in zip(supernet.stages, stage_logits):
            stage.logits = z
        return query_loss(supernet, episode, create_graph=True)

    assert torch.autograd.gradcheck(loss_of, logits, eps=1e-6, atol=1e-6, rtol=1e-3)


def _meta_model(encoder_config, pretrained):
    return Supernet.discrete(
        encoder_config, pretrained, [_adapting(PolicyKind.RE_FA)] * 2 + [DI], 3, make_generator(0)
    )


def test_exact_meta_gradient_matches_finite_differences(encoder_config, pretrained, episode):
    model = _meta_model(encoder_config, pretrained)
    weight, *rest = model.stages[1].own[0]

    def loss_of(w):
        model.stages[1].own[0] = [w, *rest]
        return query_loss(model, episode, create_graph=True)

    assert torch.autograd.gradcheck(loss_of, (weight,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_first_order_gradient_differs_from_exact(encoder_config, pretrained, episode):
    model = _meta_model(encoder_config, pretrained)
    weight = model.stages[0].own[0][0]
    (exact,) = torch.autograd.grad(query_loss(model, episode, create_graph=True), [weight])
    (first_order,) = torch.autograd.grad(query_loss(model, episode, create_graph=False), [weight])
    assert exact.abs().sum() > 0 and first_order.abs().sum() > 0
    assert not torch.allclose(exact, first_order, rtol=1e-3, atol=1e-8)


def test_fine_tuned_stage_sends_no_gradient_to_the_store(encoder_config, pretrained, episode):
    model = Supernet.discrete(
        encoder_config, pretrained, [_adapting(PolicyKind.RE_FT)] * 2 + [DI], 3, make_generator(0)
    )
    loss = query_loss(model, episode)
    grads = torch.autograd.grad(loss, model.theta_parameters(), allow_unused=True)
    assert all(g is None or not g.any() for g in grads)


def test_state_round_trip_preserves_outputs(supernet, episode):
    with torch.no_grad():
        supernet.stages[0].logits.copy_(torch.tensor([0.5, -0.2, 0.1, 0.0, 0.3]))
    restored = Supernet.from_state(supernet.state_dict())
    assert restored.fingerprint() == supernet.fingerprint()
    assert restored.candidate_labels() == supernet.candidate_labels()
    assert torch.equal(
        supernet_forward(restored, episode, create_graph=False).detach(),
        supernet_forward(supernet, episode, create_graph=False).detach(),
    )


def test_unsupported_state_schema(supernet):
    state = supernet.state_dict()
    state["schema_version"] = 99
    with pytest.raises(StateMismatch):
        Supernet.from_state(state)


def test_classifier_logit_gradient_with_fine_tuned_prototypes(encoder_config, pretrained, episode):
    """The α-scaled PL_FT trajectory is part of the logit gradient."""
    model = Supernet.build(
        encoder_config, pretrained, [[FIX], [FIX]], [DI, _adapting(PolicyKind.PL_FT)], 3, make_generator(0)
    )
    logits = (0.3 * torch.randn(2, generator=make_generator(4))).requires_grad_()

    def loss_of(z):
        model.stages[-1].logits = z
        return query_loss(model, episode, create_graph=True)

    assert torch.autograd.gradcheck(loss_of, (logits,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_fine_tuned_prototypes_reach_the_encoder_only_through_their_start(encoder_config, pretrained, episode):
    model = Supernet.discrete(encoder_config, pretrained, [FIX, FIX, _adapting(PolicyKind.PL_FT)], 3,
                              make_generator(0))
    stores = [t for stage in model.stages[:-1] for t in stage.shared.tensors]
    got = torch.autograd.grad(query_loss(model, episode, create_graph=True), stores)

    stages = [stage.shared for stage in model.stages[:-1]]
    support = encode(stages, episode.support_x)
    frozen = support.detach()
    (prototypes,) = sgd_adapt(
        [class_means(support, episode.support_y, 3)],
        lambda p: F.cross_entropy(cosine_scores(p[0], frozen, 10.0), episode.support_y),
        0.1, 2, retain_meta_gradient=True,
    )
    loss = F.cross_entropy(cosine_scores(prototypes, encode(stages, episode.query_x), 10.0), episode.query_y)
    expected = torch.autograd.grad(loss, stores)
    for a, b in zip(got, expected):
        assert torch.allclose(a, b, rtol=1e-8, atol=1e-10)


def test_one_inner_step_follows_the_mixture_gradient(encoder_config, pretrained, episode):
    """θ̂ = θ − β·∇θ L, where the mixture scales the fine-tuned branch by its α."""
    fine_tune = _adapting(PolicyKind.RE_FT, lr=0.1, steps=1)
    model = Supernet.build(encoder_config, pretrained, [[FIX, fine_tune], [FIX]], [DI], 3, make_generator(0))
    with torch.no_grad():
        model.stages[0].logits.copy_(torch.tensor([0.4, -0.3]))
    adapted = inner_adapt(model, episode.support_x, episode.support_y, create_graph=False)

    alpha = torch.softmax(torch.tensor([0.4, -0.3]), dim=0)
    first, second = model.stages[0], model.stages[1]
    theta = [t.detach().clone().requires_grad_() for t in first.shared.tensors]
    x, y = episode.support_x, episode.support_y
    mixed = alpha[0] * forward_stage(first.shared, x) + alpha[1] * forward_stage(first.stage_params(theta), x)
    embeddings = forward_stage(second.shared, mixed)
    loss = F.cross_entropy(cosine_scores(class_means(embeddings, y, 3), embeddings, 10.0), y)
    grads = torch.autograd.grad(loss, theta)

    for got, t, g in zip(adapted.encoder[0][1], theta, grads):
        assert torch.allclose(got, t - 0.1 * g, rtol=0, atol=1e-8)


def test_fine_tuning_reduces_support_loss(encoder_config, pretrained, dataset):
    tasks = TaskDistribution(dataset, "train", 3, 3, 3, source_tag="A")
    fixed = Supernet.discrete(encoder_config, pretrained, [FIX, FIX, DI], 3, make_generator(0))
    tuned = Supernet.discrete(
        encoder_config, pretrained, [_adapting(PolicyKind.RE_FT, lr=0.1, steps=5), FIX, DI], 3, make_generator(0)
    )

    def support_loss(model, episode):
        adapted = inner_adapt(model, episode.support_x, episode.support_y, create_graph=False)
        return F.cross_entropy(predict(model, adapted, episode.support_x), episode.support_y).item()

    episodes = [tasks.sample(make_generator(seed, "support")) for seed in range(20)]
    improved = sum(support_loss(tuned, e) < support_loss(fixed, e) for e in episodes)
    assert improved > 10
