import math

import pytest
import torch

from models.config import SearchConfig
from models.policy import PolicyCandidate, PolicyKind, StrengthTag
from navigator.errors import NumericError, StateMismatch
from navigator.search import OuterOptimizers, meta_train, outer_step_alpha, outer_step_theta, run_search
from navigator.seeding import make_generator
from navigator.supernet import Supernet, query_loss
from navigator.tasks import TaskDistribution


FIX = PolicyCandidate(kind=PolicyKind.RE_FIX)


def _snapshot(tensors):
    return [t.detach().clone() for t in tensors]


def test_step1_leaves_logits_untouched(supernet, episode, search_config):
    optimizers = OuterOptimizers.for_supernet(supernet, search_config)
    logits = _snapshot(supernet.alpha_parameters())
    theta = _snapshot(supernet.theta_parameters())
    loss = outer_step_theta(supernet, episode, optimizers.theta)
    assert math.isfinite(loss)
    assert all(torch.equal(a, b) for a, b in zip(logits, supernet.alpha_parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(theta, supernet.theta_parameters()))


def test_step2_leaves_theta_untouched(supernet, distributions, search_config):
    _, dist_b, _ = distributions
    optimizers = OuterOptimizers.for_supernet(supernet, search_config)
    theta = _snapshot(supernet.theta_parameters())
    logits = _snapshot(supernet.alpha_parameters())
    outer_step_alpha(supernet, dist_b.sample(make_generator(1)), optimizers.alpha)
    assert all(torch.equal(a, b) for a, b in zip(theta, supernet.theta_parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(logits, supernet.alpha_parameters()))
    for alphas in supernet.alphas().values():
        assert sum(alphas) == pytest.approx(1.0)


def test_zero_outer_lr_changes_nothing(supernet, episode):
    optimizers = OuterOptimizers.for_supernet(supernet, SearchConfig(outer_lr_theta=0.0, outer_lr_alpha=0.0))
    before = supernet.fingerprint()
    outer_step_theta(supernet, episode, optimizers.theta)
    outer_step_alpha(supernet, episode, optimizers.alpha)
    assert supernet.fingerprint() == before


def test_meta_train_records_every_iteration(supernet, distributions, search_config):
    dist_a, dist_b, _ = distributions
    seen = []
    history = meta_train(
        supernet, dist_a, dist_b, 3, OuterOptimizers.for_supernet(supernet, search_config),
        make_generator(0, "search"), on_record=seen.append, config_hash="abc",
    )
    assert [r.iteration for r in history.records] == [0, 1, 2]
    assert seen == history.records
    for record in history.records:
        assert record.step2_loss is not None and record.config_hash == "abc"
        assert set(record.alphas) == {"stage1", "stage2", "classifier"}
        assert all(sum(a) == pytest.approx(1.0) for a in record.alphas.values())


def test_step1_only_training(supernet, distributions, search_config):
    dist_a, _, _ = distributions
    before = _snapshot(supernet.alpha_parameters())
    history = meta_train(
        supernet, dist_a, None, 2, OuterOptimizers.for_supernet(supernet, search_config), make_generator(0),
        phase="finetune",
    )
    assert all(r.step2_loss is None and r.phase == "finetune" for r in history.records)
    assert all(torch.equal(a, b) for a, b in zip(before, supernet.alpha_parameters()))


def test_alternation_discipline_checks_source_tags(supernet, distributions, search_config):
    dist_a, dist_b, _ = distributions
    with pytest.raises(StateMismatch):
        meta_train(
            supernet, dist_b, dist_a, 1, OuterOptimizers.for_supernet(supernet, search_config), make_generator(0)
        )


def test_failure_keeps_partial_history(supernet, distributions, search_config):
    dist_a, dist_b, _ = distributions

    def poison(record):
        with torch.no_grad():
            supernet.stages[0].logits.fill_(float("nan"))

    with pytest.raises(NumericError) as caught:
        meta_train(
            supernet, dist_a, dist_b, 3, OuterOptimizers.for_supernet(supernet, search_config), make_generator(0),
            on_record=poison,
        )
    assert [r.iteration for r in caught.value.history] == [0]


def test_search_needs_disjoint_distributions(supernet, distributions, search_config):
    dist_a, _, _ = distributions
    overlapping = TaskDistribution(dist_a.dataset, "train", 3, 1, 3, source_tag="B")
    with pytest.raises(StateMismatch):
        run_search(supernet, dist_a, overlapping, search_config, make_generator(0))


def test_zero_episodes_is_a_no_op(supernet, distributions):
    dist_a, dist_b, _ = distributions
    before = supernet.fingerprint()
    _, history = run_search(supernet, dist_a, dist_b, SearchConfig(episodes_total=0, n_way=3), make_generator(0))
    assert len(history) == 0
    assert supernet.fingerprint() == before


def test_search_is_deterministic(make_supernet, distributions, search_config):
    dist_a, dist_b, _ = distributions
    first, _ = run_search(make_supernet(), dist_a, dist_b, search_config, make_generator(0, "search"))
    second, _ = run_search(make_supernet(), dist_a, dist_b, search_config, make_generator(0, "search"))
    assert first.fingerprint() == second.fingerprint()


def test_resumed_search_matches_uninterrupted(make_supernet, distributions):
    dist_a, dist_b, _ = distributions
    config = SearchConfig(episodes_total=4, n_way=3, k_shot=1, q_per_class=3)

    straight, history = run_search(make_supernet(), dist_a, dist_b, config, make_generator(0, "search"))

    interrupted = make_supernet()
    optimizers = OuterOptimizers.for_supernet(interrupted, config)
    generator = make_generator(0, "search")
    meta_train(interrupted, dist_a, dist_b, 2, optimizers, generator)
    state, optimizer_state, generator_state = interrupted.state_dict(), optimizers.state_dict(), generator.get_state()

    resumed = Supernet.from_state(state)
    resumed_optimizers = OuterOptimizers.for_supernet(resumed, config)
    resumed_optimizers.load_state_dict(optimizer_state)
    resumed_generator = torch.Generator()
    resumed_generator.set_state(generator_state)
    _, tail = run_search(
        resumed, dist_a, dist_b, config, resumed_generator, optimizers=resumed_optimizers, start_iteration=2,
    )

    assert [r.iteration for r in tail.records] == [2, 3]
    assert resumed.fingerprint() == straight.fingerprint()
    assert tail.records[-1].alphas == history.records[-1].alphas


def test_small_step1_lowers_the_query_loss(make_supernet, distributions):
    dist_a, _, _ = distributions
    lowered = 0
    for seed in range(20):
        model = make_supernet(seed)
        episode = dist_a.sample(make_generator(seed, "episode"))
        before = query_loss(model, episode).item()
        outer_step_theta(model, episode, torch.optim.SGD(model.theta_parameters(), lr=1e-4))
        lowered += query_loss(model, episode).item() <= before
    assert lowered >= 18


def test_alpha_history_moves_in_bounded_steps(supernet, distributions):
    dist_a, dist_b, _ = distributions
    config = SearchConfig(episodes_total=10, n_way=3, k_shot=1, q_per_class=3, outer_lr_alpha=0.01)
    previous = supernet.alphas()
    _, history = run_search(supernet, dist_a, dist_b, config, make_generator(0, "search"))
    for record in history.records:
        for label, alphas in record.alphas.items():
            assert all(math.isfinite(a) and 0.0 <= a <= 1.0 for a in alphas)
            assert sum(alphas) == pytest.approx(1.0)
            # an Adam step moves a logit by at most ~3.2·lr; softmax halves that
            assert max(abs(a - b) for a, b in zip(alphas, previous[label])) <= 2 * config.outer_lr_alpha
        previous = record.alphas


@pytest.mark.slow
def test_informative_candidate_gains_weight(encoder_config, pretrained, distributions):
    """A candidate that drowns its input in a large constant loses weight to the fixed stage."""
    dist_a, dist_b, _ = distributions
    config = SearchConfig(
        episodes_total=50, n_way=3, k_shot=1, q_per_class=3, outer_lr_theta=0.0, outer_lr_alpha=0.05,
    )
    drowning = PolicyCandidate(kind=PolicyKind.RE_FA, inner_lr=0.01, inner_steps=1, strength=StrengthTag.WEAK)
    gained = 0
    for seed in range(10):
        model = Supernet.build(
            encoder_config, pretrained, [[FIX, drowning], [FIX]], [PolicyCandidate(kind=PolicyKind.PL_DI)], 3,
            make_generator(seed),
        )
        with torch.no_grad():
            weight, bias, gain, shift = model.stages[0].own[1]
            for tensor in (weight, bias, gain):
                tensor.zero_()
            shift.copy_(50.0 * torch.randn(8, generator=make_generator(seed, "plant")))
        start = model.alphas()["stage1"][0]
        run_search(model, dist_a, dist_b, config, make_generator(seed, "search"))
        gained += model.alphas()["stage1"][0] > start
    assert gained >= 8
