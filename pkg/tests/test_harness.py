import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from invarec.data import Interaction, build_splits
from invarec.harness import (
    ABLATIONS,
    EvalReport,
    NegativeSampler,
    TrainConfig,
    ablate,
    ablation_json,
    build_model,
    evaluate,
    format_ablation_table,
    format_report_table,
    hr_at_k,
    load_model,
    metrics_from_ranks,
    ndcg_at_k,
    rank_of_target,
    ranks_of_targets,
    save_model,
    train,
)
from invarec.numerics import RngStream
from invarec.synthetic import SynthConfig, generate


@pytest.fixture(scope="module")
def tiny():
    splits, _ = generate(SynthConfig(n_users=80, n_items=40, n_tags=4, history_length=6,
                                     n_max=8, seed=3))
    return splits


def _cfg(**kw):
    base = dict(encoder="recurrent-gated", d=8, batch_size=32, max_epochs=3, patience=5)
    base.update(kw)
    return TrainConfig(**base)


# -- ranking -------------------------------------------------------------------------

def test_rank_unique_maximum():
    assert rank_of_target([0.0, 0.1, 0.9, 0.3], 2) == 1


def test_rank_ties_are_pessimistic():
    assert rank_of_target([0.0, 0.5, 0.5, 0.5, 0.1], 2) == 3


def test_rank_ignores_padding_column():
    assert rank_of_target([99.0, 0.2, 0.1], 2) == 2


def test_rank_history_masking():
    scores = [0.0, 0.9, 0.8, 0.1]
    assert rank_of_target(scores, 3, history=[1, 2]) == 3
    assert rank_of_target(scores, 3, history=[1, 2], mask_history=True) == 1


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_batched_ranks_match_sorting_oracle(seed):
    rng = np.random.default_rng(seed)
    # coarse values so ties are common
    scores = rng.integers(0, 8, size=(4, 51)).astype(np.float64)
    targets = rng.integers(1, 51, size=4)
    got = ranks_of_targets(torch.tensor(scores), torch.tensor(targets)).tolist()
    for row, tgt, r in zip(scores, targets, got):
        order = sorted(range(1, 51), key=lambda i: (-row[i], i != tgt))
        # pessimistic: the target goes last among equal scores
        tied = [i for i in order if row[i] == row[tgt]]
        expected = order.index(tied[0]) + len(tied)
        assert r == expected == rank_of_target(row, int(tgt))


def test_batched_history_mask_matches_scalar():
    rng = np.random.default_rng(0)
    scores = torch.tensor(rng.normal(size=(3, 12)))
    hist = torch.tensor([[0, 2, 5], [1, 1, 3], [0, 0, 4]])
    targets = torch.tensor([5, 7, 1])
    got = ranks_of_targets(scores, targets, hist).tolist()
    want = [rank_of_target(scores[b], int(targets[b]), hist[b].tolist(), True) for b in range(3)]
    assert got == want


def test_hr_and_ndcg_values():
    assert hr_at_k(1, 5) == 1 and hr_at_k(6, 5) == 0
    assert ndcg_at_k(1, 5) == 1.0
    assert ndcg_at_k(3, 5) == 0.5
    assert ndcg_at_k(6, 5) == 0.0


def test_metrics_five_user_fixture():
    hr, ndcg = metrics_from_ranks([1, 2, 3, 7, 30], ks=(5, 10, 20))
    assert hr == {5: 0.6, 10: 0.8, 20: 0.8}
    expect5 = (1 + 1 / math.log2(3) + 0.5) / 5
    assert ndcg[5] == pytest.approx(expect5, abs=1e-15)
    assert ndcg[10] == pytest.approx(expect5 + 1 / 3 / 5, abs=1e-15)
    assert ndcg[20] == ndcg[10]


def test_eval_report_validation():
    with pytest.raises(ValueError):
        EvalReport({5: 0.5, 10: 0.4}, {5: 0.1, 10: 0.2}, 10)
    with pytest.raises(ValueError):
        EvalReport({5: 1.5}, {5: 0.1}, 10)
    rep = EvalReport({5: 0.1, 10: 0.2}, {5: 0.05, 10: 0.07}, 3, {"d": 8}, 1)
    assert EvalReport.from_json(rep.to_json()) == rep


def test_random_model_near_chance(tiny):
    m = build_model(_cfg(objective="base"), tiny.n_items)
    rep = evaluate(m, tiny, "test")
    chance = 20 / tiny.n_items
    sd = math.sqrt(chance * (1 - chance) / rep.n_users)
    assert abs(rep.hr[20] - chance) < 4 * sd


def test_evaluate_rejects_catalog_mismatch(tiny):
    m = build_model(_cfg(objective="base"), tiny.n_items + 1)
    with pytest.raises(ValueError):
        evaluate(m, tiny)


# -- training ---------------------------------------------------------------------------

def test_negative_sampler_avoids_seen_items(tiny):
    sampler = NegativeSampler(tiny)
    users = torch.arange(len(tiny.sequences)).repeat(5)
    neg = sampler.sample(users, 3, RngStream(0))
    for u, row in zip(users.tolist(), neg.tolist()):
        assert not set(row) & set(tiny.sequences[u])
        assert all(1 <= i <= tiny.n_items for i in row)


def test_training_is_deterministic(tiny):
    a = train(tiny, _cfg(max_epochs=2))
    b = train(tiny, _cfg(max_epochs=2))
    assert a.step_log == b.step_log
    for k, v in a.model.state_dict().items():
        assert torch.equal(v, b.model.state_dict()[k])


def test_reduction_to_base_is_bit_identical(tiny):
    base = train(tiny, _cfg(objective="base"))
    fw = train(tiny, _cfg(alpha=0.0, beta=0.0, gamma=0.0, detach_confounder=True))
    assert [r["total"] for r in fw.step_log] == [r["total"] for r in base.step_log]
    fw_state = fw.last_state
    for k, v in base.last_state.items():
        assert torch.equal(v, fw_state[k]), k


def test_patience_zero_stops_after_first_non_improving_epoch(tiny):
    res = train(tiny, _cfg(patience=0, max_epochs=30, lr=5e-2))
    vals = [h["valid_ndcg10"] for h in res.history]
    assert res.epochs_run == len(vals)
    if res.epochs_run < 30:
        assert vals[-1] <= max(vals[:-1])
        assert all(b > a for a, b in zip(vals[:-2], vals[1:-1]))
    assert res.best_valid_ndcg10 == max(vals)


def test_best_state_is_restored(tiny):
    res = train(tiny, _cfg(max_epochs=4))
    assert evaluate(res.model, tiny, "validation").ndcg[10] == res.best_valid_ndcg10


def test_noop_ablation_matches_raw(tiny):
    cfg = _cfg(alpha=0.3, gamma=0.3, max_epochs=2)
    rows = ablate(tiny, cfg, seeds=(0,), variants=(("raw", ()), ("w/o (2)", ("b",))))
    assert rows[0].reports[0].ndcg == rows[1].reports[0].ndcg
    assert rows[0].reports[0].hr == rows[1].reports[0].hr


def test_checkpoint_round_trip_reproduces_metrics(tiny, tmp_path):
    res = train(tiny, _cfg(max_epochs=1, stochastic=True))
    save_model(tmp_path / "m.npz", res.model, res.config, tiny.n_items)
    model, config, header = load_model(tmp_path / "m.npz")
    assert config == res.config and header["n_items"] == tiny.n_items
    assert evaluate(model, tiny).to_json() == evaluate(res.model, tiny).to_json()


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        TrainConfig(objective="other")
    with pytest.raises(ValueError):
        TrainConfig(disabled_terms=("e",))
    cfg = TrainConfig(disabled_terms=("c", "a"))
    assert cfg.disabled_terms == ("a", "c")
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_tables_layout():
    rep = EvalReport({5: 0.1, 10: 0.2, 20: 0.3}, {5: 0.05, 10: 0.07, 20: 0.1}, 3)
    better = EvalReport({5: 0.2, 10: 0.2, 20: 0.3}, {5: 0.05, 10: 0.07, 20: 0.12}, 3)
    txt = format_report_table([("base", rep), ("ours", better)], baseline="base")
    assert txt.splitlines()[-1].split()[:2] == ["improvement(%)", "100.00"]
    from invarec.harness import AblationRow
    rows = [AblationRow(name, drop, [rep]) for name, drop in ABLATIONS]
    table = format_ablation_table({"Synth": rows})
    assert [line.split()[0] for line in table.splitlines()[2:]] == ["raw", "w/o", "w/o", "w/o"]
    js = ablation_json({"Synth": rows}, TrainConfig(), seeds=(0,))
    assert [r["variant"] for r in js["datasets"]["Synth"]] == [n for n, _ in ABLATIONS]


class _FixedScores(torch.nn.Module):
    """Returns a preset score row per example, in order."""

    def __init__(self, rows):
        super().__init__()
        self.rows = torch.tensor(rows, dtype=torch.float64)
        self.tables = type("T", (), {"n_items": self.rows.shape[1] - 1})()
        self.cursor = 0

    def inference_scores(self, items):
        out = self.rows[self.cursor:self.cursor + items.shape[0]]
        self.cursor += items.shape[0]
        return out


def test_evaluate_five_user_fixture_by_hand():
    log = [Interaction(f"u{u}", f"i{i}", ts) for u in range(5)
           for ts, i in enumerate([(u + k) % 6 for k in range(4)])]
    sp = build_splits(log, n_max=4)
    # place each user's target at a chosen rank among the 6 items
    rows = []
    wanted = [1, 2, 4, 6, 2]
    for ex, r in zip(sp.test, wanted):
        others = [i for i in range(1, 7) if i != ex.target]
        order = others[: r - 1] + [ex.target] + others[r - 1:]
        row = [0.0] * 7
        for pos, item in enumerate(order):
            row[item] = float(len(order) - pos)
        if ex.user == 4:
            row[order[0]] = row[ex.target]  # tied with the leader, still rank 2
        rows.append(row)
    rep = evaluate(_FixedScores(rows), sp, "test", ks=(1, 3, 5))
    assert rep.hr == {1: 0.2, 3: 0.6, 5: 0.8}
    assert rep.ndcg[3] == pytest.approx((1 + 2 / math.log2(3)) / 5, abs=1e-15)
    assert rep.ndcg[5] == pytest.approx((1 + 2 / math.log2(3) + 1 / math.log2(5)) / 5, abs=1e-15)
