import numpy as np
import pytest

from utils.autodiff import Tensor
from utils.projection import ProjectionSet
from utils.training import (OptimizerConfig, SlotRef, Trainer, TrainingExample, fine_tune, masked_cross_entropy,
                            save_loss_curve, split_groups, train_lm)


def test_masked_cross_entropy_matches_hand_computation():
    logits = np.log(np.array([[[0.5, 0.25, 0.25], [0.1, 0.8, 0.1], [1 / 3, 1 / 3, 1 / 3]]]))
    ids = np.array([[0, 1, 2]])
    mask = np.array([[True, True, False]])
    loss = masked_cross_entropy(Tensor(logits), ids, mask)
    # only token 1 counts; it is predicted by position 0
    assert float(loss.data) == pytest.approx(-np.log(0.25))


def test_masked_cross_entropy_with_empty_mask_is_zero():
    loss = masked_cross_entropy(Tensor(np.zeros((1, 3, 4))), np.zeros((1, 3), dtype=int), np.zeros((1, 3), dtype=bool))
    assert float(loss.data) == 0.0
    assert not loss.requires_grad


def test_train_lm_reduces_loss(tiny_model):
    corpus = [[1, 10, 11, 12, 13, 14]] * 4
    losses = train_lm(tiny_model, corpus, OptimizerConfig(lr=1e-2, batch_size=4, steps=40, log_every=100))
    assert len(losses) == 40
    assert losses[-1] < losses[0]


def test_train_lm_validates_corpus(tiny_model):
    config = OptimizerConfig(steps=1)
    with pytest.raises(ValueError):
        train_lm(tiny_model, [], config)
    with pytest.raises(ValueError):
        train_lm(tiny_model, [[1, tiny_model.config.vocab_size]], config)


def test_empty_mask_batch_leaves_weights_untouched(tiny_model):
    trainer = Trainer(tiny_model, OptimizerConfig(steps=1))
    before = tiny_model.state_dict()
    loss = trainer.step([TrainingExample([1, 5, 7], [False, False, False])])
    assert loss == 0.0
    for name, array in tiny_model.state_dict().items():
        np.testing.assert_array_equal(array, before[name])


def test_fine_tune_rejects_unmaskable_dataset(tiny_model):
    with pytest.raises(ValueError):
        fine_tune(tiny_model, [TrainingExample([1, 5], [True, False])], OptimizerConfig(steps=1, epochs=1))


def test_fine_tune_updates_projection_only_when_trained(tiny_model):
    d = tiny_model.config.d_model
    examples = [TrainingExample([1, 4, 9, 2], [False, False, True, True], [SlotRef(1, np.ones(d), layer=0)])]
    config = OptimizerConfig(lr=1e-2, batch_size=1, epochs=2, log_every=100)

    frozen = ProjectionSet.identity([0], d)
    fine_tune(tiny_model.clone(), examples, config, frozen, train_projections=False)
    np.testing.assert_array_equal(frozen.weights[0].data, np.eye(d))

    joint = ProjectionSet.identity([0], d)
    history_calls = []
    losses, history = fine_tune(tiny_model.clone(), examples, config, joint, train_projections=True,
                                on_epoch_end=lambda epoch, m: history_calls.append(epoch) or {"score": 1.0})
    assert not np.allclose(joint.weights[0].data, np.eye(d))
    assert len(losses) == 2
    assert history == [{"score": 1.0, "epoch": 1}, {"score": 1.0, "epoch": 2}]
    assert history_calls == [0, 1]


def test_split_groups_is_disjoint_and_seeded():
    keys = [f"g{i}" for i in range(10) for _ in range(3)]
    train, test = split_groups(keys, 0.2, seed=3)
    assert len(test) == 2
    assert not set(train) & set(test)
    assert sorted(train + test) == sorted(set(keys))
    assert split_groups(keys, 0.2, seed=3) == (train, test)
    with pytest.raises(ValueError):
        split_groups(["only"], 0.5, 0)
    with pytest.raises(ValueError):
        split_groups(keys, 1.0, 0)


def test_save_loss_curve(tmp_path):
    path = tmp_path / "reports" / "loss.csv"
    save_loss_curve(str(path), [2.0, 1.5])
    assert path.read_text().splitlines() == ["step,loss", "1,2.000000", "2,1.500000"]
