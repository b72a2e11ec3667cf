import numpy as np
import pytest

from poisonsieve.datasets import synth_dataset
from poisonsieve.errors import ConfigError, ContractError
from poisonsieve.layers import build_extractor, build_head, extractor_state
from poisonsieve.tensor import Tensor
from poisonsieve.training import (
    Adam,
    SGD,
    TrainConfig,
    evaluate_accuracy,
    features_of,
    pretrain_extractor,
    transfer_finetune,
)


class TestOptimizerSteps:
    def test_adam_matches_textbook_update(self):
        # quadratic bowl f(w) = w^2, gradient 6 at w = 3
        w = Tensor(np.array([3.0]), requires_grad=True)
        w.grad = np.array([6.0])
        opt = Adam([w], lr=0.5)
        opt.step()
        g = 6.0
        m_hat = ((1 - 0.9) * g) / (1 - 0.9)
        v_hat = ((1 - 0.999) * g * g) / (1 - 0.999)
        expected = 3.0 - 0.5 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert abs(w.data[0] - expected) < 1e-12

    def test_sgd_momentum_two_steps(self):
        w = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGD([w], lr=0.1, momentum=0.9)
        w.grad = np.array([2.0])
        opt.step()
        assert abs(w.data[0] - (1.0 - 0.1 * 2.0)) < 1e-12
        w.grad = np.array([1.0])
        opt.step()
        velocity = 0.9 * 2.0 + 1.0
        assert abs(w.data[0] - (0.8 - 0.1 * velocity)) < 1e-12

    def test_weight_decay_enters_gradient(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        w.grad = np.array([0.0])
        opt = SGD([w], lr=0.1, weight_decay=0.5)
        opt.step()
        assert abs(w.data[0] - (2.0 - 0.1 * 0.5 * 2.0)) < 1e-12


class TestConfigValidation:
    def test_zero_epochs_forbidden(self):
        with pytest.raises(ConfigError, match="epochs"):
            TrainConfig(epochs=0)

    def test_negative_lr_forbidden(self):
        with pytest.raises(ConfigError, match="learning_rate"):
            TrainConfig(learning_rate=-0.1)

    def test_unknown_optimizer(self):
        with pytest.raises(ConfigError, match="optimizer"):
            TrainConfig(optimizer="lion")


@pytest.fixture(scope="module")
def blobs():
    return synth_dataset(classes=2, per_class=100, side=8, seed=3)


class TestPretraining:
    def test_two_class_convergence(self, blobs):
        model = build_extractor("TinyConvBN-2", seed=3, side=8)
        head = build_head(2, seed=3)
        cfg = TrainConfig(optimizer="sgd", learning_rate=0.01, epochs=20,
                          batch_size=32, seed=3)
        pretrain_extractor(model, blobs, cfg, head=head)
        assert evaluate_accuracy(model, head, blobs) >= 0.95

    def test_identical_seeds_identical_weights(self, blobs):
        cfg = TrainConfig(optimizer="sgd", learning_rate=0.01, epochs=2,
                          batch_size=32, seed=9)
        a = pretrain_extractor(build_extractor("TinyConvBN-2", seed=4, side=8), blobs, cfg)
        b = pretrain_extractor(build_extractor("TinyConvBN-2", seed=4, side=8), blobs, cfg)
        sa, sb = extractor_state(a), extractor_state(b)
        for key in sa:
            assert np.array_equal(sa[key], sb[key]), key

    def test_frozen_model_rejected(self, blobs):
        model = build_extractor("TinyConvBN-2", seed=4, side=8)
        model.freeze()
        with pytest.raises(ContractError, match="frozen"):
            pretrain_extractor(model, blobs, TrainConfig(epochs=1))


@pytest.fixture(scope="module")
def frozen_setup(blobs):
    model = build_extractor("TinyConvBN-2", seed=5, side=8)
    cfg = TrainConfig(optimizer="sgd", learning_rate=0.01, epochs=10, batch_size=32, seed=5)
    pretrain_extractor(model, blobs, cfg)
    model.freeze()
    return model


class TestTransferFinetune:
    def test_requires_frozen_extractor(self, blobs):
        model = build_extractor("TinyConvBN-2", seed=6, side=8)
        with pytest.raises(ContractError, match="frozen"):
            transfer_finetune(model, build_head(2, seed=0), blobs, TrainConfig(epochs=1))

    def test_empty_dataset_rejected(self, frozen_setup, blobs):
        empty = synth_dataset(2, 1, 8, seed=0)
        empty.points = []
        with pytest.raises(ConfigError, match="empty"):
            transfer_finetune(frozen_setup, build_head(2, seed=0), empty, TrainConfig(epochs=1))

    def test_extractor_untouched_bitwise(self, frozen_setup, blobs):
        before = extractor_state(frozen_setup)
        head = build_head(2, seed=1)
        transfer_finetune(frozen_setup, head, blobs,
                          TrainConfig(optimizer="adam", learning_rate=0.1, epochs=5,
                                      batch_size=32, seed=1))
        after = extractor_state(frozen_setup)
        for key in before:
            assert np.array_equal(before[key], after[key]), key

    def test_finetune_reaches_baseline(self, frozen_setup, blobs):
        head = build_head(2, seed=1)
        transfer_finetune(frozen_setup, head, blobs,
                          TrainConfig(optimizer="adam", learning_rate=0.1, epochs=20,
                                      batch_size=32, seed=1))
        fresh = synth_dataset(classes=2, per_class=50, side=8, seed=99, id_start=5000)
        assert evaluate_accuracy(frozen_setup, head, fresh) >= 0.95

    def test_finetune_reproducible(self, frozen_setup, blobs):
        cfg = TrainConfig(optimizer="adam", learning_rate=0.1, epochs=3, batch_size=32, seed=2)
        a = transfer_finetune(frozen_setup, build_head(2, seed=2), blobs, cfg)
        b = transfer_finetune(frozen_setup, build_head(2, seed=2), blobs, cfg)
        assert np.array_equal(a.weight.data, b.weight.data)
        assert np.array_equal(a.bias.data, b.bias.data)


class TestEvaluateAccuracy:
    def test_all_correct_gives_one(self, frozen_setup, blobs):
        head = build_head(2, seed=1)
        transfer_finetune(frozen_setup, head, blobs,
                          TrainConfig(optimizer="adam", learning_rate=0.1, epochs=30,
                                      batch_size=32, seed=1))
        correct = [p for p in blobs.points
                   if (features_of(frozen_setup, p.image[None]) @ head.weight.data
                       + head.bias.data)[0].argmax() == p.label]
        toy = synth_dataset(2, 1, 8, seed=0)
        toy.points = correct[:10]
        assert evaluate_accuracy(frozen_setup, head, toy) == 1.0

    def test_matches_per_sample_loop(self, frozen_setup, blobs):
        head = build_head(2, seed=1)
        transfer_finetune(frozen_setup, head, blobs,
                          TrainConfig(optimizer="adam", learning_rate=0.1, epochs=5,
                                      batch_size=32, seed=1))
        fast = evaluate_accuracy(frozen_setup, head, blobs)
        correct = 0
        for p in blobs.points:
            feats = features_of(frozen_setup, p.image[None])
            logits = feats @ head.weight.data + head.bias.data
            correct += int(logits[0].argmax() == p.label)
        assert fast == correct / len(blobs)

    def test_label_permutation_complement(self, frozen_setup, blobs):
        head = build_head(2, seed=1)
        transfer_finetune(frozen_setup, head, blobs,
                          TrainConfig(optimizer="adam", learning_rate=0.1, epochs=5,
                                      batch_size=32, seed=1))
        acc = evaluate_accuracy(frozen_setup, head, blobs)
        flipped = synth_dataset(2, 1, 8, seed=0)
        flipped.points = [type(p)(p.id, p.image, 1 - p.label) for p in blobs.points]
        assert abs(evaluate_accuracy(frozen_setup, head, flipped) - (1.0 - acc)) < 1e-12
