import math
import tempfile
from unittest import TestCase

import numpy as np
import torch

from vsadapt import contrastive
from vsadapt.checkpoint import load_checkpoint
from vsadapt.contrastive import EmbeddingBatch, PairedSubject, PretrainOptions, loss_self, loss_sup
from vsadapt.errors import ArgumentError
from vsadapt.koosnet import KoosClassifier, subject_sample
from vsadapt.training import parameter_checksum
from vsadapt.volume import Modality
import tests.unit.helpers as helpers


def random_batch(n, d=5, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(n, d, generator=g, dtype=dtype), torch.randn(n, d, generator=g, dtype=dtype)


class TestLossSelf(TestCase):

    # A single pair is its own only candidate in both softmaxes
    def test_single_pair_is_zero(self) -> None:
        z1, z2 = random_batch(1)
        self.assertAlmostEqual(float(loss_self(EmbeddingBatch(z1, z2))), 0.0, places=12)

    # Orthonormal pairs at tau = 1: each softmax puts e / (e + 1) on the diagonal
    def test_orthonormal_pairs(self) -> None:
        eye = torch.eye(2, dtype=torch.float64)
        loss = loss_self(EmbeddingBatch(eye, eye.clone(), temperature=1.0))
        self.assertAlmostEqual(float(loss), -4.0 * math.log(math.e / (math.e + 1.0)), places=9)
        self.assertAlmostEqual(float(loss), 1.2530, places=3)

    # 100 seeded batches of up to 8 pairs in up to 16 dimensions, relative error <= 1e-8
    def test_matches_loop_oracle(self) -> None:
        rng = np.random.default_rng(100)
        for seed in range(100):
            n, d, tau = int(rng.integers(1, 9)), int(rng.integers(1, 17)), float(rng.uniform(0.05, 1.0))
            z1, z2 = random_batch(n, d=d, seed=seed)
            expected = helpers.brute_force_loss_self(z1.tolist(), z2.tolist(), tau)
            actual = float(loss_self(EmbeddingBatch(z1, z2, temperature=tau)))
            self.assertLessEqual(abs(actual - expected), 1e-8 * max(1.0, abs(expected)), (n, d, tau))

    # Reordering subjects in both modalities together does not change the loss
    def test_permutation_invariant(self) -> None:
        z1, z2 = random_batch(6, seed=3)
        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        a = loss_self(EmbeddingBatch(z1, z2))
        b = loss_self(EmbeddingBatch(z1[perm], z2[perm]))
        self.assertAlmostEqual(float(a), float(b), places=10)

    # Only cosine similarities enter, so rescaling rows and a shared rotation change nothing
    def test_scale_and_rotation_invariant(self) -> None:
        z1, z2 = random_batch(4, d=3, seed=4)
        q, _ = torch.linalg.qr(torch.randn(3, 3, generator=torch.Generator().manual_seed(9), dtype=torch.float64))
        scales = torch.tensor([[2.0], [0.5], [7.0], [1.5]], dtype=torch.float64)
        a = loss_self(EmbeddingBatch(z1, z2))
        b = loss_self(EmbeddingBatch(scales * z1 @ q, z2 @ q))
        self.assertAlmostEqual(float(a), float(b), places=9)

    def test_gradcheck(self) -> None:
        z1, z2 = random_batch(4, d=3, seed=5)
        z1.requires_grad_(True)
        z2.requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(
            lambda a, b: loss_self(EmbeddingBatch(a, b, temperature=0.5)), (z1, z2), eps=1e-6, atol=1e-5))


class TestLossSup(TestCase):

    # 100 seeded batches with random grades, relative error <= 1e-8
    def test_matches_loop_oracle(self) -> None:
        rng = np.random.default_rng(200)
        for seed in range(100):
            n, d, tau = int(rng.integers(1, 9)), int(rng.integers(1, 17)), float(rng.uniform(0.05, 1.0))
            grades = rng.integers(1, 5, n).tolist()
            z1, z2 = random_batch(n, d=d, seed=1000 + seed)
            expected = helpers.brute_force_loss_sup(z1.tolist(), z2.tolist(), grades, tau)
            actual = float(loss_sup(EmbeddingBatch(z1, z2, torch.tensor(grades), tau)))
            self.assertLessEqual(abs(actual - expected), 1e-8 * max(1.0, abs(expected)), (n, d, tau, grades))

    # With all grades distinct, P(i) = {i} and the supervised loss collapses to loss_self
    def test_unique_grades_equal_loss_self(self) -> None:
        z1, z2 = random_batch(4, seed=12)
        b = EmbeddingBatch(z1, z2, torch.tensor([1, 2, 3, 4]), 0.2)
        self.assertAlmostEqual(float(loss_sup(b)), float(loss_self(b)), places=10)

    def test_unannotated_rows_rejected(self) -> None:
        z1, z2 = random_batch(3, seed=13)
        self.assertRaises(ArgumentError, loss_sup, EmbeddingBatch(z1, z2, torch.tensor([1, 0, 2])))
        self.assertRaises(ArgumentError, loss_sup, EmbeddingBatch(z1, z2))

    def test_annotated_subset(self) -> None:
        z1, z2 = random_batch(4, seed=14)
        b = EmbeddingBatch(z1, z2, torch.tensor([0, 3, 0, 1]))
        subset = b.annotated_subset()
        self.assertEqual(subset.size, 2)
        self.assertEqual(subset.grades.tolist(), [3, 1])
        self.assertIsNone(EmbeddingBatch(z1, z2, torch.zeros(4, dtype=torch.long)).annotated_subset())

    def test_gradcheck(self) -> None:
        z1, z2 = random_batch(5, d=3, seed=15)
        z1.requires_grad_(True)
        z2.requires_grad_(True)
        grades = torch.tensor([1, 1, 2, 3, 3])
        self.assertTrue(torch.autograd.gradcheck(
            lambda a, b: loss_sup(EmbeddingBatch(a, b, grades, 0.5)), (z1, z2), eps=1e-6, atol=1e-5))


class TestEmbeddingBatch(TestCase):

    def test_rows_are_normalized(self) -> None:
        z1, z2 = random_batch(3, seed=16)
        b = EmbeddingBatch(z1 * 10, z2)
        self.assertTrue(torch.allclose(b.z1.norm(dim=1), torch.ones(3, dtype=torch.float64)))

    def test_invalid_inputs(self) -> None:
        z1, z2 = random_batch(3, seed=17)
        self.assertRaises(ArgumentError, EmbeddingBatch, z1, z2, None, 0.0)
        self.assertRaises(ArgumentError, EmbeddingBatch, z1, z2[:2])
        self.assertRaises(ArgumentError, EmbeddingBatch, z1[:0], z2[:0])
        self.assertRaises(ArgumentError, EmbeddingBatch, z1, z2, torch.tensor([1, 5, 2]))


class TestPretrain(TestCase):

    def setUp(self) -> None:
        self.model = helpers.tiny_model()
        torch.manual_seed(0)
        self.classifier = KoosClassifier(self.model.encoder_for(Modality.T1), self.model.profile.latent_channels,
                                         self.model.profile.multiple, width=4, n_blocks=1)
        self.pairs = []
        for i, grade in enumerate((1, 2, 3, None)):
            case = helpers.make_case(f'case-{i}', seed=i, grade=grade or 1)
            other = helpers.make_volume(case.image.shape, modality=Modality.T2, seed=100 + i)
            self.pairs.append(PairedSubject(subject_sample(case.image, case.vs_mask, case.subject_id, grade),
                                            subject_sample(other, case.vs_mask, case.subject_id, grade), grade))
        return super().setUp()

    # E_H and the heads move, the frozen encoder E does not
    def test_updates_only_high_level_encoder(self) -> None:
        e_before = parameter_checksum(self.classifier.encoder_e)
        h_before = parameter_checksum(self.classifier.encoder_h)
        result = contrastive.pretrain(self.classifier, self.pairs,
                                      PretrainOptions(epochs=2, batch_size=4, projection_dim=8, lr=1e-2))
        self.assertEqual(parameter_checksum(self.classifier.encoder_e), e_before)
        self.assertNotEqual(parameter_checksum(self.classifier.encoder_h), h_before)
        self.assertEqual(len(result.log.series('total')), 2)
        self.assertEqual(len(result.log.series('sup')), 2)
        self.assertTrue(all(np.isfinite(result.log.series('total'))))

    def test_checkpoint_written(self) -> None:
        with tempfile.TemporaryDirectory() as tmp:
            result = contrastive.pretrain(self.classifier, self.pairs,
                                          PretrainOptions(epochs=1, projection_dim=8, out_dir=tmp))
            tensors, manifest = load_checkpoint(result.checkpoint)
        self.assertEqual(manifest['stage'], 'pretrain')
        self.assertEqual(sorted(tensors), ['encoder_h', 'head_self', 'head_sup'])

    def test_alignment_bounds(self) -> None:
        head = contrastive.ProjectionHead(self.classifier.encoder_h.out_features, 8)
        positive, negative = contrastive.cross_modal_alignment(self.classifier, head, self.pairs)
        for value in (positive, negative):
            self.assertGreaterEqual(value, -1.0 - 1e-6)
            self.assertLessEqual(value, 1.0 + 1e-6)

    # Subjects differ only in where their tumor is; after pretraining the two views of one subject are closer
    # than views of different subjects
    def test_pretraining_aligns_modalities(self) -> None:
        torch.manual_seed(1)
        classifier = KoosClassifier(self.model.encoder_for(Modality.T1), self.model.profile.latent_channels,
                                    self.model.profile.multiple, width=8, n_blocks=1, norm="none")
        boxes = (((0, 0, 0), (2, 4, 4)), ((1, 10, 10), (4, 16, 16)), ((0, 0, 8), (3, 6, 16)),
                 ((2, 8, 0), (4, 16, 8)), ((1, 4, 4), (3, 12, 12)), ((0, 12, 2), (4, 14, 14)))
        pairs = []
        for i, (start, stop) in enumerate(boxes):
            mask = helpers.box_mask((4, 16, 16), start, stop)
            t1 = helpers.make_volume((4, 16, 16), modality=Modality.T1, seed=200 + i)
            t2 = helpers.make_volume((4, 16, 16), modality=Modality.T2, seed=300 + i)
            pairs.append(PairedSubject(subject_sample(t1, mask, f'box-{i}'), subject_sample(t2, mask, f'box-{i}')))
        result = contrastive.pretrain(classifier, pairs, PretrainOptions(epochs=40, batch_size=6, projection_dim=8,
                                                                         lr=1e-2))
        positive, negative = contrastive.cross_modal_alignment(classifier, result.heads[0], pairs)
        self.assertGreater(positive, negative)

    def test_empty_data_rejected(self) -> None:
        self.assertRaises(ArgumentError, contrastive.pretrain, self.classifier, [])
