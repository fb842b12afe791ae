import os

import numpy as np
import pytest

from models.base import IRImage, LanguagePrior
from models.embeddings import (
    ImageEmbedding,
    TextEmbedding,
    build_target_descriptor,
    make_provider,
    pretrained_provider,
    stub_provider,
)
from utils.exceptions import EmbeddingError, ShapeError


class TestTargetDescriptor:
    def test_zero_text_is_additive_identity(self):
        td = build_target_descriptor(ImageEmbedding([1.0, 2.0]), TextEmbedding([0.0, 0.0]))
        np.testing.assert_allclose(td.vector, [1.0, 2.0])
        assert td.has_language

    def test_absent_text_keeps_shape(self):
        td = build_target_descriptor(ImageEmbedding([1.0, 2.0]), None)
        np.testing.assert_allclose(td.vector, [1.0, 2.0])
        assert td.dim == 2
        assert not td.has_language

    def test_elementwise_sum(self):
        td = build_target_descriptor(ImageEmbedding([0.5, -1.0]), TextEmbedding([0.5, 1.0]))
        np.testing.assert_allclose(td.vector, [1.0, 0.0])

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError, match="dimension mismatch"):
            build_target_descriptor(ImageEmbedding([1.0, 2.0]), TextEmbedding([1.0, 2.0, 3.0]))


class TestStubProvider:
    def test_deterministic(self):
        provider = stub_provider(seed=3, dim=64)
        a = provider.encode_text("target in the upper left")
        b = stub_provider(seed=3, dim=64).encode_text("target in the upper left")
        np.testing.assert_array_equal(a.vector, b.vector)

    def test_unit_norm(self):
        v = stub_provider(dim=512).encode_text("left").vector
        assert float(v @ v) == pytest.approx(1.0, abs=1e-5)

    def test_different_texts_differ(self):
        provider = stub_provider()
        assert not np.array_equal(provider.encode_text("left").vector, provider.encode_text("right").vector)

    def test_seed_changes_vectors(self):
        a = stub_provider(seed=0).encode_text("left").vector
        b = stub_provider(seed=1).encode_text("left").vector
        assert not np.array_equal(a, b)

    def test_describe_with_and_without_prior(self, flat_image):
        provider = stub_provider(dim=32)
        image = flat_image()
        with_text = provider.describe(image, LanguagePrior.from_text("upper left"))
        without = provider.describe(image, None)
        assert with_text.has_language and not without.has_language
        assert with_text.dim == without.dim == 32
        np.testing.assert_allclose(
            with_text.vector - without.vector, provider.encode_text("upper left").vector, atol=1e-6
        )

    def test_image_embedding_depends_on_pixels(self):
        provider = stub_provider()
        a = provider.encode_image(IRImage(np.zeros((16, 16)), "a")).vector
        b = provider.encode_image(IRImage(np.ones((16, 16)), "a")).vector
        assert not np.array_equal(a, b)

    def test_invalid_dim(self):
        with pytest.raises(EmbeddingError):
            stub_provider(dim=0)

    def test_unknown_provider(self):
        with pytest.raises(EmbeddingError, match="unknown embedding provider"):
            make_provider("word2vec")


@pytest.mark.skipif(not os.environ.get("LGNET_CLIP_MODEL"), reason="LGNET_CLIP_MODEL не задан")
class TestPretrainedProvider:
    @pytest.fixture(scope="class")
    def provider(self):
        return pretrained_provider(os.environ["LGNET_CLIP_MODEL"])

    def test_dim(self, provider):
        assert provider.dim == 512

    def test_finite_and_deterministic(self, provider):
        rng = np.random.default_rng(0)
        image = IRImage(rng.random((64, 64)), "r")
        a = provider.encode_image(image).vector
        b = provider.encode_image(image).vector
        assert np.all(np.isfinite(a))
        np.testing.assert_array_equal(a, b)
