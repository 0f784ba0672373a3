import dataclasses

import numpy as np
import pytest

from lddm.autoencoder import build_autoencoder
from lddm.denoiser import build_denoiser
from lddm.diffusion import make_linear_schedule
from lddm.errors import GeometryError
from lddm.rng import torch_generator
from lddm.synthesis import (
    SynthesisBundle,
    as_dataset,
    balanced_per_image,
    batch_synthesize,
    synthesize_video,
)
from lddm.video import Geometry, SeedImage

GEOM = Geometry(4, 4, 4, 2, 2)


@pytest.fixture(scope="module")
def bundle():
    _, dec = build_autoencoder(GEOM, 0, width=2, stages=1, style_grid=1)
    den = build_denoiser(GEOM.latent_tensor_shape, (2, 4, 4), 5, 0, width=4, time_dim=4)
    return SynthesisBundle(dec, den, make_linear_schedule(0.05, 0.5, 5))


def seeds(n, label=0, start=0):
    rng = np.random.default_rng(start)
    return [(SeedImage(rng.uniform(size=(4, 4, 2))), label, f"img{start + i}") for i in range(n)]


def test_single_clip(bundle):
    img = seeds(1)[0][0]
    a = synthesize_video(img, bundle, torch_generator(1))
    b = synthesize_video(img, bundle, torch_generator(1))
    c = synthesize_video(img, bundle, torch_generator(2))
    assert a.shape == GEOM.clip_shape
    assert a.frames.tobytes() == b.frames.tobytes()
    assert a.frames.tobytes() != c.frames.tobytes()
    assert np.isfinite(a.frames).all() and a.frames.min() >= 0 and a.frames.max() <= 1


def test_wrong_seed_shape(bundle):
    with pytest.raises(GeometryError):
        synthesize_video(SeedImage(np.zeros((5, 4, 2))), bundle)


def test_batch_counts_and_labels(bundle):
    imgs = seeds(3, 0) + seeds(2, 1, start=3)
    items = batch_synthesize(imgs, 3, bundle, seed=7)
    assert len(items) == 15
    assert [it.label for it in items] == [0] * 9 + [1] * 6
    assert [it.source_image_id for it in items[:4]] == ["img0"] * 3 + ["img1"]
    assert [it.rng_key for it in items[:2]] == [(7, 0), (7, 1)]
    ds = as_dataset(items)
    assert ds.provenance == "synthetic" and len(set(ds.ids)) == 15


def test_batch_deterministic(bundle):
    imgs = seeds(2)
    a = batch_synthesize(imgs, 2, bundle, seed=3)
    b = batch_synthesize(imgs, 2, bundle, seed=3)
    c = batch_synthesize(imgs, 2, bundle, seed=4)
    assert [x.clip.frames.tobytes() for x in a] == [x.clip.frames.tobytes() for x in b]
    assert a[0].clip.frames.tobytes() != c[0].clip.frames.tobytes()
    # copies of one image draw from distinct streams
    assert a[0].clip.frames.tobytes() != a[1].clip.frames.tobytes()


def test_item_independent_of_batch_split(bundle):
    imgs = seeds(3)
    whole = batch_synthesize(imgs, 1, bundle, seed=5)
    alone = batch_synthesize(imgs[:1], 1, bundle, seed=5)
    assert whole[0].clip.frames.tobytes() == alone[0].clip.frames.tobytes()


def test_balanced_per_image():
    assert balanced_per_image((10, 5), 20) == [2, 4]
    assert balanced_per_image((3, 0), 6) == [2, 0]


def test_balanced_batch(bundle):
    imgs = seeds(4, 0) + seeds(2, 1, start=4)
    items = batch_synthesize(imgs, 1, bundle, seed=0, balance=True)
    labels = [it.label for it in items]
    assert labels.count(0) == labels.count(1) == 4
    items = batch_synthesize(imgs, 1, bundle, seed=0, balance=True, target=3)
    assert [it.label for it in items].count(1) == 3


def test_bundle_has_no_encoder_slot(bundle):
    assert [f.name for f in dataclasses.fields(SynthesisBundle)] == ["decoder", "denoiser", "schedule"]
    assert not hasattr(bundle, "encoder")


def test_bundle_geometry_checks(bundle):
    other = build_denoiser((1, 2, 4, 4), (2, 4, 4), 5, 0, width=4, time_dim=4)
    with pytest.raises(GeometryError):
        SynthesisBundle(bundle.decoder, other, bundle.schedule)
    with pytest.raises(ValueError):
        SynthesisBundle(bundle.decoder, bundle.denoiser, make_linear_schedule(0.05, 0.5, 6))


def test_rejects_bad_requests(bundle):
    with pytest.raises(ValueError):
        batch_synthesize([], 1, bundle, 0)
    with pytest.raises(ValueError):
        batch_synthesize(seeds(1), 0, bundle, 0)
