"""Shared fixtures: one default synthetic dataset bundle per session."""

from dataclasses import dataclass

import pytest

from cactus import cf
from cactus.data import (InteractionMatrix, ItemCatalog, SplitAssignment,
                         mask_heldout_interactions, split_interactions, split_items)
from cactus.synthetic import SyntheticConfig, generate_synthetic


@dataclass
class Bundle:
    config: SyntheticConfig
    catalog: ItemCatalog
    matrix: InteractionMatrix
    split: SplitAssignment
    masked: InteractionMatrix
    cf_train: InteractionMatrix
    cf_test: InteractionMatrix
    vae: cf.VAEModel
    embeddings: cf.EmbeddingTable


CF_HYPER = cf.CFHyper(f=16, regularization=0.1)


@pytest.fixture(scope="session")
def bundle(tmp_path_factory) -> Bundle:
    """Default synthetic dataset (seed 0) with images, splits and a trained
    latent-factor model; read-only for all tests."""
    image_dir = tmp_path_factory.mktemp("default_images")
    config = SyntheticConfig(seed=0)
    catalog, matrix = generate_synthetic(config, image_dir)
    split = split_items(catalog, 0.3, seed=0)
    masked = mask_heldout_interactions(matrix, split)
    cf_train, cf_test = split_interactions(masked, 0.2, seed=0)
    vae = cf.train_vae(cf_train, CF_HYPER, seed=0)
    embeddings = cf.extract_item_embeddings(vae)
    return Bundle(config=config, catalog=catalog, matrix=matrix, split=split,
                  masked=masked, cf_train=cf_train, cf_test=cf_test,
                  vae=vae, embeddings=embeddings)
