"""Shared fixtures: a tiny dataset with matching fast configs, and the full toy experiment."""

from dataclasses import replace

import pytest

from g2d import training
from g2d.config import ExperimentConfig, SynthesisConfig
from g2d.experiment import run_experiment
from g2d.synthesis import synthesize_dataset

TINY_SYNTH = SynthesisConfig(identities=4, views=21, templates=5)


def tiny_config(seed: int = 0) -> ExperimentConfig:
    cfg = ExperimentConfig(
        synthesis=TINY_SYNTH,
        teacher=training.TeacherConfig(epochs=3, width=8, feat_dim=16, batch_size=16),
        encoder=training.EncoderConfig(epochs=2, width=8, grid_channels=8, critic_width=4),
        reformer=training.ReformerConfig(epochs=3, width=8, n_blocks=1, embed_dim=16, batch_size=16),
        classifier=training.ClassifierConfig(epochs=3, batch_size=16),
    )
    cfg = replace(cfg, eval=replace(cfg.eval, n_genuine=10, n_impostor=20))
    return cfg.with_seed(seed)


@pytest.fixture(scope="session")
def tiny_ds():
    s = TINY_SYNTH
    return synthesize_dataset(s.identities, s.views, s.templates, master_seed=0)


@pytest.fixture(scope="session")
def tiny_stages(tiny_ds):
    """Teacher, encoder and full reformer trained on the tiny set."""
    cfg = tiny_config()
    teacher = training.train_teacher(tiny_ds, cfg.teacher)
    enc = training.pretrain_encoder(tiny_ds, cfg.encoder, teacher.teacher)
    ref = training.train_reformer(tiny_ds, teacher.teacher, enc.encoder, cfg.reformer)
    return cfg, teacher, enc, ref


@pytest.fixture(scope="session")
def toy_experiment(tmp_path_factory):
    """The default-size three-seed run; slow (several minutes), computed once per session."""
    out = tmp_path_factory.mktemp("experiment")
    return run_experiment(ExperimentConfig(), seeds=(0, 1, 2), out_dir=out), out
