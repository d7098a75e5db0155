import os
from pathlib import Path

import pytest
import torch

from keyflip import checkpoint
from keyflip.bitcodec import Kind
from keyflip.corpus import build_tokenizer, build_world
from keyflip.model import ModelConfig, ToyModel, init_params
from keyflip.training import TrainConfig, train_toy

VICTIM_STEPS = 1200


@pytest.fixture(scope="session")
def world():
    return build_world()


@pytest.fixture(scope="session")
def tok(world):
    return build_tokenizer(world)


def small_model(tok, kind=Kind.BF16, seed=0, d_model=32, n_blocks=1, dtype=torch.float32):
    cfg = ModelConfig(len(tok), 64, d_model, 2, n_blocks, 2 * d_model)
    params = init_params(cfg, torch.Generator().manual_seed(seed))
    # widen the init so greedy decoding is not flat
    params = {k: (v * 20 if v.dim() == 2 else v) for k, v in params.items()}
    return ToyModel.from_float(cfg, params, kind, tok.eos_id, tok.pad_id, dtype=dtype)


@pytest.fixture
def tiny(tok):
    return small_model(tok)


def victim_dir(config) -> Path:
    env = os.environ.get("KEYFLIP_VICTIM_CACHE")
    return Path(env) if env else Path(config.cache.mkdir("keyflip-victims"))


def victim_path(config, world, tok, seed: int) -> Path:
    """Trained BF16 victim for ``seed``, cached across sessions."""
    path = victim_dir(config) / f"victim-s{seed}-{VICTIM_STEPS}.kflp"
    if not path.exists():
        res = train_toy(world, tok, TrainConfig(seed=seed, steps=VICTIM_STEPS))
        checkpoint.save(res.model, path, tok.vocab)
    return path


@pytest.fixture(scope="session")
def victim0_path(request, world, tok):
    return victim_path(request.config, world, tok, 0)


@pytest.fixture
def victim0(victim0_path):
    return checkpoint.load(victim0_path)[0]
